use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fog::{apply_fog, FogRanges};
use super::scene::{render_image, sample_scene, SceneRanges, Shape};
use super::{split_domain, DataError, Result, IMAGE_SIZE, NUM_CLASSES};
use crate::align::Domain;
use crate::detect::BoundingBox;
use crate::params::splitmix;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATION_FILE: &str = "annotations.jsonl";
const MANIFEST_VERSION: u32 = 1;
const FOG_SALT: u64 = 0x6f67_5f73_616c_7431;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    SourceTrain,
    TargetTrain,
    TargetTest,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::SourceTrain, SplitKind::TargetTrain, SplitKind::TargetTest];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::SourceTrain => "source_train",
            SplitKind::TargetTrain => "target_train",
            SplitKind::TargetTest => "target_test",
        }
    }

    fn salt(self) -> u64 {
        self as u64 + 1
    }
}

/// One line of `annotations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image: String,
    pub domain: Domain,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: SplitKind,
    pub domain: Domain,
    pub count: usize,
    pub annotations: String,
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub fog: bool,
    pub scene_ranges: SceneRanges,
    pub fog_ranges: FogRanges,
    pub splits: Vec<SplitManifest>,
}

impl DatasetManifest {
    pub fn split(&self, kind: SplitKind) -> Option<&SplitManifest> {
        self.splits.iter().find(|s| s.name == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
    /// When false the target splits are rendered without fog.
    pub fog: bool,
    pub scene: SceneRanges,
    pub fog_ranges: FogRanges,
}

impl GenerateOptions {
    pub fn new(seed: u64, n_source: usize, n_target: usize, n_test: usize) -> Self {
        Self {
            seed,
            n_source,
            n_target,
            n_test,
            fog: true,
            scene: SceneRanges::default(),
            fog_ranges: FogRanges::default(),
        }
    }

    fn count(&self, kind: SplitKind) -> usize {
        match kind {
            SplitKind::SourceTrain => self.n_source,
            SplitKind::TargetTrain => self.n_target,
            SplitKind::TargetTest => self.n_test,
        }
    }
}

/// Scene seed of image `index` in split `kind`; independent of generation order.
pub fn image_seed(seed: u64, kind: SplitKind, index: usize) -> u64 {
    splitmix(splitmix(seed ^ kind.salt()) ^ index as u64)
}

fn render_one(opts: &GenerateOptions, kind: SplitKind, index: usize) -> Result<(Tensor<f64>, Vec<BoundingBox>)> {
    let s = image_seed(opts.seed, kind, index);
    let scene = sample_scene(s, &opts.scene)?;
    let (img, boxes) = render_image(&scene)?;
    if split_domain(kind) == Domain::Target && opts.fog {
        let fog = opts.fog_ranges.sample(&mut ChaCha8Rng::seed_from_u64(splitmix(s ^ FOG_SALT)));
        Ok((apply_fog(&img, &fog), boxes))
    } else {
        Ok((img, boxes))
    }
}

/// Encodes a `[3, H, W]` image in `[0, 1]` as binary PPM.
pub fn write_ppm(img: &Tensor<f64>) -> Vec<u8> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Decodes binary PPM (maxval 255) into a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let bad = |msg: &str| DataError::format(path, msg.to_string());
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |t: String| t.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 || w == 0 || h == 0 {
        return Err(bad("expected 8-bit PPM with non-zero size"));
    }
    // exactly one whitespace byte separates header and raster
    let start = pos + 1;
    let need = 3 * w * h;
    if bytes.len() < start + need {
        return Err(bad(&format!(
            "truncated raster: {} of {need} bytes",
            bytes.len().saturating_sub(start)
        )));
    }
    if bytes.len() > start + need {
        return Err(bad("trailing bytes after raster"));
    }
    let raster = &bytes[start..];
    let plane = w * h;
    let mut data = vec![0.0; need];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = raster[3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).map_err(|e| DataError::format(path, e.to_string()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

/// Writes the three splits and `manifest.json` under `out`. The output is a
/// pure function of `opts`.
pub fn generate_dataset(out: &Path, opts: &GenerateOptions) -> Result<DatasetManifest> {
    if opts.n_source == 0 || opts.n_target == 0 || opts.n_test == 0 {
        return Err(DataError::Config("every split needs at least one image".into()));
    }
    let mut splits = Vec::with_capacity(3);
    for kind in SplitKind::ALL {
        let dir = out.join(kind.name());
        fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
        let rendered = (0..opts.count(kind))
            .into_par_iter()
            .map(|i| render_one(opts, kind, i))
            .collect::<Result<Vec<_>>>()?;
        let domain = split_domain(kind);
        let mut images = Vec::with_capacity(rendered.len());
        let mut lines = String::new();
        for (i, (img, boxes)) in rendered.into_iter().enumerate() {
            let rel = format!("{}/img_{i:05}.ppm", kind.name());
            write_file(&out.join(&rel), &write_ppm(&img))?;
            let rec = AnnotationRecord {
                image: rel.clone(),
                domain,
                boxes,
            };
            lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            lines.push('\n');
            images.push(rel);
        }
        let ann = format!("{}/{ANNOTATION_FILE}", kind.name());
        write_file(&out.join(&ann), lines.as_bytes())?;
        splits.push(SplitManifest {
            name: kind,
            domain,
            count: images.len(),
            annotations: ann,
            images,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: opts.seed,
        image_size: IMAGE_SIZE,
        num_classes: NUM_CLASSES,
        class_names: Shape::ALL.iter().map(|s| s.name().to_string()).collect(),
        fog: opts.fog,
        scene_ranges: opts.scene,
        fog_ranges: opts.fog_ranges,
        splits,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(&out.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// Decoded images and annotations of one split.
#[derive(Debug, Clone)]
pub struct Split {
    pub kind: SplitKind,
    pub domain: Domain,
    pub images: Vec<Tensor<f64>>,
    pub annotations: Vec<Vec<BoundingBox>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &Split {
        self.splits
            .iter()
            .find(|s| s.kind == kind)
            .expect("load_dataset guarantees all splits")
    }
}

fn load_split(root: &Path, m: &DatasetManifest, sm: &SplitManifest) -> Result<Split> {
    let ann_path = root.join(&sm.annotations);
    if sm.domain != split_domain(sm.name) {
        return Err(DataError::format(
            root.join(MANIFEST_FILE),
            format!("split {} tagged {}", sm.name.name(), sm.domain),
        ));
    }
    if sm.count != sm.images.len() {
        return Err(DataError::format(
            root.join(MANIFEST_FILE),
            format!("split {} lists {} images but count {}", sm.name.name(), sm.images.len(), sm.count),
        ));
    }
    let text = fs::read_to_string(&ann_path).map_err(|e| DataError::io(&ann_path, e))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str::<AnnotationRecord>(l)
                .map_err(|e| DataError::format(&ann_path, format!("line {}: {e}", n + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    if records.len() != sm.images.len() {
        return Err(DataError::format(
            &ann_path,
            format!("{} records for {} images", records.len(), sm.images.len()),
        ));
    }
    let size = m.image_size as f64;
    for (n, (rec, img)) in records.iter().zip(&sm.images).enumerate() {
        let line = n + 1;
        if &rec.image != img || rec.domain != sm.domain {
            return Err(DataError::format(
                &ann_path,
                format!("line {line}: record ({}, {}) does not match manifest ({img}, {})", rec.image, rec.domain, sm.domain),
            ));
        }
        for b in &rec.boxes {
            if b.class >= m.num_classes {
                return Err(DataError::format(&ann_path, format!("line {line}: unknown class id {}", b.class)));
            }
            if b.validate().is_err() || !b.inside(size, size) {
                return Err(DataError::format(&ann_path, format!("line {line}: invalid box {b:?}")));
            }
        }
    }
    let images = sm
        .images
        .par_iter()
        .map(|rel| {
            let path = root.join(rel);
            let img = read_ppm(&path)?;
            if img.shape() != [3, m.image_size, m.image_size] {
                return Err(DataError::format(&path, format!("image shape {:?}", img.shape())));
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Split {
        kind: sm.name,
        domain: sm.domain,
        images,
        annotations: records.into_iter().map(|r| r.boxes).collect(),
    })
}

/// Reads and validates a generated dataset.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mpath = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| DataError::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DataError::format(&mpath, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DataError::format(&mpath, format!("unsupported version {}", manifest.version)));
    }
    if manifest.class_names.len() != manifest.num_classes {
        return Err(DataError::format(&mpath, "class_names length differs from num_classes"));
    }
    let mut splits = Vec::with_capacity(3);
    for kind in SplitKind::ALL {
        let sm = manifest
            .split(kind)
            .ok_or_else(|| DataError::format(&mpath, format!("missing split {}", kind.name())))?;
        let split = load_split(root, &manifest, sm)?;
        if split.is_empty() {
            return Err(DataError::format(&mpath, format!("split {} is empty", kind.name())));
        }
        splits.push(split);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        splits,
    })
}
