use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, Variant};
use super::train::{train, RunRecord};
use super::{HarnessError, Result};
use crate::align::{Block, BlockSet};
use crate::data::Dataset;

/// A labelled configuration to run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub config: TrainConfig,
}

/// Runs every spec, at most `jobs` at a time. Each run is single-threaded
/// and owns `out/<label>/`. Specs with identical configs are trained once.
pub fn run_all(specs: &[RunSpec], data: &Dataset, out: Option<&Path>, jobs: usize) -> Result<Vec<RunRecord>> {
    let mut first: HashMap<String, usize> = HashMap::new();
    let mut unique = Vec::new();
    let slot: Vec<usize> = specs
        .iter()
        .map(|s| {
            let key = s.config.to_config_string();
            *first.entry(key).or_insert_with(|| {
                unique.push(s);
                unique.len() - 1
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let records = pool.install(|| {
        unique
            .par_iter()
            .map(|s| {
                let dir = out.map(|o| o.join(&s.label));
                train(&s.config, data, dir.as_deref())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(slot.into_iter().map(|i| records[i].clone()).collect())
}

fn blocks_label(b: BlockSet) -> String {
    if b.is_empty() {
        "none".into()
    } else {
        b.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("+")
    }
}

/// Fills in an epsilon for attention blocks the base config leaves unset,
/// using the block index as the modulation.
fn with_epsilon_for(mut cfg: TrainConfig) -> TrainConfig {
    for b in cfg.sa_blocks.iter() {
        cfg.epsilon.entry(b.index()).or_insert(b.index() as f64);
    }
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub variant: String,
    pub sd_blocks: String,
    pub sa_blocks: String,
    pub lambda: f64,
    pub mu: f64,
    pub seed: u64,
    pub best_map: f64,
    pub final_map: f64,
    pub best_epoch: usize,
    pub wall_clock_secs: f64,
}

/// The four component variants per seed, optionally followed by block-subset
/// variants: style alignment alone on {3}, {3,4}, {3,4,5} and attention
/// alignment alone on {5}, {4,5}, {3,4,5}.
pub fn ablation_specs(base: &TrainConfig, seeds: &[u64], block_variants: bool) -> Vec<(String, RunSpec)> {
    let mut specs = Vec::new();
    for &seed in seeds {
        let base = TrainConfig { seed, ..base.clone() };
        for v in Variant::ALL {
            specs.push((
                "component".to_string(),
                RunSpec {
                    label: format!("{}-s{seed}", v.label()),
                    config: v.apply(&base),
                },
            ));
        }
        if !block_variants {
            continue;
        }
        for set in [&[3u8][..], &[3, 4], &[3, 4, 5]] {
            let mut c = Variant::SdOnly.apply(&base);
            c.sd_blocks = BlockSet::of(set).expect("alignable");
            specs.push((
                "sd-blocks".to_string(),
                RunSpec {
                    label: format!("sd-{}-s{seed}", blocks_label(c.sd_blocks)),
                    config: c,
                },
            ));
        }
        for set in [&[5u8][..], &[4, 5], &[3, 4, 5]] {
            let mut c = Variant::SaOnly.apply(&base);
            c.sa_blocks = BlockSet::of(set).expect("alignable");
            let c = with_epsilon_for(c);
            specs.push((
                "sa-blocks".to_string(),
                RunSpec {
                    label: format!("sa-{}-s{seed}", blocks_label(c.sa_blocks)),
                    config: c,
                },
            ));
        }
    }
    specs
}

/// Run label without its `-s<seed>` suffix.
fn variant_name(label: &str) -> String {
    label.rsplit_once("-s").map_or(label, |(l, _)| l).to_string()
}

/// Runs an ablation, writing `ablation.csv` (and per-run directories) under `out`.
pub fn ablate(
    base: &TrainConfig,
    data: &Dataset,
    out: Option<&Path>,
    seeds: &[u64],
    block_variants: bool,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let labelled = ablation_specs(base, seeds, block_variants);
    let specs: Vec<RunSpec> = labelled.iter().map(|(_, s)| s.clone()).collect();
    let records = run_all(&specs, data, out, jobs)?;
    let rows: Vec<AblationRow> = labelled
        .iter()
        .zip(&records)
        .map(|((group, spec), r)| AblationRow {
            group: group.clone(),
            variant: variant_name(&spec.label),
            sd_blocks: blocks_label(spec.config.sd_blocks),
            sa_blocks: blocks_label(spec.config.sa_blocks),
            lambda: spec.config.lambda,
            mu: spec.config.mu,
            seed: spec.config.seed,
            best_map: r.best_eval.map,
            final_map: r.final_eval.map,
            best_epoch: r.best_epoch,
            wall_clock_secs: r.wall_clock_secs,
        })
        .collect();
    if let Some(dir) = out {
        write_csv(&dir.join("ablation.csv"), &rows)?;
    }
    Ok(rows)
}

/// Mean best-epoch mAP of each variant over seeds, in first-seen order.
pub fn mean_by_variant(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<String, (f64, usize)> = HashMap::new();
    for r in rows {
        let key = format!("{}/{}", r.group, r.variant);
        let e = acc.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            (0.0, 0)
        });
        e.0 += r.best_map;
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|k| {
            let (s, n) = acc[&k];
            (k, s / n as f64)
        })
        .collect()
}

/// Expected ordering of component variants, in mAP points (0-100).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub source_only: f64,
    pub sd_only: f64,
    pub sa_only: f64,
    pub full: f64,
}

impl OrderingCheck {
    pub fn from_rows(rows: &[AblationRow]) -> Option<Self> {
        let means = mean_by_variant(rows);
        let get = |v: Variant| {
            means
                .iter()
                .find(|(k, _)| k == &format!("component/{}", v.label()))
                .map(|(_, m)| 100.0 * m)
        };
        Some(Self {
            source_only: get(Variant::SourceOnly)?,
            sd_only: get(Variant::SdOnly)?,
            sa_only: get(Variant::SaOnly)?,
            full: get(Variant::Full)?,
        })
    }

    /// `(description, satisfied)` for each ordering requirement.
    pub fn checks(&self) -> [(&'static str, bool); 4] {
        [
            ("full >= source-only + 5", self.full >= self.source_only + 5.0),
            ("sd-only > source-only", self.sd_only > self.source_only),
            ("sa-only > source-only", self.sa_only > self.source_only),
            ("full >= max(sd-only, sa-only) - 1", self.full >= self.sd_only.max(self.sa_only) - 1.0),
        ]
    }
}

/// Hyperparameter swept by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    Gamma,
    /// Attention modulation of one block.
    Epsilon(u8),
    /// Style weight, with the attention weight fixed at 0.5.
    Lambda,
    /// Attention weight, with the style weight fixed at 1.
    Mu,
}

impl FromStr for SweepParam {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || HarnessError::Config(format!("unknown sweep parameter {s:?}; use gamma, epsilon3/4/5, lambda or mu"));
        match s {
            "gamma" => Ok(Self::Gamma),
            "lambda" => Ok(Self::Lambda),
            "mu" => Ok(Self::Mu),
            _ => {
                let b: u8 = s.strip_prefix("epsilon").and_then(|b| b.parse().ok()).ok_or_else(bad)?;
                match Block::new(b) {
                    Ok(blk) if blk.is_alignable() => Ok(Self::Epsilon(b)),
                    _ => Err(bad()),
                }
            }
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gamma => f.write_str("gamma"),
            Self::Epsilon(b) => write!(f, "epsilon{b}"),
            Self::Lambda => f.write_str("lambda"),
            Self::Mu => f.write_str("mu"),
        }
    }
}

impl SweepParam {
    pub fn apply(self, base: &TrainConfig, value: f64) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Self::Gamma => c.gamma = value,
            Self::Epsilon(b) => {
                c.epsilon.insert(b, value);
            }
            Self::Lambda => {
                c.lambda = value;
                c.mu = 0.5;
            }
            Self::Mu => {
                c.mu = value;
                c.lambda = 1.0;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub best_map: f64,
    pub final_map: f64,
    pub wall_clock_secs: f64,
}

/// One run per value with everything else fixed; writes `sweep_<param>.csv` under `out`.
pub fn sweep(
    param: SweepParam,
    values: &[f64],
    base: &TrainConfig,
    data: &Dataset,
    out: Option<&Path>,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    let specs = values
        .iter()
        .map(|&v| {
            let config = param.apply(base, v);
            config.validate()?;
            Ok(RunSpec {
                label: format!("{param}-{v}"),
                config,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records = run_all(&specs, data, out, jobs)?;
    let rows: Vec<SweepRow> = values
        .iter()
        .zip(&records)
        .map(|(&value, r)| SweepRow {
            param: param.to_string(),
            value,
            seed: r.seed,
            best_map: r.best_eval.map,
            final_map: r.final_eval.map,
            wall_clock_secs: r.wall_clock_secs,
        })
        .collect();
    if let Some(dir) = out {
        write_csv(&dir.join(format!("sweep_{param}.csv")), &rows)?;
    }
    Ok(rows)
}

/// Header row plus one row per record.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Csv(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}
