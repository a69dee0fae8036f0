use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AlignError;

/// Backbone block index, 1 through 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Block(u8);

impl Block {
    pub const MAX: u8 = 5;

    pub fn new(index: u8) -> Result<Self, AlignError> {
        if (1..=Self::MAX).contains(&index) {
            Ok(Self(index))
        } else {
            Err(AlignError::Config(format!("block index {index} outside 1..=5")))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    /// Alignment modules attach only to blocks 3, 4 and 5.
    pub fn is_alignable(self) -> bool {
        self.0 >= 3
    }
}

impl TryFrom<u8> for Block {
    type Error = AlignError;
    fn try_from(v: u8) -> Result<Self, AlignError> {
        Self::new(v)
    }
}

impl From<Block> for u8 {
    fn from(b: Block) -> u8 {
        b.0
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Subset of the alignable blocks {3, 4, 5}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BlockSet(u8);

impl BlockSet {
    pub const EMPTY: Self = Self(0);

    pub fn all() -> Self {
        Self::of(&[3, 4, 5]).expect("valid")
    }

    pub fn of(indices: &[u8]) -> Result<Self, AlignError> {
        let mut set = Self::EMPTY;
        for &i in indices {
            let b = Block::new(i)?;
            if !b.is_alignable() {
                return Err(AlignError::Config(format!(
                    "block {i} cannot host an alignment module (allowed: 3, 4, 5)"
                )));
            }
            set.0 |= 1 << i;
        }
        Ok(set)
    }

    pub fn contains(&self, b: Block) -> bool {
        self.0 & (1 << b.0) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    /// Ascending block order.
    pub fn iter(&self) -> impl Iterator<Item = Block> + '_ {
        (3..=Block::MAX).filter(|i| self.0 & (1 << i) != 0).map(Block)
    }
}

impl TryFrom<Vec<u8>> for BlockSet {
    type Error = AlignError;
    fn try_from(v: Vec<u8>) -> Result<Self, AlignError> {
        Self::of(&v)
    }
}

impl From<BlockSet> for Vec<u8> {
    fn from(s: BlockSet) -> Vec<u8> {
        s.iter().map(|b| b.0).collect()
    }
}

impl fmt::Display for BlockSet {
    /// Comma-separated, e.g. `3,4,5`; empty set prints nothing.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|b| b.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for BlockSet {
    type Err = AlignError;
    fn from_str(s: &str) -> Result<Self, AlignError> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::EMPTY);
        }
        let idx = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u8>()
                    .map_err(|_| AlignError::Config(format!("bad block index '{p}'")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::of(&idx)
    }
}
