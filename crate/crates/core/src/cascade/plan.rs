use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of encoder blocks (1-based) into stages, shallow to deep.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StagePlan {
    pub stages: Vec<Vec<usize>>,
}

impl StagePlan {
    pub fn new(stages: Vec<Vec<usize>>) -> Self {
        StagePlan { stages }
    }

    /// Three stages of three, two and one deepest blocks: for `B = 12`,
    /// `[[6,7,8],[9,10,11],[12]]`.
    pub fn default_for(blocks: usize) -> Result<Self> {
        if blocks < 7 {
            return Err(Error::Config(format!(
                "default stage plan needs at least 7 blocks, got {blocks}"
            )));
        }
        let b = blocks;
        Ok(StagePlan::new(vec![
            vec![b - 6, b - 5, b - 4],
            vec![b - 3, b - 2, b - 1],
            vec![b],
        ]))
    }

    /// A single stage holding only the last block.
    pub fn last_only(blocks: usize) -> Self {
        StagePlan::new(vec![vec![blocks]])
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Every block used by some stage, ascending.
    pub fn union(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.stages.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("stage plan has no stages".into()));
        }
        let mut last = 0;
        for stage in &self.stages {
            if stage.is_empty() {
                return Err(Error::Config("stage plan has an empty stage".into()));
            }
            for (i, &b) in stage.iter().enumerate() {
                if b == 0 || b > blocks {
                    return Err(Error::Config(format!(
                        "stage plan references block {b} outside 1..={blocks}"
                    )));
                }
                if i > 0 && b != stage[i - 1] + 1 {
                    return Err(Error::Config(format!(
                        "stage {stage:?} is not contiguous ascending"
                    )));
                }
                if b <= last {
                    return Err(Error::Config(format!(
                        "stage plan {self} overlaps or is out of order"
                    )));
                }
                last = b;
            }
        }
        Ok(())
    }
}

impl fmt::Display for StagePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .stages
            .iter()
            .map(|s| s.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","))
            .collect();
        write!(f, "{}", parts.join("|"))
    }
}

/// Parses `6,7,8|9,10,11|12`; `a-b` ranges are accepted inside a stage.
impl FromStr for StagePlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse stage plan {s:?}"));
        let mut stages = Vec::new();
        for part in s.split('|') {
            let mut stage = Vec::new();
            for item in part.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                if let Some((a, b)) = item.split_once('-') {
                    let a: usize = a.trim().parse().map_err(|_| bad())?;
                    let b: usize = b.trim().parse().map_err(|_| bad())?;
                    stage.extend(a..=b);
                } else {
                    stage.push(item.parse().map_err(|_| bad())?);
                }
            }
            stages.push(stage);
        }
        Ok(StagePlan::new(stages))
    }
}

/// How a stage's block features are combined into one matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Nga,
    Sum,
    Concat,
    SelfAttention,
}

/// Whether each stage projects the text descriptor with its own map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextEmbedding {
    #[default]
    Independent,
    Shared,
}

/// Cascaded per-stage decoders, or every planned block summed into one
/// decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    #[default]
    Cascade,
    Naive,
}

macro_rules! keyword_enum {
    ($ty:ty, $($text:literal => $v:expr),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($v),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} {s:?}", stringify!($ty).to_lowercase()
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self {
                    $(x if *x == $v => $text,)+
                    _ => unreachable!(),
                };
                f.write_str(s)
            }
        }
    };
}

keyword_enum!(Aggregation,
    "nga" => Aggregation::Nga,
    "sum" => Aggregation::Sum,
    "concat" => Aggregation::Concat,
    "self-attention" => Aggregation::SelfAttention);
keyword_enum!(TextEmbedding,
    "independent" => TextEmbedding::Independent,
    "shared" => TextEmbedding::Shared);
keyword_enum!(Fusion,
    "cascade" => Fusion::Cascade,
    "naive" => Fusion::Naive);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeFlags {
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub text_embedding: TextEmbedding,
    #[serde(default)]
    pub fusion: Fusion,
}
