//! Trajectory-level reward models and deterministic synthetic rewards.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, TokenSequence};
use crate::rng::SeedStream;
use crate::Scalar;

/// Scores a complete response `y` to a prompt `x`.
///
/// Implementations must be deterministic and return finite values.
pub trait RewardModel<T>: Sync {
    fn score(&self, prompt: &TokenSequence, response: &TokenSequence) -> T;
}

impl<T, F> RewardModel<T> for F
where
    F: Fn(&TokenSequence, &TokenSequence) -> T + Sync,
{
    fn score(&self, prompt: &TokenSequence, response: &TokenSequence) -> T {
        self(prompt, response)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    TargetCount,
    EmbeddingMatch,
    SparseTerminal,
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target_count" => Ok(Self::TargetCount),
            "embedding_match" => Ok(Self::EmbeddingMatch),
            "sparse_terminal" => Ok(Self::SparseTerminal),
            other => Err(Error::invalid(format!(
                "unknown reward kind `{other}` (expected target_count, embedding_match or sparse_terminal)"
            ))),
        }
    }
}

/// Parameters for [`make_reward`]. Only the fields relevant to the kind are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    /// `target_count`: token to count.
    pub target: TokenId,
    /// `embedding_match`: length of the seeded weight vector.
    pub vocab_size: usize,
    /// `sparse_terminal`: required ending of the response content.
    pub suffix: Vec<TokenId>,
    /// `sparse_terminal`: reward when the suffix matches.
    pub bonus: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            target: 1,
            vocab_size: 16,
            suffix: vec![1],
            bonus: 1.0,
        }
    }
}

/// Built-in synthetic rewards. EOS is never counted as content.
#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticReward<T> {
    /// Fraction of content tokens equal to `target`; 0 for empty content.
    TargetCount { target: TokenId },
    /// `Σ_v freq(v) · weights[v]` over the content's token-frequency
    /// histogram; tokens beyond `weights` contribute nothing.
    EmbeddingMatch { weights: Vec<T> },
    /// `bonus` if the content ends with `suffix`, else 0.
    SparseTerminal { suffix: Vec<TokenId>, bonus: T },
}

impl<T: Scalar> RewardModel<T> for SyntheticReward<T> {
    fn score(&self, _prompt: &TokenSequence, response: &TokenSequence) -> T {
        let content = response.content();
        match self {
            Self::TargetCount { target } => {
                if content.is_empty() {
                    return T::zero();
                }
                let hits = content.iter().filter(|&&t| t == *target).count();
                T::of(hits as f64) / T::of(content.len() as f64)
            }
            Self::EmbeddingMatch { weights } => {
                if content.is_empty() {
                    return T::zero();
                }
                let mut hist = vec![0usize; weights.len()];
                for &t in content {
                    if let Some(h) = hist.get_mut(t as usize) {
                        *h += 1;
                    }
                }
                let len = T::of(content.len() as f64);
                hist.iter()
                    .zip(weights)
                    .map(|(&c, &w)| T::of(c as f64) / len * w)
                    .sum()
            }
            Self::SparseTerminal { suffix, bonus } => {
                if !suffix.is_empty() && content.ends_with(suffix) {
                    *bonus
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Builds a synthetic reward. `kind` is one of `target_count`,
/// `embedding_match` or `sparse_terminal`.
pub fn make_reward<T: Scalar>(kind: &str, params: &RewardParams, seed: u64) -> Result<SyntheticReward<T>> {
    match kind.parse::<RewardKind>()? {
        RewardKind::TargetCount => Ok(SyntheticReward::TargetCount { target: params.target }),
        RewardKind::EmbeddingMatch => {
            if params.vocab_size == 0 {
                return Err(Error::invalid("embedding_match needs vocab_size >= 1"));
            }
            let mut rng = SeedStream::new(seed).rng();
            let weights = (0..params.vocab_size).map(|_| T::standard_normal(&mut rng)).collect();
            Ok(SyntheticReward::EmbeddingMatch { weights })
        }
        RewardKind::SparseTerminal => {
            if params.suffix.is_empty() {
                return Err(Error::invalid("sparse_terminal needs a non-empty suffix"));
            }
            if !params.bonus.is_finite() {
                return Err(Error::invalid("sparse_terminal bonus must be finite"));
            }
            Ok(SyntheticReward::SparseTerminal {
                suffix: params.suffix.clone(),
                bonus: T::of(params.bonus),
            })
        }
    }
}
