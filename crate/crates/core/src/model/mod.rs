//! Autoregressive generators, greedy/perturbed and nucleus decoding.
//!
//! A generator is split the way a language model's head is: a pre-logit map
//! `z_t = φ(y_<t)` followed by a final linear layer `W z_t + b` and softmax.
//! Perturbations act on `z_t` only for the first `τ` generated positions; the
//! recurrent state itself is never perturbed, so later steps see the
//! perturbation only through the tokens it produced.

mod file;
mod recurrent;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::{argmax, log_sum_exp, softmax};
use crate::trajectory::Trajectory;
use crate::Scalar;

pub use file::{load_linear_model, save_linear_model, MODEL_FILE_VERSION};
pub use recurrent::{make_toy_model, RecurrentModel};

pub type TokenId = u32;

/// Ordered token ids. `terminated` is set iff the final token is EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub terminated: bool,
}

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self {
            tokens,
            terminated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens with the trailing EOS (if any) removed.
    pub fn content(&self) -> &[TokenId] {
        if self.terminated {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(tokens: Vec<TokenId>) -> Self {
        Self::new(tokens)
    }
}

/// Pre-logit generator with a final linear-softmax layer.
///
/// Implementations must be deterministic: equal pasts give equal pre-logits.
pub trait GeneratorModel<T: Scalar>: Sync {
    /// Incremental summary of the past tokens.
    type State: Clone + Send;

    fn vocab_size(&self) -> usize;

    /// Pre-logit dimension `d`.
    fn dim(&self) -> usize;

    fn eos_id(&self) -> TokenId;

    /// `W`, `vocab_size × d`, row-major.
    fn output_weight(&self) -> &[T];

    /// Effective bias `b` (including any EOS offset), length `vocab_size`.
    fn output_bias(&self) -> &[T];

    /// State after consuming the prompt.
    fn begin(&self, prompt: &TokenSequence) -> Self::State;

    fn advance(&self, state: &mut Self::State, token: TokenId);

    fn prelogit(&self, state: &Self::State) -> Vec<T>;

    /// `φ(past)` computed from scratch.
    fn prelogit_of(&self, past: &[TokenId]) -> Vec<T> {
        let mut state = self.begin(&TokenSequence::default());
        for &tok in past {
            self.advance(&mut state, tok);
        }
        self.prelogit(&state)
    }

    /// `W z + b`.
    fn logits(&self, z: &[T]) -> Vec<T> {
        let d = self.dim();
        self.output_weight()
            .chunks_exact(d)
            .zip(self.output_bias())
            .map(|(row, &b)| row.iter().zip(z).map(|(&w, &x)| w * x).sum::<T>() + b)
            .collect()
    }
}

/// Output of a greedy decode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeRecord {
    pub response: TokenSequence,
    /// Steps that received a perturbation column: `min(τ, length)`.
    pub prelogits_used: usize,
    pub length: usize,
}

fn check_token_range<T: Scalar, M: GeneratorModel<T>>(model: &M, seq: &TokenSequence) -> Result<()> {
    let vocab = model.vocab_size();
    if let Some(&bad) = seq.tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::invalid(format!(
            "token id {bad} out of range for vocabulary of {vocab}"
        )));
    }
    Ok(())
}

/// Greedy decoding where `z_t` is shifted by column `t` of `v` for `t ≤ τ`,
/// `τ = v.cols()`. Ties in the argmax go to the lowest token id.
pub fn decode_greedy_perturbed<T: Scalar, M: GeneratorModel<T>>(
    model: &M,
    prompt: &TokenSequence,
    v: &Trajectory<T>,
    max_new_tokens: usize,
) -> Result<DecodeRecord> {
    if v.rows() != model.dim() && v.cols() > 0 {
        return Err(Error::ShapeMismatch {
            expected_rows: model.dim(),
            expected_cols: v.cols(),
            rows: v.rows(),
            cols: v.cols(),
        });
    }
    if v.cols() > max_new_tokens {
        return Err(Error::invalid(format!(
            "control horizon {} exceeds max_new_tokens {max_new_tokens}",
            v.cols()
        )));
    }
    check_token_range(model, prompt)?;

    let tau = v.cols();
    let eos = model.eos_id();
    let mut state = model.begin(prompt);
    let mut response = TokenSequence::default();
    for t in 0..max_new_tokens {
        let mut z = model.prelogit(&state);
        if t < tau {
            for (zi, &vi) in z.iter_mut().zip(v.column(t)) {
                *zi = *zi + vi;
            }
        }
        let tok = argmax(&model.logits(&z)) as TokenId;
        response.tokens.push(tok);
        if tok == eos {
            response.terminated = true;
            break;
        }
        model.advance(&mut state, tok);
    }
    let length = response.len();
    Ok(DecodeRecord {
        response,
        prelogits_used: tau.min(length),
        length,
    })
}

/// Unperturbed greedy decode.
pub fn decode_greedy<T: Scalar, M: GeneratorModel<T>>(
    model: &M,
    prompt: &TokenSequence,
    max_new_tokens: usize,
) -> Result<TokenSequence> {
    let empty = Trajectory::zeros(model.dim(), 0);
    decode_greedy_perturbed(model, prompt, &empty, max_new_tokens).map(|r| r.response)
}

/// Picks a token from the nucleus of `probs`: the smallest prefix of the
/// probability-sorted vocabulary whose mass reaches `p`, renormalized.
pub(crate) fn sample_nucleus<T: Scalar, R: Rng + ?Sized>(probs: &[T], p: T, rng: &mut R) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable: equal probabilities keep ascending id order
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal));

    let mut mass = T::zero();
    let mut keep = 0;
    for &i in &order {
        mass = mass + probs[i];
        keep += 1;
        if mass >= p {
            break;
        }
    }
    let nucleus = &order[..keep];
    if keep == 1 {
        return nucleus[0];
    }
    let u = T::unit_uniform(rng) * mass;
    let mut acc = T::zero();
    for &i in nucleus {
        acc = acc + probs[i];
        if u < acc {
            return i;
        }
    }
    nucleus[keep - 1]
}

/// Temperature + top-p (nucleus) sampling.
pub fn decode_top_p<T: Scalar, M: GeneratorModel<T>, R: Rng + ?Sized>(
    model: &M,
    prompt: &TokenSequence,
    temperature: T,
    p: T,
    max_new_tokens: usize,
    rng: &mut R,
) -> Result<TokenSequence> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if !(p > T::zero() && p <= T::one()) {
        return Err(Error::invalid(format!("top_p must be in (0, 1], got {p}")));
    }
    check_token_range(model, prompt)?;

    let eos = model.eos_id();
    let mut state = model.begin(prompt);
    let mut response = TokenSequence::default();
    for _ in 0..max_new_tokens {
        let z = model.prelogit(&state);
        let scaled: Vec<T> = model.logits(&z).into_iter().map(|l| l / temperature).collect();
        let probs = softmax(&scaled);
        let tok = sample_nucleus(&probs, p, rng) as TokenId;
        response.tokens.push(tok);
        if tok == eos {
            response.terminated = true;
            break;
        }
        model.advance(&mut state, tok);
    }
    Ok(response)
}

/// Log-softmax of `W (z + shift) + b` for a given pre-logit.
pub fn log_probs_at<T: Scalar, M: GeneratorModel<T>>(model: &M, z: &[T], shift: Option<&[T]>) -> Vec<T> {
    let logits = match shift {
        Some(s) => {
            let shifted: Vec<T> = z.iter().zip(s).map(|(&a, &b)| a + b).collect();
            model.logits(&shifted)
        }
        None => model.logits(z),
    };
    let lse = log_sum_exp(&logits);
    logits.into_iter().map(|l| l - lse).collect()
}

/// Next-token log-probabilities after `past`, with the pre-logit optionally shifted.
pub fn next_token_log_probs<T: Scalar, M: GeneratorModel<T>>(
    model: &M,
    past: &TokenSequence,
    shift: Option<&[T]>,
) -> Result<Vec<T>> {
    if let Some(s) = shift {
        if s.len() != model.dim() {
            return Err(Error::ShapeMismatch {
                expected_rows: model.dim(),
                expected_cols: 1,
                rows: s.len(),
                cols: 1,
            });
        }
    }
    check_token_range(model, past)?;
    let z = model.prelogit_of(&past.tokens);
    Ok(log_probs_at(model, &z, shift))
}
