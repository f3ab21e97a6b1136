use crate::error::{Error, LoadError, Result};
use crate::rng::SeedStream;
use crate::Scalar;

use super::{GeneratorModel, TokenId, TokenSequence};

/// Small recurrent generator: `z ← tanh(A z + E[y])` per consumed token,
/// starting from `z = 0`, followed by `W z + b`.
///
/// `tanh` keeps pre-logits inside `[-1, 1]^d`, so perturbations with
/// standard deviation around 0.3-0.8 visibly change greedy decodes.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentModel<T> {
    pub(crate) vocab_size: usize,
    pub(crate) dim: usize,
    pub(crate) eos_id: TokenId,
    /// `vocab_size × d`, row-major.
    pub(crate) embedding: Vec<T>,
    /// `d × d`, row-major.
    pub(crate) recurrence: Vec<T>,
    pub(crate) output_weight: Vec<T>,
    /// Raw bias as stored; `eos_bias` is applied on top.
    pub(crate) output_bias: Vec<T>,
    pub(crate) eos_bias: T,
    effective_bias: Vec<T>,
}

impl<T: Scalar> RecurrentModel<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vocab_size: usize,
        dim: usize,
        eos_id: TokenId,
        embedding: Vec<T>,
        recurrence: Vec<T>,
        output_weight: Vec<T>,
        output_bias: Vec<T>,
        eos_bias: T,
    ) -> Result<Self, LoadError> {
        if vocab_size < 2 {
            return Err(LoadError::Invalid(format!("vocab_size must be >= 2, got {vocab_size}")));
        }
        if dim == 0 {
            return Err(LoadError::Invalid("d must be >= 1".into()));
        }
        if eos_id as usize >= vocab_size {
            return Err(LoadError::Invalid(format!(
                "eos_id {eos_id} out of range for vocabulary of {vocab_size}"
            )));
        }
        let check = |field: &str, got: usize, want: usize| {
            if got != want {
                Err(LoadError::Dimension {
                    field: field.to_string(),
                    expected: want,
                    found: got,
                })
            } else {
                Ok(())
            }
        };
        check("embedding", embedding.len(), vocab_size * dim)?;
        check("recurrence", recurrence.len(), dim * dim)?;
        check("output_weight", output_weight.len(), vocab_size * dim)?;
        check("output_bias", output_bias.len(), vocab_size)?;
        let all_finite = embedding
            .iter()
            .chain(&recurrence)
            .chain(&output_weight)
            .chain(&output_bias)
            .all(|x| x.is_finite());
        if !all_finite || !eos_bias.is_finite() {
            return Err(LoadError::Invalid("parameters must be finite".into()));
        }

        let mut effective_bias = output_bias.clone();
        effective_bias[eos_id as usize] = effective_bias[eos_id as usize] + eos_bias;
        Ok(Self {
            vocab_size,
            dim,
            eos_id,
            embedding,
            recurrence,
            output_weight,
            output_bias,
            eos_bias,
            effective_bias,
        })
    }

    pub fn eos_bias(&self) -> T {
        self.eos_bias
    }
}

impl<T: Scalar> GeneratorModel<T> for RecurrentModel<T> {
    type State = Vec<T>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    fn output_weight(&self) -> &[T] {
        &self.output_weight
    }

    fn output_bias(&self) -> &[T] {
        &self.effective_bias
    }

    fn begin(&self, prompt: &TokenSequence) -> Vec<T> {
        let mut z = vec![T::zero(); self.dim];
        for &tok in &prompt.tokens {
            self.advance(&mut z, tok);
        }
        z
    }

    fn advance(&self, z: &mut Vec<T>, token: TokenId) {
        let d = self.dim;
        let emb = &self.embedding[token as usize * d..(token as usize + 1) * d];
        let next: Vec<T> = self
            .recurrence
            .chunks_exact(d)
            .zip(emb)
            .map(|(row, &e)| (row.iter().zip(z.iter()).map(|(&a, &x)| a * x).sum::<T>() + e).tanh())
            .collect();
        *z = next;
    }

    fn prelogit(&self, z: &Vec<T>) -> Vec<T> {
        z.clone()
    }
}

/// Seeded synthetic generator. EOS is token 0; `eos_bias` is added to its logit.
///
/// Parameters: `E, W ~ N(0, 1)`, `A ~ N(0, 0.81/d)`, `b ~ N(0, 0.25)`.
pub fn make_toy_model<T: Scalar>(seed: u64, d: usize, vocab_size: usize, eos_bias: T) -> Result<RecurrentModel<T>> {
    if vocab_size < 2 {
        return Err(Error::invalid(format!("vocab_size must be >= 2, got {vocab_size}")));
    }
    if d == 0 {
        return Err(Error::invalid("d must be >= 1"));
    }
    if !eos_bias.is_finite() {
        return Err(Error::invalid("eos_bias must be finite"));
    }
    let stream = SeedStream::new(seed);
    let draw = |tag: u64, len: usize, scale: f64| -> Vec<T> {
        let mut rng = stream.child(tag).rng();
        (0..len)
            .map(|_| T::standard_normal(&mut rng) * T::of(scale))
            .collect()
    };
    let embedding = draw(0, vocab_size * d, 1.0);
    let recurrence = draw(1, d * d, 0.9 / (d as f64).sqrt());
    let output_weight = draw(2, vocab_size * d, 1.0);
    let output_bias = draw(3, vocab_size, 0.5);
    Ok(RecurrentModel::new(
        vocab_size,
        d,
        0,
        embedding,
        recurrence,
        output_weight,
        output_bias,
        eos_bias,
    )?)
}
