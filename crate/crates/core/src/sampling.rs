//! Gaussian trajectory sampling, importance weights, mean updates and the
//! Monte-Carlo estimators of the control objective and free energy.
//!
//! Perturbations follow `V ~ N(U, σ² I)` over all `d·τ` entries. With
//! `S(V) = r(x, y(V))/λ − ((1−α)/σ²) Σ_t û_tᵀ v_t` the self-normalized
//! weights are `softmax_i S(V^i)` and the next mean is `Σ_i w_i V^i`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{decode_greedy_perturbed, DecodeRecord, GeneratorModel, TokenSequence};
use crate::reward::RewardModel;
use crate::rng::SeedStream;
use crate::scalar::log_sum_exp;
use crate::trajectory::{MeanTrajectory, Trajectory};
use crate::Scalar;

/// Hyperparameters of one adaptive run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlConfig<T> {
    /// KL temperature `λ > 0`.
    pub lambda: T,
    /// Relaxation `α ∈ [0, 1]`; `α = 1` drops the proposal correction.
    pub alpha: T,
    /// Shared isotropic variance `σ² > 0`.
    pub sigma2: T,
    /// Samples per iteration.
    pub n: usize,
    /// Iterations.
    pub kappa: usize,
    /// Control horizon: number of leading generated positions perturbed.
    pub tau: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl<T: Scalar> Default for ControlConfig<T> {
    fn default() -> Self {
        Self {
            lambda: T::of(0.3),
            alpha: T::of(0.9999),
            sigma2: T::of(0.5),
            n: 32,
            kappa: 32,
            tau: 128,
            max_new_tokens: 128,
            seed: 0,
        }
    }
}

impl<T: Scalar> ControlConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lambda > T::zero()) || !self.lambda.is_finite() {
            problems.push(format!("lambda must be > 0 (got {})", self.lambda));
        }
        if !(self.sigma2 > T::zero()) || !self.sigma2.is_finite() {
            problems.push(format!("sigma2 must be > 0 (got {})", self.sigma2));
        }
        if !(self.alpha >= T::zero() && self.alpha <= T::one()) {
            problems.push(format!("alpha must be in [0, 1] (got {})", self.alpha));
        }
        if self.n == 0 {
            problems.push("n must be >= 1".into());
        }
        if self.kappa == 0 {
            problems.push("kappa must be >= 1".into());
        }
        if self.tau == 0 || self.tau > self.max_new_tokens {
            problems.push(format!(
                "tau must satisfy 1 <= tau <= max_new_tokens (tau = {}, max_new_tokens = {})",
                self.tau, self.max_new_tokens
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }
}

/// Probability vector over the `n` samples of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct WeightVector<T>(Vec<T>);

impl<T: Scalar> WeightVector<T> {
    pub fn uniform(n: usize) -> Self {
        Self(vec![T::one() / T::of(n as f64); n])
    }

    /// Wraps `weights` after checking nonnegativity and unit sum (to `1e-6`
    /// relative, loose enough for `f32`).
    pub fn new(weights: Vec<T>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("weight vector must be non-empty"));
        }
        if weights.iter().any(|&w| !(w >= T::zero()) || !w.is_finite()) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        let sum: T = weights.iter().copied().sum();
        if (sum - T::one()).abs() > T::of(1e-6) {
            return Err(Error::invalid(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

/// Mean of a Monte-Carlo estimate and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate<T> {
    pub value: T,
    pub std_error: T,
}

fn check_sigma2<T: Scalar>(sigma2: T) -> Result<()> {
    if !(sigma2 > T::zero()) || !sigma2.is_finite() {
        return Err(Error::invalid(format!("sigma2 must be > 0, got {sigma2}")));
    }
    Ok(())
}

/// One draw from `N(mean, σ² I)`.
pub fn sample_trajectory<T: Scalar, R: rand::Rng + ?Sized>(mean: &MeanTrajectory<T>, sigma2: T, rng: &mut R) -> Trajectory<T> {
    let sd = sigma2.sqrt();
    let mut v = mean.clone();
    for x in v.as_mut_slice() {
        *x = *x + sd * T::standard_normal(rng);
    }
    v
}

/// `n` independent draws; draw `i` uses `stream.child(i)`, so the list does
/// not depend on scheduling.
pub fn sample_trajectories<T: Scalar>(
    mean: &MeanTrajectory<T>,
    sigma2: T,
    n: usize,
    stream: &SeedStream,
) -> Result<Vec<Trajectory<T>>> {
    check_sigma2(sigma2)?;
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    Ok((0..n as u64)
        .into_par_iter()
        .map(|i| sample_trajectory(mean, sigma2, &mut stream.child(i).rng()))
        .collect())
}

/// `log q(V | U, σ²) = −(dτ/2) log(2πσ²) − ‖V − U‖² / (2σ²)`.
pub fn gaussian_log_density<T: Scalar>(v: &Trajectory<T>, mean: &MeanTrajectory<T>, sigma2: T) -> Result<T> {
    check_sigma2(sigma2)?;
    mean.ensure_shape(v.rows(), v.cols())?;
    let sq: T = v
        .as_slice()
        .iter()
        .zip(mean.as_slice())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    let dim = T::of((v.rows() * v.cols()) as f64);
    let two = T::of(2.0);
    Ok(-(dim / two) * (two * T::PI() * sigma2).ln() - sq / (two * sigma2))
}

/// `((1−α)/σ²) Σ_t û_tᵀ v_t`; exactly zero when `α = 1`.
pub fn correction_term<T: Scalar>(v: &Trajectory<T>, mean: &MeanTrajectory<T>, sigma2: T, alpha: T) -> Result<T> {
    check_sigma2(sigma2)?;
    let inner = mean.dot(v)?;
    let scale = T::one() - alpha;
    if scale == T::zero() {
        return Ok(T::zero());
    }
    Ok(scale / sigma2 * inner)
}

/// `w_i = softmax_i(rewards_i/λ − corrections_i)`, max-subtracted.
pub fn compute_weights<T: Scalar>(rewards: &[T], corrections: &[T], lambda: T) -> Result<WeightVector<T>> {
    if rewards.is_empty() {
        return Err(Error::invalid("at least one reward is required"));
    }
    if rewards.len() != corrections.len() {
        return Err(Error::invalid(format!(
            "{} rewards but {} corrections",
            rewards.len(),
            corrections.len()
        )));
    }
    if !(lambda > T::zero()) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be > 0, got {lambda}")));
    }
    if rewards.iter().chain(corrections).any(|x| !x.is_finite()) {
        return Err(Error::invalid("rewards and corrections must be finite"));
    }
    let logits: Vec<T> = rewards
        .iter()
        .zip(corrections)
        .map(|(&r, &c)| r / lambda - c)
        .collect();
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("weight logits overflowed; lambda too small for reward scale"));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    Ok(WeightVector(exps.into_iter().map(|e| e / sum).collect()))
}

/// `Σ_i w_i V^i`, entrywise.
pub fn update_mean<T: Scalar>(weights: &WeightVector<T>, trajectories: &[Trajectory<T>]) -> Result<MeanTrajectory<T>> {
    if weights.len() != trajectories.len() {
        return Err(Error::invalid(format!(
            "{} weights but {} trajectories",
            weights.len(),
            trajectories.len()
        )));
    }
    let first = trajectories
        .first()
        .ok_or_else(|| Error::invalid("no trajectories to combine"))?;
    let (rows, cols) = first.shape();
    let mut out = Trajectory::zeros(rows, cols);
    for (&w, v) in weights.as_slice().iter().zip(trajectories) {
        v.ensure_shape(rows, cols)?;
        if w == T::zero() {
            continue;
        }
        for (o, &x) in out.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *o = *o + w * x;
        }
    }
    Ok(out)
}

/// `KL(N(U, σ²I) ‖ N(0, σ²I)) = ‖U‖² / (2σ²)`.
pub fn kl_gaussian_closed_form<T: Scalar>(mean: &MeanTrajectory<T>, sigma2: T) -> Result<T> {
    check_sigma2(sigma2)?;
    Ok(mean.squared_norm() / (T::of(2.0) * sigma2))
}

/// Decodes and scores each trajectory, in parallel, preserving order.
pub(crate) fn evaluate_all<T, M, R>(
    model: &M,
    reward: &R,
    prompt: &TokenSequence,
    trajectories: &[Trajectory<T>],
    max_new_tokens: usize,
) -> Result<Vec<(DecodeRecord, T)>>
where
    T: Scalar,
    M: GeneratorModel<T>,
    R: RewardModel<T> + ?Sized,
{
    trajectories
        .par_iter()
        .map(|v| {
            let rec = decode_greedy_perturbed(model, prompt, v, max_new_tokens)?;
            let r = reward.score(prompt, &rec.response);
            Ok((rec, r))
        })
        .collect()
}

fn mean_and_sd<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = T::of(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    if xs.len() < 2 {
        return (mean, T::zero());
    }
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / (n - T::one());
    (mean, var.sqrt())
}

/// Monte-Carlo free energy `F = log E_{V~N(0,σ²I)}[exp(r(x, y(V))/λ)]` over
/// `m` draws, via log-sum-exp. The standard error is the delta-method error
/// of the log-mean.
///
/// Uses `lambda`, `sigma2`, `tau`, `max_new_tokens` from `config`.
pub fn estimate_free_energy<T, M, R>(
    model: &M,
    reward: &R,
    prompt: &TokenSequence,
    config: &ControlConfig<T>,
    m: usize,
    stream: &SeedStream,
) -> Result<McEstimate<T>>
where
    T: Scalar,
    M: GeneratorModel<T>,
    R: RewardModel<T> + ?Sized,
{
    if m == 0 {
        return Err(Error::invalid("m must be >= 1"));
    }
    let zero = Trajectory::zeros(model.dim(), config.tau);
    let draws = sample_trajectories(&zero, config.sigma2, m, stream)?;
    let evals = evaluate_all(model, reward, prompt, &draws, config.max_new_tokens)?;
    let scaled: Vec<T> = evals.iter().map(|(_, r)| *r / config.lambda).collect();
    let value = log_sum_exp(&scaled) - T::of(m as f64).ln();

    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let (mu, sd) = mean_and_sd(&e);
    let std_error = sd / (mu * T::of(m as f64).sqrt());
    Ok(McEstimate { value, std_error })
}

/// Monte-Carlo control objective
/// `J(x, U) = −E_{V~N(U,σ²I)}[r(x, y(V))] + λ ‖U‖²/(2σ²)`.
pub fn estimate_objective<T, M, R>(
    model: &M,
    reward: &R,
    prompt: &TokenSequence,
    mean: &MeanTrajectory<T>,
    config: &ControlConfig<T>,
    m: usize,
    stream: &SeedStream,
) -> Result<McEstimate<T>>
where
    T: Scalar,
    M: GeneratorModel<T>,
    R: RewardModel<T> + ?Sized,
{
    if m == 0 {
        return Err(Error::invalid("m must be >= 1"));
    }
    let draws = sample_trajectories(mean, config.sigma2, m, stream)?;
    let evals = evaluate_all(model, reward, prompt, &draws, config.max_new_tokens)?;
    let rewards: Vec<T> = evals.into_iter().map(|(_, r)| r).collect();
    let (mu, sd) = mean_and_sd(&rewards);
    let kl = kl_gaussian_closed_form(mean, config.sigma2)?;
    Ok(McEstimate {
        value: -mu + config.lambda * kl,
        std_error: sd / T::of(m as f64).sqrt(),
    })
}
