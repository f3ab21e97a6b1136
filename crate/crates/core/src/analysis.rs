//! Diagnostics: empirical KL to the base model, effective sample size, the
//! Gaussian class-conditional / softmax correspondence, and convergence curves.

use serde::Serialize;

use crate::controller::AispResult;
use crate::error::{Error, Result};
use crate::model::{log_probs_at, GeneratorModel, TokenSequence};
use crate::model::decode_greedy_perturbed;
use crate::sampling::WeightVector;
use crate::scalar::{log_sum_exp, softmax};
use crate::trajectory::MeanTrajectory;
use crate::Scalar;

/// `1 / Σ w_i²`, in `[1, n]`.
pub fn effective_sample_size<T: Scalar>(weights: &WeightVector<T>) -> T {
    let s: T = weights.as_slice().iter().map(|&w| w * w).sum();
    T::one() / s
}

/// Plug-in KL between the shifted and base next-token models along one
/// response.
///
/// The response is the greedy decode of `prompt` with pre-logits shifted by
/// the columns of `mean`. Returns
/// `Σ_t [log P_shift(y_t | y_<t) − log P_base(y_t | y_<t)]`, where the shift
/// is `u_t` for `t ≤ τ` and absent afterwards (those terms are zero).
pub fn kl_divergence_empirical<T: Scalar, M: GeneratorModel<T>>(
    model: &M,
    mean: &MeanTrajectory<T>,
    prompt: &TokenSequence,
    max_new_tokens: usize,
) -> Result<T> {
    let record = decode_greedy_perturbed(model, prompt, mean, max_new_tokens)?;
    let tau = mean.cols();
    let mut state = model.begin(prompt);
    let mut total = T::zero();
    for (t, &tok) in record.response.tokens.iter().enumerate() {
        if t >= tau {
            break;
        }
        let z = model.prelogit(&state);
        let shifted = log_probs_at(model, &z, Some(mean.column(t)));
        let base = log_probs_at(model, &z, None);
        total = total + (shifted[tok as usize] - base[tok as usize]);
        model.advance(&mut state, tok);
    }
    Ok(total)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
fn cholesky<T: Scalar>(a: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let n = a.len();
    let mut l = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: T = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let diag = a[i][i] - s;
                if !(diag > T::zero()) {
                    return Err(Error::invalid("covariance is not positive definite"));
                }
                l[i][i] = diag.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b`.
fn cholesky_solve<T: Scalar>(l: &[Vec<T>], b: &[T]) -> Vec<T> {
    let n = l.len();
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let s: T = (0..i).map(|k| l[i][k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i][i];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let s: T = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i][i];
    }
    x
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Compares the Bayes posterior under Gaussian class-conditionals
/// `p(z | i) = N(μ_i, Σ)` with the softmax of the linear layer
/// `w_i = Σ⁻¹μ_i`, `b_i = −½ μ_iᵀΣ⁻¹μ_i + log prior_i`.
/// Returns the largest absolute difference between the two distributions.
pub fn softmax_gaussian_check<T: Scalar>(means: &[Vec<T>], covariance: &[Vec<T>], priors: &[T], z: &[T]) -> Result<T> {
    let d = z.len();
    if means.is_empty() || means.len() != priors.len() {
        return Err(Error::invalid("need one prior per class and at least one class"));
    }
    if means.iter().any(|m| m.len() != d) || covariance.len() != d || covariance.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("class means, covariance and z must share dimension"));
    }
    let tol = T::of(1e-12);
    for i in 0..d {
        for j in 0..i {
            if (covariance[i][j] - covariance[j][i]).abs() > tol * (covariance[i][j].abs() + T::one()) {
                return Err(Error::invalid("covariance is not symmetric"));
            }
        }
    }
    if priors.iter().any(|&p| !(p >= T::zero())) || (priors.iter().copied().sum::<T>() - T::one()).abs() > T::of(1e-9) {
        return Err(Error::invalid("priors must form a probability vector"));
    }
    let l = cholesky(covariance)?;

    // Bayes route: log N(z; μ_i, Σ) + log prior_i, normalized
    let log_det: T = l.iter().enumerate().map(|(i, row)| row[i].ln()).sum::<T>() * T::of(2.0);
    let half = T::of(0.5);
    let log_norm = -half * (T::of(d as f64) * (T::of(2.0) * T::PI()).ln() + log_det);
    let joint: Vec<T> = means
        .iter()
        .zip(priors)
        .map(|(mu, &p)| {
            let diff: Vec<T> = z.iter().zip(mu).map(|(&a, &b)| a - b).collect();
            let maha = dot(&diff, &cholesky_solve(&l, &diff));
            log_norm - half * maha + p.ln()
        })
        .collect();
    let lse = log_sum_exp(&joint);
    let posterior: Vec<T> = joint.iter().map(|&j| (j - lse).exp()).collect();

    // linear-layer route
    let logits: Vec<T> = means
        .iter()
        .zip(priors)
        .map(|(mu, &p)| {
            let w = cholesky_solve(&l, mu);
            dot(&w, z) - half * dot(&w, mu) + p.ln()
        })
        .collect();
    let layer = softmax(&logits);

    Ok(posterior
        .iter()
        .zip(&layer)
        .map(|(&a, &b)| (a - b).abs())
        .fold(T::zero(), T::max))
}

/// Per-iteration curves averaged over runs (prompts × repeats).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceCurves<T> {
    pub mean_at_k: Vec<T>,
    pub best_at_k: Vec<T>,
    pub best_so_far: Vec<T>,
    /// Best-of-N best over the first `n·k` samples; `None` without BoN runs.
    pub bon_at_budget: Option<Vec<T>>,
    pub ess_mean: Vec<T>,
    pub runs: usize,
    pub bon_runs: usize,
}

impl<T> ConvergenceCurves<T> {
    pub fn len(&self) -> usize {
        self.mean_at_k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_at_k.is_empty()
    }
}

/// Averages the traces of `results` per iteration and, from each list in
/// `bon_rewards`, the running best over budgets `n, 2n, …, κn`.
pub fn aggregate_curves<T: Scalar>(results: &[AispResult<T>], bon_rewards: &[Vec<T>], n: usize) -> Result<ConvergenceCurves<T>> {
    let first = results.first().ok_or_else(|| Error::invalid("no results to aggregate"))?;
    let kappa = first.traces.len();
    if results.iter().any(|r| r.traces.len() != kappa) {
        return Err(Error::invalid("results disagree on the number of iterations"));
    }
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let runs = T::of(results.len() as f64);
    let avg = |f: &dyn Fn(&AispResult<T>, usize) -> T| -> Vec<T> {
        (0..kappa)
            .map(|k| results.iter().map(|r| f(r, k)).sum::<T>() / runs)
            .collect()
    };
    let mean_at_k = avg(&|r, k| r.traces[k].mean_reward);
    let best_at_k = avg(&|r, k| r.traces[k].best_at_k);
    let best_so_far = avg(&|r, k| r.traces[k].best_so_far);
    let ess_mean = avg(&|r, k| r.traces[k].ess);

    let bon_at_budget = if bon_rewards.is_empty() {
        None
    } else {
        if let Some(short) = bon_rewards.iter().find(|b| b.len() < n * kappa) {
            return Err(Error::invalid(format!(
                "BoN reward list of length {} is shorter than n*kappa = {}",
                short.len(),
                n * kappa
            )));
        }
        let bon_runs = T::of(bon_rewards.len() as f64);
        let mut acc = vec![T::zero(); kappa];
        for list in bon_rewards {
            let mut running = T::neg_infinity();
            for (k, slot) in acc.iter_mut().enumerate() {
                running = list[k * n..(k + 1) * n].iter().copied().fold(running, T::max);
                *slot = *slot + running;
            }
        }
        Some(acc.into_iter().map(|s| s / bon_runs).collect())
    };

    Ok(ConvergenceCurves {
        mean_at_k,
        best_at_k,
        best_so_far,
        bon_at_budget,
        ess_mean,
        runs: results.len(),
        bon_runs: bon_rewards.len(),
    })
}
