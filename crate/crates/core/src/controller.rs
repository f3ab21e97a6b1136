//! Adaptive importance sampling over pre-logit perturbations, its batched
//! form, and the Best-of-N baselines it is compared against.

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::effective_sample_size;
use crate::error::{Error, Result};
use crate::model::{decode_greedy_perturbed, decode_top_p, GeneratorModel, TokenSequence};
use crate::reward::RewardModel;
use crate::rng::SeedStream;
use crate::sampling::{
    compute_weights, correction_term, evaluate_all, sample_trajectories, update_mean, ControlConfig, WeightVector,
};
use crate::trajectory::{MeanTrajectory, Trajectory};
use crate::Scalar;

/// Statistics of one iteration `k` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace<T> {
    pub k: usize,
    pub rewards: Vec<T>,
    pub weights: WeightVector<T>,
    pub mean_reward: T,
    pub best_at_k: T,
    pub best_so_far: T,
    pub ess: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AispResult<T> {
    /// Highest-reward response over all iterations and the final round.
    pub best_response: TokenSequence,
    pub best_reward: T,
    /// Mean after the last update.
    pub final_mean: MeanTrajectory<T>,
    /// Greedy decode perturbed by `final_mean` itself. Diagnostic only: not
    /// counted in `total_evaluations` and not part of best selection.
    pub mean_response: TokenSequence,
    /// One entry per iteration.
    pub traces: Vec<IterationTrace<T>>,
    /// Rewards of the final candidate round, drawn around `final_mean`.
    pub final_rewards: Vec<T>,
    /// `n·κ + n` decode-and-score evaluations.
    pub total_evaluations: usize,
}

/// Stream used for the samples of iteration `k` (1-based) under `stream`.
pub fn iteration_stream(stream: &SeedStream, k: usize) -> SeedStream {
    stream.child(0).child(k as u64)
}

/// Stream used for the final candidate round.
pub fn final_stream(stream: &SeedStream) -> SeedStream {
    stream.child(1)
}

/// A prompt in a batch. Its random substream is keyed by `id`, not by its
/// position, so reordering a batch cannot change any prompt's result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPrompt {
    pub id: u64,
    pub tokens: TokenSequence,
}

/// State of one adaptive run between iterations.
struct Instance<'a, T> {
    prompt: &'a TokenSequence,
    stream: SeedStream,
    mean: MeanTrajectory<T>,
    best: Option<(TokenSequence, T)>,
    traces: Vec<IterationTrace<T>>,
    evaluations: usize,
}

impl<'a, T: Scalar> Instance<'a, T> {
    fn new(prompt: &'a TokenSequence, stream: SeedStream, dim: usize, tau: usize) -> Self {
        Self {
            prompt,
            stream,
            mean: Trajectory::zeros(dim, tau),
            best: None,
            traces: Vec::new(),
            evaluations: 0,
        }
    }

    fn offer(&mut self, response: &TokenSequence, reward: T) {
        // strict improvement: the earliest candidate wins ties
        let better = match &self.best {
            None => true,
            Some((_, r)) => reward > *r,
        };
        if better {
            self.best = Some((response.clone(), reward));
        }
    }

    fn best_reward(&self) -> T {
        self.best.as_ref().map_or(T::neg_infinity(), |(_, r)| *r)
    }

    /// Scores, weights and the mean update for iteration `k`.
    fn absorb(
        &mut self,
        k: usize,
        config: &ControlConfig<T>,
        draws: &[Trajectory<T>],
        results: Vec<(TokenSequence, T)>,
    ) -> Result<()> {
        let mut rewards = Vec::with_capacity(results.len());
        for (resp, r) in &results {
            self.offer(resp, *r);
            rewards.push(*r);
        }
        self.evaluations += results.len();

        let corrections = draws
            .iter()
            .map(|v| correction_term(v, &self.mean, config.sigma2, config.alpha))
            .collect::<Result<Vec<T>>>()?;
        let weights = compute_weights(&rewards, &corrections, config.lambda)?;
        self.mean = update_mean(&weights, draws)?;

        let n = T::of(rewards.len() as f64);
        self.traces.push(IterationTrace {
            k,
            mean_reward: rewards.iter().copied().sum::<T>() / n,
            best_at_k: rewards.iter().copied().fold(T::neg_infinity(), T::max),
            best_so_far: self.best_reward(),
            ess: effective_sample_size(&weights),
            rewards,
            weights,
        });
        Ok(())
    }
}

fn decode_and_score<T, M, R>(
    model: &M,
    reward: &R,
    jobs: &[(usize, &[Trajectory<T>])],
    prompts: &[&TokenSequence],
    max_new_tokens: usize,
) -> Result<Vec<Vec<(TokenSequence, T)>>>
where
    T: Scalar,
    M: GeneratorModel<T>,
    R: RewardModel<T> + ?Sized,
{
    // flatten (instance, sample) pairs so a whole batch round runs as one parallel map
    let flat: Vec<(usize, &Trajectory<T>)> = jobs
        .iter()
        .flat_map(|(inst, draws)| draws.iter().map(move |v| (*inst, v)))
        .collect();
    let scored: Vec<(usize, TokenSequence, T)> = flat
        .par_iter()
        .map(|&(inst, v)| {
            let prompt = prompts[inst];
            let rec = decode_greedy_perturbed(model, prompt, v, max_new_tokens)?;
            let r = reward.score(prompt, &rec.response);
            Ok((inst, rec.response, r))
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Vec<(TokenSequence, T)>> = vec![Vec::new(); prompts.len()];
    for (inst, resp, r) in scored {
        out[inst].push((resp, r));
    }
    Ok(out)
}

/// Runs several adaptive instances in lockstep: every iteration evaluates the
/// `n · b` decodes of all instances together, then updates each mean.
fn run_lockstep<T, M, R>(
    model: &M,
    reward: &R,
    instances: &mut [Instance<'_, T>],
    config: &ControlConfig<T>,
) -> Result<Vec<AispResult<T>>>
where
    T: Scalar,
    M: GeneratorModel<T>,
    R: RewardModel<T> + ?Sized,
{
    let prompts: Vec<&TokenSequence> = instances.iter().map(|i| i.prompt).collect();

    for k in 1..=config.kappa {
        let draws = instances
            .iter()
            .map(|inst| sample_trajectories(&inst.mean, config.sigma2, config.n, &iteration_stream(&inst.stream, k)))
            .collect::<Result<Vec<_>>>()?;
        let jobs: Vec<(usize, &[Trajectory<T>])> = draws.iter().map(|d| d.as_slice()).enumerate().collect();
        let results = decode_and_score(model, reward, &jobs, &prompts, config.max_new_tokens)?;
        for ((inst, d), res) in instances.iter_mut().zip(&draws).zip(results) {
            inst.absorb(k, config, d, res)?;
        }
    }

    let finals = instances
        .iter()
        .map(|inst| sample_trajectories(&inst.mean, config.sigma2, config.n, &final_stream(&inst.stream)))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, &[Trajectory<T>])> = finals.iter().map(|d| d.as_slice()).enumerate().collect();
    let results = decode_and_score(model, reward, &jobs, &prompts, config.max_new_tokens)?;

    instances
        .iter_mut()
        .zip(results)
        .map(|(inst, res)| {
            let mut final_rewards = Vec::with_capacity(res.len());
            for (resp, r) in &res {
                inst.offer(resp, *r);
                final_rewards.push(*r);
            }
            inst.evaluations += res.len();
            let mean_response = decode_greedy_perturbed(model, inst.prompt, &inst.mean, config.max_new_tokens)?.response;
            let (best_response, best_reward) = inst.best.clone().expect("n >= 1 guarantees a candidate");
            Ok(AispResult {
                best_response,
                best_reward,
                final_mean: inst.mean.clone(),
                mean_response,
                traces: std::mem::take(&mut inst.traces),
                final_rewards,
                total_evaluations: inst.evaluations,
            })
        })
        .collect()
}

fn check_prompt<T: Scalar, M: GeneratorModel<T>>(model: &M, prompt: &TokenSequence) -> Result<()> {
    let vocab = model.vocab_size();
    if prompt.tokens.iter().any(|&t| t as usize >= vocab) {
        return Err(Error::invalid("prompt contains token ids outside the vocabulary"));
    }
    Ok(())
}

/// Adaptive importance sampling on pre-logits for one prompt.
///
/// Starting from `U = 0`, each of the `κ` iterations draws `n` trajectories
/// from `N(U, σ²I)`, decodes them greedily with the perturbation, scores the
/// responses, and moves `U` to the weighted mean of the draws. A final round
/// of `n` draws around the last mean is scored too; the best response seen
/// anywhere is returned.
pub fn run_aisp<T, M, R>(
    model: &M,
    reward: &R,
    prompt: &TokenSequence,
    config: &ControlConfig<T>,
    stream: &SeedStream,
) -> Result<AispResult<T>>
where
    T: Scalar,
    M: GeneratorModel<T>,
    R: RewardModel<T> + ?Sized,
{
    config.validate()?;
    check_prompt(model, prompt)?;
    let mut inst = [Instance::new(prompt, *stream, model.dim(), config.tau)];
    let mut out = run_lockstep(model, reward, &mut inst, config)?;
    Ok(out.pop().expect("one instance"))
}

/// Batched form: one independent instance per prompt, advanced together one
/// iteration at a time. Prompt `p` uses `stream.child(p.id)`, so its result
/// equals `run_aisp(.., &stream.child(p.id))`.
pub fn run_batched_aisp<T, M, R>(
    model: &M,
    reward: &R,
    prompts: &[BatchPrompt],
    config: &ControlConfig<T>,
    stream: &SeedStream,
) -> Result<Vec<AispResult<T>>>
where
    T: Scalar,
    M: GeneratorModel<T>,
    R: RewardModel<T> + ?Sized,
{
    if prompts.is_empty() {
        return Err(Error::invalid("batch must contain at least one prompt"));
    }
    config.validate()?;
    for p in prompts {
        check_prompt(model, &p.tokens)?;
    }
    let mut instances: Vec<_> = prompts
        .iter()
        .map(|p| Instance::new(&p.tokens, stream.child(p.id), model.dim(), config.tau))
        .collect();
    run_lockstep(model, reward, &mut instances, config)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BonResult<T> {
    pub best_response: TokenSequence,
    pub best_reward: T,
    /// Rewards of all `N` samples in draw order.
    pub all_rewards: Vec<T>,
}

fn pick_best<T: Scalar>(candidates: Vec<(TokenSequence, T)>) -> (TokenSequence, T) {
    let mut best: Option<(TokenSequence, T)> = None;
    for (resp, r) in candidates {
        if best.as_ref().is_none_or(|(_, b)| r > *b) {
            best = Some((resp, r));
        }
    }
    best.expect("at least one candidate")
}

/// Best-of-N with temperature + top-p sampling. Sample `i` draws from
/// `stream.child(i)`; ties go to the earliest sample.
#[allow(clippy::too_many_arguments)]
pub fn run_bon<T, M, R>(
    model: &M,
    reward: &R,
    prompt: &TokenSequence,
    n_samples: usize,
    temperature: T,
    top_p: T,
    max_new_tokens: usize,
    stream: &SeedStream,
) -> Result<BonResult<T>>
where
    T: Scalar,
    M: GeneratorModel<T>,
    R: RewardModel<T> + ?Sized,
{
    if n_samples == 0 {
        return Err(Error::invalid("N must be >= 1"));
    }
    let candidates: Vec<(TokenSequence, T)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let y = decode_top_p(model, prompt, temperature, top_p, max_new_tokens, &mut stream.child(i).rng())?;
            let r = reward.score(prompt, &y);
            Ok((y, r))
        })
        .collect::<Result<_>>()?;
    let all_rewards = candidates.iter().map(|(_, r)| *r).collect();
    let (best_response, best_reward) = pick_best(candidates);
    Ok(BonResult {
        best_response,
        best_reward,
        all_rewards,
    })
}

/// Best-of-n over greedy decodes of `n` trajectories drawn from
/// `N(mean, σ²I)` with `stream`. With `stream = iteration_stream(s, 1)` and
/// `mean = 0` this is exactly the candidate set of the first iteration of
/// `run_aisp(.., s)`.
#[allow(clippy::too_many_arguments)]
pub fn run_bon_from_trajectories<T, M, R>(
    model: &M,
    reward: &R,
    prompt: &TokenSequence,
    mean: &MeanTrajectory<T>,
    sigma2: T,
    n: usize,
    max_new_tokens: usize,
    stream: &SeedStream,
) -> Result<(TokenSequence, T)>
where
    T: Scalar,
    M: GeneratorModel<T>,
    R: RewardModel<T> + ?Sized,
{
    let draws = sample_trajectories(mean, sigma2, n, stream)?;
    let evals = evaluate_all(model, reward, prompt, &draws, max_new_tokens)?;
    Ok(pick_best(evals.into_iter().map(|(rec, r)| (rec.response, r)).collect()))
}
