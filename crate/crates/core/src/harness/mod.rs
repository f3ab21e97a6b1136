//! Experiment runner behind the `aisp` CLI.
//!
//! A run writes up to three files into the output directory:
//!
//! * `curves.csv`: `k,mean_at_k,best_at_k,best_so_far,bon_at_budget,ess_mean`,
//!   one row per iteration (AISP-based methods only; `bon_at_budget` is
//!   empty unless the method is `curves`);
//! * `transcripts.jsonl`: one object per (repeat, prompt, method) with
//!   `prompt_id, method, seed, tokens, reward, evaluations`;
//! * `summary.json`: config echo plus aggregate rewards and method-specific
//!   diagnostics.
//!
//! Every byte is a function of the config (and `--seed`), except the opt-in
//! `wall_time_secs` field.

mod config;
mod output;

use std::path::PathBuf;
use std::time::Instant;

use thiserror::Error;

use crate::analysis::{aggregate_curves, kl_divergence_empirical};
use crate::controller::{iteration_stream, run_aisp, run_batched_aisp, run_bon, run_bon_from_trajectories, AispResult, BatchPrompt};
use crate::model::{load_linear_model, make_toy_model, GeneratorModel, RecurrentModel, TokenSequence};
use crate::reward::{make_reward, SyntheticReward};
use crate::rng::SeedStream;
use crate::sampling::ControlConfig;
use crate::trajectory::Trajectory;

pub use config::{
    validate_config, BonSection, ExperimentConfig, Method, ModelSection, PromptSection, RewardSection, RunSection,
    CONFIG_REFERENCE,
};
pub use output::{Summary, TranscriptLine, CURVES_HEADER};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Core(#[from] crate::Error),

    #[error(transparent)]
    Model(#[from] crate::LoadError),

    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Paths of the files a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

const AISP_TAG: u64 = 0;
const BON_TAG: u64 = 1;

/// Seeded uniform prompts over the non-EOS vocabulary.
pub fn synthetic_prompts(section: &PromptSection, vocab_size: usize, eos_id: u32) -> Vec<TokenSequence> {
    let alphabet: Vec<u32> = (0..vocab_size as u32).filter(|&t| t != eos_id).collect();
    let stream = SeedStream::new(section.seed);
    (0..section.count as u64)
        .map(|j| {
            let mut rng = stream.child(j).rng();
            let tokens = (0..section.length)
                .map(|_| alphabet[rand::Rng::random_range(&mut rng, 0..alphabet.len())])
                .collect();
            TokenSequence::new(tokens)
        })
        .collect()
}

fn build_model(section: &ModelSection) -> Result<RecurrentModel<f64>, HarnessError> {
    Ok(match section {
        ModelSection::Toy {
            seed,
            d,
            vocab_size,
            eos_bias,
        } => make_toy_model(*seed, *d, *vocab_size, *eos_bias)?,
        ModelSection::File { path } => load_linear_model(path)?,
    })
}

/// Output of one (repeat, prompt) cell.
struct Cell {
    repeat: usize,
    prompt: usize,
    seed: u64,
    tokens: Vec<u32>,
    reward: f64,
    evaluations: usize,
}

fn aisp_stream(root: &SeedStream, repeat: usize) -> SeedStream {
    root.descend(&[AISP_TAG, repeat as u64])
}

fn bon_stream(root: &SeedStream, repeat: usize) -> SeedStream {
    root.descend(&[BON_TAG, repeat as u64])
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    model: RecurrentModel<f64>,
    reward: SyntheticReward<f64>,
    prompts: Vec<TokenSequence>,
    root: SeedStream,
}

impl Context<'_> {
    fn aisp_runs(&self, control: &ControlConfig<f64>) -> Result<Vec<Vec<AispResult<f64>>>, HarnessError> {
        let mut all = Vec::with_capacity(self.cfg.run.repeats);
        for r in 0..self.cfg.run.repeats {
            let stream = aisp_stream(&self.root, r);
            let runs = self
                .prompts
                .iter()
                .enumerate()
                .map(|(j, p)| run_aisp(&self.model, &self.reward, p, control, &stream.child(j as u64)))
                .collect::<crate::Result<Vec<_>>>()?;
            all.push(runs);
        }
        Ok(all)
    }

    fn batched_runs(&self) -> Result<Vec<Vec<AispResult<f64>>>, HarnessError> {
        let mut all = Vec::with_capacity(self.cfg.run.repeats);
        for r in 0..self.cfg.run.repeats {
            let stream = aisp_stream(&self.root, r);
            let batch: Vec<BatchPrompt> = self
                .prompts
                .iter()
                .enumerate()
                .map(|(j, p)| BatchPrompt {
                    id: j as u64,
                    tokens: p.clone(),
                })
                .collect();
            let mut runs = Vec::with_capacity(batch.len());
            for chunk in batch.chunks(self.cfg.run.batch_size) {
                runs.extend(run_batched_aisp(&self.model, &self.reward, chunk, &self.cfg.control, &stream)?);
            }
            all.push(runs);
        }
        Ok(all)
    }

    fn bon_runs(&self) -> Result<Vec<Vec<crate::controller::BonResult<f64>>>, HarnessError> {
        let b = &self.cfg.bon;
        let max_new = self.cfg.control.max_new_tokens;
        let mut all = Vec::with_capacity(self.cfg.run.repeats);
        for r in 0..self.cfg.run.repeats {
            let stream = bon_stream(&self.root, r);
            let runs = self
                .prompts
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    run_bon(&self.model, &self.reward, p, b.n, b.temperature, b.top_p, max_new, &stream.child(j as u64))
                })
                .collect::<crate::Result<Vec<_>>>()?;
            all.push(runs);
        }
        Ok(all)
    }

    fn aisp_cells(&self, runs: &[Vec<AispResult<f64>>]) -> Vec<Cell> {
        runs.iter()
            .enumerate()
            .flat_map(|(r, row)| {
                let stream = aisp_stream(&self.root, r);
                row.iter().enumerate().map(move |(j, res)| Cell {
                    repeat: r,
                    prompt: j,
                    seed: stream.child(j as u64).key(),
                    tokens: res.best_response.tokens.clone(),
                    reward: res.best_reward,
                    evaluations: res.total_evaluations,
                })
            })
            .collect()
    }

    fn bon_cells(&self, runs: &[Vec<crate::controller::BonResult<f64>>]) -> Vec<Cell> {
        runs.iter()
            .enumerate()
            .flat_map(|(r, row)| {
                let stream = bon_stream(&self.root, r);
                let n = self.cfg.bon.n;
                row.iter().enumerate().map(move |(j, res)| Cell {
                    repeat: r,
                    prompt: j,
                    seed: stream.child(j as u64).key(),
                    tokens: res.best_response.tokens.clone(),
                    reward: res.best_reward,
                    evaluations: n,
                })
            })
            .collect()
    }
}

/// Runs the configured method over all prompts and repeats and writes the
/// output files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    let started = Instant::now();
    let model = build_model(&cfg.model)?;
    if let Err(e) = cfg.control.validate() {
        return Err(HarnessError::Config(vec![format!("control: {e}")]));
    }
    let reward = make_reward(
        cfg.reward.kind_str(),
        &cfg.reward.params(model.vocab_size()),
        cfg.reward.seed,
    )?;
    let prompts = synthetic_prompts(&cfg.prompts, model.vocab_size(), model.eos_id());
    let ctx = Context {
        cfg,
        model,
        reward,
        prompts,
        root: SeedStream::new(cfg.seed),
    };
    let method = cfg.run.method;
    let mut out = output::Output::new(cfg);

    match method {
        Method::Aisp | Method::Batched | Method::Kl => {
            let runs = if method == Method::Batched {
                ctx.batched_runs()?
            } else {
                ctx.aisp_runs(&cfg.control)?
            };
            let flat: Vec<AispResult<f64>> = runs.iter().flatten().cloned().collect();
            out.curves = Some(aggregate_curves(&flat, &[], cfg.control.n)?);
            let cells = ctx.aisp_cells(&runs);
            out.set_primary(&cells, ctx.prompts.len());
            out.add_transcripts(method.as_str(), &cells);

            if method == Method::Kl {
                let mut kl = vec![vec![0.0; ctx.prompts.len()]; runs.len()];
                for (r, row) in runs.iter().enumerate() {
                    for (j, res) in row.iter().enumerate() {
                        kl[r][j] = kl_divergence_empirical(&ctx.model, &res.final_mean, &ctx.prompts[j], cfg.control.max_new_tokens)?;
                    }
                }
                out.set_kl(&kl);
            }
        }
        Method::Bon => {
            let runs = ctx.bon_runs()?;
            let cells = ctx.bon_cells(&runs);
            out.set_primary(&cells, ctx.prompts.len());
            out.add_transcripts("bon", &cells);
        }
        Method::Curves => {
            let aisp = ctx.aisp_runs(&cfg.control)?;
            let bon = ctx.bon_runs()?;
            let flat: Vec<AispResult<f64>> = aisp.iter().flatten().cloned().collect();
            let bon_rewards: Vec<Vec<f64>> = bon.iter().flatten().map(|b| b.all_rewards.clone()).collect();
            out.curves = Some(aggregate_curves(&flat, &bon_rewards, cfg.control.n)?);
            let a_cells = ctx.aisp_cells(&aisp);
            let b_cells = ctx.bon_cells(&bon);
            out.set_primary(&a_cells, ctx.prompts.len());
            out.set_bon(&b_cells, ctx.prompts.len());
            out.add_transcripts("aisp", &a_cells);
            out.add_transcripts("bon", &b_cells);
        }
        Method::BonEquiv => {
            let control = ControlConfig {
                kappa: 1,
                alpha: 1.0,
                lambda: 1e-9,
                ..cfg.control
            };
            let runs = ctx.aisp_runs(&control)?;
            let zero = Trajectory::zeros(ctx.model.dim(), control.tau);
            let (mut unique, mut matches) = (0usize, 0usize);
            for (r, row) in runs.iter().enumerate() {
                let stream = aisp_stream(&ctx.root, r);
                for (j, res) in row.iter().enumerate() {
                    let shared = iteration_stream(&stream.child(j as u64), 1);
                    let (winner, _) = run_bon_from_trajectories(
                        &ctx.model,
                        &ctx.reward,
                        &ctx.prompts[j],
                        &zero,
                        control.sigma2,
                        control.n,
                        control.max_new_tokens,
                        &shared,
                    )?;
                    let rewards = &res.traces[0].rewards;
                    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if rewards.iter().filter(|&&x| x == max).count() == 1 {
                        unique += 1;
                        if res.mean_response == winner {
                            matches += 1;
                        }
                    }
                }
            }
            let cells = ctx.aisp_cells(&runs);
            out.set_primary(&cells, ctx.prompts.len());
            out.add_transcripts("aisp", &cells);
            out.set_equivalence(runs.iter().map(Vec::len).sum(), unique, matches);
        }
    }

    if cfg.run.record_wall_time {
        out.summary.wall_time_secs = Some(started.elapsed().as_secs_f64());
    }
    eprintln!("{} finished in {:.2}s", method.as_str(), started.elapsed().as_secs_f64());
    out.write(&cfg.run.output_dir)
}
