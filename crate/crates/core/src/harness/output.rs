use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Cell, ExperimentConfig, HarnessError, RunReport};
use crate::analysis::ConvergenceCurves;

pub const CURVES_HEADER: [&str; 6] = ["k", "mean_at_k", "best_at_k", "best_so_far", "bon_at_budget", "ess_mean"];

/// One line of `transcripts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub prompt_id: usize,
    pub method: String,
    pub seed: u64,
    pub tokens: Vec<u32>,
    pub reward: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptStats {
    pub prompt_id: usize,
    /// Mean over repeats.
    pub reward_mean: f64,
    /// Sample standard deviation over repeats (0 for one repeat).
    pub reward_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    /// Mean over prompts and repeats.
    pub reward_mean: f64,
    /// Standard deviation over repeats of the prompt-averaged reward.
    pub reward_std: f64,
    pub prompts: Vec<PromptStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlStats {
    pub mean: f64,
    pub per_prompt: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceStats {
    pub instances: usize,
    pub unique_argmax: usize,
    pub matches: usize,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub method: String,
    pub config: ExperimentConfig,
    pub rewards: Option<RewardStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bon_rewards: Option<RewardStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<KlStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equivalence: Option<EquivalenceStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn reward_stats(cells: &[Cell], prompts: usize) -> RewardStats {
    let repeats = cells.iter().map(|c| c.repeat + 1).max().unwrap_or(0);
    let mut grid = vec![vec![0.0; prompts]; repeats];
    for c in cells {
        grid[c.repeat][c.prompt] = c.reward;
    }
    let per_repeat: Vec<f64> = grid.iter().map(|row| mean(row)).collect();
    let prompts = (0..prompts)
        .map(|j| {
            let col: Vec<f64> = grid.iter().map(|row| row[j]).collect();
            PromptStats {
                prompt_id: j,
                reward_mean: mean(&col),
                reward_std: sample_std(&col),
            }
        })
        .collect();
    RewardStats {
        reward_mean: mean(&per_repeat),
        reward_std: sample_std(&per_repeat),
        prompts,
    }
}

pub(super) struct Output {
    pub summary: Summary,
    pub curves: Option<ConvergenceCurves<f64>>,
    transcripts: Vec<TranscriptLine>,
}

impl Output {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            summary: Summary {
                method: cfg.run.method.as_str().to_string(),
                config: cfg.clone(),
                rewards: None,
                bon_rewards: None,
                kl: None,
                equivalence: None,
                wall_time_secs: None,
            },
            curves: None,
            transcripts: Vec::new(),
        }
    }

    pub fn set_primary(&mut self, cells: &[Cell], prompts: usize) {
        self.summary.rewards = Some(reward_stats(cells, prompts));
    }

    pub fn set_bon(&mut self, cells: &[Cell], prompts: usize) {
        self.summary.bon_rewards = Some(reward_stats(cells, prompts));
    }

    pub fn set_kl(&mut self, kl: &[Vec<f64>]) {
        let flat: Vec<f64> = kl.iter().flatten().copied().collect();
        let prompts = kl.first().map_or(0, Vec::len);
        let per_prompt = (0..prompts)
            .map(|j| mean(&kl.iter().map(|row| row[j]).collect::<Vec<_>>()))
            .collect();
        self.summary.kl = Some(KlStats {
            mean: mean(&flat),
            per_prompt,
        });
    }

    pub fn set_equivalence(&mut self, instances: usize, unique_argmax: usize, matches: usize) {
        self.summary.equivalence = Some(EquivalenceStats {
            instances,
            unique_argmax,
            matches,
        });
    }

    pub fn add_transcripts(&mut self, method: &str, cells: &[Cell]) {
        self.transcripts.extend(cells.iter().map(|c| TranscriptLine {
            prompt_id: c.prompt,
            method: method.to_string(),
            seed: c.seed,
            tokens: c.tokens.clone(),
            reward: c.reward,
            evaluations: c.evaluations,
        }));
    }

    pub fn write(self, dir: &Path) -> Result<RunReport, HarnessError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| HarnessError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut files = Vec::new();

        if let Some(curves) = &self.curves {
            let path = dir.join("curves.csv");
            fs::write(&path, curves_csv(curves)).map_err(io(&path))?;
            files.push(path);
        }

        let path = dir.join("transcripts.jsonl");
        let mut buf = Vec::new();
        for line in &self.transcripts {
            serde_json::to_writer(&mut buf, line).expect("transcript serializes");
            buf.push(b'\n');
        }
        fs::write(&path, buf).map_err(io(&path))?;
        files.push(path);

        let path = dir.join("summary.json");
        let mut buf = serde_json::to_vec_pretty(&self.summary).expect("summary serializes");
        buf.push(b'\n');
        fs::write(&path, buf).map_err(io(&path))?;
        files.push(path);

        Ok(RunReport {
            output_dir: PathBuf::from(dir),
            files,
        })
    }
}

fn curves_csv(c: &ConvergenceCurves<f64>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CURVES_HEADER).expect("in-memory write");
    for k in 0..c.len() {
        let bon = c
            .bon_at_budget
            .as_ref()
            .map_or(String::new(), |b| b[k].to_string());
        w.write_record([
            (k + 1).to_string(),
            c.mean_at_k[k].to_string(),
            c.best_at_k[k].to_string(),
            c.best_so_far[k].to_string(),
            bon,
            c.ess_mean[k].to_string(),
        ])
        .expect("in-memory write");
    }
    let mut out = w.into_inner().expect("in-memory flush");
    out.flush().ok();
    out
}
