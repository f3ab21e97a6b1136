//! Experiment configuration: TOML text in, fully defaulted config out, or the
//! complete list of violations.

use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;
use toml::{Table, Value};

use crate::reward::{RewardKind, RewardParams};
use crate::sampling::ControlConfig;

/// Reference for every key and its default, as printed by `aisp --help`.
pub const CONFIG_REFERENCE: &str = "\
CONFIG FILE (TOML)
  seed = 0                        root seed (overridden by --seed)

  [model]                         required
  type = \"toy\"                    toy | file
  seed = 7                        toy: parameter seed
  d = 4                           toy: pre-logit dimension
  vocab_size = 16                 toy: vocabulary size (token 0 is EOS)
  eos_bias = 0.0                  toy: added to the EOS logit
  path = \"model.json\"             file: model file

  [control]                       required for aisp, batched, curves, kl, bon_equiv
  lambda = 0.3                    KL temperature, > 0
  alpha = 0.9999                  relaxation, in [0, 1]
  sigma2 = 0.5                    perturbation variance, > 0
  n = 32                          samples per iteration
  kappa = 32                      iterations
  max_new_tokens = 16
  tau = max_new_tokens            perturbed positions, 1 <= tau <= max_new_tokens

  [bon]                           required for bon, curves
  n = 1024                        samples N (curves: must be >= n*kappa)
  temperature = 1.0
  top_p = 0.95

  [reward]                        required
  kind = \"embedding_match\"        target_count | embedding_match | sparse_terminal
  seed = 0                        embedding_match weight seed
  target = 1                      target_count token
  suffix = [1]                    sparse_terminal suffix
  bonus = 1.0                     sparse_terminal bonus

  [prompts]                       required
  count = 8
  length = 4
  seed = 0

  [run]                           required
  method = \"aisp\"                 aisp | bon | batched | curves | kl | bon_equiv
  repeats = 1
  output_dir = \"out\"              overridden by --output-dir
  batch_size = 8                  batched: prompts per batch
  record_wall_time = false        adds wall_time_secs to summary.json (breaks byte-identical reruns)
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Aisp,
    Bon,
    Batched,
    Curves,
    Kl,
    BonEquiv,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Aisp => "aisp",
            Method::Bon => "bon",
            Method::Batched => "batched",
            Method::Curves => "curves",
            Method::Kl => "kl",
            Method::BonEquiv => "bon_equiv",
        }
    }

    fn needs_control(self) -> bool {
        !matches!(self, Method::Bon)
    }

    fn needs_bon(self) -> bool {
        matches!(self, Method::Bon | Method::Curves)
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "aisp" => Method::Aisp,
            "bon" => Method::Bon,
            "batched" => Method::Batched,
            "curves" => Method::Curves,
            "kl" => Method::Kl,
            "bon_equiv" => Method::BonEquiv,
            other => return Err(format!("unknown method `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelSection {
    Toy { seed: u64, d: usize, vocab_size: usize, eos_bias: f64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BonSection {
    pub n: usize,
    pub temperature: f64,
    pub top_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardSection {
    pub kind: RewardKind,
    pub seed: u64,
    pub target: u32,
    pub suffix: Vec<u32>,
    pub bonus: f64,
}

impl RewardSection {
    pub fn params(&self, vocab_size: usize) -> RewardParams {
        RewardParams {
            target: self.target,
            vocab_size,
            suffix: self.suffix.clone(),
            bonus: self.bonus,
        }
    }

    pub fn kind_str(&self) -> &'static str {
        match self.kind {
            RewardKind::TargetCount => "target_count",
            RewardKind::EmbeddingMatch => "embedding_match",
            RewardKind::SparseTerminal => "sparse_terminal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptSection {
    pub count: usize,
    pub length: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSection {
    pub method: Method,
    pub repeats: usize,
    pub output_dir: PathBuf,
    pub batch_size: usize,
    pub record_wall_time: bool,
}

/// Fully defaulted, validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub control: ControlConfig<f64>,
    pub bon: BonSection,
    pub reward: RewardSection,
    pub prompts: PromptSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    /// Normalized config as pretty JSON.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Reads typed keys out of one TOML table, recording every problem.
struct Section<'a> {
    name: &'a str,
    table: Option<&'a Table>,
    errors: &'a mut Vec<String>,
}

impl<'a> Section<'a> {
    fn key(&self, key: &str) -> String {
        if self.name.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.name)
        }
    }

    fn raw(&self, key: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(key))
    }

    fn float(&mut self, key: &str, default: f64) -> f64 {
        match self.raw(key) {
            None => default,
            Some(Value::Float(x)) => *x,
            Some(Value::Integer(i)) => *i as f64,
            Some(_) => {
                self.errors.push(format!("{} must be a number", self.key(key)));
                default
            }
        }
    }

    fn uint(&mut self, key: &str, default: u64) -> u64 {
        match self.raw(key) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(_) => {
                self.errors.push(format!("{} must be a nonnegative integer", self.key(key)));
                default
            }
        }
    }

    fn count(&mut self, key: &str, default: usize) -> usize {
        self.uint(key, default as u64) as usize
    }

    fn string(&mut self, key: &str, default: &str) -> String {
        match self.raw(key) {
            None => default.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                self.errors.push(format!("{} must be a string", self.key(key)));
                default.to_string()
            }
        }
    }

    fn boolean(&mut self, key: &str, default: bool) -> bool {
        match self.raw(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(_) => {
                self.errors.push(format!("{} must be true or false", self.key(key)));
                default
            }
        }
    }

    fn token_list(&mut self, key: &str, default: &[u32]) -> Vec<u32> {
        match self.raw(key) {
            None => default.to_vec(),
            Some(Value::Array(items)) => {
                let parsed: Option<Vec<u32>> = items
                    .iter()
                    .map(|v| v.as_integer().and_then(|i| u32::try_from(i).ok()))
                    .collect();
                parsed.unwrap_or_else(|| {
                    self.errors.push(format!("{} must be a list of token ids", self.key(key)));
                    default.to_vec()
                })
            }
            Some(_) => {
                self.errors.push(format!("{} must be a list of token ids", self.key(key)));
                default.to_vec()
            }
        }
    }

    fn reject_unknown(&mut self, known: &[&str]) {
        if let Some(t) = self.table {
            for k in t.keys() {
                if !known.contains(&k.as_str()) {
                    let key = self.key(k);
                    self.errors.push(format!("unknown key {key}"));
                }
            }
        }
    }
}

/// Parses and validates `text`. On failure returns every violation found.
pub fn validate_config(text: &str) -> Result<ExperimentConfig, Vec<String>> {
    let root: Table = match text.parse::<Table>() {
        Ok(t) => t,
        Err(e) => return Err(vec![format!("config is not valid TOML: {}", e.message())]),
    };
    let mut errors = Vec::new();

    const SECTIONS: [&str; 6] = ["model", "control", "bon", "reward", "prompts", "run"];
    for (k, v) in &root {
        if k == "seed" {
            continue;
        }
        if !SECTIONS.contains(&k.as_str()) {
            errors.push(format!("unknown key {k}"));
        } else if !v.is_table() {
            errors.push(format!("{k} must be a table"));
        }
    }
    let table = |name: &str| root.get(name).and_then(Value::as_table);

    let seed = Section {
        name: "",
        table: Some(&root),
        errors: &mut errors,
    }
    .uint("seed", 0);

    // run first: it decides which sections are mandatory
    let run_table = table("run");
    if run_table.is_none() {
        errors.push("missing section [run] (run.method is required)".into());
    }
    let mut s = Section {
        name: "run",
        table: run_table,
        errors: &mut errors,
    };
    let method_name = s.string("method", "aisp");
    let repeats = s.count("repeats", 1);
    let output_dir = PathBuf::from(s.string("output_dir", "out"));
    let batch_size = s.count("batch_size", 8);
    let record_wall_time = s.boolean("record_wall_time", false);
    s.reject_unknown(&["method", "repeats", "output_dir", "batch_size", "record_wall_time"]);
    let method = match method_name.parse::<Method>() {
        Ok(m) => m,
        Err(e) => {
            errors.push(format!("run.method: {e} (expected aisp, bon, batched, curves, kl or bon_equiv)"));
            Method::Aisp
        }
    };
    if repeats == 0 {
        errors.push("run.repeats must be >= 1".into());
    }
    if batch_size == 0 {
        errors.push("run.batch_size must be >= 1".into());
    }

    let require = |name: &str, needed: bool, errors: &mut Vec<String>| {
        if needed && table(name).is_none() {
            errors.push(format!(
                "missing section [{name}] (required for method {})",
                method.as_str()
            ));
        }
    };
    require("model", true, &mut errors);
    require("reward", true, &mut errors);
    require("prompts", true, &mut errors);
    require("control", method.needs_control(), &mut errors);
    require("bon", method.needs_bon(), &mut errors);

    // model
    let mut s = Section {
        name: "model",
        table: table("model"),
        errors: &mut errors,
    };
    let kind = s.string("type", "toy");
    let model_seed = s.uint("seed", 7);
    let d = s.count("d", 4);
    let vocab_size = s.count("vocab_size", 16);
    let eos_bias = s.float("eos_bias", 0.0);
    let path = s.raw("path").and_then(Value::as_str).map(PathBuf::from);
    if s.raw("path").is_some() && path.is_none() {
        s.errors.push("model.path must be a string".into());
    }
    s.reject_unknown(&["type", "seed", "d", "vocab_size", "eos_bias", "path"]);
    let model = match kind.as_str() {
        "toy" => {
            if d == 0 {
                errors.push("model.d must be >= 1".into());
            }
            if vocab_size < 2 {
                errors.push("model.vocab_size must be >= 2".into());
            }
            if !eos_bias.is_finite() {
                errors.push("model.eos_bias must be finite".into());
            }
            ModelSection::Toy {
                seed: model_seed,
                d,
                vocab_size,
                eos_bias,
            }
        }
        "file" => match path {
            Some(path) => ModelSection::File { path },
            None => {
                errors.push("model.path is required when model.type = \"file\"".into());
                ModelSection::File { path: PathBuf::new() }
            }
        },
        other => {
            errors.push(format!("model.type must be \"toy\" or \"file\" (got \"{other}\")"));
            ModelSection::Toy {
                seed: model_seed,
                d,
                vocab_size,
                eos_bias,
            }
        }
    };

    // control
    let mut s = Section {
        name: "control",
        table: table("control"),
        errors: &mut errors,
    };
    let lambda = s.float("lambda", 0.3);
    let alpha = s.float("alpha", 0.9999);
    let sigma2 = s.float("sigma2", 0.5);
    let n = s.count("n", 32);
    let kappa = s.count("kappa", 32);
    let max_new_tokens = s.count("max_new_tokens", 16);
    let tau = s.count("tau", max_new_tokens);
    s.reject_unknown(&["lambda", "alpha", "sigma2", "n", "kappa", "max_new_tokens", "tau"]);
    if !(lambda > 0.0) || !lambda.is_finite() {
        errors.push("control.lambda must be > 0".into());
    }
    if !(0.0..=1.0).contains(&alpha) {
        errors.push("control.alpha must be in [0, 1]".into());
    }
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        errors.push("control.sigma2 must be > 0".into());
    }
    if n == 0 {
        errors.push("control.n must be >= 1".into());
    }
    if kappa == 0 {
        errors.push("control.kappa must be >= 1".into());
    }
    if max_new_tokens == 0 {
        errors.push("control.max_new_tokens must be >= 1".into());
    }
    if tau == 0 || tau > max_new_tokens {
        errors.push("control.tau must satisfy 1 <= tau <= control.max_new_tokens".into());
    }
    let control = ControlConfig {
        lambda,
        alpha,
        sigma2,
        n,
        kappa,
        tau,
        max_new_tokens,
        seed,
    };

    // bon
    let mut s = Section {
        name: "bon",
        table: table("bon"),
        errors: &mut errors,
    };
    let bon = BonSection {
        n: s.count("n", 1024),
        temperature: s.float("temperature", 1.0),
        top_p: s.float("top_p", 0.95),
    };
    s.reject_unknown(&["n", "temperature", "top_p"]);
    if bon.n == 0 {
        errors.push("bon.n must be >= 1".into());
    }
    if !(bon.temperature > 0.0) || !bon.temperature.is_finite() {
        errors.push("bon.temperature must be > 0".into());
    }
    if !(bon.top_p > 0.0 && bon.top_p <= 1.0) {
        errors.push("bon.top_p must be in (0, 1]".into());
    }
    if method == Method::Curves && bon.n < n * kappa {
        errors.push(format!(
            "bon.n must be >= control.n * control.kappa = {} for method curves",
            n * kappa
        ));
    }

    // reward
    let mut s = Section {
        name: "reward",
        table: table("reward"),
        errors: &mut errors,
    };
    let kind_name = s.string("kind", "embedding_match");
    let reward_seed = s.uint("seed", 0);
    let target = s.uint("target", 1);
    let suffix = s.token_list("suffix", &[1]);
    let bonus = s.float("bonus", 1.0);
    s.reject_unknown(&["kind", "seed", "target", "suffix", "bonus"]);
    let kind = kind_name.parse::<RewardKind>().unwrap_or_else(|e| {
        errors.push(format!("reward.kind: {e}"));
        RewardKind::EmbeddingMatch
    });
    if kind == RewardKind::SparseTerminal && suffix.is_empty() {
        errors.push("reward.suffix must be non-empty for sparse_terminal".into());
    }
    if !bonus.is_finite() {
        errors.push("reward.bonus must be finite".into());
    }
    let target = u32::try_from(target).unwrap_or_else(|_| {
        errors.push("reward.target is out of range".into());
        0
    });
    let reward = RewardSection {
        kind,
        seed: reward_seed,
        target,
        suffix,
        bonus,
    };

    // prompts
    let mut s = Section {
        name: "prompts",
        table: table("prompts"),
        errors: &mut errors,
    };
    let prompts = PromptSection {
        count: s.count("count", 8),
        length: s.count("length", 4),
        seed: s.uint("seed", 0),
    };
    s.reject_unknown(&["count", "length", "seed"]);
    if prompts.count == 0 {
        errors.push("prompts.count must be >= 1".into());
    }

    if errors.is_empty() {
        Ok(ExperimentConfig {
            seed,
            model,
            control,
            bon,
            reward,
            prompts,
            run: RunSection {
                method,
                repeats,
                output_dir,
                batch_size,
                record_wall_time,
            },
        })
    } else {
        Err(errors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [model]
        [control]
        [reward]
        [prompts]
        [run]
        method = "aisp"
    "#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = validate_config(MINIMAL).unwrap();
        assert_eq!(cfg.control.n, 32);
        assert_eq!(cfg.control.tau, cfg.control.max_new_tokens);
        assert_eq!(cfg.run.repeats, 1);
        assert!(matches!(cfg.model, ModelSection::Toy { d: 4, vocab_size: 16, .. }));
    }

    #[test]
    fn zero_lambda_is_reported() {
        let text = MINIMAL.replace("[control]", "[control]\nlambda = 0");
        let errs = validate_config(&text).unwrap_err();
        assert!(errs.contains(&"control.lambda must be > 0".to_string()), "{errs:?}");
    }

    #[test]
    fn tuned_alpha_accepted() {
        let text = MINIMAL.replace("[control]", "[control]\nalpha = 0.9999");
        assert_eq!(validate_config(&text).unwrap().control.alpha, 0.9999);
    }

    #[test]
    fn missing_model_section_named() {
        let text = MINIMAL.replace("[model]", "");
        let errs = validate_config(&text).unwrap_err();
        assert!(errs.iter().any(|e| e.contains("[model]") && e.contains("aisp")), "{errs:?}");
    }

    #[test]
    fn all_violations_reported() {
        let text = r#"
            [model]
            d = 0
            [control]
            lambda = -1.0
            sigma2 = 0
            alpha = 2
            [reward]
            kind = "nope"
            [prompts]
            [run]
            method = "aisp"
            bogus = 1
        "#;
        let errs = validate_config(text).unwrap_err();
        for needle in ["model.d", "control.lambda", "control.sigma2", "control.alpha", "reward.kind", "run.bogus"] {
            assert!(errs.iter().any(|e| e.contains(needle)), "missing {needle} in {errs:?}");
        }
    }

    #[test]
    fn tuning_grids_accepted() {
        for t in [0.4, 0.6, 0.8, 1.0] {
            for p in [0.7, 0.8, 0.9, 0.95] {
                let text = format!("{MINIMAL}\n[bon]\ntemperature = {t}\ntop_p = {p}\n");
                assert!(validate_config(&text).is_ok());
            }
        }
    }

    #[test]
    fn curves_needs_budget() {
        let text = MINIMAL.replace("method = \"aisp\"", "method = \"curves\"") + "\n[bon]\nn = 10\n";
        let errs = validate_config(&text).unwrap_err();
        assert!(errs.iter().any(|e| e.starts_with("bon.n")), "{errs:?}");
    }

    #[test]
    fn bad_toml_reported() {
        assert_eq!(validate_config("[model").unwrap_err().len(), 1);
    }
}
