use std::fs;
use std::path::Path;

use aisp::harness::{run_experiment, validate_config, TranscriptLine};
use aisp::reward::{make_reward, RewardParams};
use aisp::{RewardModel, TokenSequence};

fn config(method: &str, extra: &str, dir: &Path) -> String {
    format!(
        r#"
seed = 3

[model]
type = "toy"
seed = 7
d = 4
vocab_size = 12

[control]
n = 4
kappa = 5
max_new_tokens = 6

[bon]
n = 20
temperature = 0.8
top_p = 0.9

[reward]
kind = "embedding_match"
seed = 2

[prompts]
count = 3
length = 3
seed = 1

[run]
method = "{method}"
repeats = 2
output_dir = "{}"
{extra}
"#,
        dir.display()
    )
}

fn run(text: &str) -> aisp::harness::RunReport {
    let cfg = validate_config(text).unwrap_or_else(|v| panic!("{v:?}"));
    run_experiment(&cfg).unwrap()
}

fn transcripts(dir: &Path) -> Vec<TranscriptLine> {
    fs::read_to_string(dir.join("transcripts.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn reruns_are_byte_identical() {
    for method in ["aisp", "bon", "batched", "curves", "kl", "bon_equiv"] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run(&config(method, "", a.path()));
        let rb = run(&config(method, "", b.path()));
        assert_eq!(ra.files.len(), rb.files.len());
        assert!(!ra.files.is_empty());
        for (fa, fb) in ra.files.iter().zip(&rb.files) {
            assert_eq!(fa.file_name(), fb.file_name());
            let (ta, tb) = (fs::read_to_string(fa).unwrap(), fs::read_to_string(fb).unwrap());
            // the config echo names the output directory; nothing else may differ
            let ta = ta.replace(&a.path().display().to_string(), "OUT");
            let tb = tb.replace(&b.path().display().to_string(), "OUT");
            assert_eq!(ta, tb, "{method}: {}", fa.display());
        }
    }
}

#[test]
fn single_sample_bon_reports_that_sample() {
    let dir = tempfile::tempdir().unwrap();
    let text = config("bon", "", dir.path()).replace("n = 20", "n = 1");
    run(&text);
    let reward = make_reward::<f64>("embedding_match", &RewardParams { vocab_size: 12, ..Default::default() }, 2).unwrap();
    let lines = transcripts(dir.path());
    assert_eq!(lines.len(), 6);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let prompts = summary["rewards"]["prompts"].as_array().unwrap();
    for j in 0..3 {
        let mut per_repeat = Vec::new();
        for line in lines.iter().filter(|l| l.prompt_id == j) {
            assert_eq!(line.evaluations, 1);
            let y = TokenSequence::new(line.tokens.clone());
            assert_eq!(reward.score(&TokenSequence::default(), &y), line.reward);
            per_repeat.push(line.reward);
        }
        let mean = per_repeat.iter().sum::<f64>() / per_repeat.len() as f64;
        assert_eq!(prompts[j]["reward_mean"].as_f64().unwrap(), mean);
    }
}

#[test]
fn thirty_two_iterations_write_32_curve_rows() {
    let dir = tempfile::tempdir().unwrap();
    let text = config("aisp", "", dir.path())
        .replace("n = 4\nkappa = 5", "n = 32\nkappa = 32")
        .replace("repeats = 2", "repeats = 1");
    run(&text);
    let mut reader = csv::Reader::from_path(dir.path().join("curves.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        ["k", "mean_at_k", "best_at_k", "best_so_far", "bon_at_budget", "ess_mean"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 32);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), i + 1);
        assert_eq!(&row[4], "");
    }
    for line in transcripts(dir.path()) {
        assert_eq!(line.evaluations, 1056);
        assert_eq!(line.method, "aisp");
    }
}

#[test]
fn curves_include_bon_budget() {
    let dir = tempfile::tempdir().unwrap();
    run(&config("curves", "", dir.path()));
    let mut reader = csv::Reader::from_path(dir.path().join("curves.csv")).unwrap();
    let budget: Vec<f64> = reader.records().map(|r| r.unwrap()[4].parse().unwrap()).collect();
    assert_eq!(budget.len(), 5);
    assert!(budget.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn kl_and_equivalence_summaries() {
    let dir = tempfile::tempdir().unwrap();
    run(&config("kl", "", dir.path()));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["kl"]["per_prompt"].as_array().unwrap().len(), 3);

    let dir = tempfile::tempdir().unwrap();
    run(&config("bon_equiv", "", dir.path()));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let eq = &summary["equivalence"];
    assert_eq!(eq["instances"].as_u64(), Some(6));
    assert_eq!(eq["matches"], eq["unique_argmax"]);
}

#[test]
fn wall_time_only_when_requested() {
    let dir = tempfile::tempdir().unwrap();
    run(&config("aisp", "", dir.path()));
    let text = fs::read_to_string(dir.path().join("summary.json")).unwrap();
    assert!(!text.contains("wall_time_secs"));
    run(&config("aisp", "record_wall_time = true", dir.path()));
    let text = fs::read_to_string(dir.path().join("summary.json")).unwrap();
    assert!(text.contains("wall_time_secs"));
}

#[test]
fn every_violation_is_listed() {
    let dir = tempfile::tempdir().unwrap();
    let text = config("aisp", "", dir.path())
        .replace("n = 4\n", "n = 0\nlambda = 0.0\nsigma2 = -1.0\n")
        .replace("[model]\ntype = \"toy\"\nseed = 7\nd = 4\nvocab_size = 12\n", "");
    let errors = validate_config(&text).unwrap_err();
    let joined = errors.join("\n");
    assert!(joined.contains("control.lambda must be > 0"), "{joined}");
    assert!(joined.contains("control.sigma2"), "{joined}");
    assert!(joined.contains("control.n"), "{joined}");
    assert!(joined.contains("[model]"), "{joined}");
}
