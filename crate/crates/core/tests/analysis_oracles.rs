use aisp::analysis::{aggregate_curves, effective_sample_size, kl_divergence_empirical, softmax_gaussian_check};
use aisp::controller::{run_aisp, run_bon};
use aisp::model::{decode_greedy_perturbed, make_toy_model};
use aisp::reward::{make_reward, RewardParams};
use aisp::{ControlConfig, GeneratorModel, SeedStream, TokenSequence, Trajectory, WeightVector};
use proptest::prelude::*;
use rand::Rng;

fn lse_two_pass(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[test]
fn empirical_kl_matches_logit_difference_form() {
    let model = make_toy_model::<f64>(7, 4, 16, 0.0).unwrap();
    let (d, vocab) = (model.dim(), model.vocab_size());
    let w: Vec<&[f64]> = model.output_weight().chunks(d).collect();
    let b = model.output_bias();
    let logits = |z: &[f64]| -> Vec<f64> {
        (0..vocab)
            .map(|y| w[y].iter().zip(z).map(|(a, x)| a * x).sum::<f64>() + b[y])
            .collect()
    };
    let mut rng = SeedStream::new(31).rng();
    let mut nonzero = 0;
    for _ in 0..20 {
        let tau = rng.random_range(1..8);
        let prompt = TokenSequence::new((0..3).map(|_| rng.random_range(1..16)).collect());
        let u = Trajectory::from_fn(d, tau, |_, _| rng.random_range(-1.0..1.0));
        let got = kl_divergence_empirical(&model, &u, &prompt, 10).unwrap();

        let y = decode_greedy_perturbed(&model, &prompt, &u, 10).unwrap().response;
        let mut past = prompt.tokens.clone();
        let mut expected = 0.0;
        for (t, &tok) in y.tokens.iter().enumerate().take(tau) {
            let z = model.prelogit_of(&past);
            let zu: Vec<f64> = z.iter().zip(u.column(t)).map(|(a, b)| a + b).collect();
            let wu: f64 = w[tok as usize].iter().zip(u.column(t)).map(|(a, b)| a * b).sum();
            expected += wu - lse_two_pass(&logits(&zu)) + lse_two_pass(&logits(&z));
            past.push(tok);
        }
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
        if expected.abs() > 1e-6 {
            nonzero += 1;
        }
        assert_eq!(kl_divergence_empirical(&model, &Trajectory::zeros(d, tau), &prompt, 10).unwrap(), 0.0);
    }
    assert!(nonzero > 10);
}

#[test]
fn empirical_kl_rejects_wrong_rows() {
    let model = make_toy_model::<f64>(7, 4, 16, 0.0).unwrap();
    assert!(kl_divergence_empirical(&model, &Trajectory::zeros(3, 2), &TokenSequence::new(vec![1]), 5).is_err());
}

#[test]
fn softmax_gaussian_random_instances() {
    let mut rng = SeedStream::new(32).rng();
    for _ in 0..50 {
        let d = rng.random_range(1..=5);
        let k = rng.random_range(2..=8);
        let means: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        // Σ = L Lᵀ + I is well conditioned and SPD
        let l: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if j <= i { rng.random_range(-0.8..0.8) } else { 0.0 }).collect())
            .collect();
        let cov: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| (0..d).map(|m| l[i][m] * l[j][m]).sum::<f64>() + if i == j { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let priors: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        assert!(softmax_gaussian_check(&means, &cov, &priors, &z).unwrap() < 1e-10);
    }
}

#[test]
fn softmax_gaussian_identical_classes() {
    let means = vec![vec![0.3, -0.2]; 4];
    let cov = vec![vec![1.0, 0.2], vec![0.2, 0.5]];
    let gap = softmax_gaussian_check(&means, &cov, &[0.25; 4], &[1.0, 2.0]).unwrap();
    assert!(gap < 1e-15);
    assert!(softmax_gaussian_check(&means, &[vec![1.0, 2.0], vec![0.0, 1.0]], &[0.25; 4], &[0.0, 0.0]).is_err());
}

#[test]
fn ess_matches_direct_formula() {
    let mut rng = SeedStream::new(33).rng();
    for _ in 0..100 {
        let n = rng.random_range(1..100);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0f64).powi(3) + 1e-9).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let mut sq = 0.0;
        for x in &w {
            sq += x * x;
        }
        let ess = effective_sample_size(&WeightVector::new(w).unwrap());
        assert!((ess - 1.0 / sq).abs() < 1e-12 * ess);
        assert!(ess >= 1.0 - 1e-12 && ess <= n as f64 + 1e-9);
    }
}

fn small_run(seed: u64) -> aisp::AispResult {
    let model = make_toy_model::<f64>(2, 3, 8, 0.0).unwrap();
    let reward = make_reward::<f64>("embedding_match", &RewardParams { vocab_size: 8, ..Default::default() }, 4).unwrap();
    let config = ControlConfig { n: 4, kappa: 5, tau: 5, max_new_tokens: 6, ..Default::default() };
    run_aisp(&model, &reward, &TokenSequence::new(vec![1, 3]), &config, &SeedStream::new(seed)).unwrap()
}

#[test]
fn single_result_curves_equal_its_traces() {
    let r = small_run(1);
    let curves = aggregate_curves(std::slice::from_ref(&r), &[], 4).unwrap();
    assert_eq!(curves.len(), 5);
    assert!(curves.bon_at_budget.is_none());
    for (k, t) in r.traces.iter().enumerate() {
        assert_eq!(curves.mean_at_k[k], t.mean_reward);
        assert_eq!(curves.best_at_k[k], t.best_at_k);
        assert_eq!(curves.best_so_far[k], t.best_so_far);
        assert_eq!(curves.ess_mean[k], t.ess);
    }
}

#[test]
fn full_budget_equals_bon_best() {
    let model = make_toy_model::<f64>(2, 3, 8, 0.0).unwrap();
    let reward = make_reward::<f64>("embedding_match", &RewardParams { vocab_size: 8, ..Default::default() }, 4).unwrap();
    let prompt = TokenSequence::new(vec![1, 3]);
    let bon = run_bon(&model, &reward, &prompt, 20, 1.0, 0.95, 6, &SeedStream::new(3)).unwrap();
    let r = small_run(2);
    let curves = aggregate_curves(&[r], &[bon.all_rewards.clone()], 4).unwrap();
    let budget = curves.bon_at_budget.unwrap();
    assert_eq!(*budget.last().unwrap(), bon.best_reward);
    assert!(aggregate_curves(&[small_run(3)], &[vec![0.0; 19]], 4).is_err());
}

#[test]
fn curves_average_over_runs() {
    let runs: Vec<_> = (0..3).map(small_run).collect();
    let curves = aggregate_curves(&runs, &[], 4).unwrap();
    for k in 0..5 {
        let expected = runs.iter().map(|r| r.traces[k].best_so_far).sum::<f64>() / 3.0;
        assert!((curves.best_so_far[k] - expected).abs() < 1e-15);
    }
    assert!(curves.best_so_far.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(curves.runs, 3);
}

proptest! {
    #[test]
    fn bon_budget_is_a_prefix_max(
        lists in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 20), 1..6),
    ) {
        let r = small_run(0);
        let curves = aggregate_curves(&[r], &lists, 4).unwrap();
        let budget = curves.bon_at_budget.unwrap();
        prop_assert!(budget.windows(2).all(|w| w[0] <= w[1]));
        for k in 0..5 {
            let expected = lists
                .iter()
                .map(|l| l[..4 * (k + 1)].iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .sum::<f64>()
                / lists.len() as f64;
            prop_assert!((budget[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ess_is_within_bounds(raw in prop::collection::vec(0.0..1.0f64, 1..64)) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-6);
        let n = raw.len() as f64;
        let w = WeightVector::new(raw.iter().map(|x| x / total).collect()).unwrap();
        let ess = effective_sample_size(&w);
        prop_assert!(ess >= 1.0 - 1e-9 && ess <= n + 1e-9);
    }
}
