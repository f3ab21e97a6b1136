//! Shared test oracles.
#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};

use aisp::{RewardModel, TokenSequence};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    Dd { hi: s, lo: err }
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd { hi: p, lo: a.mul_add(b, -p) }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
    const LN2: Dd = Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    pub fn of(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.hi, o.hi);
        let t = two_sum(self.lo, o.lo);
        let s = quick_two_sum(s.hi, s.lo + t.hi);
        quick_two_sum(s.hi, s.lo + t.lo)
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = two_prod(self.hi, o.hi);
        quick_two_sum(p.hi, p.lo + (self.hi * o.lo + self.lo * o.hi))
    }

    pub fn mul_f(self, x: f64) -> Dd {
        self.mul(Dd::of(x))
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul_f(q1));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul_f(q2));
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2).add(Dd::of(q3))
    }

    /// `exp` by range reduction to `|r| <= ln2/2` and a Taylor series.
    pub fn exp(self) -> Dd {
        if self.hi < -700.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = self.sub(Dd::LN2.mul_f(k));
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for i in 1..40 {
            term = term.mul(r).div(Dd::of(i as f64));
            sum = sum.add(term);
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        let scale = 2f64.powi(k as i32);
        Dd { hi: sum.hi * scale, lo: sum.lo * scale }
    }
}

/// Softmax of `rewards/λ − corrections`, carried out in double-double.
pub fn weights_oracle(rewards: &[f64], corrections: &[f64], lambda: f64) -> Vec<f64> {
    let logits: Vec<Dd> = rewards
        .iter()
        .zip(corrections)
        .map(|(&r, &c)| Dd::of(r).div(Dd::of(lambda)).sub(Dd::of(c)))
        .collect();
    let max = logits.iter().map(|l| l.hi).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<Dd> = logits.iter().map(|l| l.sub(Dd::of(max)).exp()).collect();
    let total = exps.iter().fold(Dd::ZERO, |acc, &e| acc.add(e));
    exps.iter().map(|e| e.div(total).to_f64()).collect()
}

/// Reward wrapper counting calls.
pub struct Counting<R> {
    pub inner: R,
    pub calls: AtomicUsize,
}

impl<R> Counting<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<R: RewardModel<f64>> RewardModel<f64> for Counting<R> {
    fn score(&self, prompt: &TokenSequence, response: &TokenSequence) -> f64 {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score(prompt, response)
    }
}
