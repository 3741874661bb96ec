//! Task and overall losses, the learning-rate schedule, and SGD with momentum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, HasParams, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Weight of the summed task loss; every task carries the same weight.
    pub lambda: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { lambda: 10.0 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Learning rate at batch size 1024; scaled linearly with the actual batch.
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.06,
            warmup_epochs: 5,
            total_epochs: 30,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be > 0"));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(format!(
                "warmup_epochs ({}) must be < total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be ≥ 0"));
        }
        Ok(())
    }

    /// `base_lr · batch / 1024`.
    pub fn scaled_lr(&self, batch_size: usize) -> f64 {
        self.base_lr * batch_size as f64 / 1024.0
    }
}

/// Linear warmup from 0 to `peak`, then half-period cosine down to 0 at the last step.
pub fn lr_at(step: i64, steps_per_epoch: usize, peak: f64, cfg: &ScheduleConfig) -> Result<f64> {
    if step < 0 {
        return Err(Error::config(format!("negative step {step}")));
    }
    let step = step as usize;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.total_epochs * steps_per_epoch;
    if step > total {
        return Err(Error::config(format!("step {step} beyond horizon {total}")));
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Cross-entropy of one logit row against `label`.
pub fn cross_entropy<S: Real>(logits: &[S], label: usize) -> Result<S> {
    if label >= logits.len() {
        return Err(Error::Label {
            label,
            label_space: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Summed cross-entropy over tasks.
pub fn task_loss<S: Real>(logits: &[&[S]], labels: &[usize]) -> Result<S> {
    if logits.len() != labels.len() {
        return Err(Error::shape(logits.len(), labels.len()));
    }
    logits.iter().zip(labels).map(|(l, y)| cross_entropy(l, *y)).sum()
}

/// Loss and per-task logit gradients.
pub fn task_loss_with_grad<S: Real>(logits: &[&[S]], labels: &[usize]) -> Result<(S, Vec<Vec<S>>)> {
    let loss = task_loss(logits, labels)?;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(l, y)| {
            let lse = log_sum_exp(l);
            l.iter()
                .enumerate()
                .map(|(i, v)| (*v - lse).exp() - if i == *y { S::one() } else { S::zero() })
                .collect()
        })
        .collect();
    Ok((loss, grads))
}

/// Batched cross-entropy over `[n][classes]` logits.
#[derive(Clone, Debug)]
pub struct BatchCrossEntropy<S> {
    pub loss_sum: S,
    pub dlogits: Vec<S>,
    pub correct: usize,
}

pub fn batch_cross_entropy<S: Real>(logits: &[S], classes: usize, labels: &[usize]) -> Result<BatchCrossEntropy<S>> {
    if logits.len() != classes * labels.len() {
        return Err(Error::shape(classes * labels.len(), logits.len()));
    }
    let mut loss_sum = S::zero();
    let mut dlogits = vec![S::zero(); logits.len()];
    let mut correct = 0;
    for ((row, d), &y) in logits.chunks_exact(classes).zip(dlogits.chunks_exact_mut(classes)).zip(labels) {
        loss_sum += cross_entropy(row, y)?;
        let lse = log_sum_exp(row);
        for (i, (g, v)) in d.iter_mut().zip(row).enumerate() {
            *g = (*v - lse).exp() - if i == y { S::one() } else { S::zero() };
        }
        if argmax(row) == y {
            correct += 1;
        }
    }
    Ok(BatchCrossEntropy {
        loss_sum,
        dlogits,
        correct,
    })
}

/// First index of the maximum.
pub fn argmax<S: Real>(x: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// `l_contrast + λ·l_task`.
pub fn overall_loss<S: Real>(l_contrast: S, l_task: S, lambda: S) -> Result<S> {
    if !l_contrast.is_finite() || !l_task.is_finite() || !lambda.is_finite() {
        return Err(Error::NonFinite(format!(
            "contrast {:?}, task {:?}, lambda {:?}",
            l_contrast, l_task, lambda
        )));
    }
    Ok(l_contrast + lambda * l_task)
}

/// Classical momentum SGD: `v ← μ·v + g + wd·p`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<S> {
    pub momentum: S,
    pub weight_decay: S,
    velocity: BTreeMap<String, Vec<S>>,
}

impl<S: Real> Sgd<S> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: S::lit(momentum),
            weight_decay: S::lit(weight_decay),
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Vec<S>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Vec<S>>) {
        self.velocity = velocity;
    }

    fn check_structure(&self, model: &impl HasParams<S>) -> Result<()> {
        if self.velocity.is_empty() {
            return Ok(());
        }
        let mut seen = 0;
        let mut bad = None;
        model.visit("", &mut |name, p| {
            seen += 1;
            match self.velocity.get(name) {
                Some(v) if v.len() == p.len() => {}
                _ => {
                    bad.get_or_insert_with(|| name.to_string());
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::Structure(format!("no matching velocity for parameter {name}")));
        }
        if seen != self.velocity.len() {
            return Err(Error::Structure(format!(
                "model has {seen} parameters, optimizer tracks {}",
                self.velocity.len()
            )));
        }
        Ok(())
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self, model: &mut impl HasParams<S>, lr: S) -> Result<()> {
        self.check_structure(model)?;
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |name, p| {
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![S::zero(); p.value.len()]);
            for ((w, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = mu * *vel + *g + wd * *w;
                *w -= lr * *vel;
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Param};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_classes() {
        for c in 2..10 {
            let l = vec![0.0f64; c];
            assert_eq!(task_loss(&[&l], &[c - 1]).unwrap(), (c as f64).ln());
        }
        let l = [3.5f32; 4];
        assert!((cross_entropy(&l, 0).unwrap() - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_logits_approach_zero() {
        let l = [0.0f64, 1e3, 0.0];
        assert!(cross_entropy(&l, 1).unwrap() < 1e-300);
    }

    #[test]
    fn two_tasks_sum() {
        let a = [0.1f64, -0.3, 2.0, 0.5];
        let b = [1.0f64, -1.0];
        let la = a[0].exp() + a[1].exp() + a[2].exp() + a[3].exp();
        let lb = b[0].exp() + b[1].exp();
        let expected = -(a[2].exp() / la).ln() - (b[1].exp() / lb).ln();
        assert!((task_loss(&[&a, &b], &[2, 1]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            task_loss(&[&[0.0f64, 0.0][..]], &[2]),
            Err(Error::Label { label: 2, label_space: 2 })
        ));
    }

    #[test]
    fn task_grad_matches_difference_quotient() {
        let a = vec![0.3f64, -1.2, 0.8];
        let (_, g) = task_loss_with_grad(&[&a], &[1]).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut p = a.clone();
            p[i] += h;
            let mut m = a.clone();
            m[i] -= h;
            let fd = (cross_entropy(&p, 1).unwrap() - cross_entropy(&m, 1).unwrap()) / (2.0 * h);
            assert!((fd - g[0][i]).abs() < 1e-8);
        }
    }

    #[test]
    fn overall_loss_cases() {
        assert_eq!(overall_loss(9.2f64, 1.38, 0.0).unwrap(), 9.2);
        assert!((overall_loss(9.2f64, 1.38, 10.0).unwrap() - 23.0).abs() < 1e-12);
        assert!(matches!(overall_loss(f64::NAN, 1.0, 1.0), Err(Error::NonFinite(_))));
        assert!(overall_loss(1.0f64, f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = ScheduleConfig {
            base_lr: 0.06,
            warmup_epochs: 5,
            total_epochs: 30,
            ..Default::default()
        };
        let spe = 7;
        assert_eq!(lr_at(0, spe, 0.5, &cfg).unwrap(), 0.0);
        assert!((lr_at(1, spe, 0.5, &cfg).unwrap() - 0.5 / 35.0).abs() < 1e-15);
        assert_eq!(lr_at(35, spe, 0.5, &cfg).unwrap(), 0.5);
        assert!(lr_at(210, spe, 0.5, &cfg).unwrap().abs() < 1e-15);
        assert!(lr_at(-1, spe, 0.5, &cfg).is_err());
        assert!(lr_at(211, spe, 0.5, &cfg).is_err());
        let mut prev = f64::INFINITY;
        for s in 35..=210 {
            let lr = lr_at(s, spe, 0.5, &cfg).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn schedule_validation() {
        let bad = ScheduleConfig {
            warmup_epochs: 30,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(ScheduleConfig::default().validate().is_ok());
        assert_eq!(ScheduleConfig::default().scaled_lr(32), 0.06 * 32.0 / 1024.0);
    }

    struct One(Param<f64>);

    impl HasParams<f64> for One {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(&crate::nn::join(prefix, "p"), &self.0)
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&crate::nn::join(prefix, "p"), &mut self.0)
        }
    }

    #[test]
    fn sgd_hand_recursion() {
        let mut m = One(Param::zeros(&[2]));
        m.0.value = vec![1.0, -2.0];
        let mut opt = Sgd::<f64>::new(0.9, 0.0);
        opt.step(&mut m, 0.1).unwrap();
        assert_eq!(m.0.value, vec![1.0, -2.0]);

        m.0.grad = vec![0.5, 1.0];
        let mut opt = Sgd::<f64>::new(0.9, 0.0);
        opt.step(&mut m, 0.1).unwrap();
        assert_eq!(m.0.value, vec![1.0 - 0.1 * 0.5, -2.0 - 0.1]);
        opt.step(&mut m, 0.1).unwrap();
        let total = [1.0 - m.0.value[0], -2.0 - m.0.value[1]];
        assert!((total[0] - 0.1 * 0.5 * 2.9).abs() < 1e-15);
        assert!((total[1] - 0.1 * 1.0 * 2.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_and_structure() {
        let mut m = One(Param::zeros(&[1]));
        m.0.value = vec![2.0];
        let mut opt = Sgd::<f64>::new(0.0, 0.5);
        opt.step(&mut m, 0.1).unwrap();
        assert_eq!(m.0.value, vec![2.0 - 0.1 * 0.5 * 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut other = Linear::<f64>::new(2, 2, true, &mut rng);
        assert!(matches!(opt.step(&mut other, 0.1), Err(Error::Structure(_))));
    }

    proptest! {
        #[test]
        fn overall_loss_linear_in_lambda(c in -50.0f64..50.0, t in 0.0f64..50.0, l1 in 0.0f64..20.0, l2 in 0.0f64..20.0) {
            let f = |l: f64| overall_loss(c, t, l).unwrap();
            let l3 = 0.5 * (l1 + l2);
            prop_assert!((f(l3) - 0.5 * (f(l1) + f(l2))).abs() < 1e-9);
            prop_assert_eq!(f(0.0), c);
        }

        #[test]
        fn cross_entropy_nonnegative(logits in proptest::collection::vec(-30.0f64..30.0, 2..8), seed in 0usize..100) {
            let y = seed % logits.len();
            prop_assert!(cross_entropy(&logits, y).unwrap() >= 0.0);
        }

        #[test]
        fn uniform_shift_invariant(c in 2usize..12, v in -100.0f64..100.0) {
            let l = vec![v; c];
            prop_assert!((cross_entropy(&l, 0).unwrap() - (c as f64).ln()).abs() < 1e-12);
        }
    }
}
