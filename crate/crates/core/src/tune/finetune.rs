//! The distillation fine-tune loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::quant::{QuantConfig, QuantMode, QuantParams};
use crate::tensor::Tensor;
use crate::tune::adam::AdamState;
use crate::tune::loss::{distillation_loss_grad, squared_error};
use crate::tune::schedule::{cosine_lr, TrainConfig};
use crate::tune::student::{PointwiseScales, SiteGrads, Student, StudentGrads};

/// One optimizer step, as written to the line-delimited training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub restart: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutput {
    pub config: QuantConfig,
    pub scales: Option<PointwiseScales>,
    pub log: Vec<StepLog>,
    /// Distillation RMSE over all samples of each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Field {
    Alpha,
    AlphaT,
    AlphaR,
}

fn fields(p: &QuantParams) -> &'static [Field] {
    match p.mode {
        QuantMode::Symmetric => &[Field::Alpha],
        QuantMode::Asymmetric => &[Field::AlphaT, Field::AlphaR],
    }
}

fn grad_field(g: Option<&SiteGrads>, f: Field, k: usize) -> f64 {
    let Some(g) = g else { return 0.0 };
    let v = match f {
        Field::Alpha => &g.alpha,
        Field::AlphaT => &g.alpha_t,
        Field::AlphaR => &g.alpha_r,
    };
    v.get(k).copied().unwrap_or(0.0)
}

/// Flat view of the trainable values in a fixed order: activation sites,
/// weight sites, then pointwise scales, each in key order.
struct Layout {
    thresholds: bool,
    pointwise: bool,
}

impl Layout {
    fn sites(cfg: &QuantConfig) -> impl Iterator<Item = (bool, &String, &QuantParams)> {
        cfg.activations
            .iter()
            .map(|(k, p)| (false, k, p))
            .chain(cfg.weights.iter().map(|(k, p)| (true, k, p)))
    }

    fn gather(&self, cfg: &QuantConfig, scales: Option<&PointwiseScales>) -> Vec<f64> {
        let mut out = Vec::new();
        if self.thresholds {
            for (_, _, p) in Self::sites(cfg) {
                for c in &p.channels {
                    for f in fields(p) {
                        out.push(match f {
                            Field::Alpha => c.alpha,
                            Field::AlphaT => c.alpha_t,
                            Field::AlphaR => c.alpha_r,
                        });
                    }
                }
            }
        }
        if let (true, Some(s)) = (self.pointwise, scales) {
            for ls in s.layers.values() {
                out.extend_from_slice(ls.weights.data());
                if let Some(b) = &ls.bias {
                    out.extend_from_slice(b.data());
                }
            }
        }
        out
    }

    fn gather_grads(&self, cfg: &QuantConfig, scales: Option<&PointwiseScales>, g: &StudentGrads) -> Vec<f64> {
        let mut out = Vec::new();
        if self.thresholds {
            for (is_w, id, p) in Self::sites(cfg) {
                let sg = if is_w { g.weights.get(id) } else { g.activations.get(id) };
                for k in 0..p.channels.len() {
                    for &f in fields(p) {
                        out.push(grad_field(sg, f, k));
                    }
                }
            }
        }
        if let (true, Some(s)) = (self.pointwise, scales) {
            for (id, ls) in &s.layers {
                let gl = g.pointwise.get(id);
                match gl {
                    Some(gl) => out.extend_from_slice(gl.weights.data()),
                    None => out.extend(std::iter::repeat(0.0).take(ls.weights.len())),
                }
                if let Some(b) = &ls.bias {
                    match gl.and_then(|gl| gl.bias.as_ref()) {
                        Some(gb) => out.extend_from_slice(gb.data()),
                        None => out.extend(std::iter::repeat(0.0).take(b.len())),
                    }
                }
            }
        }
        out
    }

    fn scatter(&self, vals: &[f64], cfg: &mut QuantConfig, scales: Option<&mut PointwiseScales>) {
        let mut it = vals.iter().copied();
        if self.thresholds {
            for p in cfg.activations.values_mut().chain(cfg.weights.values_mut()) {
                let fs = fields(p);
                for c in &mut p.channels {
                    for f in fs {
                        let v = it.next().expect("layout length");
                        match f {
                            Field::Alpha => c.alpha = v,
                            Field::AlphaT => c.alpha_t = v,
                            Field::AlphaR => c.alpha_r = v,
                        }
                    }
                }
            }
        }
        if let (true, Some(s)) = (self.pointwise, scales) {
            for ls in s.layers.values_mut() {
                ls.weights
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = it.next().expect("layout length"));
                if let Some(b) = &mut ls.bias {
                    b.data_mut()
                        .iter_mut()
                        .for_each(|v| *v = it.next().expect("layout length"));
                }
            }
        }
    }
}

/// Teacher logits for `images`, in batches.
pub fn teacher_logits(teacher: &Graph, images: &Tensor, batch: usize) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut data = Vec::new();
    let mut shape = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let z = teacher.forward(&images.slice_batch(start, end)?)?;
        shape = z.shape().to_vec();
        data.extend_from_slice(z.data());
        start = end;
    }
    shape[0] = n;
    Tensor::new(shape, data)
}

/// Student logits for `images`, in batches.
pub fn student_logits(
    student: &Student<'_>,
    cfg: &QuantConfig,
    scales: Option<&PointwiseScales>,
    images: &Tensor,
    batch: usize,
) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut data = Vec::new();
    let mut shape = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let trace = student.forward(&images.slice_batch(start, end)?, cfg, scales)?;
        let z = trace.output(student.graph());
        shape = z.shape().to_vec();
        data.extend_from_slice(z.data());
        start = end;
    }
    shape[0] = n;
    Tensor::new(shape, data)
}

/// Distillation RMSE between teacher and fake-quantized student over a
/// whole dataset.
pub fn distillation_rmse(
    teacher: &Graph,
    cfg: &QuantConfig,
    scales: Option<&PointwiseScales>,
    images: &Tensor,
    batch: usize,
) -> Result<f64> {
    let student = Student::new(teacher)?;
    let z_t = teacher_logits(teacher, images, batch)?;
    let z_a = student_logits(&student, cfg, scales, images, batch)?;
    Ok((squared_error(&z_t, &z_a)? / images.shape()[0] as f64).sqrt())
}

/// Trains the enabled scale groups so the fake-quantized student matches
/// the frozen float teacher on unlabeled `images`.
///
/// When pointwise scales train and none are given they start at 1. Given
/// scales are applied in every case and only updated when their group is
/// enabled. Optimizer state runs on unclipped values; the returned
/// trainables are clipped, which leaves the student unchanged.
pub fn finetune(
    teacher: &Graph,
    cfg: &QuantConfig,
    scales: Option<&PointwiseScales>,
    images: &Tensor,
    tc: &TrainConfig,
) -> Result<FinetuneOutput> {
    tc.validate()?;
    if images.ndim() == 0 || images.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let student = Student::new(teacher)?;
    let mut cfg = cfg.clone();
    let mut scales = match (scales, tc.train.pointwise()) {
        (Some(s), _) => Some(s.clone()),
        (None, true) => Some(PointwiseScales::ones(teacher)),
        (None, false) => None,
    };
    let layout = Layout {
        thresholds: tc.train.thresholds(),
        pointwise: tc.train.pointwise(),
    };
    let mut values = layout.gather(&cfg, scales.as_ref());
    let mut adam = AdamState::new(values.len(), tc.beta1, tc.beta2, tc.eps);

    let n = images.shape()[0];
    let z_teacher = teacher_logits(teacher, images, tc.batch)?;
    let steps_per_epoch = n.div_ceil(tc.batch);
    let period = tc.period.unwrap_or(steps_per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::new();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut step = 0;

    for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut sq = 0.0;
        for idx in order.chunks(tc.batch) {
            let x = images.select_batch(idx)?;
            let z_t = z_teacher.select_batch(idx)?;
            let trace = student.forward(&x, &cfg, scales.as_ref())?;
            let z_a = trace.output(teacher);
            let (loss, g_out) = distillation_loss_grad(&z_t, z_a)?;
            sq += squared_error(&z_t, z_a)?;

            let (lr, restart) = cosine_lr(step, tc.lr, tc.lr_min, period);
            if restart && step > 0 {
                adam.reset();
            }
            if !values.is_empty() {
                let grads = student.backward(&x, &trace, &cfg, scales.as_ref(), &g_out)?;
                let flat = layout.gather_grads(&cfg, scales.as_ref(), &grads);
                adam.step(&mut values, &flat, lr)?;
                layout.scatter(&values, &mut cfg, scales.as_mut());
            }
            log.push(StepLog {
                step,
                lr,
                loss,
                restart,
            });
            step += 1;
        }
        let epoch = (sq / n as f64).sqrt();
        log::info!("epoch {}: distillation rmse {epoch:.6}", epoch_losses.len() + 1);
        epoch_losses.push(epoch);
    }
    Ok(FinetuneOutput {
        config: cfg.clipped(),
        scales: scales.map(|s| s.clipped()),
        log,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{build_params, calibrate, QuantPlan, QuantScheme};
    use crate::tune::schedule::TrainGroups;
    use crate::zoo::{toy_input, toy_net};

    fn setup(bits: u32) -> (Graph, Tensor, QuantConfig) {
        let g = toy_net(7);
        let x = toy_input(8, 24);
        let plan = QuantPlan::new(&g).unwrap();
        let stats = calibrate(&g, &plan, &x, 8).unwrap();
        let scheme = QuantScheme {
            bits,
            ..QuantScheme::default()
        };
        let cfg = build_params(&g, &plan, &stats, scheme).unwrap();
        (g, x, cfg)
    }

    fn tc(train: TrainGroups, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch: 8,
            lr: 5e-3,
            seed: 3,
            train,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn frozen_run_changes_nothing() {
        let (g, x, cfg) = setup(4);
        let out = finetune(&g, &cfg, None, &x, &tc(TrainGroups::Frozen, 3)).unwrap();
        assert_eq!(out.config, cfg);
        assert!(out.scales.is_none());
        let base = distillation_rmse(&g, &cfg, None, &x, 8).unwrap();
        for e in &out.epoch_losses {
            assert!((e - base).abs() <= 1e-12 * base, "{e} vs {base}");
        }
    }

    #[test]
    fn threshold_training_reduces_loss() {
        let (g, x, cfg) = setup(4);
        let before = distillation_rmse(&g, &cfg, None, &x, 8).unwrap();
        let out = finetune(&g, &cfg, None, &x, &tc(TrainGroups::Thresholds, 15)).unwrap();
        let after = distillation_rmse(&g, &out.config, None, &x, 8).unwrap();
        assert!(after < before, "{after} >= {before}");
        assert_eq!(out.log.len(), 15 * 3);
    }

    #[test]
    fn pointwise_training_moves_only_scales() {
        let (g, x, cfg) = setup(4);
        let out = finetune(&g, &cfg, None, &x, &tc(TrainGroups::Pointwise, 10)).unwrap();
        assert_eq!(out.config, cfg);
        let s = out.scales.unwrap();
        assert!(s.layers.values().any(|l| l.weights.data().iter().any(|&v| v != 1.0)));
        let before = distillation_rmse(&g, &cfg, None, &x, 8).unwrap();
        let after = distillation_rmse(&g, &cfg, Some(&s), &x, 8).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn runs_are_deterministic_and_leave_the_teacher_alone() {
        let (g, x, cfg) = setup(8);
        let copy = g.clone();
        let a = finetune(&g, &cfg, None, &x, &tc(TrainGroups::Both, 2)).unwrap();
        let b = finetune(&g, &cfg, None, &x, &tc(TrainGroups::Both, 2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(g, copy);
        let c = finetune(
            &g,
            &cfg,
            None,
            &x,
            &TrainConfig {
                seed: 4,
                ..tc(TrainGroups::Both, 2)
            },
        )
        .unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn restarts_follow_the_period() {
        let (g, x, cfg) = setup(8);
        let out = finetune(
            &g,
            &cfg,
            None,
            &x,
            &TrainConfig {
                period: Some(2),
                ..tc(TrainGroups::Thresholds, 2)
            },
        )
        .unwrap();
        let flags: Vec<bool> = out.log.iter().map(|l| l.restart).collect();
        assert_eq!(flags, [true, false, true, false, true, false]);
        assert_eq!(out.log[0].lr, 5e-3);
        assert_eq!(out.log[2].lr, 5e-3);
    }

    #[test]
    fn empty_input_is_rejected() {
        let (g, _, cfg) = setup(8);
        let x = Tensor::zeros(vec![0, 2, 6, 6]);
        if let Ok(x) = x {
            assert!(finetune(&g, &cfg, None, &x, &TrainConfig::default()).is_err());
        }
    }
}
