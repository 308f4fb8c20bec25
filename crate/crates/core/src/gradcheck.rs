//! Central finite-difference verification of the analytic backward pass.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{validate_config, ModelConfig};
use crate::data::{SceneInstance, Scores, Truth};
use crate::error::Result;
use crate::network::{network_backward, network_forward, NetworkParams};
use crate::training::{batch_loss, LossConfig, Phase};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than
/// relatively, since the central-difference noise floor (~1e-11 at ε = 1e-5)
/// dominates them.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub trial: usize,
    pub coordinate: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub trials: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    /// Every coordinate whose relative error exceeds the tolerance.
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    fn absorb(&mut self, m: Mismatch, tolerance: f64) {
        self.checked += 1;
        if m.rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(m.rel_error);
            self.worst = Some(m.clone());
        }
        if m.rel_error.is_nan() || m.rel_error > tolerance {
            self.failures.push(m);
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} coordinates over {} trials, max relative error {:.3e}, {} failures",
            self.checked,
            self.trials,
            self.max_rel_error,
            self.failures.len()
        )?;
        let mut worst: Vec<&Mismatch> = self.failures.iter().collect();
        worst.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        for m in worst.iter().take(10) {
            writeln!(
                f,
                "  trial {} {}: analytic {:.9e} numeric {:.9e} rel {:.3e}",
                m.trial, m.coordinate, m.analytic, m.numeric, m.rel_error
            )?;
        }
        Ok(())
    }
}

/// Compares `analytic[i]` with `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every
/// coordinate of `x`.
pub fn compare_gradients(
    names: &[String],
    x: &[f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
    epsilon: f64,
) -> Vec<Mismatch> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + epsilon;
            let up = f(&probe);
            probe[i] = x[i] - epsilon;
            let down = f(&probe);
            probe[i] = x[i];
            let numeric = (up - down) / (2.0 * epsilon);
            Mismatch {
                trial: 0,
                coordinate: names[i].clone(),
                analytic: analytic[i],
                numeric,
                rel_error: relative_error(analytic[i], numeric),
            }
        })
        .collect()
}

/// A random frame with at least one active and, when room allows, one
/// padded person slot, plus random truth labels for every head.
pub fn random_instance<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> SceneInstance<f64> {
    let d = cfg.dims();
    let active = if d.persons > 1 {
        rng.random_range(1..d.persons)
    } else {
        1
    };
    let mut unary = Scores::zeros(d.scenes, d.actions, d.poses, d.persons);
    let randomize = |row: ndarray::ArrayViewMut1<f64>, rng: &mut R| {
        let logits: ndarray::Array1<f64> = (0..row.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut row = row;
        row.assign(&crate::data::softmax(logits.view()));
    };
    randomize(unary.scene.view_mut(), rng);
    for m in 0..active {
        randomize(unary.actions.row_mut(m), rng);
        randomize(unary.poses.row_mut(m), rng);
    }
    let mut mask = vec![false; d.persons];
    mask[..active].fill(true);
    let label = |n: usize, on: bool, rng: &mut R| (on && n > 0).then(|| rng.random_range(0..n));
    let truth = Truth {
        scene: Some(rng.random_range(0..d.scenes)),
        actions: (0..d.persons).map(|m| label(d.actions, m < active, rng)).collect(),
        poses: (0..d.persons).map(|m| label(d.poses, m < active, rng)).collect(),
    };
    SceneInstance {
        unary,
        person_mask: mask,
        truth,
    }
}

/// Random parameters on a scale where every path carries gradient.
pub fn random_params<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> NetworkParams<f64> {
    let mut p = NetworkParams::zeros(cfg, cfg.num_steps);
    for v in p.iter_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    p
}

fn joint_loss(inst: &SceneInstance<f64>, params: &NetworkParams<f64>, cfg: &ModelConfig, lc: &LossConfig) -> f64 {
    let tapes = network_forward(inst, params, cfg).expect("dimensions fixed by config");
    batch_loss(inst, &tapes, lc).expect("truth labels present").total
}

/// Checks every parameter and every unary input (masked slots included)
/// over `trials` random frames under the joint loss.
pub fn grad_check(cfg: &ModelConfig, tolerance: f64, epsilon: f64, trials: usize, seed: u64) -> Result<GradCheckReport> {
    let cfg = validate_config(cfg.clone())?;
    let lc = LossConfig::phase(Phase::Joint);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        trials,
        ..Default::default()
    };
    for trial in 0..trials {
        let params = random_params(&cfg, &mut rng);
        let inst = random_instance(&cfg, &mut rng);
        let tapes = network_forward(&inst, &params, &cfg)?;
        let loss = batch_loss(&inst, &tapes, &lc)?;
        let bp = network_backward(&tapes, &loss.grad, &params, &inst.person_mask, cfg.factor_activation)?;

        let (names, x): (Vec<String>, Vec<f64>) = params.named_values().into_iter().unzip();
        let mut probe = params.clone();
        for m in compare_gradients(&names, &x, &bp.params.to_vec(), |v| {
            probe.set_from_slice(v);
            joint_loss(&inst, &probe, &cfg, &lc)
        }, epsilon) {
            report.absorb(Mismatch { trial, ..m }, tolerance);
        }

        let names = unary_names(&inst.unary);
        let x: Vec<f64> = inst.unary.iter().copied().collect();
        let mut probe = inst.clone();
        for m in compare_gradients(&names, &x, &bp.unary.iter().copied().collect::<Vec<_>>(), |v| {
            for (dst, &src) in probe.unary.iter_mut().zip(v) {
                *dst = src;
            }
            joint_loss(&probe, &params, &cfg, &lc)
        }, epsilon) {
            report.absorb(Mismatch { trial, ..m }, tolerance);
        }
    }
    Ok(report)
}

fn unary_names(s: &Scores<f64>) -> Vec<String> {
    let mut names: Vec<String> = (0..s.scene.len()).map(|g| format!("unary.scene[{g}]")).collect();
    for ((m, h), _) in s.actions.indexed_iter() {
        names.push(format!("unary.action[{m}][{h}]"));
    }
    for ((m, z), _) in s.poses.indexed_iter() {
        names.push(format!("unary.pose[{m}][{z}]"));
    }
    names
}
