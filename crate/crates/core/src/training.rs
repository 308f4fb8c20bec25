//! Softmax losses, plain SGD and the step-wise, two-phase training schedule.
//!
//! For round `k = 1..K` a `k`-step network is trained: earlier steps keep
//! their values from round `k − 1`, step `k` is freshly initialised. Each
//! round runs a scene-only phase (A) followed by a persons-only phase (B);
//! all parameters of the `k`-step network are free in both.

use std::fmt;

use ndarray::{Array1, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::{argmax, Dataset, SceneInstance, Scores};
use crate::error::{Error, Result};
use crate::network::{init_step, network_backward, network_forward, Gradients, NetworkParams, StepTape};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Only the scene loss is active.
    SceneOnly,
    /// Only the action and pose losses are active.
    PersonsOnly,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub scene_weight: f64,
    pub action_weight: f64,
    pub pose_weight: f64,
    pub active_phase: Phase,
}

impl LossConfig {
    pub fn phase(active_phase: Phase) -> Self {
        LossConfig {
            scene_weight: 1.0,
            action_weight: 1.0,
            pose_weight: 1.0,
            active_phase,
        }
    }

    /// Weights after the phase has switched heads off.
    pub fn effective(&self) -> (f64, f64, f64) {
        match self.active_phase {
            Phase::SceneOnly => (self.scene_weight, 0.0, 0.0),
            Phase::PersonsOnly => (0.0, self.action_weight, self.pose_weight),
            Phase::Joint => (self.scene_weight, self.action_weight, self.pose_weight),
        }
    }
}

/// `(−log softmax(scores)[truth], softmax(scores) − onehot(truth))`
pub fn cross_entropy_loss<S: Scalar>(scores: ArrayView1<S>, truth: usize) -> (S, Array1<S>) {
    let max = scores.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let total = scores.iter().fold(S::zero(), |acc, &v| acc + (v - max).exp());
    let log_z = max + total.ln();
    let mut grad = scores.mapv(|v| (v - log_z).exp());
    grad[truth] -= S::one();
    (log_z - scores[truth], grad)
}

/// Per-head losses (unweighted means) and the weighted objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<S> {
    pub total: S,
    pub scene: S,
    pub action: S,
    pub pose: S,
    /// dL/d(final outputs) of the weighted objective.
    pub grad: Scores<S>,
}

/// Loss of one frame on the outputs of its last step.
///
/// Action and pose losses are means over active persons; a frame without
/// active persons contributes zero to them.
pub fn batch_loss<S: Scalar>(
    inst: &SceneInstance<S>,
    tapes: &[StepTape<S>],
    lc: &LossConfig,
) -> Result<LossOutput<S>> {
    let final_scores = match tapes.last() {
        Some(t) => &t.outputs,
        None => &inst.unary,
    };
    let (ws, wa, wr) = lc.effective();
    let mut out = LossOutput {
        total: S::zero(),
        scene: S::zero(),
        action: S::zero(),
        pose: S::zero(),
        grad: Scores::zeros_like(final_scores),
    };
    let missing = |head| Error::MissingTruth { head, instance: 0 };

    if ws > 0.0 {
        let truth = inst.truth.scene.ok_or_else(|| missing("scene"))?;
        let (loss, grad) = cross_entropy_loss(final_scores.scene.view(), truth);
        out.scene = loss;
        out.total += S::of(ws) * loss;
        out.grad.scene = grad * S::of(ws);
    }

    let active: Vec<usize> = (0..inst.slots()).filter(|&m| inst.person_mask[m]).collect();
    if active.is_empty() {
        return Ok(out);
    }
    let n = S::of(active.len() as f64);
    if wa > 0.0 {
        for &m in &active {
            let truth = inst.truth.actions[m].ok_or_else(|| missing("action"))?;
            let (loss, grad) = cross_entropy_loss(final_scores.actions.row(m), truth);
            out.action += loss / n;
            out.grad.actions.row_mut(m).assign(&(grad * (S::of(wa) / n)));
        }
        out.total += S::of(wa) * out.action;
    }
    if wr > 0.0 && final_scores.poses.ncols() > 0 {
        for &m in &active {
            let truth = inst.truth.poses[m].ok_or_else(|| missing("pose"))?;
            let (loss, grad) = cross_entropy_loss(final_scores.poses.row(m), truth);
            out.pose += loss / n;
            out.grad.poses.row_mut(m).assign(&(grad * (S::of(wr) / n)));
        }
        out.total += S::of(wr) * out.pose;
    }
    Ok(out)
}

/// Loss, step tapes and full gradient of one frame.
pub type InstanceGradient<S> = (LossOutput<S>, Vec<StepTape<S>>, Gradients<S>);

/// Loss and full gradient of one frame.
pub fn instance_gradient<S: Scalar>(
    inst: &SceneInstance<S>,
    params: &NetworkParams<S>,
    cfg: &ModelConfig,
    lc: &LossConfig,
) -> Result<InstanceGradient<S>> {
    let tapes = network_forward(inst, params, cfg)?;
    let loss = batch_loss(inst, &tapes, lc)?;
    let bp = network_backward(&tapes, &loss.grad, params, &inst.person_mask, cfg.factor_activation)?;
    Ok((loss, tapes, bp.params))
}

/// `θ ← θ − lr·g`. Nothing is updated if any gradient entry is non-finite.
pub fn sgd_update<S: Scalar>(params: &mut NetworkParams<S>, grads: &Gradients<S>, lr: f64) -> Result<()> {
    if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
        let (path, value) = grads.named_values().swap_remove(pos);
        return Err(Error::NonFinite {
            path,
            value: value.as_f64(),
        });
    }
    params.add_scaled(grads, -S::of(lr));
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub learning_rate: f64,
    pub epochs_phase_a: usize,
    pub epochs_phase_b: usize,
    /// Frames whose gradients are summed per update.
    pub batch_size: usize,
    pub scene_weight: f64,
    pub action_weight: f64,
    pub pose_weight: f64,
    /// Train `k`-step networks for `k = 1..K` in turn; otherwise train the
    /// full `K`-step network in a single round.
    pub stepwise: bool,
}

impl Schedule {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Schedule {
            learning_rate: cfg.learning_rate,
            epochs_phase_a: cfg.phase_epochs.0,
            epochs_phase_b: cfg.phase_epochs.1,
            batch_size: 1,
            scene_weight: 1.0,
            action_weight: 1.0,
            pose_weight: 1.0,
            stepwise: true,
        }
    }

    fn loss(&self, phase: Phase) -> LossConfig {
        LossConfig {
            scene_weight: self.scene_weight,
            action_weight: self.action_weight,
            pose_weight: self.pose_weight,
            active_phase: phase,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Round (number of steps being trained) and phase letter, e.g. `2A`.
    pub phase: String,
    pub loss_scene: f64,
    pub loss_action: f64,
    pub loss_pose: f64,
    pub acc_scene: f64,
    pub acc_action: f64,
    pub acc_pose: f64,
}

impl EpochLog {
    pub const TSV_HEADER: &'static str =
        "epoch\tphase\tloss_scene\tloss_action\tloss_pose\tacc_scene\tacc_action\tacc_pose";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.4}",
            self.epoch,
            self.phase,
            self.loss_scene,
            self.loss_action,
            self.loss_pose,
            self.acc_scene,
            self.acc_action,
            self.acc_pose
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<S> {
    pub params: NetworkParams<S>,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochLog>,
    /// Parameters at the end of each stepwise round; `rounds[k-1]` is the
    /// trained `k`-step network.
    pub rounds: Vec<NetworkParams<S>>,
}

/// Running per-head sums over one epoch.
#[derive(Default)]
struct EpochMetrics {
    frames: usize,
    persons: usize,
    pose_persons: usize,
    loss: [f64; 3],
    correct: [usize; 3],
}

impl EpochMetrics {
    fn record<S: Scalar>(&mut self, inst: &SceneInstance<S>, tapes: &[StepTape<S>]) {
        let out = match tapes.last() {
            Some(t) => &t.outputs,
            None => &inst.unary,
        };
        self.frames += 1;
        if let Some(g) = inst.truth.scene {
            self.loss[0] += cross_entropy_loss(out.scene.view(), g).0.as_f64();
            self.correct[0] += usize::from(argmax(out.scene.view()) == g);
        }
        for m in (0..inst.slots()).filter(|&m| inst.person_mask[m]) {
            if let Some(h) = inst.truth.actions[m] {
                self.persons += 1;
                self.loss[1] += cross_entropy_loss(out.actions.row(m), h).0.as_f64();
                self.correct[1] += usize::from(argmax(out.actions.row(m)) == h);
            }
            if let (Some(z), true) = (inst.truth.poses[m], out.poses.ncols() > 0) {
                self.pose_persons += 1;
                self.loss[2] += cross_entropy_loss(out.poses.row(m), z).0.as_f64();
                self.correct[2] += usize::from(argmax(out.poses.row(m)) == z);
            }
        }
    }

    fn finish(&self, epoch: usize, phase: String) -> EpochLog {
        let ratio = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
        EpochLog {
            epoch,
            phase,
            loss_scene: ratio(self.loss[0], self.frames),
            loss_action: ratio(self.loss[1], self.persons),
            loss_pose: ratio(self.loss[2], self.pose_persons),
            acc_scene: ratio(self.correct[0] as f64, self.frames),
            acc_action: ratio(self.correct[1] as f64, self.persons),
            acc_pose: ratio(self.correct[2] as f64, self.pose_persons),
        }
    }
}

pub fn train<S: Scalar>(dataset: &Dataset<S>, cfg: &ModelConfig, schedule: &Schedule) -> Result<TrainState<S>> {
    train_with_log(dataset, cfg, schedule, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_log<S: Scalar>(
    dataset: &Dataset<S>,
    cfg: &ModelConfig,
    schedule: &Schedule,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainState<S>> {
    dataset.shape.check(cfg)?;
    let mut state = TrainState {
        params: NetworkParams { steps: Vec::new() },
        epoch: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
        history: Vec::new(),
        rounds: Vec::new(),
    };
    let rounds: Vec<usize> = if schedule.stepwise {
        (1..=cfg.num_steps).collect()
    } else {
        vec![cfg.num_steps]
    };
    let batch = schedule.batch_size.max(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for round in rounds {
        while state.params.num_steps() < round {
            let k = state.params.num_steps();
            state.params.steps.push(init_step(cfg, k));
        }
        for (phase, letter, epochs) in [
            (Phase::SceneOnly, 'A', schedule.epochs_phase_a),
            (Phase::PersonsOnly, 'B', schedule.epochs_phase_b),
        ] {
            let lc = schedule.loss(phase);
            for _ in 0..epochs {
                order.shuffle(&mut state.rng);
                let mut metrics = EpochMetrics::default();
                for chunk in order.chunks(batch) {
                    let mut acc = state.params.zeros_like();
                    for &i in chunk {
                        let inst = &dataset.instances[i];
                        let (_, tapes, grads) = instance_gradient(inst, &state.params, cfg, &lc)
                            .map_err(|e| match e {
                                Error::MissingTruth { head, .. } => Error::MissingTruth { head, instance: i },
                                other => other,
                            })?;
                        metrics.record(inst, &tapes);
                        acc.add_scaled(&grads, S::one());
                    }
                    sgd_update(&mut state.params, &acc, schedule.learning_rate)?;
                }
                state.epoch += 1;
                let log = metrics.finish(state.epoch, format!("{round}{letter}"));
                on_epoch(&log);
                state.history.push(log);
            }
        }
        state.rounds.push(state.params.clone());
    }
    Ok(state)
}
