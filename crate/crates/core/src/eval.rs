//! Accuracy reports, per-step feature extraction and the `MPFV1` export.

use std::fmt::{self, Write as _};

use crate::config::ModelConfig;
use crate::data::{argmax, Dataset, SceneInstance, Scores};
use crate::error::{Error, Result};
use crate::network::{network_forward, NetworkParams, StepTape};
use crate::scalar::Scalar;
use crate::training::cross_entropy_loss;

/// Row = truth, column = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Confusions and mean losses of the three heads on one set of scores.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStats {
    pub scene: Confusion,
    pub action: Confusion,
    pub pose: Confusion,
    loss_sum: [f64; 3],
}

impl HeadStats {
    fn new(cfg: &ModelConfig) -> Self {
        let ls = cfg.label_spaces;
        HeadStats {
            scene: Confusion::new(ls.num_scenes),
            action: Confusion::new(ls.num_actions),
            pose: Confusion::new(ls.num_poses),
            loss_sum: [0.0; 3],
        }
    }

    fn record<S: Scalar>(&mut self, inst: &SceneInstance<S>, scores: &Scores<S>) {
        if let Some(g) = inst.truth.scene {
            self.scene.add(g, argmax(scores.scene.view()));
            self.loss_sum[0] += cross_entropy_loss(scores.scene.view(), g).0.as_f64();
        }
        for m in (0..inst.slots()).filter(|&m| inst.person_mask[m]) {
            if let Some(h) = inst.truth.actions[m] {
                self.action.add(h, argmax(scores.actions.row(m)));
                self.loss_sum[1] += cross_entropy_loss(scores.actions.row(m), h).0.as_f64();
            }
            if let (Some(z), true) = (inst.truth.poses[m], scores.poses.ncols() > 0) {
                self.pose.add(z, argmax(scores.poses.row(m)));
                self.loss_sum[2] += cross_entropy_loss(scores.poses.row(m), z).0.as_f64();
            }
        }
    }

    fn mean_loss(&self, head: usize) -> f64 {
        let n = [&self.scene, &self.action, &self.pose][head].total();
        if n == 0 {
            0.0
        } else {
            self.loss_sum[head] / n as f64
        }
    }

    fn tsv_line(&self, label: &str) -> String {
        format!(
            "-\t{label}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.4}",
            self.mean_loss(0),
            self.mean_loss(1),
            self.mean_loss(2),
            self.scene.accuracy(),
            self.action.accuracy(),
            self.pose.accuracy()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Statistics of the final step (the unary scores for a 0-step network).
    pub last: HeadStats,
    /// Statistics after step 1, …, K.
    pub per_step: Vec<HeadStats>,
}

impl EvalReport {
    pub fn scene_accuracy(&self) -> f64 {
        self.last.scene.accuracy()
    }

    pub fn action_accuracy(&self) -> f64 {
        self.last.action.accuracy()
    }

    pub fn pose_accuracy(&self) -> f64 {
        self.last.pose.accuracy()
    }

    pub fn per_step_scene_accuracy(&self) -> Vec<f64> {
        self.per_step.iter().map(|s| s.scene.accuracy()).collect()
    }

    /// Training-log TSV lines (`-` in the epoch column), optionally one per
    /// step, followed by the scene confusion matrix as `#` comment lines.
    pub fn to_tsv(&self, per_step: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", crate::training::EpochLog::TSV_HEADER);
        if per_step {
            for (k, s) in self.per_step.iter().enumerate() {
                let _ = writeln!(out, "{}", s.tsv_line(&format!("step{}", k + 1)));
            }
        }
        let _ = writeln!(out, "{}", self.last.tsv_line("eval"));
        let c = &self.last.scene;
        let _ = writeln!(out, "# confusion scene rows=truth cols=predicted");
        for t in 0..c.classes {
            let row: Vec<String> = (0..c.classes).map(|p| c.get(t, p).to_string()).collect();
            let _ = writeln!(out, "# {}", row.join("\t"));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_tsv(true))
    }
}

/// Argmax predictions of every head on every frame; masked persons and
/// missing labels are skipped.
pub fn evaluate<S: Scalar>(dataset: &Dataset<S>, params: &NetworkParams<S>, cfg: &ModelConfig) -> Result<EvalReport> {
    dataset.shape.check(cfg)?;
    let mut last = HeadStats::new(cfg);
    let mut per_step = vec![HeadStats::new(cfg); params.num_steps()];
    for inst in &dataset.instances {
        let tapes = network_forward(inst, params, cfg)?;
        for (stats, tape) in per_step.iter_mut().zip(&tapes) {
            stats.record(inst, &tape.outputs);
        }
        last.record(inst, tapes.last().map_or(&inst.unary, |t| &t.outputs));
    }
    Ok(EvalReport { last, per_step })
}

/// Which blocks a [`FeatureVector`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    /// Step scene scores plus person-pooled action and pose scores.
    pub scores: bool,
    /// ψ outputs plus person-pooled φ outputs.
    pub factors: bool,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        FeatureLayout {
            scores: true,
            factors: true,
        }
    }
}

impl FeatureLayout {
    pub fn dim(&self, cfg: &ModelConfig) -> usize {
        let d = cfg.dims();
        let mut n = 0;
        if self.scores {
            n += d.scenes + d.actions + d.poses;
        }
        if self.factors {
            n += d.latent * d.scenes + d.scenes * d.actions * d.zs;
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<S> {
    /// 1-based step the features were read from.
    pub step: usize,
    pub values: Vec<S>,
}

/// Features of one frame after step `step_k` (1-based). Person blocks are
/// means over active persons, so the length depends on the config only.
pub fn extract_features<S: Scalar>(
    inst: &SceneInstance<S>,
    params: &NetworkParams<S>,
    cfg: &ModelConfig,
    step_k: usize,
    layout: FeatureLayout,
) -> Result<FeatureVector<S>> {
    if step_k == 0 || step_k > params.num_steps() {
        return Err(Error::Config(format!(
            "feature step {step_k} outside 1..={}",
            params.num_steps()
        )));
    }
    let tapes = network_forward(inst, params, cfg)?;
    Ok(features_from_tape(inst, &tapes[step_k - 1], step_k, layout))
}

pub(crate) fn features_from_tape<S: Scalar>(
    inst: &SceneInstance<S>,
    tape: &StepTape<S>,
    step: usize,
    layout: FeatureLayout,
) -> FeatureVector<S> {
    let active: Vec<usize> = (0..inst.slots()).filter(|&m| inst.person_mask[m]).collect();
    let inv = if active.is_empty() {
        S::zero()
    } else {
        S::one() / S::of(active.len() as f64)
    };
    let mut values = Vec::new();
    if layout.scores {
        values.extend(tape.outputs.scene.iter().copied());
        for mat in [&tape.outputs.actions, &tape.outputs.poses] {
            for c in 0..mat.ncols() {
                values.push(active.iter().fold(S::zero(), |acc, &m| acc + mat[[m, c]]) * inv);
            }
        }
    }
    if layout.factors {
        if let Some(psi) = &tape.acts.psi {
            values.extend(psi.out.iter().copied());
        }
        let phi = &tape.acts.phi.out;
        let (_, g_n, h_n, zs) = phi.dim();
        for g in 0..g_n {
            for h in 0..h_n {
                for z in 0..zs {
                    values.push(active.iter().fold(S::zero(), |acc, &m| acc + phi[[m, g, h, z]]) * inv);
                }
            }
        }
    }
    FeatureVector { step, values }
}

/// Features of every frame at one step, with scene labels.
pub fn extract_dataset_features<S: Scalar>(
    dataset: &Dataset<S>,
    params: &NetworkParams<S>,
    cfg: &ModelConfig,
    step_k: usize,
    layout: FeatureLayout,
) -> Result<Vec<(Option<usize>, FeatureVector<S>)>> {
    dataset
        .instances
        .iter()
        .map(|inst| Ok((inst.truth.scene, extract_features(inst, params, cfg, step_k, layout)?)))
        .collect()
}

/// `MPFV1 D=<dim> N=<count> STEP=<k>` followed by one `label f1 f2 …` line
/// per frame; unlabelled frames carry `-1`.
pub fn features_to_text<S: Scalar>(rows: &[(Option<usize>, FeatureVector<S>)], dim: usize, step: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "MPFV1 D={dim} N={} STEP={step}", rows.len());
    for (label, fv) in rows {
        let _ = write!(out, "{}", label.map_or(-1, |l| l as i64));
        for v in &fv.values {
            let _ = write!(out, " {}", v.as_f64());
        }
        out.push('\n');
    }
    out
}

/// Labels (`None` for unlabeled frames) and feature rows of an `MPFV1` file.
pub type FeatureRows = (Vec<Option<usize>>, Vec<Vec<f64>>);

/// Parses an `MPFV1` file into labels and rows.
pub fn features_from_text(text: &str) -> Result<FeatureRows> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::MalformedHeader("empty feature file".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("MPFV1") {
        return Err(Error::MalformedHeader(format!("expected MPFV1 magic in `{header}`")));
    }
    let field = |name: &str| -> Result<usize> {
        header
            .split_whitespace()
            .find_map(|p| p.strip_prefix(name).and_then(|v| v.strip_prefix('=')))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::MalformedHeader(format!("missing {name} in `{header}`")))
    };
    let (dim, count) = (field("D")?, field("N")?);
    let mut labels = Vec::with_capacity(count);
    let mut rows = Vec::with_capacity(count);
    for (index, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |msg: String| Error::MalformedRecord { index, msg };
        let mut toks = line.split_whitespace();
        let label: i64 = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("bad label".into()))?;
        let row: Vec<f64> = toks
            .map(|t| t.parse().map_err(|_| bad(format!("bad float `{t}`"))))
            .collect::<Result<_>>()?;
        if row.len() != dim {
            return Err(bad(format!("{} values, expected {dim}", row.len())));
        }
        labels.push((label >= 0).then_some(label as usize));
        rows.push(row);
    }
    if rows.len() != count {
        return Err(Error::MalformedHeader(format!("header says N={count}, found {} rows", rows.len())));
    }
    Ok((labels, rows))
}
