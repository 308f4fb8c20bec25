//! Synthetic frames with controllable scene→action and scene→pose
//! dependencies, standing in for CNN unary scores.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::data::{softmax, Dataset, DatasetShape, SceneInstance, Scores, Truth};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_instances: usize,
    /// Inclusive range of real persons per frame.
    pub persons_range: (usize, usize),
    /// Standard deviation of the Gaussian added to every unary logit.
    pub noise_sigma: f64,
    /// Blend between uniform labels (0) and the per-scene tables (1); scales
    /// both the action table and the pose coherence.
    pub dependency_strength: f64,
    /// `[scene][action]` categorical distribution of person actions.
    pub scene_action_table: Vec<Vec<f64>>,
    /// Per scene: probability that every person shares one pose.
    pub pose_coherence: Vec<f64>,
    /// Height of the true-label logit before noise.
    pub logit_scale: f64,
}

impl SynthSpec {
    /// Scene `g` favours action `g mod |H|` with probability `peak`; the
    /// rest of the mass is spread evenly. Pose coherence decreases linearly
    /// from 0.9 for the first scene to 0.1 for the last.
    pub fn peaked(cfg: &ModelConfig, num_instances: usize, peak: f64) -> Self {
        let ls = cfg.label_spaces;
        let (g, h) = (ls.num_scenes, ls.num_actions);
        let rest = if h > 1 { (1.0 - peak) / (h - 1) as f64 } else { 0.0 };
        let table = (0..g)
            .map(|s| {
                (0..h)
                    .map(|a| if h == 1 { 1.0 } else if a == s % h { peak } else { rest })
                    .collect()
            })
            .collect();
        let coherence = (0..g)
            .map(|s| 0.9 - 0.8 * s as f64 / (g - 1).max(1) as f64)
            .collect();
        SynthSpec {
            num_instances,
            persons_range: (1, cfg.max_persons),
            noise_sigma: 0.5,
            dependency_strength: 1.0,
            scene_action_table: table,
            pose_coherence: coherence,
            logit_scale: 1.0,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let ls = cfg.label_spaces;
        let fail = |msg: String| Err(Error::Synth(msg));
        let (lo, hi) = self.persons_range;
        if lo > hi {
            return fail(format!("persons_range min {lo} exceeds max {hi}"));
        }
        if hi > cfg.max_persons {
            return fail(format!(
                "persons_range max {hi} exceeds M_max {}",
                cfg.max_persons
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be ≥ 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.dependency_strength) {
            return fail(format!(
                "dependency_strength must lie in [0, 1], got {}",
                self.dependency_strength
            ));
        }
        if !self.logit_scale.is_finite() {
            return fail("logit_scale must be finite".into());
        }
        if self.scene_action_table.len() != ls.num_scenes {
            return fail(format!(
                "scene_action_table has {} rows, expected {}",
                self.scene_action_table.len(),
                ls.num_scenes
            ));
        }
        for (g, row) in self.scene_action_table.iter().enumerate() {
            if row.len() != ls.num_actions {
                return fail(format!("scene_action_table row {g} has {} entries", row.len()));
            }
            if row.iter().any(|&p| p.is_nan() || p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return fail(format!("scene_action_table row {g} is not a distribution"));
            }
        }
        if self.pose_coherence.len() != ls.num_scenes {
            return fail(format!(
                "pose_coherence has {} entries, expected {}",
                self.pose_coherence.len(),
                ls.num_scenes
            ));
        }
        if self.pose_coherence.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return fail("pose_coherence entries must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Draws `spec.num_instances` padded frames. Identical `(spec, cfg, seed)`
/// always yields a bit-identical dataset.
pub fn generate_synthetic<S: Scalar>(spec: &SynthSpec, cfg: &ModelConfig, seed: u64) -> Result<Dataset<S>> {
    spec.validate(cfg)?;
    let ls = cfg.label_spaces;
    let (g_n, h_n, z_n, m_max) = (ls.num_scenes, ls.num_actions, ls.num_poses, cfg.max_persons);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Synth(e.to_string()))?;
    let lam = spec.dependency_strength;
    let action_dists = spec
        .scene_action_table
        .iter()
        .map(|row| {
            let mixed: Vec<f64> = row.iter().map(|p| lam * p + (1.0 - lam) / h_n as f64).collect();
            WeightedIndex::new(mixed).map_err(|e| Error::Synth(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let unary = |rng: &mut ChaCha8Rng, n: usize, truth: usize| -> Array1<S> {
        let logits: Array1<f64> = (0..n)
            .map(|i| {
                let hot = if i == truth { spec.logit_scale } else { 0.0 };
                hot + if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 }
            })
            .collect();
        softmax(logits.view()).mapv(S::of)
    };

    let mut ds = Dataset::new(DatasetShape::of(cfg));
    for _ in 0..spec.num_instances {
        let scene = rng.random_range(0..g_n);
        let persons = rng.random_range(spec.persons_range.0..=spec.persons_range.1);
        let actions: Vec<usize> = (0..persons).map(|_| action_dists[scene].sample(&mut rng)).collect();
        let poses: Vec<usize> = if z_n == 0 {
            Vec::new()
        } else if rng.random_bool(lam * spec.pose_coherence[scene]) {
            let shared = rng.random_range(0..z_n);
            vec![shared; persons]
        } else {
            (0..persons).map(|_| rng.random_range(0..z_n)).collect()
        };

        let mut inst = SceneInstance {
            unary: Scores::zeros(g_n, h_n, z_n, m_max),
            person_mask: vec![false; m_max],
            truth: Truth {
                scene: Some(scene),
                actions: vec![None; m_max],
                poses: vec![None; m_max],
            },
        };
        inst.unary.scene = unary(&mut rng, g_n, scene);
        for m in 0..persons {
            inst.person_mask[m] = true;
            inst.truth.actions[m] = Some(actions[m]);
            inst.unary.actions.row_mut(m).assign(&unary(&mut rng, h_n, actions[m]));
            if z_n > 0 {
                inst.truth.poses[m] = Some(poses[m]);
                inst.unary.poses.row_mut(m).assign(&unary(&mut rng, z_n, poses[m]));
            }
        }
        ds.instances.push(inst);
    }
    Ok(ds)
}

/// Fraction of frames whose scene unary argmax equals the true scene.
pub fn unary_scene_accuracy<S: Scalar>(ds: &Dataset<S>) -> f64 {
    let labelled: Vec<_> = ds.instances.iter().filter(|i| i.truth.scene.is_some()).collect();
    if labelled.is_empty() {
        return 0.0;
    }
    let hits = labelled
        .iter()
        .filter(|i| Some(crate::data::argmax(i.unary.scene.view())) == i.truth.scene)
        .count();
    hits as f64 / labelled.len() as f64
}
