//! Exhaustive MAP inference in the log-linear model over one frame.
//!
//! The score of a joint labeling `(g, h₁…h_M, z₁…z_M)` of the active persons
//! is a weighted sum of indicator features:
//!
//! ```text
//! unary · (s_g + Σ_m a_{h_m}(m) + r_{z_m}(m))
//!   + Σ_m (scene_action[g][h_m] + scene_pose[g][z_m] + action_pose[h_m][z_m])
//! ```
//!
//! This module shares no code with the network forward pass.

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::data::SceneInstance;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Joint-state budget for one enumeration.
pub const MAX_STATES: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LogLinearWeights<S> {
    /// Weight on the unary score features.
    pub unary: S,
    /// `|G| × |H|`
    pub scene_action: Array2<S>,
    /// `|G| × |Z|`
    pub scene_pose: Array2<S>,
    /// `|H| × |Z|`
    pub action_pose: Array2<S>,
}

impl<S: Scalar> LogLinearWeights<S> {
    pub fn unary_only(cfg: &ModelConfig) -> Self {
        let ls = cfg.label_spaces;
        LogLinearWeights {
            unary: S::one(),
            scene_action: Array2::zeros((ls.num_scenes, ls.num_actions)),
            scene_pose: Array2::zeros((ls.num_scenes, ls.num_poses)),
            action_pose: Array2::zeros((ls.num_actions, ls.num_poses)),
        }
    }
}

/// A joint labeling. Person vectors are indexed by slot; inactive slots
/// (and poses in arity-2 mode) are `None`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Labeling {
    pub scene: usize,
    pub actions: Vec<Option<usize>>,
    pub poses: Vec<Option<usize>>,
}

pub fn log_linear_score<S: Scalar>(inst: &SceneInstance<S>, w: &LogLinearWeights<S>, y: &Labeling) -> S {
    let u = &inst.unary;
    let mut score = w.unary * u.scene[y.scene];
    for m in 0..inst.slots() {
        let Some(h) = y.actions[m] else { continue };
        score += w.unary * u.actions[[m, h]] + w.scene_action[[y.scene, h]];
        if let Some(z) = y.poses[m] {
            score += w.unary * u.poses[[m, z]] + w.scene_pose[[y.scene, z]] + w.action_pose[[h, z]];
        }
    }
    score
}

/// Exact argmax over every joint labeling of the active persons. States are
/// visited in lexicographic order of `(g, h₁, z₁, h₂, z₂, …)` and only a
/// strictly better score replaces the incumbent, so ties resolve to the
/// lexicographically smallest labeling.
pub fn brute_force_map<S: Scalar>(
    inst: &SceneInstance<S>,
    w: &LogLinearWeights<S>,
    cfg: &ModelConfig,
) -> Result<Labeling> {
    let ls = cfg.label_spaces;
    let active: Vec<usize> = (0..inst.slots()).filter(|&m| inst.person_mask[m]).collect();
    let per_person = (ls.num_actions * ls.num_poses.max(1)) as f64;
    let states = ls.num_scenes as f64 * per_person.powi(active.len() as i32);
    if states > MAX_STATES as f64 {
        return Err(Error::StateSpace {
            states,
            limit: MAX_STATES,
        });
    }

    // Odometer digits: scene, then (action, pose) per active person.
    let mut radix = vec![ls.num_scenes];
    for _ in &active {
        radix.push(ls.num_actions);
        if ls.num_poses > 0 {
            radix.push(ls.num_poses);
        }
    }
    let stride = if ls.num_poses > 0 { 2 } else { 1 };
    let mut digits = vec![0usize; radix.len()];
    let decode = |digits: &[usize]| {
        let mut y = Labeling {
            scene: digits[0],
            actions: vec![None; inst.slots()],
            poses: vec![None; inst.slots()],
        };
        for (i, &m) in active.iter().enumerate() {
            y.actions[m] = Some(digits[1 + stride * i]);
            if stride == 2 {
                y.poses[m] = Some(digits[2 + stride * i]);
            }
        }
        y
    };

    let mut best = decode(&digits);
    let mut best_score = log_linear_score(inst, w, &best);
    loop {
        let mut pos = digits.len();
        loop {
            if pos == 0 {
                return Ok(best);
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < radix[pos] {
                break;
            }
            digits[pos] = 0;
        }
        let y = decode(&digits);
        let s = log_linear_score(inst, w, &y);
        if s > best_score {
            best_score = s;
            best = y;
        }
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{argmax, pad_instance, SceneInstance};
    use crate::gradcheck::random_instance;

    #[test]
    fn unary_only_is_per_variable_argmax() {
        let cfg = ModelConfig::new(3, 2, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let inst = random_instance(&cfg, &mut rng);
            let y = brute_force_map(&inst, &LogLinearWeights::unary_only(&cfg), &cfg).unwrap();
            assert_eq!(y.scene, argmax(inst.unary.scene.view()));
            for m in 0..3 {
                if inst.person_mask[m] {
                    assert_eq!(y.actions[m], Some(argmax(inst.unary.actions.row(m))));
                    assert_eq!(y.poses[m], Some(argmax(inst.unary.poses.row(m))));
                } else {
                    assert_eq!((y.actions[m], y.poses[m]), (None, None));
                }
            }
        }
    }

    #[test]
    fn scene_action_attraction_flips_scene() {
        let cfg = ModelConfig::new(2, 2, 2, 2);
        let inst = SceneInstance::new(
            array![0.55, 0.45],
            array![[0.2, 0.8], [0.3, 0.7]],
            array![[0.5, 0.5], [0.6, 0.4]],
        );
        let mut w = LogLinearWeights::unary_only(&cfg);
        w.scene_action[[1, 1]] = 0.5;
        let y = brute_force_map(&inst, &w, &cfg).unwrap();
        assert_eq!(y.scene, 1);
        assert_eq!(y.actions, vec![Some(1), Some(1)]);
        assert_eq!(y.poses, vec![Some(0), Some(0)]);
    }

    #[test]
    fn ties_break_to_smallest_labeling() {
        let cfg = ModelConfig::new(2, 2, 2, 2);
        let inst = SceneInstance::new(
            array![0.5, 0.5],
            array![[0.5, 0.5], [0.5, 0.5]],
            array![[0.5, 0.5], [0.5, 0.5]],
        );
        let y = brute_force_map(&inst, &LogLinearWeights::unary_only(&cfg), &cfg).unwrap();
        assert_eq!(
            y,
            Labeling {
                scene: 0,
                actions: vec![Some(0), Some(0)],
                poses: vec![Some(0), Some(0)],
            }
        );
    }

    #[test]
    fn oversized_state_space_is_refused() {
        let cfg = ModelConfig::new(5, 5, 8, 6);
        let inst = pad_instance(
            &SceneInstance::<f64>::new(
                ndarray::Array1::zeros(5),
                Array2::zeros((6, 5)),
                Array2::zeros((6, 8)),
            ),
            &cfg,
        )
        .unwrap();
        assert!(matches!(
            brute_force_map(&inst, &LogLinearWeights::unary_only(&cfg), &cfg),
            Err(Error::StateSpace { .. })
        ));
    }

    /// Every labeling, built by nested recursion in reverse digit order, then
    /// the maximum with explicit lexicographic tie-breaking.
    fn reference_map(inst: &SceneInstance<f64>, w: &LogLinearWeights<f64>, cfg: &ModelConfig) -> Labeling {
        let ls = cfg.label_spaces;
        let active: Vec<usize> = (0..inst.slots()).filter(|&m| inst.person_mask[m]).collect();
        let mut all: Vec<Labeling> = Vec::new();
        fn rec(
            i: usize,
            active: &[usize],
            ls: &crate::config::LabelSpaces,
            cur: &mut Labeling,
            out: &mut Vec<Labeling>,
        ) {
            if i == active.len() {
                out.push(cur.clone());
                return;
            }
            let m = active[i];
            for h in (0..ls.num_actions).rev() {
                cur.actions[m] = Some(h);
                if ls.num_poses == 0 {
                    rec(i + 1, active, ls, cur, out);
                } else {
                    for z in (0..ls.num_poses).rev() {
                        cur.poses[m] = Some(z);
                        rec(i + 1, active, ls, cur, out);
                    }
                }
            }
        }
        for g in (0..ls.num_scenes).rev() {
            let mut cur = Labeling {
                scene: g,
                actions: vec![None; inst.slots()],
                poses: vec![None; inst.slots()],
            };
            rec(0, &active, &ls, &mut cur, &mut all);
        }
        let key = |y: &Labeling| {
            let mut k = vec![y.scene];
            for &m in &active {
                k.push(y.actions[m].unwrap());
                if let Some(z) = y.poses[m] {
                    k.push(z);
                }
            }
            k
        };
        all.into_iter()
            .map(|y| (log_linear_score(inst, w, &y), y))
            .reduce(|best, cand| {
                if cand.0 > best.0 || (cand.0 == best.0 && key(&cand.1) < key(&best.1)) {
                    cand
                } else {
                    best
                }
            })
            .unwrap()
            .1
    }

    #[test]
    fn agrees_with_reverse_order_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..50 {
            let z = if case % 5 == 0 { 0 } else { 2 };
            let cfg = ModelConfig::new(2, 2, z, 2).with_latent(1);
            let inst = random_instance(&cfg, &mut rng);
            let mut w = LogLinearWeights::unary_only(&cfg);
            w.unary = rng.random_range(0.0..2.0);
            w.scene_action.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            w.scene_pose.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            w.action_pose.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            assert_eq!(brute_force_map(&inst, &w, &cfg).unwrap(), reference_map(&inst, &w, &cfg), "case {case}");
        }
    }

    #[test]
    fn full_two_person_enumeration_has_32_states() {
        let cfg = ModelConfig::new(2, 2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut inst = random_instance(&cfg, &mut rng);
        inst.person_mask = vec![true, true];
        inst.unary.actions.row_mut(1).assign(&array![0.4, 0.6]);
        inst.unary.poses.row_mut(1).assign(&array![0.9, 0.1]);
        let mut w = LogLinearWeights::unary_only(&cfg);
        w.scene_action[[0, 1]] = 0.7;
        // 2 · (2·2)² joint states.
        let mut count = 0;
        let mut best: Option<(f64, Labeling)> = None;
        for g in 0..2 {
            for h0 in 0..2 {
                for z0 in 0..2 {
                    for h1 in 0..2 {
                        for z1 in 0..2 {
                            count += 1;
                            let y = Labeling {
                                scene: g,
                                actions: vec![Some(h0), Some(h1)],
                                poses: vec![Some(z0), Some(z1)],
                            };
                            let s = log_linear_score(&inst, &w, &y);
                            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                                best = Some((s, y));
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(count, 32);
        assert_eq!(brute_force_map(&inst, &w, &cfg).unwrap(), best.unwrap().1);
    }
}
