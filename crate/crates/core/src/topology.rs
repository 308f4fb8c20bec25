//! Factor-graph wiring: which factor neurons exist and which variable
//! nodes each one reads from and writes back to.
//!
//! The dense layer kernels never consult this structure; it is the explicit
//! edge-list description of the same graph and is used by reference
//! evaluators and structural tests.

use crate::config::{validate_config, ModelConfig};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarNode {
    Scene(usize),
    Action { person: usize, label: usize },
    Pose { person: usize, label: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FactorNode {
    /// Scene-action-pose factor for one person; `pose` is `None` in arity-2 mode.
    Phi {
        scene: usize,
        action: usize,
        pose: Option<usize>,
        person: usize,
    },
    /// Poses-all factor `t` of scene `scene`.
    Psi { latent: usize, scene: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub num_scenes: usize,
    pub num_actions: usize,
    pub num_poses: usize,
    pub max_persons: usize,
    pub latent: usize,
    pub phi_factor_count: usize,
    pub psi_factor_count: usize,
}

pub fn build_topology(cfg: &ModelConfig) -> Result<Topology> {
    let cfg = validate_config(cfg.clone())?;
    let d = cfg.dims();
    Ok(Topology {
        num_scenes: d.scenes,
        num_actions: d.actions,
        num_poses: d.poses,
        max_persons: d.persons,
        latent: d.latent,
        phi_factor_count: d.scenes * d.actions * d.zs * d.persons,
        psi_factor_count: d.latent * d.scenes,
    })
}

impl Topology {
    fn pose_labels(&self) -> Vec<Option<usize>> {
        if self.num_poses == 0 {
            vec![None]
        } else {
            (0..self.num_poses).map(Some).collect()
        }
    }

    pub fn phi_factors(&self) -> Vec<FactorNode> {
        let mut out = Vec::with_capacity(self.phi_factor_count);
        for person in 0..self.max_persons {
            for scene in 0..self.num_scenes {
                for action in 0..self.num_actions {
                    for pose in self.pose_labels() {
                        out.push(FactorNode::Phi {
                            scene,
                            action,
                            pose,
                            person,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn psi_factors(&self) -> Vec<FactorNode> {
        let mut out = Vec::with_capacity(self.psi_factor_count);
        for latent in 0..self.latent {
            for scene in 0..self.num_scenes {
                out.push(FactorNode::Psi { latent, scene });
            }
        }
        out
    }

    pub fn variables(&self) -> Vec<VarNode> {
        let mut out: Vec<VarNode> = (0..self.num_scenes).map(VarNode::Scene).collect();
        for person in 0..self.max_persons {
            out.extend((0..self.num_actions).map(|label| VarNode::Action { person, label }));
            out.extend((0..self.num_poses).map(|label| VarNode::Pose { person, label }));
        }
        out
    }

    /// First pass: the variable nodes a factor reads.
    pub fn factor_inputs(&self, factor: FactorNode) -> Vec<VarNode> {
        match factor {
            FactorNode::Phi {
                scene,
                action,
                pose,
                person,
            } => {
                let mut v = vec![
                    VarNode::Scene(scene),
                    VarNode::Action {
                        person,
                        label: action,
                    },
                ];
                if let Some(label) = pose {
                    v.push(VarNode::Pose { person, label });
                }
                v
            }
            FactorNode::Psi { scene, .. } => {
                let mut v = vec![VarNode::Scene(scene)];
                for person in 0..self.max_persons {
                    v.extend((0..self.num_poses).map(|label| VarNode::Pose { person, label }));
                }
                v
            }
        }
    }

    /// ε1_s(g): φ factors feeding scene node `g`.
    pub fn scene_phi(&self, g: usize) -> Vec<FactorNode> {
        self.phi_factors()
            .into_iter()
            .filter(|f| matches!(f, FactorNode::Phi { scene, .. } if *scene == g))
            .collect()
    }

    /// ε2_s(g): ψ factors feeding scene node `g`.
    pub fn scene_psi(&self, g: usize) -> Vec<FactorNode> {
        (0..self.latent)
            .map(|latent| FactorNode::Psi { latent, scene: g })
            .collect()
    }

    /// ε1_a(h, m): φ factors feeding action node `h` of person `m`.
    pub fn action_phi(&self, h: usize, m: usize) -> Vec<FactorNode> {
        self.phi_factors()
            .into_iter()
            .filter(|f| {
                matches!(f, FactorNode::Phi { action, person, .. } if *action == h && *person == m)
            })
            .collect()
    }

    /// ε1_r(z, m): φ factors feeding pose node `z` of person `m`.
    pub fn pose_phi(&self, z: usize, m: usize) -> Vec<FactorNode> {
        self.phi_factors()
            .into_iter()
            .filter(|f| {
                matches!(f, FactorNode::Phi { pose, person, .. } if *pose == Some(z) && *person == m)
            })
            .collect()
    }

    /// ε2_r(z, m): every ψ factor, since ψ reads all pose nodes.
    pub fn pose_psi(&self, _z: usize, _m: usize) -> Vec<FactorNode> {
        self.psi_factors()
    }

    /// Second pass: all factors writing into `var`.
    pub fn incoming(&self, var: VarNode) -> Vec<FactorNode> {
        match var {
            VarNode::Scene(g) => {
                let mut v = self.scene_phi(g);
                v.extend(self.scene_psi(g));
                v
            }
            VarNode::Action { person, label } => self.action_phi(label, person),
            VarNode::Pose { person, label } => {
                let mut v = self.pose_phi(label, person);
                v.extend(self.pose_psi(label, person));
                v
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;

    fn cfg(g: usize, h: usize, z: usize, m: usize, t: usize) -> ModelConfig {
        ModelConfig::new(g, h, z, m).with_latent(t)
    }

    #[test]
    fn counts_for_small_config() {
        let topo = build_topology(&cfg(2, 2, 2, 2, 3)).unwrap();
        assert_eq!(topo.phi_factor_count, 16);
        assert_eq!(topo.psi_factor_count, 6);
        assert_eq!(topo.scene_phi(0).len(), 8);
        assert_eq!(topo.scene_psi(1).len(), 3);
    }

    #[test]
    fn counts_without_poses() {
        let topo = build_topology(&cfg(2, 2, 0, 1, 0)).unwrap();
        assert_eq!(topo.phi_factor_count, 4);
        assert_eq!(topo.psi_factor_count, 0);
        assert!(topo.psi_factors().is_empty());
    }

    #[test]
    fn invalid_config_propagates() {
        assert!(build_topology(&cfg(1, 2, 2, 2, 2)).is_err());
    }

    proptest! {
        #[test]
        fn counting_identities(g in 2usize..5, h in 1usize..4, z in 0usize..4, m in 1usize..4, t in 1usize..4) {
            let topo = build_topology(&cfg(g, h, z, m, t)).unwrap();
            let zs = z.max(1);
            prop_assert_eq!(topo.phi_factor_count, g * h * zs * m);
            prop_assert_eq!(topo.phi_factors().len(), topo.phi_factor_count);
            prop_assert_eq!(topo.psi_factor_count, if z > 0 { t * g } else { 0 });
            prop_assert_eq!(topo.psi_factors().len(), topo.psi_factor_count);
            for sc in 0..g {
                prop_assert_eq!(topo.scene_phi(sc).len(), h * zs * m);
            }
            for p in 0..m {
                for a in 0..h {
                    prop_assert_eq!(topo.action_phi(a, p).len(), g * zs);
                }
            }
        }

        #[test]
        fn second_pass_reverses_first_pass(g in 2usize..4, h in 1usize..3, z in 0usize..3, m in 1usize..3, t in 1usize..3) {
            let topo = build_topology(&cfg(g, h, z, m, t)).unwrap();
            let mut forward = BTreeSet::new();
            for f in topo.phi_factors().into_iter().chain(topo.psi_factors()) {
                for v in topo.factor_inputs(f) {
                    prop_assert!(forward.insert((f, v)), "duplicate first-pass edge");
                }
            }
            let mut backward = BTreeSet::new();
            for v in topo.variables() {
                for f in topo.incoming(v) {
                    prop_assert!(backward.insert((f, v)), "edge listed twice in second pass");
                }
            }
            prop_assert_eq!(forward, backward);
        }
    }
}
