//! Test-side reference evaluator and shared fixtures.
//!
//! `reference_forward` walks the explicit factor-graph edge lists from
//! [`Topology`] with scalar loops, one factor and one edge at a time. It
//! shares no arithmetic with the dense layer kernels.

#![allow(dead_code)]

use labelmp::data::SceneInstance;
use labelmp::topology::{FactorNode, VarNode};
use labelmp::{build_topology, Activation, ModelConfig, NetworkParams, Scores, StepParams};

fn read(s: &Scores<f64>, mask: &[bool], v: VarNode) -> f64 {
    match v {
        VarNode::Scene(g) => s.scene[g],
        VarNode::Action { person, label } if mask[person] => s.actions[[person, label]],
        VarNode::Pose { person, label } if mask[person] => s.poses[[person, label]],
        _ => 0.0,
    }
}

fn input_weight(p: &StepParams<f64>, cfg: &ModelConfig, f: FactorNode, v: VarNode) -> f64 {
    match f {
        FactorNode::Phi {
            scene, action, pose, ..
        } => {
            let z = pose.unwrap_or(0);
            let slot = match v {
                VarNode::Scene(_) => 0,
                VarNode::Action { .. } => 1,
                VarNode::Pose { .. } => 2,
            };
            p.phi.alpha[[scene, action, z, slot]]
        }
        FactorNode::Psi { latent, scene } => {
            let beta = &p.psi.as_ref().expect("ψ present with poses").beta;
            match v {
                VarNode::Scene(_) => beta[[latent, scene, 0]],
                VarNode::Pose { person, label } => {
                    let z_n = cfg.label_spaces.num_poses;
                    if cfg.tie_psi_positions {
                        beta[[latent, scene, 1 + label]]
                    } else {
                        beta[[latent, scene, 1 + person * z_n + label]]
                    }
                }
                VarNode::Action { .. } => unreachable!("ψ reads no action node"),
            }
        }
    }
}

fn output_weight(p: &StepParams<f64>, f: FactorNode, v: VarNode) -> f64 {
    match f {
        FactorNode::Phi {
            scene, action, pose, ..
        } => {
            let z = pose.unwrap_or(0);
            let slot = match v {
                VarNode::Scene(_) => 0,
                VarNode::Action { .. } => 1,
                VarNode::Pose { .. } => 2,
            };
            p.out.w_phi[[scene, action, z, slot]]
        }
        FactorNode::Psi { latent, scene } => {
            let w = p.out.w_psi.as_ref().expect("ψ present with poses");
            match v {
                VarNode::Scene(_) => w[[latent, scene, 0]],
                VarNode::Pose { label, .. } => w[[latent, scene, 1 + label]],
                VarNode::Action { .. } => unreachable!("ψ writes no action node"),
            }
        }
    }
}

fn factor_active(f: FactorNode, mask: &[bool]) -> bool {
    match f {
        FactorNode::Phi { person, .. } => mask[person],
        FactorNode::Psi { .. } => true,
    }
}

fn write(s: &mut Scores<f64>, v: VarNode, x: f64) {
    match v {
        VarNode::Scene(g) => s.scene[g] = x,
        VarNode::Action { person, label } => s.actions[[person, label]] = x,
        VarNode::Pose { person, label } => s.poses[[person, label]] = x,
    }
}

/// One message-passing step by explicit edge traversal.
pub fn reference_step(cfg: &ModelConfig, p: &StepParams<f64>, inputs: &Scores<f64>, mask: &[bool]) -> Scores<f64> {
    let topo = build_topology(cfg).unwrap();
    let act = |x: f64| match cfg.factor_activation {
        Activation::Tanh => x.tanh(),
        Activation::Linear => x,
    };
    let value = |f: FactorNode| -> f64 {
        if !factor_active(f, mask) {
            return 0.0;
        }
        let pre: f64 = topo
            .factor_inputs(f)
            .into_iter()
            .map(|v| input_weight(p, cfg, f, v) * read(inputs, mask, v))
            .sum();
        act(pre)
    };
    let mut out = Scores::zeros_like(inputs);
    for v in topo.variables() {
        let person = match v {
            VarNode::Scene(_) => None,
            VarNode::Action { person, .. } | VarNode::Pose { person, .. } => Some(person),
        };
        if person.is_some_and(|m| !mask[m]) {
            continue;
        }
        let update: f64 = topo
            .incoming(v)
            .into_iter()
            .map(|f| output_weight(p, f, v) * value(f))
            .sum();
        write(&mut out, v, read(inputs, mask, v) + update);
    }
    out
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

fn reference_normalize(s: &Scores<f64>, mask: &[bool]) -> Scores<f64> {
    let mut out = Scores::zeros_like(s);
    for (g, v) in softmax(&s.scene.to_vec()).into_iter().enumerate() {
        out.scene[g] = v;
    }
    for (m, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
        for (h, v) in softmax(&s.actions.row(m).to_vec()).into_iter().enumerate() {
            out.actions[[m, h]] = v;
        }
        if s.poses.ncols() > 0 {
            for (z, v) in softmax(&s.poses.row(m).to_vec()).into_iter().enumerate() {
                out.poses[[m, z]] = v;
            }
        }
    }
    out
}

/// Outputs of every step.
pub fn reference_forward(cfg: &ModelConfig, params: &NetworkParams<f64>, inst: &SceneInstance<f64>) -> Vec<Scores<f64>> {
    let mut outs: Vec<Scores<f64>> = Vec::new();
    for step in &params.steps {
        let inputs = match outs.last() {
            None => inst.unary.clone(),
            Some(prev) => reference_normalize(prev, &inst.person_mask),
        };
        outs.push(reference_step(cfg, step, &inputs, &inst.person_mask));
    }
    outs
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

pub fn max_rel_error<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| rel_error(*x, *y)).fold(0.0, f64::max)
}
