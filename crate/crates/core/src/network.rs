//! K residual message-passing steps over the factor layers.
//!
//! Each step reads probability-normalised scores, runs the variable→factor
//! pass (φ, ψ), then the factor→variable pass that adds weighted factor
//! outputs onto the step's own inputs. Between steps the scene vector and
//! every active person's action and pose rows go through a softmax.

use ndarray::{Array2, Array4, ArrayView1, ArrayViewMut1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Activation, Dims, ModelConfig};
use crate::data::{SceneInstance, Scores};
use crate::error::Result;
use crate::layers::{
    phi_backward, phi_forward, psi_backward, psi_forward, FactorActivations, OutParams, PhiParams,
    PsiParams,
};
use crate::scalar::Scalar;

/// Half-width of the uniform initialisation interval for fresh templates.
pub const INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct StepParams<S> {
    pub phi: PhiParams<S>,
    pub psi: Option<PsiParams<S>>,
    pub out: OutParams<S>,
}

impl<S: Scalar> StepParams<S> {
    pub fn zeros(d: &Dims) -> Self {
        StepParams {
            phi: PhiParams::zeros(d),
            psi: d.has_poses().then(|| PsiParams::zeros(d)),
            out: OutParams::zeros(d),
        }
    }

    /// Every tensor drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng>(d: &Dims, rng: &mut R, scale: f64) -> Self {
        let mut p = Self::zeros(d);
        for (_, values) in p.tensors_mut() {
            for v in values {
                *v = S::of(rng.random_range(-scale..=scale));
            }
        }
        p
    }

    /// Named flat views in serialisation order: α, β, w_φ, w_ψ.
    pub fn tensors(&self) -> Vec<(&'static str, &[S])> {
        let mut v = vec![("alpha", slice(&self.phi.alpha))];
        if let Some(psi) = &self.psi {
            v.push(("beta", slice(&psi.beta)));
        }
        v.push(("w_phi", slice(&self.out.w_phi)));
        if let Some(w) = &self.out.w_psi {
            v.push(("w_psi", slice(w)));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [S])> {
        let mut v = vec![("alpha", slice_mut(&mut self.phi.alpha))];
        if let Some(psi) = &mut self.psi {
            v.push(("beta", slice_mut(&mut psi.beta)));
        }
        v.push(("w_phi", slice_mut(&mut self.out.w_phi)));
        if let Some(w) = &mut self.out.w_psi {
            v.push(("w_psi", slice_mut(w)));
        }
        v
    }
}

fn slice<S, D: ndarray::Dimension>(a: &ndarray::Array<S, D>) -> &[S] {
    a.as_slice().expect("parameter tensors are contiguous")
}

fn slice_mut<S, D: ndarray::Dimension>(a: &mut ndarray::Array<S, D>) -> &mut [S] {
    a.as_slice_mut().expect("parameter tensors are contiguous")
}

/// One untied parameter set per message-passing step. The same structure
/// doubles as the gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<S> {
    pub steps: Vec<StepParams<S>>,
}

pub type Gradients<S> = NetworkParams<S>;

impl<S: Scalar> NetworkParams<S> {
    pub fn zeros(cfg: &ModelConfig, steps: usize) -> Self {
        let d = cfg.dims();
        NetworkParams {
            steps: (0..steps).map(|_| StepParams::zeros(&d)).collect(),
        }
    }

    /// Small uniform initialisation of all `cfg.num_steps` steps.
    pub fn init(cfg: &ModelConfig) -> Self {
        NetworkParams {
            steps: (0..cfg.num_steps).map(|k| init_step(cfg, k)).collect(),
        }
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(S::zero());
        z
    }

    pub fn fill(&mut self, value: S) {
        for step in &mut self.steps {
            for (_, t) in step.tensors_mut() {
                t.fill(value);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &S> {
        self.steps
            .iter()
            .flat_map(|s| s.tensors().into_iter().flat_map(|(_, t)| t.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut S> {
        self.steps
            .iter_mut()
            .flat_map(|s| s.tensors_mut().into_iter().flat_map(|(_, t)| t.iter_mut()))
    }

    /// `(path, value)` for every scalar, e.g. `step2.beta[17]`.
    pub fn named_values(&self) -> Vec<(String, S)> {
        let mut out = Vec::new();
        for (k, step) in self.steps.iter().enumerate() {
            for (name, t) in step.tensors() {
                for (i, &v) in t.iter().enumerate() {
                    out.push((format!("step{}.{}[{}]", k + 1, name, i), v));
                }
            }
        }
        out
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.iter().copied().collect()
    }

    pub fn set_from_slice(&mut self, values: &[S]) {
        assert_eq!(values.len(), self.len(), "flat parameter length mismatch");
        for (dst, &src) in self.iter_mut().zip(values) {
            *dst = src;
        }
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &Self, scale: S) {
        for (a, &b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
    }

    pub fn cast<T: Scalar>(&self) -> NetworkParams<T> {
        NetworkParams {
            steps: self
                .steps
                .iter()
                .map(|s| StepParams {
                    phi: PhiParams {
                        alpha: s.phi.alpha.mapv(|v| T::of(v.as_f64())),
                    },
                    psi: s.psi.as_ref().map(|p| PsiParams {
                        beta: p.beta.mapv(|v| T::of(v.as_f64())),
                    }),
                    out: OutParams {
                        w_phi: s.out.w_phi.mapv(|v| T::of(v.as_f64())),
                        w_psi: s.out.w_psi.as_ref().map(|w| w.mapv(|v| T::of(v.as_f64()))),
                    },
                })
                .collect(),
        }
    }
}

/// Fresh parameters for step `k` (0-based), seeded from `(cfg.rng_seed, k)`
/// so a step's initial values do not depend on how many steps precede it.
pub fn init_step<S: Scalar>(cfg: &ModelConfig, k: usize) -> StepParams<S> {
    let seed = cfg
        .rng_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(k as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    StepParams::random(&cfg.dims(), &mut rng, INIT_SCALE)
}

/// Cached values of one step for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTape<S> {
    /// Normalised scores the step consumed.
    pub inputs: Scores<S>,
    pub acts: FactorActivations<S>,
    /// s⁽ᵏ⁾, a⁽ᵏ⁾, r⁽ᵏ⁾ before any normalisation.
    pub outputs: Scores<S>,
}

pub fn step_forward<S: Scalar>(
    inputs: &Scores<S>,
    params: &StepParams<S>,
    mask: &[bool],
    activation: Activation,
) -> Result<StepTape<S>> {
    let phi = phi_forward(inputs, &params.phi, mask, activation);
    let psi = match &params.psi {
        Some(p) => Some(psi_forward(inputs, p, mask, activation)?),
        None => None,
    };
    let (m_n, g_n, h_n, zs) = phi.out.dim();
    let poses = inputs.poses.ncols() > 0;
    let w = &params.out.w_phi;

    let mut out = Scores::zeros_like(inputs);
    for g in 0..g_n {
        let mut acc = S::zero();
        for m in (0..m_n).filter(|&m| mask[m]) {
            for h in 0..h_n {
                for z in 0..zs {
                    acc += w[[g, h, z, 0]] * phi.out[[m, g, h, z]];
                }
            }
        }
        if let (Some(psi), Some(wp)) = (&psi, &params.out.w_psi) {
            for t in 0..psi.out.nrows() {
                acc += wp[[t, g, 0]] * psi.out[[t, g]];
            }
        }
        out.scene[g] = inputs.scene[g] + acc;
    }

    // ψ reaches every person's pose nodes with the same per-label weights.
    let psi_to_pose: Vec<S> = match (&psi, &params.out.w_psi) {
        (Some(psi), Some(wp)) => (0..inputs.poses.ncols())
            .map(|z| {
                let mut acc = S::zero();
                for ((t, g), &v) in psi.out.indexed_iter() {
                    acc += wp[[t, g, 1 + z]] * v;
                }
                acc
            })
            .collect(),
        _ => vec![S::zero(); inputs.poses.ncols()],
    };

    for m in (0..m_n).filter(|&m| mask[m]) {
        for h in 0..h_n {
            let mut acc = S::zero();
            for g in 0..g_n {
                for z in 0..zs {
                    acc += w[[g, h, z, 1]] * phi.out[[m, g, h, z]];
                }
            }
            out.actions[[m, h]] = inputs.actions[[m, h]] + acc;
        }
        if poses {
            for z in 0..zs {
                let mut acc = S::zero();
                for g in 0..g_n {
                    for h in 0..h_n {
                        acc += w[[g, h, z, 2]] * phi.out[[m, g, h, z]];
                    }
                }
                acc += psi_to_pose[z];
                out.poses[[m, z]] = inputs.poses[[m, z]] + acc;
            }
        }
    }

    Ok(StepTape {
        inputs: inputs.clone(),
        acts: FactorActivations { phi, psi },
        outputs: out,
    })
}

/// Runs every step in `params`. Step 1 consumes the unary scores; each
/// later step consumes the softmax of its predecessor's outputs.
pub fn network_forward<S: Scalar>(
    inst: &SceneInstance<S>,
    params: &NetworkParams<S>,
    cfg: &ModelConfig,
) -> Result<Vec<StepTape<S>>> {
    let mask = &inst.person_mask;
    let mut tapes: Vec<StepTape<S>> = Vec::with_capacity(params.num_steps());
    for step in &params.steps {
        let inputs = match tapes.last() {
            None => inst.unary.clone(),
            Some(prev) => prev.outputs.normalized(mask),
        };
        tapes.push(step_forward(&inputs, step, mask, cfg.factor_activation)?);
    }
    Ok(tapes)
}

/// Final scores, softmax-normalised per scene and per active person.
pub fn predict<S: Scalar>(
    inst: &SceneInstance<S>,
    params: &NetworkParams<S>,
    cfg: &ModelConfig,
) -> Result<Scores<S>> {
    let tapes = network_forward(inst, params, cfg)?;
    Ok(match tapes.last() {
        Some(t) => t.outputs.normalized(&inst.person_mask),
        None => inst.unary.clone(),
    })
}

/// Gradients of one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Backprop<S> {
    pub params: Gradients<S>,
    /// dL/d(unary scores); zero on masked rows.
    pub unary: Scores<S>,
}

/// Back-propagates `loss_grad = dL/d(final outputs)` through every step,
/// including the residual identity paths and the inter-step softmax.
pub fn network_backward<S: Scalar>(
    tapes: &[StepTape<S>],
    loss_grad: &Scores<S>,
    params: &NetworkParams<S>,
    mask: &[bool],
    activation: Activation,
) -> Result<Backprop<S>> {
    assert_eq!(tapes.len(), params.num_steps(), "one tape per step");
    let mut grads: Vec<StepParams<S>> = Vec::with_capacity(tapes.len());
    let mut upstream = masked(loss_grad, mask);
    for (k, tape) in tapes.iter().enumerate().rev() {
        let (g, d_inputs) = step_backward(tape, &upstream, &params.steps[k], mask, activation)?;
        grads.push(g);
        upstream = if k > 0 {
            softmax_backward(&tapes[k - 1].outputs.normalized(mask), &d_inputs, mask)
        } else {
            d_inputs
        };
    }
    grads.reverse();
    Ok(Backprop {
        params: NetworkParams { steps: grads },
        unary: upstream,
    })
}

fn masked<S: Scalar>(x: &Scores<S>, mask: &[bool]) -> Scores<S> {
    let mut out = x.clone();
    for (m, &active) in mask.iter().enumerate() {
        if !active {
            out.actions.row_mut(m).fill(S::zero());
            out.poses.row_mut(m).fill(S::zero());
        }
    }
    out
}

fn softmax_row_backward<S: Scalar>(p: ArrayView1<S>, dp: ArrayView1<S>, mut dx: ArrayViewMut1<S>) {
    let dot = p.iter().zip(dp.iter()).fold(S::zero(), |acc, (&a, &b)| acc + a * b);
    for ((o, &pi), &di) in dx.iter_mut().zip(p.iter()).zip(dp.iter()) {
        *o = pi * (di - dot);
    }
}

/// Vector-Jacobian product of [`Scores::normalized`] given its output `p`.
fn softmax_backward<S: Scalar>(p: &Scores<S>, dp: &Scores<S>, mask: &[bool]) -> Scores<S> {
    let mut dx = Scores::zeros_like(p);
    softmax_row_backward(p.scene.view(), dp.scene.view(), dx.scene.view_mut());
    for (m, &active) in mask.iter().enumerate() {
        if active {
            softmax_row_backward(p.actions.row(m), dp.actions.row(m), dx.actions.row_mut(m));
            softmax_row_backward(p.poses.row(m), dp.poses.row(m), dx.poses.row_mut(m));
        }
    }
    dx
}

/// Backward pass of one step given `dout = dL/d(step outputs)` (already
/// zero on masked rows). Returns parameter gradients and `dL/d(inputs)`.
pub fn step_backward<S: Scalar>(
    tape: &StepTape<S>,
    dout: &Scores<S>,
    params: &StepParams<S>,
    mask: &[bool],
    activation: Activation,
) -> Result<(StepParams<S>, Scores<S>)> {
    let phi = &tape.acts.phi;
    let (m_n, g_n, h_n, zs) = phi.out.dim();
    let poses = tape.inputs.poses.ncols() > 0;
    let w = &params.out.w_phi;
    let mut grad = StepParams {
        phi: PhiParams {
            alpha: Array4::zeros(params.phi.alpha.raw_dim()),
        },
        psi: None,
        out: OutParams {
            w_phi: Array4::zeros(w.raw_dim()),
            w_psi: params.out.w_psi.as_ref().map(|a| ndarray::Array3::zeros(a.raw_dim())),
        },
    };

    // Residual path.
    let mut d_inputs = dout.clone();

    // Second pass: output weights and dL/dφ_out.
    let mut d_phi = Array4::zeros(phi.out.raw_dim());
    for m in (0..m_n).filter(|&m| mask[m]) {
        for g in 0..g_n {
            let ds = dout.scene[g];
            for h in 0..h_n {
                let da = dout.actions[[m, h]];
                for z in 0..zs {
                    let f = phi.out[[m, g, h, z]];
                    let mut d = w[[g, h, z, 0]] * ds + w[[g, h, z, 1]] * da;
                    grad.out.w_phi[[g, h, z, 0]] += ds * f;
                    grad.out.w_phi[[g, h, z, 1]] += da * f;
                    if poses {
                        let dr = dout.poses[[m, z]];
                        d += w[[g, h, z, 2]] * dr;
                        grad.out.w_phi[[g, h, z, 2]] += dr * f;
                    }
                    d_phi[[m, g, h, z]] = d;
                }
            }
        }
    }

    let (g_alpha, dx_phi) = phi_backward(&d_phi, phi, &tape.inputs, &params.phi, mask, activation);
    grad.phi = g_alpha;
    add_into(&mut d_inputs, &dx_phi);

    if let (Some(psi), Some(psi_params), Some(wp)) = (&tape.acts.psi, &params.psi, &params.out.w_psi) {
        let z_n = tape.inputs.poses.ncols();
        // Σ over active persons of dL/dr_z; ψ feeds every person identically.
        let dr_total: Vec<S> = (0..z_n)
            .map(|z| {
                (0..m_n)
                    .filter(|&m| mask[m])
                    .fold(S::zero(), |acc, m| acc + dout.poses[[m, z]])
            })
            .collect();
        let gw = grad.out.w_psi.as_mut().expect("allocated alongside w_psi");
        let mut d_psi = Array2::zeros(psi.out.raw_dim());
        for ((t, g), &v) in psi.out.indexed_iter() {
            let ds = dout.scene[g];
            let mut d = wp[[t, g, 0]] * ds;
            gw[[t, g, 0]] += ds * v;
            for z in 0..z_n {
                d += wp[[t, g, 1 + z]] * dr_total[z];
                gw[[t, g, 1 + z]] += dr_total[z] * v;
            }
            d_psi[[t, g]] = d;
        }
        let (g_beta, dx_psi) = psi_backward(&d_psi, psi, &tape.inputs, psi_params, mask, activation)?;
        grad.psi = Some(g_beta);
        add_into(&mut d_inputs, &dx_psi);
    }

    Ok((grad, masked(&d_inputs, mask)))
}

fn add_into<S: Scalar>(acc: &mut Scores<S>, x: &Scores<S>) {
    for (a, &b) in acc.iter_mut().zip(x.iter()) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::data::Truth;

    fn one_person(cfg: &ModelConfig) -> SceneInstance<f64> {
        let d = cfg.dims();
        let mut inst = SceneInstance::new(
            ndarray::Array1::from_elem(d.scenes, 1.0 / d.scenes as f64),
            Array2::from_elem((1, d.actions), 1.0 / d.actions as f64),
            Array2::from_elem((1, d.poses), if d.poses > 0 { 1.0 / d.poses as f64 } else { 0.0 }),
        );
        inst.truth = Truth {
            scene: Some(0),
            actions: vec![Some(0)],
            poses: vec![(d.poses > 0).then_some(0)],
        };
        crate::data::pad_instance(&inst, cfg).unwrap()
    }

    #[test]
    fn hand_computed_single_person_step() {
        // |G| = |H| = |Z| = T = 1 is below the validated minimum but the
        // step kernel itself has no such restriction.
        let cfg = ModelConfig::new(1, 1, 1, 1)
            .with_latent(1)
            .with_activation(Activation::Linear);
        let mut p = StepParams::<f64>::zeros(&cfg.dims());
        p.fill_for_test(1.0);
        let x = Scores {
            scene: array![1.0],
            actions: array![[1.0]],
            poses: array![[1.0]],
        };
        let tape = step_forward(&x, &p, &[true], Activation::Linear).unwrap();
        assert_eq!(tape.acts.phi.out[[0, 0, 0, 0]], 3.0);
        assert_eq!(tape.acts.psi.as_ref().unwrap().out[[0, 0]], 2.0);
        assert_eq!(tape.outputs.scene[0], 6.0);
        assert_eq!(tape.outputs.actions[[0, 0]], 4.0);
        assert_eq!(tape.outputs.poses[[0, 0]], 6.0);
    }

    impl StepParams<f64> {
        fn fill_for_test(&mut self, v: f64) {
            for (_, t) in self.tensors_mut() {
                t.fill(v);
            }
        }
    }

    #[test]
    fn zero_parameters_are_residual_identity() {
        let cfg = ModelConfig::new(3, 2, 2, 2).with_latent(2).with_steps(1);
        let mut inst = one_person(&cfg);
        inst.unary.scene = array![0.2, 0.5, 0.3];
        let tapes = network_forward(&inst, &NetworkParams::zeros(&cfg, 1), &cfg).unwrap();
        assert_eq!(tapes[0].outputs, inst.unary);
    }

    #[test]
    fn zero_network_two_steps_returns_softmaxed_unary() {
        let cfg = ModelConfig::new(3, 2, 2, 2).with_latent(2);
        let mut inst = one_person(&cfg);
        inst.unary.scene = array![0.2, 0.5, 0.3];
        let tapes = network_forward(&inst, &NetworkParams::zeros(&cfg, 2), &cfg).unwrap();
        assert_eq!(tapes[1].outputs, inst.unary.normalized(&inst.person_mask));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let cfg = ModelConfig::new(2, 2, 2, 1).with_latent(2);
        let inst = one_person(&cfg);
        let params = NetworkParams::<f64>::init(&cfg);
        let tapes = network_forward(&inst, &params, &cfg).unwrap();
        let zero = Scores::zeros_like(&inst.unary);
        let bp = network_backward(&tapes, &zero, &params, &inst.person_mask, cfg.factor_activation).unwrap();
        assert!(bp.params.iter().chain(bp.unary.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_small_and_seeded() {
        let cfg = ModelConfig::new(3, 2, 2, 2).with_latent(2).with_seed(5);
        let a = NetworkParams::<f64>::init(&cfg);
        assert!(a.iter().all(|v| v.abs() <= INIT_SCALE));
        assert_eq!(a, NetworkParams::init(&cfg));
        assert_ne!(a, NetworkParams::init(&cfg.clone().with_seed(6)));
        // Step k is independent of the total step count.
        let one = NetworkParams::<f64>::init(&cfg.clone().with_steps(1));
        assert_eq!(one.steps[0], a.steps[0]);
    }

    #[test]
    fn f32_forward_tracks_f64() {
        let cfg = ModelConfig::new(3, 2, 2, 2).with_latent(2);
        let inst = one_person(&cfg);
        let p64 = NetworkParams::<f64>::init(&cfg);
        let out64 = predict(&inst, &p64, &cfg).unwrap();
        let out32 = predict(&inst.cast::<f32>(), &p64.cast::<f32>(), &cfg).unwrap();
        for (a, b) in out64.iter().zip(out32.iter()) {
            assert!((a - *b as f64).abs() < 1e-6);
        }
    }
}
