//! The two sparsely connected, template-shared factor layers.
//!
//! φ (scene-action-pose) has one neuron per `(m, g, h, z)`; all persons share
//! the template `α[g][h][z]`. ψ (poses-all) has `T` latent neurons per scene
//! reading the scene score and every person's pose scores through `β[t][g]`.
//!
//! In arity-2 mode the pose axis of φ tensors has extent 1, templates are
//! two wide, and ψ does not exist.

use ndarray::{Array2, Array3, Array4};

use crate::config::{Activation, Dims};
use crate::data::Scores;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl Activation {
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn slope_at_output<S: Scalar>(self, out: S) -> S {
        match self {
            Activation::Tanh => S::one() - out * out,
            Activation::Linear => S::one(),
        }
    }
}

/// `α`: `[|G|][|H|][zs][width]`, one template per label combination.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiParams<S> {
    pub alpha: Array4<S>,
}

/// `β`: `[T][|G|][psi_width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiParams<S> {
    pub beta: Array3<S>,
}

/// Second-pass weights.
///
/// `w_phi[g][h][z]` holds the weights from `φ(m, g, h, z)` back to scene `g`,
/// action `(h, m)` and pose `(z, m)`; `w_psi[t][g]` holds the weight back to
/// scene `g` followed by one weight per pose label, applied at every person.
#[derive(Debug, Clone, PartialEq)]
pub struct OutParams<S> {
    pub w_phi: Array4<S>,
    pub w_psi: Option<Array3<S>>,
}

impl<S: Scalar> PhiParams<S> {
    pub fn zeros(d: &Dims) -> Self {
        PhiParams {
            alpha: Array4::zeros((d.scenes, d.actions, d.zs, d.width)),
        }
    }
}

impl<S: Scalar> PsiParams<S> {
    pub fn zeros(d: &Dims) -> Self {
        PsiParams {
            beta: Array3::zeros((d.latent, d.scenes, d.psi_width())),
        }
    }
}

impl<S: Scalar> OutParams<S> {
    pub fn zeros(d: &Dims) -> Self {
        OutParams {
            w_phi: Array4::zeros((d.scenes, d.actions, d.zs, d.width)),
            w_psi: d
                .has_poses()
                .then(|| Array3::zeros((d.latent, d.scenes, 1 + d.poses))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhiActivations<S> {
    /// `[M_max][|G|][|H|][zs]`
    pub pre: Array4<S>,
    pub out: Array4<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsiActivations<S> {
    /// `[T][|G|]`
    pub pre: Array2<S>,
    pub out: Array2<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorActivations<S> {
    pub phi: PhiActivations<S>,
    pub psi: Option<PsiActivations<S>>,
}

fn dims_of<S: Scalar>(inputs: &Scores<S>, alpha: &Array4<S>) -> (usize, usize, usize, usize, usize, bool) {
    let (g_n, h_n, zs, width) = alpha.dim();
    (inputs.persons(), g_n, h_n, zs, width, width == 3)
}

/// `phi_pre[m][g][h][z] = α[g][h][z] · (s_g, a_h(m), r_z(m))`; masked
/// persons get exactly zero in both tensors.
pub fn phi_forward<S: Scalar>(
    inputs: &Scores<S>,
    params: &PhiParams<S>,
    mask: &[bool],
    activation: Activation,
) -> PhiActivations<S> {
    let (m_n, g_n, h_n, zs, _, poses) = dims_of(inputs, &params.alpha);
    let mut pre = Array4::zeros((m_n, g_n, h_n, zs));
    let mut out = Array4::zeros((m_n, g_n, h_n, zs));
    let alpha = &params.alpha;
    for m in 0..m_n {
        if !mask[m] {
            continue;
        }
        for g in 0..g_n {
            let s = inputs.scene[g];
            for h in 0..h_n {
                let a = inputs.actions[[m, h]];
                for z in 0..zs {
                    let mut x = alpha[[g, h, z, 0]] * s + alpha[[g, h, z, 1]] * a;
                    if poses {
                        x += alpha[[g, h, z, 2]] * inputs.poses[[m, z]];
                    }
                    pre[[m, g, h, z]] = x;
                    out[[m, g, h, z]] = activation.apply(x);
                }
            }
        }
    }
    PhiActivations { pre, out }
}

/// Position of person `m`'s pose `z` inside a β template.
#[inline]
fn beta_slot(m: usize, z: usize, poses: usize, tied: bool) -> usize {
    if tied {
        1 + z
    } else {
        1 + m * poses + z
    }
}

fn psi_is_tied<S>(beta: &Array3<S>, persons: usize, poses: usize) -> Result<bool> {
    // With a single person slot both layouts coincide.
    match beta.dim().2 {
        w if w == 1 + persons * poses => Ok(false),
        w if w == 1 + poses => Ok(true),
        w => Err(Error::Structure(format!(
            "β width {w} fits neither {persons} person slots nor a tied template over {poses} poses"
        ))),
    }
}

/// `psi_pre[t][g] = β[t][g] · (s_g, r(1), …, r(M_max))` with masked persons'
/// pose rows read as zero.
pub fn psi_forward<S: Scalar>(
    inputs: &Scores<S>,
    params: &PsiParams<S>,
    mask: &[bool],
    activation: Activation,
) -> Result<PsiActivations<S>> {
    let z_n = inputs.poses.ncols();
    if z_n == 0 {
        return Err(Error::Structure("poses-all layer requires num_poses > 0".into()));
    }
    let m_n = inputs.persons();
    let tied = psi_is_tied(&params.beta, m_n, z_n)?;
    let (t_n, g_n, _) = params.beta.dim();
    let mut pre = Array2::zeros((t_n, g_n));
    let mut out = Array2::zeros((t_n, g_n));
    for t in 0..t_n {
        for g in 0..g_n {
            let mut x = params.beta[[t, g, 0]] * inputs.scene[g];
            for m in (0..m_n).filter(|&m| mask[m]) {
                for z in 0..z_n {
                    x += params.beta[[t, g, beta_slot(m, z, z_n, tied)]] * inputs.poses[[m, z]];
                }
            }
            pre[[t, g]] = x;
            out[[t, g]] = activation.apply(x);
        }
    }
    Ok(PsiActivations { pre, out })
}

/// Back-propagates `dL/dφ_out` to the shared template and to the layer
/// inputs. Template gradients are summed over every active person.
pub fn phi_backward<S: Scalar>(
    grad_out: &Array4<S>,
    acts: &PhiActivations<S>,
    inputs: &Scores<S>,
    params: &PhiParams<S>,
    mask: &[bool],
    activation: Activation,
) -> (PhiParams<S>, Scores<S>) {
    let (m_n, g_n, h_n, zs, _, poses) = dims_of(inputs, &params.alpha);
    let alpha = &params.alpha;
    let mut grad = PhiParams {
        alpha: Array4::zeros(alpha.raw_dim()),
    };
    let mut dx = Scores::zeros_like(inputs);
    for m in 0..m_n {
        if !mask[m] {
            continue;
        }
        for g in 0..g_n {
            let s = inputs.scene[g];
            for h in 0..h_n {
                let a = inputs.actions[[m, h]];
                for z in 0..zs {
                    let dpre = grad_out[[m, g, h, z]] * activation.slope_at_output(acts.out[[m, g, h, z]]);
                    if dpre == S::zero() {
                        continue;
                    }
                    grad.alpha[[g, h, z, 0]] += dpre * s;
                    grad.alpha[[g, h, z, 1]] += dpre * a;
                    dx.scene[g] += dpre * alpha[[g, h, z, 0]];
                    dx.actions[[m, h]] += dpre * alpha[[g, h, z, 1]];
                    if poses {
                        grad.alpha[[g, h, z, 2]] += dpre * inputs.poses[[m, z]];
                        dx.poses[[m, z]] += dpre * alpha[[g, h, z, 2]];
                    }
                }
            }
        }
    }
    (grad, dx)
}

/// Back-propagates `dL/dψ_out` to `β` and to the layer inputs.
pub fn psi_backward<S: Scalar>(
    grad_out: &Array2<S>,
    acts: &PsiActivations<S>,
    inputs: &Scores<S>,
    params: &PsiParams<S>,
    mask: &[bool],
    activation: Activation,
) -> Result<(PsiParams<S>, Scores<S>)> {
    let z_n = inputs.poses.ncols();
    if z_n == 0 {
        return Err(Error::Structure("poses-all layer requires num_poses > 0".into()));
    }
    let m_n = inputs.persons();
    let tied = psi_is_tied(&params.beta, m_n, z_n)?;
    let (t_n, g_n, _) = params.beta.dim();
    let mut grad = PsiParams {
        beta: Array3::zeros(params.beta.raw_dim()),
    };
    let mut dx = Scores::zeros_like(inputs);
    for t in 0..t_n {
        for g in 0..g_n {
            let dpre = grad_out[[t, g]] * activation.slope_at_output(acts.out[[t, g]]);
            if dpre == S::zero() {
                continue;
            }
            grad.beta[[t, g, 0]] += dpre * inputs.scene[g];
            dx.scene[g] += dpre * params.beta[[t, g, 0]];
            for m in (0..m_n).filter(|&m| mask[m]) {
                for z in 0..z_n {
                    let slot = beta_slot(m, z, z_n, tied);
                    grad.beta[[t, g, slot]] += dpre * inputs.poses[[m, z]];
                    dx.poses[[m, z]] += dpre * params.beta[[t, g, slot]];
                }
            }
        }
    }
    Ok((grad, dx))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::config::ModelConfig;

    fn random_scores(rng: &mut ChaCha8Rng, d: &Dims, mask: &[bool]) -> Scores<f64> {
        let mut s = Scores::zeros(d.scenes, d.actions, d.poses, d.persons);
        s.scene.mapv_inplace(|_| rng.random_range(0.0..1.0));
        for m in 0..d.persons {
            if mask[m] {
                s.actions.row_mut(m).mapv_inplace(|_| rng.random_range(0.0..1.0));
                s.poses.row_mut(m).mapv_inplace(|_| rng.random_range(0.0..1.0));
            }
        }
        s
    }

    fn random_like<D: ndarray::Dimension>(rng: &mut ChaCha8Rng, a: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
        a.mapv(|_| rng.random_range(-1.0..1.0))
    }

    fn dims(g: usize, h: usize, z: usize, m: usize, t: usize, tied: bool) -> Dims {
        ModelConfig::new(g, h, z, m).with_latent(t).with_tied_psi(tied).dims()
    }

    #[test]
    fn zero_templates_give_zero_outputs() {
        let d = dims(2, 3, 2, 2, 2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_scores(&mut rng, &d, &[true, true]);
        let phi = phi_forward(&x, &PhiParams::zeros(&d), &[true, true], Activation::Tanh);
        assert!(phi.out.iter().all(|&v| v == 0.0));
        let psi = psi_forward(&x, &PsiParams::zeros(&d), &[true, true], Activation::Tanh).unwrap();
        assert!(psi.out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_factor_value() {
        let d = dims(1, 1, 1, 1, 1, false);
        let mut p = PhiParams::<f64>::zeros(&d);
        p.alpha.fill(1.0);
        let x = Scores {
            scene: array![0.2],
            actions: array![[0.3]],
            poses: array![[0.5]],
        };
        let phi = phi_forward(&x, &p, &[true], Activation::Tanh);
        assert_abs_diff_eq!(phi.out[[0, 0, 0, 0]], 0.761594, epsilon = 1e-6);
        assert_abs_diff_eq!(phi.out[[0, 0, 0, 0]], 1.0f64.tanh(), epsilon = 1e-15);
    }

    #[test]
    fn masked_person_is_silent() {
        let d = dims(2, 2, 2, 2, 2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = random_scores(&mut rng, &d, &[true, true]);
        // Garbage in the masked row must not leak through.
        x.actions.row_mut(1).fill(5.0);
        let p = PhiParams {
            alpha: random_like(&mut rng, &PhiParams::<f64>::zeros(&d).alpha),
        };
        let phi = phi_forward(&x, &p, &[true, false], Activation::Tanh);
        assert!(phi.out.index_axis(ndarray::Axis(0), 1).iter().all(|&v| v == 0.0));
        let (grad, dx) = phi_backward(&Array4::ones(phi.out.raw_dim()), &phi, &x, &p, &[true, false], Activation::Tanh);
        assert!(dx.actions.row(1).iter().all(|&v| v == 0.0));
        let solo = phi_forward(&x, &p, &[true, false], Activation::Tanh);
        let (grad_solo, _) = phi_backward(&Array4::ones(solo.out.raw_dim()), &solo, &x, &p, &[true, false], Activation::Tanh);
        assert_eq!(grad, grad_solo);
    }

    #[test]
    fn psi_rejects_missing_poses() {
        let d = dims(2, 2, 0, 1, 0, false);
        let x = Scores::<f64>::zeros(2, 2, 0, 1);
        let p = PsiParams {
            beta: Array3::zeros((1, 2, 1)),
        };
        assert!(matches!(psi_forward(&x, &p, &[true], Activation::Tanh), Err(Error::Structure(_))));
        assert_eq!(d.latent, 0);
    }

    #[test]
    fn tied_psi_matches_replicated_untied() {
        let d_untied = dims(2, 2, 3, 3, 2, false);
        let d_tied = dims(2, 2, 3, 3, 2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tied = PsiParams {
            beta: random_like(&mut rng, &PsiParams::<f64>::zeros(&d_tied).beta),
        };
        let mut untied = PsiParams::<f64>::zeros(&d_untied);
        for t in 0..2 {
            for g in 0..2 {
                untied.beta[[t, g, 0]] = tied.beta[[t, g, 0]];
                for m in 0..3 {
                    for z in 0..3 {
                        untied.beta[[t, g, 1 + m * 3 + z]] = tied.beta[[t, g, 1 + z]];
                    }
                }
            }
        }
        let mut x = random_scores(&mut rng, &d_tied, &[true; 3]);
        let row = x.poses.row(0).to_owned();
        for m in 1..3 {
            x.poses.row_mut(m).assign(&row);
        }
        let a = psi_forward(&x, &tied, &[true; 3], Activation::Linear).unwrap();
        let b = psi_forward(&x, &untied, &[true; 3], Activation::Linear).unwrap();
        for (u, v) in a.pre.iter().zip(b.pre.iter()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn masked_slot_does_not_change_psi() {
        let d = dims(2, 2, 2, 3, 2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = PsiParams {
            beta: random_like(&mut rng, &PsiParams::<f64>::zeros(&d).beta),
        };
        let x = random_scores(&mut rng, &d, &[true, true, false]);
        let a = psi_forward(&x, &p, &[true, true, false], Activation::Tanh).unwrap();
        let mut y = x.clone();
        y.poses.row_mut(2).fill(0.9);
        let b = psi_forward(&y, &p, &[true, true, false], Activation::Tanh).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let d = dims(2, 2, 2, 2, 2, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_scores(&mut rng, &d, &[true, true]);
        let phi_p = PhiParams {
            alpha: random_like(&mut rng, &PhiParams::<f64>::zeros(&d).alpha),
        };
        let psi_p = PsiParams {
            beta: random_like(&mut rng, &PsiParams::<f64>::zeros(&d).beta),
        };
        let phi = phi_forward(&x, &phi_p, &[true, true], Activation::Tanh);
        let (g, dx) = phi_backward(&Array4::zeros(phi.out.raw_dim()), &phi, &x, &phi_p, &[true, true], Activation::Tanh);
        assert!(g.alpha.iter().chain(dx.iter()).all(|&v| v == 0.0));
        let psi = psi_forward(&x, &psi_p, &[true, true], Activation::Tanh).unwrap();
        let (g, dx) = psi_backward(&Array2::zeros(psi.out.raw_dim()), &psi, &x, &psi_p, &[true, true], Activation::Tanh).unwrap();
        assert!(g.beta.iter().chain(dx.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_person_doubles_template_gradient() {
        let d1 = dims(2, 2, 2, 1, 1, false);
        let d2 = dims(2, 2, 2, 2, 1, false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = PhiParams {
            alpha: random_like(&mut rng, &PhiParams::<f64>::zeros(&d1).alpha),
        };
        let one = random_scores(&mut rng, &d1, &[true]);
        let mut two = Scores::zeros(2, 2, 2, 2);
        two.scene.assign(&one.scene);
        for m in 0..2 {
            two.actions.row_mut(m).assign(&one.actions.row(0));
            two.poses.row_mut(m).assign(&one.poses.row(0));
        }
        let a1 = phi_forward(&one, &p, &[true], Activation::Tanh);
        let (g1, _) = phi_backward(&Array4::ones(a1.out.raw_dim()), &a1, &one, &p, &[true], Activation::Tanh);
        let a2 = phi_forward(&two, &p, &[true, true], Activation::Tanh);
        let (g2, _) = phi_backward(&Array4::ones(a2.out.raw_dim()), &a2, &two, &p, &[true, true], Activation::Tanh);
        for (x, y) in g1.alpha.iter().zip(g2.alpha.iter()) {
            assert_abs_diff_eq!(2.0 * x, y, epsilon = 1e-14);
        }
        assert_eq!(d2.persons, 2);
    }

    #[test]
    fn template_perturbation_moves_every_active_site() {
        let d = dims(2, 2, 2, 3, 1, false);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = PhiParams {
            alpha: random_like(&mut rng, &PhiParams::<f64>::zeros(&d).alpha),
        };
        let mask = [true, false, true];
        let x = random_scores(&mut rng, &d, &mask);
        let base = phi_forward(&x, &p, &mask, Activation::Linear);
        let delta = 0.125;
        let mut q = p.clone();
        for k in 0..3 {
            q.alpha[[1, 0, 1, k]] += delta;
        }
        let moved = phi_forward(&x, &q, &mask, Activation::Linear);
        for ((m, g, h, z), &v) in moved.pre.indexed_iter() {
            let diff = v - base.pre[[m, g, h, z]];
            if mask[m] && (g, h, z) == (1, 0, 1) {
                let want = delta * (x.scene[1] + x.actions[[m, 0]] + x.poses[[m, 1]]);
                assert_abs_diff_eq!(diff, want, epsilon = 1e-14);
            } else {
                assert_eq!(diff, 0.0);
            }
        }
    }

    #[test]
    fn equal_templates_are_person_equivariant() {
        let d = dims(2, 3, 2, 3, 1, false);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = PhiParams::<f64>::zeros(&d);
        let tpl: Array1<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        for mut lane in p.alpha.lanes_mut(ndarray::Axis(3)) {
            lane.assign(&tpl);
        }
        let mask = [true; 3];
        let x = random_scores(&mut rng, &d, &mask);
        let perm = [2, 0, 1];
        let mut y = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            y.actions.row_mut(dst).assign(&x.actions.row(src));
            y.poses.row_mut(dst).assign(&x.poses.row(src));
        }
        let a = phi_forward(&x, &p, &mask, Activation::Linear);
        let b = phi_forward(&y, &p, &mask, Activation::Linear);
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                b.out.index_axis(ndarray::Axis(0), dst),
                a.out.index_axis(ndarray::Axis(0), src)
            );
        }
    }
}
