//! Orthogonal Sylvester flow layers in plain `f64` linear algebra.
//!
//! One layer maps `z -> z + Q R h(R~ Q^T z + b)` with `Q` a `D x M` matrix of
//! orthonormal columns, `R`, `R~` upper-triangular `M x M`, and `h = tanh`.
//! Since `R~ R` is upper-triangular the Jacobian determinant collapses to
//! `prod_i (1 + R_ii R~_ii h'(v_i))`.
//!
//! The batched, differentiable counterpart used for training lives in
//! [`super::tensor_flow`]; this module is the reference the tests check it
//! against.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance on `Q^T Q = I` accepted by [`FlowLayer::validate`].
pub const ORTHONORMAL_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: DVector<f64>,
}

impl LatentState {
    pub fn new(z: DVector<f64>) -> Self {
        Self { z }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowLayer {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_tilde: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl FlowLayer {
    /// A layer with `R = R~ = 0`, `b = 0`: the identity map.
    pub fn identity(q: DMatrix<f64>) -> Self {
        let m = q.ncols();
        Self { q, r: DMatrix::zeros(m, m), r_tilde: DMatrix::zeros(m, m), b: DVector::zeros(m) }
    }

    pub fn latent_dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn n_vectors(&self) -> usize {
        self.q.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m) = self.q.shape();
        if m == 0 || m > d {
            return Err(Error::ModelState(format!("Q has shape {d}x{m}; need 1 <= M <= D")));
        }
        if self.r.shape() != (m, m) || self.r_tilde.shape() != (m, m) || self.b.len() != m {
            return Err(Error::ModelState("R, R~, b shapes disagree with Q".into()));
        }
        let gram = self.q.transpose() * &self.q;
        let err = (gram - DMatrix::<f64>::identity(m, m)).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(Error::ModelState(format!("Q is not orthonormal (max |Q^T Q - I| = {err:.3e})")));
        }
        for i in 0..m {
            for j in 0..i {
                if self.r[(i, j)] != 0.0 || self.r_tilde[(i, j)] != 0.0 {
                    return Err(Error::ModelState("R and R~ must be upper-triangular".into()));
                }
            }
            let prod = self.r[(i, i)] * self.r_tilde[(i, i)];
            if !(prod > -1.0) {
                return Err(Error::ModelState(format!(
                    "diagonal product R[{i},{i}] * R~[{i},{i}] = {prod} breaks invertibility"
                )));
            }
        }
        Ok(())
    }

    fn preactivation(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.r_tilde * (self.q.transpose() * z) + &self.b
    }

    /// Forward map for one layer plus its log|det J|.
    pub fn forward(&self, z: &DVector<f64>) -> (DVector<f64>, f64) {
        let v = self.preactivation(z);
        let h = v.map(f64::tanh);
        let out = z + &self.q * (&self.r * &h);
        let log_det = (0..self.n_vectors())
            .map(|i| {
                let dh = 1.0 - h[i] * h[i];
                (1.0 + self.r[(i, i)] * self.r_tilde[(i, i)] * dh).abs().ln()
            })
            .sum();
        (out, log_det)
    }

    /// Dense Jacobian `I + Q R diag(h') R~ Q^T`.
    pub fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let v = self.preactivation(z);
        let dh = DMatrix::from_diagonal(&v.map(|x| 1.0 - x.tanh().powi(2)));
        let d = self.latent_dim();
        DMatrix::identity(d, d) + &self.q * &self.r * dh * &self.r_tilde * self.q.transpose()
    }

    /// Inverts the layer. The component orthogonal to `span(Q)` passes through
    /// unchanged; the `M`-dimensional coordinates `u = Q^T z` are solved by Newton
    /// iteration on `u + R tanh(R~ u + b) = u'`.
    pub fn inverse(&self, z_out: &DVector<f64>) -> Result<DVector<f64>> {
        let qt = self.q.transpose();
        let u_out = &qt * z_out;
        let complement = z_out - &self.q * &u_out;
        let m = self.n_vectors();
        let mut u = u_out.clone();
        for _ in 0..100 {
            let v = &self.r_tilde * &u + &self.b;
            let h = v.map(f64::tanh);
            let resid = &u + &self.r * &h - &u_out;
            if resid.amax() < 1e-14 {
                break;
            }
            let dh = DMatrix::from_diagonal(&h.map(|x| 1.0 - x * x));
            let jac = DMatrix::identity(m, m) + &self.r * dh * &self.r_tilde;
            let step = jac
                .lu()
                .solve(&resid)
                .ok_or_else(|| Error::Numerical("singular Jacobian while inverting flow layer".into()))?;
            u -= step;
        }
        Ok(complement + &self.q * u)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowStack {
    pub layers: Vec<FlowLayer>,
}

impl FlowStack {
    pub fn new(layers: Vec<FlowLayer>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut dim = None;
        for (k, layer) in self.layers.iter().enumerate() {
            layer
                .validate()
                .map_err(|e| Error::ModelState(format!("flow layer {k}: {e}")))?;
            match dim {
                None => dim = Some(layer.latent_dim()),
                Some(d) if d != layer.latent_dim() => {
                    return Err(Error::ModelState("flow layers disagree on latent dimension".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn inverse(&self, z_k: &LatentState) -> Result<LatentState> {
        self.validate()?;
        let mut z = z_k.z.clone();
        for layer in self.layers.iter().rev() {
            z = layer.inverse(&z)?;
        }
        Ok(LatentState::new(z))
    }
}

/// Push `z0` through every layer, accumulating the log-det Jacobian.
pub fn flow_forward(z0: &LatentState, stack: &FlowStack) -> Result<(LatentState, f64)> {
    stack.validate()?;
    if let Some(layer) = stack.layers.first() {
        if layer.latent_dim() != z0.dim() {
            return Err(Error::rejected(format!(
                "latent has dimension {}, flow expects {}",
                z0.dim(),
                layer.latent_dim()
            )));
        }
    }
    let mut z = z0.z.clone();
    let mut log_det_sum = 0.0;
    for layer in &stack.layers {
        let (next, ld) = layer.forward(&z);
        z = next;
        log_det_sum += ld;
    }
    if !log_det_sum.is_finite() || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("flow produced non-finite output".into()));
    }
    Ok((LatentState::new(z), log_det_sum))
}

/// Gram-Schmidt orthonormalization (classical, two passes).
///
/// Column signs follow the input, so an orthonormal input is a fixed point.
pub fn orthonormalize(q_raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (d, m) = q_raw.shape();
    if m > d {
        return Err(Error::Numerical(format!("{m} columns cannot be orthonormal in dimension {d}")));
    }
    let mut q = DMatrix::<f64>::zeros(d, m);
    for k in 0..m {
        let original = q_raw.column(k);
        let scale = original.norm();
        let mut v = original.clone_owned();
        for _ in 0..2 {
            for j in 0..k {
                let proj = q.column(j).dot(&v);
                v.axpy(-proj, &q.column(j), 1.0);
            }
        }
        let norm = v.norm();
        if !(scale > 0.0) || norm <= 1e-10 * scale {
            return Err(Error::Numerical(format!(
                "Q_raw is rank deficient: column {k} has residual norm {norm:.3e} after projection"
            )));
        }
        q.set_column(k, &(v / norm));
    }
    Ok(q)
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = orthonormalize(&gaussian_matrix(&mut rng, 6, 3)).unwrap();
        let stack = FlowStack::new(vec![FlowLayer::identity(q.clone()), FlowLayer::identity(q)]);
        let z0 = LatentState::new(DVector::from_fn(6, |i, _| i as f64 - 2.5));
        let (zk, ld) = flow_forward(&z0, &stack).unwrap();
        assert_eq!(zk, z0);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn log_det_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let stack = FlowStack::new(vec![random_layer(&mut rng, 4, 2)]);
            let z = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let (_, ld) = flow_forward(&LatentState::new(z.clone()), &stack).unwrap();
            let fd = fd_jacobian(&stack, &z, 1e-5).determinant().abs().ln();
            assert!(((ld - fd) / fd.abs().max(1e-3)).abs() < 1e-4, "{ld} vs {fd}");
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_layer(&mut rng, 5, 3);
        let z = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let fd = fd_jacobian(&FlowStack::new(vec![layer.clone()]), &z, 1e-5);
        assert!((layer.jacobian(&z) - fd).abs().max() < 1e-7);
    }

    #[test]
    fn stacked_log_det_is_additive_along_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_layer(&mut rng, 6, 2);
        let z0 = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let (z1, ld1) = layer.forward(&z0);
        let (_, ld2) = layer.forward(&z1);
        let stack = FlowStack::new(vec![layer.clone(), layer]);
        let (_, total) = flow_forward(&LatentState::new(z0), &stack).unwrap();
        assert!((total - (ld1 + ld2)).abs() < 1e-12);
    }

    #[test]
    fn inverse_recovers_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let stack = FlowStack::new((0..3).map(|_| random_layer(&mut rng, 5, 2)).collect());
            let z0 = LatentState::new(DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0)));
            let (zk, _) = flow_forward(&z0, &stack).unwrap();
            let back = stack.inverse(&zk).unwrap();
            assert!((back.z - &z0.z).amax() < 1e-5);
        }
    }

    #[test]
    fn invalid_stacks_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut layer = random_layer(&mut rng, 4, 2);
        layer.q[(0, 0)] += 0.1;
        let z = LatentState::new(DVector::zeros(4));
        assert!(matches!(flow_forward(&z, &FlowStack::new(vec![layer])), Err(Error::ModelState(_))));

        let mut layer = random_layer(&mut rng, 4, 2);
        layer.r[(0, 0)] = 2.0;
        layer.r_tilde[(0, 0)] = -0.6;
        assert!(matches!(flow_forward(&z, &FlowStack::new(vec![layer])), Err(Error::ModelState(_))));
    }

    #[test]
    fn orthonormal_input_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = orthonormalize(&gaussian_matrix(&mut rng, 10, 4)).unwrap();
        let again = orthonormalize(&q).unwrap();
        assert!((again - q).abs().max() < 1e-6);
    }

    #[test]
    fn orthonormalize_large_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw = gaussian_matrix(&mut rng, 512, 16);
        let q = orthonormalize(&raw).unwrap();
        let err = (q.transpose() * &q - DMatrix::<f64>::identity(16, 16)).abs().max();
        assert!(err < 1e-6);
        // Same subspace: the raw columns project onto span(Q) without residual.
        let resid = &raw - &q * (q.transpose() * &raw);
        assert!(resid.abs().max() < 1e-6);
    }

    #[test]
    fn rank_deficient_input_fails() {
        let mut raw = DMatrix::from_fn(6, 3, |i, j| (i + j) as f64);
        let c0 = raw.column(0).clone_owned();
        raw.set_column(2, &(c0 * 2.0));
        assert!(matches!(orthonormalize(&raw), Err(Error::Numerical(_))));
    }
}
