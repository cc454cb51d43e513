//! Kronecker-factored curvature preconditioning.
//!
//! Per trainable layer, two small covariance factors are maintained as
//! exponential running averages: `a_factor` over layer-input rows and
//! `g_factor` over output-gradient rows. Their Kronecker product approximates
//! the layer's curvature block, and a gradient is preconditioned either
//! through the factor eigendecompositions (the default path, no explicit
//! inverse) or through explicitly damped factor inverses. A scalar ν derived
//! from a trust-region style bound rescales the preconditioned gradients
//! before they reach the optimizer.
//!
//! The two paths damp differently (eigenvalue-product damping vs per-factor
//! damping) and are different operators whenever damping is nonzero; both are
//! kept literal so the difference stays observable.

use crate::error::{Error, Result};
use crate::linalg::{sym_eig, Matrix, SymEig};
use crate::nn::LayerCapture;

/// Floor applied to eigen-path denominators so damping zero with zero
/// eigenvalues cannot divide by zero.
const DENOM_FLOOR: f64 = 1e-12;

/// Hyper-parameters of the preconditioner.
#[derive(Clone, Debug, PartialEq)]
pub struct KfacConfig {
    /// Tikhonov damping γ added before inversion.
    pub damping: f64,
    /// Running-average weight ξ on the newest batch estimate.
    pub running_avg: f64,
    /// Trust-region bound κ for the ν gradient scaling.
    pub kl_clip: f64,
    /// Iterations between eigendecomposition refreshes.
    pub decomp_interval: usize,
    /// Iterations between factor refreshes. `None` derives
    /// `max(1, decomp_interval / 10)`; an explicit value is used as given
    /// (clamped to the decomposition interval).
    pub factor_interval: Option<usize>,
    /// (epoch, multiplier) pairs; each multiplier scales γ once the epoch is
    /// reached.
    pub damping_decay: Vec<(usize, f64)>,
    /// (epoch, multiplier) pairs scaling the decomposition interval.
    pub interval_decay: Vec<(usize, f64)>,
}

impl Default for KfacConfig {
    fn default() -> Self {
        KfacConfig {
            damping: 0.001,
            running_avg: 0.95,
            kl_clip: 1e-3,
            decomp_interval: 10,
            factor_interval: None,
            damping_decay: Vec::new(),
            interval_decay: Vec::new(),
        }
    }
}

impl KfacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return Err(Error::Config(format!(
                "kfac.damping must be positive and finite, got {}",
                self.damping
            )));
        }
        if !(0.9..1.0).contains(&self.running_avg) {
            return Err(Error::Config(format!(
                "kfac.running_avg must lie in [0.9, 1), got {}",
                self.running_avg
            )));
        }
        if !(self.kl_clip > 0.0 && self.kl_clip.is_finite()) {
            return Err(Error::Config(format!(
                "kfac.kl_clip must be positive and finite, got {}",
                self.kl_clip
            )));
        }
        if self.decomp_interval == 0 {
            return Err(Error::Config("kfac.decomp_interval must be >= 1".into()));
        }
        if let Some(f) = self.factor_interval {
            if f == 0 {
                return Err(Error::Config("kfac.factor_interval must be >= 1".into()));
            }
            if f > self.decomp_interval {
                return Err(Error::Config(format!(
                    "kfac.factor_interval ({f}) must not exceed kfac.decomp_interval ({})",
                    self.decomp_interval
                )));
            }
        }
        for &(epoch, mult) in &self.damping_decay {
            if !(mult > 0.0 && mult <= 1.0) {
                return Err(Error::Config(format!(
                    "damping decay multiplier at epoch {epoch} must lie in (0, 1], got {mult}"
                )));
            }
        }
        for &(epoch, mult) in &self.interval_decay {
            if !(mult >= 1.0 && mult.is_finite()) {
                return Err(Error::Config(format!(
                    "interval decay multiplier at epoch {epoch} must be >= 1, got {mult}"
                )));
            }
        }
        Ok(())
    }
}

/// Schedule-resolved hyper-parameters for one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveHyper {
    pub damping: f64,
    pub decomp_interval: usize,
    pub factor_interval: usize,
}

/// Resolve the piecewise-constant schedules at `epoch`: every milestone at or
/// before it applies its multiplier once. The factor interval defaults to a
/// tenth of the decomposition interval (factors are refreshed ten times as
/// often as decompositions); an explicit setting overrides that.
pub fn apply_schedules(config: &KfacConfig, epoch: usize) -> EffectiveHyper {
    let mut damping = config.damping;
    for &(milestone, mult) in &config.damping_decay {
        if milestone <= epoch {
            damping *= mult;
        }
    }
    let mut decomp = config.decomp_interval as f64;
    for &(milestone, mult) in &config.interval_decay {
        if milestone <= epoch {
            decomp *= mult;
        }
    }
    let decomp_interval = (decomp.round() as usize).max(1);
    let factor_interval = match config.factor_interval {
        Some(f) => f.min(decomp_interval).max(1),
        None => (decomp_interval / 10).max(1),
    };
    EffectiveHyper { damping, decomp_interval, factor_interval }
}

/// Per-layer preconditioner state: running factors, cached decompositions,
/// and the worker ranks that own each factor's eigendecomposition.
#[derive(Clone, Debug)]
pub struct LayerKfacState {
    pub layer_id: usize,
    pub a_factor: Option<Matrix>,
    pub g_factor: Option<Matrix>,
    pub a_eig: Option<SymEig>,
    pub g_eig: Option<SymEig>,
    pub a_owner: usize,
    pub g_owner: usize,
}

impl LayerKfacState {
    pub fn new(layer_id: usize) -> Self {
        LayerKfacState {
            layer_id,
            a_factor: None,
            g_factor: None,
            a_eig: None,
            g_eig: None,
            a_owner: 0,
            g_owner: 0,
        }
    }

    pub fn have_factors(&self) -> bool {
        self.a_factor.is_some() && self.g_factor.is_some()
    }

    pub fn have_eigs(&self) -> bool {
        self.a_eig.is_some() && self.g_eig.is_some()
    }

    /// Fold one batch's capture into the running factors:
    /// `factor <- ξ·batch + (1-ξ)·prev`, except that the first observation
    /// seeds the average directly (no bias toward zero). Factors are
    /// re-symmetrized after every update.
    pub fn update_factors(&mut self, capture: &LayerCapture, xi: f64) -> Result<()> {
        let (a_batch, g_batch) = batch_factors(capture)?;
        self.update_factors_from_batch(a_batch, g_batch, xi)
    }

    /// Same running-average step, starting from already-computed (possibly
    /// cross-worker averaged) batch estimates.
    pub fn update_factors_from_batch(
        &mut self,
        a_batch: Matrix,
        g_batch: Matrix,
        xi: f64,
    ) -> Result<()> {
        if !(xi > 0.0 && xi <= 1.0) {
            return Err(Error::Value(format!(
                "running-average weight must lie in (0, 1], got {xi}"
            )));
        }
        self.a_factor = Some(blend(self.a_factor.take(), a_batch, xi)?);
        self.g_factor = Some(blend(self.g_factor.take(), g_batch, xi)?);
        Ok(())
    }

    /// Recompute both cached decompositions from the current factors. In the
    /// distributed loop each factor's owner does this and the results are
    /// gathered; this local form serves single-context use and tests.
    pub fn decompose(&mut self) -> Result<()> {
        let a = self.a_factor.as_ref().ok_or_else(|| {
            Error::State("no factors accumulated; update factors before decomposing".into())
        })?;
        let g = self.g_factor.as_ref().ok_or_else(|| {
            Error::State("no factors accumulated; update factors before decomposing".into())
        })?;
        self.a_eig = Some(factor_eig(a)?);
        self.g_eig = Some(factor_eig(g)?);
        Ok(())
    }

    /// Precondition through the cached eigendecompositions:
    /// rotate into the eigenbasis, divide by the damped eigenvalue products,
    /// rotate back. No explicit inverse is formed.
    pub fn precondition_eigen(&self, grad: &Matrix, gamma: f64) -> Result<Matrix> {
        let (a_eig, g_eig) = match (&self.a_eig, &self.g_eig) {
            (Some(a), Some(g)) => (a, g),
            _ => {
                return Err(Error::State(
                    "decompositions not computed for this layer".into(),
                ))
            }
        };
        if gamma < 0.0 {
            return Err(Error::Value(format!("damping must be >= 0, got {gamma}")));
        }
        if grad.rows() != g_eig.dim() || grad.cols() != a_eig.dim() {
            return Err(Error::Dimension(format!(
                "gradient {}x{} does not match factor dims {}x{}",
                grad.rows(),
                grad.cols(),
                g_eig.dim(),
                a_eig.dim()
            )));
        }
        let v1 = g_eig.q.transpose().matmul(grad)?.matmul(&a_eig.q)?;
        let mut v2 = v1;
        for i in 0..v2.rows() {
            for j in 0..v2.cols() {
                let denom = (g_eig.lambda[i] * a_eig.lambda[j] + gamma).max(DENOM_FLOOR);
                v2[(i, j)] /= denom;
            }
        }
        g_eig.q.matmul(&v2)?.matmul(&a_eig.q.transpose())
    }

    /// Precondition through explicitly damped factor inverses:
    /// `(G + γI)⁻¹ · grad · (A + γI)⁻¹`.
    pub fn precondition_factored_inverse(&self, grad: &Matrix, gamma: f64) -> Result<Matrix> {
        let (a, g) = match (&self.a_factor, &self.g_factor) {
            (Some(a), Some(g)) => (a, g),
            _ => return Err(Error::State("no factors accumulated for this layer".into())),
        };
        if gamma < 0.0 {
            return Err(Error::Value(format!("damping must be >= 0, got {gamma}")));
        }
        if grad.rows() != g.rows() || grad.cols() != a.rows() {
            return Err(Error::Dimension(format!(
                "gradient {}x{} does not match factor dims {}x{}",
                grad.rows(),
                grad.cols(),
                g.rows(),
                a.rows()
            )));
        }
        let g_inv = crate::linalg::inverse(&g.add_scaled_identity(gamma)?)?;
        let a_inv = crate::linalg::inverse(&a.add_scaled_identity(gamma)?)?;
        g_inv.matmul(grad)?.matmul(&a_inv)
    }
}

/// Per-batch covariance estimates for one layer: `A = a_prevᵀ·a_prev / rows`
/// and `G = g_outᵀ·g_out / rows`. For conv layers the rows are sample-position
/// pairs, so the division already folds in the spatial average.
pub fn batch_factors(capture: &LayerCapture) -> Result<(Matrix, Matrix)> {
    let g_out = capture.g_out.as_ref().ok_or_else(|| {
        Error::State("capture has no output gradients; run backward first".into())
    })?;
    if capture.a_prev.rows() != g_out.rows() {
        return Err(Error::Dimension(format!(
            "capture row mismatch: a_prev {} vs g_out {}",
            capture.a_prev.rows(),
            g_out.rows()
        )));
    }
    let rows = capture.a_prev.rows() as f64;
    let a_batch = capture.a_prev.gram().scale(1.0 / rows);
    let g_batch = g_out.gram().scale(1.0 / rows);
    Ok((a_batch, g_batch))
}

/// Running-average step with the first-call rule.
fn blend(prev: Option<Matrix>, batch: Matrix, xi: f64) -> Result<Matrix> {
    let mixed = match prev {
        None => batch,
        Some(p) => {
            if p.rows() != batch.rows() {
                return Err(Error::Dimension(format!(
                    "factor dimension changed from {} to {}",
                    p.rows(),
                    batch.rows()
                )));
            }
            batch.scale(xi).add(&p.scale(1.0 - xi))?
        }
    };
    // Gram matrices are symmetric by construction; re-symmetrize anyway so
    // accumulated rounding can never drift past the symmetry tolerance.
    mixed.symmetrized()
}

/// Eigendecomposition of a covariance factor, with negative eigenvalues
/// clamped to zero. Factors are PSD in exact arithmetic; any negative
/// eigenvalue is numerical noise and must not reach a denominator.
pub fn factor_eig(factor: &Matrix) -> Result<SymEig> {
    let mut eig = sym_eig(factor)?;
    eig.clamp_psd();
    Ok(eig)
}

/// Scale preconditioned gradients in place by
/// `ν = min(1, sqrt(κ / (α² · Σ_i |sum(𝒢_i ⊙ ∇L_i)|)))` and return ν.
/// A zero denominator leaves the gradients untouched (ν = 1).
pub fn scale_grads(
    preconditioned: &mut [Matrix],
    raw_grads: &[Matrix],
    alpha: f64,
    kappa: f64,
) -> Result<f64> {
    if preconditioned.len() != raw_grads.len() {
        return Err(Error::Dimension(format!(
            "{} preconditioned gradients vs {} raw gradients",
            preconditioned.len(),
            raw_grads.len()
        )));
    }
    if !(alpha > 0.0) || !(kappa > 0.0) {
        return Err(Error::Value(format!(
            "scale_grads needs positive alpha and kappa, got {alpha} and {kappa}"
        )));
    }
    let mut total = 0.0;
    for (p, r) in preconditioned.iter().zip(raw_grads) {
        total += p.dot(r)?.abs();
    }
    let denom = alpha * alpha * total;
    let nu = if denom == 0.0 { 1.0 } else { (kappa / denom).sqrt().min(1.0) };
    if nu != 1.0 {
        for p in preconditioned.iter_mut() {
            p.scale_in_place(nu);
        }
    }
    Ok(nu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{inverse, kron, unvec_rows, vec_rows};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        random_matrix(rng, n, n).gram().add_scaled_identity(0.1).unwrap()
    }

    fn capture_from(a_prev: Matrix, g_out: Matrix) -> LayerCapture {
        LayerCapture { layer_id: 0, a_prev, g_out: Some(g_out), grad: None }
    }

    fn state_with_factors(a: Matrix, g: Matrix) -> LayerKfacState {
        let mut st = LayerKfacState::new(0);
        st.a_factor = Some(a);
        st.g_factor = Some(g);
        st
    }

    /// Dense route: invert the damped Kronecker curvature and apply it to the
    /// vectorized gradient. Under row-major vec, the sandwich G⁻¹ V A⁻¹
    /// vectorizes with the output-side factor on the left of the product.
    fn dense_product_damped(a: &Matrix, g: &Matrix, grad: &Matrix, gamma: f64) -> Matrix {
        let big = kron(g, a).unwrap().add_scaled_identity(gamma).unwrap();
        let solved = inverse(&big).unwrap().matmul(&vec_rows(grad)).unwrap();
        unvec_rows(&solved, grad.rows(), grad.cols()).unwrap()
    }

    /// Dense route for per-factor damping: Kronecker of the damped inverses.
    fn dense_factor_damped(a: &Matrix, g: &Matrix, grad: &Matrix, gamma: f64) -> Matrix {
        let gi = inverse(&g.add_scaled_identity(gamma).unwrap()).unwrap();
        let ai = inverse(&a.add_scaled_identity(gamma).unwrap()).unwrap();
        let solved = kron(&gi, &ai).unwrap().matmul(&vec_rows(grad)).unwrap();
        unvec_rows(&solved, grad.rows(), grad.cols()).unwrap()
    }

    #[test]
    fn first_update_takes_batch_estimate_directly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a_prev = random_matrix(&mut rng, 6, 4);
        let g_out = random_matrix(&mut rng, 6, 3);
        let expect_a = a_prev.gram().scale(1.0 / 6.0);
        let expect_g = g_out.gram().scale(1.0 / 6.0);
        let mut st = LayerKfacState::new(0);
        st.update_factors(&capture_from(a_prev, g_out), 0.95).unwrap();
        assert_eq!(st.a_factor.as_ref().unwrap().as_slice(), expect_a.as_slice());
        assert_eq!(st.g_factor.as_ref().unwrap().as_slice(), expect_g.as_slice());
    }

    #[test]
    fn xi_one_replaces_factor_with_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut st = LayerKfacState::new(0);
        st.update_factors(
            &capture_from(random_matrix(&mut rng, 5, 4), random_matrix(&mut rng, 5, 3)),
            1.0,
        )
        .unwrap();
        let a_prev = random_matrix(&mut rng, 5, 4);
        let g_out = random_matrix(&mut rng, 5, 3);
        let expect = a_prev.gram().scale(1.0 / 5.0);
        st.update_factors(&capture_from(a_prev, g_out), 1.0).unwrap();
        let got = st.a_factor.as_ref().unwrap();
        assert!(got.sub(&expect).unwrap().max_abs() <= 1e-15);
    }

    #[test]
    fn constant_captures_converge_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xi = 0.95;
        let first_a = random_matrix(&mut rng, 6, 4);
        let first_g = random_matrix(&mut rng, 6, 3);
        let steady_a = random_matrix(&mut rng, 6, 4);
        let steady_g = random_matrix(&mut rng, 6, 3);
        let steady_batch = steady_a.gram().scale(1.0 / 6.0);
        let mut st = LayerKfacState::new(0);
        st.update_factors(&capture_from(first_a.clone(), first_g.clone()), xi).unwrap();
        let initial_gap = st
            .a_factor
            .as_ref()
            .unwrap()
            .sub(&steady_batch)
            .unwrap()
            .max_abs();
        let k = 20;
        for _ in 0..k {
            st.update_factors(&capture_from(steady_a.clone(), steady_g.clone()), xi).unwrap();
        }
        let gap = st
            .a_factor
            .as_ref()
            .unwrap()
            .sub(&steady_batch)
            .unwrap()
            .max_abs();
        let bound = (1.0 - xi).powi(k) * initial_gap;
        assert!(gap <= bound * (1.0 + 1e-9) + 1e-15, "gap {gap} > bound {bound}");
    }

    #[test]
    fn factors_stay_symmetric_across_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut st = LayerKfacState::new(0);
        for _ in 0..10 {
            st.update_factors(
                &capture_from(random_matrix(&mut rng, 7, 5), random_matrix(&mut rng, 7, 4)),
                0.95,
            )
            .unwrap();
            assert!(st.a_factor.as_ref().unwrap().asymmetry() <= 1e-12);
            assert!(st.g_factor.as_ref().unwrap().asymmetry() <= 1e-12);
        }
    }

    #[test]
    fn identity_factors_scale_by_damped_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut st = state_with_factors(Matrix::identity(4), Matrix::identity(3));
        st.decompose().unwrap();
        let grad = random_matrix(&mut rng, 3, 4);
        let gamma = 0.25;
        let out = st.precondition_eigen(&grad, gamma).unwrap();
        let expect = grad.scale(1.0 / (1.0 + gamma));
        assert!(out.sub(&expect).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn identity_factors_and_zero_damping_are_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut st = state_with_factors(Matrix::identity(4), Matrix::identity(3));
        st.decompose().unwrap();
        let grad = random_matrix(&mut rng, 3, 4);
        let out = st.precondition_eigen(&grad, 0.0).unwrap();
        assert_eq!(out.as_slice(), grad.as_slice());
    }

    #[test]
    fn eigen_path_matches_dense_kronecker_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for gamma in [0.0, 1e-3, 1.0] {
            let a = random_spd(&mut rng, 4);
            let g = random_spd(&mut rng, 3);
            let grad = random_matrix(&mut rng, 3, 4);
            let mut st = state_with_factors(a.clone(), g.clone());
            st.decompose().unwrap();
            let fast = st.precondition_eigen(&grad, gamma).unwrap();
            let dense = dense_product_damped(&a, &g, &grad, gamma);
            let err = fast.sub(&dense).unwrap().max_abs();
            assert!(err <= 1e-8, "gamma {gamma}: error {err}");
        }
    }

    #[test]
    fn huge_damping_reduces_to_scaled_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut st = state_with_factors(random_spd(&mut rng, 4), random_spd(&mut rng, 3));
        st.decompose().unwrap();
        let grad = random_matrix(&mut rng, 3, 4);
        let gamma = 1e12;
        let out = st.precondition_eigen(&grad, gamma).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let expect = grad.get(i, j) / gamma;
                let rel = (out.get(i, j) - expect).abs() / expect.abs().max(1e-300);
                assert!(rel <= 1e-6, "({i},{j}): rel {rel}");
            }
        }
    }

    #[test]
    fn zero_factors_give_pure_damping_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let st = state_with_factors(Matrix::zeros(4, 4), Matrix::zeros(3, 3));
        let grad = random_matrix(&mut rng, 3, 4);
        let gamma = 0.5;
        let out = st.precondition_factored_inverse(&grad, gamma).unwrap();
        let expect = grad.scale(1.0 / (gamma * gamma));
        assert!(out.sub(&expect).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn factored_inverse_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for gamma in [0.0, 1e-3, 1.0] {
            let a = random_spd(&mut rng, 4);
            let g = random_spd(&mut rng, 3);
            let grad = random_matrix(&mut rng, 3, 4);
            let st = state_with_factors(a.clone(), g.clone());
            let fast = st.precondition_factored_inverse(&grad, gamma).unwrap();
            let dense = dense_factor_damped(&a, &g, &grad, gamma);
            let err = fast.sub(&dense).unwrap().max_abs();
            assert!(err <= 1e-8, "gamma {gamma}: error {err}");
        }
    }

    #[test]
    fn paths_agree_without_damping_and_differ_with_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_spd(&mut rng, 4);
        let g = random_spd(&mut rng, 3);
        let grad = random_matrix(&mut rng, 3, 4);
        let mut st = state_with_factors(a, g);
        st.decompose().unwrap();
        let eig0 = st.precondition_eigen(&grad, 0.0).unwrap();
        let inv0 = st.precondition_factored_inverse(&grad, 0.0).unwrap();
        assert!(eig0.sub(&inv0).unwrap().max_abs() <= 1e-6);

        // With damping, eigenvalue-product damping and per-factor damping are
        // different operators.
        let eig1 = st.precondition_eigen(&grad, 1e-3).unwrap();
        let inv1 = st.precondition_factored_inverse(&grad, 1e-3).unwrap();
        assert!(eig1.sub(&inv1).unwrap().max_abs() > 1e-12);
    }

    #[test]
    fn preconditioning_without_decomposition_is_a_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let st = state_with_factors(random_spd(&mut rng, 4), random_spd(&mut rng, 3));
        let grad = random_matrix(&mut rng, 3, 4);
        assert!(matches!(
            st.precondition_eigen(&grad, 0.001),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn nu_closed_form_half() {
        let mut precond = vec![Matrix::from_rows(&[&[1.0]]).unwrap()];
        let raw = vec![Matrix::from_rows(&[&[1.0]]).unwrap()];
        let nu = scale_grads(&mut precond, &raw, 1.0, 0.25).unwrap();
        assert_eq!(nu, 0.5);
        assert_eq!(precond[0].get(0, 0), 0.5);
    }

    #[test]
    fn nu_is_one_when_clip_inactive_or_denominator_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = random_matrix(&mut rng, 2, 3);
        let mut precond = vec![g.clone()];
        let raw = vec![g.clone()];
        let nu = scale_grads(&mut precond, &raw, 1.0, 1e12).unwrap();
        assert_eq!(nu, 1.0);
        assert_eq!(precond[0].as_slice(), g.as_slice());

        let mut zero = vec![Matrix::zeros(2, 3)];
        let zraw = vec![Matrix::zeros(2, 3)];
        let nu = scale_grads(&mut zero, &zraw, 1.0, 1e-6).unwrap();
        assert_eq!(nu, 1.0);
    }

    // ν is derived from a quadratic trust bound: the update's curvature
    // proxy α²·Σ|𝒢ᵀ∇L| scales with ν² once both the step and its matching
    // gradient response shrink, so after scaling ν²·denominator = κ exactly
    // (when the clip is active).
    #[test]
    fn active_clip_lands_on_the_trust_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let alpha = 0.3;
        let kappa = 1e-3;
        let mut precond: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 3, 4)).collect();
        let raw: Vec<Matrix> = precond.iter().map(|p| p.scale(1.7)).collect();
        let denom: f64 = alpha * alpha
            * precond
                .iter()
                .zip(&raw)
                .map(|(p, r)| p.dot(r).unwrap().abs())
                .sum::<f64>();
        assert!(denom > kappa, "test setup must activate the clip");
        let nu = scale_grads(&mut precond, &raw, alpha, kappa).unwrap();
        assert!(nu > 0.0 && nu < 1.0);
        assert!((nu * nu * denom - kappa).abs() <= 1e-12 * kappa.max(denom));
    }

    #[test]
    fn scaling_preserves_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let orig = random_matrix(&mut rng, 2, 2);
        let mut precond = vec![orig.clone()];
        let raw = vec![orig.scale(100.0)];
        let nu = scale_grads(&mut precond, &raw, 1.0, 1e-6).unwrap();
        assert!(nu > 0.0 && nu <= 1.0);
        let back = precond[0].scale(1.0 / nu);
        assert!(back.sub(&orig).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn schedules_identity_without_milestones() {
        let config = KfacConfig { decomp_interval: 500, ..Default::default() };
        for epoch in [0, 10, 100] {
            let eff = apply_schedules(&config, epoch);
            assert_eq!(eff.damping, 0.001);
            assert_eq!(eff.decomp_interval, 500);
            assert_eq!(eff.factor_interval, 50);
        }
    }

    #[test]
    fn damping_milestone_applies_once_at_epoch() {
        let config = KfacConfig {
            damping: 0.003,
            damping_decay: vec![(25, 1.0 / 3.0)],
            ..Default::default()
        };
        assert_eq!(apply_schedules(&config, 24).damping, 0.003);
        let at = apply_schedules(&config, 25).damping;
        assert!((at - 0.001).abs() <= 1e-15);
        let after = apply_schedules(&config, 40).damping;
        assert!((after - 0.001).abs() <= 1e-15);
    }

    #[test]
    fn interval_growth_and_derived_factor_interval() {
        let config = KfacConfig {
            decomp_interval: 10,
            interval_decay: vec![(5, 2.0), (8, 5.0)],
            ..Default::default()
        };
        assert_eq!(
            apply_schedules(&config, 0),
            EffectiveHyper { damping: 0.001, decomp_interval: 10, factor_interval: 1 }
        );
        assert_eq!(apply_schedules(&config, 5).decomp_interval, 20);
        assert_eq!(apply_schedules(&config, 5).factor_interval, 2);
        assert_eq!(apply_schedules(&config, 8).decomp_interval, 100);
        assert_eq!(apply_schedules(&config, 8).factor_interval, 10);
    }

    #[test]
    fn explicit_factor_interval_overrides_derivation() {
        let config = KfacConfig {
            decomp_interval: 100,
            factor_interval: Some(3),
            ..Default::default()
        };
        assert_eq!(apply_schedules(&config, 0).factor_interval, 3);
        // Clamped to the effective decomposition interval if that shrinks
        // below the explicit setting.
        let tight = KfacConfig {
            decomp_interval: 2,
            factor_interval: Some(2),
            ..Default::default()
        };
        assert_eq!(apply_schedules(&tight, 0).factor_interval, 2);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let bad_damping = KfacConfig { damping: 0.0, ..Default::default() };
        assert!(bad_damping.validate().is_err());
        let bad_xi = KfacConfig { running_avg: 0.5, ..Default::default() };
        assert!(bad_xi.validate().is_err());
        let bad_factor = KfacConfig {
            decomp_interval: 5,
            factor_interval: Some(6),
            ..Default::default()
        };
        assert!(bad_factor.validate().is_err());
        let bad_decay = KfacConfig {
            damping_decay: vec![(10, 1.5)],
            ..Default::default()
        };
        assert!(bad_decay.validate().is_err());
        let bad_growth = KfacConfig {
            interval_decay: vec![(10, 0.5)],
            ..Default::default()
        };
        assert!(bad_growth.validate().is_err());
        assert!(KfacConfig::default().validate().is_ok());
    }

    #[test]
    fn update_requires_backward_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut st = LayerKfacState::new(0);
        let cap = LayerCapture {
            layer_id: 0,
            a_prev: random_matrix(&mut rng, 4, 3),
            g_out: None,
            grad: None,
        };
        assert!(matches!(st.update_factors(&cap, 0.95), Err(Error::State(_))));
    }
}
