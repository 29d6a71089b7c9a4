//! Vector AMP in the stacked real formulation.
//!
//! Each iteration runs an LMMSE stage followed by a soft-threshold shrinkage
//! stage, with extrinsic corrections between them:
//!
//! ```text
//! x~_t = lmmse(r~_t; s~_t, sigma_w_t)     v~_t = <d x~_t / d r~_t>
//! r_t  = (x~_t - v~_t r~_t) / (1 - v~_t)  s_t^2 = s~_t^2 v~_t / (1 - v~_t)
//! x^_t = eta_st(r_t; theta_t s_t)         v_t  = <eta_st'>
//! r~_{t+1} = (x^_t - v_t r_t) / (1 - v_t) s~_{t+1}^2 = s_t^2 v_t / (1 - v_t)
//! ```
//!
//! The LMMSE solve goes through a spectral factorization of `A_RI` computed
//! once per model, so an iteration costs two `2N x k` matrix-vector products.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::ObservationModel;

/// `A_RI = U diag(s) V^T`, restricted to singular values above a relative
/// floor.
#[derive(Clone, Debug)]
pub struct LmmseFactor {
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    s: DVector<f64>,
    s2: DVector<f64>,
    dim: usize,
}

impl LmmseFactor {
    pub fn new(a_ri: &DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = a_ri.shape();
        let gram = a_ri * a_ri.transpose();
        let eig = SymmetricEigen::try_new(gram, 1e-14, 10_000)
            .ok_or_else(|| Error::NumericalFailure("eigendecomposition of A A^T did not converge".into()))?;

        let lam_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        if !(lam_max > 0.0) {
            return Err(Error::NumericalFailure("observation matrix is zero".into()));
        }
        let mut order: Vec<usize> = (0..rows).filter(|&i| eig.eigenvalues[i] > 1e-12 * lam_max).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));

        let k = order.len();
        let s = DVector::from_iterator(k, order.iter().map(|&i| eig.eigenvalues[i].sqrt()));
        let u = DMatrix::from_fn(rows, k, |r, c| eig.eigenvectors[(r, order[c])]);
        let mut v = a_ri.tr_mul(&u);
        for (c, mut col) in v.column_iter_mut().enumerate() {
            col.unscale_mut(s[c]);
        }
        debug_assert_eq!(v.nrows(), cols);
        Ok(LmmseFactor {
            s2: s.map(|x| x * x),
            u,
            v,
            s,
            dim: cols,
        })
    }

    /// Number of retained singular values.
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.s
    }

    /// `U^T y`, the only measurement-dependent quantity the LMMSE needs.
    pub fn project(&self, y_ri: &DVector<f64>) -> Result<DVector<f64>> {
        if y_ri.len() != self.u.nrows() {
            return Err(Error::dims(format!(
                "measurement has length {}, expected {}",
                y_ri.len(),
                self.u.nrows()
            )));
        }
        Ok(self.u.tr_mul(y_ri))
    }

    /// LMMSE estimate and the unclamped average divergence.
    ///
    /// `x~ = (g_w A^T A + g I)^{-1} (g_w A^T y + g r~)` with `g = 1/s~^2`,
    /// `g_w = 1/sigma_w^2`, and `v~ = g/(2N) tr((g_w A^T A + g I)^{-1})`.
    pub fn denoise(
        &self,
        uty: &DVector<f64>,
        r_tilde: &DVector<f64>,
        sigma2_tilde: f64,
        sigma_w: f64,
    ) -> (DVector<f64>, f64) {
        let g = 1.0 / sigma2_tilde;
        let gw = 1.0 / (sigma_w * sigma_w);
        let c = self.v.tr_mul(r_tilde);
        let coef = DVector::from_fn(self.rank(), |i, _| {
            gw * self.s[i] * (uty[i] - self.s[i] * c[i]) / (gw * self.s2[i] + g)
        });
        let mut x = r_tilde.clone();
        x.gemv(1.0, &self.v, &coef, 1.0);

        let in_range: f64 = self.s2.iter().map(|&s2| g / (gw * s2 + g)).sum();
        let v = (in_range + (self.dim - self.rank()) as f64) / self.dim as f64;
        (x, v)
    }
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("{name} must be positive and finite, got {x}")))
    }
}

/// `sgn(r) max(|r| - lambda, 0)` element-wise.
pub fn soft_threshold(r: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::param(format!("threshold must be non-negative, got {lambda}")));
    }
    Ok(r.map(|x| soft(x, lambda)))
}

#[inline]
pub(crate) fn soft(x: f64, lambda: f64) -> f64 {
    let m = x.abs() - lambda;
    if m > 0.0 {
        m.copysign(x)
    } else {
        0.0
    }
}

/// Soft thresholding at `theta * sigma` and its unclamped average
/// derivative, i.e. the fraction of entries strictly above the threshold.
pub fn shrink(r: &DVector<f64>, sigma: f64, theta: f64) -> Result<(DVector<f64>, f64)> {
    check_positive("sigma", sigma)?;
    check_positive("theta", theta)?;
    let lambda = theta * sigma;
    let x = r.map(|x| soft(x, lambda));
    let above = r.iter().filter(|x| x.abs() > lambda).count();
    Ok((x, above as f64 / r.len().max(1) as f64))
}

/// Output of the LMMSE stage.
#[derive(Clone, Debug)]
pub struct LmmseOutput {
    pub x_tilde: DVector<f64>,
    /// Average Jacobian diagonal before clamping.
    pub v_tilde_raw: f64,
}

impl LmmseOutput {
    pub fn v_tilde(&self, eps: f64) -> f64 {
        clamp_divergence(self.v_tilde_raw, eps)
    }
}

pub fn lmmse_denoise(
    r_tilde: &DVector<f64>,
    sigma_tilde: f64,
    sigma_w: f64,
    model: &ObservationModel,
    y_ri: &DVector<f64>,
) -> Result<LmmseOutput> {
    check_positive("sigma_tilde", sigma_tilde)?;
    check_positive("sigma_w", sigma_w)?;
    if r_tilde.len() != 2 * model.n() {
        return Err(Error::dims(format!(
            "r~ has length {}, expected {}",
            r_tilde.len(),
            2 * model.n()
        )));
    }
    let factor = model.lmmse_factor()?;
    let uty = factor.project(y_ri)?;
    let (x_tilde, v_tilde_raw) = factor.denoise(&uty, r_tilde, sigma_tilde * sigma_tilde, sigma_w);
    Ok(LmmseOutput { x_tilde, v_tilde_raw })
}

pub fn clamp_divergence(v: f64, eps: f64) -> f64 {
    v.clamp(eps, 1.0 - eps)
}

/// `r' = (x - v r)/(1 - v)` and `sigma2' = sigma2 v/(1 - v)`.
///
/// `v` must already be clamped into the open unit interval.
pub fn extrinsic_update(x: &DVector<f64>, v: f64, r: &DVector<f64>, sigma2: f64) -> Result<(DVector<f64>, f64)> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::param(format!(
            "divergence {v} outside (0, 1); clamp before the extrinsic update"
        )));
    }
    if x.len() != r.len() {
        return Err(Error::dims(format!("length mismatch {} vs {}", x.len(), r.len())));
    }
    let scale = 1.0 / (1.0 - v);
    let r_next = x.zip_map(r, |a, b| (a - v * b) * scale);
    Ok((r_next, sigma2 * v * scale))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VampLayerParams {
    pub sigma_w: f64,
    pub theta: f64,
}

impl VampLayerParams {
    pub fn new(sigma_w: f64, theta: f64) -> Result<Self> {
        let p = VampLayerParams { sigma_w, theta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_positive("sigma_w", self.sigma_w)?;
        check_positive("theta", self.theta)
    }
}

#[derive(Clone, Debug)]
pub struct VampConfig {
    pub layers: usize,
    /// Initial `r~_1`; defaults to `A_RI^T y_RI`.
    pub r1_init: Option<DVector<f64>>,
    /// Initial `s~_1` (a standard deviation); defaults to
    /// `sqrt(max(var(y_RI), 1e-6))`.
    pub sigma1_init: Option<f64>,
    pub v_clamp_eps: f64,
    /// Stop once `|x^_t - x^_{t-1}| <= tol |x^_{t-1}|`.
    pub early_stop_tol: Option<f64>,
}

impl VampConfig {
    pub fn new(layers: usize) -> Self {
        VampConfig {
            layers,
            r1_init: None,
            sigma1_init: None,
            v_clamp_eps: 1e-6,
            early_stop_tol: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::param("VAMP needs at least one layer"));
        }
        if !(self.v_clamp_eps > 0.0 && self.v_clamp_eps < 0.5) {
            return Err(Error::param(format!(
                "v_clamp_eps must lie in (0, 0.5), got {}",
                self.v_clamp_eps
            )));
        }
        if let Some(s) = self.sigma1_init {
            check_positive("sigma1_init", s)?;
        }
        if let Some(tol) = self.early_stop_tol {
            check_positive("early_stop_tol", tol)?;
        }
        Ok(())
    }
}

/// Per-iteration scalars. `*_raw` are the divergences before clamping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationTrace {
    pub v: f64,
    pub v_raw: f64,
    pub v_tilde: f64,
    pub v_tilde_raw: f64,
    pub sigma2: f64,
    pub sigma2_tilde: f64,
}

#[derive(Clone, Debug)]
pub struct VampOutput {
    pub x_hat_ri: DVector<f64>,
    pub r_ri: DVector<f64>,
    /// `s~_T^2 v~_T / (1 - v~_T)`, the variance VAMP itself attributes to `r`.
    pub sigma2_vamp: f64,
    pub trace: Vec<IterationTrace>,
}

/// Input of one layer: `(r~_t, s~_t^2)`.
#[derive(Clone, Debug)]
pub struct LayerInput {
    pub r_tilde: DVector<f64>,
    pub sigma2_tilde: f64,
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub x_hat: DVector<f64>,
    pub r: DVector<f64>,
    pub sigma2: f64,
    pub next: LayerInput,
    pub trace: IterationTrace,
}

impl LayerInput {
    /// Initial state for a measurement under `config`.
    pub fn initial(model: &ObservationModel, y_ri: &DVector<f64>, config: &VampConfig) -> Result<Self> {
        if y_ri.len() != 2 * model.m() {
            return Err(Error::dims(format!(
                "y_RI has length {}, expected {}",
                y_ri.len(),
                2 * model.m()
            )));
        }
        let r_tilde = match &config.r1_init {
            Some(r) if r.len() == 2 * model.n() => r.clone(),
            Some(r) => {
                return Err(Error::dims(format!(
                    "r1_init has length {}, expected {}",
                    r.len(),
                    2 * model.n()
                )))
            }
            None => model.a_ri().tr_mul(y_ri),
        };
        let sigma2_tilde = match config.sigma1_init {
            Some(s) => s * s,
            None => {
                let n = y_ri.len() as f64;
                let mean = y_ri.sum() / n;
                let var = y_ri.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
                var.max(1e-6)
            }
        };
        Ok(LayerInput { r_tilde, sigma2_tilde })
    }

    /// One VAMP iteration with the given layer parameters.
    pub fn step(
        &self,
        factor: &LmmseFactor,
        uty: &DVector<f64>,
        layer: &VampLayerParams,
        eps: f64,
    ) -> Result<LayerOutput> {
        let (x_tilde, v_tilde_raw) = factor.denoise(uty, &self.r_tilde, self.sigma2_tilde, layer.sigma_w);
        let v_tilde = clamp_divergence(v_tilde_raw, eps);
        let (r, sigma2) = extrinsic_update(&x_tilde, v_tilde, &self.r_tilde, self.sigma2_tilde)?;

        let (x_hat, v_raw) = shrink(&r, sigma2.sqrt(), layer.theta)?;
        let v = clamp_divergence(v_raw, eps);
        let (r_tilde, sigma2_tilde) = extrinsic_update(&x_hat, v, &r, sigma2)?;
        Ok(LayerOutput {
            trace: IterationTrace {
                v,
                v_raw,
                v_tilde,
                v_tilde_raw,
                sigma2,
                sigma2_tilde: self.sigma2_tilde,
            },
            x_hat,
            r,
            sigma2,
            next: LayerInput { r_tilde, sigma2_tilde },
        })
    }
}

pub fn run_vamp(
    y_ri: &DVector<f64>,
    model: &ObservationModel,
    layers: &[VampLayerParams],
    config: &VampConfig,
) -> Result<VampOutput> {
    config.validate()?;
    if layers.len() != config.layers {
        return Err(Error::param(format!(
            "{} layer parameter sets for a {}-layer network",
            layers.len(),
            config.layers
        )));
    }
    for l in layers {
        l.validate()?;
    }
    let factor = model.lmmse_factor()?;
    let uty = factor.project(y_ri)?;
    let mut input = LayerInput::initial(model, y_ri, config)?;

    let mut trace = Vec::with_capacity(layers.len());
    let mut last: Option<LayerOutput> = None;
    for layer in layers {
        let out = input.step(factor, &uty, layer, config.v_clamp_eps)?;
        trace.push(out.trace);
        let stop = match (config.early_stop_tol, &last) {
            (Some(tol), Some(prev)) => (&out.x_hat - &prev.x_hat).norm() <= tol * prev.x_hat.norm(),
            _ => false,
        };
        input = out.next.clone();
        last = Some(out);
        if stop {
            break;
        }
    }
    let last = last.expect("at least one layer");
    Ok(VampOutput {
        x_hat_ri: last.x_hat,
        r_ri: last.r,
        sigma2_vamp: last.sigma2,
        trace,
    })
}

/// `iteration,v,v_tilde,sigma2,sigma2_tilde`
pub fn write_trace_csv<W: Write>(w: &mut W, trace: &[IterationTrace]) -> Result<()> {
    writeln!(w, "iteration,v,v_tilde,sigma2,sigma2_tilde")?;
    for (i, t) in trace.iter().enumerate() {
        writeln!(w, "{},{},{},{},{}", i + 1, t.v, t.v_tilde, t.sigma2, t.sigma2_tilde)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::signal::{self, make_partial_fourier, ObservationModel, C64};
    use proptest::prelude::*;
    use rand::Rng as _;

    /// Dense Gaussian elimination with partial pivoting, kept independent
    /// of nalgebra's decompositions.
    fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        x
    }

    /// `(g_w A^T A + g I)^{-1} (g_w A^T y + g r)` by explicit normal equations.
    fn dense_lmmse(a: &DMatrix<f64>, y: &DVector<f64>, r: &DVector<f64>, s2t: f64, sw: f64) -> DVector<f64> {
        let n = a.ncols();
        let (g, gw) = (1.0 / s2t, 1.0 / (sw * sw));
        let mut h = vec![vec![0.0; n]; n];
        let mut rhs = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..a.nrows() {
                    acc += a[(k, i)] * a[(k, j)];
                }
                h[i][j] = gw * acc + if i == j { g } else { 0.0 };
            }
            let aty: f64 = (0..a.nrows()).map(|k| a[(k, i)] * y[k]).sum();
            rhs[i] = gw * aty + g * r[i];
        }
        DVector::from_vec(gauss_solve(h, rhs))
    }

    fn random_model(m: usize, n: usize, seed: u64) -> ObservationModel {
        let mut r = rng::seeded(seed);
        let a = DMatrix::from_fn(m, n, |_, _| {
            C64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))
        });
        ObservationModel::custom(a).unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> DVector<f64> {
        let mut r = rng::seeded(seed);
        DVector::from_fn(n, |_, _| r.random_range(-2.0..2.0))
    }

    #[test]
    fn soft_threshold_cases() {
        let r = DVector::from_vec(vec![2.0, -0.3, -2.0, 0.5]);
        let out = soft_threshold(&r, 0.5).unwrap();
        assert_eq!(out.as_slice(), &[1.5, 0.0, -1.5, 0.0]);
        assert_eq!(soft_threshold(&r, 0.0).unwrap(), r);
        assert!(matches!(soft_threshold(&r, -0.1), Err(Error::InvalidParameter(_))));
    }

    proptest! {
        #[test]
        fn soft_threshold_is_non_expansive(a in -10.0..10.0f64, b in -10.0..10.0f64, lam in 0.0..5.0f64) {
            prop_assert!((soft(a, lam) - soft(b, lam)).abs() <= (a - b).abs() + 1e-15);
        }
    }

    #[test]
    fn shrink_divergence_counts() {
        let r = DVector::from_vec(vec![0.1, -0.2, 0.05, 0.0]);
        let (x, v) = shrink(&r, 1.0, 0.5).unwrap();
        assert_eq!(v, 0.0);
        assert!(x.iter().all(|&x| x == 0.0));

        let r = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(shrink(&r, 1.0, 0.5).unwrap().1, 1.0);

        let r = DVector::from_vec(vec![1.0, -2.0, 0.1, -0.2]);
        assert_eq!(shrink(&r, 1.0, 0.5).unwrap().1, 0.5);

        assert!(shrink(&r, 0.0, 1.0).is_err());
        assert!(shrink(&r, 1.0, -1.0).is_err());
    }

    #[test]
    fn shrink_divergence_matches_finite_differences() {
        let r = random_vec(400, 3);
        let (sigma, theta) = (0.7, 1.3);
        let lambda = sigma * theta;
        let (_, v) = shrink(&r, sigma, theta).unwrap();
        let h = 1e-6;
        let mut acc = 0.0;
        for &x in r.iter() {
            assert!((x.abs() - lambda).abs() > 10.0 * h, "too close to a kink");
            acc += (soft(x + h, lambda) - soft(x - h, lambda)) / (2.0 * h);
        }
        assert!((acc / r.len() as f64 - v).abs() < 1e-6);
    }

    #[test]
    fn lmmse_orthonormal_is_scalar_blend() {
        let model = make_partial_fourier(8, 8, 2).unwrap();
        let y = random_vec(16, 1);
        let r = random_vec(16, 2);
        let (st, sw) = (0.8f64, 0.3f64);
        let out = lmmse_denoise(&r, st, sw, &model, &y).unwrap();
        let (g, gw) = (1.0 / (st * st), 1.0 / (sw * sw));
        let aty = model.a_ri().tr_mul(&y);
        let want = (aty * gw + &r * g) / (gw + g);
        assert!((out.x_tilde - want).amax() < 1e-12);
        assert!((out.v_tilde_raw - g / (gw + g)).abs() < 1e-12);
    }

    #[test]
    fn lmmse_ignores_measurement_when_noise_is_huge() {
        let model = random_model(4, 6, 1);
        let y = random_vec(8, 1);
        let r = random_vec(12, 2);
        let out = lmmse_denoise(&r, 1.0, 1e9, &model, &y).unwrap();
        assert!((&out.x_tilde - &r).amax() < 1e-12);
        assert!((out.v_tilde_raw - 1.0).abs() < 1e-12);
        assert_eq!(out.v_tilde(1e-6), 1.0 - 1e-6);
    }

    #[test]
    fn lmmse_matches_dense_solve() {
        // 4x6 complex, i.e. an 8x12 real system.
        for seed in 0..4 {
            let model = random_model(4, 6, 10 + seed);
            let y = random_vec(8, 20 + seed);
            let r = random_vec(12, 30 + seed);
            let (st, sw) = (0.9, 0.4);
            let out = lmmse_denoise(&r, st, sw, &model, &y).unwrap();
            let want = dense_lmmse(model.a_ri(), &y, &r, st * st, sw);
            assert!((out.x_tilde - want).amax() < 1e-10);
        }
    }

    #[test]
    fn lmmse_divergence_matches_jacobian() {
        let model = random_model(3, 7, 4);
        let y = random_vec(6, 5);
        let r = random_vec(14, 6);
        let (st, sw) = (0.6, 0.5);
        let out = lmmse_denoise(&r, st, sw, &model, &y).unwrap();
        let h = 1e-5;
        let mut diag = 0.0;
        for i in 0..14 {
            let mut rp = r.clone();
            rp[i] += h;
            let mut rm = r.clone();
            rm[i] -= h;
            let fp = lmmse_denoise(&rp, st, sw, &model, &y).unwrap().x_tilde[i];
            let fm = lmmse_denoise(&rm, st, sw, &model, &y).unwrap().x_tilde[i];
            diag += (fp - fm) / (2.0 * h);
        }
        assert!((diag / 14.0 - out.v_tilde_raw).abs() < 1e-5);
    }

    #[test]
    fn extrinsic_update_cases() {
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let r = DVector::from_vec(vec![0.5, 0.5]);
        let (rn, s) = extrinsic_update(&x, 0.5, &r, 2.0).unwrap();
        assert_eq!(rn, &x * 2.0 - &r);
        assert_eq!(s, 2.0);

        let (rn, s) = extrinsic_update(&x, 1e-12, &r, 2.0).unwrap();
        assert!((rn - &x).amax() < 1e-11);
        assert!(s < 1e-11);

        let mut last = 0.0;
        for k in 1..20 {
            let v = k as f64 / 20.0;
            let (_, s) = extrinsic_update(&x, v, &r, 1.0).unwrap();
            assert!((s - v / (1.0 - v)).abs() < 1e-12);
            assert!(s > last);
            last = s;
        }
        assert!(extrinsic_update(&x, 0.0, &r, 1.0).is_err());
        assert!(extrinsic_update(&x, 1.0, &r, 1.0).is_err());
    }

    fn scene_for(model: &ObservationModel, rho: f64, snr: f64, seed: u64) -> (signal::Scene, signal::Measurement) {
        let p = signal::SceneParams {
            a_min: 1.0,
            a_max: 1.0,
            rho_min: rho,
            rho_max: rho,
            snr_min: snr,
            snr_max: snr,
            n: model.n(),
            snr_unit: signal::SnrUnit::Db,
        };
        let s = signal::generate_scene(&p, seed).unwrap();
        let m = signal::measure(model, &s, seed + 1).unwrap();
        (s, m)
    }

    #[test]
    fn over_thresholding_kills_everything() {
        let model = make_partial_fourier(20, 32, 1).unwrap();
        let (_, m) = scene_for(&model, 0.1, 13.0, 3);
        let layers = [VampLayerParams::new(1e6, 1e3).unwrap()];
        let out = run_vamp(&m.y_ri, &model, &layers, &VampConfig::new(1)).unwrap();
        assert!(out.x_hat_ri.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn noiseless_orthonormal_recovers_support() {
        let model = make_partial_fourier(32, 32, 1).unwrap();
        let (s, _) = scene_for(&model, 0.1, 13.0, 5);
        assert!(s.l0() > 0);
        let y = model.a_ri() * &s.x0_ri;
        let layers = vec![VampLayerParams::new(1e-3, 0.1).unwrap(); 3];
        let out = run_vamp(&y, &model, &layers, &VampConfig::new(3)).unwrap();
        let x = signal::to_complex_vec(out.x_hat_ri.as_slice()).unwrap();
        for &i in &s.support {
            assert!(x[i].norm() > 0.0, "cell {i} lost");
        }
    }

    #[test]
    fn run_is_deterministic_and_logs_variance() {
        let model = make_partial_fourier(40, 64, 9).unwrap();
        let (_, m) = scene_for(&model, 0.05, 13.0, 7);
        let layers: Vec<_> = (0..5)
            .map(|t| VampLayerParams::new(0.2 + 0.01 * t as f64, 1.2).unwrap())
            .collect();
        let cfg = VampConfig::new(5);
        let a = run_vamp(&m.y_ri, &model, &layers, &cfg).unwrap();
        let b = run_vamp(&m.y_ri, &model, &layers, &cfg).unwrap();
        assert_eq!(a.x_hat_ri, b.x_hat_ri);
        assert_eq!(a.r_ri, b.r_ri);
        assert_eq!(a.sigma2_vamp.to_bits(), b.sigma2_vamp.to_bits());

        let last = a.trace.last().unwrap();
        assert_eq!(a.sigma2_vamp, last.sigma2_tilde * last.v_tilde / (1.0 - last.v_tilde));
        assert!(a.sigma2_vamp > 0.0);
        assert_eq!(a.x_hat_ri.len(), 128);
        for t in &a.trace {
            assert!(t.v > 0.0 && t.v < 1.0 && t.v_tilde > 0.0 && t.v_tilde < 1.0);
        }

        assert!(run_vamp(&m.y_ri, &model, &layers[..4], &cfg).is_err());
    }

    #[test]
    fn factored_run_matches_dense_recomputation() {
        let model = random_model(6, 10, 3);
        let y = random_vec(12, 4);
        let layers: Vec<_> = (0..4)
            .map(|t| VampLayerParams::new(0.5, 0.6 + 0.1 * t as f64).unwrap())
            .collect();
        let cfg = VampConfig::new(4);
        let out = run_vamp(&y, &model, &layers, &cfg).unwrap();

        let a = model.a_ri();
        let mut r_t = a.tr_mul(&y);
        let mean = y.mean();
        let mut s2t = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).max(1e-6);
        let (mut x_hat, mut r) = (r_t.clone(), r_t.clone());
        for l in &layers {
            let x_t = dense_lmmse(a, &y, &r_t, s2t, l.sigma_w);
            // Divergence via the explicit inverse trace.
            let n = a.ncols();
            let h = a.transpose() * a / (l.sigma_w * l.sigma_w) + DMatrix::identity(n, n) / s2t;
            let vt = (h.try_inverse().unwrap().trace() / s2t / n as f64).clamp(1e-6, 1.0 - 1e-6);
            r = (&x_t - &r_t * vt) / (1.0 - vt);
            let s2 = s2t * vt / (1.0 - vt);
            let lam = l.theta * s2.sqrt();
            x_hat = r.map(|x| soft(x, lam));
            let v = (r.iter().filter(|x| x.abs() > lam).count() as f64 / n as f64).clamp(1e-6, 1.0 - 1e-6);
            r_t = (&x_hat - &r * v) / (1.0 - v);
            s2t = s2 * v / (1.0 - v);
        }
        assert!((out.x_hat_ri - x_hat).amax() <= 1e-10);
        assert!((out.r_ri - r).amax() <= 1e-10);
    }

    #[test]
    fn early_stop_truncates_trace() {
        let model = make_partial_fourier(32, 32, 1).unwrap();
        let (s, _) = scene_for(&model, 0.1, 13.0, 5);
        let y = model.a_ri() * &s.x0_ri;
        let layers = vec![VampLayerParams::new(1e-3, 0.1).unwrap(); 10];
        let mut cfg = VampConfig::new(10);
        cfg.early_stop_tol = Some(1e-3);
        let out = run_vamp(&y, &model, &layers, &cfg).unwrap();
        assert!(out.trace.len() < 10);
    }

    #[test]
    fn trace_csv_layout() {
        let t = IterationTrace {
            v: 0.1,
            v_raw: 0.1,
            v_tilde: 0.2,
            v_tilde_raw: 0.2,
            sigma2: 0.3,
            sigma2_tilde: 0.4,
        };
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[t]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iteration,v,v_tilde,sigma2,sigma2_tilde\n1,0.1,0.2,0.3,0.4\n"
        );
    }
}
