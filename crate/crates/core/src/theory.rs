//! Fixed-point analysis of the PCD variance iteration.
//!
//! With null amplitudes Rayleigh with per-coordinate variance `s2`, the
//! half second moment of the amplitudes kept below a threshold `T` is
//! `f(T)`, and one PCD step maps a variance estimate `x` to
//! `g(x) = f(sqrt(-2 x ln p0))`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::pcd::pfa_for_threshold;

pub fn f_of_t(t: f64, sigma2_true: f64) -> f64 {
    let e = (-t * t / (2.0 * sigma2_true)).exp();
    // s2 - e s2 - e t^2/2, with the first pair through expm1.
    -sigma2_true * (-t * t / (2.0 * sigma2_true)).exp_m1() - 0.5 * e * t * t
}

pub fn f_prime(t: f64, sigma2_true: f64) -> f64 {
    (-t * t / (2.0 * sigma2_true)).exp() * t.powi(3) / (2.0 * sigma2_true)
}

pub fn g_of_sigma2(sigma2: f64, sigma2_true: f64, pfa0: f64) -> f64 {
    let lp = pfa0.ln();
    let a = sigma2 * lp / sigma2_true;
    -sigma2_true * a.exp_m1() + a.exp() * sigma2 * lp
}

pub fn g_prime(sigma2: f64, sigma2_true: f64, pfa0: f64) -> f64 {
    let lp = pfa0.ln();
    pfa0.powf(sigma2 / sigma2_true) * sigma2 * lp * lp / sigma2_true
}

/// Closed-form linearised fixed point of `g`.
pub fn approx_fixed_point(sigma2_true: f64, pfa0: f64) -> f64 {
    sigma2_true * (1.0 - pfa0) / (1.0 - pfa0 * pfa0.ln())
}

#[derive(Clone, Debug)]
pub struct FixedPointStudy {
    pub sigma2_true: f64,
    pub pfa0: f64,
    /// Starts with the initial value.
    pub iterates: Vec<f64>,
    pub limit: f64,
    pub approx_limit: f64,
    /// `p0^(x1/s2) ln^2 p0`, an upper bound on `g'` along the iteration.
    pub contraction_bound: f64,
    pub converged: bool,
}

impl FixedPointStudy {
    /// `|x_{m+1} - limit| / |x_m - limit|` for each step whose distance to
    /// the limit is still resolvable.
    pub fn step_ratios(&self) -> Vec<Option<f64>> {
        let floor = 1e-13 * self.limit;
        self.iterates
            .windows(2)
            .map(|w| {
                let (a, b) = ((w[0] - self.limit).abs(), (w[1] - self.limit).abs());
                (a > floor && b > floor).then(|| b / a)
            })
            .collect()
    }

    /// `m,sigma2_iterate,step_ratio` rows followed by `#` summary lines.
    pub fn write_csv<W: Write>(&self, w: &mut W, window: Option<&PfaWindow>) -> Result<()> {
        writeln!(w, "m,sigma2_iterate,step_ratio")?;
        let ratios = self.step_ratios();
        for (m, x) in self.iterates.iter().enumerate() {
            let ratio = if m == 0 { None } else { ratios[m - 1] };
            match ratio {
                Some(r) => writeln!(w, "{m},{x},{r}")?,
                None => writeln!(w, "{m},{x},")?,
            }
        }
        writeln!(w, "# limit,{}", self.limit)?;
        writeln!(w, "# approx_limit,{}", self.approx_limit)?;
        writeln!(w, "# contraction_bound,{}", self.contraction_bound)?;
        writeln!(w, "# converged,{}", self.converged)?;
        if let Some(win) = window {
            let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "# pfa_min,{}", opt(win.pfa_min))?;
            writeln!(w, "# pfa_max1,{}", opt(win.pfa_max1))?;
            writeln!(w, "# pfa_max2,{}", opt(win.pfa_max2))?;
        }
        Ok(())
    }
}

fn check_inputs(sigma2_true: f64, pfa0: f64) -> Result<()> {
    if !(sigma2_true > 0.0 && sigma2_true.is_finite()) {
        return Err(Error::param(format!(
            "true variance must be positive, got {sigma2_true}"
        )));
    }
    if !(pfa0 > 0.0 && pfa0 < 1.0) {
        return Err(Error::param(format!("pfa0 must lie in (0, 1), got {pfa0}")));
    }
    Ok(())
}

/// Iterates `x <- g(x)` from `sigma2_init` until the relative step drops
/// below `tol`, checking the monotone bounded chain along the way.
pub fn iterate_fixed_point(
    sigma2_init: f64,
    sigma2_true: f64,
    pfa0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPointStudy> {
    check_inputs(sigma2_true, pfa0)?;
    if !(sigma2_init > 0.0 && sigma2_init < sigma2_true) {
        return Err(Error::param(format!(
            "initial variance must lie in (0, {sigma2_true}), got {sigma2_init}"
        )));
    }
    let mut iterates = vec![sigma2_init];
    let mut converged = false;
    let mut x = sigma2_init;
    for _ in 0..max_iter {
        let next = g_of_sigma2(x, sigma2_true, pfa0);
        if next < x || next >= sigma2_true {
            return Err(Error::TheoryViolation(format!(
                "iterate {next} after {x} breaks 0 < x_m <= x_m+1 < {sigma2_true}"
            )));
        }
        iterates.push(next);
        let done = (next - x).abs() < tol * x;
        x = next;
        if done {
            converged = true;
            break;
        }
    }
    let lp = pfa0.ln();
    Ok(FixedPointStudy {
        sigma2_true,
        pfa0,
        limit: x,
        approx_limit: approx_fixed_point(sigma2_true, pfa0),
        contraction_bound: pfa0.powf(sigma2_init / sigma2_true) * lp * lp,
        iterates,
        converged,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PfaWindow {
    pub pfa_min: Option<f64>,
    pub pfa_max2: Option<f64>,
    pub pfa_max1: Option<f64>,
    /// Why any entry is absent.
    pub notes: Vec<String>,
}

const BISECT_STEPS: usize = 200;

/// Bisection on `u` for a sign change of `h`, with `h(lo) < 0 < h(hi)` or
/// the reverse. Stops at 1e-12 relative interval width or after
/// `BISECT_STEPS` halvings.
fn bisect(mut lo: f64, mut hi: f64, h: impl Fn(f64) -> f64) -> Option<f64> {
    let (hl, hh) = (h(lo), h(hi));
    if !(hl.signum() != hh.signum()) || hl.is_nan() || hh.is_nan() {
        return None;
    }
    let rising = hl < 0.0;
    for _ in 0..BISECT_STEPS {
        let mid = 0.5 * (lo + hi);
        if (hi - lo).abs() <= 1e-12 * mid.abs().max(1e-300) {
            break;
        }
        if (h(mid) < 0.0) == rising {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Largest `pfa0` keeping `g` a contraction from the first estimate:
/// the root of `p^a ln^2 p = 1` below `exp(-2/a)`, `a = x1/s2`.
pub fn pfa_max2(sigma2_hat_1: f64, sigma2_true: f64) -> Result<Option<f64>> {
    check_inputs(sigma2_true, 0.5)?;
    let a = sigma2_hat_1 / sigma2_true;
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::param(format!(
            "first estimate ratio must lie in (0, 1), got {a}"
        )));
    }
    // Work in u = ln p; p^a ln^2 p peaks at u = -2/a with value 4/(a e)^2.
    let phi = |u: f64| (a * u).exp() * u * u - 1.0;
    let peak = -2.0 / a;
    if phi(peak) < 0.0 {
        return Ok(None);
    }
    let mut lo = 2.0 * peak;
    while phi(lo) >= 0.0 {
        lo *= 2.0;
        if lo < -1e6 {
            return Ok(None);
        }
    }
    Ok(bisect(lo, peak, phi).map(f64::exp))
}

/// `pfa0` at which the first iteration's threshold reproduces the first
/// estimate, `x1 = f(sqrt(-2 x1 ln p))`.
pub fn pfa_max1(sigma2_hat_1: f64, sigma2_true: f64) -> Result<Option<f64>> {
    check_inputs(sigma2_true, 0.5)?;
    if !(sigma2_hat_1 > 0.0 && sigma2_hat_1 < sigma2_true) {
        return Err(Error::param(format!(
            "first estimate must lie in (0, {sigma2_true}), got {sigma2_hat_1}"
        )));
    }
    // Decreasing in u = ln p: f -> s2 > x1 as u -> -inf and f -> 0 at u = 0.
    let h = |u: f64| f_of_t((-2.0 * sigma2_hat_1 * u).sqrt(), sigma2_true) - sigma2_hat_1;
    let mut lo = -1.0;
    while h(lo) <= 0.0 {
        lo *= 2.0;
        if lo < -1e6 {
            return Ok(None);
        }
    }
    Ok(bisect(lo, 0.0, h).map(f64::exp))
}

/// Lower end of the usable `pfa0` range: the rate whose threshold at the
/// converged variance equals the weakest target amplitude.
pub fn pfa_min(h1_amplitudes: &[f64], sigma2_pcd: f64) -> Option<f64> {
    let min = h1_amplitudes.iter().cloned().fold(f64::INFINITY, f64::min);
    (min.is_finite() && sigma2_pcd > 0.0).then(|| pfa_for_threshold(sigma2_pcd, min))
}

pub fn pfa_window(sigma2_hat_1: f64, sigma2_true: f64, h1_amplitudes: &[f64], sigma2_pcd: f64) -> Result<PfaWindow> {
    let mut w = PfaWindow {
        pfa_max1: pfa_max1(sigma2_hat_1, sigma2_true)?,
        pfa_max2: pfa_max2(sigma2_hat_1, sigma2_true)?,
        pfa_min: pfa_min(h1_amplitudes, sigma2_pcd),
        notes: Vec::new(),
    };
    if w.pfa_max2.is_none() {
        let a = sigma2_hat_1 / sigma2_true;
        w.notes.push(format!(
            "p^a ln^2 p stays below 1 for a = {a:.6} (needs a <= 2/e); the contraction bound holds for every pfa0"
        ));
    }
    if w.pfa_max1.is_none() {
        w.notes.push("no pfa0 reproduces the first estimate".into());
    }
    if w.pfa_min.is_none() {
        w.notes.push("no occupied cells to bound pfa0 from below".into());
    }
    Ok(w)
}
