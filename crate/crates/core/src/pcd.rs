//! Parameter-convergence detector: iterative estimation of the recovery
//! error variance from the non-detected cells, followed by a Rayleigh CFAR
//! threshold on the amplitudes of `r`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{amplitude, split_vec};

const SERIES_LIMIT: f64 = 30.0;

/// Zeroth-order modified Bessel function of the first kind.
pub fn bessel_i0(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::param(format!("I0 argument must be non-negative, got {x}")));
    }
    if x <= SERIES_LIMIT {
        Ok(i0_series(x))
    } else {
        Ok(i0_asymptotic_scaled(x) * x.exp())
    }
}

/// `exp(-x) I0(x)`, finite for all `x >= 0`.
pub fn bessel_i0e(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::param(format!("I0 argument must be non-negative, got {x}")));
    }
    if x <= SERIES_LIMIT {
        Ok(i0_series(x) * (-x).exp())
    } else {
        Ok(i0_asymptotic_scaled(x))
    }
}

fn i0_series(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut n = 1.0;
    loop {
        term *= q / (n * n);
        sum += term;
        if term < sum * 1e-17 {
            return sum;
        }
        n += 1.0;
    }
}

fn i0_asymptotic_scaled(x: f64) -> f64 {
    // e^-x I0(x) ~ (2 pi x)^-1/2 sum_k ((2k-1)!!)^2 / (k! (8x)^k)
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        let k = k as f64;
        let next = term * (2.0 * k - 1.0) * (2.0 * k - 1.0) / (8.0 * k * x);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum / (2.0 * std::f64::consts::PI * x).sqrt()
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!(
            "variance must be positive and finite, got {sigma2}"
        )))
    }
}

pub fn rayleigh_pdf(r: f64, sigma2: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    if r < 0.0 {
        return Err(Error::param(format!("amplitude must be non-negative, got {r}")));
    }
    Ok(r / sigma2 * (-r * r / (2.0 * sigma2)).exp())
}

pub fn rician_pdf(r: f64, mu: f64, sigma2: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    if r < 0.0 || mu < 0.0 {
        return Err(Error::param(format!(
            "amplitude and mean must be non-negative, got r={r}, mu={mu}"
        )));
    }
    // exp(-(r^2+mu^2)/2s) I0(mu r/s) = exp(-(r-mu)^2/2s) i0e(mu r/s)
    let d = r - mu;
    Ok(r / sigma2 * (-d * d / (2.0 * sigma2)).exp() * bessel_i0e(mu * r / sigma2)?)
}

/// Rayleigh threshold `sqrt(-2 sigma2 ln pfa)`.
pub fn threshold_for_pfa(sigma2: f64, pfa: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    if !(pfa > 0.0 && pfa <= 1.0) {
        return Err(Error::param(format!("false-alarm rate must lie in (0, 1], got {pfa}")));
    }
    Ok((-2.0 * sigma2 * pfa.ln()).sqrt())
}

/// Rayleigh tail probability `exp(-T^2 / (2 sigma2))`.
pub fn pfa_for_threshold(sigma2: f64, t: f64) -> f64 {
    (-t * t / (2.0 * sigma2)).exp()
}

/// Unbiased variance of both coordinates of every cell not flagged in
/// `detected`. Returns the estimate and the number of coordinates used.
pub fn residual_variance(r_ri: &[f64], detected: &[bool]) -> Result<(f64, usize)> {
    let (re, im) = split_vec(r_ri)?;
    if detected.len() != re.len() {
        return Err(Error::dims(format!(
            "{} detection flags for {} cells",
            detected.len(),
            re.len()
        )));
    }
    let keep = || {
        re.iter()
            .zip(im)
            .zip(detected)
            .filter(|(_, &d)| !d)
            .flat_map(|((&a, &b), _)| [a, b])
    };
    let l = 2 * detected.iter().filter(|&&d| !d).count();
    if l < 2 {
        return Err(Error::DegenerateSupport(format!(
            "only {l} residual coordinates remain after removing detected cells"
        )));
    }
    let mean = keep().sum::<f64>() / l as f64;
    let ss: f64 = keep().map(|x| (x - mean) * (x - mean)).sum();
    Ok((ss / (l - 1) as f64, l))
}

/// `r ⊙ 1(r > T)` and the indices kept.
pub fn detect(r: &[f64], t: f64) -> (Vec<f64>, Vec<usize>) {
    let mut support = Vec::new();
    let x = r
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            if a > t {
                support.push(i);
                a
            } else {
                0.0
            }
        })
        .collect();
    (x, support)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcdConfig {
    /// False-alarm rate used while refining the variance.
    pub pfa0: f64,
    /// False-alarm rate of the final detection.
    pub pfa: f64,
    #[serde(default = "default_c_tol")]
    pub c_tol: f64,
    #[serde(default = "default_m_max")]
    pub m_max: usize,
}

fn default_c_tol() -> f64 {
    1e-5
}

fn default_m_max() -> usize {
    50
}

impl PcdConfig {
    pub fn new(pfa0: f64, pfa: f64) -> Self {
        PcdConfig {
            pfa0,
            pfa,
            c_tol: default_c_tol(),
            m_max: default_m_max(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pfa0 > 0.0 && self.pfa0 < 1.0) {
            return Err(Error::param(format!("pfa0 must lie in (0, 1), got {}", self.pfa0)));
        }
        if !(self.pfa > 0.0 && self.pfa <= 1.0) {
            return Err(Error::param(format!("pfa must lie in (0, 1], got {}", self.pfa)));
        }
        if !(self.c_tol > 0.0 && self.c_tol.is_finite()) {
            return Err(Error::param(format!("c_tol must be positive, got {}", self.c_tol)));
        }
        if self.m_max == 0 {
            return Err(Error::param("m_max must be at least 1"));
        }
        Ok(())
    }
}

/// One refinement step: the variance estimate, the threshold derived from
/// it and how many cells that threshold keeps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcdStep {
    pub sigma2: f64,
    pub threshold: f64,
    pub detected: usize,
}

#[derive(Clone, Debug)]
pub struct PcdResult {
    pub sigma2_pcd: f64,
    pub threshold: f64,
    /// Amplitudes above the final threshold, zero elsewhere.
    pub x_hat_pfa: Vec<f64>,
    pub detected_support: Vec<usize>,
    /// The last step's threshold is the final `pfa` threshold, earlier ones
    /// use `pfa0`.
    pub steps: Vec<PcdStep>,
    pub converged: bool,
}

impl PcdResult {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn variance_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.sigma2).collect()
    }

    /// `m,sigma2_hat,threshold,detected_count`, then a summary row with
    /// `m = final`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "m,sigma2_hat,threshold,detected_count")?;
        for (i, s) in self.steps.iter().enumerate() {
            writeln!(w, "{},{},{},{}", i + 1, s.sigma2, s.threshold, s.detected)?;
        }
        writeln!(
            w,
            "final,{},{},{}",
            self.sigma2_pcd,
            self.threshold,
            self.detected_support.len()
        )?;
        Ok(())
    }
}

pub fn run_pcd(x_hat_ri: &[f64], r_ri: &[f64], config: &PcdConfig) -> Result<PcdResult> {
    config.validate()?;
    if x_hat_ri.len() != r_ri.len() {
        return Err(Error::dims(format!(
            "sparse solution has length {}, noisy estimate {}",
            x_hat_ri.len(),
            r_ri.len()
        )));
    }
    let (xr, xi) = split_vec(x_hat_ri)?;
    let amp = amplitude(r_ri)?;
    let mut detected: Vec<bool> = xr.iter().zip(xi).map(|(a, b)| *a != 0.0 || *b != 0.0).collect();

    let mut steps = Vec::new();
    let mut prev = 0.0;
    for m in 1..=config.m_max {
        let (sigma2, _) = residual_variance(r_ri, &detected)?;
        if !(sigma2 > 0.0) {
            return Err(Error::DegenerateSupport(format!(
                "residual variance vanished at iteration {m}"
            )));
        }
        let converged = (sigma2 - prev).abs() < config.c_tol * prev;
        if converged || m == config.m_max {
            let threshold = threshold_for_pfa(sigma2, config.pfa)?;
            let (x_hat_pfa, detected_support) = detect(&amp, threshold);
            steps.push(PcdStep {
                sigma2,
                threshold,
                detected: detected_support.len(),
            });
            return Ok(PcdResult {
                sigma2_pcd: sigma2,
                threshold,
                x_hat_pfa,
                detected_support,
                steps,
                converged,
            });
        }
        let t0 = threshold_for_pfa(sigma2, config.pfa0)?;
        let mut count = 0;
        for (flag, &a) in detected.iter_mut().zip(&amp) {
            *flag = a > t0;
            count += *flag as usize;
        }
        steps.push(PcdStep {
            sigma2,
            threshold: t0,
            detected: count,
        });
        prev = sigma2;
    }
    unreachable!("the loop returns at m_max")
}
