//! Monte Carlo diagnostics: detection metrics, oracle error variances,
//! ECDF distance to the standard normal, and ROC / false-alarm harnesses.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::pcd::{run_pcd, threshold_for_pfa, PcdConfig};
use crate::rng;
use crate::signal::{amplitude, simulate, split_vec, ObservationModel, SceneParams};
use crate::unfold::TrainedParams;
use crate::vamp::{run_vamp, VampConfig};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionMetrics {
    /// `None` when the scene has no targets.
    pub pd: Option<f64>,
    /// `None` when every cell is occupied.
    pub pfa: Option<f64>,
    pub true_detections: usize,
    pub false_alarms: usize,
    pub occupied: usize,
    pub empty: usize,
}

pub fn empirical_metrics(detected: &[usize], true_support: &[usize], n: usize) -> Result<DetectionMetrics> {
    let mut occupied = vec![false; n];
    for &i in true_support {
        *occupied
            .get_mut(i)
            .ok_or_else(|| Error::param(format!("true support index {i} outside {n} cells")))? = true;
    }
    let mut seen = vec![false; n];
    let (mut tp, mut fp) = (0, 0);
    for &i in detected {
        if i >= n {
            return Err(Error::param(format!("detected index {i} outside {n} cells")));
        }
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        if occupied[i] {
            tp += 1;
        } else {
            fp += 1;
        }
    }
    let l0 = occupied.iter().filter(|&&o| o).count();
    Ok(DetectionMetrics {
        pd: (l0 > 0).then(|| tp as f64 / l0 as f64),
        pfa: (l0 < n).then(|| fp as f64 / (n - l0) as f64),
        true_detections: tp,
        false_alarms: fp,
        occupied: l0,
        empty: n - l0,
    })
}

fn unbiased_variance(xs: impl Iterator<Item = f64> + Clone) -> Option<f64> {
    let n = xs.clone().count();
    if n < 2 {
        return None;
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    Some(xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64)
}

/// Sample variances of the recovery error split by component and by
/// whether the cell holds a target.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OracleVariances {
    pub real_h1: Option<f64>,
    pub real_h0: Option<f64>,
    pub imag_h1: Option<f64>,
    pub imag_h0: Option<f64>,
}

impl OracleVariances {
    fn all(&self) -> [Option<f64>; 4] {
        [self.real_h1, self.real_h0, self.imag_h1, self.imag_h0]
    }

    /// Mean of the available estimates.
    pub fn mean(&self) -> Option<f64> {
        let present: Vec<f64> = self.all().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    fn get(&self, part: Part, hyp: Hypothesis) -> Option<f64> {
        match (part, hyp) {
            (Part::Real, Hypothesis::H1) => self.real_h1,
            (Part::Real, Hypothesis::H0) => self.real_h0,
            (Part::Imag, Hypothesis::H1) => self.imag_h1,
            (Part::Imag, Hypothesis::H0) => self.imag_h0,
        }
    }
}

/// `w_RI` split by `occupied`; partitions with fewer than two samples are
/// absent.
pub fn oracle_variances(w_ri: &[f64], occupied: &[bool]) -> Result<OracleVariances> {
    let (re, im) = split_vec(w_ri)?;
    if occupied.len() != re.len() {
        return Err(Error::dims(format!(
            "{} occupancy flags for {} cells",
            occupied.len(),
            re.len()
        )));
    }
    Ok(OracleVariances {
        real_h1: unbiased_variance(partition(re, occupied, true)),
        real_h0: unbiased_variance(partition(re, occupied, false)),
        imag_h1: unbiased_variance(partition(im, occupied, true)),
        imag_h0: unbiased_variance(partition(im, occupied, false)),
    })
}

fn partition<'a>(xs: &'a [f64], occupied: &'a [bool], want: bool) -> impl Iterator<Item = f64> + Clone + 'a {
    xs.iter()
        .zip(occupied)
        .filter(move |(_, &o)| o == want)
        .map(|(&x, _)| x)
}

/// ECDF of normalised samples minus the standard normal CDF, at each
/// distinct sample value. `d_minus`/`d_plus` are the left and right limits.
#[derive(Clone, Debug)]
pub struct EcdfDiff {
    pub grid: Vec<f64>,
    pub d_minus: Vec<f64>,
    pub d_plus: Vec<f64>,
    pub sup_abs: f64,
    pub count: usize,
}

pub fn ecdf_diff(samples: &[f64], sigma: f64) -> Result<EcdfDiff> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("normaliser must be positive, got {sigma}")));
    }
    if samples.is_empty() {
        return Err(Error::param("ECDF needs at least one sample"));
    }
    let mut z: Vec<f64> = samples.iter().map(|x| x / sigma).collect();
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    let (mut grid, mut d_minus, mut d_plus) = (Vec::new(), Vec::new(), Vec::new());
    let mut sup: f64 = 0.0;
    let mut i = 0;
    while i < z.len() {
        let x = z[i];
        let mut j = i;
        while j < z.len() && z[j] == x {
            j += 1;
        }
        let phi = normal_cdf(x);
        let (lo, hi) = (i as f64 / n - phi, j as f64 / n - phi);
        sup = sup.max(lo.abs()).max(hi.abs());
        grid.push(x);
        d_minus.push(lo);
        d_plus.push(hi);
        i = j;
    }
    Ok(EcdfDiff {
        grid,
        d_minus,
        d_plus,
        sup_abs: sup,
        count: z.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Real,
    Imag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Hypothesis {
    H0,
    H1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Normalizer {
    /// The partition's own sample standard deviation.
    Oracle,
    /// The variance VAMP reports for `r`.
    Vamp,
    Pcd,
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Real => "real",
            Part::Imag => "imag",
        })
    }
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Hypothesis::H0 => "H0",
            Hypothesis::H1 => "H1",
        })
    }
}

impl fmt::Display for Normalizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalizer::Oracle => "oracle",
            Normalizer::Vamp => "vamp",
            Normalizer::Pcd => "pcd",
        })
    }
}

const PARTS: [Part; 2] = [Part::Real, Part::Imag];
const HYPOTHESES: [Hypothesis; 2] = [Hypothesis::H0, Hypothesis::H1];
const NORMALIZERS: [Normalizer; 3] = [Normalizer::Oracle, Normalizer::Vamp, Normalizer::Pcd];

fn curve_slot(part: Part, hyp: Hypothesis, norm: Normalizer) -> usize {
    (part as usize * 2 + hyp as usize) * 3 + norm as usize
}

/// Normalised recovery errors pooled across trials, one buffer per
/// (part, hypothesis, normaliser).
#[derive(Clone, Debug)]
pub struct EcdfPool {
    buffers: Vec<Vec<f64>>,
    /// Trial contributions skipped because a normaliser was unavailable.
    pub skipped: usize,
}

impl Default for EcdfPool {
    fn default() -> Self {
        EcdfPool {
            buffers: vec![Vec::new(); 12],
            skipped: 0,
        }
    }
}

impl EcdfPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one trial's `w_RI = r_RI - x0_RI`.
    pub fn add_trial(&mut self, w_ri: &[f64], occupied: &[bool], sigma2_vamp: f64, sigma2_pcd: f64) -> Result<()> {
        let oracle = oracle_variances(w_ri, occupied)?;
        let (re, im) = split_vec(w_ri)?;
        for part in PARTS {
            let src = if part == Part::Real { re } else { im };
            for hyp in HYPOTHESES {
                let want = hyp == Hypothesis::H1;
                for norm in NORMALIZERS {
                    let s2 = match norm {
                        Normalizer::Oracle => oracle.get(part, hyp),
                        Normalizer::Vamp => Some(sigma2_vamp),
                        Normalizer::Pcd => Some(sigma2_pcd),
                    };
                    let Some(s2) = s2.filter(|&v| v > 0.0 && v.is_finite()) else {
                        self.skipped += 1;
                        continue;
                    };
                    let sd = s2.sqrt();
                    let buf = &mut self.buffers[curve_slot(part, hyp, norm)];
                    buf.extend(partition(src, occupied, want).map(|x| x / sd));
                }
            }
        }
        Ok(())
    }

    pub fn samples(&self, part: Part, hyp: Hypothesis, norm: Normalizer) -> &[f64] {
        &self.buffers[curve_slot(part, hyp, norm)]
    }

    pub fn report(&self) -> EcdfReport {
        let mut curves = Vec::new();
        for part in PARTS {
            for hyp in HYPOTHESES {
                for norm in NORMALIZERS {
                    let s = self.samples(part, hyp, norm);
                    curves.push(EcdfCurve {
                        part,
                        hypothesis: hyp,
                        normalizer: norm,
                        diff: if s.is_empty() { None } else { ecdf_diff(s, 1.0).ok() },
                    });
                }
            }
        }
        EcdfReport {
            degenerate: self.skipped > 0,
            curves,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EcdfCurve {
    pub part: Part,
    pub hypothesis: Hypothesis,
    pub normalizer: Normalizer,
    /// `None` for an empty partition.
    pub diff: Option<EcdfDiff>,
}

#[derive(Clone, Debug)]
pub struct EcdfReport {
    pub curves: Vec<EcdfCurve>,
    /// Some normaliser was zero or some partition too small.
    pub degenerate: bool,
}

impl EcdfReport {
    pub fn curve(&self, part: Part, hyp: Hypothesis, norm: Normalizer) -> Option<&EcdfDiff> {
        self.curves[curve_slot(part, hyp, norm)].diff.as_ref()
    }

    /// `part,hypothesis,normalizer,x,D` with `D` the right limit, thinned
    /// to at most `max_points` evenly spaced rows per curve (0 keeps all).
    pub fn write_csv<W: Write>(&self, w: &mut W, max_points: usize) -> Result<()> {
        writeln!(w, "part,hypothesis,normalizer,x,D")?;
        for c in &self.curves {
            let Some(d) = &c.diff else { continue };
            let len = d.grid.len();
            let keep = if max_points == 0 || len <= max_points {
                len
            } else {
                max_points
            };
            for k in 0..keep {
                let i = if keep == len {
                    k
                } else {
                    k * (len - 1) / (keep - 1).max(1)
                };
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    c.part, c.hypothesis, c.normalizer, d.grid[i], d.d_plus[i]
                )?;
            }
        }
        Ok(())
    }
}

/// Single-trial report.
pub fn ecdf_report(
    r_ri: &[f64],
    x0_ri: &[f64],
    occupied: &[bool],
    sigma2_vamp: f64,
    sigma2_pcd: f64,
) -> Result<EcdfReport> {
    if r_ri.len() != x0_ri.len() {
        return Err(Error::dims(format!("lengths {} and {}", r_ri.len(), x0_ri.len())));
    }
    let w: Vec<f64> = r_ri.iter().zip(x0_ri).map(|(r, x)| r - x).collect();
    let mut pool = EcdfPool::new();
    pool.add_trial(&w, occupied, sigma2_vamp, sigma2_pcd)?;
    Ok(pool.report())
}

/// Everything later stages need from one simulated scene.
#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub index: usize,
    pub seed: u64,
    pub occupied: Vec<bool>,
    /// `|r_i|` per cell.
    pub amplitude: Vec<f64>,
    pub w_ri: Vec<f64>,
    pub oracle: OracleVariances,
    pub sigma2_vamp: f64,
    pub sigma2_pcd: f64,
    pub pcd_trace: Vec<f64>,
    pub pcd_converged: bool,
    /// Detections at the configured final false-alarm rate.
    pub metrics: DetectionMetrics,
}

impl TrialOutcome {
    pub fn pcd_iterations(&self) -> usize {
        self.pcd_trace.len()
    }

    pub fn trace_non_decreasing(&self) -> bool {
        self.pcd_trace.windows(2).all(|w| w[1] >= w[0])
    }

    pub fn l0(&self) -> usize {
        self.metrics.occupied
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrialBatch {
    pub outcomes: Vec<TrialOutcome>,
    /// Trials that raised an error, with the message.
    pub failures: Vec<(usize, String)>,
}

/// Seed of trial `i` under `master`.
pub fn trial_seed(master: u64, i: usize) -> u64 {
    rng::split_seed(master, i as u64)
}

pub fn run_trial(
    model: &ObservationModel,
    trained: &TrainedParams,
    scene: &SceneParams,
    pcd: &PcdConfig,
    vamp: &VampConfig,
    index: usize,
    seed: u64,
) -> Result<TrialOutcome> {
    let (sc, meas) = simulate(model, scene, seed)?;
    let out = run_vamp(&meas.y_ri, model, &trained.layers, vamp)?;
    let res = run_pcd(out.x_hat_ri.as_slice(), out.r_ri.as_slice(), pcd)?;
    let w_ri: Vec<f64> = out.r_ri.iter().zip(sc.x0_ri.iter()).map(|(r, x)| r - x).collect();
    Ok(TrialOutcome {
        index,
        seed,
        oracle: oracle_variances(&w_ri, &sc.occupancy)?,
        amplitude: amplitude(out.r_ri.as_slice())?,
        metrics: empirical_metrics(&res.detected_support, &sc.support, sc.n())?,
        occupied: sc.occupancy,
        w_ri,
        sigma2_vamp: out.sigma2_vamp,
        sigma2_pcd: res.sigma2_pcd,
        pcd_trace: res.variance_trace(),
        pcd_converged: res.converged,
    })
}

/// Runs `trials` independent trials. Trial `i` is seeded from
/// `(master, i)` only, so results do not depend on `exec`.
#[allow(clippy::too_many_arguments)]
pub fn run_trials(
    model: &ObservationModel,
    trained: &TrainedParams,
    scene: &SceneParams,
    pcd: &PcdConfig,
    vamp: &VampConfig,
    trials: usize,
    master: u64,
    exec: Exec,
) -> Result<TrialBatch> {
    pcd.validate()?;
    vamp.validate()?;
    scene.validate()?;
    model.lmmse_factor()?;
    let results = exec.map(trials, |i| {
        run_trial(model, trained, scene, pcd, vamp, i, trial_seed(master, i))
    });
    let mut batch = TrialBatch::default();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => batch.outcomes.push(o),
            Err(e) => batch.failures.push((i, e.to_string())),
        }
    }
    Ok(batch)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RocVariant {
    /// Threshold from the PCD variance.
    Pcd,
    /// Threshold from the mean oracle variance.
    OracleBound,
    /// Threshold from the variance VAMP reports.
    VampVariance,
}

impl fmt::Display for RocVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RocVariant::Pcd => "pcd",
            RocVariant::OracleBound => "oracle-bound",
            RocVariant::VampVariance => "vamp-variance",
        })
    }
}

impl RocVariant {
    pub const ALL: [RocVariant; 3] = [RocVariant::Pcd, RocVariant::OracleBound, RocVariant::VampVariance];

    fn sigma2(self, o: &TrialOutcome) -> Option<f64> {
        match self {
            RocVariant::Pcd => Some(o.sigma2_pcd),
            RocVariant::OracleBound => o.oracle.mean(),
            RocVariant::VampVariance => Some(o.sigma2_vamp),
        }
        .filter(|&s| s > 0.0 && s.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocRow {
    pub variant: RocVariant,
    pub preset_pfa: f64,
    pub achieved_pfa: f64,
    /// `None` if no trial had a target.
    pub achieved_pd: Option<f64>,
    pub trials: usize,
    pub false_alarms: usize,
    pub null_cells: usize,
    pub true_detections: usize,
    pub occupied_cells: usize,
}

impl RocRow {
    /// Binomial standard deviation of the achieved rate under the preset.
    pub fn binomial_sd(&self) -> f64 {
        (self.preset_pfa * (1.0 - self.preset_pfa) / self.null_cells as f64).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct RocCurve {
    pub rows: Vec<RocRow>,
}

/// Pooled detection rates for every variant and preset. Each trial's
/// variance is estimated once and reused across presets.
pub fn roc_from_trials(batch: &TrialBatch, presets: &[f64]) -> Result<RocCurve> {
    for &p in presets {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::param(format!(
                "preset false-alarm rate must lie in (0, 1], got {p}"
            )));
        }
    }
    let mut rows = Vec::new();
    for variant in RocVariant::ALL {
        for &preset in presets {
            let mut row = RocRow {
                variant,
                preset_pfa: preset,
                achieved_pfa: 0.0,
                achieved_pd: None,
                trials: 0,
                false_alarms: 0,
                null_cells: 0,
                true_detections: 0,
                occupied_cells: 0,
            };
            for o in &batch.outcomes {
                let Some(s2) = variant.sigma2(o) else { continue };
                let t = threshold_for_pfa(s2, preset)?;
                row.trials += 1;
                for (&a, &occ) in o.amplitude.iter().zip(&o.occupied) {
                    let hit = a > t;
                    if occ {
                        row.occupied_cells += 1;
                        row.true_detections += hit as usize;
                    } else {
                        row.null_cells += 1;
                        row.false_alarms += hit as usize;
                    }
                }
            }
            if row.null_cells > 0 {
                row.achieved_pfa = row.false_alarms as f64 / row.null_cells as f64;
            }
            row.achieved_pd = (row.occupied_cells > 0).then(|| row.true_detections as f64 / row.occupied_cells as f64);
            rows.push(row);
        }
    }
    Ok(RocCurve { rows })
}

/// Monte Carlo ROC for a trained network.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_roc(
    model: &ObservationModel,
    trained: &TrainedParams,
    scene: &SceneParams,
    pcd: &PcdConfig,
    presets: &[f64],
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<(RocCurve, TrialBatch)> {
    if trials == 0 {
        return Err(Error::param("at least one trial is required"));
    }
    let vamp = VampConfig::new(trained.depth());
    let batch = run_trials(model, trained, scene, pcd, &vamp, trials, seed, exec)?;
    Ok((roc_from_trials(&batch, presets)?, batch))
}

impl RocCurve {
    pub fn rows_for(&self, variant: RocVariant) -> impl Iterator<Item = &RocRow> {
        self.rows.iter().filter(move |r| r.variant == variant)
    }

    /// `preset_pfa,achieved_pfa,achieved_pd,variant,trials`
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "preset_pfa,achieved_pfa,achieved_pd,variant,trials")?;
        for r in &self.rows {
            let pd = r.achieved_pd.map(|p| p.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{}",
                r.preset_pfa, r.achieved_pfa, pd, r.variant, r.trials
            )?;
        }
        Ok(())
    }

    /// `preset_pfa,achieved_pfa,relative_error,false_alarms,null_cells,binomial_sd`
    /// for the PCD variant.
    pub fn write_pfa_control_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "preset_pfa,achieved_pfa,relative_error,false_alarms,null_cells,binomial_sd"
        )?;
        for r in self.rows_for(RocVariant::Pcd) {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.preset_pfa,
                r.achieved_pfa,
                (r.achieved_pfa - r.preset_pfa) / r.preset_pfa,
                r.false_alarms,
                r.null_cells,
                r.binomial_sd()
            )?;
        }
        Ok(())
    }
}

/// Detection rate when each trial's amplitudes are scaled by its own PCD
/// standard deviation and one threshold is chosen so that the pooled false
/// alarm rate is as close to `target_pfa` as the null sample allows.
/// Returns `(achieved_pfa, pd)`.
pub fn pd_at_matched_pfa(batch: &TrialBatch, target_pfa: f64) -> Result<(f64, Option<f64>)> {
    if !(target_pfa > 0.0 && target_pfa < 1.0) {
        return Err(Error::param(format!(
            "target false-alarm rate must lie in (0, 1), got {target_pfa}"
        )));
    }
    let (mut null, mut occ) = (Vec::new(), Vec::new());
    for o in &batch.outcomes {
        let sd = o.sigma2_pcd.sqrt();
        for (&a, &is_occ) in o.amplitude.iter().zip(&o.occupied) {
            if is_occ {
                occ.push(a / sd);
            } else {
                null.push(a / sd);
            }
        }
    }
    if null.is_empty() {
        return Err(Error::param("no null cells to calibrate against"));
    }
    null.sort_by(|a, b| b.total_cmp(a));
    let k = ((target_pfa * null.len() as f64).round() as usize).min(null.len() - 1);
    let t = null[k];
    let fa = null.iter().filter(|&&z| z > t).count();
    let pd = (!occ.is_empty()).then(|| occ.iter().filter(|&&z| z > t).count() as f64 / occ.len() as f64);
    Ok((fa as f64 / null.len() as f64, pd))
}

/// One row per trial:
/// `trial,seed,l0,detected,true_detections,false_alarms,pd,pfa,sigma2_pcd,sigma2_oracle,sigma2_vamp,pcd_iterations,converged`
pub fn write_metrics_csv<W: Write>(w: &mut W, batch: &TrialBatch) -> Result<()> {
    writeln!(
        w,
        "trial,seed,l0,detected,true_detections,false_alarms,pd,pfa,sigma2_pcd,sigma2_oracle,sigma2_vamp,pcd_iterations,converged"
    )?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for o in &batch.outcomes {
        let m = &o.metrics;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            o.index,
            o.seed,
            m.occupied,
            m.true_detections + m.false_alarms,
            m.true_detections,
            m.false_alarms,
            opt(m.pd),
            opt(m.pfa),
            o.sigma2_pcd,
            opt(o.oracle.mean()),
            o.sigma2_vamp,
            o.pcd_iterations(),
            o.pcd_converged
        )?;
    }
    Ok(())
}

/// Builds the pooled ECDF from every trial in a batch.
pub fn ecdf_from_trials(batch: &TrialBatch) -> Result<EcdfReport> {
    let mut pool = EcdfPool::new();
    for o in &batch.outcomes {
        pool.add_trial(&o.w_ri, &o.occupied, o.sigma2_vamp, o.sigma2_pcd)?;
    }
    Ok(pool.report())
}
