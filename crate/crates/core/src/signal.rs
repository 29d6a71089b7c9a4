//! Observation matrices, random sparse scenes and noisy measurements, with
//! the stacked real embedding used by every downstream stage.
//!
//! Real vectors are laid out as `[re; im]` (length `2N`), and a complex
//! matrix `A` is embedded as `[[Re A, -Im A], [Im A, Re A]]`, so that
//! `embed_real(A) * realvec(x) == realvec(A * x)`.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::vamp::LmmseFactor;

pub type C64 = Complex<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixKind {
    PartialFourier,
    Gaussian,
    Custom,
}

impl MatrixKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MatrixKind::PartialFourier => "partial-fourier",
            MatrixKind::Gaussian => "gaussian",
            MatrixKind::Custom => "custom",
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatrixKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partial-fourier" => Ok(MatrixKind::PartialFourier),
            "gaussian" => Ok(MatrixKind::Gaussian),
            "custom" => Ok(MatrixKind::Custom),
            other => Err(Error::param(format!("unknown matrix kind {other:?}"))),
        }
    }
}

/// Complex `M x N` sensing matrix together with its `2M x 2N` real embedding.
#[derive(Clone, Debug)]
pub struct ObservationModel {
    a: DMatrix<C64>,
    a_ri: DMatrix<f64>,
    kind: MatrixKind,
    row_selection: Vec<usize>,
    seed: u64,
    factor: OnceLock<LmmseFactor>,
}

impl ObservationModel {
    fn from_parts(a: DMatrix<C64>, kind: MatrixKind, row_selection: Vec<usize>, seed: u64) -> Self {
        let a_ri = embed_real(&a);
        ObservationModel {
            a,
            a_ri,
            kind,
            row_selection,
            seed,
            factor: OnceLock::new(),
        }
    }

    /// Wraps a caller-supplied matrix.
    pub fn custom(a: DMatrix<C64>) -> Result<Self> {
        let (m, n) = a.shape();
        if m == 0 || m > n {
            return Err(Error::dims(format!("custom matrix must have 1 <= M <= N, got {m}x{n}")));
        }
        Ok(Self::from_parts(a, MatrixKind::Custom, (0..m).collect(), 0))
    }

    pub fn build(kind: MatrixKind, m: usize, n: usize, seed: u64) -> Result<Self> {
        match kind {
            MatrixKind::PartialFourier => make_partial_fourier(m, n, seed),
            MatrixKind::Gaussian => make_gaussian(m, n, seed),
            MatrixKind::Custom => Err(Error::param("custom matrices cannot be generated from a seed")),
        }
    }

    pub fn a(&self) -> &DMatrix<C64> {
        &self.a
    }

    pub fn a_ri(&self) -> &DMatrix<f64> {
        &self.a_ri
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn row_selection(&self) -> &[usize] {
        &self.row_selection
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Spectral factorization of `A_RI`, computed on first use and shared.
    pub fn lmmse_factor(&self) -> Result<&LmmseFactor> {
        if let Some(f) = self.factor.get() {
            return Ok(f);
        }
        let f = LmmseFactor::new(&self.a_ri)?;
        Ok(self.factor.get_or_init(|| f))
    }
}

/// `M` distinct rows of the unitary `N`-point DFT, columns rescaled to unit
/// norm. Rows are drawn uniformly without replacement and stored ascending.
pub fn make_partial_fourier(m: usize, n: usize, seed: u64) -> Result<ObservationModel> {
    if m == 0 || m > n {
        return Err(Error::dims(format!(
            "partial Fourier needs 1 <= M <= N, got M={m}, N={n}"
        )));
    }
    let mut r = rng::seeded(seed);
    let mut rows = rand::seq::index::sample(&mut r, n, m).into_vec();
    rows.sort_unstable();

    let scale = 1.0 / (n as f64).sqrt();
    let mut a = DMatrix::from_fn(m, n, |i, j| {
        // Reduce k*j mod N before scaling to keep the phase exact for large N.
        let k = ((rows[i] as u128 * j as u128) % n as u128) as f64;
        C64::from_polar(scale, -2.0 * PI * k / n as f64)
    });
    normalize_columns(&mut a);
    Ok(ObservationModel::from_parts(a, MatrixKind::PartialFourier, rows, seed))
}

/// I.i.d. `CN(0, 1/M)` entries, columns rescaled to unit norm.
pub fn make_gaussian(m: usize, n: usize, seed: u64) -> Result<ObservationModel> {
    if m == 0 || m > n {
        return Err(Error::dims(format!(
            "Gaussian matrix needs 1 <= M <= N, got M={m}, N={n}"
        )));
    }
    let mut r = rng::seeded(seed);
    let sd = (0.5 / m as f64).sqrt();
    // Column-major fill so the draw order is fixed.
    let mut a = DMatrix::<C64>::zeros(m, n);
    for j in 0..n {
        for i in 0..m {
            let re: f64 = StandardNormal.sample(&mut r);
            let im: f64 = StandardNormal.sample(&mut r);
            a[(i, j)] = C64::new(re * sd, im * sd);
        }
    }
    normalize_columns(&mut a);
    Ok(ObservationModel::from_parts(
        a,
        MatrixKind::Gaussian,
        (0..m).collect(),
        seed,
    ))
}

fn normalize_columns(a: &mut DMatrix<C64>) {
    for mut col in a.column_iter_mut() {
        let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.0 {
            col.unscale_mut(norm);
        }
    }
}

/// `[[Re A, -Im A], [Im A, Re A]]`.
pub fn embed_real(a: &DMatrix<C64>) -> DMatrix<f64> {
    let (m, n) = a.shape();
    DMatrix::from_fn(2 * m, 2 * n, |i, j| {
        let z = a[(i % m, j % n)];
        match (i < m, j < n) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    })
}

/// Top and bottom halves of a matrix with an even row count.
pub fn split_real_imag(h: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let rows = h.nrows();
    if !rows.is_multiple_of(2) {
        return Err(Error::shape(format!("cannot split {rows} rows into halves")));
    }
    let half = rows / 2;
    Ok((h.rows(0, half).into_owned(), h.rows(half, half).into_owned()))
}

/// Vector form of [`split_real_imag`].
pub fn split_vec(h: &[f64]) -> Result<(&[f64], &[f64])> {
    if !h.len().is_multiple_of(2) {
        return Err(Error::shape(format!("cannot split length {} into halves", h.len())));
    }
    Ok(h.split_at(h.len() / 2))
}

pub fn to_real_vec(x: &DVector<C64>) -> DVector<f64> {
    let n = x.len();
    DVector::from_fn(2 * n, |i, _| if i < n { x[i].re } else { x[i - n].im })
}

/// Reassembles `f_R(h) + j f_I(h)`.
pub fn to_complex_vec(h: &[f64]) -> Result<DVector<C64>> {
    let (re, im) = split_vec(h)?;
    Ok(DVector::from_iterator(
        re.len(),
        re.iter().zip(im).map(|(&a, &b)| C64::new(a, b)),
    ))
}

/// Per-cell amplitude `sqrt(r_R^2 + r_I^2)`.
pub fn amplitude(r_ri: &[f64]) -> Result<Vec<f64>> {
    let (re, im) = split_vec(r_ri)?;
    Ok(re.iter().zip(im).map(|(a, b)| a.hypot(*b)).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnrUnit {
    #[default]
    Db,
    Linear,
}

/// Per-real-component noise variance for a given SNR.
///
/// Solves `(a_min^2 + a_max^2 + a_min*a_max) / (6 sigma^2) = snr` with `snr`
/// in dB.
pub fn snr_to_sigma2(a_min: f64, a_max: f64, snr_db: f64) -> Result<f64> {
    sigma2_for_snr(a_min, a_max, snr_db, SnrUnit::Db)
}

pub fn sigma2_for_snr(a_min: f64, a_max: f64, snr: f64, unit: SnrUnit) -> Result<f64> {
    if !(a_min > 0.0 && a_max >= a_min && a_max.is_finite()) {
        return Err(Error::param(format!(
            "amplitudes must satisfy 0 < a_min <= a_max, got {a_min}, {a_max}"
        )));
    }
    let linear = match unit {
        SnrUnit::Db => 10f64.powf(snr / 10.0),
        SnrUnit::Linear => snr,
    };
    if !(linear > 0.0 && linear.is_finite()) {
        return Err(Error::param(format!("SNR must be positive and finite, got {snr}")));
    }
    let power = a_min * a_min + a_max * a_max + a_min * a_max;
    Ok(power / (6.0 * linear))
}

/// Distribution of random scenes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub a_min: f64,
    pub a_max: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub snr_min: f64,
    pub snr_max: f64,
    pub n: usize,
    #[serde(default)]
    pub snr_unit: SnrUnit,
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a_min > 0.0
            && self.a_min <= self.a_max
            && self.a_max.is_finite()
            && (0.0..=1.0).contains(&self.rho_min)
            && (0.0..=1.0).contains(&self.rho_max)
            && self.rho_min <= self.rho_max
            && self.snr_min.is_finite()
            && self.snr_max.is_finite()
            && self.snr_min <= self.snr_max
            && self.n > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid scene parameters {self:?}")))
        }
    }

    /// Noise variance at the midpoint of the SNR range.
    pub fn mid_sigma2(&self) -> Result<f64> {
        let snr = 0.5 * (self.snr_min + self.snr_max);
        sigma2_for_snr(self.a_min, self.a_max, snr, self.snr_unit)
    }
}

/// A ground-truth sparse scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub x0: DVector<C64>,
    pub x0_ri: DVector<f64>,
    pub support: Vec<usize>,
    pub rho: f64,
    pub snr: f64,
    /// One amplitude shared by every cell.
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
    pub occupancy: Vec<bool>,
    /// Noise variance per real component.
    pub noise_sigma2: f64,
}

impl Scene {
    pub fn n(&self) -> usize {
        self.x0.len()
    }

    pub fn l0(&self) -> usize {
        self.support.len()
    }
}

fn uniform(r: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        r.random_range(lo..=hi)
    }
}

pub fn generate_scene(params: &SceneParams, seed: u64) -> Result<Scene> {
    params.validate()?;
    let n = params.n;
    let mut r = rng::seeded(seed);

    let a = uniform(&mut r, params.a_min, params.a_max);
    let rho = uniform(&mut r, params.rho_min, params.rho_max);
    let snr = uniform(&mut r, params.snr_min, params.snr_max);
    let noise_sigma2 = sigma2_for_snr(params.a_min, params.a_max, snr, params.snr_unit)?;

    let mut phases = Vec::with_capacity(n);
    let mut occupancy = Vec::with_capacity(n);
    for _ in 0..n {
        phases.push(r.random_range(-PI..=PI));
        occupancy.push(r.random::<f64>() < rho);
    }

    let x0 = DVector::from_fn(n, |i, _| {
        if occupancy[i] {
            C64::from_polar(a, phases[i])
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let support = (0..n).filter(|&i| occupancy[i]).collect();
    Ok(Scene {
        x0_ri: to_real_vec(&x0),
        x0,
        support,
        rho,
        snr,
        amplitudes: vec![a; n],
        phases,
        occupancy,
        noise_sigma2,
    })
}

#[derive(Clone, Debug)]
pub struct Measurement {
    pub y: DVector<C64>,
    pub y_ri: DVector<f64>,
    pub noise: DVector<C64>,
}

impl Measurement {
    /// A measurement known only through its samples (noise unknown).
    pub fn from_samples(y: DVector<C64>) -> Self {
        let m = y.len();
        Measurement {
            y_ri: to_real_vec(&y),
            y,
            noise: DVector::from_element(m, C64::new(f64::NAN, f64::NAN)),
        }
    }
}

/// `y = A x0 + n` with `n_i ~ CN(0, 2 sigma^2)`, `M` noise components.
pub fn measure(model: &ObservationModel, scene: &Scene, seed: u64) -> Result<Measurement> {
    if model.n() != scene.n() {
        return Err(Error::dims(format!(
            "model has N={} columns but scene has {} cells",
            model.n(),
            scene.n()
        )));
    }
    let mut r = rng::seeded(seed);
    let sd = scene.noise_sigma2.sqrt();
    let noise = DVector::from_fn(model.m(), |_, _| {
        let re: f64 = StandardNormal.sample(&mut r);
        let im: f64 = StandardNormal.sample(&mut r);
        C64::new(re * sd, im * sd)
    });
    let y = model.a() * &scene.x0 + &noise;
    Ok(Measurement {
        y_ri: to_real_vec(&y),
        y,
        noise,
    })
}

/// Scene and measurement for one Monte Carlo draw. The measurement noise
/// uses a stream split off `seed`, so the scene alone is reproducible from
/// the same seed.
pub fn simulate(model: &ObservationModel, params: &SceneParams, seed: u64) -> Result<(Scene, Measurement)> {
    let scene = generate_scene(params, seed)?;
    let meas = measure(model, &scene, rng::split_seed(seed, 1))?;
    Ok((scene, meas))
}

/// Scene dump: `index,re,im,occupied`.
pub fn write_scene_csv<W: Write>(w: &mut W, scene: &Scene) -> Result<()> {
    writeln!(w, "index,re,im,occupied")?;
    for (i, z) in scene.x0.iter().enumerate() {
        writeln!(w, "{},{},{},{}", i, z.re, z.im, u8::from(scene.occupancy[i]))?;
    }
    Ok(())
}

/// Measurement dump: `index,re,im`.
pub fn write_measurement_csv<W: Write>(w: &mut W, y: &DVector<C64>) -> Result<()> {
    writeln!(w, "index,re,im")?;
    for (i, z) in y.iter().enumerate() {
        writeln!(w, "{},{},{}", i, z.re, z.im)?;
    }
    Ok(())
}

/// Reads `index,re,im` rows. Lines starting with `#` are skipped; indices
/// must run 0, 1, 2, ... in order.
pub fn read_measurement_csv<R: BufRead>(r: R) -> Result<DVector<C64>> {
    let mut out = Vec::new();
    let mut saw_header = false;
    for (no, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = no + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if !saw_header {
            saw_header = true;
            if t.replace(' ', "") != "index,re,im" {
                return Err(Error::Parse {
                    line: lineno,
                    field: "header".into(),
                    message: format!("expected `index,re,im`, found `{t}`"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = t.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                field: "row".into(),
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let idx: usize = fields[0].parse().map_err(|e| Error::Parse {
            line: lineno,
            field: "index".into(),
            message: format!("{e}"),
        })?;
        if idx != out.len() {
            return Err(Error::Parse {
                line: lineno,
                field: "index".into(),
                message: format!("expected index {}, found {idx}", out.len()),
            });
        }
        let num = |k: usize, name: &str| -> Result<f64> {
            let v: f64 = fields[k].parse().map_err(|e| Error::Parse {
                line: lineno,
                field: name.into(),
                message: format!("{e}"),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse {
                    line: lineno,
                    field: name.into(),
                    message: "value is not finite".into(),
                })
            }
        };
        out.push(C64::new(num(1, "re")?, num(2, "im")?));
    }
    if out.is_empty() {
        return Err(Error::Parse {
            line: 0,
            field: "row".into(),
            message: "no measurement rows".into(),
        });
    }
    Ok(DVector::from_vec(out))
}

const CACHE_MAGIC: &[u8; 5] = b"UFCM1";

/// File name keying a cached matrix by `(kind, M, N, seed)`.
pub fn cache_file_name(kind: MatrixKind, m: usize, n: usize, seed: u64) -> String {
    format!("{kind}_{m}x{n}_{seed}.ufcm")
}

/// Little-endian layout: `"UFCM1"`, `M: u64`, `N: u64`, `M` row indices as
/// `u64`, then `M*N` entries in row-major order as interleaved `re, im` `f64`.
pub fn write_matrix_cache<W: Write>(w: &mut W, model: &ObservationModel) -> Result<()> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&(model.m() as u64).to_le_bytes())?;
    w.write_all(&(model.n() as u64).to_le_bytes())?;
    for &row in model.row_selection() {
        w.write_all(&(row as u64).to_le_bytes())?;
    }
    for i in 0..model.m() {
        for j in 0..model.n() {
            let z = model.a()[(i, j)];
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_matrix_cache<R: Read>(r: &mut R, kind: MatrixKind, seed: u64) -> Result<ObservationModel> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Parse {
            line: 0,
            field: "magic".into(),
            message: "not a UFCM1 matrix cache".into(),
        });
    }
    let mut word = [0u8; 8];
    let mut next_u64 = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut word)?;
        Ok(u64::from_le_bytes(word))
    };
    let m = next_u64(r)? as usize;
    let n = next_u64(r)? as usize;
    if m == 0 || m > n {
        return Err(Error::dims(format!("cached matrix has M={m}, N={n}")));
    }
    let mut rows = Vec::with_capacity(m);
    for _ in 0..m {
        rows.push(next_u64(r)? as usize);
    }
    let mut data = vec![0u8; m * n * 16];
    r.read_exact(&mut data)?;
    let f = |k: usize| f64::from_le_bytes(data[k * 8..k * 8 + 8].try_into().unwrap());
    let a = DMatrix::from_fn(m, n, |i, j| {
        let k = 2 * (i * n + j);
        C64::new(f(k), f(k + 1))
    });
    Ok(ObservationModel::from_parts(a, kind, rows, seed))
}

/// Loads `(kind, M, N, seed)` from `dir` if cached, otherwise builds it and
/// writes the cache.
pub fn load_or_build(
    dir: &std::path::Path,
    kind: MatrixKind,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<ObservationModel> {
    let path = dir.join(cache_file_name(kind, m, n, seed));
    if let Ok(f) = std::fs::File::open(&path) {
        let model = read_matrix_cache(&mut std::io::BufReader::new(f), kind, seed)?;
        if model.m() == m && model.n() == n {
            return Ok(model);
        }
    }
    let model = ObservationModel::build(kind, m, n, seed)?;
    crate::atomic::write_atomic(&path, |w| write_matrix_cache(w, &model))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_complex(m: usize, n: usize, seed: u64) -> DMatrix<C64> {
        let mut r = rng::seeded(seed);
        DMatrix::from_fn(m, n, |_, _| {
            C64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn partial_fourier_large_size_has_unit_columns() {
        let model = make_partial_fourier(600, 1000, 3).unwrap();
        assert_eq!(model.a().shape(), (600, 1000));
        assert_eq!(model.a_ri().shape(), (1200, 2000));
        for col in model.a().column_iter() {
            let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!(close(norm, 1.0, 1e-12));
        }
        let rows = model.row_selection();
        assert!(rows.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn full_dft_is_unitary() {
        let model = make_partial_fourier(16, 16, 11).unwrap();
        assert_eq!(model.row_selection(), (0..16).collect::<Vec<_>>().as_slice());
        let gram = model.a().adjoint() * model.a();
        for i in 0..16 {
            for j in 0..16 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - C64::new(want, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn partial_fourier_is_deterministic() {
        let a = make_partial_fourier(4, 8, 0).unwrap();
        let b = make_partial_fourier(4, 8, 0).unwrap();
        assert_eq!(a.a(), b.a());
        assert_eq!(a.row_selection(), b.row_selection());
        let c = make_partial_fourier(4, 8, 1).unwrap();
        assert!(a.row_selection() != c.row_selection() || a.a() == c.a());
    }

    #[test]
    fn invalid_dimensions_rejected() {
        assert!(matches!(
            make_partial_fourier(9, 8, 0),
            Err(Error::InvalidDimensions(_))
        ));
        assert!(matches!(
            make_partial_fourier(0, 8, 0),
            Err(Error::InvalidDimensions(_))
        ));
        assert!(matches!(make_gaussian(9, 8, 0), Err(Error::InvalidDimensions(_))));
    }

    #[test]
    fn gram_diagonal_is_one() {
        for model in [
            make_partial_fourier(20, 64, 5).unwrap(),
            make_gaussian(20, 64, 5).unwrap(),
        ] {
            let gram = model.a().adjoint() * model.a();
            for i in 0..64 {
                assert!(close(gram[(i, i)].re, 1.0, 1e-12));
                assert!(close(gram[(i, i)].im, 0.0, 1e-12));
            }
        }
    }

    #[test]
    fn embed_pure_imaginary_scalar() {
        let a = DMatrix::from_element(1, 1, C64::new(0.0, 1.0));
        let e = embed_real(&a);
        assert_eq!(e, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
    }

    #[test]
    fn embed_real_matrix_is_block_diagonal() {
        let a = DMatrix::from_fn(3, 4, |i, j| C64::new((i * 4 + j) as f64, 0.0));
        let e = embed_real(&a);
        for i in 0..6 {
            for j in 0..8 {
                let want = if (i < 3) == (j < 4) { a[(i % 3, j % 4)].re } else { 0.0 };
                assert_eq!(e[(i, j)], want);
            }
        }
    }

    #[test]
    fn embedding_commutes_with_matvec() {
        let a = random_complex(7, 12, 1);
        let x = random_complex(12, 1, 2).column(0).into_owned();
        let lhs = embed_real(&a) * to_real_vec(&x);
        let rhs = to_real_vec(&(&a * &x));
        assert!((lhs - rhs).amax() <= 1e-12);
    }

    #[test]
    fn embedding_is_multiplicative() {
        for seed in 0..5 {
            let a = random_complex(4, 4, 10 + seed);
            let b = random_complex(4, 4, 20 + seed);
            let lhs = embed_real(&(&a * &b));
            let rhs = embed_real(&a) * embed_real(&b);
            assert!((lhs - rhs).amax() <= 1e-10);
        }
    }

    #[test]
    fn split_halves() {
        let (re, im) = split_vec(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(re, &[1.0, 2.0]);
        assert_eq!(im, &[3.0, 4.0]);
        assert!(matches!(split_vec(&[1.0, 2.0, 3.0]), Err(Error::InvalidShape(_))));
        assert!(split_real_imag(&DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn split_of_embedding_is_top_block_row() {
        let a = random_complex(3, 5, 4);
        let (top, bottom) = split_real_imag(&embed_real(&a)).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                assert_eq!(top[(i, j)], a[(i, j)].re);
                assert_eq!(top[(i, j + 5)], -a[(i, j)].im);
                assert_eq!(bottom[(i, j)], a[(i, j)].im);
                assert_eq!(bottom[(i, j + 5)], a[(i, j)].re);
            }
        }
    }

    #[test]
    fn complex_round_trip_is_exact() {
        let x = random_complex(9, 1, 8).column(0).into_owned();
        let back = to_complex_vec(to_real_vec(&x).as_slice()).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn snr_conversions() {
        let s = snr_to_sigma2(1.0, 1.0, 10.0 * 0.5f64.log10()).unwrap();
        assert!(close(s, 1.0, 1e-12));
        let s = snr_to_sigma2(1.0, 1.0, 13.0).unwrap();
        // 1 / 10^1.3, evaluated with 40-digit arithmetic.
        assert!(close(2.0 * s, 0.050_118_723_362_727_23, 1e-15));
        let s = sigma2_for_snr(0.7, 1.0, 1.0, SnrUnit::Linear).unwrap();
        assert!(close(s * 6.0, 2.19, 1e-12));
        assert!(matches!(snr_to_sigma2(0.0, 1.0, 10.0), Err(Error::InvalidParameter(_))));
        assert!(snr_to_sigma2(-1.0, 1.0, 10.0).is_err());
    }

    fn params(rho: f64, n: usize) -> SceneParams {
        SceneParams {
            a_min: 1.0,
            a_max: 1.0,
            rho_min: rho,
            rho_max: rho,
            snr_min: 13.0,
            snr_max: 13.0,
            n,
            snr_unit: SnrUnit::Db,
        }
    }

    #[test]
    fn empty_and_full_scenes() {
        let s = generate_scene(&params(0.0, 50), 1).unwrap();
        assert_eq!(s.l0(), 0);
        assert!(s.x0.iter().all(|z| z.norm() == 0.0));

        let mut p = params(1.0, 50);
        p.a_min = 0.7;
        p.a_max = 1.3;
        let s = generate_scene(&p, 2).unwrap();
        assert_eq!(s.l0(), 50);
        let a = s.amplitudes[0];
        assert!((0.7..=1.3).contains(&a));
        for (i, z) in s.x0.iter().enumerate() {
            assert!(close(z.norm(), a, 1e-12));
            let want = C64::from_polar(s.amplitudes[i], s.phases[i]);
            assert_eq!(*z, want);
        }
        assert!(s.phases.iter().all(|p| (-PI..=PI).contains(p)));
        assert!(s.noise_sigma2 > 0.0);
    }

    #[test]
    fn support_matches_occupancy() {
        let s = generate_scene(&params(0.3, 200), 9).unwrap();
        let from_q: Vec<usize> = (0..200).filter(|&i| s.occupancy[i]).collect();
        assert_eq!(s.support, from_q);
        assert_eq!(s.x0_ri, to_real_vec(&s.x0));
    }

    #[test]
    fn mean_support_size_matches_binomial() {
        let p = params(0.03, 1000);
        let draws = 10_000u64;
        let total: usize = (0..draws).map(|k| generate_scene(&p, k).unwrap().l0()).sum();
        let mean = total as f64 / draws as f64;
        let tol = 3.0 * (1000.0 * 0.03 * 0.97 / draws as f64).sqrt();
        assert!((mean - 30.0).abs() <= tol, "mean L0 = {mean}");
    }

    #[test]
    fn empirical_density_tracks_drawn_rho() {
        let mut p = params(0.0, 10_000);
        p.rho_min = 0.01;
        p.rho_max = 0.2;
        for seed in 0..5 {
            let s = generate_scene(&p, seed).unwrap();
            let n = 10_000.0;
            let sd = (n * s.rho * (1.0 - s.rho)).sqrt();
            assert!((s.l0() as f64 - n * s.rho).abs() <= 3.0 * sd);
        }
    }

    #[test]
    fn noiseless_measurement_is_exact() {
        let model = make_partial_fourier(8, 16, 1).unwrap();
        let mut scene = generate_scene(&params(0.5, 16), 4).unwrap();
        scene.noise_sigma2 = 0.0;
        let m = measure(&model, &scene, 5).unwrap();
        let direct = model.a() * &scene.x0;
        assert_eq!(m.y, direct);
    }

    #[test]
    fn pure_noise_has_expected_variance() {
        let model = make_partial_fourier(1, 4, 1).unwrap();
        let scene = generate_scene(&params(0.0, 4), 4).unwrap();
        let draws = 100_000u64;
        let mut acc = 0.0;
        for k in 0..draws {
            let m = measure(&model, &scene, k).unwrap();
            assert_eq!(m.y, m.noise);
            acc += m.y[0].re * m.y[0].re;
        }
        let var = acc / draws as f64;
        assert!((var / scene.noise_sigma2 - 1.0).abs() < 0.02, "var = {var}");
    }

    #[test]
    fn measurement_consistent_with_embedding() {
        let model = make_gaussian(10, 30, 2).unwrap();
        let scene = generate_scene(&params(0.2, 30), 3).unwrap();
        let m = measure(&model, &scene, 6).unwrap();
        let via_ri = model.a_ri() * &scene.x0_ri + to_real_vec(&m.noise);
        assert!((via_ri - &m.y_ri).amax() <= 1e-12);
        assert!(matches!(
            measure(&model, &generate_scene(&params(0.2, 31), 3).unwrap(), 0),
            Err(Error::InvalidDimensions(_))
        ));
    }

    #[test]
    fn amplitude_cases() {
        assert_eq!(amplitude(&[3.0, 4.0]).unwrap(), vec![5.0]);
        assert_eq!(amplitude(&[0.0; 6]).unwrap(), vec![0.0; 3]);
        let a = amplitude(&[1.5, -2.0, 0.5, 3.0]).unwrap();
        let b = amplitude(&[-1.5, -2.0, -0.5, 3.0]).unwrap();
        assert_eq!(a[0], b[0]);
        let c = amplitude(&[1.5, 2.0, 0.5, -3.0]).unwrap();
        assert_eq!(a[1], c[1]);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let model = make_partial_fourier(5, 9, 1).unwrap();
        let scene = generate_scene(&params(0.3, 9), 2).unwrap();
        let m = measure(&model, &scene, 3).unwrap();
        let mut buf = Vec::new();
        write_measurement_csv(&mut buf, &m.y).unwrap();
        let back = read_measurement_csv(&buf[..]).unwrap();
        assert_eq!(back, m.y);

        let bad = b"index,re,im\n0,1.0,2.0\n1,abc,3\n";
        match read_measurement_csv(&bad[..]) {
            Err(Error::Parse { line, field, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(field, "re");
            }
            other => panic!("{other:?}"),
        }
        assert!(read_measurement_csv(&b"index,re,im\n1,0,0\n"[..]).is_err());

        let mut buf = Vec::new();
        write_scene_csv(&mut buf, &scene).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("index,re,im,occupied\n"));
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn matrix_cache_round_trip() {
        let model = make_partial_fourier(6, 10, 77).unwrap();
        let mut buf = Vec::new();
        write_matrix_cache(&mut buf, &model).unwrap();
        assert_eq!(&buf[..5], b"UFCM1");
        assert_eq!(u64::from_le_bytes(buf[5..13].try_into().unwrap()), 6);
        assert_eq!(u64::from_le_bytes(buf[13..21].try_into().unwrap()), 10);
        assert_eq!(buf.len(), 5 + 16 + 6 * 8 + 6 * 10 * 16);
        let back = read_matrix_cache(&mut &buf[..], MatrixKind::PartialFourier, 77).unwrap();
        assert_eq!(back.a(), model.a());
        assert_eq!(back.row_selection(), model.row_selection());

        let dir = tempfile::tempdir().unwrap();
        let a = load_or_build(dir.path(), MatrixKind::Gaussian, 4, 6, 3).unwrap();
        assert!(dir.path().join(cache_file_name(MatrixKind::Gaussian, 4, 6, 3)).exists());
        let b = load_or_build(dir.path(), MatrixKind::Gaussian, 4, 6, 3).unwrap();
        assert_eq!(a.a(), b.a());
    }
}
