//! Layer-wise training of the unfolded network and parameter persistence.
//!
//! Each layer has two scalars, `(sigma_w, theta)`. Layers are learned one at
//! a time with earlier layers frozen, by a derivative-free search over
//! `(ln sigma_w, ln theta)` of the empirical MSE of the layer's sparse
//! output on freshly drawn scenes.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;
use crate::signal::{simulate, MatrixKind, ObservationModel, SceneParams};
use crate::vamp::{
    clamp_divergence, extrinsic_update, run_vamp, soft, LayerInput, LmmseFactor, VampConfig, VampLayerParams,
};

pub const PARAMS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    /// Nested 2-D grids, each zoomed around the previous best point.
    #[default]
    #[serde(rename = "coordinate-grid-refine")]
    CoordinateGridRefine,
    /// The grid search followed by a Nelder-Mead polish.
    #[serde(rename = "nelder-mead")]
    NelderMead,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::CoordinateGridRefine => "coordinate-grid-refine",
            Optimizer::NelderMead => "nelder-mead",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coordinate-grid-refine" => Ok(Optimizer::CoordinateGridRefine),
            "nelder-mead" => Ok(Optimizer::NelderMead),
            _ => Err(Error::param(format!("unknown optimizer {s:?}"))),
        }
    }
}

/// Closed search box for one layer's parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchBounds {
    pub sigma_w: [f64; 2],
    pub theta: [f64; 2],
}

impl SearchBounds {
    /// Two decades either side of `sigma_w_init`; `theta` in `[0.05, 5]`.
    pub fn around(sigma_w_init: f64) -> Self {
        SearchBounds {
            sigma_w: [sigma_w_init / 100.0, sigma_w_init * 100.0],
            theta: [0.05, 5.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("sigma_w", self.sigma_w), ("theta", self.theta)] {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(Error::param(format!(
                    "{name} bounds must satisfy 0 < lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &VampLayerParams) -> bool {
        (self.sigma_w[0]..=self.sigma_w[1]).contains(&p.sigma_w) && (self.theta[0]..=self.theta[1]).contains(&p.theta)
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub layers: usize,
    /// Batches drawn per layer.
    pub k_epoch: usize,
    /// Scenes per batch.
    pub batch_size: usize,
    pub init: Vec<VampLayerParams>,
    pub optimizer: Optimizer,
    pub bounds: SearchBounds,
    pub seed: u64,
    /// Points per axis on each grid level.
    pub grid_points: usize,
    pub zoom_levels: usize,
    /// Loss evaluations allowed for the Nelder-Mead polish.
    pub polish_evals: usize,
    pub v_clamp_eps: f64,
    pub exec: Exec,
}

impl TrainConfig {
    /// Defaults: 8 batches of 32 scenes, `sigma_w` initialised to the noise
    /// standard deviation at the middle of the SNR range, `theta = 1`.
    pub fn new(layers: usize, scene: &SceneParams, seed: u64) -> Result<Self> {
        let sigma_w = scene.mid_sigma2()?.sqrt();
        Ok(TrainConfig {
            layers,
            k_epoch: 8,
            batch_size: 32,
            init: vec![VampLayerParams { sigma_w, theta: 1.0 }; layers],
            optimizer: Optimizer::default(),
            bounds: SearchBounds::around(sigma_w),
            seed,
            grid_points: 9,
            zoom_levels: 3,
            polish_evals: 40,
            v_clamp_eps: 1e-6,
            exec: Exec::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::param("training needs at least one layer"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if self.init.len() != self.layers {
            return Err(Error::param(format!(
                "{} initial parameter sets for {} layers",
                self.init.len(),
                self.layers
            )));
        }
        self.bounds.validate()?;
        for (t, p) in self.init.iter().enumerate() {
            p.validate()?;
            if !self.bounds.contains(p) {
                return Err(Error::param(format!(
                    "initial parameters of layer {} lie outside the search bounds",
                    t + 1
                )));
            }
        }
        if self.grid_points < 2 || self.zoom_levels == 0 {
            return Err(Error::param("grid search needs at least 2 points per axis and 1 level"));
        }
        VampConfig {
            v_clamp_eps: self.v_clamp_eps,
            ..VampConfig::new(self.layers)
        }
        .validate()
    }

    fn vamp_config(&self) -> VampConfig {
        VampConfig {
            v_clamp_eps: self.v_clamp_eps,
            ..VampConfig::new(self.layers)
        }
    }
}

/// Where a parameter set came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub scene: SceneParams,
    pub model_kind: MatrixKind,
    pub m: usize,
    pub n: usize,
    pub model_seed: u64,
    pub train_seed: u64,
    pub k_epoch: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Final training loss per layer; absent when nothing was trained.
    pub layer_loss: Vec<Option<f64>>,
    /// Layers whose search did not beat the initial values.
    pub init_fallback: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedParams {
    pub layers: Vec<VampLayerParams>,
    /// `None` when loaded from a file without provenance.
    pub provenance: Option<Provenance>,
}

impl TrainedParams {
    pub fn untrained(layers: Vec<VampLayerParams>) -> Self {
        TrainedParams {
            layers,
            provenance: None,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Validation("parameter set has no layers".into()));
        }
        for (t, p) in self.layers.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::Validation(format!("layer {}: {e}", t + 1)))?;
        }
        if let Some(p) = &self.provenance {
            if p.layer_loss.len() != self.layers.len() || p.init_fallback.len() != self.layers.len() {
                return Err(Error::Validation("provenance does not match the layer count".into()));
            }
        }
        Ok(())
    }
}

/// `(1/D) sum_d |x_hat_d - x_d|^2`.
pub fn mse_loss(x_hat: &[DVector<f64>], x_true: &[DVector<f64>]) -> Result<f64> {
    if x_hat.len() != x_true.len() || x_hat.is_empty() {
        return Err(Error::shape(format!(
            "batch sizes {} and {}",
            x_hat.len(),
            x_true.len()
        )));
    }
    let mut acc = 0.0;
    for (a, b) in x_hat.iter().zip(x_true) {
        if a.len() != b.len() {
            return Err(Error::shape(format!("vector lengths {} and {}", a.len(), b.len())));
        }
        acc += (a - b).norm_squared();
    }
    Ok(acc / x_hat.len() as f64)
}

/// `sum |x_hat - x|^2 / sum |x|^2` over a batch.
pub fn nmse(x_hat: &[DVector<f64>], x_true: &[DVector<f64>]) -> Result<f64> {
    let err = mse_loss(x_hat, x_true)? * x_hat.len() as f64;
    let energy: f64 = x_true.iter().map(|x| x.norm_squared()).sum();
    if energy == 0.0 {
        return Err(Error::shape("reference batch has zero energy"));
    }
    Ok(err / energy)
}

struct Sample {
    uty: DVector<f64>,
    input: LayerInput,
    x_true: DVector<f64>,
}

/// Training loss of one layer as a function of its two parameters, with
/// the frozen prefix already applied to every scene.
struct LayerObjective<'a> {
    factor: &'a LmmseFactor,
    samples: Vec<Sample>,
    eps: f64,
    exec: Exec,
}

impl LayerObjective<'_> {
    /// Mean loss for every `theta` at one `sigma_w`. The LMMSE half of the
    /// layer depends only on `sigma_w`, so it is shared across `thetas`.
    fn losses(&mut self, sigma_w: f64, thetas: &[f64]) -> Result<Vec<f64>> {
        let (factor, samples, eps) = (self.factor, &self.samples, self.eps);
        let per_scene = self.exec.map(samples.len(), |i| -> Result<Vec<f64>> {
            let s = &samples[i];
            let (x_t, vt_raw) = factor.denoise(&s.uty, &s.input.r_tilde, s.input.sigma2_tilde, sigma_w);
            let vt = clamp_divergence(vt_raw, eps);
            let (r, sigma2) = extrinsic_update(&x_t, vt, &s.input.r_tilde, s.input.sigma2_tilde)?;
            let sigma = sigma2.sqrt();
            Ok(thetas
                .iter()
                .map(|&theta| {
                    let lambda = theta * sigma;
                    r.iter()
                        .zip(s.x_true.iter())
                        .map(|(&r, &x)| {
                            let d = soft(r, lambda) - x;
                            d * d
                        })
                        .sum()
                })
                .collect())
        });
        let mut total = vec![0.0; thetas.len()];
        for scene in per_scene {
            for (t, l) in total.iter_mut().zip(scene?) {
                *t += l;
            }
        }
        let n = samples.len() as f64;
        Ok(total.into_iter().map(|t| t / n).collect())
    }

    fn loss(&mut self, p: VampLayerParams) -> Result<f64> {
        Ok(self.losses(p.sigma_w, &[p.theta])?[0])
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Search in `(ln sigma_w, ln theta)`, mapped back into the bounds.
struct LogBox {
    lo: [f64; 2],
    hi: [f64; 2],
    bounds: SearchBounds,
}

impl LogBox {
    fn new(bounds: SearchBounds) -> Self {
        LogBox {
            lo: [bounds.sigma_w[0].ln(), bounds.theta[0].ln()],
            hi: [bounds.sigma_w[1].ln(), bounds.theta[1].ln()],
            bounds,
        }
    }

    fn params(&self, u: [f64; 2]) -> VampLayerParams {
        VampLayerParams {
            sigma_w: u[0].exp().clamp(self.bounds.sigma_w[0], self.bounds.sigma_w[1]),
            theta: u[1].exp().clamp(self.bounds.theta[0], self.bounds.theta[1]),
        }
    }

    fn project(&self, u: [f64; 2]) -> [f64; 2] {
        [u[0].clamp(self.lo[0], self.hi[0]), u[1].clamp(self.lo[1], self.hi[1])]
    }
}

struct SearchResult {
    best: VampLayerParams,
    loss: f64,
    fallback: bool,
}

fn search_layer(obj: &mut LayerObjective, init: VampLayerParams, cfg: &TrainConfig) -> Result<SearchResult> {
    let init_loss = obj.loss(init)?;
    let space = LogBox::new(cfg.bounds);
    let (mut lo, mut hi) = (space.lo, space.hi);
    let mut best_u = [init.sigma_w.ln(), init.theta.ln()];
    let mut best = f64::INFINITY;
    let mut step = [0.0; 2];

    for _ in 0..cfg.zoom_levels {
        let us = linspace(lo[0], hi[0], cfg.grid_points);
        let ts = linspace(lo[1], hi[1], cfg.grid_points);
        let thetas: Vec<f64> = ts.iter().map(|&t| space.params([lo[0], t]).theta).collect();
        for &u in &us {
            let sigma_w = space.params([u, lo[1]]).sigma_w;
            for (j, l) in obj.losses(sigma_w, &thetas)?.into_iter().enumerate() {
                if l < best {
                    best = l;
                    best_u = [u, ts[j]];
                }
            }
        }
        step = [
            (hi[0] - lo[0]) / (cfg.grid_points - 1) as f64,
            (hi[1] - lo[1]) / (cfg.grid_points - 1) as f64,
        ];
        for k in 0..2 {
            lo[k] = (best_u[k] - step[k]).max(space.lo[k]);
            hi[k] = (best_u[k] + step[k]).min(space.hi[k]);
        }
    }

    if cfg.optimizer == Optimizer::NelderMead {
        let (u, l) = nelder_mead(
            |u| obj.loss(space.params(space.project(u))),
            best_u,
            step,
            best,
            cfg.polish_evals,
        )?;
        if l < best {
            best = l;
            best_u = space.project(u);
        }
    }

    if best < init_loss {
        Ok(SearchResult {
            best: space.params(best_u),
            loss: best,
            fallback: false,
        })
    } else {
        Ok(SearchResult {
            best: init,
            loss: init_loss,
            fallback: true,
        })
    }
}

/// Minimises `f` over the plane from `x0` with initial edge lengths
/// `step`. Standard reflection/expansion/contraction/shrink coefficients.
fn nelder_mead(
    mut f: impl FnMut([f64; 2]) -> Result<f64>,
    x0: [f64; 2],
    step: [f64; 2],
    f0: f64,
    max_evals: usize,
) -> Result<([f64; 2], f64)> {
    let mut simplex = vec![(x0, f0)];
    let mut evals = 0;
    for k in 0..2 {
        let mut x = x0;
        x[k] += step[k];
        simplex.push((x, f(x)?));
        evals += 1;
    }
    let lerp = |a: [f64; 2], b: [f64; 2], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];

    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[2].1);
        if (worst - best).abs() <= 1e-12 * best.abs() {
            break;
        }
        let centroid = lerp(simplex[0].0, simplex[1].0, 0.5);
        let xr = lerp(centroid, simplex[2].0, -1.0);
        let fr = f(xr)?;
        evals += 1;
        if fr < best {
            let xe = lerp(centroid, simplex[2].0, -2.0);
            let fe = f(xe)?;
            evals += 1;
            simplex[2] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[1].1 {
            simplex[2] = (xr, fr);
        } else {
            let xc = if fr < worst {
                lerp(centroid, xr, 0.5)
            } else {
                lerp(centroid, simplex[2].0, 0.5)
            };
            let fc = f(xc)?;
            evals += 1;
            if fc < worst.min(fr) {
                simplex[2] = (xc, fc);
            } else {
                for i in 1..3 {
                    let x = lerp(simplex[0].0, simplex[i].0, 0.5);
                    simplex[i] = (x, f(x)?);
                    evals += 1;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(simplex[0])
}

/// Greedy layer-wise training. Layer `t` is learned on `k_epoch` fresh
/// batches after running the already-learned layers `1..t` on them.
pub fn train_layerwise(model: &ObservationModel, scene: &SceneParams, cfg: &TrainConfig) -> Result<TrainedParams> {
    cfg.validate()?;
    scene.validate()?;
    if scene.n != model.n() {
        return Err(Error::dims(format!(
            "scene has {} cells, model {} columns",
            scene.n,
            model.n()
        )));
    }
    let factor = model.lmmse_factor()?;
    let vcfg = cfg.vamp_config();

    let mut learned: Vec<VampLayerParams> = Vec::with_capacity(cfg.layers);
    let mut layer_loss = Vec::with_capacity(cfg.layers);
    let mut init_fallback = Vec::with_capacity(cfg.layers);
    for t in 0..cfg.layers {
        let init = cfg.init[t];
        if cfg.k_epoch == 0 {
            learned.push(init);
            layer_loss.push(None);
            init_fallback.push(false);
            continue;
        }
        let n = cfg.k_epoch * cfg.batch_size;
        let prefix = &learned;
        let samples = cfg.exec.map(n, |i| -> Result<Sample> {
            let seed = rng::split_seed2(cfg.seed, t as u64, i as u64);
            let (sc, meas) = simulate(model, scene, seed)?;
            let uty = factor.project(&meas.y_ri)?;
            let mut input = LayerInput::initial(model, &meas.y_ri, &vcfg)?;
            for p in prefix {
                input = input.step(factor, &uty, p, cfg.v_clamp_eps)?.next;
            }
            Ok(Sample {
                uty,
                input,
                x_true: sc.x0_ri,
            })
        });
        let mut obj = LayerObjective {
            factor,
            samples: samples.into_iter().collect::<Result<_>>()?,
            eps: cfg.v_clamp_eps,
            exec: cfg.exec,
        };
        let res = search_layer(&mut obj, init, cfg)?;
        learned.push(res.best);
        layer_loss.push(Some(res.loss));
        init_fallback.push(res.fallback);
    }

    Ok(TrainedParams {
        layers: learned,
        provenance: Some(Provenance {
            scene: *scene,
            model_kind: model.kind(),
            m: model.m(),
            n: model.n(),
            model_seed: model.seed(),
            train_seed: cfg.seed,
            k_epoch: cfg.k_epoch,
            batch_size: cfg.batch_size,
            optimizer: cfg.optimizer,
            layer_loss,
            init_fallback,
        }),
    })
}

/// Runs the trained network; returns `(x_hat_RI, r_RI)`.
pub fn test_unfolded(
    y_ri: &DVector<f64>,
    model: &ObservationModel,
    trained: &TrainedParams,
    config: &VampConfig,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if trained.depth() != config.layers {
        return Err(Error::param(format!(
            "network has {} layers, config expects {}",
            trained.depth(),
            config.layers
        )));
    }
    let out = run_vamp(y_ri, model, &trained.layers, config)?;
    Ok((out.x_hat_ri, out.r_ri))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    version: u32,
    #[serde(rename = "T")]
    depth: usize,
    layers: Vec<VampLayerParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

/// JSON with shortest round-trip float formatting, so reloads are exact.
pub fn write_params<W: Write>(w: &mut W, trained: &TrainedParams) -> Result<()> {
    trained.validate()?;
    let file = ParamsFile {
        version: PARAMS_VERSION,
        depth: trained.depth(),
        layers: trained.layers.clone(),
        provenance: trained.provenance.clone(),
    };
    serde_json::to_writer_pretty(&mut *w, &file).map_err(|e| Error::Io(e.into()))?;
    writeln!(w)?;
    Ok(())
}

pub fn read_params<R: Read>(r: R) -> Result<TrainedParams> {
    let file: ParamsFile = serde_json::from_reader(r).map_err(|e| {
        let msg = e.to_string();
        // serde_json appends " at line L column C"; keep the message part.
        let message = msg.split(" at line ").next().unwrap_or(&msg).to_string();
        let field = message
            .split('`')
            .nth(1)
            .map(str::to_string)
            .unwrap_or_else(|| format!("column {}", e.column()));
        Error::Parse {
            line: e.line(),
            field,
            message,
        }
    })?;
    if file.version != PARAMS_VERSION {
        return Err(Error::Validation(format!(
            "unsupported params version {}",
            file.version
        )));
    }
    if file.depth != file.layers.len() {
        return Err(Error::Validation(format!(
            "T = {} but {} layers listed",
            file.depth,
            file.layers.len()
        )));
    }
    let trained = TrainedParams {
        layers: file.layers,
        provenance: file.provenance,
    };
    trained.validate()?;
    Ok(trained)
}

pub fn save_params(path: &Path, trained: &TrainedParams) -> Result<()> {
    write_atomic(path, |w| write_params(w, trained))
}

pub fn load_params(path: &Path) -> Result<TrainedParams> {
    read_params(std::io::BufReader::new(std::fs::File::open(path)?))
}
