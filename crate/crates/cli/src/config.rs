//! Experiment configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vamp_pcd::pcd::PcdConfig;
use vamp_pcd::signal::{load_or_build, MatrixKind, ObservationModel, SceneParams};
use vamp_pcd::unfold::{Optimizer, SearchBounds, TrainConfig};
use vamp_pcd::{Exec, VampLayerParams};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    /// Scene distribution used for evaluation runs.
    pub scene: SceneParams,
    pub unfold: UnfoldSection,
    pub pcd: PcdConfig,
    pub run: RunSection,
    #[serde(default)]
    pub theory: TheorySection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: MatrixKind,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    /// Directory for cached sensing matrices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnfoldSection {
    pub layers: usize,
    #[serde(default = "default_k_epoch")]
    pub k_epoch: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Defaults to the noise level at the middle of the training SNR range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_w_init: Option<f64>,
    #[serde(default = "default_theta_init")]
    pub theta_init: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<SearchBounds>,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_zoom_levels")]
    pub zoom_levels: usize,
    #[serde(default = "default_polish_evals")]
    pub polish_evals: usize,
    /// Trained-parameter file; relative paths resolve against the output
    /// directory. Defaults to `params.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
    pub train_scene: SceneParams,
}

fn default_k_epoch() -> usize {
    8
}

fn default_batch_size() -> usize {
    32
}

fn default_theta_init() -> f64 {
    1.0
}

fn default_grid_points() -> usize {
    9
}

fn default_zoom_levels() -> usize {
    3
}

fn default_polish_evals() -> usize {
    40
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub trials: usize,
    pub presets: Vec<f64>,
    pub master_seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Points kept per curve in `ecdf.csv`.
    #[serde(default = "default_ecdf_points")]
    pub ecdf_points: usize,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_ecdf_points() -> usize {
    2000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    pub sigma2_true: f64,
    pub pfa0: f64,
    pub init: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            sigma2_true: 1.0,
            pfa0: 1e-5,
            init: 0.5,
            tol: 1e-12,
            max_iter: 200,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("[{section}] {source}")]
    Invalid {
        section: &'static str,
        source: vamp_pcd::Error,
    },
}

fn invalid(section: &'static str) -> impl Fn(vamp_pcd::Error) -> ConfigError {
    move |source| ConfigError::Invalid { section, source }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| ConfigError::Syntax {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let param = |s: &'static str, m: String| ConfigError::Invalid {
            section: s,
            source: vamp_pcd::Error::InvalidParameter(m),
        };
        if self.model.m == 0 || self.model.n == 0 || self.model.m > self.model.n {
            return Err(param(
                "model",
                format!("need 0 < m <= n, got m = {}, n = {}", self.model.m, self.model.n),
            ));
        }
        if self.model.kind == MatrixKind::Custom {
            return Err(param("model", "custom matrices cannot be built from a config".into()));
        }
        self.scene.validate().map_err(invalid("scene"))?;
        if self.scene.n != self.model.n {
            return Err(param(
                "scene",
                format!("n = {} but the model has {} columns", self.scene.n, self.model.n),
            ));
        }
        if self.unfold.train_scene.n != self.model.n {
            return Err(param(
                "unfold.train_scene",
                format!(
                    "n = {} but the model has {} columns",
                    self.unfold.train_scene.n, self.model.n
                ),
            ));
        }
        self.train_config(Exec::Sequential)?;
        self.pcd.validate().map_err(invalid("pcd"))?;
        if self.run.trials == 0 {
            return Err(param("run", "trials must be at least 1".into()));
        }
        if self.run.presets.is_empty() {
            return Err(param("run", "presets must not be empty".into()));
        }
        if let Some(p) = self.run.presets.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(param(
                "run",
                format!("preset false-alarm rates must lie in (0, 1], got {p}"),
            ));
        }
        if self.run.workers == Some(0) {
            return Err(param("run", "workers must be at least 1".into()));
        }
        let t = &self.theory;
        if !(t.sigma2_true > 0.0 && t.init > 0.0 && t.init < t.sigma2_true) {
            return Err(param("theory", "need 0 < init < sigma2_true".into()));
        }
        if !(t.pfa0 > 0.0 && t.pfa0 < 1.0) || !(t.tol > 0.0) || t.max_iter == 0 {
            return Err(param("theory", "need pfa0 in (0, 1), tol > 0 and max_iter >= 1".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, exec: Exec) -> Result<TrainConfig, ConfigError> {
        let u = &self.unfold;
        let scene = &u.train_scene;
        scene.validate().map_err(invalid("unfold.train_scene"))?;
        let mut cfg = TrainConfig::new(u.layers, scene, u.seed).map_err(invalid("unfold"))?;
        let sigma_w = u.sigma_w_init.unwrap_or(cfg.init.first().map_or(1.0, |p| p.sigma_w));
        cfg.init = vec![
            VampLayerParams {
                sigma_w,
                theta: u.theta_init,
            };
            u.layers
        ];
        cfg.k_epoch = u.k_epoch;
        cfg.batch_size = u.batch_size;
        cfg.optimizer = u.optimizer;
        cfg.bounds = u.bounds.unwrap_or_else(|| SearchBounds::around(sigma_w));
        cfg.grid_points = u.grid_points;
        cfg.zoom_levels = u.zoom_levels;
        cfg.polish_evals = u.polish_evals;
        cfg.exec = exec;
        cfg.validate().map_err(invalid("unfold"))?;
        Ok(cfg)
    }

    pub fn params_path(&self) -> PathBuf {
        let p = self
            .unfold
            .params
            .clone()
            .unwrap_or_else(|| PathBuf::from("params.json"));
        if p.is_absolute() {
            p
        } else {
            self.run.out.join(p)
        }
    }

    pub fn build_model(&self) -> vamp_pcd::Result<ObservationModel> {
        let m = &self.model;
        match &m.cache_dir {
            Some(dir) => load_or_build(dir, m.kind, m.m, m.n, m.seed),
            None => ObservationModel::build(m.kind, m.m, m.n, m.seed),
        }
    }

    /// The settings that determine results, as `# ` comment lines. Output
    /// location and worker count are left out so that they do not change
    /// file contents.
    pub fn header(&self, command: &str) -> String {
        let mut c = self.clone();
        c.run.out = PathBuf::new();
        c.run.workers = None;
        c.unfold.params = None;
        c.model.cache_dir = None;
        let body = toml::to_string(&c).unwrap_or_default();
        let mut s = format!("# vamp-pcd {command}\n");
        for line in body.lines().filter(|l| !l.trim().is_empty() && !l.starts_with("out =")) {
            s.push_str("# ");
            s.push_str(line);
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = include_str!("../../../configs/small.toml");

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax {
            path: "inline".into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn presets_parse() {
        let small = parse(SMALL).unwrap();
        assert_eq!((small.model.m, small.model.n), (200, 256));
        let large = parse(include_str!("../../../configs/large.toml")).unwrap();
        assert_eq!((large.model.m, large.model.n), (600, 1000));
        assert_eq!(large.pcd.pfa0, 1e-5);
    }

    #[test]
    fn header_ignores_location_and_workers() {
        let mut a = parse(SMALL).unwrap();
        let mut b = a.clone();
        a.run.workers = Some(1);
        b.run.workers = Some(4);
        b.run.out = "elsewhere".into();
        assert_eq!(a.header("roc"), b.header("roc"));
        assert!(a.header("roc").lines().all(|l| l.starts_with('#')));
    }

    #[test]
    fn rejects_bad_fields() {
        assert!(matches!(
            parse(&SMALL.replace("pfa0 = 1e-3", "pfa0 = 2.0")),
            Err(ConfigError::Invalid { section: "pcd", .. })
        ));
        assert!(matches!(
            parse(&SMALL.replace("[run]", "[run]\nbogus = 1")),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(parse(&SMALL.replace("trials = 500", "trials = 0")).is_err());
    }
}
