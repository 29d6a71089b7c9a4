use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use vamp_pcd::atomic::write_atomic;
use vamp_pcd::diagnostics::{ecdf_from_trials, monte_carlo_roc, run_trials, write_metrics_csv};
use vamp_pcd::pcd::{run_pcd, PcdConfig};
use vamp_pcd::signal::{
    amplitude, read_measurement_csv, simulate, to_real_vec, write_measurement_csv, write_scene_csv,
};
use vamp_pcd::theory::{approx_fixed_point, iterate_fixed_point, pfa_window};
use vamp_pcd::unfold::{load_params, save_params, test_unfolded, train_layerwise, TrainedParams};
use vamp_pcd::{Exec, VampConfig};

use crate::config::ExperimentConfig;

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub exec: Exec,
    pub params: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.run.out.join(name)
    }

    fn params_path(&self) -> PathBuf {
        self.params.clone().unwrap_or_else(|| self.cfg.params_path())
    }

    fn load_trained(&self) -> Result<TrainedParams> {
        let path = self.params_path();
        let trained =
            load_params(&path).with_context(|| format!("loading trained parameters from {}", path.display()))?;
        if trained.depth() != self.cfg.unfold.layers {
            bail!(
                "{} holds a {}-layer network but the config asks for {}",
                path.display(),
                trained.depth(),
                self.cfg.unfold.layers
            );
        }
        Ok(trained)
    }

    fn write(
        &self,
        name: &str,
        command: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> vamp_pcd::Result<()>,
    ) -> Result<PathBuf> {
        let path = self.out(name);
        let header = self.cfg.header(command);
        write_atomic(&path, |w| {
            w.write_all(header.as_bytes())?;
            body(w)
        })
        .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(path)
    }
}

pub fn train(ctx: &Ctx) -> Result<()> {
    let model = ctx.cfg.build_model()?;
    let tcfg = ctx.cfg.train_config(ctx.exec)?;
    let trained = train_layerwise(&model, &ctx.cfg.unfold.train_scene, &tcfg)?;
    if let Some(p) = &trained.provenance {
        for (t, (layer, loss)) in trained.layers.iter().zip(&p.layer_loss).enumerate() {
            let loss = loss.map_or_else(|| "-".to_string(), |l| format!("{l:.6}"));
            let flag = if p.init_fallback[t] { "  (kept init)" } else { "" };
            println!(
                "layer {}: sigma_w = {:.6}, theta = {:.6}, loss = {loss}{flag}",
                t + 1,
                layer.sigma_w,
                layer.theta
            );
        }
    }
    let path = ctx.params_path();
    save_params(&path, &trained).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn trials_batch(
    ctx: &Ctx,
    presets: &[f64],
) -> Result<(vamp_pcd::diagnostics::RocCurve, vamp_pcd::diagnostics::TrialBatch)> {
    let model = ctx.cfg.build_model()?;
    let trained = ctx.load_trained()?;
    let run = &ctx.cfg.run;
    let (roc, batch) = monte_carlo_roc(
        &model,
        &trained,
        &ctx.cfg.scene,
        &ctx.cfg.pcd,
        presets,
        run.trials,
        run.master_seed,
        ctx.exec,
    )?;
    for (i, msg) in &batch.failures {
        eprintln!("trial {i} failed: {msg}");
    }
    if batch.outcomes.is_empty() {
        bail!("every trial failed");
    }
    Ok((roc, batch))
}

pub fn roc(ctx: &Ctx) -> Result<()> {
    let (roc, batch) = trials_batch(ctx, &ctx.cfg.run.presets)?;
    ctx.write("roc.csv", "roc", |w| roc.write_csv(w))?;
    ctx.write("trials.csv", "roc", |w| write_metrics_csv(w, &batch))?;
    Ok(())
}

pub fn pfa_control(ctx: &Ctx) -> Result<()> {
    let (roc, _) = trials_batch(ctx, &ctx.cfg.run.presets)?;
    ctx.write("pfa_control.csv", "pfa-control", |w| roc.write_pfa_control_csv(w))?;
    Ok(())
}

pub fn ecdf(ctx: &Ctx) -> Result<()> {
    let model = ctx.cfg.build_model()?;
    let trained = ctx.load_trained()?;
    let run = &ctx.cfg.run;
    let batch = run_trials(
        &model,
        &trained,
        &ctx.cfg.scene,
        &ctx.cfg.pcd,
        &VampConfig::new(trained.depth()),
        run.trials,
        run.master_seed,
        ctx.exec,
    )?;
    if batch.outcomes.is_empty() {
        bail!("every trial failed");
    }
    let report = ecdf_from_trials(&batch)?;
    for c in &report.curves {
        if let Some(d) = &c.diff {
            println!(
                "{} {} {}: sup|D| = {:.4} over {} samples",
                c.part, c.hypothesis, c.normalizer, d.sup_abs, d.count
            );
        }
    }
    ctx.write("ecdf.csv", "ecdf", |w| report.write_csv(w, run.ecdf_points))?;
    Ok(())
}

pub fn theory(ctx: &Ctx) -> Result<()> {
    let t = &ctx.cfg.theory;
    let study = iterate_fixed_point(t.init, t.sigma2_true, t.pfa0, t.tol, t.max_iter)?;
    let window = pfa_window(t.init, t.sigma2_true, &[], study.limit)?;
    println!(
        "limit {:.9} (closed-form approximation {:.9}) after {} steps",
        study.limit,
        approx_fixed_point(t.sigma2_true, t.pfa0),
        study.iterates.len() - 1
    );
    ctx.write("theory.csv", "theory", |w| study.write_csv(w, Some(&window)))?;
    Ok(())
}

pub fn detect(ctx: &Ctx, measurement: &Path) -> Result<()> {
    let model = ctx.cfg.build_model()?;
    let trained = ctx.load_trained()?;
    let file = std::fs::File::open(measurement).with_context(|| format!("opening {}", measurement.display()))?;
    let y = read_measurement_csv(BufReader::new(file)).with_context(|| format!("reading {}", measurement.display()))?;
    if y.len() != model.m() {
        bail!(
            "{} has {} samples, the model expects {}",
            measurement.display(),
            y.len(),
            model.m()
        );
    }
    let y_ri = to_real_vec(&y);
    let (x_hat, r) = test_unfolded(&y_ri, &model, &trained, &VampConfig::new(trained.depth()))?;
    let pcd: &PcdConfig = &ctx.cfg.pcd;
    let res = run_pcd(x_hat.as_slice(), r.as_slice(), pcd)?;
    let amp = amplitude(r.as_slice())?;
    let n = model.n();
    println!(
        "{} detections, sigma2_pcd = {:.6e}, threshold = {:.6}",
        res.detected_support.len(),
        res.sigma2_pcd,
        res.threshold
    );
    ctx.write("detections.csv", "detect", |w| {
        writeln!(w, "# sigma2_pcd = {}", res.sigma2_pcd)?;
        writeln!(w, "# threshold = {}", res.threshold)?;
        writeln!(w, "# pcd_iterations = {}", res.iterations())?;
        writeln!(w, "# converged = {}", res.converged)?;
        writeln!(w, "index,amplitude,re,im")?;
        for &i in &res.detected_support {
            writeln!(w, "{},{},{},{}", i, amp[i], r[i], r[i + n])?;
        }
        Ok(())
    })?;
    Ok(())
}

pub fn gen_measurement(ctx: &Ctx) -> Result<()> {
    let model = ctx.cfg.build_model()?;
    let (scene, meas) = simulate(&model, &ctx.cfg.scene, ctx.cfg.run.master_seed)?;
    println!(
        "{} occupied cells, noise variance {:.6e} per coordinate",
        scene.l0(),
        scene.noise_sigma2
    );
    ctx.write("measurement.csv", "gen-measurement", |w| {
        write_measurement_csv(w, &meas.y)
    })?;
    ctx.write("scene.csv", "gen-measurement", |w| write_scene_csv(w, &scene))?;
    Ok(())
}
