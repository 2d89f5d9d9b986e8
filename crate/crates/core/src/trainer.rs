//! Deterministic training loop: source-balanced batches, AdamW under a
//! warmup-cosine schedule, physics curriculum and validation early stopping.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{batch_forward, total_loss, BatchTargets, LossConfig, LossValues};
use crate::model::{self, save_checkpoint, ModelConfig, ModelParams};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor};
use crate::world::{Dataset, NormStats, Patch, Source, AGB, VARIABLE_NAMES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValMode {
    /// Every pixel of the validation split, against the known truth.
    AllPixels,
    /// Labelled pixels only.
    Labelled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    pub val_every_steps: usize,
    pub patience_checks: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Learning-rate multiplier for the physics coefficients.
    pub phys_lr_scale: f64,
    pub val_mode: ValMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            peak_lr: 5e-4,
            weight_decay: 1e-4,
            warmup_steps: 500,
            max_epochs: 60,
            val_every_steps: 100,
            patience_checks: 50,
            grad_clip: 5.0,
            phys_lr_scale: 20.0,
            val_mode: ValMode::AllPixels,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if self.max_epochs == 0 || self.val_every_steps == 0 || self.patience_checks == 0 {
            return Err(Error::Config(
                "max_epochs, val_every_steps and patience_checks must be positive".into(),
            ));
        }
        if !(self.peak_lr > 0.0)
            || !(self.weight_decay >= 0.0)
            || !(self.grad_clip >= 0.0)
            || !(self.phys_lr_scale > 0.0)
        {
            return Err(Error::Config(
                "need peak_lr > 0, weight_decay >= 0, grad_clip >= 0, phys_lr_scale > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch of batches as indices into `train`: half footprint patches drawn
/// without replacement, half plot patches drawn with replacement.
pub fn balanced_batches(train: &[Patch], batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::Config(format!("batch_size must be even, got {batch_size}")));
    }
    let half = batch_size / 2;
    let mut g: Vec<usize> = (0..train.len()).filter(|&i| train[i].source == Source::Gedi).collect();
    let p: Vec<usize> = (0..train.len()).filter(|&i| train[i].source == Source::Plot).collect();
    if g.is_empty() || p.is_empty() {
        return Err(Error::Invalid(format!(
            "balanced batching needs both sources; found {} footprint and {} plot patches",
            g.len(),
            p.len()
        )));
    }
    g.shuffle(rng);
    Ok(g.chunks_exact(half)
        .map(|gs| {
            let mut batch = gs.to_vec();
            batch.extend((0..half).map(|_| p[rng.gen_range(0..p.len())]));
            batch
        })
        .collect())
}

/// Batches per epoch: `⌊N_G / (B/2)⌋`.
pub fn epoch_len(n_gedi: usize, batch_size: usize) -> usize {
    n_gedi / (batch_size / 2)
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, warmup: usize, total_steps: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup).max(1) as f64;
    let t = ((step - warmup) as f64 / span).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam update.
pub fn adamw_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let ones = vec![1.0; params.len()];
    adamw_step_scaled(params, names, grads, state, lr, weight_decay, &ones)
}

/// As [`adamw_step`], with a per-block learning-rate multiplier.
pub fn adamw_step_scaled(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
    lr_scale: &[f64],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != lr_scale.len() {
        return Err(Error::Invalid("parameter, gradient and moment counts differ".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            let name = names.get(i).map_or("?", String::as_str);
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (((p, g), (m, v)), &scale) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .zip(lr_scale)
    {
        let lr = lr * scale;
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for j in 0..pd.len() {
            md[j] = BETA1 * md[j] + (1.0 - BETA1) * gd[j];
            vd[j] = BETA2 * vd[j] + (1.0 - BETA2) * gd[j] * gd[j];
            let mh = md[j] / c1;
            let vh = vd[j] / c2;
            pd[j] -= lr * weight_decay * pd[j];
            pd[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescale so the global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Validation summary at one check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValMetrics {
    /// Physical-unit RMSE per variable.
    pub rmse: Vec<f64>,
    /// Mean predicted propensity over plot rows of plot patches.
    pub mean_pi: f64,
    /// Mean true propensity over the same entries.
    pub true_pi: f64,
    /// Mean |m̂ − ŷ| (z-space) over unlabelled entries.
    pub imp_gap: f64,
}

impl ValMetrics {
    pub fn agb_rmse(&self) -> f64 {
        self.rmse[AGB]
    }
}

pub fn validate(params: &ModelParams, patches: &[Patch], norm: &NormStats, mode: ValMode) -> Result<ValMetrics> {
    let k = params.config.k;
    let mut se = vec![0.0; k];
    let mut cnt = vec![0.0; k];
    let (mut pi_sum, mut pi_true, mut pi_n) = (0.0, 0.0, 0.0);
    let (mut gap, mut gap_n) = (0.0, 0.0);
    for p in patches {
        let pred = model::predict(params, &p.covariates)?;
        let hw = p.hw();
        let rows = p.source.rows(k);
        for row in 0..k {
            for i in row * hw..(row + 1) * hw {
                let labelled = p.mask.data()[i] != 0.0;
                if mode == ValMode::AllPixels || labelled {
                    let y = norm.denormalize(row, pred.y_hat.data()[i]);
                    let e = y - p.targets.data()[i];
                    se[row] += e * e;
                    cnt[row] += 1.0;
                }
                if !labelled {
                    gap += (pred.m_hat.data()[i] - pred.y_hat.data()[i]).abs();
                    gap_n += 1.0;
                }
                if p.source == Source::Plot && rows.contains(&row) {
                    pi_sum += pred.pi_hat.data()[i];
                    pi_true += p.true_propensity.data()[i];
                    pi_n += 1.0;
                }
            }
        }
    }
    let safe = |a: f64, n: f64| if n > 0.0 { a / n } else { f64::NAN };
    Ok(ValMetrics {
        rmse: se.iter().zip(&cnt).map(|(s, c)| safe(*s, *c).sqrt()).collect(),
        mean_pi: safe(pi_sum, pi_n),
        true_pi: safe(pi_true, pi_n),
        imp_gap: safe(gap, gap_n),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss components over the steps since the previous check.
    pub losses: LossValues,
    pub lambda_phys: f64,
    pub val: ValMetrics,
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub best: ModelParams,
    pub best_step: usize,
    pub best_val_rmse: f64,
    pub log: Vec<LogRow>,
    /// Loss components of every optimisation step.
    pub step_losses: Vec<LossValues>,
    pub norm: NormStats,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Where and how a run is persisted.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub dir: Option<PathBuf>,
    pub dataset_hash: Option<String>,
    /// Print one line per validation check to stderr.
    pub verbose: bool,
}

pub const RUN_MANIFEST: &str = "manifest.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Incomplete,
    Complete,
    Failed,
}

/// Self-describing record of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    pub dataset_hash: Option<String>,
    pub seed: u64,
    pub best_step: Option<usize>,
    pub best_val_agb_rmse: Option<f64>,
    pub steps: usize,
    pub norm: NormStats,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Full-scale schedule this desk run is scaled from.
    pub reference_warmup_steps: usize,
    pub reference_total_steps: usize,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|_| Error::Missing(path.clone()))?;
        toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    fn store(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))?;
        let tmp = dir.join("manifest.toml.tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, dir.join(RUN_MANIFEST))?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.10e}")
}

fn metrics_header(k: usize) -> String {
    let mut cols: Vec<String> = ["step", "epoch", "lr", "sup", "phys", "cons", "bias", "imp", "total", "lambda_phys"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend(VARIABLE_NAMES[..k].iter().map(|v| format!("val_rmse_{v}")));
    cols.extend(["mean_pi", "true_pi", "imp_gap"].iter().map(|s| s.to_string()));
    cols.join(",")
}

fn metrics_line(r: &LogRow) -> String {
    let l = &r.losses;
    let mut cols = vec![r.step.to_string(), r.epoch.to_string(), fmt(r.lr)];
    cols.extend([l.sup, l.phys, l.cons, l.bias, l.imp, l.total, r.lambda_phys].map(fmt));
    cols.extend(r.val.rmse.iter().map(|v| fmt(*v)));
    cols.extend([r.val.mean_pi, r.val.true_pi, r.val.imp_gap].map(fmt));
    cols.join(",")
}

struct RunWriter {
    dir: PathBuf,
    manifest: RunManifest,
    metrics: fs::File,
    steps: fs::File,
}

impl RunWriter {
    fn create(dir: &Path, manifest: RunManifest) -> Result<Self> {
        fs::create_dir_all(dir)?;
        manifest.store(dir)?;
        let mut metrics = fs::File::create(dir.join(METRICS_FILE))?;
        writeln!(metrics, "{}", metrics_header(manifest.model.k))?;
        let mut steps = fs::File::create(dir.join(STEPS_FILE))?;
        writeln!(steps, "step,sup,phys,cons,bias,imp,total")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            metrics,
            steps,
        })
    }

    fn step(&mut self, step: usize, l: &LossValues) -> Result<()> {
        let vals = [l.sup, l.phys, l.cons, l.bias, l.imp, l.total].map(fmt);
        writeln!(self.steps, "{step},{}", vals.join(","))?;
        Ok(())
    }

    fn check(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.metrics, "{}", metrics_line(row))?;
        self.metrics.flush()?;
        self.steps.flush()?;
        Ok(())
    }

    fn best(&mut self, params: &ModelParams, step: usize, rmse: f64) -> Result<()> {
        save_checkpoint(params, &self.dir.join(CHECKPOINT_FILE))?;
        self.manifest.best_step = Some(step);
        self.manifest.best_val_agb_rmse = Some(rmse);
        self.manifest.store(&self.dir)
    }

    fn finish(&mut self, status: RunStatus, steps: usize, error: Option<String>) -> Result<()> {
        self.metrics.flush()?;
        self.steps.flush()?;
        self.manifest.status = status;
        self.manifest.steps = steps;
        self.manifest.error = error;
        self.manifest.store(&self.dir)
    }
}

fn check_compatible(ds: &Dataset, mc: &ModelConfig) -> Result<()> {
    let first = ds
        .train
        .first()
        .ok_or_else(|| Error::Invalid("training split is empty".into()))?;
    if first.k() != mc.k || first.covariates.shape()[0] != mc.c_in {
        return Err(Error::Incompatible(format!(
            "model expects k={} c_in={}, dataset has k={} c_in={}",
            mc.k,
            mc.c_in,
            first.k(),
            first.covariates.shape()[0]
        )));
    }
    Ok(())
}

fn mean_values(acc: &[LossValues]) -> LossValues {
    let n = acc.len().max(1) as f64;
    let mut m = LossValues::default();
    for v in acc {
        m.sup += v.sup / n;
        m.phys += v.phys / n;
        m.cons += v.cons / n;
        m.bias += v.bias / n;
        m.imp += v.imp / n;
        m.total += v.total / n;
    }
    m
}

pub fn train(
    ds: &Dataset,
    mc: &ModelConfig,
    lc: &LossConfig,
    tc: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainedRun> {
    mc.validate()?;
    lc.validate()?;
    tc.validate()?;
    check_compatible(ds, mc)?;
    let norm = NormStats::compute(&ds.train)?;
    let n_gedi = ds.train.iter().filter(|p| p.source == Source::Gedi).count();
    let per_epoch = epoch_len(n_gedi, tc.batch_size);
    if per_epoch == 0 {
        return Err(Error::Invalid(format!(
            "{n_gedi} footprint patches cannot fill a batch of {}",
            tc.batch_size
        )));
    }
    let total_steps = per_epoch * tc.max_epochs;
    let mut writer = match &opts.dir {
        Some(dir) => Some(RunWriter::create(
            dir,
            RunManifest {
                status: RunStatus::Incomplete,
                dataset_hash: opts.dataset_hash.clone(),
                seed: tc.seed,
                best_step: None,
                best_val_agb_rmse: None,
                steps: 0,
                norm: norm.clone(),
                model: mc.clone(),
                loss: lc.clone(),
                train: tc.clone(),
                reference_warmup_steps: 100_000,
                reference_total_steps: 12_500_000,
                error: None,
            },
        )?),
        None => None,
    };
    let result = run_loop(ds, mc, lc, tc, &norm, per_epoch, total_steps, writer.as_mut(), opts.verbose);
    if let Some(w) = writer.as_mut() {
        match &result {
            Ok(run) => w.finish(RunStatus::Complete, run.steps, None)?,
            Err(e) => w.finish(RunStatus::Failed, 0, Some(e.to_string()))?,
        }
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    ds: &Dataset,
    mc: &ModelConfig,
    lc: &LossConfig,
    tc: &TrainConfig,
    norm: &NormStats,
    per_epoch: usize,
    total_steps: usize,
    mut writer: Option<&mut RunWriter>,
    verbose: bool,
) -> Result<TrainedRun> {
    let mut params = ModelParams::init(mc, tc.seed)?;
    let mut state = OptimState::new(params.tensors());
    let names = params.names().to_vec();
    let lr_scale: Vec<f64> = names
        .iter()
        .map(|n| match model::component_of(n) {
            model::Component::Physics => tc.phys_lr_scale,
            _ => 1.0,
        })
        .collect();
    let val = validate(&params, &ds.val, norm, tc.val_mode)?;
    let mut best = params.clone();
    let mut best_rmse = val.agb_rmse();
    let mut best_step = 0;
    let mut log = vec![LogRow {
        step: 0,
        epoch: 0,
        lr: 0.0,
        losses: LossValues::default(),
        lambda_phys: crate::losses::lambda_phys_schedule(0.0, lc),
        val,
    }];
    if let Some(w) = writer.as_deref_mut() {
        w.check(&log[0])?;
        w.best(&best, 0, best_rmse)?;
    }
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut since_check: Vec<LossValues> = Vec::new();
    let mut stale = 0usize;
    let mut step = 0usize;
    let mut stopped_early = false;
    let mut tape = Tape::new();
    'epochs: for epoch in 0..tc.max_epochs {
        let mut sampler = rng::derive(tc.seed, 20, epoch as u64);
        let batches = balanced_batches(&ds.train, tc.batch_size, &mut sampler)?;
        debug_assert_eq!(batches.len(), per_epoch);
        for (bi, batch) in batches.iter().enumerate() {
            let patches: Vec<&Patch> = batch.iter().map(|&i| &ds.train[i]).collect();
            let xs: Vec<&Tensor> = patches.iter().map(|p| &p.covariates).collect();
            let targets = BatchTargets::new(&patches, norm)?;
            tape.reset();
            let bound = params.bind(&mut tape);
            let out = batch_forward(&mut tape, &bound, mc, lc, &xs, norm)?;
            let mut aug_rng = rng::derive(tc.seed, 21, step as u64);
            let bundle = total_loss(&mut tape, &bound, &out, &xs, &targets, epoch as f64, lc, &mut aug_rng)?;
            let values = bundle.values(&tape);
            if !values.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, batch {bi} (step {step}): {values:?}"
                )));
            }
            let grads = tape.backward(bundle.total)?;
            let mut g: Vec<Tensor> = bound
                .vars
                .iter()
                .zip(params.tensors())
                .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
                .collect();
            if tc.grad_clip > 0.0 {
                clip_global_norm(&mut g, tc.grad_clip);
            }
            let lr = lr_schedule(step, tc.warmup_steps, total_steps, tc.peak_lr);
            adamw_step_scaled(params.tensors_mut(), &names, &g, &mut state, lr, tc.weight_decay, &lr_scale)?;
            step += 1;
            if let Some(w) = writer.as_deref_mut() {
                w.step(step, &values)?;
            }
            step_losses.push(values);
            since_check.push(values);

            let last = step == total_steps;
            if step % tc.val_every_steps == 0 || last {
                let val = validate(&params, &ds.val, norm, tc.val_mode)?;
                let row = LogRow {
                    step,
                    epoch,
                    lr,
                    losses: mean_values(&since_check),
                    lambda_phys: bundle.lambda_phys,
                    val,
                };
                since_check.clear();
                if verbose {
                    eprintln!(
                        "step {step:>6} epoch {epoch:>3} loss {:.4} val AGB rmse {:.3} mean pi {:.3}",
                        row.losses.total,
                        row.val.agb_rmse(),
                        row.val.mean_pi
                    );
                }
                let rmse = row.val.agb_rmse();
                if let Some(w) = writer.as_deref_mut() {
                    w.check(&row)?;
                }
                log.push(row);
                if rmse < best_rmse {
                    best_rmse = rmse;
                    best = params.clone();
                    best_step = step;
                    stale = 0;
                    if let Some(w) = writer.as_deref_mut() {
                        w.best(&best, step, rmse)?;
                    }
                } else {
                    stale += 1;
                    if stale >= tc.patience_checks {
                        stopped_early = true;
                        break 'epochs;
                    }
                }
            }
        }
    }
    Ok(TrainedRun {
        best,
        best_step,
        best_val_rmse: best_rmse,
        log,
        step_losses,
        norm: norm.clone(),
        steps: step,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldConfig};

    fn tiny_world() -> Dataset {
        generate_world(&WorldConfig {
            patch_size: 6,
            n_gedi: 40,
            n_plot: 8,
            c_in: 4,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn sampler_composition_and_coverage() {
        let ds = tiny_world();
        let n_g = ds.train.iter().filter(|p| p.source == Source::Gedi).count();
        let batches = balanced_batches(&ds.train, 6, &mut rng::seeded(1)).unwrap();
        assert_eq!(batches.len(), n_g / 3);
        assert_eq!(batches.len(), epoch_len(n_g, 6));
        let mut seen = vec![0; ds.train.len()];
        for b in &batches {
            assert_eq!(b.len(), 6);
            assert_eq!(b.iter().filter(|&&i| ds.train[i].source == Source::Gedi).count(), 3);
            for &i in &b[..3] {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c <= 1));
        assert_eq!(seen.iter().sum::<usize>(), batches.len() * 3);
    }

    #[test]
    fn sampler_needs_both_sources() {
        let mut ds = tiny_world();
        ds.train.retain(|p| p.source == Source::Gedi);
        assert!(balanced_batches(&ds.train, 4, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 10, 110, 5e-4), 0.0);
        assert_eq!(lr_schedule(10, 10, 110, 5e-4), 5e-4);
        assert!((lr_schedule(60, 10, 110, 5e-4) - 2.5e-4).abs() < 1e-15);
        assert!(lr_schedule(110, 10, 110, 5e-4).abs() < 1e-15);
    }

    #[test]
    fn adamw_closed_forms() {
        let names = vec!["w".to_string()];
        // zero gradient, zero decay: fixed point
        let mut p = vec![Tensor::scalar(1.5)];
        let mut s = OptimState::new(&p);
        adamw_step(&mut p, &names, &[Tensor::scalar(0.0)], &mut s, 1e-3, 0.0).unwrap();
        assert_eq!(p[0].item(), 1.5);
        // first step with unit gradient moves by lr
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = OptimState::new(&p);
        adamw_step(&mut p, &names, &[Tensor::scalar(1.0)], &mut s, 1e-3, 0.0).unwrap();
        assert!((p[0].item() - (1.0 - 1e-3)).abs() < 1e-10);
        // decay only
        let mut p = vec![Tensor::scalar(2.0)];
        let mut s = OptimState::new(&p);
        adamw_step(&mut p, &names, &[Tensor::scalar(0.0)], &mut s, 0.1, 0.5).unwrap();
        assert!((p[0].item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_block() {
        let names = vec!["enc.stem.w".to_string()];
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = OptimState::new(&p);
        let err = adamw_step(&mut p, &names, &[Tensor::scalar(f64::NAN)], &mut s, 1e-3, 0.0).unwrap_err();
        assert!(err.to_string().contains("enc.stem.w"));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::new([2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }

    fn tiny_configs() -> (ModelConfig, LossConfig, TrainConfig) {
        (
            ModelConfig {
                c_in: 4,
                d: 4,
                encoder_blocks: 1,
                ..ModelConfig::default()
            },
            LossConfig::default(),
            TrainConfig {
                batch_size: 4,
                warmup_steps: 5,
                max_epochs: 2,
                val_every_steps: 5,
                patience_checks: 100,
                ..TrainConfig::default()
            },
        )
    }

    #[test]
    fn training_is_deterministic_and_writes_a_run_dir() {
        let ds = tiny_world();
        let (mc, lc, tc) = tiny_configs();
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let runs: Vec<TrainedRun> = dirs
            .iter()
            .map(|d| {
                let opts = RunOptions {
                    dir: Some(d.path().to_path_buf()),
                    ..RunOptions::default()
                };
                train(&ds, &mc, &lc, &tc, &opts).unwrap()
            })
            .collect();
        assert_eq!(runs[0].log, runs[1].log);
        assert_eq!(runs[0].best, runs[1].best);
        for f in [METRICS_FILE, STEPS_FILE, CHECKPOINT_FILE, RUN_MANIFEST] {
            let a = fs::read(dirs[0].path().join(f)).unwrap();
            let b = fs::read(dirs[1].path().join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        let m = RunManifest::load(dirs[0].path()).unwrap();
        assert_eq!(m.status, RunStatus::Complete);
        assert_eq!(m.steps, runs[0].steps);
        let lines = fs::read_to_string(dirs[0].path().join(METRICS_FILE)).unwrap();
        assert_eq!(lines.lines().count(), runs[0].log.len() + 1);
    }

    #[test]
    fn incompatible_model_is_rejected() {
        let ds = tiny_world();
        let (mut mc, lc, tc) = tiny_configs();
        mc.c_in = 5;
        assert!(matches!(
            train(&ds, &mc, &lc, &tc, &RunOptions::default()),
            Err(Error::Incompatible(_))
        ));
    }
}
