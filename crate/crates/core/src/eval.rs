//! Diagnostics: per-variable RMSE and bias, quantile-stratified bias, paired
//! bootstrap, propensity calibration and readable physics coefficients.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, extract_phi, ModelParams, PhysicsVariant};
use crate::rng;
use crate::world::{NormStats, Patch, Source, AGB, VARIABLE_NAMES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_quantiles: usize,
    pub n_bootstrap: usize,
    pub calib_bins: usize,
    /// Equal-count calibration bins instead of fixed-width ones.
    pub calib_equal_count: bool,
    pub target_variable: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_quantiles: 5,
            n_bootstrap: 10_000,
            calib_bins: 10,
            calib_equal_count: false,
            target_variable: AGB,
            seed: 42,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_quantiles < 2 || self.n_bootstrap < 100 || self.calib_bins == 0 {
            return Err(Error::Config(
                "need n_quantiles >= 2, n_bootstrap >= 100 and calib_bins >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// `(rmse, bias)` over the selected entries, bias signed as prediction − label.
pub fn rmse_bias(pred: &[f64], label: &[f64], mask: Option<&[f64]>) -> Result<(f64, f64)> {
    if pred.len() != label.len() || mask.is_some_and(|m| m.len() != pred.len()) {
        return Err(Error::Invalid("prediction, label and mask lengths differ".into()));
    }
    let (mut se, mut e, mut n) = (0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        if mask.map_or(true, |m| m[i] != 0.0) {
            let d = pred[i] - label[i];
            se += d * d;
            e += d;
            n += 1.0;
        }
    }
    if n == 0.0 {
        return Err(Error::Invalid("empty evaluation mask".into()));
    }
    Ok(((se / n).sqrt(), e / n))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stratum {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub rmse: f64,
    pub bias: f64,
}

/// Bins by label rank: bin `q` holds sorted positions `[q·n/Q, (q+1)·n/Q)`,
/// ties kept in input order.
pub fn quantile_stratified(pred: &[f64], label: &[f64], n_quantiles: usize) -> Result<Vec<Stratum>> {
    if pred.len() != label.len() {
        return Err(Error::Invalid("prediction and label lengths differ".into()));
    }
    let n = label.len();
    if n_quantiles == 0 || n < n_quantiles {
        return Err(Error::Invalid(format!(
            "{n} pixels cannot fill {n_quantiles} quantile bins"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| label[a].total_cmp(&label[b]));
    (0..n_quantiles)
        .map(|q| {
            let idx = &order[q * n / n_quantiles..(q + 1) * n / n_quantiles];
            let p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
            let l: Vec<f64> = idx.iter().map(|&i| label[i]).collect();
            let (rmse, bias) = rmse_bias(&p, &l, None)?;
            Ok(Stratum {
                lo: l[0],
                hi: l[l.len() - 1],
                count: idx.len(),
                rmse,
                bias,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Bootstrap {
    /// `RMSE_A − RMSE_B` on the original pixels.
    pub delta: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// One-sided p-value for `Δ ≥ 0`, ties counted half.
    pub p: f64,
}

fn rmse_of(err: &[f64], idx: &[usize]) -> f64 {
    (idx.iter().map(|&i| err[i] * err[i]).sum::<f64>() / idx.len() as f64).sqrt()
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Paired bootstrap of per-pixel errors: each iteration resamples pixel
/// indices once and scores both configurations on them.
pub fn paired_bootstrap(err_a: &[f64], err_b: &[f64], n_iter: usize, seed: u64) -> Result<Bootstrap> {
    if err_a.len() != err_b.len() {
        return Err(Error::Invalid(format!(
            "paired errors differ in length: {} vs {}",
            err_a.len(),
            err_b.len()
        )));
    }
    let n = err_a.len();
    if n == 0 || n_iter == 0 {
        return Err(Error::Invalid("bootstrap needs pixels and iterations".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let delta = rmse_of(err_a, &all) - rmse_of(err_b, &all);
    let mut idx = vec![0usize; n];
    let mut deltas: Vec<f64> = (0..n_iter)
        .map(|it| {
            let mut r = rng::derive(seed, 30, it as u64);
            for v in idx.iter_mut() {
                *v = r.gen_range(0..n);
            }
            rmse_of(err_a, &idx) - rmse_of(err_b, &idx)
        })
        .collect();
    let above = deltas.iter().filter(|&&d| d > 0.0).count() as f64;
    let ties = deltas.iter().filter(|&&d| d == 0.0).count() as f64;
    deltas.sort_by(f64::total_cmp);
    Ok(Bootstrap {
        delta,
        ci_lo: percentile(&deltas, 0.025),
        ci_hi: percentile(&deltas, 0.975),
        p: (above + 0.5 * ties) / n_iter as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    /// NaN for an empty bin.
    pub mean_pi: f64,
    pub rate: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub bins: Vec<CalibrationBin>,
    /// Empirical rate non-decreasing across occupied bins.
    pub monotone: bool,
    pub pi_std: f64,
}

pub fn calibration_curve(pi_hat: &[f64], r: &[f64], bins: usize, equal_count: bool) -> Result<Calibration> {
    if pi_hat.len() != r.len() {
        return Err(Error::Invalid("propensity and mask lengths differ".into()));
    }
    if bins == 0 {
        return Err(Error::Invalid("need at least one calibration bin".into()));
    }
    let n = pi_hat.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    let mut edges: Vec<(f64, f64)> = (0..bins)
        .map(|b| (b as f64 / bins as f64, (b + 1) as f64 / bins as f64))
        .collect();
    if equal_count {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| pi_hat[a].total_cmp(&pi_hat[b]));
        for b in 0..bins {
            members[b] = order[b * n / bins..(b + 1) * n / bins].to_vec();
            if let (Some(&f), Some(&l)) = (members[b].first(), members[b].last()) {
                edges[b] = (pi_hat[f], pi_hat[l]);
            }
        }
    } else {
        for (i, &p) in pi_hat.iter().enumerate() {
            let b = ((p * bins as f64).floor() as usize).min(bins - 1);
            members[b].push(i);
        }
    }
    let out: Vec<CalibrationBin> = members
        .iter()
        .zip(&edges)
        .map(|(m, &(lo, hi))| {
            let c = m.len() as f64;
            let (mean_pi, rate) = if m.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (
                    m.iter().map(|&i| pi_hat[i]).sum::<f64>() / c,
                    m.iter().map(|&i| r[i]).sum::<f64>() / c,
                )
            };
            CalibrationBin {
                lo,
                hi,
                mean_pi,
                rate,
                count: m.len(),
            }
        })
        .collect();
    let rates: Vec<f64> = out.iter().filter(|b| b.count > 0).map(|b| b.rate).collect();
    let monotone = rates.windows(2).all(|w| w[1] >= w[0]);
    let mean = pi_hat.iter().sum::<f64>() / n.max(1) as f64;
    let pi_std = (pi_hat.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt();
    Ok(Calibration {
        bins: out,
        monotone,
        pi_std,
    })
}

/// One row of the readable coefficient table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhiRow {
    pub name: &'static str,
    /// Variable the exponent attaches to, if any.
    pub variable: Option<&'static str>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PhiTable {
    Rows(Vec<PhiRow>),
    /// The learned relation has no coefficient reading.
    NotInterpretable,
}

pub fn phi_table(params: &ModelParams) -> PhiTable {
    match params.config.physics_variant {
        PhysicsVariant::Mlp => PhiTable::NotInterpretable,
        PhysicsVariant::PowerLaw => {
            let inputs = params.config.physics_inputs();
            let mut rows = vec![PhiRow {
                name: "scale",
                variable: None,
                value: params.get("phys.scale_raw").map_or(f64::NAN, |t| model::SCALE_REF * t.item().exp()),
            }];
            for r in inputs {
                let v = VARIABLE_NAMES[r];
                let raw = params
                    .get(&format!("phys.e_{v}_raw"))
                    .map_or(f64::NAN, |t| t.item());
                rows.push(PhiRow {
                    name: "exponent",
                    variable: Some(v),
                    value: crate::tensor::softplus(raw),
                });
            }
            PhiTable::Rows(rows)
        }
        _ => {
            let phi = extract_phi(params).expect("allometric variant");
            let mut rows = vec![
                PhiRow { name: "alpha", variable: None, value: phi.alpha },
                PhiRow { name: "scale", variable: None, value: phi.scale },
                PhiRow { name: "b", variable: Some("H"), value: phi.b },
                PhiRow { name: "c", variable: Some("C"), value: phi.c },
                PhiRow { name: "d", variable: Some("SD"), value: phi.d },
            ];
            if let Some(e) = phi.e {
                rows.push(PhiRow { name: "e", variable: Some("WD"), value: e });
            }
            PhiTable::Rows(rows)
        }
    }
}

/// Physical-unit predictions for every pixel of a split, grouped per variable.
#[derive(Clone, Debug, Default)]
pub struct SplitPredictions {
    pub pred: Vec<Vec<f64>>,
    pub label: Vec<Vec<f64>>,
    pub mask: Vec<Vec<f64>>,
    /// Propensity, label indicator and true propensity on plot rows of plot patches.
    pub pi_hat: Vec<f64>,
    pub r: Vec<f64>,
    pub true_pi: Vec<f64>,
    /// z-space |m̂ − ŷ| at unlabelled entries.
    pub imp_gap: Vec<f64>,
}

pub fn predict_split(params: &ModelParams, patches: &[Patch], norm: &NormStats) -> Result<SplitPredictions> {
    let k = params.config.k;
    let mut out = SplitPredictions {
        pred: vec![Vec::new(); k],
        label: vec![Vec::new(); k],
        mask: vec![Vec::new(); k],
        ..SplitPredictions::default()
    };
    for p in patches {
        if p.k() != k || p.covariates.shape()[0] != params.config.c_in {
            return Err(Error::Incompatible(format!(
                "patch has k={} c_in={}, model expects k={k} c_in={}",
                p.k(),
                p.covariates.shape()[0],
                params.config.c_in
            )));
        }
        let pr = model::predict(params, &p.covariates)?;
        let hw = p.hw();
        let rows = p.source.rows(k);
        for row in 0..k {
            for i in row * hw..(row + 1) * hw {
                let m = p.mask.data()[i];
                out.pred[row].push(norm.denormalize(row, pr.y_hat.data()[i]));
                out.label[row].push(p.targets.data()[i]);
                out.mask[row].push(m);
                if p.source == Source::Plot && rows.contains(&row) {
                    out.pi_hat.push(pr.pi_hat.data()[i]);
                    out.r.push(m);
                    out.true_pi.push(p.true_propensity.data()[i]);
                }
                if m == 0.0 {
                    out.imp_gap.push((pr.m_hat.data()[i] - pr.y_hat.data()[i]).abs());
                }
            }
        }
    }
    Ok(out)
}

impl SplitPredictions {
    pub fn errors(&self, row: usize) -> Vec<f64> {
        self.pred[row].iter().zip(&self.label[row]).map(|(p, l)| p - l).collect()
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub variables: Vec<&'static str>,
    pub rmse_bias: Vec<(f64, f64)>,
    pub stratified: Vec<Stratum>,
    pub calibration: Calibration,
    pub bootstrap: Option<Bootstrap>,
    pub phi: PhiTable,
    pub mean_pi: f64,
    pub true_pi: f64,
    pub imp_gap: f64,
}

/// Full report on every pixel of `patches`. With `against`, also bootstraps
/// the target-variable RMSE difference against a second model.
pub fn evaluate(
    params: &ModelParams,
    patches: &[Patch],
    norm: &NormStats,
    cfg: &EvalConfig,
    against: Option<(&ModelParams, &NormStats)>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let k = params.config.k;
    if cfg.target_variable >= k {
        return Err(Error::Config(format!("target variable {} outside k={k}", cfg.target_variable)));
    }
    let sp = predict_split(params, patches, norm)?;
    let rb = (0..k)
        .map(|row| rmse_bias(&sp.pred[row], &sp.label[row], None))
        .collect::<Result<Vec<_>>>()?;
    let t = cfg.target_variable;
    let stratified = quantile_stratified(&sp.pred[t], &sp.label[t], cfg.n_quantiles)?;
    let calibration = calibration_curve(&sp.pi_hat, &sp.r, cfg.calib_bins, cfg.calib_equal_count)?;
    let bootstrap = match against {
        Some((other, other_norm)) => {
            let sb = predict_split(other, patches, other_norm)?;
            Some(paired_bootstrap(&sp.errors(t), &sb.errors(t), cfg.n_bootstrap, cfg.seed)?)
        }
        None => None,
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(EvalReport {
        variables: VARIABLE_NAMES[..k].to_vec(),
        rmse_bias: rb,
        stratified,
        calibration,
        bootstrap,
        phi: phi_table(params),
        mean_pi: mean(&sp.pi_hat),
        true_pi: mean(&sp.true_pi),
        imp_gap: mean(&sp.imp_gap),
    })
}

pub const METRICS_CSV: &str = "eval_metrics.csv";
pub const STRATIFIED_CSV: &str = "eval_stratified.csv";
pub const CALIBRATION_CSV: &str = "eval_calibration.csv";
pub const BOOTSTRAP_CSV: &str = "eval_bootstrap.csv";
pub const PHI_CSV: &str = "eval_phi.csv";
pub const SUMMARY_FILE: &str = "eval_summary.txt";

fn f(v: f64) -> String {
    format!("{v:.10e}")
}

/// Optional CSV sections; metrics, coefficients and the summary are always written.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sections {
    pub stratified: bool,
    pub calibration: bool,
}

impl Sections {
    pub const ALL: Sections = Sections {
        stratified: true,
        calibration: true,
    };
}

/// Writes one CSV per section plus a flat `key=value` summary.
pub fn write_report(report: &EvalReport, dir: &Path, sections: Sections) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut s = String::from("variable,rmse,bias\n");
    for (v, (r, b)) in report.variables.iter().zip(&report.rmse_bias) {
        writeln!(s, "{v},{},{}", f(*r), f(*b)).expect("string write");
    }
    fs::write(dir.join(METRICS_CSV), s)?;

    if sections.stratified {
        let mut s = String::from("quantile,lo,hi,count,rmse,bias\n");
        for (q, st) in report.stratified.iter().enumerate() {
            writeln!(s, "{},{},{},{},{},{}", q + 1, f(st.lo), f(st.hi), st.count, f(st.rmse), f(st.bias))
                .expect("string write");
        }
        fs::write(dir.join(STRATIFIED_CSV), s)?;
    }

    if sections.calibration {
        let mut s = String::from("bin,lo,hi,mean_pi,rate,count\n");
        for (i, b) in report.calibration.bins.iter().enumerate() {
            writeln!(s, "{},{},{},{},{},{}", i + 1, f(b.lo), f(b.hi), f(b.mean_pi), f(b.rate), b.count)
                .expect("string write");
        }
        fs::write(dir.join(CALIBRATION_CSV), s)?;
    }

    if let Some(b) = &report.bootstrap {
        let s = format!("delta,ci_lo,ci_hi,p\n{},{},{},{}\n", f(b.delta), f(b.ci_lo), f(b.ci_hi), f(b.p));
        fs::write(dir.join(BOOTSTRAP_CSV), s)?;
    }

    let mut s = String::from("coefficient,variable,value\n");
    match &report.phi {
        PhiTable::Rows(rows) => {
            for r in rows {
                writeln!(s, "{},{},{}", r.name, r.variable.unwrap_or(""), f(r.value)).expect("string write");
            }
        }
        PhiTable::NotInterpretable => s.push_str("not interpretable,,\n"),
    }
    fs::write(dir.join(PHI_CSV), s)?;

    let mut s = String::new();
    for (v, (r, b)) in report.variables.iter().zip(&report.rmse_bias) {
        writeln!(s, "rmse_{v}={}\nbias_{v}={}", f(*r), f(*b)).expect("string write");
    }
    let st = &report.stratified;
    writeln!(s, "bias_q1={}\nbias_q{}={}", f(st[0].bias), st.len(), f(st[st.len() - 1].bias)).expect("string write");
    writeln!(s, "calibration_monotone={}", report.calibration.monotone).expect("string write");
    writeln!(s, "pi_std={}", f(report.calibration.pi_std)).expect("string write");
    writeln!(s, "mean_pi={}\ntrue_pi={}\nimp_gap={}", f(report.mean_pi), f(report.true_pi), f(report.imp_gap))
        .expect("string write");
    if let Some(b) = &report.bootstrap {
        writeln!(s, "bootstrap_delta={}\nbootstrap_p={}", f(b.delta), f(b.p)).expect("string write");
    }
    fs::write(dir.join(SUMMARY_FILE), s)?;
    Ok(())
}

/// Steps whose loss exceeds `factor` times the median of the preceding `window` steps.
pub fn count_spikes(losses: &[f64], window: usize, factor: f64) -> usize {
    let mut count = 0;
    for i in 1..losses.len() {
        let start = i.saturating_sub(window);
        let mut prev: Vec<f64> = losses[start..i].to_vec();
        prev.sort_by(f64::total_cmp);
        let med = prev[prev.len() / 2];
        if losses[i] > factor * med {
            count += 1;
        }
    }
    count
}
