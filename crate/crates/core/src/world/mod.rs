//! Synthetic forest worlds with a known allometry and a known observation process.
//!
//! Every patch carries smooth latent fields for height, cover, stem density and
//! wood density; biomass follows the allometric family used by the physics
//! module. Two label sources see disjoint variables: footprint patches label
//! `{H, C}` at a handful of random pixels, plot patches label `{SD, AGB, WD}`
//! wherever a logistic accessibility process lets a surveyor in.

mod io;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{sigmoid, softplus, Tensor};

pub use io::{dataset_hash, load_dataset, save_dataset, MANIFEST_FILE};

pub const VARIABLE_NAMES: [&str; 5] = ["H", "C", "SD", "AGB", "WD"];
pub const H: usize = 0;
pub const C: usize = 1;
pub const SD: usize = 2;
pub const AGB: usize = 3;
pub const WD: usize = 4;

/// Rows labelled by footprint patches.
pub const GEDI_ROWS: [usize; 2] = [H, C];

/// Rows labelled by plot patches, restricted to the `k` variables present.
pub fn plot_rows(k: usize) -> Vec<usize> {
    [SD, AGB, WD].into_iter().filter(|&r| r < k).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    /// Sparse lidar-style footprints labelling structure.
    #[serde(rename = "G")]
    Gedi,
    /// Field plots labelling density and biomass.
    #[serde(rename = "P")]
    Plot,
}

impl Source {
    pub fn rows(self, k: usize) -> Vec<usize> {
        match self {
            Source::Gedi => GEDI_ROWS.to_vec(),
            Source::Plot => plot_rows(k),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruePhi {
    pub alpha: f64,
    pub scale: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

impl Default for TruePhi {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            scale: 40.0,
            b: 0.9,
            c: 0.6,
            d: 0.1,
            e: 1.0,
        }
    }
}

/// Functional form the generator draws biomass from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    #[default]
    Allometric,
    /// `scale · sp(H)^b · sp(C)^c · sp(SD)^d · sp(WD)^e`, for misspecification studies.
    PowerLaw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MnarConfig {
    /// Covariate channel holding the remoteness proxy; larger means harder to reach.
    pub accessibility_channel: usize,
    pub steepness: f64,
    pub midpoint: f64,
    /// Labelling probability at the midpoint.
    pub observable_fraction: f64,
    /// When false, labelling also depends directly on latent biomass.
    pub ignorable: bool,
    pub agb_steepness: f64,
    pub agb_midpoint: f64,
}

impl Default for MnarConfig {
    fn default() -> Self {
        Self {
            accessibility_channel: 0,
            steepness: 2.0,
            midpoint: 0.0,
            observable_fraction: 0.4,
            ignorable: true,
            agb_steepness: 0.01,
            agb_midpoint: 300.0,
        }
    }
}

impl MnarConfig {
    /// Per-pixel labelling probability for a plot patch.
    pub fn propensity(&self, accessibility: f64, agb: f64) -> f64 {
        let f = self.observable_fraction;
        let mut logit = (f / (1.0 - f)).ln() - self.steepness * (accessibility - self.midpoint);
        if !self.ignorable {
            logit -= self.agb_steepness * (agb - self.agb_midpoint);
        }
        sigmoid(logit)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// 5 with wood density, 4 without.
    pub k: usize,
    pub c_in: usize,
    pub patch_size: usize,
    pub n_gedi: usize,
    pub n_plot: usize,
    pub true_phi: TruePhi,
    pub ground_truth: GroundTruth,
    pub mnar: MnarConfig,
    /// Measurement noise sd per variable in [H, C, SD, AGB, WD] order; the AGB
    /// entry multiplies √AGB.
    pub noise_sd: Vec<f64>,
    /// Multiplies the noise sd of every covariate view.
    pub covariate_noise: f64,
    pub footprints_min: usize,
    pub footprints_max: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            k: 5,
            c_in: 8,
            patch_size: 16,
            n_gedi: 2000,
            n_plot: 18,
            true_phi: TruePhi::default(),
            ground_truth: GroundTruth::Allometric,
            mnar: MnarConfig::default(),
            noise_sd: vec![1.0, 0.03, 0.3, 1.5, 0.02],
            covariate_noise: 1.0,
            footprints_min: 4,
            footprints_max: 8,
            seed: 42,
        }
    }
}

/// Number of generated covariate views besides the accessibility channel.
const INFORMATIVE_VIEWS: usize = 6;

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.k == 4 || self.k == 5) {
            return bad(format!("k must be 4 or 5, got {}", self.k));
        }
        if self.n_gedi == 0 || self.n_plot == 0 {
            return bad("world needs at least one patch of each source".into());
        }
        if self.n_gedi < self.n_plot {
            return bad(format!(
                "n_gedi ({}) must be at least n_plot ({})",
                self.n_gedi, self.n_plot
            ));
        }
        if self.patch_size < 2 {
            return bad("patch_size must be at least 2".into());
        }
        if self.c_in < 2 || self.mnar.accessibility_channel >= self.c_in {
            return bad(format!(
                "c_in {} too small for accessibility channel {}",
                self.c_in, self.mnar.accessibility_channel
            ));
        }
        let p = &self.true_phi;
        if [p.alpha, p.scale, p.b, p.c, p.d, p.e].iter().any(|v| !(*v > 0.0)) {
            return bad("true_phi components must be strictly positive".into());
        }
        if self.noise_sd.len() != 5 || self.noise_sd.iter().any(|v| *v < 0.0) || self.covariate_noise < 0.0 {
            return bad("noise_sd needs 5 non-negative entries".into());
        }
        let f = self.mnar.observable_fraction;
        if !(f > 0.0 && f < 1.0) {
            return bad(format!("observable_fraction must lie in (0,1), got {f}"));
        }
        let area = self.patch_size * self.patch_size;
        if self.footprints_min == 0
            || self.footprints_min > self.footprints_max
            || self.footprints_max > area
        {
            return bad("footprint range must satisfy 1 <= min <= max <= patch area".into());
        }
        Ok(())
    }

    pub fn variables(&self) -> &'static [&'static str] {
        &VARIABLE_NAMES[..self.k]
    }

    /// Expected per-pixel labelling probability of a footprint row.
    pub fn footprint_rate(&self) -> f64 {
        let mean = (self.footprints_min + self.footprints_max) as f64 / 2.0;
        mean / (self.patch_size * self.patch_size) as f64
    }
}

/// Biomass from latent structure under the configured ground truth.
pub fn true_agb(cfg: &WorldConfig, h: f64, c: f64, sd: f64, wd: Option<f64>) -> f64 {
    let p = &cfg.true_phi;
    match cfg.ground_truth {
        GroundTruth::Allometric => {
            let core = (softplus(h).powf(p.b) * softplus(c).powf(p.c)).powf(softplus(sd) * p.d);
            let wd_term = wd.map_or(1.0, |w| softplus(w).powf(p.e));
            p.alpha + p.scale * core * wd_term
        }
        GroundTruth::PowerLaw => {
            let wd_term = wd.map_or(1.0, |w| softplus(w).powf(p.e));
            p.scale * softplus(h).powf(p.b) * softplus(c).powf(p.c) * softplus(sd).powf(p.d) * wd_term
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// `[C_in, S, S]`
    pub covariates: Tensor,
    /// `[K, S, S]` in physical units; the generator knows every pixel.
    pub targets: Tensor,
    /// `[K, S, S]` binary observation mask.
    pub mask: Tensor,
    pub source: Source,
    /// `[K, S, S]` generator-side labelling probability; zero on rows the source never labels.
    pub true_propensity: Tensor,
}

impl Patch {
    pub fn k(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn hw(&self) -> usize {
        self.targets.shape()[1] * self.targets.shape()[2]
    }

    /// Observed labels with unlabelled pixels zeroed.
    pub fn observed(&self) -> Vec<f64> {
        self.targets
            .data()
            .iter()
            .zip(self.mask.data())
            .map(|(&y, &r)| if r != 0.0 && y.is_finite() { y } else { 0.0 })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub train: Vec<Patch>,
    pub val: Vec<Patch>,
    pub test: Vec<Patch>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Dataset {
    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn split(&self, s: Split) -> &[Patch] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all_patches_mut(&mut self) -> impl Iterator<Item = &mut Patch> {
        self.train
            .iter_mut()
            .chain(self.val.iter_mut())
            .chain(self.test.iter_mut())
    }

    pub fn all_patches(&self) -> impl Iterator<Item = &Patch> {
        self.train.iter().chain(self.val.iter()).chain(self.test.iter())
    }
}

struct Latents {
    r: Vec<f64>,
    h: Vec<f64>,
    c: Vec<f64>,
    sd: Vec<f64>,
    wd: Vec<f64>,
    g: [Vec<f64>; 4],
}

/// Low-frequency random field: patch offset plus a few random cosines.
fn smooth_field(rng: &mut Rng, s: usize, offset_sd: f64, within_sd: f64) -> Vec<f64> {
    const WAVES: usize = 5;
    let offset: f64 = offset_sd * rng.sample::<f64, _>(StandardNormal);
    let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            let fx = rng.gen_range(-1.2..1.2);
            let fy = rng.gen_range(-1.2..1.2);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.sample(StandardNormal);
            (fx, fy, phase, amp)
        })
        .collect();
    let norm = within_sd * (2.0 / WAVES as f64).sqrt();
    let mut out = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            let (u, v) = (i as f64 / s as f64, j as f64 / s as f64);
            let w: f64 = waves
                .iter()
                .map(|(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).cos())
                .sum();
            out.push(offset + norm * w);
        }
    }
    out
}

fn latents(rng: &mut Rng, s: usize) -> Latents {
    let r = smooth_field(rng, s, 0.8, 0.6);
    let g: [Vec<f64>; 4] = std::array::from_fn(|_| smooth_field(rng, s, 0.6, 0.6));
    let n = s * s;
    let h = (0..n)
        .map(|p| (12.0 * (0.2 * g[0][p] + 0.2 * r[p]).exp()).clamp(3.0, 30.0))
        .collect();
    let c = (0..n).map(|p| sigmoid(0.9 * g[1][p] + 0.5 * r[p] + 0.3)).collect();
    let sd = (0..n)
        .map(|p| (4.0 * (0.2 * g[2][p] + 0.15 * r[p]).exp()).clamp(1.0, 8.0))
        .collect();
    let wd = (0..n)
        .map(|p| 0.6 + 0.12 * (g[3][p] + 0.3 * r[p]).tanh())
        .collect();
    Latents { r, h, c, sd, wd, g }
}

fn covariates(rng: &mut Rng, cfg: &WorldConfig, lat: &Latents) -> Vec<f64> {
    let s = cfg.patch_size;
    let n = s * s;
    let g = &lat.g;
    let scale = cfg.covariate_noise;
    let mut noise = |sd: f64| -> f64 { scale * sd * rng.sample::<f64, _>(StandardNormal) };
    let mut views: Vec<Vec<f64>> = Vec::with_capacity(cfg.c_in);
    let acc: Vec<f64> = (0..n).map(|p| lat.r[p] + noise(0.05)).collect();
    views.push((0..n).map(|p| 0.8 * g[0][p] + 0.4 * lat.r[p] + noise(0.2)).collect());
    views.push((0..n).map(|p| (g[1][p] + 0.5 * lat.r[p]).tanh() + noise(0.15)).collect());
    views.push((0..n).map(|p| g[2][p] + 0.3 * g[0][p] + noise(0.3)).collect());
    views.push((0..n).map(|p| g[3][p] + noise(0.3)).collect());
    views.push((0..n).map(|p| g[0][p].sin() + 0.5 * g[1][p] + noise(0.2)).collect());
    views.push((0..n).map(|p| 0.5 * (g[0][p] + g[2][p]) + noise(0.3)).collect());
    debug_assert_eq!(views.len(), INFORMATIVE_VIEWS);
    views.truncate(cfg.c_in - 1);
    while views.len() < cfg.c_in - 1 {
        let f = smooth_field(rng, s, 0.5, 0.5);
        views.push(f);
    }
    views.insert(cfg.mnar.accessibility_channel, acc);
    views.concat()
}

fn generate_patch(cfg: &WorldConfig, source: Source, index: u64) -> Result<Patch> {
    let stream = match source {
        Source::Gedi => 1,
        Source::Plot => 2,
    };
    let mut rng = rng::derive(cfg.seed, stream, index);
    let s = cfg.patch_size;
    let n = s * s;
    let k = cfg.k;
    let lat = latents(&mut rng, s);
    let x = covariates(&mut rng, cfg, &lat);
    let mut y = vec![0.0; k * n];
    let ns = &cfg.noise_sd;
    let mut gauss = |sd: f64| -> f64 {
        if sd == 0.0 {
            0.0
        } else {
            Normal::new(0.0, sd).expect("sd validated").sample(&mut rng)
        }
    };
    for p in 0..n {
        let wd = (k == 5).then_some(lat.wd[p]);
        let agb_clean = true_agb(cfg, lat.h[p], lat.c[p], lat.sd[p], wd);
        y[H * n + p] = lat.h[p] + gauss(ns[H]);
        y[C * n + p] = lat.c[p] + gauss(ns[C]);
        y[SD * n + p] = lat.sd[p] + gauss(ns[SD]);
        y[AGB * n + p] = (agb_clean + gauss(ns[AGB] * agb_clean.max(0.0).sqrt())).clamp(0.0, 2000.0);
        if k == 5 {
            y[WD * n + p] = lat.wd[p] + gauss(ns[WD]);
        }
    }
    Ok(Patch {
        covariates: Tensor::new([cfg.c_in, s, s], x)?,
        targets: Tensor::new([k, s, s], y)?,
        mask: Tensor::zeros([k, s, s]),
        source,
        true_propensity: Tensor::zeros([k, s, s]),
    })
}

/// Draw every patch, split 70/15/15 per source, and apply the observation process.
pub fn generate_world(cfg: &WorldConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut ds = Dataset {
        config: cfg.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (source, count) in [(Source::Gedi, cfg.n_gedi), (Source::Plot, cfg.n_plot)] {
        let mut patches: Vec<Patch> = (0..count as u64)
            .map(|i| generate_patch(cfg, source, i))
            .collect::<Result<_>>()?;
        let n_train = ((count as f64) * 0.7).round().max(1.0) as usize;
        let n_val = if count - n_train >= 2 {
            ((count as f64) * 0.15).round().max(1.0) as usize
        } else {
            (count - n_train).min(1)
        };
        let mut order: Vec<usize> = (0..count).collect();
        let mut rng = rng::derive(cfg.seed, 3, source as u64);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut slots: Vec<Option<Patch>> = patches.drain(..).map(Some).collect();
        for (rank, &idx) in order.iter().enumerate() {
            let p = slots[idx].take().expect("each index once");
            if rank < n_train {
                ds.train.push(p);
            } else if rank < n_train + n_val {
                ds.val.push(p);
            } else {
                ds.test.push(p);
            }
        }
    }
    let mut rng = rng::derive(cfg.seed, 4, 0);
    let mnar = cfg.mnar.clone();
    apply_observation_process(&mut ds, &mnar, &mut rng);
    Ok(ds)
}

/// Fill masks and true propensities. Plot patches get one Bernoulli draw per
/// pixel shared by all plot rows; footprint patches get a uniform random set
/// of labelled pixels on `{H, C}`.
pub fn apply_observation_process(ds: &mut Dataset, mnar: &MnarConfig, rng: &mut Rng) {
    let cfg = ds.config.clone();
    let k = cfg.k;
    let fp_rate = cfg.footprint_rate();
    let plot = plot_rows(k);
    for patch in ds.all_patches_mut() {
        let n = patch.hw();
        let mut mask = vec![0.0; k * n];
        let mut prop = vec![0.0; k * n];
        match patch.source {
            Source::Plot => {
                let acc = &patch.covariates.data()[mnar.accessibility_channel * n..][..n];
                let agb = &patch.targets.data()[AGB * n..][..n];
                for p in 0..n {
                    let pi = mnar.propensity(acc[p], agb[p]);
                    let labelled = rng.gen::<f64>() < pi;
                    for &row in &plot {
                        prop[row * n + p] = pi;
                        mask[row * n + p] = if labelled { 1.0 } else { 0.0 };
                    }
                }
            }
            Source::Gedi => {
                let count = rng.gen_range(cfg.footprints_min..=cfg.footprints_max);
                for &row in &GEDI_ROWS {
                    prop[row * n..(row + 1) * n].fill(fp_rate);
                }
                for p in sample(rng, n, count) {
                    for &row in &GEDI_ROWS {
                        mask[row * n + p] = 1.0;
                    }
                }
            }
        }
        let shape = patch.targets.shape().to_vec();
        patch.mask = Tensor::new(shape.clone(), mask).expect("same shape");
        patch.true_propensity = Tensor::new(shape, prop).expect("same shape");
    }
}

/// Per-variable z-score statistics from labelled training pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn compute(train: &[Patch]) -> Result<Self> {
        let k = train
            .first()
            .ok_or_else(|| Error::Invalid("empty training split".into()))?
            .k();
        let mut mean = Vec::with_capacity(k);
        let mut std = Vec::with_capacity(k);
        for row in 0..k {
            let vals: Vec<f64> = train
                .iter()
                .flat_map(|p| {
                    let n = p.hw();
                    let y = &p.targets.data()[row * n..][..n];
                    let m = &p.mask.data()[row * n..][..n];
                    y.iter()
                        .zip(m)
                        .filter(|(v, r)| **r != 0.0 && v.is_finite())
                        .map(|(v, _)| *v)
                        .collect::<Vec<_>>()
                })
                .collect();
            let name = VARIABLE_NAMES[row];
            if vals.len() < 2 {
                return Err(Error::Invalid(format!(
                    "variable {name} has {} labelled training pixels; need at least 2",
                    vals.len()
                )));
            }
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64;
            if !(var > 0.0) {
                return Err(Error::Invalid(format!("variable {name} has zero variance")));
            }
            mean.push(mu);
            std.push(var.sqrt());
        }
        Ok(Self { mean, std })
    }

    pub fn k(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, row: usize, v: f64) -> f64 {
        (v - self.mean[row]) / self.std[row]
    }

    pub fn denormalize(&self, row: usize, z: f64) -> f64 {
        z * self.std[row] + self.mean[row]
    }

    /// z-score a `[K, ...]` tensor row by row.
    pub fn apply(&self, t: &Tensor) -> Tensor {
        self.rowwise(t, |row, v| self.normalize(row, v))
    }

    pub fn invert(&self, t: &Tensor) -> Tensor {
        self.rowwise(t, |row, v| self.denormalize(row, v))
    }

    fn rowwise(&self, t: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let n = t.numel() / t.shape()[0];
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i / n, v))
            .collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            patch_size: 8,
            n_gedi: 30,
            n_plot: 10,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_patches_is_rejected() {
        let cfg = WorldConfig {
            n_plot: 0,
            ..small()
        };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_agb_equals_closed_form_allometry() {
        let cfg = WorldConfig {
            k: 4,
            noise_sd: vec![0.0; 5],
            ..small()
        };
        let ds = generate_world(&cfg).unwrap();
        let p = &cfg.true_phi;
        for patch in ds.all_patches() {
            let n = patch.hw();
            let y = patch.targets.data();
            for i in 0..n {
                let (h, c, sd) = (y[H * n + i], y[C * n + i], y[SD * n + i]);
                // hand-expanded allometry, no wood-density factor
                let sp = |x: f64| (1.0 + x.exp()).ln();
                let expect = p.alpha
                    + p.scale * ((sp(c).ln() * p.c + sp(h).ln() * p.b) * sp(sd) * p.d).exp();
                let got = y[AGB * n + i];
                assert!((got - expect.clamp(0.0, 2000.0)).abs() <= 1e-9 * expect, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn spain_regime_ratio() {
        let cfg = WorldConfig {
            n_gedi: 2000,
            n_plot: 18,
            ..WorldConfig::default()
        };
        let r = cfg.n_gedi as f64 / cfg.n_plot as f64;
        assert!((r - 111.1).abs() < 0.1);
        cfg.validate().unwrap();
    }

    #[test]
    fn masks_respect_source_rows() {
        let ds = generate_world(&small()).unwrap();
        for patch in ds.all_patches() {
            let n = patch.hw();
            let allowed = patch.source.rows(patch.k());
            for row in 0..patch.k() {
                let m = &patch.mask.data()[row * n..][..n];
                if !allowed.contains(&row) {
                    assert!(m.iter().all(|&v| v == 0.0));
                }
            }
            if patch.source == Source::Gedi {
                let labelled = patch.mask.data()[..n].iter().filter(|&&v| v == 1.0).count();
                assert!((4..=8).contains(&labelled));
            }
        }
    }

    #[test]
    fn flat_logistic_gives_constant_propensity() {
        let mut cfg = small();
        cfg.mnar.steepness = 0.0;
        let ds = generate_world(&cfg).unwrap();
        for patch in ds.all_patches().filter(|p| p.source == Source::Plot) {
            let n = patch.hw();
            let prop = &patch.true_propensity.data()[AGB * n..][..n];
            assert!(prop.iter().all(|&v| (v - cfg.mnar.observable_fraction).abs() < 1e-12));
        }
    }

    #[test]
    fn propensities_lie_in_open_unit_interval() {
        let ds = generate_world(&small()).unwrap();
        for patch in ds.all_patches() {
            let n = patch.hw();
            for &row in &patch.source.rows(patch.k()) {
                let prop = &patch.true_propensity.data()[row * n..][..n];
                assert!(prop.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn non_ignorable_process_under_labels_high_biomass() {
        let mut cfg = WorldConfig {
            n_gedi: 80,
            n_plot: 80,
            patch_size: 8,
            ..WorldConfig::default()
        };
        cfg.mnar.ignorable = false;
        cfg.mnar.steepness = 0.0;
        cfg.mnar.agb_steepness = 0.02;
        let ds = generate_world(&cfg).unwrap();
        let mut pairs: Vec<(f64, f64)> = ds
            .all_patches()
            .filter(|p| p.source == Source::Plot)
            .flat_map(|p| {
                let n = p.hw();
                let y = p.targets.data()[AGB * n..][..n].to_vec();
                let m = p.mask.data()[AGB * n..][..n].to_vec();
                y.into_iter().zip(m)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let q = pairs.len() / 5;
        let rate = |s: &[(f64, f64)]| s.iter().map(|p| p.1).sum::<f64>() / s.len() as f64;
        let middle = rate(&pairs[2 * q..3 * q]);
        let top = rate(&pairs[4 * q..]);
        assert!(top < middle, "top {top} middle {middle}");
    }

    #[test]
    fn norm_stats_round_trip_and_standardise() {
        let ds = generate_world(&small()).unwrap();
        let norm = NormStats::compute(&ds.train).unwrap();
        let p = &ds.train[0];
        let back = norm.invert(&norm.apply(&p.targets));
        let err = back
            .data()
            .iter()
            .zip(p.targets.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-12);

        for row in 0..ds.k() {
            let z: Vec<f64> = ds
                .train
                .iter()
                .flat_map(|p| {
                    let n = p.hw();
                    let y = &p.targets.data()[row * n..][..n];
                    let m = &p.mask.data()[row * n..][..n];
                    y.iter()
                        .zip(m)
                        .filter(|(_, r)| **r != 0.0)
                        .map(|(v, _)| norm.normalize(row, *v))
                        .collect::<Vec<_>>()
                })
                .collect();
            let mu = z.iter().sum::<f64>() / z.len() as f64;
            let sd = (z.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
            assert!(mu.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9, "row {row}: {mu} {sd}");
        }
    }

    #[test]
    fn constant_shift_moves_mean_only() {
        let ds = generate_world(&small()).unwrap();
        let base = NormStats::compute(&ds.train).unwrap();
        let mut shifted = ds.train.clone();
        for p in &mut shifted {
            p.targets = p.targets.map(|v| v + 10.0);
        }
        let moved = NormStats::compute(&shifted).unwrap();
        for row in 0..ds.k() {
            assert!((moved.mean[row] - base.mean[row] - 10.0).abs() < 1e-9);
            assert!((moved.std[row] - base.std[row]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_variance_names_the_variable() {
        let ds = generate_world(&small()).unwrap();
        let mut flat = ds.train.clone();
        for p in &mut flat {
            let n = p.hw();
            p.targets.data_mut()[C * n..(C + 1) * n].fill(0.5);
        }
        let err = NormStats::compute(&flat).unwrap_err().to_string();
        assert!(err.contains("variable C"), "{err}");
    }
}
