//! The five-term training objective: supervised (naive, IPW or AIPW),
//! physics consistency, augmentation consistency, propensity and imputation.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, physics_forward, Bound, ForwardOptions, ModelConfig};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::world::{NormStats, Patch, AGB};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupMode {
    Naive,
    Ipw,
    Aipw,
}

/// Entries the propensity cross-entropy is taken over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasScope {
    /// Every variable row of every patch.
    All,
    /// Only the rows the patch's source is able to label.
    Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub sup_mode: SupMode,
    pub detach_pi: bool,
    pub detach_mu: bool,
    pub pi_min: f64,
    pub lambda_phys_start: f64,
    pub lambda_phys_end: f64,
    /// Epochs over which the physics weight ramps up.
    pub t_phys: f64,
    pub lambda_cons: f64,
    pub lambda_bias: f64,
    pub lambda_imp: f64,
    pub aug_sigma: f64,
    pub aug_pdrop: f64,
    pub bias_scope: BiasScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sup_mode: SupMode::Aipw,
            detach_pi: true,
            detach_mu: true,
            pi_min: 0.1,
            lambda_phys_start: 0.05,
            lambda_phys_end: 0.1,
            t_phys: 20.0,
            lambda_cons: 0.1,
            lambda_bias: 0.1,
            lambda_imp: 1.0,
            aug_sigma: 0.05,
            aug_pdrop: 0.05,
            bias_scope: BiasScope::Source,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_phys_start", self.lambda_phys_start),
            ("lambda_phys_end", self.lambda_phys_end),
            ("lambda_cons", self.lambda_cons),
            ("lambda_bias", self.lambda_bias),
            ("lambda_imp", self.lambda_imp),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.pi_min > 0.0 && self.pi_min <= 1.0) {
            return Err(Error::Config(format!("pi_min must lie in (0,1], got {}", self.pi_min)));
        }
        if self.lambda_phys_start > self.lambda_phys_end {
            return Err(Error::Config("lambda_phys_start exceeds lambda_phys_end".into()));
        }
        if !(self.t_phys >= 0.0) {
            return Err(Error::Config("t_phys must be non-negative".into()));
        }
        if !(self.aug_sigma >= 0.0) || !(0.0..1.0).contains(&self.aug_pdrop) {
            return Err(Error::Config("need aug_sigma >= 0 and aug_pdrop in [0,1)".into()));
        }
        Ok(())
    }

    /// Whether the propensity head is needed at all.
    pub fn uses_propensity(&self) -> bool {
        self.lambda_bias > 0.0
    }

    pub fn uses_imputation(&self) -> bool {
        self.lambda_imp > 0.0
    }

    pub fn uses_physics(&self) -> bool {
        self.lambda_phys_end > 0.0
    }
}

/// Linear ramp from start to end over `t_phys` epochs, then constant.
pub fn lambda_phys_schedule(epoch: f64, cfg: &LossConfig) -> f64 {
    if cfg.t_phys <= 0.0 || epoch >= cfg.t_phys {
        return cfg.lambda_phys_end;
    }
    let t = epoch.max(0.0) / cfg.t_phys;
    cfg.lambda_phys_start + t * (cfg.lambda_phys_end - cfg.lambda_phys_start)
}

/// Plain-valued targets of a batch, flattened in `[B, K, H, W]` order.
#[derive(Clone, Debug)]
pub struct BatchTargets {
    pub shape: [usize; 4],
    /// z-scored labels, zero wherever unlabelled.
    pub y: Vec<f64>,
    pub r: Vec<f64>,
    /// 1 on rows the patch's source can label.
    pub eligible: Vec<f64>,
}

impl BatchTargets {
    pub fn new(patches: &[&Patch], norm: &NormStats) -> Result<Self> {
        let first = patches
            .first()
            .ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let (k, h, w) = (first.k(), first.targets.shape()[1], first.targets.shape()[2]);
        let hw = h * w;
        let mut y = Vec::with_capacity(patches.len() * k * hw);
        let mut r = Vec::with_capacity(y.capacity());
        let mut eligible = Vec::with_capacity(y.capacity());
        for p in patches {
            if p.targets.shape() != [k, h, w] {
                return Err(Error::ShapeMismatch {
                    op: "batch",
                    left: vec![k, h, w],
                    right: p.targets.shape().to_vec(),
                });
            }
            let rows = p.source.rows(k);
            for row in 0..k {
                let el = if rows.contains(&row) { 1.0 } else { 0.0 };
                for i in row * hw..(row + 1) * hw {
                    let m = p.mask.data()[i];
                    r.push(m);
                    // NaN or truth at unlabelled pixels is never read
                    y.push(if m != 0.0 { norm.normalize(row, p.targets.data()[i]) } else { 0.0 });
                    eligible.push(el);
                }
            }
        }
        Ok(Self {
            shape: [patches.len(), k, h, w],
            y,
            r,
            eligible,
        })
    }

    pub fn label_count(&self) -> f64 {
        self.r.iter().sum()
    }
}

/// `ỹ = μ + (R/π̃)(y − μ)` with `π̃ = clamp(π̂, pi_min, 1)`.
pub fn pseudo_outcome(
    tape: &mut Tape,
    y: &[f64],
    r: &[f64],
    m_hat: Var,
    pi_hat: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let shape = tape.shape(m_hat).to_vec();
    let mu = if cfg.detach_mu { tape.detach(m_hat) } else { m_hat };
    let pi = if cfg.detach_pi { tape.detach(pi_hat) } else { pi_hat };
    let pi = tape.clamp(pi, cfg.pi_min, 1.0)?;
    let yc = tape.constant(Tensor::new(shape.clone(), y.to_vec())?);
    let rc = tape.constant(Tensor::new(shape, r.to_vec())?);
    let resid = tape.sub(yc, mu)?;
    let w = tape.div(rc, pi)?;
    let corr = tape.mul(w, resid)?;
    tape.add(mu, corr)
}

/// Supervised term. `m_hat`/`pi_hat` of `None` stand for a zero baseline and
/// unit propensity. Returns the loss and whether no label was present.
pub fn sup_loss(
    tape: &mut Tape,
    y_hat: Var,
    y: &[f64],
    r: &[f64],
    m_hat: Option<Var>,
    pi_hat: Option<Var>,
    cfg: &LossConfig,
) -> Result<(Var, bool)> {
    let shape = tape.shape(y_hat).to_vec();
    let no_labels = r.iter().all(|&v| v == 0.0);
    let fill = |tape: &mut Tape, v: Option<Var>, c: f64| {
        v.unwrap_or_else(|| tape.constant(Tensor::full(shape.clone(), c)))
    };
    let loss = match cfg.sup_mode {
        SupMode::Naive => {
            let yc = tape.constant(Tensor::new(shape.clone(), y.to_vec())?);
            tape.masked_mean_sq(y_hat, yc, r)?
        }
        SupMode::Ipw => {
            let pi = fill(tape, pi_hat, 1.0);
            let pi = if cfg.detach_pi { tape.detach(pi) } else { pi };
            let pi = tape.clamp(pi, cfg.pi_min, 1.0)?;
            let yc = tape.constant(Tensor::new(shape.clone(), y.to_vec())?);
            let rc = tape.constant(Tensor::new(shape.clone(), r.to_vec())?);
            let w = tape.div(rc, pi)?;
            let d = tape.sub(y_hat, yc)?;
            let sq = tape.square(d);
            let wsq = tape.mul(w, sq)?;
            tape.mean(wsq)
        }
        SupMode::Aipw => {
            let mu = fill(tape, m_hat, 0.0);
            let pi = fill(tape, pi_hat, 1.0);
            let yt = pseudo_outcome(tape, y, r, mu, pi, cfg)?;
            let d = tape.sub(y_hat, yt)?;
            let sq = tape.square(d);
            tape.mean(sq)
        }
    };
    Ok((loss, no_labels))
}

/// Unmasked MSE between the biomass head and the physics prediction.
pub fn phys_loss(tape: &mut Tape, y_hat_agb: Var, agb_phys: Var) -> Result<Var> {
    let d = tape.sub(y_hat_agb, agb_phys)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Mean binary cross-entropy of the propensity map against the label mask.
pub fn bias_loss(tape: &mut Tape, pi_hat: Var, r: &[f64]) -> Result<Var> {
    tape.bce(pi_hat, r)
}

/// Masked MSE of the imputation heads on labelled pixels.
pub fn imp_loss(tape: &mut Tape, m_hat: Var, y: &[f64], r: &[f64]) -> Result<(Var, bool)> {
    let shape = tape.shape(m_hat).to_vec();
    let yc = tape.constant(Tensor::new(shape, y.to_vec())?);
    let no_labels = r.iter().all(|&v| v == 0.0);
    Ok((tape.masked_mean_sq(m_hat, yc, r)?, no_labels))
}

/// `x ⊙ Bernoulli(1 − p_drop) + N(0, σ²)`.
pub fn augment(x: &Tensor, sigma: f64, p_drop: f64, rng: &mut Rng) -> Tensor {
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("sigma checked"));
    x.map(|v| {
        let keep = if p_drop > 0.0 && rng.gen::<f64>() < p_drop { 0.0 } else { 1.0 };
        let eps = noise.map_or(0.0, |n| n.sample(rng));
        v * keep + eps
    })
}

/// Regression-head agreement between clean and augmented inputs; both
/// branches carry gradient.
pub fn cons_loss(
    tape: &mut Tape,
    bound: &Bound,
    covariates: &[&Tensor],
    y_hat: Var,
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<Var> {
    let mut aug = Vec::with_capacity(covariates.len());
    for x in covariates {
        let xa = tape.constant(augment(x, cfg.aug_sigma, cfg.aug_pdrop, rng));
        let z = model::encode(tape, bound, xa)?;
        aug.push(model::regress(tape, bound, z)?);
    }
    let ya = tape.stack(&aug)?;
    let d = tape.sub(y_hat, ya)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Batch-stacked network outputs.
#[derive(Clone, Debug)]
pub struct BatchOutputs {
    /// `[B, K, H, W]`
    pub y_hat: Var,
    pub m_hat: Option<Var>,
    pub pi_hat: Option<Var>,
    /// Biomass rows of `y_hat` and the physics prediction, each `[B, H, W]`.
    pub phys: Option<(Var, Var)>,
}

pub fn batch_forward(
    tape: &mut Tape,
    bound: &Bound,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    covariates: &[&Tensor],
    norm: &NormStats,
) -> Result<BatchOutputs> {
    let opts = ForwardOptions {
        imputation: loss_cfg.uses_imputation(),
        propensity: loss_cfg.uses_propensity(),
    };
    let (mut ys, mut ms, mut ps, mut agb, mut phys) = (vec![], vec![], vec![], vec![], vec![]);
    for x in covariates {
        let xv = tape.constant((*x).clone());
        let out = model::forward(model_cfg, bound, tape, xv, opts)?;
        ys.push(out.y_hat);
        ms.extend(out.m_hat);
        ps.extend(out.pi_hat);
        if loss_cfg.uses_physics() {
            agb.push(tape.select(out.y_hat, AGB)?);
            phys.push(physics_forward(model_cfg, bound, tape, out.y_hat, norm)?);
        }
    }
    let stack = |tape: &mut Tape, v: &[Var]| -> Result<Option<Var>> {
        if v.is_empty() {
            Ok(None)
        } else {
            tape.stack(v).map(Some)
        }
    };
    let y_hat = tape.stack(&ys)?;
    let m_hat = stack(tape, &ms)?;
    let pi_hat = stack(tape, &ps)?;
    let phys = match (stack(tape, &agb)?, stack(tape, &phys)?) {
        (Some(a), Some(p)) => Some((a, p)),
        _ => None,
    };
    Ok(BatchOutputs {
        y_hat,
        m_hat,
        pi_hat,
        phys,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub l_sup: Var,
    pub l_phys: Var,
    pub l_cons: Var,
    pub l_bias: Var,
    pub l_imp: Var,
    pub total: Var,
    pub lambda_phys: f64,
    /// The batch carried no supervised label at all.
    pub no_labels: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub sup: f64,
    pub phys: f64,
    pub cons: f64,
    pub bias: f64,
    pub imp: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.value(x).item();
        LossValues {
            sup: v(self.l_sup),
            phys: v(self.l_phys),
            cons: v(self.l_cons),
            bias: v(self.l_bias),
            imp: v(self.l_imp),
            total: v(self.total),
        }
    }
}

fn scoped_bias_loss(tape: &mut Tape, pi_hat: Var, t: &BatchTargets, scope: BiasScope) -> Result<Var> {
    match scope {
        BiasScope::All => bias_loss(tape, pi_hat, &t.r),
        BiasScope::Source => {
            let [b, k, h, w] = t.shape;
            let hw = h * w;
            let mut rows = Vec::new();
            let mut target = Vec::new();
            for bi in 0..b {
                let patch = tape.select(pi_hat, bi)?;
                for ki in 0..k {
                    let off = (bi * k + ki) * hw;
                    if t.eligible[off] != 0.0 {
                        rows.push(tape.select(patch, ki)?);
                        target.extend_from_slice(&t.r[off..off + hw]);
                    }
                }
            }
            if rows.is_empty() {
                return Ok(tape.scalar(0.0));
            }
            let stacked = tape.stack(&rows)?;
            bias_loss(tape, stacked, &target)
        }
    }
}

/// Weighted objective for one batch. Terms whose weight is zero are not
/// computed and contribute a constant zero.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    bound: &Bound,
    out: &BatchOutputs,
    covariates: &[&Tensor],
    targets: &BatchTargets,
    epoch: f64,
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<LossBundle> {
    let (l_sup, no_labels) = sup_loss(tape, out.y_hat, &targets.y, &targets.r, out.m_hat, out.pi_hat, cfg)?;
    let lambda_phys = lambda_phys_schedule(epoch, cfg);
    let zero = tape.scalar(0.0);
    let l_phys = match out.phys {
        Some((a, p)) if lambda_phys > 0.0 => phys_loss(tape, a, p)?,
        _ => zero,
    };
    let l_cons = if cfg.lambda_cons > 0.0 {
        cons_loss(tape, bound, covariates, out.y_hat, cfg, rng)?
    } else {
        zero
    };
    let l_bias = match out.pi_hat {
        Some(pi) if cfg.lambda_bias > 0.0 => scoped_bias_loss(tape, pi, targets, cfg.bias_scope)?,
        _ => zero,
    };
    let l_imp = match out.m_hat {
        Some(m) if cfg.lambda_imp > 0.0 => imp_loss(tape, m, &targets.y, &targets.r)?.0,
        _ => zero,
    };
    let mut total = l_sup;
    for (w, l) in [
        (lambda_phys, l_phys),
        (cfg.lambda_cons, l_cons),
        (cfg.lambda_bias, l_bias),
        (cfg.lambda_imp, l_imp),
    ] {
        if w > 0.0 {
            let t = tape.mul_scalar(l, w);
            total = tape.add(total, t)?;
        }
    }
    Ok(LossBundle {
        l_sup,
        l_phys,
        l_cons,
        l_bias,
        l_imp,
        total,
        lambda_phys,
        no_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::rng;
    use crate::tensor::gradcheck::{finite_difference_check, GradCheck};
    use crate::world::{generate_world, WorldConfig};
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    fn value_of(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.value(v).item()
    }

    #[test]
    fn pseudo_outcome_cases() {
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let m = tape.constant(t(&[1.0, 1.0, 1.0, 1.0]));
        let p = tape.constant(t(&[0.5, 1.0, 0.5, 0.05]));
        let y = [9.0, 2.0, 2.0, 2.0];
        let r = [0.0, 1.0, 1.0, 1.0];
        let yt = pseudo_outcome(&mut tape, &y, &r, m, p, &cfg).unwrap();
        // R = 0 gives μ; π̃ = 1 gives y; π̂ = 0.5 gives 3; π̂ = 0.05 is clamped to 0.1
        assert_eq!(tape.value(yt).data(), &[1.0, 2.0, 3.0, 11.0]);
    }

    #[test]
    fn schedule_values() {
        let c = LossConfig::default();
        assert_eq!(lambda_phys_schedule(0.0, &c), 0.05);
        assert!((lambda_phys_schedule(10.0, &c) - 0.075).abs() < 1e-15);
        assert_eq!(lambda_phys_schedule(20.0, &c), 0.1);
        assert_eq!(lambda_phys_schedule(57.0, &c), 0.1);
    }

    #[test]
    fn simple_loss_values() {
        let cfg = LossConfig {
            sup_mode: SupMode::Naive,
            ..LossConfig::default()
        };
        let v = value_of(|tape| {
            let a = tape.constant(t(&[1.0, 2.0]));
            sup_loss(tape, a, &[0.0, 0.0], &[0.0, 0.0], None, None, &cfg).unwrap().0
        });
        assert_eq!(v, 0.0);
        let v = value_of(|tape| {
            let a = tape.constant(t(&[1.0, 2.0, 3.0]));
            let b = tape.constant(t(&[1.5, 2.5, 3.5]));
            phys_loss(tape, a, b).unwrap()
        });
        assert!((v - 0.25).abs() < 1e-15);
        let v = value_of(|tape| {
            let p = tape.constant(Tensor::full([4], 0.5));
            bias_loss(tape, p, &[1.0, 0.0, 1.0, 0.0]).unwrap()
        });
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let (v, flag) = {
            let mut tape = Tape::new();
            let m = tape.constant(t(&[4.0, 5.0]));
            let (l, f) = imp_loss(&mut tape, m, &[4.0, 0.0], &[1.0, 0.0]).unwrap();
            (tape.value(l).item(), f)
        };
        assert_eq!(v, 0.0);
        assert!(!flag);
    }

    #[test]
    fn constant_propensity_minimiser_is_label_rate() {
        let r: Vec<f64> = (0..40).map(|i| if i % 5 < 2 { 1.0 } else { 0.0 }).collect();
        let bce = |p: f64| {
            value_of(|tape| {
                let v = tape.constant(Tensor::full([40], p));
                bias_loss(tape, v, &r).unwrap()
            })
        };
        let best = (1..1000)
            .map(|i| i as f64 / 1000.0)
            .min_by(|a, b| bce(*a).total_cmp(&bce(*b)))
            .unwrap();
        assert!((best - 0.4).abs() < 1e-3);
    }

    #[test]
    fn aipw_gradient_matches_closed_form() {
        let cfg = LossConfig::default();
        let y = [0.3, -1.0, 2.0, 0.0, 1.1, -0.4];
        let r = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let m = t(&[0.1, 0.2, -0.3, 0.4, 0.0, 0.5]);
        let p = t(&[0.3, 0.9, 0.6, 0.05, 0.5, 0.8]);
        let yh = t(&[0.0, 0.5, 1.0, -1.0, 2.0, 0.2]);
        let mut tape = Tape::new();
        let yv = tape.param(yh.clone());
        let mv = tape.constant(m.clone());
        let pv = tape.constant(p.clone());
        let yt = pseudo_outcome(&mut tape, &y, &r, mv, pv, &cfg).unwrap();
        let yt = tape.value(yt).clone();
        let (l, _) = sup_loss(&mut tape, yv, &y, &r, Some(mv), Some(pv), &cfg).unwrap();
        let g = tape.backward(l).unwrap();
        let g = g.get(yv).unwrap();
        for i in 0..6 {
            let expect = 2.0 * (yh.data()[i] - yt.data()[i]) / 6.0;
            assert!((g.data()[i] - expect).abs() < 1e-14);
        }
        // detached inputs carry no tape gradient by design, so check the live form
        let live = LossConfig {
            detach_pi: false,
            detach_mu: false,
            ..cfg
        };
        let rep = finite_difference_check(&[yh, m, p], GradCheck::default(), |tape, v| {
            Ok(sup_loss(tape, v[0], &y, &r, Some(v[1]), Some(v[2]), &live)?.0)
        })
        .unwrap();
        assert!(rep.passes(1e-6), "{rep:?}");
    }

    #[test]
    fn ipw_weights_labels_by_inverse_propensity() {
        let cfg = LossConfig {
            sup_mode: SupMode::Ipw,
            ..LossConfig::default()
        };
        let v = value_of(|tape| {
            let yh = tape.constant(t(&[1.0, 1.0, 1.0, 1.0]));
            let p = tape.constant(t(&[0.5, 0.25, 0.01, 0.5]));
            sup_loss(tape, yh, &[0.0, 0.0, 0.0, 5.0], &[1.0, 1.0, 1.0, 0.0], None, Some(p), &cfg)
                .unwrap()
                .0
        });
        assert!((v - (2.0 + 4.0 + 10.0) / 4.0).abs() < 1e-14);
    }

    #[test]
    fn nan_labels_at_unlabelled_pixels_are_ignored() {
        let world = WorldConfig {
            patch_size: 6,
            n_gedi: 6,
            n_plot: 6,
            ..WorldConfig::default()
        };
        let mut ds = generate_world(&world).unwrap();
        let norm = NormStats::compute(&ds.train).unwrap();
        let p = &mut ds.train[0];
        let mask = p.mask.data().to_vec();
        for (v, m) in p.targets.data_mut().iter_mut().zip(mask) {
            if m == 0.0 {
                *v = f64::NAN;
            }
        }
        let targets = BatchTargets::new(&[&ds.train[0]], &norm).unwrap();
        assert!(targets.y.iter().all(|v| v.is_finite()));
    }

    fn tiny_setup(seed: u64) -> (ModelConfig, ModelParams, Vec<Patch>, NormStats) {
        let world = WorldConfig {
            patch_size: 5,
            n_gedi: 6,
            n_plot: 6,
            c_in: 4,
            seed,
            ..WorldConfig::default()
        };
        let ds = generate_world(&world).unwrap();
        let norm = NormStats::compute(&ds.train).unwrap();
        let mc = ModelConfig {
            c_in: 4,
            d: 4,
            encoder_blocks: 1,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&mc, seed).unwrap();
        let patches = ds.train.iter().take(2).cloned().collect();
        (mc, params, patches, norm)
    }

    #[test]
    fn bundle_recomposes_exactly() {
        let (mc, params, patches, norm) = tiny_setup(3);
        let cfg = LossConfig::default();
        let refs: Vec<&Patch> = patches.iter().collect();
        let xs: Vec<&Tensor> = patches.iter().map(|p| &p.covariates).collect();
        let targets = BatchTargets::new(&refs, &norm).unwrap();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let out = batch_forward(&mut tape, &b, &mc, &cfg, &xs, &norm).unwrap();
        let mut r = rng::seeded(0);
        let bundle = total_loss(&mut tape, &b, &out, &xs, &targets, 0.0, &cfg, &mut r).unwrap();
        let v = bundle.values(&tape);
        assert_eq!(bundle.lambda_phys, 0.05);
        let recomposed = v.sup + 0.05 * v.phys + 0.1 * v.cons + 0.1 * v.bias + 1.0 * v.imp;
        assert!((v.total - recomposed).abs() <= 1e-12 * v.total.abs());
    }

    #[test]
    fn auxiliary_weights_zero_reduce_to_masked_mse() {
        let (mc, params, patches, norm) = tiny_setup(4);
        let cfg = LossConfig {
            sup_mode: SupMode::Naive,
            lambda_phys_start: 0.0,
            lambda_phys_end: 0.0,
            lambda_cons: 0.0,
            lambda_bias: 0.0,
            lambda_imp: 0.0,
            ..LossConfig::default()
        };
        let refs: Vec<&Patch> = patches.iter().collect();
        let xs: Vec<&Tensor> = patches.iter().map(|p| &p.covariates).collect();
        let targets = BatchTargets::new(&refs, &norm).unwrap();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let out = batch_forward(&mut tape, &b, &mc, &cfg, &xs, &norm).unwrap();
        assert!(out.m_hat.is_none() && out.pi_hat.is_none() && out.phys.is_none());
        let mut r = rng::seeded(0);
        let bundle = total_loss(&mut tape, &b, &out, &xs, &targets, 0.0, &cfg, &mut r).unwrap();
        let yh = tape.value(out.y_hat).data().to_vec();
        let n: f64 = targets.r.iter().sum();
        let mse: f64 = yh
            .iter()
            .zip(&targets.y)
            .zip(&targets.r)
            .map(|((a, b), m)| m * (a - b) * (a - b))
            .sum::<f64>()
            / n;
        assert!((tape.value(bundle.total).item() - mse).abs() < 1e-12);
    }

    #[test]
    fn identity_augmentation_gives_zero_consistency() {
        let (mc, params, patches, norm) = tiny_setup(5);
        let cfg = LossConfig {
            aug_sigma: 0.0,
            aug_pdrop: 0.0,
            ..LossConfig::default()
        };
        let xs: Vec<&Tensor> = patches.iter().map(|p| &p.covariates).collect();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let out = batch_forward(&mut tape, &b, &mc, &cfg, &xs, &norm).unwrap();
        let mut r = rng::seeded(1);
        let l = cons_loss(&mut tape, &b, &xs, out.y_hat, &cfg, &mut r).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn augmentation_is_seeded() {
        let x = Tensor::new([2, 3, 3], (0..18).map(|v| v as f64).collect()).unwrap();
        let a = augment(&x, 0.05, 0.05, &mut rng::seeded(9));
        let b = augment(&x, 0.05, 0.05, &mut rng::seeded(9));
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        // default: the supervised term sends nothing into μ or π̂
        #[test]
        fn detached_baselines_receive_no_gradient(
            vals in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0, 0.01f64..0.99, any::<bool>()), 1..24)
        ) {
            let cfg = LossConfig::default();
            let n = vals.len();
            let col = |f: &dyn Fn(&(f64, f64, f64, f64, bool)) -> f64| Tensor::new([n], vals.iter().map(f).collect()).unwrap();
            let y: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let r: Vec<f64> = vals.iter().map(|v| if v.4 { 1.0 } else { 0.0 }).collect();
            let mut tape = Tape::new();
            let yh = tape.param(col(&|v| v.1));
            let m = tape.param(col(&|v| v.2));
            let p = tape.param(col(&|v| v.3));
            let (l, _) = sup_loss(&mut tape, yh, &y, &r, Some(m), Some(p), &cfg).unwrap();
            let g = tape.backward(l).unwrap();
            prop_assert!(g.get(m).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
            prop_assert!(g.get(p).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
        }

        // without the π detach, a labelled pixel with ŷ = μ pushes π̂ upward
        #[test]
        fn undetached_propensity_gradient_is_nonpositive(
            vals in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.01f64..0.99), 1..24)
        ) {
            let cfg = LossConfig { detach_pi: false, ..LossConfig::default() };
            let n = vals.len();
            let y: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let mu: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let r = vec![1.0; n];
            let mut tape = Tape::new();
            let yh = tape.param(Tensor::new([n], mu.clone()).unwrap());
            let m = tape.constant(Tensor::new([n], mu.clone()).unwrap());
            let p = tape.param(Tensor::new([n], vals.iter().map(|v| v.2).collect()).unwrap());
            let (l, _) = sup_loss(&mut tape, yh, &y, &r, Some(m), Some(p), &cfg).unwrap();
            let g = tape.backward(l).unwrap();
            let gp = g.get(p).unwrap();
            for i in 0..n {
                prop_assert!(gp.data()[i] <= 0.0);
                if y[i] != mu[i] && vals[i].2 > cfg.pi_min {
                    prop_assert!(gp.data()[i] < 0.0);
                }
            }
        }

        // without the μ detach and with ŷ = m̂, the loss is the 1/π̃²-weighted MSE
        #[test]
        fn undetached_baseline_gives_inverse_square_weighting(
            vals in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.01f64..0.99, any::<bool>()), 1..24)
        ) {
            let cfg = LossConfig { detach_mu: false, ..LossConfig::default() };
            let n = vals.len();
            let y: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let r: Vec<f64> = vals.iter().map(|v| if v.3 { 1.0 } else { 0.0 }).collect();
            let mut tape = Tape::new();
            let m = tape.param(Tensor::new([n], vals.iter().map(|v| v.1).collect()).unwrap());
            let p = tape.constant(Tensor::new([n], vals.iter().map(|v| v.2).collect()).unwrap());
            let (l, _) = sup_loss(&mut tape, m, &y, &r, Some(m), Some(p), &cfg).unwrap();
            let expect: f64 = vals.iter().zip(&r).map(|(v, &ri)| {
                let pt = v.2.clamp(cfg.pi_min, 1.0);
                ri * (v.0 - v.1).powi(2) / (pt * pt)
            }).sum::<f64>() / n as f64;
            let got = tape.value(l).item();
            prop_assert!((got - expect).abs() <= 1e-10 * expect.abs().max(1e-300));
        }

        #[test]
        fn weights_are_bounded(p in 1e-6f64..1.0, y in -5.0f64..5.0, mu in -5.0f64..5.0) {
            let cfg = LossConfig::default();
            let mut tape = Tape::new();
            let m = tape.constant(t(&[mu]));
            let pv = tape.constant(t(&[p]));
            let yt = pseudo_outcome(&mut tape, &[y], &[1.0], m, pv, &cfg).unwrap();
            let v = tape.value(yt).item();
            prop_assert!(v.is_finite());
            prop_assert!((v - mu).abs() <= 10.0 * (y - mu).abs() + 1e-12);
        }
    }
}
