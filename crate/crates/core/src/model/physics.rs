//! Learnable biomass relation applied to the predicted structural maps.
//!
//! Inputs are denormalised and passed through softplus before any power is
//! taken; the result is clamped to the physical range and renormalised with
//! the training biomass statistics.

use super::{Bound, Conv, ModelConfig, ModelParams, PhysLayout};
use crate::error::{Error, Result};
use crate::tensor::{softplus, Tape, Tensor, Var};
use crate::world::{NormStats, AGB, C, H, SD, WD};

/// Starting value of every raw physics parameter.
pub const PHYS_INIT_RAW: f64 = -4.0;

/// `scale = SCALE_REF * exp(scale_raw)`, so the raw start maps to a scale of 22.5.
pub const SCALE_REF: f64 = 22.5 * 54.598_150_033_144_236;

/// Guards `exp` against overflow; anything above is past the output clamp anyway.
fn log_guard(cfg: &ModelConfig) -> (f64, f64) {
    (-700.0, (2.0 * cfg.agb_clamp[1].max(1.0)).ln())
}

fn physical(tape: &mut Tape, y_hat: Var, norm: &NormStats, row: usize) -> Result<Var> {
    let z = tape.select(y_hat, row)?;
    let v = tape.mul_scalar(z, norm.std[row]);
    Ok(tape.add_scalar(v, norm.mean[row]))
}

/// `log(sp(x) + eps)` of a denormalised row.
fn log_sp(tape: &mut Tape, y_hat: Var, norm: &NormStats, row: usize, eps: f64) -> Result<Var> {
    let x = physical(tape, y_hat, norm, row)?;
    let s = tape.softplus(x);
    let s = tape.add_scalar(s, eps);
    tape.log(s)
}

fn conv(tape: &mut Tape, b: &Bound, c: Conv, x: Var) -> Result<Var> {
    tape.conv2d(x, b.vars[c.w], b.vars[c.b], 0)
}

/// Biomass in z-space, `[H, W]`, from regression outputs `[K, H, W]`.
pub fn physics_forward(
    cfg: &ModelConfig,
    b: &Bound,
    tape: &mut Tape,
    y_hat: Var,
    norm: &NormStats,
) -> Result<Var> {
    if norm.k() != cfg.k || tape.shape(y_hat).first() != Some(&cfg.k) {
        return Err(Error::ShapeMismatch {
            op: "physics",
            left: tape.shape(y_hat).to_vec(),
            right: vec![cfg.k, norm.k()],
        });
    }
    let eps = cfg.phys_eps;
    let (glo, ghi) = log_guard(cfg);
    let agb = match &b.layout.phys {
        PhysLayout::Allometric {
            alpha,
            scale,
            b: pb,
            c: pc,
            d: pd,
            e,
        } => {
            let v = |i: usize| b.vars[i];
            let alpha = tape.softplus(v(*alpha));
            let bb = tape.softplus(v(*pb));
            let cc = tape.softplus(v(*pc));
            let dd = tape.softplus(v(*pd));
            let lh = log_sp(tape, y_hat, norm, H, eps)?;
            let lc = log_sp(tape, y_hat, norm, C, eps)?;
            let t1 = tape.mul(bb, lh)?;
            let t2 = tape.mul(cc, lc)?;
            let inner = tape.add(t1, t2)?;
            let sd = physical(tape, y_hat, norm, SD)?;
            let sd = tape.softplus(sd);
            let expo = tape.mul(sd, dd)?;
            let expo = tape.clamp(expo, cfg.exponent_clamp[0], cfg.exponent_clamp[1])?;
            let mut log_mult = tape.mul(expo, inner)?;
            if let Some(e) = e {
                let ee = tape.softplus(v(*e));
                let lw = log_sp(tape, y_hat, norm, WD, eps)?;
                let t = tape.mul(ee, lw)?;
                log_mult = tape.add(log_mult, t)?;
            }
            log_mult = tape.add(log_mult, v(*scale))?;
            log_mult = tape.add_scalar(log_mult, SCALE_REF.ln());
            let log_mult = tape.clamp(log_mult, glo, ghi)?;
            let mult = tape.exp(log_mult);
            tape.add(mult, alpha)?
        }
        PhysLayout::PowerLaw { scale, exps } => {
            let rows = cfg.physics_inputs();
            let mut acc = tape.add_scalar(b.vars[*scale], SCALE_REF.ln());
            for (&row, &ei) in rows.iter().zip(exps) {
                let ee = tape.softplus(b.vars[ei]);
                let l = log_sp(tape, y_hat, norm, row, eps)?;
                let t = tape.mul(ee, l)?;
                acc = tape.add(acc, t)?;
            }
            let acc = tape.clamp(acc, glo, ghi)?;
            tape.exp(acc)
        }
        PhysLayout::Mlp { layers } => {
            let rows = cfg.physics_inputs();
            let inputs = rows
                .iter()
                .map(|&r| physical(tape, y_hat, norm, r))
                .collect::<Result<Vec<_>>>()?;
            let x = tape.stack(&inputs)?;
            let h = conv(tape, b, layers[0], x)?;
            let h = tape.relu(h);
            let h = conv(tape, b, layers[1], h)?;
            let h = tape.relu(h);
            let o = conv(tape, b, layers[2], h)?;
            let o = tape.select(o, 0)?;
            // read out in standardised biomass units
            let o = tape.mul_scalar(o, norm.std[AGB]);
            tape.add_scalar(o, norm.mean[AGB])
        }
    };
    let agb = tape.clamp(agb, cfg.agb_clamp[0], cfg.agb_clamp[1])?;
    let z = tape.add_scalar(agb, -norm.mean[AGB]);
    Ok(tape.mul_scalar(z, 1.0 / norm.std[AGB]))
}

/// Physical-unit biomass for a fixed parameter set, without gradients.
pub fn physics_forward_values(params: &ModelParams, y_hat: &Tensor, norm: &NormStats) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = params.bind_frozen(&mut tape);
    let y = tape.constant(y_hat.clone());
    let z = physics_forward(&params.config, &b, &mut tape, y, norm)?;
    // the z-space round trip can step an ulp past the clamp
    let [lo, hi] = params.config.agb_clamp;
    Ok(tape
        .value(z)
        .map(|v| (v * norm.std[AGB] + norm.mean[AGB]).clamp(lo, hi)))
}

/// Interpretable coefficients of an allometric physics module.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhiEstimate {
    pub alpha: f64,
    pub scale: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: Option<f64>,
}

/// `None` for the power-law and MLP variants.
pub fn extract_phi(params: &ModelParams) -> Option<PhiEstimate> {
    match params.layout().phys {
        PhysLayout::Allometric {
            alpha,
            scale,
            b,
            c,
            d,
            e,
        } => {
            let raw = |i: usize| params.tensors()[i].item();
            Some(PhiEstimate {
                alpha: softplus(raw(alpha)),
                scale: SCALE_REF * raw(scale).exp(),
                b: softplus(raw(b)),
                c: softplus(raw(c)),
                d: softplus(raw(d)),
                e: e.map(|i| softplus(raw(i))),
            })
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PhysicsVariant;
    use crate::tensor::gradcheck::{finite_difference_check, GradCheck};

    fn norm(k: usize) -> NormStats {
        let mut mean = vec![12.0, 0.5, 4.0, 120.0, 0.6];
        let mut std = vec![4.0, 0.15, 1.5, 50.0, 0.05];
        mean.truncate(k);
        std.truncate(k);
        NormStats { mean, std }
    }

    fn cfg(v: PhysicsVariant, k: usize) -> ModelConfig {
        ModelConfig {
            c_in: 2,
            k,
            d: 2,
            encoder_blocks: 0,
            physics_variant: v,
            ..ModelConfig::default()
        }
    }

    fn grid(k: usize, scale: f64) -> Tensor {
        let n = 4 * 5;
        Tensor::new(
            [k, 4, 5],
            (0..k * n).map(|i| scale * ((i as f64) * 0.71).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn initial_output_is_near_reference_scale() {
        for (v, k) in [(PhysicsVariant::Allometric, 5), (PhysicsVariant::AllometricNoWd, 4)] {
            let p = ModelParams::init(&cfg(v, k), 0).unwrap();
            let agb = physics_forward_values(&p, &grid(k, 2.0), &norm(k)).unwrap();
            for &a in agb.data() {
                assert!((20.0..=25.0).contains(&a), "{v:?}: {a}");
            }
        }
    }

    #[test]
    fn output_stays_in_physical_range() {
        for v in [
            PhysicsVariant::Allometric,
            PhysicsVariant::PowerLaw,
            PhysicsVariant::Mlp,
        ] {
            let mut p = ModelParams::init(&cfg(v, 5), 3).unwrap();
            for t in p.tensors_mut() {
                if t.numel() == 1 {
                    t.data_mut()[0] = 6.0;
                }
            }
            for s in [0.0, 5.0, 1e3] {
                let agb = physics_forward_values(&p, &grid(5, s), &norm(5)).unwrap();
                assert!(agb.data().iter().all(|a| (0.0..=2000.0).contains(a) && a.is_finite()));
            }
        }
    }

    #[test]
    fn extreme_inputs_stay_finite() {
        let p = ModelParams::init(&cfg(PhysicsVariant::Allometric, 5), 0).unwrap();
        let y = grid(5, 1e6);
        let agb = physics_forward_values(&p, &y, &norm(5)).unwrap();
        assert!(agb.is_finite());
    }

    #[test]
    fn extract_reports_initial_coefficients() {
        let p = ModelParams::init(&cfg(PhysicsVariant::Allometric, 5), 0).unwrap();
        let phi = extract_phi(&p).unwrap();
        assert!((phi.scale - 22.5).abs() < 1e-9);
        assert!((phi.b - softplus(-4.0)).abs() < 1e-15);
        assert!(phi.e.is_some());
        let p = ModelParams::init(&cfg(PhysicsVariant::Mlp, 5), 0).unwrap();
        assert!(extract_phi(&p).is_none());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (v, k) in [
            (PhysicsVariant::Allometric, 5),
            (PhysicsVariant::AllometricNoWd, 4),
            (PhysicsVariant::PowerLaw, 5),
            (PhysicsVariant::Mlp, 5),
        ] {
            let c = cfg(v, k);
            let mut p = ModelParams::init(&c, 11).unwrap();
            for t in p.tensors_mut() {
                if t.numel() == 1 {
                    t.data_mut()[0] = -0.5;
                }
            }
            let n = norm(k);
            let y = grid(k, 1.0);
            let phys_names: Vec<usize> = p
                .names()
                .iter()
                .enumerate()
                .filter(|(_, n)| n.starts_with("phys."))
                .map(|(i, _)| i)
                .collect();
            let mut theta: Vec<Tensor> = phys_names.iter().map(|&i| p.tensors()[i].clone()).collect();
            theta.push(y);
            let report = finite_difference_check(&theta, GradCheck::default(), |tape, vars| {
                let mut b = p.bind_frozen(tape);
                for (slot, &i) in phys_names.iter().enumerate() {
                    b.vars[i] = vars[slot];
                }
                let z = physics_forward(&c, &b, tape, vars[phys_names.len()], &n)?;
                let sq = tape.square(z);
                Ok(tape.mean(sq))
            })
            .unwrap();
            assert!(report.passes(1e-4), "{v:?}: {report:?}");
        }
    }
}
