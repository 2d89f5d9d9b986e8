//! Shared residual encoder, per-variable regression and imputation heads, a
//! propensity head, and the learnable physics module.

mod checkpoint;
mod physics;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use physics::{extract_phi, physics_forward, physics_forward_values, PhiEstimate, PHYS_INIT_RAW, SCALE_REF};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhysicsVariant {
    Allometric,
    AllometricNoWd,
    PowerLaw,
    Mlp,
}

impl PhysicsVariant {
    pub fn name(self) -> &'static str {
        match self {
            PhysicsVariant::Allometric => "allometric",
            PhysicsVariant::AllometricNoWd => "allometric_no_wd",
            PhysicsVariant::PowerLaw => "power_law",
            PhysicsVariant::Mlp => "mlp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub c_in: usize,
    pub k: usize,
    /// Encoder feature width; heads halve it.
    pub d: usize,
    pub encoder_blocks: usize,
    pub physics_variant: PhysicsVariant,
    pub pi_min: f64,
    pub agb_clamp: [f64; 2],
    pub exponent_clamp: [f64; 2],
    /// Added inside every physics log.
    pub phys_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_in: 8,
            k: 5,
            d: 32,
            encoder_blocks: 3,
            physics_variant: PhysicsVariant::Allometric,
            pi_min: 0.1,
            agb_clamp: [0.0, 2000.0],
            exponent_clamp: [-10.0, 10.0],
            phys_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.k == 4 || self.k == 5) {
            return bad(format!("k must be 4 or 5, got {}", self.k));
        }
        if self.c_in == 0 {
            return bad("c_in must be positive".into());
        }
        if self.d < 2 || self.d % 2 != 0 {
            return bad(format!("feature width d must be even and >= 2, got {}", self.d));
        }
        if !(self.pi_min > 0.0 && self.pi_min < 1.0) {
            return bad(format!("pi_min must lie in (0,1), got {}", self.pi_min));
        }
        if !(self.agb_clamp[0] < self.agb_clamp[1]) || !(self.exponent_clamp[0] < self.exponent_clamp[1]) {
            return bad("clamp ranges must satisfy lo < hi".into());
        }
        if !(self.phys_eps > 0.0) {
            return bad("phys_eps must be positive".into());
        }
        if self.physics_variant == PhysicsVariant::Allometric && self.k < 5 {
            return bad("the allometric physics variant needs wood density (k = 5); use allometric_no_wd".into());
        }
        Ok(())
    }

    /// Structural rows fed to the physics module.
    pub fn physics_inputs(&self) -> Vec<usize> {
        use crate::world::{C, H, SD, WD};
        match self.physics_variant {
            PhysicsVariant::AllometricNoWd => vec![H, C, SD],
            _ if self.k == 5 => vec![H, C, SD, WD],
            _ => vec![H, C, SD],
        }
    }
}

pub const MLP_HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Head {
    pub c3: Conv,
    pub c1: Conv,
}

#[derive(Clone, Debug)]
pub(crate) enum PhysLayout {
    Allometric {
        alpha: usize,
        scale: usize,
        b: usize,
        c: usize,
        d: usize,
        e: Option<usize>,
    },
    PowerLaw {
        scale: usize,
        exps: Vec<usize>,
    },
    Mlp {
        layers: [Conv; 3],
    },
}

/// Parameter indices, derived from the config alone.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub stem: Conv,
    pub blocks: Vec<[Conv; 2]>,
    pub reg: Vec<Head>,
    pub imp: Vec<Head>,
    pub bias: Head,
    pub phys: PhysLayout,
}

struct Spec {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl Spec {
    fn add(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) -> Conv {
        Conv {
            w: self.add(format!("{prefix}.w"), vec![c_out, c_in, k, k]),
            b: self.add(format!("{prefix}.b"), vec![c_out]),
        }
    }

    fn head(&mut self, prefix: &str, d: usize, out: usize) -> Head {
        Head {
            c3: self.conv(&format!("{prefix}.conv3"), d / 2, d, 3),
            c1: self.conv(&format!("{prefix}.conv1"), out, d / 2, 1),
        }
    }
}

fn layout(cfg: &ModelConfig) -> (Spec, Layout) {
    let mut s = Spec {
        names: Vec::new(),
        shapes: Vec::new(),
    };
    let d = cfg.d;
    let stem = s.conv("enc.stem", d, cfg.c_in, 3);
    let blocks = (0..cfg.encoder_blocks)
        .map(|i| {
            [
                s.conv(&format!("enc.block{i}.conv_a"), d, d, 3),
                s.conv(&format!("enc.block{i}.conv_b"), d, d, 3),
            ]
        })
        .collect();
    let reg = (0..cfg.k).map(|k| s.head(&format!("reg{k}"), d, 1)).collect();
    let imp = (0..cfg.k).map(|k| s.head(&format!("imp{k}"), d, 1)).collect();
    let bias = s.head("bias", d, cfg.k);
    let phys = match cfg.physics_variant {
        PhysicsVariant::Allometric | PhysicsVariant::AllometricNoWd => {
            let mut scalar = |n: &str| s.add(format!("phys.{n}"), vec![1]);
            let alpha = scalar("alpha_raw");
            let scale = scalar("scale_raw");
            let b = scalar("b_raw");
            let c = scalar("c_raw");
            let dd = scalar("d_raw");
            let e = (cfg.physics_variant == PhysicsVariant::Allometric).then(|| scalar("e_raw"));
            PhysLayout::Allometric {
                alpha,
                scale,
                b,
                c,
                d: dd,
                e,
            }
        }
        PhysicsVariant::PowerLaw => {
            let scale = s.add("phys.scale_raw".into(), vec![1]);
            let exps = cfg
                .physics_inputs()
                .iter()
                .map(|&r| s.add(format!("phys.e_{}_raw", crate::world::VARIABLE_NAMES[r]), vec![1]))
                .collect();
            PhysLayout::PowerLaw { scale, exps }
        }
        PhysicsVariant::Mlp => {
            let n = cfg.physics_inputs().len();
            PhysLayout::Mlp {
                layers: [
                    s.conv("phys.mlp0", MLP_HIDDEN, n, 1),
                    s.conv("phys.mlp1", MLP_HIDDEN, MLP_HIDDEN, 1),
                    s.conv("phys.mlp2", 1, MLP_HIDDEN, 1),
                ],
            }
        }
    };
    (
        s,
        Layout {
            stem,
            blocks,
            reg,
            imp,
            bias,
            phys,
        },
    )
}

/// All learnable state, in a fixed named order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamCounts {
    pub encoder: usize,
    pub regression_heads: usize,
    pub imputation_heads: usize,
    pub bias_head: usize,
    pub physics: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.encoder + self.regression_heads + self.imputation_heads + self.bias_head + self.physics
    }
}

/// Which block a named parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Encoder,
    Regression,
    Imputation,
    Bias,
    Physics,
}

pub fn component_of(name: &str) -> Component {
    if name.starts_with("enc.") {
        Component::Encoder
    } else if name.starts_with("reg") {
        Component::Regression
    } else if name.starts_with("imp") {
        Component::Imputation
    } else if name.starts_with("bias.") {
        Component::Bias
    } else {
        Component::Physics
    }
}

impl ModelParams {
    /// Fan-in scaled uniform weights; physics raw parameters at their fixed start.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (spec, lay) = layout(config);
        let mut rng = rng::derive(seed, 10, 0);
        let mut tensors: Vec<Tensor> = spec
            .names
            .iter()
            .zip(&spec.shapes)
            .map(|(name, shape)| {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1] * shape[2] * shape[3]
                } else {
                    // a bias: fan-in of its sibling weight
                    let weight = name.strip_suffix(".b").map(|s| format!("{s}.w"));
                    spec.names
                        .iter()
                        .position(|n| Some(n) == weight.as_ref())
                        .map(|i| spec.shapes[i][1..].iter().product())
                        .unwrap_or(1)
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(shape.clone(), data).expect("shape from spec")
            })
            .collect();
        match &lay.phys {
            PhysLayout::Allometric {
                alpha,
                scale,
                b,
                c,
                d,
                e,
            } => {
                for i in [*alpha, *scale, *b, *c, *d].into_iter().chain(*e) {
                    tensors[i] = Tensor::scalar(PHYS_INIT_RAW);
                }
            }
            PhysLayout::PowerLaw { scale, exps } => {
                for &i in std::iter::once(scale).chain(exps) {
                    tensors[i] = Tensor::scalar(PHYS_INIT_RAW);
                }
            }
            PhysLayout::Mlp { .. } => {}
        }
        Ok(Self {
            config: config.clone(),
            names: spec.names,
            tensors,
        })
    }

    /// Rebuild from named tensors, checking every name and shape against the config.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (spec, _) = layout(config);
        if named.len() != spec.names.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter blocks, found {}",
                spec.names.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(spec.names.iter().zip(&spec.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "parameter {name} {:?} does not match expected {want} {shape:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names: spec.names,
            tensors,
        })
    }

    pub(crate) fn layout(&self) -> Layout {
        layout(&self.config).1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn count(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for (name, t) in self.iter() {
            let n = t.numel();
            match component_of(name) {
                Component::Encoder => c.encoder += n,
                Component::Regression => c.regression_heads += n,
                Component::Imputation => c.imputation_heads += n,
                Component::Bias => c.bias_head += n,
                Component::Physics => c.physics += n,
            }
        }
        c
    }

    /// Record every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
            layout: self.layout(),
        }
    }

    /// Wrap leaves already on a tape, one per parameter in declaration order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter leaves, got {}",
                self.tensors.len(),
                vars.len()
            )));
        }
        Ok(Bound {
            vars: vars.to_vec(),
            layout: self.layout(),
        })
    }

    /// Record parameters as constants, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
            layout: self.layout(),
        }
    }
}

pub fn count_params(params: &ModelParams) -> ParamCounts {
    params.count()
}

/// Parameters bound onto one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    pub(crate) layout: Layout,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub imputation: bool,
    pub propensity: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            imputation: true,
            propensity: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutputs {
    /// `[D, H, W]`
    pub z: Var,
    /// `[K, H, W]`, z-space
    pub y_hat: Var,
    pub m_hat: Option<Var>,
    pub pi_hat: Option<Var>,
}

fn conv(tape: &mut Tape, b: &Bound, c: Conv, x: Var) -> Result<Var> {
    let w = b.vars[c.w];
    let pad = (tape.shape(w)[2] - 1) / 2;
    tape.conv2d(x, w, b.vars[c.b], pad)
}

fn head(tape: &mut Tape, b: &Bound, h: Head, z: Var) -> Result<Var> {
    let a = conv(tape, b, h.c3, z)?;
    let a = tape.relu(a);
    conv(tape, b, h.c1, a)
}

pub fn encode(tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
    let mut h = conv(tape, b, b.layout.stem, x)?;
    h = tape.relu(h);
    for [ca, cb] in b.layout.blocks.clone() {
        let a = conv(tape, b, ca, h)?;
        let a = tape.relu(a);
        let a = conv(tape, b, cb, a)?;
        let s = tape.add(a, h)?;
        h = tape.relu(s);
    }
    Ok(h)
}

fn per_variable(tape: &mut Tape, b: &Bound, heads: &[Head], z: Var) -> Result<Var> {
    let rows = heads
        .iter()
        .map(|h| {
            let o = head(tape, b, *h, z)?;
            tape.select(o, 0)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.stack(&rows)
}

/// Regression heads only, as used by the augmented branch of the consistency loss.
pub fn regress(tape: &mut Tape, b: &Bound, z: Var) -> Result<Var> {
    let heads = b.layout.reg.clone();
    per_variable(tape, b, &heads, z)
}

pub fn forward(
    cfg: &ModelConfig,
    b: &Bound,
    tape: &mut Tape,
    covariates: Var,
    opts: ForwardOptions,
) -> Result<ModelOutputs> {
    let shape = tape.shape(covariates);
    if shape.len() != 3 || shape[0] != cfg.c_in {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: shape.to_vec(),
            right: vec![cfg.c_in, 0, 0],
        });
    }
    let z = encode(tape, b, covariates)?;
    let y_hat = regress(tape, b, z)?;
    let m_hat = if opts.imputation {
        let heads = b.layout.imp.clone();
        Some(per_variable(tape, b, &heads, z)?)
    } else {
        None
    };
    let pi_hat = if opts.propensity {
        let logits = head(tape, b, b.layout.bias, z)?;
        Some(tape.sigmoid(logits))
    } else {
        None
    };
    Ok(ModelOutputs {
        z,
        y_hat,
        m_hat,
        pi_hat,
    })
}

/// Plain-valued outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub y_hat: Tensor,
    pub m_hat: Tensor,
    pub pi_hat: Tensor,
}

/// Inference without gradients.
pub fn predict(params: &ModelParams, covariates: &Tensor) -> Result<Prediction> {
    let mut tape = Tape::new();
    let b = params.bind_frozen(&mut tape);
    let x = tape.constant(covariates.clone());
    let out = forward(&params.config, &b, &mut tape, x, ForwardOptions::default())?;
    Ok(Prediction {
        y_hat: tape.value(out.y_hat).clone(),
        m_hat: tape.value(out.m_hat.expect("requested")).clone(),
        pi_hat: tape.value(out.pi_hat.expect("requested")).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            c_in: 3,
            k: 5,
            d: 4,
            encoder_blocks: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_shapes_and_ranges() {
        let p = ModelParams::init(&cfg(), 1).unwrap();
        let x = Tensor::new([3, 6, 5], (0..90).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let xv = tape.constant(x);
        let o = forward(&p.config, &b, &mut tape, xv, ForwardOptions::default()).unwrap();
        assert_eq!(tape.shape(o.z), &[4, 6, 5]);
        assert_eq!(tape.shape(o.y_hat), &[5, 6, 5]);
        assert_eq!(tape.shape(o.m_hat.unwrap()), &[5, 6, 5]);
        let pi = tape.value(o.pi_hat.unwrap());
        assert_eq!(pi.shape(), &[5, 6, 5]);
        assert!(pi.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_bias_head_gives_half() {
        let mut p = ModelParams::init(&cfg(), 1).unwrap();
        for name in ["bias.conv1.w", "bias.conv1.b"] {
            let t = p.get_mut(name).unwrap();
            t.data_mut().fill(0.0);
        }
        let x = Tensor::full([3, 4, 4], 0.3);
        let pred = predict(&p, &x).unwrap();
        assert!(pred.pi_hat.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn wrong_input_channels_is_an_error() {
        let p = ModelParams::init(&cfg(), 1).unwrap();
        assert!(predict(&p, &Tensor::zeros([2, 4, 4])).is_err());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = ModelParams::init(&cfg(), 7).unwrap();
        let b = ModelParams::init(&cfg(), 7).unwrap();
        let c = ModelParams::init(&cfg(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn physics_counts_per_variant() {
        let count = |v: PhysicsVariant, k: usize| {
            let c = ModelConfig {
                physics_variant: v,
                k,
                ..cfg()
            };
            ModelParams::init(&c, 0).unwrap().count()
        };
        assert_eq!(count(PhysicsVariant::Allometric, 5).physics, 6);
        assert_eq!(count(PhysicsVariant::AllometricNoWd, 4).physics, 5);
        assert_eq!(count(PhysicsVariant::PowerLaw, 5).physics, 5);
        assert_eq!(count(PhysicsVariant::PowerLaw, 4).physics, 4);
        let c = count(PhysicsVariant::Allometric, 5);
        assert_eq!(c.regression_heads, c.imputation_heads);
        // per head: 3x3 D->D/2 plus 1x1 D/2->1, with biases
        let d = 4;
        let per_head = d / 2 * d * 9 + d / 2 + d / 2 + 1;
        assert_eq!(c.regression_heads, 5 * per_head);
        assert_eq!(c.bias_head, d / 2 * d * 9 + d / 2 + 5 * d / 2 + 5);
    }

    #[test]
    fn allometric_needs_wood_density() {
        let c = ModelConfig {
            k: 4,
            physics_variant: PhysicsVariant::Allometric,
            ..cfg()
        };
        assert!(matches!(ModelParams::init(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn heads_share_no_parameters() {
        let p = ModelParams::init(&cfg(), 0).unwrap();
        let reg: Vec<_> = p.names().iter().filter(|n| n.starts_with("reg")).collect();
        let imp: Vec<_> = p.names().iter().filter(|n| n.starts_with("imp")).collect();
        assert_eq!(reg.len(), imp.len());
        assert!(reg.iter().all(|r| !imp.contains(r)));
    }
}
