//! Experiment files and ablation grids.
//!
//! An experiment is one TOML document with `[world]`, `[model]`, `[loss]`,
//! `[train]` and `[eval]` sections; every key is optional and falls back to
//! the library default. A grid lists named variants, each a partial document
//! merged over a base experiment.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::world::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Output root; the command line and `STRUMPL_OUT` take precedence.
    pub out: Option<PathBuf>,
    /// Dataset directory; defaults to `<root>/<name>/dataset`.
    pub dataset: Option<PathBuf>,
    /// One training run per seed.
    pub seeds: Vec<u64>,
    pub world: WorldConfig,
    /// `c_in` and `k` are always taken from the world section.
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            out: None,
            dataset: None,
            seeds: vec![42],
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::Missing(path.to_path_buf()))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    /// Copies world sizes into the model section and validates every section.
    fn finish(mut self) -> Result<Self> {
        self.model.c_in = self.world.c_in;
        self.model.k = self.world.k;
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("bad experiment name {:?}", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        self.world.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.eval.target_variable >= self.world.k {
            return Err(Error::Config("eval.target_variable outside the variable list".into()));
        }
        Ok(self)
    }

    /// Output root: explicit override, then `STRUMPL_OUT`, then the file, then `runs`.
    pub fn root(&self, cli_out: Option<&Path>) -> PathBuf {
        if let Some(p) = cli_out {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os("STRUMPL_OUT") {
            return PathBuf::from(p);
        }
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn experiment_dir(&self, cli_out: Option<&Path>) -> PathBuf {
        self.root(cli_out).join(&self.name)
    }

    pub fn dataset_dir(&self, cli_out: Option<&Path>) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.experiment_dir(cli_out).join("dataset"))
    }

    pub fn run_dir(&self, cli_out: Option<&Path>, seed: u64) -> PathBuf {
        self.experiment_dir(cli_out).join(format!("seed_{seed}"))
    }

    /// Config for one seed, with the trainer seed set.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.train.seed = seed;
        c
    }

    /// Merges a partial TOML table over this config.
    pub fn patched(&self, patch: &toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(self).map_err(config_err)?;
        merge(&mut base, patch);
        let cfg: Self = base.try_into().map_err(config_err)?;
        cfg.finish()
    }
}

fn merge(base: &mut toml::Table, patch: &toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Hash of everything that defines a run except its name and seed.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.name = String::new();
    c.out = None;
    c.seeds.clear();
    c.train.seed = 0;
    let text = toml::to_string(&c).expect("config serialises");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub patch: toml::Table,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub name: String,
    pub variants: Vec<Variant>,
}

pub const STANDARD_GRID: &str = "standard";

fn table(text: &str) -> toml::Table {
    text.parse().expect("built-in patch parses")
}

impl AblationGrid {
    /// Grid file: optional `name`, then `[[variant]]` tables each with a `name`
    /// and any experiment keys to override.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(config_err)?;
        let name = match doc.remove("name") {
            Some(toml::Value::String(s)) => s,
            None => "grid".into(),
            Some(_) => return Err(Error::Config("grid name must be a string".into())),
        };
        let variants = match doc.remove("variant") {
            Some(toml::Value::Array(items)) => items,
            None => Vec::new(),
            Some(_) => return Err(Error::Config("`variant` must be an array of tables".into())),
        };
        if let Some(k) = doc.keys().next() {
            return Err(Error::Config(format!("unknown grid key `{k}`")));
        }
        let variants = variants
            .into_iter()
            .map(|v| {
                let toml::Value::Table(mut t) = v else {
                    return Err(Error::Config("each variant must be a table".into()));
                };
                match t.remove("name") {
                    Some(toml::Value::String(n)) => Ok(Variant { name: n, patch: t }),
                    _ => Err(Error::Config("every variant needs a string `name`".into())),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let grid = Self { name, variants };
        grid.validate()?;
        Ok(grid)
    }

    pub fn load(spec: &str) -> Result<Self> {
        if spec == STANDARD_GRID {
            return Ok(Self::standard());
        }
        let path = Path::new(spec);
        let text = fs::read_to_string(path).map_err(|_| Error::Missing(path.to_path_buf()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("grid has no variants".into()));
        }
        let mut seen = HashSet::new();
        for v in &self.variants {
            if v.name.is_empty() || v.name.contains(['/', '\\']) {
                return Err(Error::Config(format!("bad variant name {:?}", v.name)));
            }
            if !seen.insert(&v.name) {
                return Err(Error::Config(format!("duplicate variant name `{}`", v.name)));
            }
        }
        Ok(())
    }

    /// Supervision form, stop-gradient, physics-form and loss-term ablations,
    /// each on a single seed.
    pub fn standard() -> Self {
        let rows: [(&str, &str); 13] = [
            ("full", ""),
            ("sup_naive", "loss.sup_mode = \"naive\""),
            ("sup_ipw", "loss.sup_mode = \"ipw\""),
            ("no_detach_pi", "loss.detach_pi = false"),
            ("no_detach_mu", "loss.detach_mu = false"),
            ("no_detach_both", "loss.detach_pi = false\nloss.detach_mu = false"),
            ("phys_power_law", "model.physics_variant = \"power_law\""),
            ("phys_mlp", "model.physics_variant = \"mlp\""),
            ("no_phys", "loss.lambda_phys_start = 0.0\nloss.lambda_phys_end = 0.0"),
            ("no_cons", "loss.lambda_cons = 0.0"),
            ("no_bias", "loss.lambda_bias = 0.0"),
            ("no_imp", "loss.lambda_imp = 0.0"),
            (
                "mtl_only",
                "loss.sup_mode = \"naive\"\nloss.lambda_phys_start = 0.0\nloss.lambda_phys_end = 0.0\n\
                 loss.lambda_cons = 0.0\nloss.lambda_bias = 0.0\nloss.lambda_imp = 0.0",
            ),
        ];
        Self {
            name: STANDARD_GRID.into(),
            variants: rows
                .iter()
                .map(|(name, patch)| {
                    let mut t = table(patch);
                    t.insert("seeds".into(), toml::Value::Array(vec![toml::Value::Integer(42)]));
                    Variant {
                        name: (*name).into(),
                        patch: t,
                    }
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::SupMode;
    use crate::model::PhysicsVariant;

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c.seeds, vec![42]);
        assert_eq!(c.model.k, c.world.k);
        assert_eq!(c.model.c_in, c.world.c_in);
    }

    #[test]
    fn sections_parse() {
        let c = ExperimentConfig::from_toml(
            "name = \"x\"\nseeds = [1, 2]\n[world]\nk = 4\nn_gedi = 20\n[model]\nphysics_variant = \"power_law\"\n[loss]\nsup_mode = \"ipw\"\n",
        )
        .unwrap();
        assert_eq!(c.model.k, 4);
        assert_eq!(c.loss.sup_mode, SupMode::Ipw);
        assert_eq!(c.model.physics_variant, PhysicsVariant::PowerLaw);
        assert_eq!(c.seeds, vec![1, 2]);
    }

    #[test]
    fn bad_documents_are_config_errors() {
        for text in [
            "seeds = []",
            "[loss]\nbogus = 1",
            "[model]\nd = \"wide\"",
            "[world]\nk = 4\n[model]\nphysics_variant = \"allometric\"",
            "not toml at all [",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn round_trip() {
        let c = ExperimentConfig::from_toml("name = \"r\"\n[train]\nbatch_size = 8").unwrap();
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn hash_ignores_seed_and_name_only() {
        let base = ExperimentConfig::default();
        let a = base.with_seed(1);
        let mut b = base.with_seed(2);
        b.name = "other".into();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.loss.lambda_cons = 0.0;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn patches_merge_deeply() {
        let base = ExperimentConfig::default();
        let p = base.patched(&table("loss.detach_pi = false\nworld.n_plot = 7")).unwrap();
        assert!(!p.loss.detach_pi);
        assert!(p.loss.detach_mu);
        assert_eq!(p.world.n_plot, 7);
        assert_eq!(p.world.n_gedi, base.world.n_gedi);
        assert!(base.patched(&table("loss.pi_min = 0.0")).is_err());
    }

    #[test]
    fn grid_parsing() {
        let g = AblationGrid::from_toml(
            "name = \"g\"\n[[variant]]\nname = \"a\"\nloss = { sup_mode = \"naive\" }\n[[variant]]\nname = \"b\"\n",
        )
        .unwrap();
        assert_eq!(g.variants.len(), 2);
        assert!(AblationGrid::from_toml("name = \"empty\"").is_err());
        assert!(AblationGrid::from_toml("[[variant]]\nname = \"a\"\n[[variant]]\nname = \"a\"").is_err());
        assert!(AblationGrid::from_toml("[[variant]]\nloss = {}").is_err());
    }

    #[test]
    fn builtin_grid_covers_the_ablation_rows() {
        let g = AblationGrid::load(STANDARD_GRID).unwrap();
        let names: Vec<&str> = g.variants.iter().map(|v| v.name.as_str()).collect();
        for want in ["sup_naive", "sup_ipw", "full", "no_detach_pi", "no_detach_mu", "phys_power_law", "phys_mlp", "no_phys"] {
            assert!(names.contains(&want), "{want}");
        }
        let base = ExperimentConfig::default();
        for v in &g.variants {
            let c = base.patched(&v.patch).unwrap();
            assert_eq!(c.seeds, vec![42]);
        }
    }
}
