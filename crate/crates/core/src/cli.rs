//! `strumpl generate|train|evaluate|ablate`.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration error, 3 missing
//! input, 4 incompatible inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use crate::config::{config_hash, AblationGrid, ExperimentConfig, STANDARD_GRID};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, Sections};
use crate::model::{load_checkpoint, ModelParams};
use crate::trainer::{self, RunManifest, RunOptions, CHECKPOINT_FILE};
use crate::world::{self, Dataset, NormStats, Split, VARIABLE_NAMES};

/// Copy of the experiment config stored in every run directory.
pub const RUN_CONFIG: &str = "experiment.toml";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

#[derive(Debug, Parser)]
#[command(name = "strumpl", version, about = "Train and evaluate multi-source biomass models on synthetic worlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (TOML); library defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// World seed for `generate`, single training seed otherwise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Concurrent trainings for `ablate`.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Output root; overrides STRUMPL_OUT and the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw the synthetic world and write it to the dataset directory.
    Generate,
    /// Train one run per seed and write a mean/std summary.
    Train {
        /// Print validation checks to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Score a trained run on the test split.
    Evaluate {
        /// Run directory; defaults to the first seed's run of the experiment.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        stratified: bool,
        #[arg(long)]
        calibration: bool,
        /// Second run directory for a paired bootstrap on the target variable.
        #[arg(long)]
        bootstrap_against: Option<PathBuf>,
    },
    /// Run every variant of a grid file, or the built-in `standard` grid.
    Ablate {
        #[arg(long, default_value = STANDARD_GRID)]
        grid: String,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Missing(_) => 3,
        Error::Incompatible(_) => 4,
        _ => 1,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Generate => {
            let mut cfg = load_config(cli.config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.world.seed = s;
            }
            let dir = cmd_generate(&cfg, out)?;
            println!("{}", dir.display());
        }
        Command::Train { verbose } => {
            let mut cfg = load_config(cli.config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            let dir = cmd_train(&cfg, out, *verbose)?;
            println!("{}", dir.display());
        }
        Command::Evaluate {
            run,
            stratified,
            calibration,
            bootstrap_against,
        } => {
            let run_dir = match run {
                Some(r) => r.clone(),
                None => {
                    let cfg = load_config(cli.config.as_deref())?;
                    cfg.run_dir(out, cli.seed.unwrap_or(cfg.seeds[0]))
                }
            };
            let sections = Sections {
                stratified: *stratified,
                calibration: *calibration,
            };
            let report = cmd_evaluate(
                &run_dir,
                cli.config.as_deref(),
                out,
                sections,
                bootstrap_against.as_deref(),
            )?;
            let (r, b) = report.rmse_bias[report_target(&run_dir)?];
            println!("{}: rmse {r:.4} bias {b:+.4}", run_dir.display());
        }
        Command::Ablate { grid } => {
            let base = load_config(cli.config.as_deref())?;
            let grid = AblationGrid::load(grid)?;
            let (path, failed) = cmd_ablate(&base, &grid, out, cli.jobs, cli.seed)?;
            println!("{}", path.display());
            if failed > 0 {
                return Err(Error::Invalid(format!("{failed} ablation run(s) failed; see {}", path.display())));
            }
        }
    }
    Ok(())
}

fn report_target(run_dir: &Path) -> Result<usize> {
    Ok(run_config(run_dir)?.map_or(world::AGB, |c| c.eval.target_variable))
}

fn run_config(run_dir: &Path) -> Result<Option<ExperimentConfig>> {
    let p = run_dir.join(RUN_CONFIG);
    if p.exists() {
        ExperimentConfig::load(&p).map(Some)
    } else {
        Ok(None)
    }
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let ds = world::generate_world(&cfg.world)?;
    let dir = cfg.dataset_dir(out);
    world::save_dataset(&ds, &dir)?;
    Ok(dir)
}

/// Dataset plus its content hash; the model sizes follow the stored world.
fn open_dataset(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(Dataset, String)> {
    let dir = cfg.dataset_dir(out);
    let ds = world::load_dataset(&dir)?;
    let hash = world::dataset_hash(&dir)?;
    Ok((ds, hash))
}

fn sized_for(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    c.world = ds.config.clone();
    c.model.c_in = ds.config.c_in;
    c.model.k = ds.config.k;
    c.model.validate()?;
    Ok(c)
}

/// Trains, then scores the best checkpoint on the test split into the run directory.
fn train_and_score(cfg: &ExperimentConfig, ds: &Dataset, hash: &str, dir: &Path, verbose: bool) -> Result<EvalReport> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RUN_CONFIG), cfg.to_toml()?)?;
    let opts = RunOptions {
        dir: Some(dir.to_path_buf()),
        dataset_hash: Some(hash.to_string()),
        verbose,
    };
    let run = trainer::train(ds, &cfg.model, &cfg.loss, &cfg.train, &opts)?;
    let report = eval::evaluate(&run.best, ds.split(Split::Test), &run.norm, &cfg.eval, None)?;
    eval::write_report(&report, dir, Sections::ALL)?;
    Ok(report)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

pub fn cmd_train(cfg: &ExperimentConfig, out: Option<&Path>, verbose: bool) -> Result<PathBuf> {
    let (ds, hash) = open_dataset(cfg, out)?;
    let cfg = sized_for(cfg, &ds)?;
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let c = cfg.with_seed(seed);
        let dir = cfg.run_dir(out, seed);
        reports.push(train_and_score(&c, &ds, &hash, &dir, verbose)?);
    }
    let exp = cfg.experiment_dir(out);
    let mut s = String::from("metric,mean,std,n\n");
    for (v, name) in VARIABLE_NAMES[..cfg.world.k].iter().enumerate() {
        for (label, pick) in [("rmse", 0usize), ("bias", 1)] {
            let vals: Vec<f64> = reports
                .iter()
                .map(|r| if pick == 0 { r.rmse_bias[v].0 } else { r.rmse_bias[v].1 })
                .collect();
            let (m, sd) = mean_std(&vals);
            writeln!(s, "{label}_{name},{m:.10e},{sd:.10e},{}", vals.len()).expect("string write");
        }
    }
    fs::write(exp.join(SUMMARY_CSV), s)?;
    Ok(exp)
}

fn load_run(dir: &Path, ds: &Dataset) -> Result<(ModelParams, NormStats)> {
    let manifest = RunManifest::load(dir)?;
    let params = load_checkpoint(&dir.join(CHECKPOINT_FILE), Some(&manifest.model))?;
    let mc = &params.config;
    if mc.k != ds.config.k || mc.c_in != ds.config.c_in {
        return Err(Error::Incompatible(format!(
            "run {} has k={} c_in={}, dataset has k={} c_in={}",
            dir.display(),
            mc.k,
            mc.c_in,
            ds.config.k,
            ds.config.c_in
        )));
    }
    Ok((params, manifest.norm))
}

/// Scores `run_dir` on its dataset's test split. The run's stored config is
/// used unless `config` names another file.
pub fn cmd_evaluate(
    run_dir: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    sections: Sections,
    against: Option<&Path>,
) -> Result<EvalReport> {
    if !run_dir.join(trainer::RUN_MANIFEST).exists() {
        return Err(Error::Missing(run_dir.join(trainer::RUN_MANIFEST)));
    }
    let cfg = match (config, run_config(run_dir)?) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(c)) => c,
        (None, None) => ExperimentConfig::default(),
    };
    let (ds, hash) = open_dataset(&cfg, out)?;
    let manifest = RunManifest::load(run_dir)?;
    if manifest.dataset_hash.as_deref().is_some_and(|h| h != hash) {
        eprintln!("warning: {} was trained on a different dataset", run_dir.display());
    }
    let (params, norm) = load_run(run_dir, &ds)?;
    let other = against.map(|d| load_run(d, &ds)).transpose()?;
    let report = eval::evaluate(
        &params,
        ds.split(Split::Test),
        &norm,
        &cfg.eval,
        other.as_ref().map(|(p, n)| (p, n)),
    )?;
    eval::write_report(&report, run_dir, sections)?;
    Ok(report)
}

struct Task {
    variant: String,
    seed: u64,
    cfg: Option<ExperimentConfig>,
    error: Option<String>,
    world: usize,
}

/// Runs every `(variant, seed)` pair with up to `jobs` concurrent trainings and
/// writes one row per pair. Returns the table path and the number of failed rows.
pub fn cmd_ablate(
    base: &ExperimentConfig,
    grid: &AblationGrid,
    out: Option<&Path>,
    jobs: usize,
    seed: Option<u64>,
) -> Result<(PathBuf, usize)> {
    grid.validate()?;
    let root = base.root(out).join(&grid.name);
    let mut tasks = Vec::new();
    let mut worlds: Vec<(String, Dataset, String)> = Vec::new();
    for v in &grid.variants {
        match base.patched(&v.patch) {
            Ok(mut cfg) => {
                cfg.name = v.name.clone();
                if let Some(s) = seed {
                    cfg.seeds = vec![s];
                }
                let key = toml::to_string(&cfg.world).map_err(|e| Error::Invalid(e.to_string()))?;
                let world = match worlds.iter().position(|(k, _, _)| *k == key) {
                    Some(i) => i,
                    None => {
                        let ds = world::generate_world(&cfg.world)?;
                        let dir = root.join("datasets").join(format!("world_{}", worlds.len()));
                        world::save_dataset(&ds, &dir)?;
                        let hash = world::dataset_hash(&dir)?;
                        worlds.push((key, ds, hash));
                        worlds.len() - 1
                    }
                };
                for &s in &cfg.seeds {
                    tasks.push(Task {
                        variant: v.name.clone(),
                        seed: s,
                        cfg: Some(cfg.with_seed(s)),
                        error: None,
                        world,
                    });
                }
            }
            Err(e) => tasks.push(Task {
                variant: v.name.clone(),
                seed: seed.unwrap_or(0),
                cfg: None,
                error: Some(e.to_string()),
                world: 0,
            }),
        }
    }

    let results: Vec<Mutex<Option<Result<EvalReport>>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(tasks.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(t) = tasks.get(i) else { break };
                let Some(cfg) = &t.cfg else { continue };
                let (_, ds, hash) = &worlds[t.world];
                let dir = root.join(&t.variant).join(format!("seed_{}", t.seed));
                let r = sized_for(cfg, ds).and_then(|c| train_and_score(&c, ds, hash, &dir, false));
                match &r {
                    Ok(rep) => eprintln!(
                        "{} seed {}: target rmse {:.4}",
                        t.variant, t.seed, rep.rmse_bias[cfg.eval.target_variable].0
                    ),
                    Err(e) => eprintln!("{} seed {}: failed: {e}", t.variant, t.seed),
                }
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });

    let k = base.world.k.max(tasks.iter().filter_map(|t| t.cfg.as_ref()).map(|c| c.world.k).max().unwrap_or(0));
    let mut s = String::from("configuration,seed,config_hash,status,target_rmse,target_bias");
    for name in &VARIABLE_NAMES[..k] {
        write!(s, ",rmse_{name}").expect("string write");
    }
    s.push_str(",error\n");
    let mut failed = 0;
    for (t, slot) in tasks.iter().zip(results) {
        let hash = t.cfg.as_ref().map(config_hash).unwrap_or_default();
        let result = slot.into_inner().expect("result slot");
        write!(s, "{},{},{hash}", t.variant, t.seed).expect("string write");
        match (result, &t.error) {
            (Some(Ok(rep)), _) => {
                let target = t.cfg.as_ref().map_or(world::AGB, |c| c.eval.target_variable);
                let (r, b) = rep.rmse_bias[target];
                write!(s, ",ok,{r:.10e},{b:.10e}").expect("string write");
                for v in 0..k {
                    match rep.rmse_bias.get(v) {
                        Some((r, _)) => write!(s, ",{r:.10e}").expect("string write"),
                        None => s.push(','),
                    }
                }
                s.push_str(",\n");
            }
            (res, err) => {
                failed += 1;
                let msg = match (res, err) {
                    (Some(Err(e)), _) => e.to_string(),
                    (_, Some(e)) => e.clone(),
                    _ => "not run".into(),
                };
                s.push_str(",failed,,");
                s.push_str(&",".repeat(k));
                writeln!(s, ",\"{}\"", msg.replace('"', "'")).expect("string write");
            }
        }
    }
    fs::create_dir_all(&root)?;
    let path = root.join(ABLATION_CSV);
    fs::write(&path, s)?;
    Ok((path, failed))
}
