//! Command-line pipeline: one subcommand per stage, one JSON config for all
//! of them.
//!
//! Progress lines and the final completion record go to stdout as JSON, one
//! object per line. Human-readable summaries go to stderr. Exit codes: 0 ok,
//! 2 config or usage error, 3 data or format error, 4 numerical failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    self, activations_for, rank_features, summarize, ExportMeta, InstanceSetSpec, LabelFile, RankKey,
};
use crate::capture::{capture_checkpoint, ActivationDataset, CaptureSpec};
use crate::error::{Error, Result};
use crate::numerics::container::file_sha256;
use crate::numerics::SeedTree;
use crate::sae::{grid_search, train_sae, ActivationMatrix, GridSpec, SaeConfig, SaeModel, SaeReport};
use crate::training::{evaluate, load_policy, train, TrainConfig, TrainPaths};
use crate::tsp::{generate_batch, Distribution};

pub const WORKDIR_ENV: &str = "TSP_INTERP_WORKDIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

/// Artifact locations. Relative paths are resolved against the workdir.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub instances: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub capture: PathBuf,
    pub sae: PathBuf,
    pub sae_log: PathBuf,
    pub grid: PathBuf,
    pub analysis: PathBuf,
    pub labels: Option<PathBuf>,
    pub explorer: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            instances: "instances".into(),
            checkpoint: "checkpoints/policy.ckpt".into(),
            train_log: "logs/train.jsonl".into(),
            capture: "datasets/activations.tact".into(),
            sae: "checkpoints/sae.model".into(),
            sae_log: "logs/sae.jsonl".into(),
            grid: "grid".into(),
            analysis: "exports/analysis.json".into(),
            labels: None,
            explorer: "exports/explorer".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub distribution: Distribution,
    pub n: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { distribution: Distribution::Uniform, n: 20, count: 100, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub distribution: Distribution,
    pub n: usize,
    pub instances: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { distribution: Distribution::Uniform, n: 20, instances: 500, seed: 0x5eed_e7a1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    pub instances: InstanceSetSpec,
    /// Explicit feature list; wins over `top`.
    pub features: Option<Vec<usize>>,
    /// Export only the `top` features by mean activation.
    pub top: Option<usize>,
}

/// Every stage's settings in one file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub workdir: PathBuf,
    /// When set, every stage seed is derived from this one.
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub generate: GenerateConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub capture: CaptureSpec,
    pub sae: SaeConfig,
    pub grid: GridSpec,
    pub analysis: InstanceSetSpec,
    pub export: ExportConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            workdir: ".".into(),
            seed: None,
            paths: PathsConfig::default(),
            generate: GenerateConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            capture: CaptureSpec::default(),
            sae: SaeConfig::default(),
            grid: GridSpec::default(),
            analysis: InstanceSetSpec { num_instances: 100, ..InstanceSetSpec::default() },
            export: ExportConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses a config file; missing fields take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Overwrites every stage seed with one derived from `seed`.
    pub fn apply_seed(&mut self, seed: u64) {
        let root = SeedTree::new(seed);
        self.seed = Some(seed);
        self.generate.seed = seed;
        self.train.seed = seed;
        self.train.eval_seed = root.named("eval").seed();
        self.eval.seed = self.train.eval_seed;
        self.capture.seed = root.named("capture").seed();
        self.sae.seed = seed;
        self.analysis.seed = root.named("analysis").seed();
        self.export.instances.seed = root.named("export").seed();
    }

    /// Applies `key.path=value` overrides. Values are parsed as JSON and
    /// fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serialises");
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key.path=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            *slot = value;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("override: {e}")))
    }

    /// Field ranges plus the shared residual width.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sae.validate()?;
        if self.train.policy.d_model != self.sae.d {
            return Err(Error::Config(format!(
                "policy d_model = {} but sae.d = {}",
                self.train.policy.d_model, self.sae.d
            )));
        }
        for (what, n) in [("generate", self.generate.n), ("eval", self.eval.n), ("capture", self.capture.n)] {
            if n < 3 {
                return Err(Error::Config(format!("{what}.n must be at least 3, got {n}")));
            }
        }
        if self.analysis.num_instances == 0 || self.export.instances.num_instances == 0 {
            return Err(Error::Config("analysis and export need at least one instance".into()));
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }
}

#[derive(Debug, Parser)]
#[command(name = "tsp-interp", version, about = "TSP attention policy, activation capture and sparse autoencoder features")]
pub struct Cli {
    /// Pipeline config file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Working directory for relative artifact paths.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Config override, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write random instances as JSON files.
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the policy with REINFORCE.
    TrainPolicy {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare greedy policy tours with nearest neighbour, 2-opt and, for small n, Held–Karp.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Record final encoder residual vectors.
    Capture {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one sparse autoencoder.
    TrainSae {
        #[arg(long)]
        capture: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one sparse autoencoder per grid point.
    GridSearch {
        #[arg(long)]
        capture: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Feature summaries, rankings and taxonomy counts.
    Analyze {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overlay files plus the manifest read by the explorer.
    ExportExplorer {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub sae: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::TrainPolicy { .. } => "train-policy",
            Command::Eval { .. } => "eval",
            Command::Capture { .. } => "capture",
            Command::TrainSae { .. } => "train-sae",
            Command::GridSearch { .. } => "grid-search",
            Command::Analyze { .. } => "analyze",
            Command::ExportExplorer { .. } => "export-explorer",
        }
    }
}

/// Builds the effective config: defaults, then the file, then `--seed`,
/// then `--set` overrides, then the workdir from env or flag.
pub fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            PipelineConfig::from_json(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed.or(cfg.seed) {
        cfg.apply_seed(s);
    }
    let mut cfg = cfg.with_overrides(&cli.overrides)?;
    if let Some(w) = std::env::var_os(WORKDIR_ENV) {
        cfg.workdir = w.into();
    }
    if let Some(w) = &cli.workdir {
        cfg.workdir = w.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Out<'a> {
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
}

impl Out<'_> {
    fn record(&mut self, v: &Value) {
        let _ = writeln!(self.stdout, "{v}");
        let _ = self.stdout.flush();
    }

    fn say(&mut self, msg: &str) {
        let _ = writeln!(self.stderr, "{msg}");
    }
}

fn path_or(flag: &Option<PathBuf>, cfg: &PipelineConfig, default: &Path) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.resolve(default))
}

fn file_hash(path: &Path) -> Result<String> {
    file_sha256(path)
}

/// Parses `args` and runs one stage. Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                return EXIT_CONFIG;
            }
            let _ = write!(stdout, "{}", e.render());
            return EXIT_OK;
        }
    };
    let mut out = Out { stdout, stderr };
    if let Some(t) = cli.threads {
        if t == 0 {
            out.say("error: --threads must be positive");
            return EXIT_CONFIG;
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let stage = cli.command.name();
    let started = Instant::now();
    let result = load_config(&cli).and_then(|cfg| run_stage(&cli.command, &cfg, &mut out));
    match result {
        Ok(mut record) => {
            record["stage"] = json!(stage);
            record["status"] = json!("ok");
            record["wall_ms"] = json!(started.elapsed().as_millis() as u64);
            out.record(&record);
            EXIT_OK
        }
        Err(e) => {
            let code = exit_code(&e);
            out.record(&json!({"stage": stage, "status": "error", "exit_code": code, "message": e.to_string()}));
            out.say(&format!("error: {e}"));
            code
        }
    }
}

fn run_stage(cmd: &Command, cfg: &PipelineConfig, out: &mut Out<'_>) -> Result<Value> {
    match cmd {
        Command::Generate { out: dir } => {
            let dir = path_or(dir, cfg, &cfg.paths.instances);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let g = &cfg.generate;
            let instances = generate_batch(g.distribution, g.n, g.seed, g.count)?;
            for (i, inst) in instances.iter().enumerate() {
                inst.save(&dir.join(format!("instance_{i:05}.json")))?;
            }
            out.say(&format!("wrote {} {} instances with n = {} to {}", g.count, g.distribution, g.n, dir.display()));
            Ok(json!({"count": g.count, "n": g.n, "distribution": g.distribution, "seed": g.seed, "dir": dir}))
        }
        Command::TrainPolicy { checkpoint, resume } => {
            let paths = TrainPaths {
                checkpoint: path_or(checkpoint, cfg, &cfg.paths.checkpoint),
                log: cfg.resolve(&cfg.paths.train_log),
            };
            if let Some(dir) = paths.checkpoint.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let report = train(&cfg.train, &paths, resume.as_deref(), &mut |rec| {
                let mut v = serde_json::to_value(rec).expect("log record serialises");
                v["event"] = json!("train");
                out.record(&v);
            })?;
            out.say(&format!(
                "trained {} steps: eval mean length {:.4} -> {:.4}",
                report.steps, report.initial_eval_mean_length, report.final_eval_mean_length
            ));
            let mut v = serde_json::to_value(&report).expect("report serialises");
            v["checkpoint_sha256"] = json!(file_hash(&paths.checkpoint)?);
            Ok(v)
        }
        Command::Eval { checkpoint } => {
            let ckpt = path_or(checkpoint, cfg, &cfg.paths.checkpoint);
            let policy = load_policy(&ckpt)?;
            let e = &cfg.eval;
            let instances = generate_batch(e.distribution, e.n, e.seed, e.instances)?;
            let report = evaluate(&policy, &instances)?;
            let mut msg = format!(
                "policy {:.4}, nearest neighbour {:.4}, 2-opt {:.4}",
                report.policy_mean, report.nearest_neighbor_mean, report.two_opt_mean
            );
            if let (Some(opt), Some(gap)) = (report.optimal_mean, report.mean_gap_vs_optimal) {
                msg.push_str(&format!(", optimal {opt:.4} (gap {:.2}%)", 100.0 * gap));
            }
            out.say(&msg);
            let mut v = serde_json::to_value(&report).expect("report serialises");
            v["checkpoint"] = json!(ckpt);
            Ok(v)
        }
        Command::Capture { checkpoint, out: dest } => {
            let ckpt = path_or(checkpoint, cfg, &cfg.paths.checkpoint);
            let dest = path_or(dest, cfg, &cfg.paths.capture);
            let policy = load_policy(&ckpt)?;
            if policy.config().d_model != cfg.sae.d {
                return Err(Error::Config(format!(
                    "checkpoint has d_model = {} but sae.d = {}",
                    policy.config().d_model,
                    cfg.sae.d
                )));
            }
            if let Some(dir) = dest.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let header = capture_checkpoint(&ckpt, &cfg.capture, &dest)?;
            out.say(&format!("captured {} records of width {} to {}", header.record_count(), header.d_model, dest.display()));
            Ok(json!({"path": dest, "header": header, "record_count": header.record_count(), "sha256": file_hash(&dest)?}))
        }
        Command::TrainSae { capture, out: dest } => {
            let data = open_capture(capture, cfg)?;
            let dest = path_or(dest, cfg, &cfg.paths.sae);
            let log_path = cfg.resolve(&cfg.paths.sae_log);
            let mut lines = Vec::new();
            let trained = train_sae(&cfg.sae, &data, &mut |m| {
                let mut v = serde_json::to_value(m).expect("metrics serialise");
                lines.push(v.to_string());
                v["event"] = json!("train-sae");
                out.record(&v);
            })?;
            trained.model.save(&dest)?;
            write_lines(&log_path, &lines)?;
            let m = trained.final_metrics().clone();
            out.say(&format!(
                "SAE latent {} k {}: held-out nmse {:.4}, mean l0 {:.2}, dead {}",
                cfg.sae.latent(),
                cfg.sae.k(),
                m.nmse,
                m.mean_l0,
                m.dead_features
            ));
            let report = SaeReport { config: cfg.sae.clone(), k: cfg.sae.k(), latent: cfg.sae.latent(), metrics: m };
            let mut v = serde_json::to_value(&report).expect("report serialises");
            v["model"] = json!(dest);
            v["sha256"] = json!(file_hash(&dest)?);
            Ok(v)
        }
        Command::GridSearch { capture, out: dest } => {
            let data = open_capture(capture, cfg)?;
            let dir = path_or(dest, cfg, &cfg.paths.grid);
            let rows = grid_search(&cfg.sae, &cfg.grid, &data, Some(&dir), &mut |row| {
                let mut v = serde_json::to_value(row).expect("row serialises");
                v["event"] = json!("grid-row");
                out.record(&v);
            })?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            out.say(&format!("grid search: {} runs, {failed} failed, table in {}", rows.len(), dir.display()));
            Ok(json!({"runs": rows.len(), "failed": failed, "table": dir.join("grid.csv"), "json": dir.join("grid.json")}))
        }
        Command::Analyze { models, out: dest } => {
            let (policy, sae, labels, meta) = load_models(models, cfg, &cfg.analysis)?;
            let report = analysis::analyze(&sae, &policy, &cfg.analysis, &labels, &meta)?;
            let dest = path_or(dest, cfg, &cfg.paths.analysis);
            analysis::save_report(&dest, &report)?;
            let top: Vec<usize> = report.rankings["mean"].iter().take(10).copied().collect();
            let active = report.summaries.iter().filter(|s| s.max_activation > 0.0).count();
            out.say(&format!(
                "{} features, {active} active on {} instances; top by mean: {top:?}",
                report.summaries.len(),
                cfg.analysis.num_instances
            ));
            Ok(json!({"path": dest, "features": report.summaries.len(), "active": active, "top_by_mean": top,
                      "taxonomy": report.taxonomy.counts}))
        }
        Command::ExportExplorer { models, out: dest } => {
            let spec = &cfg.export.instances;
            let (policy, sae, labels, meta) = load_models(models, cfg, spec)?;
            let dir = path_or(dest, cfg, &cfg.paths.explorer);
            let chosen = match (&cfg.export.features, cfg.export.top) {
                (Some(f), _) => Some(f.clone()),
                (None, Some(top)) => {
                    let (_, acts) = activations_for(&sae, &policy, spec)?;
                    let summaries = summarize(&acts, &labels)?;
                    Some(rank_features(&summaries, RankKey::Mean).into_iter().take(top).collect())
                }
                (None, None) => None,
            };
            let (path, manifest) = analysis::export_explorer(&sae, &policy, chosen.as_deref(), &labels, spec, &meta, &dir)?;
            out.say(&format!("exported {} feature overlays to {}", manifest.features.len(), dir.display()));
            Ok(json!({"manifest": path, "overlays": manifest.features.len(), "dir": dir}))
        }
    }
}

fn open_capture(flag: &Option<PathBuf>, cfg: &PipelineConfig) -> Result<ActivationMatrix> {
    let path = path_or(flag, cfg, &cfg.paths.capture);
    let mut ds = ActivationDataset::open(&path)?;
    ds.expect_d_model(cfg.sae.d)?;
    ActivationMatrix::from_dataset(&mut ds)
}

fn load_models(
    models: &ModelArgs,
    cfg: &PipelineConfig,
    spec: &InstanceSetSpec,
) -> Result<(crate::policy::Policy, SaeModel, LabelFile, ExportMeta)> {
    let ckpt = path_or(&models.checkpoint, cfg, &cfg.paths.checkpoint);
    let sae_path = path_or(&models.sae, cfg, &cfg.paths.sae);
    let policy = load_policy(&ckpt)?;
    let sae = SaeModel::load(&sae_path)?;
    analysis::check_pair(&sae, &policy)?;
    let labels = match models.labels.clone().or_else(|| cfg.paths.labels.as_ref().map(|p| cfg.resolve(p))) {
        Some(p) => LabelFile::load(&p)?,
        None => LabelFile::default(),
    };
    let meta = ExportMeta {
        policy_checkpoint_sha256: file_hash(&ckpt)?,
        sae_checkpoint_sha256: file_hash(&sae_path)?,
        distribution: spec.distribution,
        seed: spec.seed,
        num_instances: spec.num_instances,
        n: spec.n,
        k: sae.k(),
        latent: sae.latent(),
    };
    Ok((policy, sae, labels, meta))
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = PipelineConfig::default()
            .with_overrides(&["train.steps=200".into(), "train.distribution=ring".into(), "train.advantage_clip=null".into()])
            .unwrap();
        assert_eq!(cfg.train.steps, 200);
        assert_eq!(cfg.train.distribution, Distribution::Ring);
        assert_eq!(cfg.train.advantage_clip, None);
        assert!(matches!(PipelineConfig::default().with_overrides(&["train.nope=1".into()]), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::default().with_overrides(&["train.steps".into()]), Err(Error::Config(_))));
        assert!(matches!(PipelineConfig::default().with_overrides(&["train.steps=-4".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), cfg);
        assert!(matches!(PipelineConfig::from_json(r#"{"trian": {}}"#), Err(Error::Config(_))));
        cfg.validate().unwrap();
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let cfg = PipelineConfig::default().with_overrides(&["sae.d=64".into()]).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_propagates_to_every_stage() {
        let mut a = PipelineConfig::default();
        a.apply_seed(7);
        let mut b = PipelineConfig::default();
        b.apply_seed(8);
        assert_eq!((a.train.seed, a.sae.seed, a.generate.seed), (7, 7, 7));
        assert_ne!(a.capture.seed, b.capture.seed);
        assert_ne!(a.analysis.seed, a.export.instances.seed);
        assert_eq!(a.eval.seed, a.train.eval_seed);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Format("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::Integrity { offset: 3, message: "x".into() }), EXIT_DATA);
        assert_eq!(exit_code(&Error::Numerical("x".into())), EXIT_NUMERICAL);
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["tsp-interp", "eval", "--bogus"], &mut o, &mut e), EXIT_CONFIG);
        assert!(String::from_utf8(e).unwrap().contains("Usage"));
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["tsp-interp", "--help"], &mut o, &mut e), EXIT_OK);
    }
}
