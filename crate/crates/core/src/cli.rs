//! Command-line front end: `gen-synthetic`, `train`, `eval`, `gradcheck`,
//! `export-heatmap` and `inspect`.
//!
//! Settings resolve as flags > `--config` JSON > defaults. Failures print one
//! `error kind=<tag> message=<json string>` line on stderr. Exit codes: 0 ok,
//! 1 runtime failure, 2 usage, 3 malformed config.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{evaluate, export_heatmap, EvalReport, Protocol};
use crate::feature_store::{gen_synthetic, hfv1, load_dataset, write_dataset, Cue, Manifest, Split, SyntheticSpec};
use crate::gradsuite;
use crate::moe_core::checkpoint;
use crate::moe_core::{Model, ModelConfig};
use crate::trainer::{fit, train_accuracy, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

pub const REPORT_FILE: &str = "report.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "ckpt.hpk1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Synthetic dataset settings. Frame, token and channel counts come from
/// the model section so generated data always fits the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_subjects: usize,
    pub tracklets_per_subject: usize,
    pub cue: Cue,
    pub noise_sigma: f64,
    pub same_clothes: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            num_subjects: s.num_subjects,
            tracklets_per_subject: s.tracklets_per_subject,
            cue: s.cue,
            noise_sigma: s.noise_sigma,
            same_clothes: s.same_clothes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub protocol: Protocol,
    /// Replaces `model.q`, and at evaluation the q stored in the checkpoint.
    pub dual_band_q: Option<f64>,
    /// Replaces `model.seed` and seeds synthetic generation.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            manifest: None,
            checkpoint: None,
            out: PathBuf::from("out"),
            protocol: Protocol::General,
            dual_band_q: None,
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Apply the `seed` and `dual_band_q` overrides and validate.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.model.seed = seed;
        }
        if let Some(q) = self.dual_band_q {
            self.model.q = q;
        }
        self.model.validate()?;
        Ok(self)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_subjects: self.data.num_subjects,
            tracklets_per_subject: self.data.tracklets_per_subject,
            frames: self.model.frames,
            tokens: self.model.tokens,
            channels: self.model.channels(),
            cue: self.data.cue,
            noise_sigma: self.data.noise_sigma,
            seed: self.model.seed,
            same_clothes: self.data.same_clothes,
        }
    }

    fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.out.join(MANIFEST_FILE))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join(CHECKPOINT_FILE))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "biomoe",
    version,
    about = "Mixture of biometric experts for video re-identification"
)]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Default, Args)]
struct Flags {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["general", "sc", "dc"])]
    protocol: Option<String>,
    /// Central band width in percent for dual-input rescoring.
    #[arg(long = "dual-band-q", global = true)]
    dual_band_q: Option<f64>,
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with planted identity cues.
    GenSynthetic {
        #[arg(long, value_parser = ["long_term", "short_term", "temporal", "mixed"])]
        cue: Option<String>,
    },
    /// Train on the manifest's training split.
    Train,
    /// Evaluate a checkpoint on the query and gallery splits.
    Eval,
    /// Finite-difference check of every op and the training objective.
    Gradcheck {
        /// Random points per op.
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
    /// Write a first-layer gate heatmap for one tracklet.
    ExportHeatmap {
        /// Manifest row of the tracklet.
        #[arg(long, default_value_t = 0)]
        tracklet: usize,
        #[arg(long, default_value_t = 0)]
        expert: usize,
        #[arg(long, default_value_t = 0)]
        target: usize,
    },
    /// Describe an HFV1 volume, an HPK1 checkpoint or a manifest.
    Inspect { path: PathBuf },
}

fn run_config(flags: &Flags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if flags.seed.is_some() {
        cfg.seed = flags.seed;
    }
    if let Some(p) = &flags.protocol {
        cfg.protocol = p.parse()?;
    }
    if flags.dual_band_q.is_some() {
        cfg.dual_band_q = flags.dual_band_q;
    }
    if let Some(steps) = flags.steps {
        cfg.train.steps = steps;
    }
    if let Some(out) = &flags.out {
        cfg.out = out.clone();
    }
    if flags.manifest.is_some() {
        cfg.manifest = flags.manifest.clone();
    }
    if flags.checkpoint.is_some() {
        cfg.checkpoint = flags.checkpoint.clone();
    }
    cfg.resolve()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct TrainReport {
    steps: u64,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    train_top1: f64,
    eval: Option<EvalReport>,
}

fn has_split(manifest: &Manifest, split: Split) -> bool {
    manifest.split(split).next().is_some()
}

fn cmd_gen(cfg: &RunConfig, cue: Option<&str>) -> Result<()> {
    let mut spec = cfg.synthetic_spec();
    if let Some(c) = cue {
        spec.cue = c.parse()?;
    }
    let (manifest, volumes) = gen_synthetic(&spec)?;
    write_dataset(&cfg.out, &manifest, &volumes)?;
    println!(
        "ok command=gen-synthetic tracklets={} manifest={}",
        volumes.len(),
        cfg.out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (manifest, volumes) = load_dataset(&cfg.manifest_path())?;
    create_dir(&cfg.out)?;
    let state = fit(
        cfg.model.clone(),
        cfg.train.clone(),
        &manifest,
        &volumes,
        Some(&cfg.out),
    )?;
    let eval = if has_split(&manifest, Split::Query) && has_split(&manifest, Split::Gallery) {
        Some(evaluate(&state.model, &manifest, &volumes, cfg.protocol, cfg.model.q)?)
    } else {
        None
    };
    let report = TrainReport {
        steps: state.step,
        initial_loss: state.history.first().map(|r| r.loss),
        final_loss: state.history.last().map(|r| r.loss),
        train_top1: train_accuracy(&state.model, &manifest, &volumes)?,
        eval,
    };
    write_json(&cfg.out.join(REPORT_FILE), &report)?;
    println!(
        "ok command=train steps={} final_loss={} train_top1={} out={}",
        report.steps,
        report.final_loss.unwrap_or(f64::NAN),
        report.train_top1,
        cfg.out.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let model = Model::load(&cfg.checkpoint_path())?;
    let (manifest, volumes) = load_dataset(&cfg.manifest_path())?;
    let q = cfg.dual_band_q.unwrap_or(model.config.q);
    let report = evaluate(&model, &manifest, &volumes, cfg.protocol, q)?;
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join(REPORT_FILE), &report)?;
    println!(
        "ok command=eval protocol={} q={q} top1={} mAP={} single_top1={} band={}",
        report.protocol,
        report.top1(),
        report.map,
        report.single_input.top1(),
        report.band.selected
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, points: usize) -> Result<bool> {
    let config = gradsuite::tiny_config(cfg.model.seed);
    let entries = gradsuite::run_suite(&config, points, cfg.model.seed)?;
    let mut worst: f64 = 0.0;
    let mut all = true;
    for e in &entries {
        println!(
            "check name={} max_rel_error={:.3e} coordinates={} passed={}",
            e.name, e.report.max_rel_error, e.report.coordinates, e.report.passed
        );
        worst = worst.max(e.report.max_rel_error);
        all &= e.report.passed;
    }
    println!("ok command=gradcheck max_rel_error={worst:.3e} passed={all}");
    Ok(all)
}

fn cmd_heatmap(cfg: &RunConfig, tracklet: usize, expert: usize, target: usize) -> Result<()> {
    let model = Model::load(&cfg.checkpoint_path())?;
    let (manifest, volumes) = load_dataset(&cfg.manifest_path())?;
    let volume = volumes
        .get(tracklet)
        .ok_or_else(|| Error::EmptyInput(format!("manifest has {} rows, no row {tracklet}", volumes.len())))?;
    create_dir(&cfg.out)?;
    let stem = cfg.out.join(format!(
        "heatmap_t{}_e{expert}_j{target}",
        manifest.records[tracklet].tracklet_id
    ));
    let grid = export_heatmap(&model, &volume.data, expert, target, &stem)?;
    println!(
        "ok command=export-heatmap grid={}x{} csv={} pgm={}",
        grid.shape()[0],
        grid.shape()[1],
        stem.with_extension("csv").display(),
        stem.with_extension("pgm").display()
    );
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let mut out = String::new();
    let mut magic = [0u8; 4];
    let n = fs::File::open(path)
        .and_then(|mut f| f.read(&mut magic))
        .map_err(|e| Error::io(path, e))?;
    if n == 4 && &magic == b"HFV1" {
        let h = hfv1::read_header(path)?;
        let t = hfv1::read_tensor(path)?;
        let (lo, hi) = t
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let _ = writeln!(
            out,
            "hfv1 frames={} tokens={} channels={} dtype={} min={lo} max={hi}",
            h.frames, h.tokens, h.channels, h.dtype
        );
    } else if n == 4 && &magic == checkpoint::MAGIC {
        let ck = checkpoint::read(path)?;
        let scalars: usize = ck.tensors.iter().map(|(_, t)| t.numel()).sum();
        let _ = writeln!(out, "hpk1 tensors={} scalars={scalars}", ck.tensors.len());
        if let Some(cfg) = ck.metadata.get("config") {
            let _ = writeln!(out, "config {cfg}");
        }
        for (name, t) in &ck.tensors {
            let _ = writeln!(out, "tensor {name} {:?}", t.shape());
        }
    } else {
        let manifest = Manifest::read(path)?;
        let count = |s| manifest.split(s).count();
        let subjects: std::collections::BTreeSet<u32> = manifest.records.iter().map(|r| r.subject_id).collect();
        let _ = writeln!(
            out,
            "manifest records={} subjects={} train={} query={} gallery={}",
            manifest.records.len(),
            subjects.len(),
            count(Split::Train),
            count(Split::Query),
            count(Split::Gallery)
        );
    }
    // a closed pipe (e.g. `| head`) is not an error
    let _ = std::io::stdout().write_all(out.as_bytes());
    Ok(())
}

fn error_line(kind: &str, message: &str) -> String {
    let msg = serde_json::to_string(message).unwrap_or_else(|_| "\"\"".into());
    format!("error kind={kind} message={msg}")
}

/// Parse `argv` (program name first), run the subcommand and return the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprint!("{}", e.render());
            eprintln!("{}", error_line("usage", &e.kind().to_string()));
            return EXIT_USAGE;
        }
    };
    let cfg = match run_config(&cli.flags) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{}", error_line("config", &e.to_string()));
            return EXIT_CONFIG;
        }
    };
    let result = match &cli.command {
        Command::GenSynthetic { cue } => cmd_gen(&cfg, cue.as_deref()),
        Command::Train => cmd_train(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Gradcheck { points } => match cmd_gradcheck(&cfg, *points) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("{}", error_line("gradcheck", "gradient check exceeded tolerance"));
                return EXIT_FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::ExportHeatmap {
            tracklet,
            expert,
            target,
        } => cmd_heatmap(&cfg, *tracklet, *expert, *target),
        Command::Inspect { path } => cmd_inspect(path),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            if matches!(e, Error::Config(_)) {
                EXIT_CONFIG
            } else {
                EXIT_FAILURE
            }
        }
    }
}
