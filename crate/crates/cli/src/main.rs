mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use balistd_core::checkpoint;
use balistd_core::corruption::{apply_with, CorruptionAction, CorruptionGroup, CorruptionKind, Severity};
use balistd_core::dataset::{load_manifest, synth_to_disk, Split};
use balistd_core::evaluate::evaluate_robustness;
use balistd_core::imaging::GrayImage;
use balistd_core::par;
use balistd_core::report::{self, RunSummary};
use balistd_core::trainer::{train_observed, LogRow, Mode};
use clap::{Parser, Subcommand, ValueEnum};

use config::{resolve_seed, RunConfigFile};

/// Usage or configuration problem; exits with status 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "balistd", version, about = "Bi-level adversarial training for infrared small-target detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMode {
    Joint,
    Adversarial,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    /// Uniformly random corruptions over the full grid.
    Random,
    Noise,
    Blur,
    Isp,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a detector (and strategy in adversarial mode).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; overrides `data.dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; overrides `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<CliMode>,
        #[arg(long, value_enum)]
        ablation: Option<Ablation>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only the clean IOU / Pd / Fa row.
        #[arg(long)]
        clean_only: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Row label in the Markdown tables.
        #[arg(long, default_value = "model")]
        name: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Corrupt one image: `corrupt IN KIND [SEVERITY] OUT`.
    Corrupt {
        input: PathBuf,
        kind: String,
        /// `[SEVERITY] OUT`
        #[arg(num_args = 1..=2, required = true)]
        rest: Vec<String>,
        #[arg(long)]
        severity: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare robustness CSVs from several runs as one Markdown table.
    Report {
        /// `NAME=PATH` pairs, one per run.
        #[arg(long = "input", required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() || cause.is::<toml::de::Error>() {
            return 1;
        }
        if let Some(balistd_core::Error::Config(_)) = cause.downcast_ref::<balistd_core::Error>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let msg = msg.trim_start_matches("error: ").trim_end();
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { config, out, seed } => cmd_synth(config.as_deref(), &out, seed),
        Command::Train {
            config,
            data,
            out,
            mode,
            ablation,
            steps,
            seed,
            workers,
        } => {
            let mut cfg = RunConfigFile::load(config.as_deref())?;
            if let Some(m) = mode {
                cfg.train.mode = match m {
                    CliMode::Joint => Mode::Joint,
                    CliMode::Adversarial => Mode::Adversarial,
                };
            }
            match ablation {
                Some(Ablation::Random) => {
                    cfg.train.mode = Mode::Joint;
                    cfg.train.action_group = None;
                }
                Some(Ablation::Noise) => cfg.train.action_group = Some(CorruptionGroup::Noise),
                Some(Ablation::Blur) => cfg.train.action_group = Some(CorruptionGroup::Blur),
                Some(Ablation::Isp) => cfg.train.action_group = Some(CorruptionGroup::Isp),
                None => {}
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.train.seed = resolve_seed(seed, cfg.train.seed).map_err(|e| usage(format!("{e:#}")))?;
            if let Some(d) = data {
                cfg.data.dir = Some(d);
            }
            if let Some(o) = out {
                cfg.out_dir = Some(o);
            }
            with_workers(workers, || cmd_train(&cfg))
        }
        Command::Eval {
            checkpoint,
            config,
            data,
            out,
            clean_only,
            seed,
            name,
            workers,
        } => {
            let mut cfg = RunConfigFile::load(config.as_deref())?;
            cfg.eval.seed = resolve_seed(seed, cfg.eval.seed).map_err(|e| usage(format!("{e:#}")))?;
            if let Some(d) = data {
                cfg.data.dir = Some(d);
            }
            if let Some(o) = out {
                cfg.out_dir = Some(o);
            }
            let check_arch = config.is_some();
            with_workers(workers, || cmd_eval(&checkpoint, cfg, check_arch, clean_only, &name))
        }
        Command::Corrupt {
            input,
            kind,
            rest,
            severity,
            seed,
        } => {
            let (sev, out) = match (rest.as_slice(), severity) {
                ([s, o], None) => (s.clone(), o.clone()),
                ([o], Some(s)) => (s, o.clone()),
                ([_, _], Some(_)) => return Err(usage("severity given both positionally and with --severity")),
                ([_], None) => return Err(usage("missing severity")),
                _ => return Err(usage("expected `corrupt IN KIND [SEVERITY] OUT`")),
            };
            cmd_corrupt(&input, &kind, &sev, seed, Path::new(&out))
        }
        Command::Report { inputs, out } => cmd_report(&inputs, out.as_deref()),
    }
}

fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    if workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    par::with_workers(workers, f)
}

fn cmd_synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfigFile::load(config)?;
    cfg.synth.seed = resolve_seed(seed, cfg.synth.seed).map_err(|e| usage(format!("{e:#}")))?;
    if cfg.synth.count == 0 {
        return Err(usage("synth.count must be positive"));
    }
    cfg.synth.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let hash = synth_to_disk(&cfg.synth, out)?;
    cfg.data.dir = Some(out.to_path_buf());
    cfg.write_resolved(out)?;
    println!("{hash}");
    Ok(())
}

fn data_dir(cfg: &RunConfigFile) -> Result<&Path> {
    cfg.data
        .dir
        .as_deref()
        .ok_or_else(|| usage("no dataset: pass --data or set data.dir"))
}

fn out_dir(cfg: &RunConfigFile) -> Result<&Path> {
    let dir = cfg
        .out_dir
        .as_deref()
        .ok_or_else(|| usage("no output directory: pass --out or set out_dir"))?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn cmd_train(cfg: &RunConfigFile) -> Result<()> {
    cfg.validate()?;
    let manifest = load_manifest(data_dir(cfg)?)?;
    let train = manifest.load(Split::Train)?;
    let val = manifest.load(Split::Test)?;
    let out = out_dir(cfg)?;
    cfg.write_resolved(out)?;

    let log_path = out.join("train_log.csv");
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    writeln!(log, "{}", LogRow::HEADER)?;
    let mut write_err = None;
    let result = train_observed(&cfg.train, &cfg.corruption, &train, &val, |row| {
        if write_err.is_none() {
            if let Err(e) = writeln!(log, "{}", row.csv()) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(anyhow!(e).context(format!("writing {}", log_path.display())));
    }
    log.flush()?;
    let ck = out.join("checkpoint.bin");
    checkpoint::save(&ck, &result.state, &cfg.train, &cfg.corruption)?;
    println!("{}", ck.display());
    Ok(())
}

fn cmd_eval(ck_path: &Path, mut cfg: RunConfigFile, check_arch: bool, clean_only: bool, name: &str) -> Result<()> {
    let ck = checkpoint::load(ck_path)?;
    if check_arch && cfg.train.detector.fingerprint() != ck.header.detector_arch {
        bail!(
            "checkpoint architecture `{}` does not match configured `{}`",
            ck.header.detector_arch,
            cfg.train.detector.fingerprint()
        );
    }
    // The checkpoint's own run settings describe the model being evaluated.
    cfg.train = ck.header.config.clone();
    cfg.corruption = ck.header.corruption_table.clone();
    cfg.validate()?;
    let manifest = load_manifest(data_dir(&cfg)?)?;
    let test = manifest.load(Split::Test)?;
    if test.is_empty() {
        bail!("dataset {} has no test entries", manifest.root.display());
    }
    let grid: Vec<CorruptionAction> = if clean_only {
        Vec::new()
    } else {
        CorruptionAction::all().collect()
    };
    let rep = evaluate_robustness(&ck.state.detector, &test, &cfg.corruption, &grid, &cfg.metrics, cfg.eval.seed)?;
    let out = out_dir(&cfg)?.to_path_buf();
    cfg.write_resolved(&out)?;
    let dataset = manifest
        .root
        .file_name()
        .map_or("dataset".into(), |n| n.to_string_lossy().into_owned());
    let write = |file: &str, text: String| -> Result<()> {
        let p = out.join(file);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    write("robustness.csv", report::records_csv(&rep, &dataset, cfg.eval.seed)?)?;
    let clean_md = report::clean_markdown(name, rep.clean());
    write("clean.md", clean_md.clone())?;
    if clean_only {
        print!("{clean_md}");
    } else {
        write("robustness_summary.csv", report::aggregates_csv(&rep, &dataset, cfg.eval.seed)?)?;
        let rows = report::parse_csv(&report::records_csv(&rep, &dataset, cfg.eval.seed)?)?;
        let md = report::robustness_markdown(&[RunSummary::from_rows(name, &rows)?]);
        write("robustness.md", md.clone())?;
        print!("{md}");
    }
    Ok(())
}

fn cmd_corrupt(input: &Path, kind: &str, severity: &str, seed: u64, out: &Path) -> Result<()> {
    let kind: CorruptionKind = kind.parse().map_err(|e: balistd_core::Error| usage(e.to_string()))?;
    let level: u8 = severity
        .parse()
        .map_err(|_| usage(format!("severity `{severity}` must be 1, 2 or 3")))?;
    let severity = Severity::new(level).map_err(|e| usage(e.to_string()))?;
    let image = GrayImage::load_png(input)?;
    let corrupted = apply_with(
        &RunConfigFile::default().corruption,
        &image,
        CorruptionAction::new(kind, severity),
        seed,
    )?;
    corrupted.save_png(out)?;
    Ok(())
}

fn cmd_report(inputs: &[String], out: Option<&Path>) -> Result<()> {
    let mut runs = Vec::new();
    for spec in inputs {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("--input `{spec}` must look like NAME=PATH")))?;
        let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
        runs.push(RunSummary::from_rows(name, &report::parse_csv(&text)?)?);
    }
    let md = report::robustness_markdown(&runs);
    match out {
        Some(p) => fs::write(p, &md).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{md}"),
    }
    Ok(())
}
