//! The `sleepnet` command line: corpus synthesis, statistics, preprocessing,
//! training, evaluation, prediction and the comparison grid.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sleepnet::audio::{decode_wav, resample};
use sleepnet::dataset::{
    load_manifest, load_split, render_stats_table, stats_table, training_windows, Split,
    WindowSet, WindowingConfig,
};
use sleepnet::eval::{evaluate_clips, predict_clips, EvalReport};
use sleepnet::model::{build_model, load_model, SleepNet};
use sleepnet::synth::{generate_corpus, SynthSpec, MANIFEST_FILE};
use sleepnet::train::{train_with_observer, TrainHistory};

use config::{load_layered, write_echo, RunConfig, ECHO_FILE, SYNTH_ECHO_FILE};

pub const MODEL_FILE: &str = "model.rvm";
pub const HISTORY_FILE: &str = "history.csv";
pub const WINDOWS_FILE: &str = "windows.rvw";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const GRID_FILE: &str = "grid.csv";

#[derive(Debug, Parser)]
#[command(name = "sleepnet", version, about = "Sleepiness regression from raw speech audio")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic tone corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print per-split clip duration statistics.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to the manifest's directory.
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
    /// Resample, window, balance and augment a split into a window file.
    Preprocess {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model and keep the checkpoint with the lowest dev loss.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a model on a manifest split.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print `clip_id rating` for each WAV file.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Train and evaluate the one-factor-at-a-time comparison grid.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Runs one command line (including the program name) and returns the exit
/// code: 0 on success, 2 on usage errors, 1 on failed runs.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with_output(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with_output<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 2;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

fn with_overrides(cfg: &ConfigArgs, extra: &[(&str, Option<&PathBuf>)]) -> Vec<String> {
    let mut set = cfg.set.clone();
    for (k, v) in extra {
        if let Some(v) = v {
            let abs = std::path::absolute(v).unwrap_or_else(|_| v.to_path_buf());
            set.push(format!("{k}={}", abs.display()));
        }
    }
    set
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth { out: dir, cfg } => {
            let spec: SynthSpec = load_layered(cfg.config.as_deref(), &cfg.set)?;
            let manifest = generate_corpus(&spec, &dir)?;
            write_echo(&spec, &dir, SYNTH_ECHO_FILE)?;
            writeln!(
                out,
                "wrote {} clips and {}",
                manifest.len(),
                dir.join(MANIFEST_FILE).display()
            )?;
        }
        Command::Stats {
            manifest,
            data_root,
        } => {
            let m = load_manifest(&manifest)?;
            let root = data_root.unwrap_or_else(|| parent_dir(&manifest));
            write!(out, "{}", render_stats_table(&stats_table(&m, root)?))?;
        }
        Command::Preprocess {
            out: dir,
            split,
            cfg,
        } => {
            let run: RunConfig = load_layered(cfg.config.as_deref(), &cfg.set)?;
            create_dir(&dir)?;
            write_echo(&run, &dir, ECHO_FILE)?;
            let set = split_windows(&run, split)?;
            let path = dir.join(WINDOWS_FILE);
            set.write(&path)?;
            writeln!(out, "wrote {} windows to {}", set.len(), path.display())?;
        }
        Command::Train { out: dir, cfg } => {
            let run: RunConfig = load_layered(cfg.config.as_deref(), &cfg.set)?;
            train_run(&run, &dir, err)?;
            writeln!(out, "wrote {}", dir.join(MODEL_FILE).display())?;
        }
        Command::Evaluate {
            model,
            out: dir,
            cfg,
        } => {
            let set = with_overrides(&cfg, &[("model", model.as_ref())]);
            let run: RunConfig = load_layered(cfg.config.as_deref(), &set)?;
            let m = load_model(run.require_model()?)?;
            create_dir(&dir)?;
            write_echo(&run, &dir, ECHO_FILE)?;
            let report = eval_run(&run, &m, &dir)?;
            write!(out, "{}", report.summary())?;
        }
        Command::Predict { model, cfg, files } => {
            let set = with_overrides(&cfg, &[("model", model.as_ref())]);
            let run: RunConfig = load_layered(cfg.config.as_deref(), &set)?;
            let m = load_model(run.require_model()?)?;
            let rate = m.spec().sample_rate;
            let clips = files
                .iter()
                .map(|f| Ok(resample(&decode_wav(f)?, rate)?))
                .collect::<Result<Vec<_>>>()?;
            let ratings = predict_clips(
                &m,
                clips,
                &model_windowing(&run, &m),
                run.aggregation,
                run.rating_cast,
                run.train.batch_size,
            )?;
            for (id, rating) in ratings {
                writeln!(out, "{id} {rating}")?;
            }
        }
        Command::Report { out: dir, cfg } => {
            let run: RunConfig = load_layered(cfg.config.as_deref(), &cfg.set)?;
            create_dir(&dir)?;
            write_echo(&run, &dir, ECHO_FILE)?;
            let csv = report_run(&run, &dir, err)?;
            write!(out, "{csv}")?;
        }
    }
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Windowing matching a trained model, with stride and padding from `run`.
fn model_windowing(run: &RunConfig, model: &SleepNet) -> WindowingConfig {
    WindowingConfig {
        window_size_s: model.spec().window_size_s,
        sample_rate: model.spec().sample_rate,
        ..run.windowing
    }
}

/// Train windows are balanced and augmented per `run`; other splits are not.
fn split_windows(run: &RunConfig, split: Split) -> Result<WindowSet> {
    let manifest = load_manifest(run.require_manifest()?)?;
    let root = run.audio_root().unwrap_or_else(|| PathBuf::from("."));
    let clips = load_split(&manifest, &root, split, run.windowing.sample_rate)?;
    if clips.is_empty() {
        anyhow::bail!("the manifest has no {split} clips");
    }
    Ok(if split == Split::Train {
        training_windows(
            clips,
            &run.windowing,
            &run.augment,
            run.balance,
            run.train.seed,
        )?
    } else {
        WindowSet::from_clips(clips, &run.windowing)?
    })
}

/// Trains into `dir`: echo, best checkpoint and loss history.
pub fn train_run(run: &RunConfig, dir: &Path, log: &mut dyn Write) -> Result<(SleepNet, TrainHistory)> {
    create_dir(dir)?;
    write_echo(run, dir, ECHO_FILE)?;
    let train_set = match &run.train_windows {
        Some(p) => WindowSet::read(p, run.windowing.sample_rate)?,
        None => split_windows(run, Split::Train)?,
    };
    let dev_set = split_windows(run, Split::Dev)?;
    let model = build_model(run.model_spec(), run.train.seed)?;
    let mut tc = run.train.clone();
    tc.checkpoint = Some(dir.join(MODEL_FILE));
    let epochs = tc.epochs;
    let (model, history) = train_with_observer(model, &train_set, &dev_set, &tc, |e| {
        let _ = writeln!(
            log,
            "epoch {}/{epochs}: train_loss {:.6} dev_loss {:.6}",
            e.epoch, e.train_loss, e.dev_loss
        );
    })?;
    history.write_csv(dir.join(HISTORY_FILE))?;
    Ok((model, history))
}

/// Evaluates `model` on `run.eval_split` and writes the report files into `dir`.
pub fn eval_run(run: &RunConfig, model: &SleepNet, dir: &Path) -> Result<EvalReport> {
    let manifest = load_manifest(run.require_manifest()?)?;
    let root = run.audio_root().unwrap_or_else(|| PathBuf::from("."));
    let clips = load_split(&manifest, &root, run.eval_split, model.spec().sample_rate)?;
    let report = evaluate_clips(
        model,
        clips,
        &model_windowing(run, model),
        run.aggregation,
        run.rating_cast,
        run.train.batch_size,
    )?;
    report.write(dir.join(REPORT_FILE), dir.join(SUMMARY_FILE))?;
    Ok(report)
}

/// The comparison grid: the base configuration without augmentation, then
/// one factor changed at a time.
pub fn grid(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut plain = base.clone();
    plain.train_windows = None;
    plain.augment.reverse = false;
    plain.augment.overlay = false;
    plain.augment.noisy_labels = false;
    let variant = |id: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut c = plain.clone();
        f(&mut c);
        (id.to_string(), c)
    };
    vec![
        variant("baseline", &|_| {}),
        variant("window_1s", &|c| c.windowing.window_size_s = 1.0),
        variant("rate_8khz", &|c| c.windowing.sample_rate = 8000),
        variant("conv_blocks_3", &|c| c.conv_blocks = 3),
        variant("augment_reverse", &|c| c.augment.reverse = true),
        variant("augment_overlay", &|c| c.augment.overlay = true),
        variant("augment_noisy_labels", &|c| c.augment.noisy_labels = true),
    ]
}

/// Runs every grid configuration under `dir/<config_id>/` and writes
/// `dir/grid.csv` (`config_id,mse,mae,rho`); returns the CSV text.
pub fn report_run(base: &RunConfig, dir: &Path, log: &mut dyn Write) -> Result<String> {
    let mut csv = String::from("config_id,mse,mae,rho\n");
    for (id, run) in grid(base) {
        let _ = writeln!(log, "== {id}");
        let sub = dir.join(&id);
        let (model, _) = train_run(&run, &sub, log).with_context(|| format!("configuration {id}"))?;
        let r = eval_run(&run, &model, &sub).with_context(|| format!("configuration {id}"))?;
        let rho = r.rho.map_or_else(|| "undefined".to_string(), |v| v.to_string());
        csv.push_str(&format!("{id},{},{},{rho}\n", r.mse, r.mae));
    }
    let path = dir.join(GRID_FILE);
    std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(csv)
}
