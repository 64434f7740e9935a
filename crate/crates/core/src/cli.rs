//! The `kws` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error. Every run starts by echoing its resolved settings to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::audio_io::{discover_labels, read_wav, scan_dataset, split_dataset, synth_dataset, write_wav, ClipSource};
use crate::config::{parse_synth_spec, CliConfig};
use crate::dsp::Featurizer;
use crate::error::{KwsError, Result};
use crate::eval::{emit_report, evaluate, ReportFormat};
use crate::models::Model;
use crate::training::{evaluate_set, fit_with, load_checkpoint, save_checkpoint, Checkpoint, FeatureSet, TrainHistory};

#[derive(Debug, Parser)]
#[command(name = "kws", version, about = "Keyword spotting: features, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Settings {
    /// key = value settings file
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_pair)]
    set: Vec<(String, String)>,
    #[arg(long)]
    seed: Option<u64>,
    /// mfcc or log_mel
    #[arg(long)]
    features: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitChoice {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the feature matrix of one WAV file as CSV
    Featurize {
        wav: PathBuf,
        /// Output CSV (stdout if absent)
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Write a synthetic tone dataset as WAV files
    Synth {
        #[arg(long, value_name = "FILE")]
        spec: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint and metrics log
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// cnn, cnn_bilstm, attention_rnn or multilayer_attention
        #[arg(long)]
        arch: Option<String>,
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
        /// Metrics CSV (default: <out> with extension metrics.csv)
        #[arg(long, value_name = "CSV")]
        metrics: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lr_decay: Option<f64>,
        #[arg(long)]
        patience: Option<usize>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Evaluate a checkpoint and write a per-keyword report
    Eval {
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "REPORT")]
        out: PathBuf,
        /// Report format (default: csv for .csv paths, text otherwise)
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Which part of the training split to score
        #[arg(long, value_enum, default_value = "all")]
        split: SplitChoice,
    },
    /// Summarize a metrics log
    Report {
        #[arg(long, value_name = "CSV")]
        metrics: PathBuf,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))
}

fn exit_code(err: &KwsError) -> i32 {
    match err {
        KwsError::Usage(_) | KwsError::Config(_) => 1,
        _ => 2,
    }
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run_cli<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve(settings: &Settings, extra: Vec<(String, String)>) -> Result<CliConfig> {
    let mut overrides = settings.set.clone();
    if let Some(s) = settings.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(f) = &settings.features {
        overrides.push(("features".into(), f.clone()));
    }
    overrides.extend(extra);
    let config = CliConfig::load(settings.config.as_deref(), &overrides)?;
    config.validate()?;
    Ok(config)
}

fn header(err: &mut dyn Write, command: &str, paths: &[(&str, String)], pairs: &[(&'static str, String)]) {
    let _ = writeln!(err, "# kws {command}");
    for (k, v) in paths
        .iter()
        .map(|(k, v)| (*k, v))
        .chain(pairs.iter().map(|(k, v)| (*k, v)))
    {
        let _ = writeln!(err, "# {k} = {v}");
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| KwsError::io(path, e))
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::Featurize {
            wav,
            out: dest,
            settings,
        } => {
            let config = resolve(&settings, Vec::new())?;
            let mut paths = vec![("wav", display(&wav))];
            if let Some(d) = &dest {
                paths.push(("out", display(d)));
            }
            header(err, "featurize", &paths, &config.dsp_pairs());
            let clip = read_wav(&wav)?;
            if clip.sample_rate() != config.dsp.sample_rate {
                return Err(KwsError::Data(format!(
                    "{} is {} Hz, settings expect {} Hz",
                    wav.display(),
                    clip.sample_rate(),
                    config.dsp.sample_rate
                )));
            }
            let csv = Featurizer::new(config.dsp)?.compute(&clip)?.to_csv();
            match dest {
                Some(d) => write_text(&d, &csv),
                None => out.write_all(csv.as_bytes()).map_err(|e| KwsError::io("<stdout>", e)),
            }
        }
        Command::Synth { spec, out: dir, seed } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| KwsError::io(&spec, e))?;
            let (synth, file_seed) = parse_synth_spec(&text, &display(&spec))?;
            let seed = seed.unwrap_or(file_seed);
            let freqs: Vec<String> = synth.class_frequencies.iter().map(f64::to_string).collect();
            header(
                err,
                "synth",
                &[
                    ("spec", display(&spec)),
                    ("out", display(&dir)),
                    ("n_classes", synth.n_classes.to_string()),
                    ("clips_per_class", synth.clips_per_class.to_string()),
                    ("sample_rate", synth.sample_rate.to_string()),
                    ("class_frequencies", freqs.join(",")),
                    ("noise_amplitude", synth.noise_amplitude.to_string()),
                    ("seed", seed.to_string()),
                ],
                &[],
            );
            let index = synth_dataset(&synth, seed)?;
            for entry in &index.entries {
                if let ClipSource::Memory { id, clip } = &entry.source {
                    let path = dir.join(format!("{id}.wav"));
                    if let Some(parent) = path.parent() {
                        std::fs::create_dir_all(parent).map_err(|e| KwsError::io(parent, e))?;
                    }
                    write_wav(&path, clip)?;
                }
            }
            let _ = writeln!(
                out,
                "wrote {} clips in {} classes to {}",
                index.len(),
                synth.n_classes,
                dir.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            arch,
            out: ckpt_path,
            metrics,
            batch_size,
            max_epochs,
            lr,
            lr_decay,
            patience,
            settings,
        } => {
            let mut extra = Vec::new();
            let mut flag = |k: &str, v: Option<String>| {
                if let Some(v) = v {
                    extra.push((k.to_string(), v));
                }
            };
            flag("arch", arch);
            flag("batch_size", batch_size.map(|v| v.to_string()));
            flag("max_epochs", max_epochs.map(|v| v.to_string()));
            flag("base_lr", lr.map(|v| v.to_string()));
            flag("lr_decay", lr_decay.map(|v| v.to_string()));
            flag("patience", patience.map(|v| v.to_string()));
            let config = resolve(&settings, extra)?;
            let metrics_path = metrics.unwrap_or_else(|| ckpt_path.with_extension("metrics.csv"));
            let mut paths = vec![
                ("data", display(&data)),
                ("out", display(&ckpt_path)),
                ("metrics", display(&metrics_path)),
            ];
            if let Some(c) = &settings.config {
                paths.push(("config", display(c)));
            }
            header(err, "train", &paths, &config.pairs());
            train(&config, &data, &ckpt_path, &metrics_path, out, err)
        }
        Command::Eval {
            ckpt,
            data,
            out: report_path,
            format,
            split,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let format = match format {
                Some(Format::Csv) => ReportFormat::Csv,
                Some(Format::Text) => ReportFormat::Text,
                None => ReportFormat::for_path(&report_path),
            };
            let split_name = format!("{split:?}").to_lowercase();
            header(
                err,
                "eval",
                &[
                    ("ckpt", display(&ckpt)),
                    ("data", display(&data)),
                    ("out", display(&report_path)),
                    (
                        "format",
                        if format == ReportFormat::Csv { "csv" } else { "text" }.into(),
                    ),
                    ("split", split_name.clone()),
                    ("arch", ck.model.arch().name().into()),
                    ("labels", ck.labels.join(",")),
                    ("seed", ck.train.seed.to_string()),
                ],
                &[],
            );
            let index = scan_dataset(&data, &ck.labels)?;
            let index = match split {
                SplitChoice::All => index,
                part => {
                    let (tr, va, te) = split_dataset(&index, ck.split, ck.train.seed)?;
                    match part {
                        SplitChoice::Train => tr,
                        SplitChoice::Val => va,
                        _ => te,
                    }
                }
            };
            let report = evaluate(&ck.model, &ck.labels, &index, &ck.dsp)?;
            emit_report(&report, &report_path, format)?;
            let _ = writeln!(
                out,
                "{split_name}: accuracy {:.4} over {} clips, report in {}",
                report.overall_accuracy,
                report.n_samples,
                report_path.display()
            );
            Ok(())
        }
        Command::Report { metrics } => {
            header(err, "report", &[("metrics", display(&metrics))], &[]);
            let text = std::fs::read_to_string(&metrics).map_err(|e| KwsError::io(&metrics, e))?;
            let history = TrainHistory::parse_csv(&text)?;
            out.write_all(render_history(&history).as_bytes())
                .map_err(|e| KwsError::io("<stdout>", e))
        }
    }
}

fn train(
    config: &CliConfig,
    data: &Path,
    ckpt_path: &Path,
    metrics_path: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let labels = if config.labels.is_empty() {
        discover_labels(data)?
    } else {
        config.labels.clone()
    };
    if labels.len() < 2 {
        return Err(KwsError::Dataset(format!(
            "{} holds {} label directories, at least 2 are needed",
            data.display(),
            labels.len()
        )));
    }
    let index = scan_dataset(data, &labels)?;
    let (train_idx, val_idx, test_idx) = split_dataset(&index, config.split, config.seed)?;
    let _ = writeln!(
        err,
        "# split: {} train, {} val, {} test",
        train_idx.len(),
        val_idx.len(),
        test_idx.len()
    );
    if val_idx.is_empty() {
        return Err(KwsError::Config("val_ratio must be positive for early stopping".into()));
    }
    let featurizer = Featurizer::new(config.dsp.clone())?;
    let train_set = FeatureSet::from_index(&train_idx, &featurizer, &labels)?;
    let val_set = FeatureSet::from_index(&val_idx, &featurizer, &labels)?;
    let model = Model::build(config.model_config(labels.len()))?;
    let train_config = config.train_config();
    let outcome = fit_with(
        model,
        &train_set,
        &train_config,
        |m, _| {
            let r = evaluate_set(m, &val_set, train_config.batch_size)?;
            Ok((r.loss, r.accuracy))
        },
        |r| {
            let _ = writeln!(
                err,
                "epoch {:>3}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}  lr {:.3e}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr
            );
        },
    )?;
    outcome.history.write_csv(metrics_path)?;
    let ck = Checkpoint {
        model: outcome.model,
        train: train_config.clone(),
        dsp: config.dsp.clone(),
        labels,
        adam: Some(outcome.adam),
        history: outcome.history,
        split: config.split,
    };
    save_checkpoint(&ck, ckpt_path)?;
    let best = ck.history.best_epoch;
    let best_val = ck.history.records[best - 1].val_acc;
    let _ = writeln!(
        out,
        "best epoch {best} of {}, val accuracy {best_val:.4}",
        ck.history.records.len()
    );
    if !test_idx.is_empty() {
        let test_set = FeatureSet::from_index(&test_idx, &featurizer, &ck.labels)?;
        let r = evaluate_set(&ck.model, &test_set, train_config.batch_size)?;
        let _ = writeln!(out, "test accuracy {:.4} over {} clips", r.accuracy, test_set.len());
    }
    let _ = writeln!(
        out,
        "checkpoint {}, metrics {}",
        ckpt_path.display(),
        metrics_path.display()
    );
    Ok(())
}

/// Aligned table of a metrics log with the best epoch marked.
pub fn render_history(history: &TrainHistory) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>5}  {:>10}  {:>9}  {:>10}  {:>9}  {:>10}  {:>8}",
        "epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr", "seconds"
    );
    for r in &history.records {
        let mark = if r.epoch == history.best_epoch { " *" } else { "" };
        let _ = writeln!(
            s,
            "{:>5}  {:>10.4}  {:>9.4}  {:>10.4}  {:>9.4}  {:>10.3e}  {:>8.2}{mark}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr, r.seconds
        );
    }
    match history.records.iter().find(|r| r.epoch == history.best_epoch) {
        Some(b) => {
            let _ = writeln!(
                s,
                "best epoch {} of {}: val_acc {:.4}, val_loss {:.4}",
                b.epoch,
                history.records.len(),
                b.val_acc,
                b.val_loss
            );
        }
        None => s.push_str("no epochs recorded\n"),
    }
    s
}
