use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::FalseyValueParser;
use clap::{Parser, Subcommand};

use aassl::actions::DatasetStyle;
use aassl::dataset::{generate_synthetic, read_manifest, write_manifest, DatasetManifest, SynthConfig};
use aassl::eval::{embed_dataset, linear_probe, LayerTag, ProbeConfig};
use aassl::experiment::{
    analyze_run, emit_report, read_json, run_matrix, write_json, DatasetSection, EvalSection, ExperimentConfig,
    MatrixOptions, Report, SplitRecord, SPLIT_FILE,
};
use aassl::checkpoint::load_checkpoint;
use aassl::train::{run_training, Method, FINAL_CHECKPOINT};
use aassl::Error;

#[derive(Parser)]
#[command(name = "aassl", version, about = "Action-aware self-supervised learning lab")]
struct Cli {
    /// Root for outputs whose location is not given explicitly.
    #[arg(long, global = true, env = "AASSL_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    /// Force single-threaded, bit-reproducible training.
    #[arg(long, global = true, env = "AASSL_STRICT", value_parser = FalseyValueParser::new())]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// Output directory (default: <out-root>/data).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Take generator settings from an experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        categories: Option<usize>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_style)]
        style: Option<DatasetStyle>,
    },
    /// Validate a dataset directory and/or an experiment config.
    Validate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one method into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (default: the config's dataset section).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Linear probe of a trained run on its object split.
    Probe {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        one_view_per_clip: bool,
        #[arg(long, default_value = "backbone")]
        layer: LayerTag,
    },
    /// Probe accuracies, invariance score and G of a run, written to analysis.json.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluation settings from an experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate every cell of an experiment config.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: <out-root>/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reuse trained cells whose config is unchanged (they are re-evaluated).
        #[arg(long)]
        resume: bool,
    },
    /// Rebuild the report tables of a matrix directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn parse_style(s: &str) -> Result<DatasetStyle, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown style `{s}` (yaw, pose)"))
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

/// Exit status 1 for bad input, 2 for failures while running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Split(_) | Error::Json(_) | Error::FingerprintMismatch { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn out(line: String) {
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn load_data(data: Option<&Path>, fallback: &DatasetSection) -> aassl::Result<DatasetManifest> {
    match data {
        Some(d) => read_manifest(d),
        None => fallback.load(),
    }
}

fn print_report(r: &Report) {
    out(format!("{:<28} {:>18} {:>18} {:>18}", "variant", "accuracy", "invariance", "G"));
    let show = |s: &Option<aassl::experiment::Stat>| s.map_or("-".to_string(), |s| s.to_string());
    for row in &r.summary {
        out(format!(
            "{:<28} {:>18} {:>18} {:>18}",
            row.variant,
            show(&row.accuracy),
            show(&row.invariance),
            show(&row.view_alignment)
        ));
    }
    for f in &r.failed {
        out(format!("FAILED {} seed {}: {}", f.variant, f.seed, f.error));
    }
}

fn run(cli: Cli) -> aassl::Result<u8> {
    match cli.command {
        Command::Gen { out: dir, config, categories, instances, views, size, seed, style } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?.dataset.synthetic,
                None => SynthConfig::default(),
            };
            cfg.num_categories = categories.unwrap_or(cfg.num_categories);
            cfg.instances_per_category = instances.unwrap_or(cfg.instances_per_category);
            cfg.views_per_object = views.unwrap_or(cfg.views_per_object);
            cfg.image_size = size.unwrap_or(cfg.image_size);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.style = style.unwrap_or(cfg.style);
            let dir = dir.unwrap_or_else(|| cli.out_root.join("data"));
            let m = generate_synthetic(&cfg)?;
            write_manifest(&m, &dir)?;
            out(format!("wrote {} clips, {} frames to {}", m.clips.len(), m.num_frames(), dir.display()));
            Ok(0)
        }
        Command::Validate { data, config } => {
            if data.is_none() && config.is_none() {
                return Err(Error::Config("nothing to validate: pass --data and/or --config".into()));
            }
            if let Some(c) = config {
                let cfg = ExperimentConfig::load(&c)?;
                out(format!("config ok: {} variants × {} seeds", cfg.variants().len(), cfg.seeds.len()));
            }
            if let Some(d) = data {
                let m = read_manifest(&d)?;
                out(format!(
                    "dataset ok: {} categories, {} clips, {} frames, hash {}",
                    m.num_categories(),
                    m.clips.len(),
                    m.num_frames(),
                    m.content_hash()
                ));
            }
            Ok(0)
        }
        Command::Train { config, data, out: dir, method, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mut tc = cfg.train.clone();
            tc.method = method.unwrap_or(tc.method);
            tc.seed = seed.unwrap_or(tc.seed);
            tc.strict |= cli.strict;
            let mut section = cfg.dataset.clone();
            if let Some(d) = &data {
                section.path = Some(d.clone());
            }
            let full = section.load()?;
            let (train, test) = section.split(&full)?;
            let dir = dir.unwrap_or_else(|| cli.out_root.join(format!("{}_seed{}", tc.method, tc.seed)));
            let outcome = run_training(&train, &tc, Some(&dir))?;
            write_json(&dir.join(SPLIT_FILE), &SplitRecord::new(&section, &full, &train, &test))?;
            let curve = outcome.metrics.loss_curve();
            out(format!(
                "trained {} for {} steps: loss {:.4} -> {:.4}; run dir {}",
                tc.method,
                curve.len(),
                curve.first().copied().unwrap_or(f64::NAN),
                curve.last().copied().unwrap_or(f64::NAN),
                dir.display()
            ));
            Ok(0)
        }
        Command::Probe { run, data, one_view_per_clip, layer } => {
            let split: SplitRecord = read_json(&run.join(SPLIT_FILE))?;
            let full = load_data(data.as_deref(), &split.dataset)?;
            let (train, test) = split.apply(&full)?;
            let bundle = load_checkpoint(&run.join(FINAL_CHECKPOINT))?;
            let cfg = ProbeConfig { one_view_per_clip, ..ProbeConfig::default() };
            let r = linear_probe(&embed_dataset(&bundle, &train, layer)?, &embed_dataset(&bundle, &test, layer)?, &cfg)?;
            out(format!(
                "layer {layer}: test accuracy {:.4}, train accuracy {:.4} ({} training rows)",
                r.accuracy, r.train_accuracy, r.train_rows
            ));
            Ok(0)
        }
        Command::Analyze { run, data, config } => {
            let eval = match config {
                Some(c) => ExperimentConfig::load(&c)?.eval,
                None => EvalSection::default(),
            };
            let split: SplitRecord = read_json(&run.join(SPLIT_FILE))?;
            let full = load_data(data.as_deref(), &split.dataset)?;
            let a = analyze_run(&run, &full, &eval)?;
            for (k, p) in &a.probes {
                out(format!("probe {k}: {:.4}", p.accuracy));
            }
            if let Some(v) = a.invariance {
                out(format!("invariance (test split) {v:.6}"));
            }
            if let Some(v) = a.invariance_train {
                out(format!("invariance (train split) {v:.6}"));
            }
            if let Some(g) = a.view_alignment {
                out(format!("G {g:.6}"));
            }
            Ok(0)
        }
        Command::Matrix { config, out: dir, resume } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = dir.unwrap_or_else(|| cli.out_root.join(&cfg.name));
            let opts = MatrixOptions {
                resume,
                strict: cli.strict.then_some(true),
            };
            let outcome = run_matrix(&cfg, &dir, &opts)?;
            print_report(&outcome.report);
            Ok(if outcome.failed() > 0 { 2 } else { 0 })
        }
        Command::Report { dir } => {
            let r = emit_report(&dir)?;
            print_report(&r);
            Ok(if r.failed.is_empty() { 0 } else { 2 })
        }
    }
}
