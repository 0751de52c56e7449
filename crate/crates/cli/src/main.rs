use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use c2f_core::config::RunConfigFile;
use c2f_core::eval::{evaluate, Protocol};
use c2f_core::exec::{init_threads_from_env, Exec};
use c2f_core::inference::{check_compatible, run_inference, score_manifest, PredictionsFile};
use c2f_core::model::ModelParams;
use c2f_core::synthdata::{class_names, corpus_stats, generate_corpus, Manifest};
use c2f_core::trainer::{ablate, train, AblationMode};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "c2f", version, about = "Localize rare actions in long videos from video labels and first-occurrence clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; every file the command writes goes here.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the corpus and training seeds.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfigFile> {
        let mut c = RunConfigFile::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            c = c.with_seed(s);
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train/test manifests and statistics.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides `train.mode`: FO, FO+VL or FO+VL+PD.
        #[arg(long)]
        mode: Option<AblationMode>,
    },
    /// Predict segments for every video of a manifest.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score predictions against a manifest and print the mAP table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Predictions file to score.
        #[arg(long, required_unless_present = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Run inference with this checkpoint instead of reading predictions.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `eval.protocol`: first-occurrence or all-occurrence.
        #[arg(long)]
        protocol: Option<Protocol>,
        /// Also write per-video F/CS/AS score curves as CSV (needs --checkpoint).
        #[arg(long, requires = "checkpoint")]
        curves: bool,
    },
    /// Train and evaluate the FO, FO+VL and FO+VL+PD arms on one corpus.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Training manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Test manifest.
        #[arg(long)]
        test_manifest: PathBuf,
        /// Train only this arm.
        #[arg(long)]
        mode: Option<AblationMode>,
    },
    /// Class presence statistics of manifests carrying all-occurrence segments.
    Stats {
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Also write stats.json and stats.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<c2f_core::Error>() {
            return if e.is_io() { EXIT_IO } else { EXIT_CONFIG };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

fn config_help() -> String {
    let mut s = String::from("Configuration keys and defaults (TOML, pass with --config):\n\n");
    for line in RunConfigFile::default().to_toml().lines() {
        let _ = writeln!(s, "    {line}");
    }
    let _ = write!(s, "\nEnvironment: {} caps worker threads.", c2f_core::exec::THREADS_ENV);
    s
}

fn cli() -> clap::Command {
    let help = config_help();
    let mut cmd = Cli::command().after_long_help(help.clone());
    let names: Vec<String> = cmd.get_subcommands().map(|c| c.get_name().to_string()).collect();
    for name in names {
        let h = help.clone();
        cmd = cmd.mut_subcommand(name, |c| c.after_help(h));
    }
    cmd
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let parsed = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    init_threads_from_env();
    match run(parsed.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| c2f_core::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| c2f_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    let exec = Exec::Parallel;
    match command {
        Command::GenData { common } => {
            let config = common.load()?;
            create_dir(&common.out)?;
            config.write_resolved(&common.out)?;
            let summary = generate_corpus(&config.corpus, &common.out, exec).context("generating corpus")?;
            print!("{}", summary.stats.to_table(&class_names(config.corpus.num_classes)));
        }
        Command::Train { common, manifest, mode } => {
            let mut config = common.load()?;
            if let Some(m) = mode {
                config.train.mode = m;
            }
            let m = Manifest::read(&manifest)?;
            config.write_resolved(&common.out)?;
            let run = train(&config.train_config(), &m, Some(&common.out), exec)?;
            if let Some(last) = run.history.last() {
                println!("{} steps, final loss {:.5}", run.steps, last.loss.total);
            }
            println!("checkpoint: {}", run.checkpoints.last().expect("final checkpoint").display());
        }
        Command::Infer {
            common,
            checkpoint,
            manifest,
        } => {
            let config = common.load()?;
            let params = ModelParams::read_checkpoint(&checkpoint)?;
            let m = Manifest::read(&manifest)?;
            config.write_resolved(&common.out)?;
            let preds = run_inference(&params, &m, &config.inference, exec)?;
            let path = common.out.join("predictions.json");
            preds.write(&path)?;
            println!("{} segments -> {}", preds.predictions.len(), path.display());
        }
        Command::Eval {
            common,
            manifest,
            predictions,
            checkpoint,
            protocol,
            curves,
        } => {
            let config = common.load()?;
            let protocol = protocol.unwrap_or(config.eval.protocol);
            let m = Manifest::read(&manifest)?;
            config.write_resolved(&common.out)?;
            let params = checkpoint.as_deref().map(ModelParams::read_checkpoint).transpose()?;
            let preds = match (&predictions, &params) {
                (Some(p), _) => PredictionsFile::read(p)?,
                (None, Some(params)) => {
                    let preds = run_inference(params, &m, &config.inference, exec)?;
                    preds.write(&common.out.join("predictions.json"))?;
                    preds
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            let report = evaluate(&preds, &m, protocol, &class_names(m.num_classes))?;
            report.write(&common.out, &format!("report_{}", protocol.name().replace('-', "_")))?;
            print!("{}", report.to_table());
            if curves {
                write_curves(params.as_ref().expect("clap requires a checkpoint"), &m, &common.out, exec)?;
            }
        }
        Command::Ablate {
            common,
            manifest,
            test_manifest,
            mode,
        } => {
            let config = common.load()?;
            let train_m = Manifest::read(&manifest)?;
            let test_m = Manifest::read(&test_manifest)?;
            config.write_resolved(&common.out)?;
            let modes = match mode {
                Some(m) => vec![m],
                None => AblationMode::ALL.to_vec(),
            };
            let report = ablate(
                &config.train_config(),
                &modes,
                &train_m,
                &test_m,
                &config.inference,
                Some(&common.out),
                exec,
            )?;
            print!("{}", report.to_table());
        }
        Command::Stats { manifest, out } => {
            let manifests = manifest.iter().map(|p| Manifest::read(p)).collect::<Result<Vec<_>, _>>()?;
            let stats = corpus_stats(&manifests)?;
            let num_classes = manifests[0].num_classes;
            let table = stats.to_table(&class_names(num_classes));
            if let Some(dir) = out {
                create_dir(&dir)?;
                write_text(&dir.join("stats.json"), &(serde_json::to_string_pretty(&stats)? + "\n"))?;
                write_text(&dir.join("stats.txt"), &table)?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn write_curves(params: &ModelParams, manifest: &Manifest, out: &Path, exec: Exec) -> Result<()> {
    check_compatible(params, manifest)?;
    let dir = out.join("curves");
    create_dir(&dir)?;
    let bundles = score_manifest(params, manifest, exec)?;
    let c = manifest.num_classes;
    for (v, b) in manifest.videos.iter().zip(&bundles) {
        let mut s = String::from("frame,foreground");
        for k in 0..c {
            let _ = write!(s, ",conditional_{k}");
        }
        for k in 0..c {
            let _ = write!(s, ",action_{k}");
        }
        s.push('\n');
        for t in 0..b.num_frames {
            let _ = write!(s, "{t},{}", b.foreground[t]);
            for k in 0..c {
                let _ = write!(s, ",{}", b.conditional[t * c + k]);
            }
            for k in 0..c {
                let _ = write!(s, ",{}", b.action[t * c + k]);
            }
            s.push('\n');
        }
        write_text(&dir.join(format!("{}.csv", v.id)), &s)?;
    }
    Ok(())
}
