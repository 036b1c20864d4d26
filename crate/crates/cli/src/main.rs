//! `kfatt` command-line entry point.
//!
//! Exit codes: 0 success, 1 I/O or runtime failure, 2 invalid configuration,
//! 3 oracle certification failure, 4 artifact digest mismatch.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kfatt::checkpoint;
use kfatt::config::RunConfig;
use kfatt::datagen::{self, Dataset};
use kfatt::eval::{self, render_metrics};
use kfatt::model::{self, Model};
use kfatt::oracle;
use kfatt::{Error, Rng};

#[derive(Parser)]
#[command(name = "kfatt", version, about = "Kalman filtering attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set model.kernel=kfatt_base`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Proceed even when artifact digests disagree with the configuration.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Generate(Common),
    /// Train a model and write a checkpoint plus a loss log.
    Train(Common),
    /// Score the test split and write per-subset AUC.
    Evaluate(Common),
    /// Certify the closed-form kernels against numerical MAP estimation.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Random instances per mode.
        #[arg(long, default_value_t = 200)]
        instances: usize,
    },
    /// Time forward passes and count multiply-accumulates.
    Bench(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::DigestMismatch(_) => 4,
        _ => 1,
    }
}

fn load(common: &Common) -> kfatt::Result<RunConfig> {
    RunConfig::load(&common.config, &common.sets, std::env::vars())
}

fn write_file(path: &Path, text: &str) -> kfatt::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn check_digest(what: &str, found: &str, expected: &str, force: bool) -> kfatt::Result<()> {
    if found == expected {
        return Ok(());
    }
    let msg = format!("{what} digest {found} does not match {expected}");
    if force {
        eprintln!("warning: {msg} (continuing because of --force)");
        Ok(())
    } else {
        Err(Error::DigestMismatch(msg))
    }
}

fn load_dataset(cfg: &RunConfig, force: bool) -> kfatt::Result<Dataset> {
    let ds = Dataset::read(&cfg.paths.data_dir)?;
    check_digest("dataset", &ds.digest, &cfg.datagen.digest(), force)?;
    Ok(ds)
}

fn generate(common: &Common) -> kfatt::Result<()> {
    let cfg = load(common)?;
    let ds = datagen::generate(&cfg.datagen)?;
    ds.write(&cfg.paths.data_dir)?;
    let new = ds.test.iter().filter(|i| i.tags.new).count();
    let infreq = ds.test.iter().filter(|i| i.tags.infreq).count();
    println!(
        "wrote {} train and {} test instances ({} new, {} infreq) to {}",
        ds.train.len(),
        ds.test.len(),
        new,
        infreq,
        cfg.paths.data_dir.display()
    );
    Ok(())
}

fn train(common: &Common) -> kfatt::Result<()> {
    let cfg = load(common)?;
    let ds = load_dataset(&cfg, common.force)?;
    let root = Rng::new(cfg.seed);
    let mut model = Model::new(cfg.model.clone(), ds.vocab, &mut root.split(1))?;
    let digest = cfg.digest();
    let mut log = format!("# config_digest={digest}\n");
    model::train(&mut model, &ds.train, &cfg.train, &mut root.split(2), |epoch, loss| {
        let line = format!("epoch={} loss={loss:.9}", epoch + 1);
        println!("{line}");
        writeln!(log, "{line}").expect("write to string");
    })?;
    write_file(&cfg.paths.loss_log, &log)?;
    checkpoint::save(&cfg.paths.checkpoint, &model, &digest, &ds.digest)?;
    println!("checkpoint written to {}", cfg.paths.checkpoint.display());
    Ok(())
}

fn evaluate(common: &Common) -> kfatt::Result<()> {
    let cfg = load(common)?;
    let ds = load_dataset(&cfg, common.force)?;
    let (manifest, model) = checkpoint::load(&cfg.paths.checkpoint)?;
    check_digest("checkpoint dataset", &manifest.datagen_digest, &ds.digest, common.force)?;
    check_digest("checkpoint config", &manifest.config_digest, &cfg.digest(), common.force)?;
    let rows = eval::evaluate(model.config.kernel.name(), &model, &ds.test, cfg.eval.ties)?;
    let body = render_metrics(&rows);
    print!("{body}");
    let text = format!("# config_digest={} datagen_digest={}\n{body}", cfg.digest(), ds.digest);
    write_file(&cfg.paths.metrics, &text)
}

fn verify(common: &Common, instances: usize) -> kfatt::Result<bool> {
    let cfg = load(common)?;
    let report = oracle::certify(cfg.seed, instances);
    print!("{}", report.render());
    println!("total failures: {}", report.failures());
    Ok(report.failures() == 0)
}

fn bench(common: &Common) -> kfatt::Result<()> {
    let cfg = load(common)?;
    let rows = eval::bench_latency(&cfg.model, &cfg.eval.bench_kernels, &cfg.eval.bench_lengths, cfg.eval.bench_reps, cfg.seed)?;
    let mut text = format!("# config_digest={}\n", cfg.digest());
    for r in &rows {
        writeln!(text, "{}", r.render()).expect("write to string");
    }
    print!("{}", &text[text.find('\n').map_or(0, |i| i + 1)..]);
    write_file(&cfg.paths.bench_report, &text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(c) => generate(c),
        Command::Train(c) => train(c),
        Command::Evaluate(c) => evaluate(c),
        Command::Bench(c) => bench(c),
        Command::Verify { common, instances } => match verify(common, *instances) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(3),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::Config(msgs) => {
                    for m in msgs {
                        eprintln!("config error: {m}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
