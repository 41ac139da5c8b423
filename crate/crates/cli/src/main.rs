//! Command-line driver: runs single stages or the full pipeline.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nnk_infer::experiments::Experiment;
use nnk_infer::Error;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "nnk-infer", version, about = "Sample-wise inversion and neural-net-kernel transport experiments")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory; defaults to `out/<experiment name>`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the configuration and print it with defaults filled in.
    Validate,
    /// Synthesize the dataset.
    Generate,
    /// Invert every observation.
    Invert,
    /// Scale and pair the uniform prior with the inverted samples.
    Permute,
    /// Train the kernel network.
    Train,
    /// Predict from the test priors.
    Predict,
    /// Run one comparison method.
    Baseline {
        #[arg(value_enum)]
        method: Method,
    },
    /// Variational bandwidth search on the predicted samples.
    Sigma,
    /// Compute error metrics for the trained network.
    Report,
    /// Every stage in order.
    Run,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Method {
    Map,
    Mh,
    Hmc,
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Error> {
    let config = cli.config.ok_or_else(|| Error::config("--config", "a configuration file is required"))?;
    if !config.exists() {
        return Err(Error::config("--config", format!("{} does not exist", config.display())));
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("--threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let text = std::fs::read_to_string(&config)?;
    let probe = Experiment::new(&text, PathBuf::new(), cli.seed)?;
    let out_dir = cli.out_dir.unwrap_or_else(|| PathBuf::from("out").join(&probe.config.name));
    let mut exp = Experiment::new(&text, &out_dir, cli.seed)?;
    log::info!("experiment `{}` writing to {}", exp.config.name, out_dir.display());
    match cli.command {
        Command::Validate => print_json(&exp.config)?,
        Command::Generate => exp.generate()?,
        Command::Invert => print_json(&exp.invert()?)?,
        Command::Permute => {
            exp.permute()?;
        }
        Command::Train => print_json(&exp.train()?.1)?,
        Command::Predict => exp.predict()?,
        Command::Baseline { method: Method::Map } => print_json(&exp.baseline_map()?)?,
        Command::Baseline { method: Method::Mh } => print_json(&exp.baseline_mh()?)?,
        Command::Baseline { method: Method::Hmc } => print_json(&exp.baseline_hmc()?)?,
        Command::Sigma => print_json(&exp.baseline_sigma()?)?,
        Command::Report => print_json(&exp.report()?)?,
        Command::Run => print_json(&exp.run()?)?,
    }
    Ok(())
}

fn exit_code(args: impl IntoIterator<Item = std::ffi::OsString>) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(exit_code(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    const TINY: &str = r#"
name = "tiny"
seed = 3

[truth]
kind = "unimodal"

[model]
kind = "spring"

[data]
n_train = 12

[nnk]
hidden = [3]
n_anchors = 4
max_iter = 5

[test]
n_test = 20
n_reference = 50
"#;

    fn code(args: &[&str]) -> u8 {
        exit_code(std::iter::once("nnk-infer").chain(args.iter().copied()).map(Into::into))
    }

    fn write_config(dir: &Path, text: &str) -> String {
        let path = dir.join("cfg.toml");
        std::fs::write(&path, text).unwrap();
        path.to_str().unwrap().to_owned()
    }

    #[test]
    fn full_run_succeeds_and_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), TINY);
        let out = dir.path().join("out");
        assert_eq!(code(&["--config", &cfg, "--out-dir", out.to_str().unwrap(), "run"]), 0);
        for file in ["manifest.json", "m_opt.csv", "network.json", "metrics.json"] {
            assert!(out.join(file).exists(), "{file}");
        }
    }

    #[test]
    fn stages_run_one_at_a_time() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), TINY);
        let out = dir.path().join("out");
        let out = out.to_str().unwrap();
        for stage in ["validate", "generate", "invert", "permute", "train", "predict", "report"] {
            assert_eq!(code(&["--config", &cfg, "--out-dir", out, stage]), 0, "{stage}");
        }
    }

    #[test]
    fn validation_errors_exit_with_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), &TINY.replace("n_train = 12", "n_train = 0"));
        assert_eq!(code(&["--config", &cfg, "validate"]), 1);
        assert_eq!(code(&["validate"]), 1);
        assert_eq!(code(&["--config", "/nonexistent/cfg.toml", "validate"]), 1);
        assert_eq!(code(&["--config", &cfg, "no-such-command"]), 1);
        let good = write_config(dir.path(), TINY);
        assert_eq!(code(&["--config", &good, "--threads", "0", "validate"]), 1);
    }

    #[test]
    fn missing_artifacts_exit_with_two() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), TINY);
        let out = dir.path().join("empty");
        assert_eq!(code(&["--config", &cfg, "--out-dir", out.to_str().unwrap(), "train"]), 2);
    }

    #[test]
    fn missing_baseline_section_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), TINY);
        let out = dir.path().join("out");
        assert_eq!(code(&["--config", &cfg, "--out-dir", out.to_str().unwrap(), "baseline", "mh"]), 1);
    }
}
