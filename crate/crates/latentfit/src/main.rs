//! Command-line front end: dataset generation, training, evaluation,
//! sampling, gradient audits, and the registered self-checks.
//!
//! Exit codes: 0 on success, 1 for usage or configuration problems,
//! 2 for numerical failures during a run, 3 when verification fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use latentfit::harness::checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint};
use latentfit::harness::config::Ini;
use latentfit::harness::dataset::{gen_data, write_data_csv, write_sidecar, DataSpec};
use latentfit::harness::metrics::{sha256_hex, write_manifest, write_metrics};
use latentfit::harness::run::{resolve_seed, run_eval, run_sample, run_train};
use latentfit::harness::verify::{run_gradcheck, run_suite, CheckResult, Suite};
use latentfit::harness::HarnessError;

#[derive(Parser)]
#[command(
    name = "latentfit",
    about = "Latent-variable model fitting with reproducible artifacts",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset and write it with its ground-truth sidecar.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed given in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a dataset; writes metrics, a checkpoint, and a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset; `--gap` adds the per-datum
    /// amortization-gap report for vae checkpoints.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gap: bool,
    },
    /// Draw fresh data from the generative side of a checkpoint.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit every analytic gradient against central differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run registered invariant checks; prints one line per check.
    Verify {
        /// numkit, diffnet, em, vi, vae, ddm, or all (the default).
        suite: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; only genuine usage
            // errors take the config exit code.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenData { config, seed, out } => cmd_gen_data(&config, seed, &out),
        Command::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Command::Eval {
            config,
            seed,
            out,
            gap,
        } => cmd_eval(&config, seed, &out, gap),
        Command::Sample { config, seed, out } => cmd_sample(&config, seed, &out),
        Command::Gradcheck { config, seed, out } => {
            cmd_gradcheck(config.as_deref(), seed, out.as_deref())
        }
        Command::Verify { suite, seed, out } => {
            cmd_verify(suite.as_deref(), seed, out.as_deref())
        }
    }
}

fn read_config(path: &Path) -> Result<(String, Ini), HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        HarnessError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let ini = Ini::parse(&text)?;
    Ok((text, ini))
}

fn ensure_dir(path: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn cmd_gen_data(config: &Path, cli_seed: Option<u64>, out: &Path) -> Result<(), HarnessError> {
    let (text, ini) = read_config(config)?;
    ini.check_sections(&["dataset"])?;
    let mut r = ini.reader("dataset");
    let spec = DataSpec::parse(r.str_req("spec")?)?;
    let n = r.usize_req("n")?;
    let config_seed = r.opt_u64("seed")?;
    r.finish()?;
    let seed = resolve_seed(config_seed, cli_seed)?;
    let (data, truth) = gen_data(spec, n, seed)?;
    ensure_dir(out)?;
    let data_path = out.join("data.csv");
    write_data_csv(&data_path, spec.data_dim(), &data)?;
    write_sidecar(&out.join("data.meta"), spec, n, seed, &truth)?;
    write_manifest(
        &out.join("manifest.ini"),
        "gen-data",
        text.as_bytes(),
        seed,
        &[("spec", spec.name().to_string()), ("rows", n.to_string())],
    )?;
    println!("wrote {n} rows of {} to {}", spec.name(), data_path.display());
    Ok(())
}

fn cmd_train(config: &Path, cli_seed: Option<u64>, out: &Path) -> Result<(), HarnessError> {
    let (text, ini) = read_config(config)?;
    let outcome = run_train(&ini, cli_seed)?;
    ensure_dir(out)?;
    write_metrics(&out.join("metrics.csv"), &outcome.report)?;
    save_checkpoint(&out.join("checkpoint.bin"), &outcome.checkpoint)?;
    write_manifest(
        &out.join("manifest.ini"),
        "train",
        text.as_bytes(),
        outcome.report.seed,
        &[
            ("topology", outcome.checkpoint.descriptor.clone()),
            (
                "final_params_sha256",
                sha256_hex(&checkpoint_bytes(&outcome.checkpoint)),
            ),
            ("converged", outcome.report.converged.to_string()),
        ],
    )?;
    // A diverged run still persists everything logged up to the failure;
    // the nonzero exit happens after the artifacts are on disk.
    if let Some(msg) = outcome.aborted {
        return Err(HarnessError::Numerical(msg));
    }
    let last = outcome.report.rows.last().expect("at least one row");
    println!(
        "final objective {} after {} logged rows (converged = {})",
        last.objective,
        outcome.report.rows.len(),
        outcome.report.converged
    );
    Ok(())
}

fn run_seed_of(ini: &Ini, cli_seed: Option<u64>) -> Result<u64, HarnessError> {
    let mut r = ini.reader("run");
    let config_seed = r.opt_u64("seed")?;
    resolve_seed(config_seed, cli_seed)
}

fn checkpoint_path_of(ini: &Ini) -> Result<PathBuf, HarnessError> {
    let mut r = ini.reader("run");
    Ok(PathBuf::from(r.str_req("checkpoint")?))
}

fn cmd_eval(
    config: &Path,
    cli_seed: Option<u64>,
    out: &Path,
    gap: bool,
) -> Result<(), HarnessError> {
    let (text, ini) = read_config(config)?;
    let ckpt = load_checkpoint(&checkpoint_path_of(&ini)?)?;
    let seed = run_seed_of(&ini, cli_seed)?;
    let outcome = run_eval(&ini, gap, cli_seed, &ckpt)?;
    ensure_dir(out)?;
    if let Some(rows) = &outcome.gap_rows {
        let mut body = String::from("index,gap,se,elbo_local,elbo_amortized\n");
        for row in rows {
            body.push_str(&format!(
                "{},{},{},{},{}\n",
                row.index, row.gap, row.se, row.elbo_local, row.elbo_amortized
            ));
        }
        std::fs::write(out.join("gap.csv"), body)?;
        println!("mean amortization gap {} over {} points", outcome.objective, rows.len());
    } else {
        let mut body = String::new();
        match outcome.oracle_loglik {
            Some(oracle) => {
                body.push_str("objective,oracle_loglik\n");
                body.push_str(&format!("{},{oracle}\n", outcome.objective));
            }
            None => {
                body.push_str("objective\n");
                body.push_str(&format!("{}\n", outcome.objective));
            }
        }
        std::fs::write(out.join("eval.csv"), body)?;
        println!("objective {}", outcome.objective);
    }
    write_manifest(
        &out.join("manifest.ini"),
        "eval",
        text.as_bytes(),
        seed,
        &[(
            "mode",
            if gap { "gap".to_string() } else { "objective".to_string() },
        )],
    )?;
    Ok(())
}

fn cmd_sample(config: &Path, cli_seed: Option<u64>, out: &Path) -> Result<(), HarnessError> {
    let (text, ini) = read_config(config)?;
    let ckpt = load_checkpoint(&checkpoint_path_of(&ini)?)?;
    let seed = run_seed_of(&ini, cli_seed)?;
    let (d, samples) = run_sample(&ini, cli_seed, &ckpt)?;
    ensure_dir(out)?;
    write_data_csv(&out.join("samples.csv"), d, &samples)?;
    write_manifest(
        &out.join("manifest.ini"),
        "sample",
        text.as_bytes(),
        seed,
        &[("rows", samples.len().to_string())],
    )?;
    println!("wrote {} samples", samples.len());
    Ok(())
}

fn report_lines(results: &[CheckResult]) -> String {
    let mut text = String::new();
    for r in results {
        text.push_str(&r.line());
        text.push('\n');
    }
    text
}

fn finish_checks(
    results: &[CheckResult],
    command: &str,
    file_name: &str,
    config_text: &str,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), HarnessError> {
    let text = report_lines(results);
    print!("{text}");
    if let Some(dir) = out {
        ensure_dir(dir)?;
        std::fs::write(dir.join(file_name), &text)?;
        write_manifest(
            &dir.join("manifest.ini"),
            command,
            config_text.as_bytes(),
            seed,
            &[("checks", results.len().to_string())],
        )?;
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(HarnessError::Verification {
            failed,
            total: results.len(),
        });
    }
    Ok(())
}

fn cmd_gradcheck(
    config: Option<&Path>,
    cli_seed: Option<u64>,
    out: Option<&Path>,
) -> Result<(), HarnessError> {
    let mut trials = 20;
    let mut config_seed = None;
    let mut text = String::new();
    if let Some(path) = config {
        let (t, ini) = read_config(path)?;
        text = t;
        ini.check_sections(&["gradcheck"])?;
        let mut r = ini.reader("gradcheck");
        trials = r.usize_or("trials", trials)?;
        if trials == 0 {
            return Err(HarnessError::Config("trials must be positive".into()));
        }
        config_seed = r.opt_u64("seed")?;
        r.finish()?;
    }
    let seed = cli_seed.or(config_seed).unwrap_or(0);
    let results = run_gradcheck(seed, trials)?;
    finish_checks(&results, "gradcheck", "gradcheck.txt", &text, seed, out)
}

fn cmd_verify(
    suite: Option<&str>,
    cli_seed: Option<u64>,
    out: Option<&Path>,
) -> Result<(), HarnessError> {
    let suite = Suite::parse(suite.unwrap_or("all"))?;
    let seed = cli_seed.unwrap_or(0);
    let results = run_suite(suite, seed)?;
    finish_checks(&results, "verify", "verify.txt", "", seed, out)
}
