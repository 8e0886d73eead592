use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mdgm::config::RunConfig;
use mdgm::manifold::Clipping;
use mdgm::run::{self, exit_code};
use mdgm::verify::{self, Suite};
use mdgm::Error;

#[derive(Parser)]
#[command(name = "mdgm", version, about = "Latent graph inference on product manifolds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write report, curves and snapshots.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Seeds trained in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Sample the latent graph of a checkpoint and print its homophily.
    LatentGraph {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Name used in the output file names; defaults to the checkpoint epoch.
        #[arg(long)]
        epoch_tag: Option<String>,
    },
    /// Run self-check suites; the exit code is the number of failures.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        /// Evaluate distances without clipping their arguments.
        #[arg(long)]
        no_clip: bool,
    },
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code(err))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, jobs } => {
            let cfg = match RunConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let out = run::output_dir(&cfg);
            match run::train(&cfg, &out, jobs) {
                Ok(report) => {
                    let s = &report.summary;
                    println!(
                        "test accuracy {:.2} ± {:.2} % over {} seeds; outputs in {}",
                        100.0 * s.acc_test.mean,
                        100.0 * s.acc_test.std,
                        report.seeds.len(),
                        out.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::LatentGraph {
            config,
            checkpoint,
            epoch_tag,
        } => {
            let cfg = match RunConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let out = run::output_dir(&cfg);
            match run::latent_graph(&cfg, &checkpoint, epoch_tag.as_deref(), &out) {
                Ok(written) => {
                    for (path, snap) in written {
                        println!("h = {} ({})", snap.homophily, path.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Verify { suite, no_clip } => {
            let suite: Suite = match suite.parse() {
                Ok(s) => s,
                Err(e) => return fail(&e),
            };
            let clip = if no_clip {
                Clipping::Disabled
            } else {
                Clipping::default()
            };
            let checks = verify::run(suite, clip);
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{c}");
            }
            println!("{} checks, {failed} failed", checks.len());
            ExitCode::from(failed.min(125) as u8)
        }
    }
}
