use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hime::config::{parse_layer_range, parse_sides, Overrides, PipelineConfig};
use hime::pipeline::{
    cmd_capture, cmd_edit, cmd_eval, cmd_gen_data, cmd_his, cmd_pipeline, cmd_subspace,
    render_table,
};
use hime::CliError;
use hime_core::editor::Sides;

/// Layer-adaptive null-space editing of a toy decoder.
///
/// Log verbosity comes from HIME_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "hime", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the contrastive corpus and its manifest.
    GenData(Common),
    /// Build the model and capture traces for every pair.
    Capture(Common),
    /// Score every layer and write the HIS profile.
    His(Common),
    /// Extract per-layer subspaces for the target layers.
    Subspace(Common),
    /// Apply the weighted null-space edit.
    Edit(Common),
    /// Compare original and edited weights on held-out scenes.
    Eval(Common),
    /// Run every stage, skipping those whose outputs exist.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run pipeline stages even when their outputs exist.
    #[arg(long)]
    force: bool,
    /// Inclusive 1-based target layers, e.g. 2..4.
    #[arg(long, value_parser = parse_layer_range)]
    layers: Option<(usize, usize)>,
    /// Subspace rank k.
    #[arg(long)]
    rank: Option<usize>,
    /// Same strength at every target layer instead of the HIS complement.
    #[arg(long)]
    uniform: Option<f64>,
    /// MLP weights to edit: up, down or both.
    #[arg(long, value_parser = parse_sides)]
    sides: Option<Sides>,
    /// Seed of the training world.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = PipelineConfig::load(self.config.as_deref())?;
        cfg.apply(&Overrides {
            layers: self.layers,
            rank: self.rank,
            uniform: self.uniform,
            sides: self.sides,
            seed: self.seed,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(verb: Verb) -> Result<(), CliError> {
    match verb {
        Verb::GenData(c) => drop(cmd_gen_data(&c.config()?)?),
        Verb::Capture(c) => cmd_capture(&c.config()?)?,
        Verb::His(c) => {
            for s in cmd_his(&c.config()?)? {
                println!(
                    "layer {:>2}  his_raw {:.6}  his_norm {:.6}  his_complement {:.6}",
                    s.layer, s.his_raw, s.his_norm, s.his_complement
                );
            }
        }
        Verb::Subspace(c) => {
            for s in cmd_subspace(&c.config()?)? {
                println!("layer {:>2}  sigma {:?}", s.layer, s.singular_values);
            }
        }
        Verb::Edit(c) => {
            for l in cmd_edit(&c.config()?)?.layers {
                println!(
                    "layer {:>2}  strength {:.6}  eigenvalues {:?}",
                    l.layer, l.strength, l.eigenvalues
                );
            }
        }
        Verb::Eval(c) => print!("{}", render_table(&cmd_eval(&c.config()?)?)),
        Verb::Pipeline(c) => {
            let out = cmd_pipeline(&c.config()?, c.force)?;
            print!("{}", render_table(&out.report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HIME_LOG", "warn")).init();
    match run(Cli::parse().verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
