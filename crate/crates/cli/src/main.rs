use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lmsf_core::pnm;
use lmsf_core::reparam::DEFAULT_CERT_TOL;
use lmsf_core::runtime;
use lmsf_core::selfcheck::{self, SelfcheckOptions};
use lmsf_core::weights::WeightStore;
use lmsf_core::{Form, Model, ModelConfig};

#[derive(Parser)]
#[command(name = "lmsf", version, about = "LMSF-A segmentation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a train-form model from a config and seed and save its weights.
    Init {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-module parameter and FLOP counts from a symbolic forward pass.
    Profile {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "deploy")]
        form: Form,
    },
    /// Rewrite a train-form weight file into deploy form and certify every block.
    Fuse {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Random inputs per block certificate.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Segment a P6 image; writes a P5 class-id mask and an instance list.
    Infer {
        #[command(flatten)]
        source: Source,
        /// Run this form; a train-form model is fused on the fly for deploy.
        #[arg(long)]
        form: Option<Form>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_mask: PathBuf,
        #[arg(long)]
        out_json: PathBuf,
    },
    /// Batch-1 latency on one worker thread: median, p90 and FPS.
    Bench {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "deploy")]
        form: Form,
        #[arg(long, default_value_t = 50)]
        runs: usize,
    },
    /// Run the invariant battery; exits nonzero if any suite fails.
    Selfcheck {
        #[command(flatten)]
        source: Source,
        /// Fewer certificate inputs and oracle shapes.
        #[arg(long)]
        quick: bool,
        /// Perturb one fused weight before certification.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Where the model comes from: a weight file, or a fresh build from config and seed.
#[derive(Args)]
struct Source {
    #[arg(long, conflicts_with = "config")]
    weights: Option<PathBuf>,
    /// Flat `key = value` model config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Source {
    fn model(&self) -> Result<Model> {
        match &self.weights {
            Some(path) => load(path),
            None => {
                let cfg = match &self.config {
                    Some(p) => ModelConfig::load(p).with_context(|| format!("config {}", p.display()))?,
                    None => ModelConfig::default(),
                };
                Ok(Model::build(&cfg, self.seed)?)
            }
        }
    }
}

fn load(path: &Path) -> Result<Model> {
    let store = WeightStore::load(path).with_context(|| format!("weights {}", path.display()))?;
    Model::from_store(&store).with_context(|| format!("weights {}", path.display()))
}

fn in_form(model: Model, form: Form) -> Result<Model> {
    match (model.form(), form) {
        (Form::Train, Form::Deploy) => Ok(model.fuse()?),
        (Form::Deploy, Form::Train) => bail!("a deploy-form model cannot be unfused into train form"),
        _ => Ok(model),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Init { source, out } => {
            let model = source.model()?;
            model.to_store().save(&out)?;
            println!("wrote {} form weights to {}", model.form(), out.display());
        }
        Command::Profile { source, form } => {
            println!("{}", in_form(source.model()?, form)?.profile()?);
        }
        Command::Fuse {
            weights,
            out,
            trials,
            seed,
        } => {
            let model = load(&weights)?;
            if model.form() != Form::Train {
                bail!("{} already holds deploy-form weights", weights.display());
            }
            let deploy = model.fuse()?;
            let reports = model.certify_blocks(&deploy, model.config.input_size, trials, DEFAULT_CERT_TOL, seed)?;
            let mut pass = true;
            for (i, r) in reports.iter().enumerate() {
                println!("block {i}: {r}");
                pass &= r.pass;
            }
            let (before, after) = (model.profile()?, deploy.profile()?);
            println!("params: train {} deploy {}", before.total_params, after.total_params);
            println!("flops: train {} deploy {}", before.total_flops, after.total_flops);
            if !pass {
                println!("certificate: FAIL, nothing written");
                return Ok(false);
            }
            deploy.to_store().save(&out)?;
            println!("certificate: PASS, wrote {}", out.display());
        }
        Command::Infer {
            source,
            form,
            image,
            out_mask,
            out_json,
        } => {
            let model = source.model()?;
            let model = match form {
                Some(f) => in_form(model, f)?,
                None => model,
            };
            let img = pnm::read_ppm(&image)?;
            let pred = runtime::infer(&model, &img)?;
            pred.mask_image().save(&out_mask)?;
            std::fs::write(&out_json, pred.instances_json() + "\n")
                .with_context(|| format!("writing {}", out_json.display()))?;
            println!(
                "{} form: {}x{} mask, {} instances",
                model.form(),
                img.width,
                img.height,
                pred.instances.len()
            );
        }
        Command::Bench { source, form, runs } => {
            let model = in_form(source.model()?, form)?;
            println!("{}", runtime::bench(&model, runs, source.seed)?);
        }
        Command::Selfcheck {
            source,
            quick,
            inject_fault,
        } => {
            let model = source.model()?;
            if model.form() != Form::Train {
                bail!("selfcheck certifies fusion and needs a train-form model");
            }
            let opts = if quick {
                SelfcheckOptions {
                    block_trials: 5,
                    model_trials: 2,
                    oracle_cases: 50,
                    seed: source.seed,
                }
            } else {
                SelfcheckOptions {
                    seed: source.seed,
                    ..SelfcheckOptions::default()
                }
            };
            let fault = |m: &mut Model| {
                let units = &mut m.backbone.stages[0].block.units;
                units[0].rvb.expand.conv.weight[0] += 0.5;
            };
            let tamper: Option<&dyn Fn(&mut Model)> = if inject_fault { Some(&fault) } else { None };
            let report = selfcheck::run(&model, &opts, tamper)?;
            println!("{report}");
            return Ok(report.all_pass());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
