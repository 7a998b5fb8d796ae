use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use pdfnet_core::data::{make_synthetic_dataset, BackgroundMode, SyntheticSpec};
use pdfnet_core::harness::config::KEYS;
use pdfnet_core::harness::selftest::{format_table, require_all, run_selftest};
use pdfnet_core::harness::{cmd_analyze_prior, cmd_eval, cmd_predict, cmd_train, DumpOptions, RunConfig};
use pdfnet_core::metrics::{EvalOptions, Evaluation};
use pdfnet_core::{PdfnetError, Result};

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .required(true)
        .help(help)
}

fn cli() -> Command {
    let mut cmd = Command::new("pdfnet")
        .about("Depth-prior guided dichotomous image segmentation")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .global(true)
                .help("key = value run configuration file"),
        )
        .after_help("Run settings resolve as flag > PDFNET_<KEY> environment variable > --config file > default.");
    for key in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(flag(key))
                .value_name("VALUE")
                .global(true)
                .help_heading("Run settings"),
        );
    }
    cmd.subcommand(Command::new("train").about("Train a model; writes checkpoints and a JSON-lines log to output_dir"))
        .subcommand(
            Command::new("eval")
                .about("Predict a split and score it against its masks")
                .arg(path_arg("checkpoint", "Trained checkpoint"))
                .arg(path_arg("split", "Directory with images/, depths/ and masks/"))
                .arg(path_arg("out", "Output directory for predictions and metrics"))
                .arg(
                    Arg::new("binarize")
                        .long("binarize")
                        .action(ArgAction::SetTrue)
                        .help("Threshold predictions at 0.5 before scoring"),
                ),
        )
        .subcommand(
            Command::new("predict")
                .about("Segment one image with its pseudo-depth map")
                .arg(path_arg("checkpoint", "Trained checkpoint"))
                .arg(path_arg("image", "RGB input"))
                .arg(path_arg("depth", "Pseudo-depth input"))
                .arg(path_arg("mask-out", "8-bit mask output"))
                .arg(path_arg("depth-out", "16-bit refined depth output")),
        )
        .subcommand(
            Command::new("analyze-prior")
                .about("Depth variance inside and outside the masks of a dataset")
                .arg(path_arg("root", "Directory with images/, depths/ and masks/"))
                .arg(
                    Arg::new("dump-terms")
                        .long("dump-terms")
                        .value_name("DIR")
                        .value_parser(value_parser!(PathBuf))
                        .help("Write stability weight maps and per-sample prior losses here"),
                )
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("PATH")
                        .value_parser(value_parser!(PathBuf))
                        .requires("dump-terms")
                        .help("Take predictions for the dumps from this model instead of the masks"),
                ),
        )
        .subcommand(Command::new("selftest").about("Run the built-in invariant checks"))
        .subcommand(
            Command::new("make-synthetic")
                .about("Generate a synthetic dataset (uses --resolution and --seed)")
                .arg(path_arg("out", "Dataset root to create"))
                .arg(
                    Arg::new("count")
                        .long("count")
                        .value_parser(value_parser!(usize))
                        .default_value("50"),
                )
                .arg(
                    Arg::new("fg-depth-sigma")
                        .long("fg-depth-sigma")
                        .value_parser(value_parser!(f64))
                        .default_value("0.02"),
                )
                .arg(Arg::new("bg-mode").long("bg-mode").default_value("gradient").help("gradient, noise or textured")),
        )
}

fn flag_values(m: &ArgMatches) -> Vec<(String, String)> {
    KEYS.iter()
        .filter_map(|k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect()
}

fn config_file(m: &ArgMatches) -> Option<&Path> {
    m.get_one::<PathBuf>("config").map(PathBuf::as_path)
}

fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    RunConfig::resolve(config_file(m), std::env::vars(), &flag_values(m))
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    m.get_one::<PathBuf>(name).expect("required argument")
}

fn print_evaluation(eval: &Evaluation) {
    let r = &eval.report;
    println!("samples     {}", r.samples.len());
    println!("F_max       {:.4}", r.f_max);
    println!("F_w         {:.4}", r.f_weighted);
    println!("E_phi       {:.4}", r.e_measure);
    println!("S_alpha     {:.4}", r.s_measure);
    println!("MAE         {:.4}", r.mae);
    if let Some(d) = &eval.depth {
        println!("var_fg<bg   {:.3} of {}", d.fraction_fg_below_bg, d.compared);
    }
}

fn run(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("train", _)) => {
            let cfg = run_config(m)?;
            let s = cmd_train(&cfg)?;
            println!(
                "trained to step {} (epoch {}); log {}",
                s.state.step,
                s.state.epoch,
                s.log_path.display()
            );
            if let Some(mae) = s.state.best_val_mae {
                println!("best validation MAE {mae:.5} at step {}", s.state.best_step.unwrap_or(0));
            }
            Ok(())
        }
        Some(("eval", sub)) => {
            let opts = EvalOptions {
                binarize: sub.get_flag("binarize"),
            };
            let eval = cmd_eval(path(sub, "checkpoint"), path(sub, "split"), path(sub, "out"), &opts)?;
            print_evaluation(&eval);
            if !eval.fully_paired() {
                let names: Vec<String> = eval.unpaired.iter().map(|p| p.display().to_string()).collect();
                return Err(PdfnetError::Data(format!("unpaired files: {}", names.join(", "))));
            }
            Ok(())
        }
        Some(("predict", sub)) => {
            let r = cmd_predict(
                path(sub, "checkpoint"),
                path(sub, "image"),
                path(sub, "depth"),
                path(sub, "mask-out"),
                path(sub, "depth-out"),
            )?;
            println!("{}", serde_json::to_string(&r)?);
            Ok(())
        }
        Some(("analyze-prior", sub)) => {
            let dump = sub.get_one::<PathBuf>("dump-terms").map(|out| DumpOptions {
                out_dir: out,
                checkpoint: sub.get_one::<PathBuf>("checkpoint").map(PathBuf::as_path),
            });
            let r = cmd_analyze_prior(path(sub, "root"), dump)?;
            println!("samples              {}", r.samples.len());
            println!("mean var_fg          {:.6e}", r.mean_fg);
            println!("mean var_bg          {:.6e}", r.mean_bg);
            println!("mean var_all         {:.6e}", r.mean_all);
            println!("var_fg < var_bg      {:.3} of {}", r.fraction_fg_below_bg, r.compared);
            Ok(())
        }
        Some(("selftest", _)) => {
            let rows = run_selftest();
            print!("{}", format_table(&rows));
            require_all(&rows)
        }
        Some(("make-synthetic", sub)) => {
            // only resolution and seed matter here, so the network check is skipped
            let cfg = RunConfig::resolve_layers(config_file(m), std::env::vars(), &flag_values(m))?;
            let spec = SyntheticSpec {
                n: *sub.get_one::<usize>("count").expect("default"),
                resolution: cfg.resolution,
                fg_depth_sigma: *sub.get_one::<f64>("fg-depth-sigma").expect("default"),
                bg_mode: sub.get_one::<String>("bg-mode").expect("default").parse::<BackgroundMode>()?,
                seed: cfg.seed,
            };
            let root = make_synthetic_dataset(path(sub, "out"), &spec)?;
            println!("wrote {} samples to {}", spec.n, root.display());
            Ok(())
        }
        _ => unreachable!("subcommand is required"),
    }
}

fn exit_code(e: &PdfnetError) -> u8 {
    match e {
        PdfnetError::Config(_) => 2,
        PdfnetError::NotFound(_) => 3,
        PdfnetError::EmptyInput(_) => 4,
        PdfnetError::Numerics(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
