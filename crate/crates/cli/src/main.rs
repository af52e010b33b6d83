//! Command-line harness: synthetic data generation, pretraining, finetuning,
//! evaluation, profiling and gradient verification. Every subcommand reads
//! one key=value config file and honors --seed/--out; outputs are
//! deterministic given both.

use anyhow::{bail, Context};
use spikeseg_core::config::Config;
use spikeseg_core::pipeline::{self, Experiment};
use std::path::PathBuf;

const USAGE: &str = "spikeseg <subcommand> [flags]

Subcommands:
  synth      generate a synthetic clip dataset as PNG sequences
  pretrain   masked-autoencoding pretraining; exports the encoder checkpoint
  finetune   segmentation finetuning (use --init for a pretrained encoder)
  eval       evaluate a finetuned checkpoint; prints per-class IoU and mIoU
  profile    count AC/MAC ops on one inference pass; report energy and latency
  gradcheck  run the relaxation-mode finite-difference verification suite

Flags:
  --config <path>   experiment config file (key = value sections)
  --seed <u64>      RNG seed (default 1)
  --out <dir>       output directory (default ./out)
  --init <path>     encoder checkpoint for finetune initialization
  --clips <n>       clip count for synth (default [data] clips_train)
";

struct Args {
    config: Option<PathBuf>,
    seed: u64,
    out: PathBuf,
    init: Option<PathBuf>,
    clips: Option<usize>,
}

fn parse_flags(rest: &[String]) -> anyhow::Result<Args> {
    let mut args = Args {
        config: None,
        seed: 1,
        out: PathBuf::from("out"),
        init: None,
        clips: None,
    };
    let mut it = rest.iter();
    while let Some(flag) = it.next() {
        let mut val = || {
            it.next()
                .map(|s| s.to_string())
                .with_context(|| format!("flag {flag} needs a value"))
        };
        match flag.as_str() {
            "--config" => args.config = Some(PathBuf::from(val()?)),
            "--seed" => args.seed = val()?.parse().context("--seed must be an integer")?,
            "--out" => args.out = PathBuf::from(val()?),
            "--init" => args.init = Some(PathBuf::from(val()?)),
            "--clips" => args.clips = Some(val()?.parse().context("--clips must be an integer")?),
            other => bail!("unknown flag '{other}'"),
        }
    }
    Ok(args)
}

fn load_experiment(args: &Args) -> anyhow::Result<(Experiment, String)> {
    let path = args.config.as_ref().context("--config is required")?;
    let cfg = Config::load(path)?;
    let exp = Experiment::from_config(&cfg)?;
    Ok((exp, cfg.echo()))
}

fn run() -> anyhow::Result<i32> {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some(cmd) = argv.first() else {
        eprint!("{USAGE}");
        return Ok(2);
    };
    let args = match parse_flags(&argv[1..]) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}\n");
            eprint!("{USAGE}");
            return Ok(2);
        }
    };
    match cmd.as_str() {
        "synth" => {
            let (exp, _) = load_experiment(&args)?;
            let n = args.clips.unwrap_or(exp.clips_train);
            let mut synth = exp.synth.clone();
            synth.seed ^= args.seed;
            let clips = spikeseg_core::data::synth_dataset(&synth, n)?;
            for clip in &clips {
                spikeseg_core::data::save_clip(&args.out.join(&clip.id), clip)?;
            }
            println!("wrote {} clips under {}", clips.len(), args.out.display());
        }
        "pretrain" => {
            let (exp, echo) = load_experiment(&args)?;
            let ckpt = pipeline::run_pretrain(&exp, &echo, args.seed, &args.out)?;
            println!("encoder checkpoint: {}", ckpt.display());
            println!("loss curve: {}", args.out.join("pretrain.csv").display());
        }
        "finetune" => {
            let (exp, echo) = load_experiment(&args)?;
            let outcome =
                pipeline::run_finetune(&exp, &echo, args.seed, &args.out, args.init.as_deref())?;
            println!("checkpoint: {}", outcome.ckpt.display());
            println!("held-out mIoU: {:.4}", outcome.eval_miou);
        }
        "eval" => {
            let (exp, _) = load_experiment(&args)?;
            let ckpt = args
                .init
                .as_ref()
                .context("eval needs --init <model.spkc>")?;
            let (miou, per_class) = pipeline::run_eval(&exp, args.seed, ckpt, &args.out)?;
            println!("class  IoU");
            for (k, v) in per_class.iter().enumerate() {
                match v {
                    Some(x) => println!("{k:>5}  {x:.4}"),
                    None => println!("{k:>5}  undefined"),
                }
            }
            println!("mIoU   {miou:.4}");
        }
        "profile" => {
            let (exp, _) = load_experiment(&args)?;
            let report = pipeline::run_profile(&exp, args.seed, &args.out)?;
            print!("{report}");
            println!("csv: {}", args.out.join("profile.csv").display());
        }
        "gradcheck" => {
            let results = pipeline::run_gradcheck(args.seed);
            let mut worst: f64 = 0.0;
            println!("{:<16} max relative error", "fragment");
            for (name, err) in &results {
                println!("{name:<16} {err:.3e}");
                worst = worst.max(*err);
            }
            if worst >= 1e-4 {
                bail!("gradient check failed: max relative error {worst:.3e} >= 1e-4");
            }
            println!("all fragments below 1e-4");
        }
        other => {
            eprintln!("unknown subcommand '{other}'\n");
            eprint!("{USAGE}");
            return Ok(2);
        }
    }
    Ok(0)
}

fn main() {
    match run() {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
