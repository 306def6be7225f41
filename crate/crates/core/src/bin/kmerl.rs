use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use kmerl::config::{ClientKind, GridAxis, RunConfig};
use kmerl::eval::SweepMode;
use kmerl::numerics::GradCheckConfig;
use kmerl::pipeline::{
    gradcheck_total_loss, mine, record_run, run_grid, run_lead_sweep, run_linear_probe, run_pretrain,
    run_seen_unseen, run_zero_shot, synth, RunLayout,
};

#[derive(Parser)]
#[command(name = "kmerl", version, about = "ECG-report pretraining with mined cardiac entities")]
struct Cli {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. --set pretrain.batch_size=8.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory holding data/, knowledge/, pretrain/ and eval/.
    #[arg(long, alias = "out", global = true, default_value = "runs/default")]
    run: PathBuf,
    /// Seed for model init, pretraining and probing (not the synthetic data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Mining client.
    #[arg(long, value_enum, global = true)]
    client: Option<Client>,
    /// Zero-shot and probe evaluation on the first k leads only.
    #[arg(long, global = true, value_name = "K")]
    leads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Client {
    Llm,
    Rule,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    ZeroShot,
    Probe,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus into <run>/data.
    Synth,
    /// Mine entities and labels from the train and valid reports.
    Mine,
    /// Pretrain and write checkpoints into <run>/pretrain.
    Pretrain,
    /// Zero-shot classification of the test split.
    Zeroshot {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Linear probe on frozen features.
    Linprobe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fraction of the training split, e.g. 0.01, 0.1 or 1.0.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Evaluate with the first k leads for k = 1..12.
    Leadsweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "zero-shot")]
        mode: Mode,
        /// Zero the missing leads instead of dropping them.
        #[arg(long)]
        zero_pad: bool,
    },
    /// Split class names into seen and unseen by similarity to the vocabulary.
    SeenUnseen {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of the full loss on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
    },
    /// One full run per point of a config grid, in <run>/ablate/<point>.
    Ablate {
        /// Axis KEY=V1,V2,...; repeat for a product, e.g.
        /// --grid mask_ratio=0.25,0.5 --grid min_masked_leads=9,10.
        #[arg(long, required = true)]
        grid: Vec<String>,
    },
    /// synth, mine, pretrain and zeroshot in sequence.
    Run,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Mine => "mine",
            Command::Pretrain => "pretrain",
            Command::Zeroshot { .. } => "zeroshot",
            Command::Linprobe { .. } => "linprobe",
            Command::Leadsweep { .. } => "leadsweep",
            Command::SeenUnseen { .. } => "seen-unseen",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Ablate { .. } => "ablate",
            Command::Run => "run",
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> kmerl::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> kmerl::Result<bool> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.model.init_seed = s;
        cfg.pretrain.seed = s;
        cfg.eval.probe.seed = s;
    }
    if let Some(c) = cli.client {
        cfg.mining.client = match c {
            Client::Llm => ClientKind::Llm,
            Client::Rule => ClientKind::Rule,
        };
    }
    if cli.leads.is_some() {
        cfg.eval.leads = cli.leads;
    }
    if let Command::Linprobe { fraction: Some(f), .. } = cli.command {
        cfg.eval.probe.fraction = f;
    }
    cfg.validate()?;
    let layout = RunLayout::new(&cli.run);
    let ckpt = |c: Option<PathBuf>| c.unwrap_or_else(|| layout.checkpoint());
    if !matches!(cli.command, Command::Gradcheck { .. }) {
        record_run(&cfg, &layout, cli.command.name())?;
    }

    match cli.command {
        Command::Synth => {
            let m = synth(&cfg, &layout)?;
            println!("wrote {} records to {}", m.len(), layout.data().display());
        }
        Command::Mine => {
            let out = mine(&cfg, &layout)?;
            println!("{} entities: {}", out.vocabulary.len(), out.vocabulary.entities.join(", "));
        }
        Command::Pretrain => {
            let start = Instant::now();
            let out = run_pretrain(&cfg, &layout, None)?;
            let last = out.history.last().map_or(f64::NAN, |m| m.loss_total);
            println!(
                "{} steps in {:.1?}, final loss {last:.4}, best valid loss {:?}",
                out.history.len(),
                start.elapsed(),
                out.best_valid_loss
            );
        }
        Command::Zeroshot { checkpoint } => print_json(&run_zero_shot(&cfg, &layout, &ckpt(checkpoint))?)?,
        Command::Linprobe { checkpoint, .. } => {
            print_json(&run_linear_probe(&cfg, &layout, &ckpt(checkpoint))?.report)?;
        }
        Command::Leadsweep { checkpoint, mode, zero_pad } => {
            let mode = match mode {
                Mode::ZeroShot => SweepMode::ZeroShot,
                Mode::Probe => SweepMode::Probe,
            };
            for r in run_lead_sweep(&cfg, &layout, &ckpt(checkpoint), mode, zero_pad)? {
                println!("k={:<2} macro AUC {:?}", r.leads.len(), r.macro_auc);
            }
        }
        Command::SeenUnseen { checkpoint } => print_json(&run_seen_unseen(&cfg, &layout, &ckpt(checkpoint))?)?,
        Command::Gradcheck { seed, threshold } => {
            let start = Instant::now();
            let r = gradcheck_total_loss(seed, GradCheckConfig::default())?;
            let ok = r.max_rel_error < threshold;
            println!(
                "{}: max relative error {:.3e} over {} coordinates ({}) in {:.1?}",
                if ok { "PASS" } else { "FAIL" },
                r.max_rel_error,
                r.coords_checked,
                r.worst_param.as_deref().unwrap_or("-"),
                start.elapsed()
            );
            return Ok(ok);
        }
        Command::Ablate { grid } => {
            let axes = grid.iter().map(|g| GridAxis::parse(g)).collect::<kmerl::Result<Vec<_>>>()?;
            for r in run_grid(&cfg, &layout, &axes)? {
                println!("{}: loss {:.4} macro AUC {:?}", r.root.display(), r.final_loss, r.zero_shot.macro_auc);
            }
        }
        Command::Run => {
            synth(&cfg, &layout)?;
            mine(&cfg, &layout)?;
            run_pretrain(&cfg, &layout, None)?;
            print_json(&run_zero_shot(&cfg, &layout, &layout.checkpoint())?)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
