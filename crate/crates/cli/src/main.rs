//! `selgrad` command-line driver.
//!
//! Exit codes: 0 success, 1 stage failure, 2 configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use selgrad::attack::{attack_ab_compare, write_attack_curves};
use selgrad::experiments::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use selgrad::experiments::config::ExperimentConfig;
use selgrad::experiments::plot::{emit_plots, PlotData};
use selgrad::experiments::report::{read_plot_data, summary_text};
use selgrad::experiments::suite::{
    attack_configs, leakage_seed, prepare_dataset, run_experiment_suite, run_finetune, run_pretrain, write_run_report, LeakageSetup,
};
use selgrad::experiments::train::FinetuneMode;
use selgrad::leakage::{AMPLIFICATION_CSV_HEADER, LEAKAGE_CSV_HEADER};
use selgrad::selective::write_reports_csv;
use selgrad::Error;

#[derive(Parser)]
#[command(name = "selgrad", version, about = "Selective fine-tuning experiments for toy diffusion models")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Global {
    /// Config file of `section.key=value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Write the general and sensitive splits as CSV.
    Synth,
    /// Pretrain on the general split and save `checkpoints/pretrained.sgrd`.
    Pretrain,
    /// Fine-tune a pretrained checkpoint on the sensitive split.
    Finetune {
        /// Pretrained checkpoint; defaults to `<out>/checkpoints/pretrained.sgrd`.
        #[arg(long)]
        from: Option<PathBuf>,
        /// naive | projected; defaults to `finetune.mode`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Attack the naive and projected checkpoints.
    Attack {
        #[arg(long)]
        naive: Option<PathBuf>,
        #[arg(long)]
        projected: Option<PathBuf>,
    },
    /// Check the leakage bound and amplification on checkpoints.
    Leakage {
        /// Checkpoints to check; defaults to every stage under `<out>/checkpoints`.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Run every stage and write the full report.
    Suite,
    /// Re-render plots and print the summary of a finished run.
    Report,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Stage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Stage(other.to_string()),
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.out = out.clone();
    }
    for s in &g.set {
        cfg.apply_assignment(s).map_err(|e| Failure::Config(e.to_string()))?;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::Stage(format!("{}: {e}", path.display()))
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), Failure> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| io_fail(path, e))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_fail(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| io_fail(path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn checkpoint_for(cfg: &ExperimentConfig, explicit: Option<&PathBuf>, stage: &str) -> Result<Checkpoint, Failure> {
    let path = explicit.cloned().unwrap_or_else(|| cfg.out.join("checkpoints").join(format!("{stage}.sgrd")));
    let cp = load_checkpoint(&path)?;
    if cp.schedule != cfg.schedule {
        return Err(Failure::Config(format!("{}: schedule differs from the config", path.display())));
    }
    Ok(cp)
}

fn save(cfg: &ExperimentConfig, cp: &Checkpoint) -> Result<(), Failure> {
    let dir = cfg.out.join("checkpoints");
    fs::create_dir_all(&dir).map_err(|e| io_fail(&dir, e))?;
    let path = dir.join(format!("{}.sgrd", cp.stage));
    save_checkpoint(&path, cp)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.global)?;
    let t0 = Instant::now();
    match cli.verb {
        Verb::Synth => {
            let data = prepare_dataset(&cfg)?;
            write_with(&cfg.out.join("general.csv"), |w| data.general.write_csv(w))?;
            write_with(&cfg.out.join("sensitive.csv"), |w| data.sensitive.samples.write_csv(w))?;
            println!("general {} samples, sensitive {} samples", data.general.len(), data.sensitive.samples.len());
        }
        Verb::Pretrain => {
            let data = prepare_dataset(&cfg)?;
            let (cp, losses) = run_pretrain(&cfg, &data)?;
            save(&cfg, &cp)?;
            write_with(&cfg.out.join("pretrain_loss.csv"), |w| {
                writeln!(w, "step,loss")?;
                losses.iter().enumerate().try_for_each(|(i, l)| writeln!(w, "{i},{l}"))
            })?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!("loss {first:.4} -> {last:.4}");
            }
        }
        Verb::Finetune { from, mode } => {
            let mode: FinetuneMode = match mode {
                Some(m) => m.parse().map_err(|e: Error| Failure::Config(e.to_string()))?,
                None => cfg.finetune_mode,
            };
            let data = prepare_dataset(&cfg)?;
            let pre = checkpoint_for(&cfg, from.as_ref(), "pretrained")?;
            let (cp, result) = run_finetune(&cfg, &pre.model, &data, mode)?;
            save(&cfg, &cp)?;
            if mode == FinetuneMode::Projected {
                write_with(&cfg.out.join("projection.csv"), |w| write_reports_csv(w, &result.reports))?;
                println!("{} projected steps, {} skipped", result.reports.len(), result.skipped.len());
            }
        }
        Verb::Attack { naive, projected } => {
            let data = prepare_dataset(&cfg)?;
            let n = checkpoint_for(&cfg, naive.as_ref(), "naive")?;
            let p = checkpoint_for(&cfg, projected.as_ref(), "projected")?;
            let sched = cfg.schedule.build()?;
            let mut rows = String::from("target,naive_final,projected_final,ratio\n");
            for (i, a) in attack_configs(&cfg, &data)?.iter().enumerate() {
                let cmp = attack_ab_compare(&n.model, &p.model, &sched, a)?;
                println!("target {i}: naive {:.4} projected {:.4}", cmp.naive.final_copy_score, cmp.projected.final_copy_score);
                rows.push_str(&format!("{i},{},{},{}\n", cmp.naive.final_copy_score, cmp.projected.final_copy_score, cmp.ratio()));
                write_with(&cfg.out.join(format!("attack_curves_{i}.csv")), |w| write_attack_curves(w, &cmp))?;
            }
            write_with(&cfg.out.join("attack.csv"), |w| w.write_all(rows.as_bytes()))?;
        }
        Verb::Leakage { checkpoints } => {
            let data = prepare_dataset(&cfg)?;
            let setup = LeakageSetup::new(&cfg, &data)?;
            let paths: Vec<PathBuf> = if checkpoints.is_empty() {
                ["pretrained", "naive", "projected"]
                    .iter()
                    .map(|s| cfg.out.join("checkpoints").join(format!("{s}.sgrd")))
                    .filter(|p| p.exists())
                    .collect()
            } else {
                checkpoints
            };
            if paths.is_empty() {
                return Err(Failure::Stage(format!("no checkpoints under {}", cfg.out.join("checkpoints").display())));
            }
            let seed = leakage_seed(&cfg);
            let (mut leak, mut amp) = (format!("{LEAKAGE_CSV_HEADER}\n"), format!("stage,{AMPLIFICATION_CSV_HEADER}\n"));
            for path in &paths {
                let cp = checkpoint_for(&cfg, Some(path), "")?;
                let (rep, rows) = setup.evaluate(&cfg, &cp.model, seed)?;
                println!("{}: alpha {:.4} delta {:.4} mass {:.4} holds {}", cp.stage, rep.alpha, rep.delta, rep.model_mass, rep.holds);
                leak.push_str(&format!("{}\n", rep.csv_row(&cp.stage)));
                for r in rows {
                    amp.push_str(&format!("{},{}\n", cp.stage, r.csv_row()));
                }
            }
            write_with(&cfg.out.join("leakage.csv"), |w| w.write_all(leak.as_bytes()))?;
            write_with(&cfg.out.join("amplification.csv"), |w| w.write_all(amp.as_bytes()))?;
        }
        Verb::Suite => {
            let report = run_experiment_suite(&cfg)?;
            for p in write_run_report(&report, &cfg.out)? {
                println!("wrote {}", p.display());
            }
            let plots = emit_plots(&PlotData::from_report(&report), &cfg.out.join("plots"))?;
            for p in &plots.written {
                println!("wrote {}", p.display());
            }
            if let Some(n) = &plots.notice {
                println!("plots: {n}");
            }
            for (stage, secs) in &report.timings {
                println!("{stage:<20} {secs:>8.1}s");
            }
            print!("{}", summary_text(&cfg.out)?);
            if report.failed() {
                return Err(Failure::Stage("one or more stages failed; see summary.csv".into()));
            }
        }
        Verb::Report => {
            let data = read_plot_data(&cfg.out)?;
            let plots = emit_plots(&data, &cfg.out.join("plots"))?;
            for p in &plots.written {
                println!("wrote {}", p.display());
            }
            if let Some(n) = &plots.notice {
                println!("plots: {n}");
            }
            print!("{}", summary_text(&cfg.out)?);
        }
    }
    eprintln!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Stage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
    }
}
