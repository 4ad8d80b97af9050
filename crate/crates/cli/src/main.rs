//! `p3o` command-line front end.
//!
//! Exit codes: 0 on success, 1 on validation or other failures, 2 on I/O or
//! format errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use p3o_core::bench::{baseline_compare, rate_bench, single_run, Experiment, ExperimentConfig};
use p3o_core::oracle::{concentrability, identification_check};
use p3o_core::simulate::generate;
use p3o_core::{instances, model::rank_diagnostics, BehaviorPolicy, Error, HistoryClass, TabularPomdp, TargetPolicy};

#[derive(Parser)]
#[command(name = "p3o", version, about = "Pessimistic policy optimization for confounded tabular POMDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model file.
    Validate { model: PathBuf },
    /// Generate an offline dataset under a behavior policy.
    Simulate {
        model: PathBuf,
        behavior: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the true value with the bridge-identified value.
    IdentifyCheck {
        model: PathBuf,
        behavior: PathBuf,
        policy: PathBuf,
        /// Largest accepted gap.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Run policy selection once.
    P3o(ConfigArg),
    /// Sweep sample sizes and seeds, fit the log-log rate.
    RateBench(ConfigArg),
    /// Paired comparison against the confounder-ignoring baseline.
    BaselineCompare(ConfigArg),
    /// Write a built-in instance (model.json, behavior.json, and a uniform policy.json).
    Instance {
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (JSON).
    #[arg(required_unless_present = "config_flag")]
    config: Option<PathBuf>,
    #[arg(long = "config", conflicts_with = "config")]
    config_flag: Option<PathBuf>,
}

impl ConfigArg {
    fn path(&self) -> &Path {
        self.config.as_deref().or(self.config_flag.as_deref()).expect("clap enforces one source")
    }

    fn experiment(&self) -> p3o_core::Result<Experiment> {
        Experiment::new(ExperimentConfig::load(self.path())?)
    }
}

fn run(cmd: Command) -> p3o_core::Result<bool> {
    match cmd {
        Command::Validate { model } => {
            let m = TabularPomdp::load(&model)?;
            println!(
                "ok: |S|={} |O|={} |A|={} H={} gamma={} fingerprint={}",
                m.n_states,
                m.n_obs,
                m.n_actions,
                m.horizon,
                m.gamma,
                m.fingerprint()
            );
            Ok(true)
        }
        Command::Simulate {
            model,
            behavior,
            n,
            seed,
            out,
        } => {
            let m = TabularPomdp::load(&model)?;
            let b = BehaviorPolicy::load(&behavior)?;
            b.validate(&m)?;
            if n == 0 {
                return Err(Error::InvalidArgument("--n must be positive".into()));
            }
            let d = generate(&m, &b, n, seed);
            d.save(&out)?;
            println!("wrote {} trajectories to {}", d.len(), out.display());
            Ok(true)
        }
        Command::IdentifyCheck {
            model,
            behavior,
            policy,
            tol,
        } => {
            let m = TabularPomdp::load(&model)?;
            let b = BehaviorPolicy::load(&behavior)?;
            b.validate(&m)?;
            let p = TargetPolicy::load(&policy)?;
            p.validate(&m)?;
            let ranks = rank_diagnostics(&m, &b);
            for (h, ok) in ranks.rank_ok.iter().enumerate() {
                println!("step {} rank_ok={ok}", h + 1);
            }
            let check = identification_check(&m, &b, &p)?;
            let cov = concentrability(&m, &b, &p)?;
            println!("true_value {:.12}", check.lhs);
            println!("identified {:.12}", check.rhs);
            println!("gap {:.3e}", check.gap);
            println!("concentrability {}", cov.c_pi);
            Ok(check.gap <= tol)
        }
        Command::P3o(arg) => {
            let exp = arg.experiment()?;
            let run = single_run(&exp)?;
            run.write(&exp.config.output_dir)?;
            print!("{}", run.report.to_table());
            Ok(true)
        }
        Command::RateBench(arg) => {
            let exp = arg.experiment()?;
            let rep = rate_bench(&exp);
            rep.write(&exp.config.output_dir)?;
            print!("{}", rep.medians_csv());
            if let Some(fit) = &rep.fit {
                println!("slope {}", fit.slope.map_or("n/a".into(), |s| format!("{s:.4}")));
            }
            println!(
                "resolution_floor {} below_floor_at_largest_n {}",
                rep.resolution_floor, rep.below_floor_at_largest_n
            );
            Ok(true)
        }
        Command::BaselineCompare(arg) => {
            let exp = arg.experiment()?;
            let rep = baseline_compare(&exp);
            rep.write(&exp.config.output_dir)?;
            print!("{}", rep.summary_csv());
            Ok(true)
        }
        Command::Instance { name, seed, out } => {
            let inst = instances::build(&name, seed)?;
            std::fs::create_dir_all(&out)?;
            inst.model.save(out.join("model.json"))?;
            inst.behavior.save(out.join("behavior.json"))?;
            TargetPolicy::uniform(&inst.model, HistoryClass::Reactive).save(out.join("policy.json"))?;
            println!("wrote {} to {}", inst.name, out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_format() { 2 } else { 1 })
        }
    }
}
