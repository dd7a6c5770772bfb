//! `aclab`: batch experiment driver for the off-policy actor-critic lab.
//!
//! Subcommands: `mdp gen`, `mdp solve`, `critic check`, `critic run`,
//! `critic oracle`, `actor run`, `pipeline run`, `bounds report`. Every
//! command reads JSON configs, writes CSV/JSON into the output directory,
//! and prints a one-line summary. Exit codes: 0 success, 1 validation
//! error, 2 stability/assumption error.

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use aclab_core::actor::{run_actor_exact, ActorRule, ActorRuleKind, StepsizeMode};
use aclab_core::chain::{sample_trajectory, stationary_distribution, MixingInfo, StartState};
use aclab_core::critic::{
    bias_bound, pbe_fixed_point, q_fixed_point, stability_report, td_run,
    theoretical_bound_curve, CriticConfig, IsFactorTable, Stepsize, CSV_HEADER,
};
use aclab_core::error::{Error, Result};
use aclab_core::features::{spectral_info, FeatureMap, WeightMatrixInfo};
use aclab_core::mdp::{exact_q, gen_garnet, value_iteration, Mdp, Policy};
use aclab_core::pipeline::{bound_report, run_pipeline, PipelineConfig, PipelineRun};

#[derive(Parser)]
#[command(name = "aclab", version, about = "Off-policy actor-critic laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-MDP utilities.
    Mdp {
        #[command(subcommand)]
        command: MdpCommand,
    },
    /// Off-policy TD critic: stability checks, runs, and exact oracles.
    Critic {
        #[command(subcommand)]
        command: CriticCommand,
    },
    /// Exact-critic actor runs.
    Actor {
        #[command(subcommand)]
        command: ActorCommand,
    },
    /// End-to-end actor-critic pipeline.
    Pipeline {
        #[command(subcommand)]
        command: PipelineCommand,
    },
    /// Bound tables for finished pipeline runs.
    Bounds {
        #[command(subcommand)]
        command: BoundsCommand,
    },
}

#[derive(Subcommand)]
enum MdpCommand {
    /// Generate a random MDP with the given branching factor.
    Gen {
        #[arg(long)]
        states: usize,
        #[arg(long)]
        actions: usize,
        #[arg(long)]
        branching: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Solve an MDP: optimal Q/policy, plus evaluation of a given policy.
    Solve {
        #[arg(long)]
        mdp: PathBuf,
        /// `uniform`, `greedy`, or a policy JSON path.
        #[arg(long)]
        policy: Option<String>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(short, long, default_value = ".")]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Lambda,
    TwoSided,
    Vanilla,
    OnPolicy,
}

/// Options shared by the critic subcommands.
#[derive(Args)]
struct CriticCommon {
    #[arg(long)]
    mdp: PathBuf,
    /// `uniform`, `greedy`, or a policy JSON path.
    #[arg(long, default_value = "uniform")]
    behavior: String,
    /// Target policy: `uniform`, `greedy`, or a policy JSON path.
    #[arg(long, default_value = "greedy")]
    target: String,
    #[arg(long, value_enum, default_value_t = SchemeArg::Lambda)]
    scheme: SchemeArg,
    /// Lambda level for the lambda-averaged scheme (uniform across states).
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Upper truncation level for the two-sided scheme.
    #[arg(long, default_value_t = 1.5)]
    u: f64,
    /// Bootstrapping parameter: `auto` picks the smallest stable value.
    #[arg(long, default_value = "auto")]
    n: String,
    /// `tabular` or a feature JSON path.
    #[arg(long, default_value = "tabular")]
    features: String,
}

#[derive(Subcommand)]
enum CriticCommand {
    /// Stability report: contraction factors, Condition-3 checks,
    /// required n, and the variance parameter L.
    Check {
        #[command(flatten)]
        common: CriticCommon,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// One stochastic TD run over a sampled behavior trajectory.
    Run {
        #[command(flatten)]
        common: CriticCommon,
        #[arg(long)]
        alpha: f64,
        /// Switches to the diminishing schedule alpha/(k+h).
        #[arg(long)]
        h: Option<f64>,
        #[arg(long, default_value_t = 10_000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fixed start state for the trajectory (default: stationary draw).
        #[arg(long)]
        start_state: Option<usize>,
        #[arg(short, long, default_value = ".")]
        output: PathBuf,
    },
    /// Exact quantities: fixed points, PBE weights, and bias bounds.
    Oracle {
        #[command(flatten)]
        common: CriticCommon,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ActorCommand {
    /// Exact-critic actor run with per-step bound terms.
    Run {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long, value_enum)]
        rule: RuleArg,
        #[arg(long, value_enum, default_value_t = ModeArg::Increasing)]
        mode: ModeArg,
        #[arg(long, default_value_t = 10.0)]
        beta: f64,
        #[arg(short = 'T', long, default_value_t = 30)]
        horizon: usize,
        #[arg(short, long, default_value = ".")]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Npg,
    Boltzmann,
    EpsGreedy,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Constant,
    Increasing,
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Run the full pipeline from a JSON config (flags override fields).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Replication seeds, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        outer: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
}

#[derive(Subcommand)]
enum BoundsCommand {
    /// Rebuild the term-by-term bound table from a run directory.
    Report {
        /// Directory containing `run.json` from `pipeline run`.
        #[arg(long)]
        run: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Mdp { command } => match command {
            MdpCommand::Gen {
                states,
                actions,
                branching,
                seed,
                gamma,
                output,
            } => {
                let mdp = gen_garnet(states, actions, branching, gamma, seed)?;
                mdp.save(&output)?;
                println!(
                    "wrote {} ({states} states, {actions} actions, branching {branching}, gamma {gamma})",
                    output.display()
                );
                Ok(())
            }
            MdpCommand::Solve {
                mdp,
                policy,
                tol,
                output,
            } => cmd_mdp_solve(&mdp, policy.as_deref(), tol, &output),
        },
        Command::Critic { command } => match command {
            CriticCommand::Check { common, output } => cmd_critic_check(&common, output.as_deref()),
            CriticCommand::Run {
                common,
                alpha,
                h,
                iters,
                seed,
                start_state,
                output,
            } => cmd_critic_run(&common, alpha, h, iters, seed, start_state, &output),
            CriticCommand::Oracle { common, output } => {
                cmd_critic_oracle(&common, output.as_deref())
            }
        },
        Command::Actor { command } => match command {
            ActorCommand::Run {
                mdp,
                rule,
                mode,
                beta,
                horizon,
                output,
            } => cmd_actor_run(&mdp, rule, mode, beta, horizon, &output),
        },
        Command::Pipeline { command } => match command {
            PipelineCommand::Run {
                config,
                output,
                seeds,
                outer,
                iters,
                alpha,
            } => cmd_pipeline_run(&config, output, seeds, outer, iters, alpha),
        },
        Command::Bounds { command } => match command {
            BoundsCommand::Report { run, output } => cmd_bounds_report(&run, output.as_deref()),
        },
    }
}

fn resolve_policy(spec: &str, mdp: &Mdp, tol: f64) -> Result<Policy> {
    match spec {
        "uniform" => Ok(Policy::uniform(mdp.n_states(), mdp.n_actions())),
        "greedy" => Ok(value_iteration(mdp, tol)?.1),
        path => {
            let p = Policy::load(Path::new(path))?;
            if p.n_states() != mdp.n_states() || p.n_actions() != mdp.n_actions() {
                return Err(Error::DimensionMismatch(format!(
                    "policy file {path} does not match the MDP shape"
                )));
            }
            Ok(p)
        }
    }
}

fn resolve_features(spec: &str, mdp: &Mdp) -> Result<FeatureMap> {
    match spec {
        "tabular" => Ok(FeatureMap::tabular(mdp.n_pairs())),
        path => FeatureMap::load(Path::new(path), mdp.n_pairs()),
    }
}

struct CriticSetup {
    mdp: Mdp,
    behavior: Policy,
    target: Policy,
    factors: IsFactorTable,
    features: FeatureMap,
    winfo: WeightMatrixInfo,
    mixing: MixingInfo,
    n: usize,
}

fn critic_setup(common: &CriticCommon) -> Result<CriticSetup> {
    let mdp = Mdp::load(&common.mdp)?;
    let behavior = resolve_policy(&common.behavior, &mdp, 1e-10)?;
    let target = resolve_policy(&common.target, &mdp, 1e-10)?;
    let features = resolve_features(&common.features, &mdp)?;
    let mixing = stationary_distribution(&mdp, &behavior)?;
    let winfo = spectral_info(&features, &mixing, &behavior)?;
    let ns = mdp.n_states();
    let factors = match common.scheme {
        SchemeArg::Lambda => IsFactorTable::lambda_averaged(
            &target,
            &behavior,
            &DVector::from_element(ns, common.lambda),
        )?,
        SchemeArg::TwoSided => {
            IsFactorTable::two_sided(&target, &behavior, &DVector::from_element(ns, common.u))?
        }
        SchemeArg::Vanilla => IsFactorTable::vanilla(&target, &behavior)?,
        SchemeArg::OnPolicy => IsFactorTable::on_policy(&behavior),
    };
    let n = match common.n.as_str() {
        "auto" => stability_report(&factors, &winfo, mdp.gamma(), 1)?
            .n_required
            .ok_or_else(|| {
                Error::Stability("no bootstrapping parameter below the cap is stable".into())
            })?,
        text => text
            .parse::<usize>()
            .map_err(|_| Error::InvalidInput(format!("--n must be `auto` or an integer, got {text}")))?,
    };
    Ok(CriticSetup {
        mdp,
        behavior,
        target,
        factors,
        features,
        winfo,
        mixing,
        n,
    })
}

fn cmd_mdp_solve(mdp_path: &Path, policy: Option<&str>, tol: f64, output: &Path) -> Result<()> {
    if tol <= 0.0 {
        return Err(Error::InvalidInput("--tol must be positive".into()));
    }
    let mdp = Mdp::load(mdp_path)?;
    let (q_star, pi_star) = value_iteration(&mdp, tol)?;
    std::fs::create_dir_all(output)?;
    write_q_csv(&output.join("q_star.csv"), &mdp, &q_star)?;
    std::fs::write(output.join("pi_star.json"), pi_star.to_json_string()?)?;
    let mut summary = format!(
        "solved {}: max Q* = {:.6}",
        mdp_path.display(),
        q_star.max_abs()
    );
    if let Some(spec) = policy {
        let pi = resolve_policy(spec, &mdp, tol)?;
        let q_pi = exact_q(&mdp, &pi)?;
        write_q_csv(&output.join("q_policy.csv"), &mdp, &q_pi)?;
        summary.push_str(&format!(
            ", ||Q* - Q^pi||_inf = {:.6}",
            q_star.linf_distance(&q_pi)
        ));
    }
    println!("{summary} -> {}", output.display());
    Ok(())
}

fn write_q_csv(path: &Path, mdp: &Mdp, q: &aclab_core::mdp::QTable) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{CSV_HEADER}")?;
    writeln!(out, "s,a,q")?;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            writeln!(out, "{s},{a},{}", q.get(s, a))?;
        }
    }
    Ok(())
}

fn cmd_critic_check(common: &CriticCommon, output: Option<&Path>) -> Result<()> {
    let setup = critic_setup(common)?;
    let report = stability_report(&setup.factors, &setup.winfo, setup.mdp.gamma(), setup.n)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = output {
        std::fs::write(path, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_critic_run(
    common: &CriticCommon,
    alpha: f64,
    h: Option<f64>,
    iters: usize,
    seed: u64,
    start_state: Option<usize>,
    output: &Path,
) -> Result<()> {
    let setup = critic_setup(common)?;
    let stepsize = match h {
        Some(h) => Stepsize::Diminishing { alpha, h },
        None => Stepsize::Constant { alpha },
    };
    let config = CriticConfig {
        n: setup.n,
        iterations: iters,
        stepsize,
        w0: None,
        seed,
    };
    let start = start_state.map_or(StartState::Stationary, StartState::Fixed);
    let trajectory = sample_trajectory(
        &setup.mdp,
        &setup.behavior,
        iters + setup.n,
        seed,
        start,
    )?;
    let mut run = td_run(
        &setup.mdp,
        &setup.behavior,
        &setup.factors,
        &setup.features,
        &setup.winfo,
        &config,
        &trajectory,
    )?;
    let report = stability_report(&setup.factors, &setup.winfo, setup.mdp.gamma(), setup.n)?;
    match theoretical_bound_curve(
        &config,
        &report,
        setup.winfo.lambda_min(),
        &setup.mixing,
        &config.initial_weights(setup.features.dim())?,
        &run.fixed_point,
    ) {
        Ok(curve) => run.bounds = Some(curve),
        Err(e) => log::warn!("bound curve unavailable: {e}"),
    }
    std::fs::create_dir_all(output)?;
    let path = output.join("critic.csv");
    run.write_csv(&path)?;
    std::fs::write(output.join("factors.json"), setup.factors.to_json_string()?)?;
    println!(
        "critic run: n = {}, K = {iters}, final ||w - w*||^2 = {:.6e} -> {}",
        setup.n,
        run.errors.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn cmd_critic_oracle(common: &CriticCommon, output: Option<&Path>) -> Result<()> {
    let setup = critic_setup(common)?;
    let gamma = setup.mdp.gamma();
    let report = stability_report(&setup.factors, &setup.winfo, gamma, setup.n)?;
    let q_cr = q_fixed_point(&setup.mdp, &setup.behavior, &setup.factors)?;
    let w = pbe_fixed_point(
        &setup.mdp,
        &setup.behavior,
        &setup.factors,
        &setup.features,
        &setup.winfo,
        setup.n,
    )?;
    let bias = bias_bound(
        &setup.mdp,
        &setup.behavior,
        &setup.target,
        &setup.factors,
        &setup.features,
        &setup.winfo,
        setup.n,
    )?;
    let doc = serde_json::json!({
        "stability": report,
        "q_fixed_point": (0..setup.mdp.n_states())
            .map(|s| (0..setup.mdp.n_actions()).map(|a| q_cr.get(s, a)).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
        "pbe_weights": w.iter().copied().collect::<Vec<f64>>(),
        "bias_bound": bias,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    if let Some(path) = output {
        std::fs::write(path, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_actor_run(
    mdp_path: &Path,
    rule: RuleArg,
    mode: ModeArg,
    beta: f64,
    horizon: usize,
    output: &Path,
) -> Result<()> {
    let mdp = Mdp::load(mdp_path)?;
    let rule = ActorRule {
        kind: match rule {
            RuleArg::Npg => ActorRuleKind::Npg,
            RuleArg::Boltzmann => ActorRuleKind::Boltzmann,
            RuleArg::EpsGreedy => ActorRuleKind::EpsGreedy,
        },
        mode: match mode {
            ModeArg::Constant => StepsizeMode::Constant,
            ModeArg::Increasing => StepsizeMode::Increasing,
        },
        beta,
    };
    let run = run_actor_exact(&mdp, &rule, horizon)?;
    std::fs::create_dir_all(output)?;
    run.write_csv(&output.join("actor.csv"))?;
    std::fs::write(
        output.join("final_policy.json"),
        run.final_policy.to_json_string()?,
    )?;
    println!(
        "actor run: T = {horizon}, final ||Q* - Q^pi||_inf = {:.6e} -> {}",
        run.final_error(),
        output.join("actor.csv").display()
    );
    Ok(())
}

fn cmd_pipeline_run(
    config: &Path,
    output: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    outer: Option<usize>,
    iters: Option<usize>,
    alpha: Option<f64>,
) -> Result<()> {
    let text = std::fs::read_to_string(config)?;
    let mut cfg: PipelineConfig = serde_json::from_str(&text)?;
    if let Some(o) = output {
        cfg.output_dir = o;
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(t) = outer {
        cfg.outer_iterations = t;
    }
    if let Some(k) = iters {
        cfg.critic.iterations = k;
    }
    if let Some(a) = alpha {
        cfg.critic.alpha = a;
    }
    let run = run_pipeline(&cfg)?;
    run.write_outputs(&cfg.output_dir)?;
    println!(
        "pipeline: {} replications x T = {}, {} samples each, mean final error = {:.6e} -> {}",
        run.seed_runs.len(),
        cfg.outer_iterations,
        run.samples_per_seed,
        run.mean_final_error(),
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_bounds_report(run_dir: &Path, output: Option<&Path>) -> Result<()> {
    let run_path = if run_dir.is_dir() {
        run_dir.join("run.json")
    } else {
        run_dir.to_path_buf()
    };
    let run: PipelineRun = serde_json::from_str(&std::fs::read_to_string(&run_path)?)?;
    let report = bound_report(&run)?;
    let out_dir = output.unwrap_or_else(|| run_path.parent().unwrap_or(Path::new(".")));
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("bounds.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "bounds: total = {:.6e}, measured = {:.6e}, ratio = {:.4}",
        report.total, report.measured_mean_final_error, report.ratio_measured_over_bound
    );
    Ok(())
}
