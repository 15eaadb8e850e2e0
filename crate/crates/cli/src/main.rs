use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use koopman_tower::edmd;
use koopman_tower::format::{self, PredictorFile};
use koopman_tower::harness::pipeline::{self, load_scenario_model, predictor_file_name, HELDOUT_FILE};
use koopman_tower::harness::{collect, identify, run_scenario, ControllerKind, RunConfig, ScenarioKind};
use koopman_tower::qp::{self, kkt_check};
use koopman_tower::{Error, QpSettings, QpStatus, Result};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "koopman-tower", version, about = "Koopman lifted predictors and predictive control for a simulated flexible tower")]
struct Cli {
    /// Run configuration (`key = value` lines under `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for excitation, pulse timing and noise, overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the open-loop excitation suite and write trajectory CSVs.
    Collect,
    /// Fit lifted predictors from collected trajectories.
    Identify {
        /// Directory holding the `train_*.csv` and held-out files [default: the output directory].
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Design the lifted-state LQR for a predictor.
    DesignLqr {
        /// Predictor file [default: <out>/predictor_s<stabilization_delays>.txt].
        #[arg(long)]
        predictor: Option<PathBuf>,
    },
    /// Run a closed-loop scenario and write its CSV and metrics.
    Run {
        /// Predictor file read by the controller [default: chosen by scenario and controller].
        #[arg(long)]
        predictor: Option<PathBuf>,
        /// Scenario, overriding `[scenario] kind`.
        #[arg(long)]
        scenario: Option<String>,
        /// Controller, overriding `[scenario] controller`.
        #[arg(long)]
        controller: Option<String>,
        /// Run every scenario in parallel: LQR for regulation, KMPC for tracking
        /// unless `--controller` is given.
        #[arg(long, conflicts_with_all = ["scenario", "predictor"])]
        all: bool,
    },
    /// Multi-step prediction error of a predictor on a trajectory CSV.
    EvalPredictor {
        /// Predictor file [default: <out>/predictor_s<stabilization_delays>.txt].
        #[arg(long)]
        predictor: Option<PathBuf>,
        /// Trajectory CSV [default: <out>/heldout.csv].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Prediction horizon, overriding `[identify] eval_horizon`.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Solve a QP given as text: `n c`, then H, f, G, b_min and b_max.
    SolveQp {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        eps: Option<f64>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_entries(entries: &[(String, String)]) {
    print!("{}", format::key_value_text(entries));
}

fn cmd_collect(cfg: &RunConfig) -> Result<()> {
    let data = collect(cfg)?;
    let paths = pipeline::write_collected(cfg, &data, &cfg.out_dir())?;
    let mut entries = vec![("files".to_string(), paths.len().to_string())];
    for d in cfg.identified_delays() {
        entries.push((format!("pairs_s{d}"), data.pairs(koopman_tower::LiftingSpec::new(d)).to_string()));
    }
    print_entries(&entries);
    Ok(())
}

fn cmd_identify(cfg: &RunConfig, data_dir: &Path) -> Result<()> {
    let data = pipeline::read_collected(data_dir)?;
    let out = cfg.out_dir();
    for d in cfg.identified_delays() {
        let id = identify(cfg, &data, koopman_tower::LiftingSpec::new(d))?;
        PredictorFile::new(id.predictor.clone()).write(&out.join(predictor_file_name(d)))?;
        let report = id.report();
        format::write_text(&out.join(format!("identify_s{d}.txt")), &format::key_value_text(&report))?;
        print_entries(&report);
    }
    Ok(())
}

fn default_predictor(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir().join(predictor_file_name(cfg.lifting.stabilization_delays))
}

fn read_predictor(path: &Path) -> Result<PredictorFile> {
    if !path.exists() {
        return Err(Error::Config(format!("predictor file {} does not exist; run identify first", path.display())));
    }
    PredictorFile::read(path)
}

fn cmd_design_lqr(cfg: &RunConfig, path: &Path) -> Result<()> {
    let pred = read_predictor(path)?.predictor;
    let design = pipeline::design_lqr(cfg, &pred)?;
    let d = pred.spec.delays;
    let out = cfg.out_dir();
    let file = PredictorFile { predictor: pred.clone(), gain: Some(design.k.clone()), riccati: Some(design.p.clone()) };
    file.write(&out.join(pipeline::lqr_file_name(d)))?;
    let report = pipeline::lqr_report(&design, &pred);
    format::write_text(&out.join(format!("lqr_s{d}_report.txt")), &format::key_value_text(&report))?;
    print_entries(&report);
    Ok(())
}

fn run_one(cfg: &RunConfig) -> Result<Vec<(String, String)>> {
    if cfg.scenario.kind == ScenarioKind::Collect {
        cmd_collect(cfg)?;
        return Ok(Vec::new());
    }
    let model = load_scenario_model(cfg)?;
    let outcome = run_scenario(cfg, model.as_ref())?;
    outcome.write(&cfg.out_dir())?;
    let mut entries = outcome.controlled.summary();
    if let Some(open) = &outcome.uncontrolled {
        entries.extend(open.metrics.entries().into_iter().map(|(k, v)| (format!("uncontrolled_{k}"), v)));
    }
    Ok(entries)
}

fn cmd_run_all(cfg: &RunConfig, controller: Option<ControllerKind>) -> Result<()> {
    let configs: Vec<RunConfig> = ScenarioKind::ALL
        .into_iter()
        .filter(|k| *k != ScenarioKind::Collect)
        .map(|kind| {
            let mut c = cfg.clone();
            c.scenario.kind = kind;
            c.scenario.controller = controller.unwrap_or(if kind.is_tracking() { ControllerKind::Kmpc } else { ControllerKind::Lqr });
            c
        })
        .collect();
    let results: Vec<Result<Vec<(String, String)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run_one(c))).collect();
        handles.into_iter().map(|h| h.join().expect("scenario thread panicked")).collect()
    });
    for r in results {
        print_entries(&r?);
        println!();
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, path: &Path, data: &Path, horizon: usize) -> Result<()> {
    let pred = read_predictor(path)?.predictor;
    let rows = format::read_trajectory(data)?;
    let eval = edmd::evaluate(&pred, &format::rows_to_trajectory(&rows), horizon)?;
    let mut entries = vec![
        ("predictor".to_string(), path.display().to_string()),
        ("data".to_string(), data.display().to_string()),
        ("delays".to_string(), pred.spec.delays.to_string()),
    ];
    entries.extend(pipeline::evaluation_report(&eval));
    format::write_text(&cfg.out_dir().join(format!("eval_s{}.txt", pred.spec.delays)), &format::key_value_text(&entries))?;
    print_entries(&entries);
    Ok(())
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(",")
}

fn cmd_solve_qp(path: &Path, max_iter: Option<usize>, eps: Option<f64>) -> Result<()> {
    let problem = format::parse_qp_text(&format::read_text(path)?, &path.display().to_string())?;
    let mut settings = QpSettings::default();
    if let Some(m) = max_iter {
        settings.max_iter = m;
    }
    if let Some(e) = eps {
        settings.eps_abs = e;
        settings.eps_rel = e;
    }
    let sol = qp::solve(&problem, None, &settings)?;
    let kkt = kkt_check(&problem, &sol.x, &sol.y)?;
    print_entries(&[
        ("status".to_string(), sol.status.as_str().to_string()),
        ("iterations".to_string(), sol.iterations.to_string()),
        ("objective".to_string(), sol.objective.to_string()),
        ("primal_residual".to_string(), sol.primal_residual.to_string()),
        ("dual_residual".to_string(), sol.dual_residual.to_string()),
        ("kkt_max".to_string(), kkt.max().to_string()),
        ("polished".to_string(), sol.polished.to_string()),
        ("x".to_string(), join(sol.x.as_slice())),
        ("y".to_string(), join(sol.y.as_slice())),
    ]);
    match sol.status {
        QpStatus::Infeasible => Err(Error::Infeasible),
        QpStatus::MaxIter => Err(Error::Numerical(format!("QP not solved within {} iterations", settings.max_iter))),
        QpStatus::Solved => Ok(()),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Collect => cmd_collect(&cfg),
        Command::Identify { data } => {
            let dir = data.clone().unwrap_or_else(|| cfg.out_dir());
            cmd_identify(&cfg, &dir)
        }
        Command::DesignLqr { predictor } => {
            let path = predictor.clone().unwrap_or_else(|| default_predictor(&cfg));
            cmd_design_lqr(&cfg, &path)
        }
        Command::Run { predictor, scenario, controller, all } => {
            let controller = controller.as_deref().map(str::parse::<ControllerKind>).transpose()?;
            if *all {
                return cmd_run_all(&cfg, controller);
            }
            if let Some(kind) = scenario {
                cfg.scenario.kind = kind.parse()?;
            }
            if let Some(c) = controller {
                cfg.scenario.controller = c;
            }
            if let Some(p) = predictor {
                cfg.scenario.predictor = p.to_string_lossy().into_owned();
            }
            print_entries(&run_one(&cfg)?);
            Ok(())
        }
        Command::EvalPredictor { predictor, data, horizon } => {
            let path = predictor.clone().unwrap_or_else(|| default_predictor(&cfg));
            let data = data.clone().unwrap_or_else(|| cfg.out_dir().join(HELDOUT_FILE));
            cmd_eval(&cfg, &path, &data, horizon.unwrap_or(cfg.identify.eval_horizon))
        }
        Command::SolveQp { problem, max_iter, eps } => cmd_solve_qp(problem, *max_iter, *eps),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_NUMERICAL })
        }
    }
}
