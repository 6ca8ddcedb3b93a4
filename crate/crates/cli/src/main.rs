use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use epca_pomdp::controllers::{
    collect_beliefs, collect_person_beliefs, ml_heuristic, run_episode, run_person_episode, solve_underlying_mdp,
    trial_seed, BeliefPolicy, ClosestHeuristic, CollectConfig, DensestHeuristic, MlPersonHeuristic, OraclePursuit,
    PersonEpisode, PersonPolicy,
};
use epca_pomdp::epca::{
    epca_fit, epca_reconstruction_stats, pca_fit, pca_reconstruction_stats, BasisMatrix, BeliefSet, CoordMatrix,
    EpcaConfig,
};
use epca_pomdp::io::{
    file_sha256, load_basis, load_beliefs, load_coords, load_planner, load_problem, load_rows, save_basis,
    save_beliefs, save_coords, save_planner, save_rows, spec_json, BeliefProvenance, FactorHeader, LoadedPlanner,
    PersonSpec, PlannerArtifacts, Problem, ProblemSpec, ReportRow, RolloutRow, TrialRow, TrialSummary,
};
use epca_pomdp::planner::{
    build_prototypes, execute_policy, plan_factored, planning_epca, refine_factored, refine_prototypes,
    ApproximatorKind, FactoredConfig, FactoredPlan, LoggedTransition, Lookahead, Planner, PlannerConfig,
    PrototypeConfig, PrototypeSet, RefineConfig, ValueSolution,
};
use epca_pomdp::pomdp::{Belief, Pomdp};
use epca_pomdp::problems::{
    build_grid_nav, CorridorConfig, GridMap, GridNavConfig, MazeConfig, PersonFinding, PersonFindingModel,
};
use epca_pomdp::{Error, Result};

/// Belief compression and planning for POMDPs.
#[derive(Parser)]
#[command(name = "epca-pomdp", version)]
struct Cli {
    /// Master seed; required by every command that samples.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a problem spec.
    Gen {
        #[command(subcommand)]
        problem: GenProblem,
    },
    /// Sample beliefs with the semi-random controller.
    Collect(CollectArgs),
    /// Fit E-PCA or PCA over a sweep of ranks.
    Fit(FitArgs),
    /// Build and solve the prototype MDP.
    Plan(PlanArgs),
    /// Run seeded trials of a planner or a baseline.
    Trials(TrialsArgs),
    /// Split prototypes where rollouts disagree with the model.
    Refine(RefineArgs),
}

#[derive(Subcommand)]
enum GenProblem {
    /// Two circular corridors told apart only by sensing.
    Maze {
        #[arg(long, default_value_t = 100)]
        states_per_corridor: usize,
        #[arg(long)]
        goal_halfwidth: Option<usize>,
    },
    /// Corridor with an unknown heading and a bimodal start.
    Corridor {
        #[arg(long, default_value_t = 40)]
        length: usize,
        #[arg(long, default_value_t = 14)]
        goal: usize,
        #[arg(long, default_value_t = 0.9)]
        accuracy: f64,
    },
    /// Navigation on an occupancy grid with proximity sensing.
    Grid {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        cell_size: f64,
        #[arg(long, default_value_t = 0.1)]
        motion_noise: f64,
        #[arg(long, default_value_t = 2.0)]
        sensor_range: f64,
        #[arg(long, default_value_t = 0.0)]
        sensor_noise: f64,
    },
    /// Search for a moving person; the built-in office map by default.
    Person {
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        cell_size: f64,
        #[arg(long, default_value_t = 3.0)]
        sensing_range: f64,
        #[arg(long, default_value_t = 0.01)]
        false_negative_rate: f64,
        #[arg(long, default_value_t = 0.2)]
        diffusion: f64,
    },
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(short, long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 0.5)]
    explore_prob: f64,
    #[arg(long, default_value_t = 500)]
    max_episode_steps: usize,
    /// Whether exploration may take terminal actions.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    explore_terminal: bool,
    /// Whether the heuristic's terminal choices are taken.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    heuristic_terminal: bool,
    /// Longest run of one repeated exploratory action.
    #[arg(long, default_value_t = 1)]
    explore_run: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Epca,
    Pca,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Epca => "epca",
            Method::Pca => "pca",
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    beliefs: PathBuf,
    /// Comma-separated ranks.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    ranks: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Method::Epca)]
    method: Method,
    /// Ridge weight of the Newton steps; plans are best fitted with 0.01.
    #[arg(long, default_value_t = 1e-5)]
    regularizer: f64,
    #[arg(long, default_value_t = 200)]
    max_sweeps: usize,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    basis: PathBuf,
    /// Training coordinates from the same fit.
    #[arg(long)]
    coords: PathBuf,
    #[arg(long, default_value = "grid")]
    approximator: ApproximatorKind,
    /// Grid cells per coordinate range.
    #[arg(long, default_value_t = 12.0)]
    divisions: f64,
    /// Explicit per-dimension grid widths, comma-separated.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.1)]
    padding: f64,
    /// Keep every k-th training coordinate as a prototype.
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long, default_value_t = 50_000)]
    max_prototypes: usize,
    #[arg(long, default_value_t = 1e-6)]
    z_floor: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    /// Discount of person-finding plans.
    #[arg(long, default_value_t = 0.95)]
    discount: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Ml,
    Closest,
    Densest,
    Oracle,
}

#[derive(Args)]
struct TrialsArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Planner directory written by `plan` or `refine`.
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    planner: Option<PathBuf>,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Step cap per trial; 300 for POMDPs, 400 for person finding.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value = "prototype")]
    lookahead: Lookahead,
    /// Also write per-step rollout logs for refinement.
    #[arg(long)]
    rollouts: bool,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    planner: PathBuf,
    /// Rollout log written by `trials --rollouts`.
    #[arg(long)]
    rollouts: PathBuf,
    /// Beliefs aligned with the rollout log; defaults to the sibling
    /// `rollout_beliefs.csv`.
    #[arg(long)]
    beliefs: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,
    #[arg(long, default_value_t = 10)]
    min_visits: usize,
    #[arg(long, default_value_t = 10)]
    max_new_per_cell: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    fs::create_dir_all(&cli.out)?;
    let seed = || cli.seed.ok_or_else(|| Error::Config("--seed is required for this command".into()));
    match &cli.command {
        Command::Gen { problem } => cmd_gen(problem, &cli.out),
        Command::Collect(a) => cmd_collect(a, seed()?, &cli.out),
        Command::Fit(a) => cmd_fit(a, seed()?, &cli.out),
        Command::Plan(a) => cmd_plan(a, &cli.out),
        Command::Trials(a) => cmd_trials(a, seed()?, &cli.out),
        Command::Refine(a) => cmd_refine(a, &cli.out),
    }
}

fn cmd_gen(problem: &GenProblem, out: &Path) -> Result<()> {
    let (spec, map) = match problem {
        GenProblem::Maze { states_per_corridor, goal_halfwidth } => {
            let cfg = MazeConfig { goal_halfwidth: *goal_halfwidth, ..MazeConfig::new(*states_per_corridor) };
            (ProblemSpec::Pomdp(Box::new(cfg.build()?.to_spec())), None)
        }
        GenProblem::Corridor { length, goal, accuracy } => {
            let mut cfg = CorridorConfig { length: *length, goal: *goal, ..Default::default() };
            cfg.sensing.accuracy = *accuracy;
            (ProblemSpec::Pomdp(Box::new(cfg.build()?.to_spec())), None)
        }
        GenProblem::Grid { map, cell_size, motion_noise, sensor_range, sensor_noise } => {
            let grid = GridMap::parse(&fs::read_to_string(map)?, *cell_size)?;
            let cfg = GridNavConfig {
                motion_noise: *motion_noise,
                sensor_range_m: *sensor_range,
                sensor_noise: *sensor_noise,
                ..Default::default()
            };
            (ProblemSpec::Pomdp(Box::new(build_grid_nav(&grid, &cfg)?.to_spec())), Some(grid.to_ascii()))
        }
        GenProblem::Person { map, cell_size, sensing_range, false_negative_rate, diffusion } => {
            let mut model = match map {
                Some(p) => PersonFindingModel::new(GridMap::parse(&fs::read_to_string(p)?, *cell_size)?),
                None => PersonFindingModel::office(),
            };
            model.sensing_range = *sensing_range;
            model.false_negative_rate = *false_negative_rate;
            model.person_diffusion = *diffusion;
            let spec = PersonSpec::from_model(&model);
            spec.build()?;
            let ascii = model.map.to_ascii();
            (ProblemSpec::Person(spec), Some(ascii))
        }
    };
    fs::write(out.join("spec.json"), spec_json(&spec)?)?;
    if let Some(m) = map {
        fs::write(out.join("map.txt"), m)?;
    }
    Ok(())
}

fn cmd_collect(a: &CollectArgs, seed: u64, out: &Path) -> Result<()> {
    let (problem, spec_hash) = load_problem(&a.spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beliefs = match problem {
        Problem::Pomdp(m) => {
            let cfg = CollectConfig {
                explore_prob: a.explore_prob,
                explore_terminal: a.explore_terminal,
                heuristic_terminal: a.heuristic_terminal,
                explore_run: a.explore_run,
                max_episode_steps: a.max_episode_steps,
                ..Default::default()
            };
            collect_beliefs(&m, a.n, &cfg, &mut rng)?.beliefs
        }
        Problem::Person(pf) => collect_person_beliefs(&pf, a.n, a.explore_prob, a.max_episode_steps, &mut rng)?,
    };
    let prov = BeliefProvenance { spec_hash: Some(spec_hash), seed: Some(seed) };
    save_beliefs(&out.join("beliefs.csv"), &beliefs, &prov)
}

fn cmd_fit(a: &FitArgs, seed: u64, out: &Path) -> Result<()> {
    let (beliefs, prov) = load_beliefs(&a.beliefs)?;
    let ns = beliefs.state_count();
    if a.ranks.is_empty() {
        return Err(Error::Config("--ranks is empty".into()));
    }
    if let Some(&r) = a.ranks.iter().find(|&&r| r == 0 || r > ns) {
        return Err(Error::Config(format!("rank {r} must be in 1..={ns}")));
    }
    let method = a.method.name();
    let mut report = Vec::new();
    for &rank in &a.ranks {
        let header = FactorHeader {
            rank,
            state_count: ns,
            seed,
            method: method.into(),
            spec_hash: prov.spec_hash.clone(),
            regularizer: (a.method == Method::Epca).then_some(a.regularizer),
        };
        let (basis, coords, stats) = match a.method {
            Method::Epca => {
                let cfg = EpcaConfig { newton_regularizer: a.regularizer, max_sweeps: a.max_sweeps, ..EpcaConfig::with_rank(rank, seed) };
                let fit = epca_fit(&beliefs, &cfg)?;
                let stats = epca_reconstruction_stats(&beliefs, &fit.basis, &fit.coords)?;
                (fit.basis, fit.coords, stats)
            }
            Method::Pca => {
                let model = pca_fit(&beliefs, rank)?;
                let stats = pca_reconstruction_stats(&beliefs, &model)?;
                (BasisMatrix::new(model.basis)?, CoordMatrix::new(model.coords)?, stats)
            }
        };
        save_basis(&out.join(format!("{method}_basis_r{rank}.csv")), &basis, &header)?;
        save_coords(&out.join(format!("{method}_coords_r{rank}.csv")), &coords, &header)?;
        report.push(ReportRow::new(rank, &stats));
    }
    save_rows(&out.join(format!("{method}_report.csv")), &report)
}

/// Loads a basis and its coordinates and checks them against the spec.
fn load_factors(basis: &Path, coords: &Path, spec_hash: &str) -> Result<(BasisMatrix, CoordMatrix, FactorHeader)> {
    let (u, h) = load_basis(basis)?;
    let (c, hc) = load_coords(coords)?;
    if h.method != "epca" {
        return Err(Error::Config(format!("planning needs an E-PCA basis, {} was given", h.method)));
    }
    if h.spec_hash.as_deref() != Some(spec_hash) {
        return Err(Error::Config(format!(
            "basis {} was not fitted on beliefs from spec {spec_hash}; refit or pass the matching spec",
            basis.display()
        )));
    }
    if hc != h || c.rank() != u.rank() {
        return Err(Error::Config("coordinate file does not belong to the basis".into()));
    }
    Ok((u, c, h))
}

fn cmd_plan(a: &PlanArgs, out: &Path) -> Result<()> {
    let (problem, spec_hash) = load_problem(&a.spec)?;
    let (u, c, h) = load_factors(&a.basis, &a.coords, &spec_hash)?;
    let pcfg = PrototypeConfig {
        kind: a.approximator,
        widths: a.widths.clone(),
        divisions: a.divisions,
        padding: a.padding,
        subsample: a.subsample,
        max_prototypes: a.max_prototypes,
    };
    let prototypes = build_prototypes(&c, &pcfg)?;
    let epca = planning_epca(h.rank, h.seed);
    let epca = EpcaConfig { newton_regularizer: h.regularizer.unwrap_or(epca.newton_regularizer), ..epca };
    fs::create_dir_all(out)?;
    fs::copy(&a.basis, out.join("basis.csv"))?;
    let basis_hash = file_sha256(&out.join("basis.csv"))?;
    match problem {
        Problem::Pomdp(m) => {
            let cfg = PlannerConfig { z_floor: a.z_floor, tol: a.tol, max_iters: a.max_iters, epca, ..Default::default() };
            let planner = Planner::build(&m, u, prototypes, &cfg)?;
            save_pomdp_planner(out, &spec_hash, &basis_hash, &planner)
        }
        Problem::Person(pf) => {
            let cfg = FactoredConfig { discount: a.discount, tol: a.tol, max_iters: a.max_iters, epca, ..Default::default() };
            let plan = plan_factored(&pf, u, prototypes, &cfg)?;
            save_person_planner(out, &spec_hash, &basis_hash, &plan)
        }
    }
}

fn save_pomdp_planner(out: &Path, spec_hash: &str, basis_hash: &str, p: &Planner) -> Result<()> {
    save_planner(
        out,
        &PlannerArtifacts {
            problem: "pomdp",
            spec_hash,
            basis_file: "basis.csv",
            basis_hash,
            epca: &p.epca,
            prototypes: &p.prototypes,
            mdp: &p.mdp,
            iterations: p.solution.iterations,
            residual: p.solution.residual,
            converged: p.solution.converged,
        },
    )?;
    Ok(())
}

fn save_person_planner(out: &Path, spec_hash: &str, basis_hash: &str, p: &FactoredPlan) -> Result<()> {
    save_planner(
        out,
        &PlannerArtifacts {
            problem: "person",
            spec_hash,
            basis_file: "basis.csv",
            basis_hash,
            epca: &p.epca,
            prototypes: &p.prototypes,
            mdp: &p.mdp,
            iterations: p.solution.iterations,
            residual: p.solution.residual,
            converged: p.solution.converged,
        },
    )?;
    Ok(())
}

enum LoadedPolicy {
    Pomdp(Box<Planner>),
    Person(Box<FactoredPlan>),
}

/// Reads a planner directory and binds it to the loaded problem.
fn open_planner(dir: &Path, problem: &Problem, spec_hash: &str, lookahead: Lookahead) -> Result<(LoadedPolicy, LoadedPlanner)> {
    let l = load_planner(dir)?;
    if l.manifest.spec_hash != spec_hash {
        return Err(Error::Config(format!(
            "planner {} was built for spec {}, not {spec_hash}",
            dir.display(),
            l.manifest.spec_hash
        )));
    }
    if file_sha256(&l.basis_path())? != l.manifest.basis_hash {
        return Err(Error::Invariant("planner basis does not match the hash recorded in the manifest".into()));
    }
    let (u, h) = load_basis(&l.basis_path())?;
    let epca = EpcaConfig { newton_regularizer: l.manifest.regularizer, ..planning_epca(h.rank, h.seed) };
    let solution = ValueSolution {
        values: l.value.clone(),
        iterations: l.manifest.iterations,
        residual: l.manifest.residual,
        converged: l.manifest.converged,
    };
    let policy = match problem {
        Problem::Pomdp(m) => {
            let mdp = l.mdp(m.terminal_actions().to_vec())?;
            let cfg = PlannerConfig { epca, lookahead, ..Default::default() };
            LoadedPolicy::Pomdp(Box::new(Planner::from_parts(m, u, l.prototypes.clone(), mdp, solution, &cfg)?))
        }
        Problem::Person(pf) => {
            let mdp = l.mdp(vec![false; 5])?;
            LoadedPolicy::Person(Box::new(FactoredPlan::from_parts(pf, u, l.prototypes.clone(), mdp, solution, epca)?))
        }
    };
    Ok((policy, l))
}

struct TrialOutcome {
    row: TrialRow,
    rollout: Vec<(RolloutRow, Belief)>,
}

fn pomdp_trial(m: &Pomdp, policy: &dyn BeliefPolicy, planner: Option<&Planner>, seed: u64, index: usize, max_steps: usize, log: bool) -> Result<TrialOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(p) = planner {
        let ep = execute_policy(m, p, &mut rng, max_steps)?;
        let rollout = if log {
            ep.steps
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let row = RolloutRow { episode: index, step: k, action: s.action, observation: s.observation, reward: s.reward, cell: None };
                    (row, s.belief.clone())
                })
                .collect()
        } else {
            Vec::new()
        };
        let row = TrialRow { trial: index, seed, steps: ep.steps.len(), total_reward: ep.total_reward, success: ep.success };
        return Ok(TrialOutcome { row, rollout });
    }
    let ep = run_episode(m, policy, &mut rng, max_steps)?;
    let row = TrialRow { trial: index, seed, steps: ep.steps(), total_reward: ep.total_reward, success: ep.success };
    Ok(TrialOutcome { row, rollout: Vec::new() })
}

fn person_trial(pf: &PersonFinding, policy: &dyn PersonPolicy, seed: u64, index: usize, max_steps: usize, log: bool) -> Result<TrialOutcome> {
    let ep = run_person_episode(pf, policy, seed, max_steps, log)?;
    let t = ep.time_or(max_steps);
    let row = TrialRow { trial: index, seed, steps: t, total_reward: -(t as f64), success: ep.capture_time.is_some() };
    Ok(TrialOutcome { row, rollout: person_rollout(&ep, index) })
}

fn person_rollout(ep: &PersonEpisode, index: usize) -> Vec<(RolloutRow, Belief)> {
    ep.beliefs
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let captured = ep.capture_time == Some(k + 1);
            let row = RolloutRow {
                episode: index,
                step: k,
                action: ep.actions[k].index(),
                observation: Some(captured as usize),
                reward: -1.0,
                cell: Some(ep.robots[k]),
            };
            (row, b.clone())
        })
        .collect()
}

fn cmd_trials(a: &TrialsArgs, seed: u64, out: &Path) -> Result<()> {
    if a.trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    let (problem, spec_hash) = load_problem(&a.spec)?;
    if a.rollouts && a.planner.is_none() {
        return Err(Error::Config("--rollouts needs --planner".into()));
    }
    let loaded = match &a.planner {
        Some(dir) => Some(open_planner(dir, &problem, &spec_hash, a.lookahead)?.0),
        None => None,
    };
    let (name, outcomes) = match &problem {
        Problem::Pomdp(m) => {
            let max_steps = a.max_steps.unwrap_or(300);
            let ml;
            let (name, policy, planner): (&str, &dyn BeliefPolicy, Option<&Planner>) = match (&loaded, a.baseline) {
                (Some(LoadedPolicy::Pomdp(p)), _) => ("epca", p.as_ref(), Some(p.as_ref())),
                (Some(LoadedPolicy::Person(_)), _) => return Err(Error::Config("person planner given for a POMDP spec".into())),
                (None, Some(Baseline::Ml)) => {
                    ml = ml_heuristic(&solve_underlying_mdp(m, 1e-6)?);
                    ("ml", &ml, None)
                }
                (None, Some(b)) => {
                    let n = match b {
                        Baseline::Closest => "closest",
                        Baseline::Densest => "densest",
                        _ => "oracle",
                    };
                    return Err(Error::Config(format!("baseline {n} applies to person finding only")));
                }
                (None, None) => unreachable!("clap requires a planner or a baseline"),
            };
            let outcomes = (0..a.trials)
                .into_par_iter()
                .map(|i| pomdp_trial(m, policy, planner, trial_seed(seed, i as u64), i, max_steps, a.rollouts))
                .collect::<Result<Vec<_>>>()?;
            (name, outcomes)
        }
        Problem::Person(pf) => {
            let max_steps = a.max_steps.unwrap_or(400);
            let (name, policy): (&str, &dyn PersonPolicy) = match (&loaded, a.baseline) {
                (Some(LoadedPolicy::Person(p)), _) => ("epca", p.as_ref()),
                (Some(LoadedPolicy::Pomdp(_)), _) => return Err(Error::Config("POMDP planner given for a person spec".into())),
                (None, Some(Baseline::Ml)) => ("ml", &MlPersonHeuristic),
                (None, Some(Baseline::Closest)) => ("closest", &ClosestHeuristic),
                (None, Some(Baseline::Densest)) => ("densest", &DensestHeuristic),
                (None, Some(Baseline::Oracle)) => ("oracle", &OraclePursuit),
                (None, None) => unreachable!("clap requires a planner or a baseline"),
            };
            let outcomes = (0..a.trials)
                .into_par_iter()
                .map(|i| person_trial(pf, policy, trial_seed(seed, i as u64), i, max_steps, a.rollouts))
                .collect::<Result<Vec<_>>>()?;
            (name, outcomes)
        }
    };
    let rows: Vec<TrialRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    save_rows(&out.join("trials.csv"), &rows)?;
    save_rows(&out.join("summary.csv"), &[TrialSummary::from_rows(name, &rows)])?;
    if a.rollouts {
        let (log, beliefs): (Vec<RolloutRow>, Vec<Belief>) = outcomes.into_iter().flat_map(|o| o.rollout).unzip();
        if log.is_empty() {
            return Err(Error::Config("no rollout steps were recorded".into()));
        }
        save_rows(&out.join("rollouts.csv"), &log)?;
        let prov = BeliefProvenance { spec_hash: Some(spec_hash), seed: Some(seed) };
        save_beliefs(&out.join("rollout_beliefs.csv"), &BeliefSet::from_beliefs(&beliefs)?, &prov)?;
    }
    Ok(())
}

/// Pairs consecutive logged steps of each episode into compressed
/// transitions.
fn logged_transitions<F>(log: &[RolloutRow], beliefs: &BeliefSet, compress: F) -> Result<Vec<LoggedTransition>>
where
    F: Fn(&[f64]) -> Result<DVector<f64>> + Sync,
{
    if log.len() != beliefs.sample_count() {
        return Err(Error::Dimension(format!(
            "rollout log has {} steps but {} beliefs",
            log.len(),
            beliefs.sample_count()
        )));
    }
    let coords = (0..log.len()).into_par_iter().map(|k| compress(beliefs.column(k))).collect::<Result<Vec<_>>>()?;
    Ok((0..log.len())
        .filter(|&k| k + 1 < log.len() && log[k + 1].episode == log[k].episode && log[k + 1].step == log[k].step + 1)
        .map(|k| LoggedTransition { cell: log[k].cell, coords: coords[k].clone(), action: log[k].action, next: Some(coords[k + 1].clone()) })
        .collect())
}

fn cmd_refine(a: &RefineArgs, out: &Path) -> Result<()> {
    let (problem, spec_hash) = load_problem(&a.spec)?;
    let log: Vec<RolloutRow> = load_rows(&a.rollouts)?;
    let beliefs_path = match &a.beliefs {
        Some(p) => p.clone(),
        None => a.rollouts.with_file_name("rollout_beliefs.csv"),
    };
    let (beliefs, prov) = load_beliefs(&beliefs_path)?;
    if prov.spec_hash.as_deref().is_some_and(|h| h != spec_hash) {
        return Err(Error::Config("rollout beliefs come from a different spec".into()));
    }
    let cfg = RefineConfig { threshold: a.threshold, min_visits: a.min_visits, max_new_per_cell: a.max_new_per_cell };
    let (policy, loaded) = open_planner(&a.planner, &problem, &spec_hash, Lookahead::Prototype)?;
    let basis_src = loaded.basis_path();
    let refined: PrototypeSet;
    fs::create_dir_all(out)?;
    let same_dir = fs::canonicalize(out)? == fs::canonicalize(&loaded.dir)?;
    if !same_dir {
        fs::copy(&basis_src, out.join("basis.csv"))?;
    }
    let basis_hash = loaded.manifest.basis_hash.clone();
    match (&problem, policy) {
        (Problem::Pomdp(m), LoadedPolicy::Pomdp(p)) => {
            let t = logged_transitions(&log, &beliefs, |b| p.compress(&Belief::new(b.to_vec())?))?;
            let (q, splits) = refine_prototypes(&p.prototypes, &p.mdp, &t, &cfg)?;
            eprintln!("split {} (prototype, action) pairs; {} -> {} prototypes", splits.len(), p.prototypes.len(), q.len());
            refined = q;
            let pcfg = PlannerConfig { epca: p.epca.clone(), ..Default::default() };
            let planner = Planner::build(m, p.basis.clone(), refined, &pcfg)?;
            save_pomdp_planner(out, &spec_hash, &basis_hash, &planner)
        }
        (Problem::Person(pf), LoadedPolicy::Person(p)) => {
            let t = logged_transitions(&log, &beliefs, |b| p.compress(b))?;
            let (q, splits) = refine_factored(pf, &p, &t, &cfg)?;
            eprintln!("split {} (prototype, action) pairs; {} -> {} prototypes", splits.len(), p.prototypes.len(), q.len());
            refined = q;
            let fcfg = FactoredConfig {
                discount: p.mdp.discount,
                epca: p.epca.clone(),
                ..Default::default()
            };
            let plan = plan_factored(pf, p.basis.clone(), refined, &fcfg)?;
            save_person_planner(out, &spec_hash, &basis_hash, &plan)
        }
        _ => unreachable!("open_planner matches the policy to the problem"),
    }
}
