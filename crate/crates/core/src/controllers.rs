//! Heuristic controllers, MDP solutions of the underlying model, belief-set
//! collection and episode simulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::epca::BeliefSet;
use crate::error::{Error, Result};
use crate::pomdp::{sample_index, Belief, Pomdp};
use crate::problems::{PersonFinding, RobotAction, ROBOT_ACTIONS};

/// Maps beliefs to actions.
pub trait BeliefPolicy: Sync {
    fn action(&self, b: &Belief) -> Result<usize>;
}

/// Seed of trial `index` under `master`: two rounds of splitmix64, so
/// nearby masters and indices give unrelated streams.
pub fn trial_seed(master: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(master) ^ index)
}

/// Value function and greedy policy of the fully observable model.
#[derive(Clone, Debug)]
pub struct MdpSolution {
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
    pub iterations: usize,
}

const MDP_MAX_ITERS: usize = 100_000;

/// `Q(s, a)` under `v`; terminal actions have no continuation.
fn q_value(m: &Pomdp, v: &[f64], s: usize, a: usize) -> f64 {
    let r = m.reward(s, a);
    if m.is_terminal(a) {
        return r;
    }
    r + m.discount() * m.transition_row(s, a).iter().zip(v).map(|(t, v)| t * v).sum::<f64>()
}

/// Value iteration over the hidden states until the max-norm change drops
/// below `tol`. Greedy ties go to the lowest action index.
pub fn solve_underlying_mdp(m: &Pomdp, tol: f64) -> Result<MdpSolution> {
    if m.discount() >= 1.0 && !m.terminal_actions().iter().any(|&t| t) {
        return Err(Error::Config("undiscounted MDP without terminal actions".into()));
    }
    let (ns, na) = (m.n_states(), m.n_actions());
    let mut v = vec![0.0; ns];
    for it in 1..=MDP_MAX_ITERS {
        let next: Vec<f64> = (0..ns)
            .map(|s| (0..na).map(|a| q_value(m, &v, s, a)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if change < tol {
            let policy = (0..ns)
                .map(|s| {
                    let mut best = 0;
                    let mut best_q = f64::NEG_INFINITY;
                    for a in 0..na {
                        let q = q_value(m, &v, s, a);
                        if q > best_q {
                            best = a;
                            best_q = q;
                        }
                    }
                    best
                })
                .collect();
            return Ok(MdpSolution { values: v, policy, iterations: it });
        }
    }
    Err(Error::Numerical(format!("MDP value iteration did not converge in {MDP_MAX_ITERS} iterations")))
}

/// Acts as the MDP policy prescribes at the most likely state.
#[derive(Clone, Debug)]
pub struct MlHeuristic {
    policy: Vec<usize>,
}

pub fn ml_heuristic(sol: &MdpSolution) -> MlHeuristic {
    MlHeuristic { policy: sol.policy.clone() }
}

impl BeliefPolicy for MlHeuristic {
    fn action(&self, b: &Belief) -> Result<usize> {
        Ok(self.policy[b.argmax()])
    }
}

/// Options of [`collect_beliefs`].
#[derive(Clone, Debug)]
pub struct CollectConfig {
    pub explore_prob: f64,
    /// Whether exploration may pick terminal actions.
    pub explore_terminal: bool,
    /// Whether the heuristic's terminal choices are taken; otherwise they
    /// are replaced by a random non-terminal action.
    pub heuristic_terminal: bool,
    /// An exploratory action is repeated for a uniform run of 1 to this many
    /// steps.
    pub explore_run: usize,
    /// Episodes longer than this restart at the initial belief.
    pub max_episode_steps: usize,
    pub mdp_tol: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig { explore_prob: 0.5, explore_terminal: true, heuristic_terminal: true, explore_run: 1, max_episode_steps: 500, mdp_tol: 1e-6 }
    }
}

/// One recorded belief and the step that followed it.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub episode: usize,
    pub step: usize,
    pub action: usize,
    /// `None` when the action ended the episode.
    pub observation: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Collected {
    pub beliefs: BeliefSet,
    /// `trace[k]` is the step taken from belief `k`.
    pub trace: Vec<TraceStep>,
}

fn explore_actions(m: &Pomdp, include_terminal: bool) -> Vec<usize> {
    let acts: Vec<usize> = (0..m.n_actions()).filter(|&a| include_terminal || !m.is_terminal(a)).collect();
    if acts.is_empty() {
        (0..m.n_actions()).collect()
    } else {
        acts
    }
}

/// Records `n` filtered beliefs along simulated episodes that mix uniform
/// exploration with the maximum-likelihood heuristic.
pub fn collect_beliefs<R: Rng + ?Sized>(m: &Pomdp, n: usize, cfg: &CollectConfig, rng: &mut R) -> Result<Collected> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.explore_prob) {
        return Err(Error::Config(format!("explore_prob {} must lie in [0, 1]", cfg.explore_prob)));
    }
    if cfg.explore_run == 0 {
        return Err(Error::Config("explore_run must be at least 1".into()));
    }
    let ml = ml_heuristic(&solve_underlying_mdp(m, cfg.mdp_tol)?);
    let explore = explore_actions(m, cfg.explore_terminal);
    let moves = explore_actions(m, false);
    let p0 = m.initial_belief();
    let mut beliefs = Vec::with_capacity(n);
    let mut trace = Vec::with_capacity(n);
    let mut episode = 0;
    while beliefs.len() < n {
        let mut b = p0.clone();
        let mut s = sample_index(b.probs(), rng);
        let mut run = (0, 0);
        for step in 0..cfg.max_episode_steps.max(1) {
            if beliefs.len() == n {
                break;
            }
            let a = if run.1 > 0 {
                run.1 -= 1;
                run.0
            } else if rng.gen::<f64>() < cfg.explore_prob {
                let a = explore[rng.gen_range(0..explore.len())];
                if cfg.explore_run > 1 {
                    run = (a, rng.gen_range(0..cfg.explore_run));
                }
                a
            } else {
                match ml.action(&b)? {
                    a if m.is_terminal(a) && !cfg.heuristic_terminal => moves[rng.gen_range(0..moves.len())],
                    a => a,
                }
            };
            beliefs.push(b.clone());
            let (s2, z, _) = m.simulate_step(s, a, rng);
            if m.is_terminal(a) {
                trace.push(TraceStep { episode, step, action: a, observation: None });
                break;
            }
            trace.push(TraceStep { episode, step, action: a, observation: Some(z) });
            b = m.update(&m.predict(&b, a), a, z)?.0;
            s = s2;
        }
        episode += 1;
    }
    Ok(Collected { beliefs: BeliefSet::from_beliefs(&beliefs)?, trace })
}

/// Outcome of one simulated POMDP episode.
#[derive(Clone, Debug)]
pub struct Episode {
    pub actions: Vec<usize>,
    pub observations: Vec<Option<usize>>,
    pub rewards: Vec<f64>,
    pub total_reward: f64,
    /// True when the episode ended with a terminal action of positive reward.
    pub success: bool,
    /// Whether a terminal action was taken at all.
    pub terminated: bool,
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }
}

/// Runs `policy` on the true model from a state drawn from the initial
/// belief, tracking the belief with the exact filter.
pub fn run_episode<R: Rng + ?Sized>(m: &Pomdp, policy: &dyn BeliefPolicy, rng: &mut R, max_steps: usize) -> Result<Episode> {
    let mut b = m.initial_belief();
    let mut s = sample_index(b.probs(), rng);
    let mut ep = Episode {
        actions: Vec::new(),
        observations: Vec::new(),
        rewards: Vec::new(),
        total_reward: 0.0,
        success: false,
        terminated: false,
    };
    for _ in 0..max_steps {
        let a = policy.action(&b)?;
        let (s2, z, r) = m.simulate_step(s, a, rng);
        ep.actions.push(a);
        ep.rewards.push(r);
        ep.total_reward += r;
        if m.is_terminal(a) {
            ep.observations.push(None);
            ep.terminated = true;
            ep.success = r > 0.0;
            break;
        }
        ep.observations.push(Some(z));
        b = m.update(&m.predict(&b, a), a, z)?.0;
        s = s2;
    }
    Ok(ep)
}

/// What a person-finding controller gets to see.
pub struct PersonView<'a> {
    pub robot: usize,
    pub belief: &'a Belief,
    /// True person cell; only the oracle controller may read it.
    pub person: usize,
}

/// Person-finding controllers. `None` means no useful motion.
pub trait PersonPolicy: Sync {
    fn action(&self, pf: &PersonFinding, view: &PersonView) -> Result<Option<RobotAction>>;
}

/// First move of a shortest path from `from` to `to`; ties go to the lowest
/// action index.
pub fn step_toward(pf: &PersonFinding, from: usize, to: usize) -> Option<RobotAction> {
    if from == to {
        return None;
    }
    let d = pf.distance(from, to)?;
    ROBOT_ACTIONS[..4]
        .iter()
        .copied()
        .find(|&a| pf.distance(pf.move_robot(from, a), to) == Some(d - 1))
}

/// Belief mass below this counts as zero.
pub const NONZERO_THRESHOLD: f64 = 1e-6;

/// Drives to the nearest cell that still carries belief mass and is not in
/// view right now.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClosestHeuristic;

impl PersonPolicy for ClosestHeuristic {
    fn action(&self, pf: &PersonFinding, v: &PersonView) -> Result<Option<RobotAction>> {
        let target = (0..pf.n_cells())
            .filter(|&c| v.belief.probs()[c] > NONZERO_THRESHOLD && !pf.is_visible(v.robot, c))
            .filter_map(|c| pf.distance(v.robot, c).map(|d| (d, c)))
            .min();
        Ok(target.and_then(|(_, c)| step_toward(pf, v.robot, c)))
    }
}

/// Free cell from which the most belief mass is visible; ties to the lowest
/// index.
pub fn densest_target(pf: &PersonFinding, b: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..pf.n_cells() {
        let mass: f64 = pf.visible(c).iter().map(|&j| b[j]).sum();
        if mass > best.1 {
            best = (c, mass);
        }
    }
    best.0
}

/// Drives to the location from which the most probability mass is visible.
#[derive(Clone, Copy, Debug, Default)]
pub struct DensestHeuristic;

impl PersonPolicy for DensestHeuristic {
    fn action(&self, pf: &PersonFinding, v: &PersonView) -> Result<Option<RobotAction>> {
        let target = densest_target(pf, v.belief.probs());
        if pf.distance(v.robot, target).is_none() {
            return Ok(None);
        }
        Ok(step_toward(pf, v.robot, target))
    }
}

/// Drives to the most likely person location.
#[derive(Clone, Copy, Debug, Default)]
pub struct MlPersonHeuristic;

impl PersonPolicy for MlPersonHeuristic {
    fn action(&self, pf: &PersonFinding, v: &PersonView) -> Result<Option<RobotAction>> {
        Ok(step_toward(pf, v.robot, v.belief.argmax()))
    }
}

/// Fully observable pursuit of the true person cell.
#[derive(Clone, Copy, Debug, Default)]
pub struct OraclePursuit;

impl PersonPolicy for OraclePursuit {
    fn action(&self, pf: &PersonFinding, v: &PersonView) -> Result<Option<RobotAction>> {
        Ok(step_toward(pf, v.robot, v.person))
    }
}

/// Outcome of one person-finding episode.
#[derive(Clone, Debug)]
pub struct PersonEpisode {
    /// Step at which the person was detected.
    pub capture_time: Option<usize>,
    /// Robot cell at each decision, followed by the final cell.
    pub robots: Vec<usize>,
    pub actions: Vec<RobotAction>,
    /// Beliefs the controller acted on, when recording was requested.
    pub beliefs: Vec<Belief>,
}

impl PersonEpisode {
    /// Capture time, counting a miss as `max_steps`.
    pub fn time_or(&self, max_steps: usize) -> usize {
        self.capture_time.unwrap_or(max_steps)
    }
}

/// Simulates a search. Person motion and sensor noise use separate streams
/// derived from `seed`, so every controller faces the same person
/// trajectory for a given seed.
pub fn run_person_episode(
    pf: &PersonFinding,
    policy: &dyn PersonPolicy,
    seed: u64,
    max_steps: usize,
    record_beliefs: bool,
) -> Result<PersonEpisode> {
    let mut person_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sensor_rng = ChaCha8Rng::seed_from_u64(seed);
    sensor_rng.set_stream(1);
    let mut person = sample_index(pf.initial_belief().probs(), &mut person_rng);
    let mut robot = pf.robot_start;
    let mut ep = PersonEpisode { capture_time: None, robots: vec![robot], actions: Vec::new(), beliefs: Vec::new() };

    let mut b = pf.initial_belief();
    if pf.sample_detection(robot, person, &mut sensor_rng) {
        ep.capture_time = Some(0);
        return Ok(ep);
    }
    b = pf.not_detected(b.probs(), robot)?.0;
    for t in 1..=max_steps {
        if record_beliefs {
            ep.beliefs.push(b.clone());
        }
        let a = policy.action(pf, &PersonView { robot, belief: &b, person })?.unwrap_or(RobotAction::Stay);
        ep.actions.push(a);
        robot = pf.move_robot(robot, a);
        ep.robots.push(robot);
        person = pf.step_person(person, &mut person_rng);
        let d = pf.diffuse(b.probs());
        if pf.sample_detection(robot, person, &mut sensor_rng) {
            ep.capture_time = Some(t);
            return Ok(ep);
        }
        b = pf.not_detected(&d, robot)?.0;
    }
    Ok(ep)
}

/// Records `n` person beliefs along searches driven toward the most likely
/// person location, with uniform random moves mixed in at `explore_prob`.
pub fn collect_person_beliefs<R: Rng + ?Sized>(
    pf: &PersonFinding,
    n: usize,
    explore_prob: f64,
    max_episode_steps: usize,
    rng: &mut R,
) -> Result<BeliefSet> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut person = sample_index(pf.initial_belief().probs(), rng);
        let mut robot = pf.robot_start;
        let mut b = pf.initial_belief();
        for _ in 0..max_episode_steps.max(1) {
            if pf.sample_detection(robot, person, rng) {
                break;
            }
            b = pf.not_detected(b.probs(), robot)?.0;
            if out.len() == n {
                break;
            }
            out.push(b.clone());
            let a = if rng.gen::<f64>() < explore_prob {
                ROBOT_ACTIONS[rng.gen_range(0..4)]
            } else {
                step_toward(pf, robot, b.argmax()).unwrap_or(RobotAction::Stay)
            };
            robot = pf.move_robot(robot, a);
            person = pf.step_person(person, rng);
            b = Belief::from_vector_unchecked(pf.diffuse(b.probs()).into());
        }
    }
    BeliefSet::from_beliefs(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{build_person_finding, build_two_corridor_maze, CorridorConfig, GridMap, PersonFindingModel};
    use proptest::prelude::*;
    use rand::Rng;

    fn chain() -> Pomdp {
        // 0 -> 1 -> 2 (goal); "go" moves right deterministically, "stop" is
        // terminal and pays 10 at the goal.
        let mut m = Pomdp::zeros(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["go".into(), "stop".into()],
            vec!["o".into()],
            0.9,
        );
        for s in 0..3 {
            m.set_transition(s, 0, (s + 1).min(2), 1.0);
            m.set_transition(s, 1, 0, 1.0);
            m.set_observation(0, 0, s, 1.0);
            m.set_observation(0, 1, s, 1.0);
            m.set_reward(s, 0, -1.0);
            m.set_reward(s, 1, if s == 2 { 10.0 } else { 0.0 });
        }
        m.set_terminal(1, true);
        m.set_initial_belief(vec![1.0, 0.0, 0.0]).unwrap();
        m
    }

    #[test]
    fn trial_seeds_use_splitmix64() {
        // First two outputs of a splitmix64 generator started at zero.
        const OUT0: u64 = 0xe220_a839_7b1d_cdaf;
        const OUT1: u64 = 0x6e78_9e6a_a1b9_65f4;
        const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
        assert_eq!(trial_seed(0, OUT0), OUT0);
        assert_eq!(trial_seed(0, OUT0 ^ GAMMA), OUT1);
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|t| trial_seed(7, t)).collect();
        assert_eq!(seeds.len(), 1000);
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let mut m = chain();
        for s in 0..3 {
            for a in 0..2 {
                m.set_reward(s, a, 0.0);
            }
        }
        let sol = solve_underlying_mdp(&m, 1e-10).unwrap();
        assert!(sol.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_loop_geometric_series() {
        let mut m = Pomdp::zeros(vec!["s".into()], vec!["a".into()], vec!["o".into()], 0.9);
        m.set_transition(0, 0, 0, 1.0);
        m.set_observation(0, 0, 0, 1.0);
        m.set_reward(0, 0, 1.0);
        let sol = solve_underlying_mdp(&m, 1e-10).unwrap();
        assert!((sol.values[0] - 10.0).abs() < 1e-8);
    }

    #[test]
    fn chain_matches_hand_backup() {
        let sol = solve_underlying_mdp(&chain(), 1e-12).unwrap();
        // V(c) = 10, V(b) = -1 + 0.9 * 10, V(a) = -1 + 0.9 * V(b).
        let vb = -1.0 + 0.9 * 10.0;
        let va = -1.0 + 0.9 * vb;
        assert!((sol.values[2] - 10.0).abs() < 1e-9);
        assert!((sol.values[1] - vb).abs() < 1e-9);
        assert!((sol.values[0] - va).abs() < 1e-9);
        assert_eq!(sol.policy, vec![0, 0, 1]);
    }

    #[test]
    fn ml_on_delta_matches_mdp() {
        let m = build_two_corridor_maze(10, 5.0, 1.0).unwrap();
        let sol = solve_underlying_mdp(&m, 1e-8).unwrap();
        let ml = ml_heuristic(&sol);
        for s in 0..20 {
            assert_eq!(ml.action(&Belief::delta(20, s)).unwrap(), sol.policy[s]);
        }
        // Symmetric initial belief: the tie goes to corridor 0.
        assert_eq!(m.initial_belief().argmax(), 0);
    }

    #[test]
    fn collection_basics() {
        let m = CorridorConfig::default().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = collect_beliefs(&m, 200, &CollectConfig::default(), &mut rng).unwrap();
        assert_eq!(c.beliefs.sample_count(), 200);
        assert_eq!(c.beliefs.belief(0), m.initial_belief());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = collect_beliefs(&m, 200, &CollectConfig::default(), &mut rng).unwrap();
        assert_eq!(c.beliefs.data(), d.beliefs.data());
        assert!(collect_beliefs(&m, 0, &CollectConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn collection_replays_from_trace() {
        let m = build_two_corridor_maze(10, 5.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = collect_beliefs(&m, 150, &CollectConfig::default(), &mut rng).unwrap();
        let mut b = m.initial_belief();
        for k in 0..150 {
            let got = c.beliefs.belief(k);
            for (x, y) in got.probs().iter().zip(b.probs()) {
                assert!((x - y).abs() < 1e-12);
            }
            let t = &c.trace[k];
            b = match t.observation {
                Some(z) => m.update(&m.predict(&b, t.action), t.action, z).unwrap().0,
                None => m.initial_belief(),
            };
            if k + 1 < 150 && c.trace[k + 1].step == 0 {
                b = m.initial_belief();
            }
        }
    }

    fn open_map(text: &str) -> PersonFinding {
        build_person_finding(&PersonFindingModel::new(GridMap::parse(text, 1.0).unwrap())).unwrap()
    }

    #[test]
    fn single_mass_cell_attracts_both() {
        let pf = open_map("R.....\n......\n......");
        let mut p = vec![0.0; pf.n_cells()];
        p[17] = 1.0;
        let b = Belief::new(p).unwrap();
        let v = PersonView { robot: 0, belief: &b, person: 0 };
        let first = step_toward(&pf, 0, 17);
        assert!(first.is_some());
        assert_eq!(DensestHeuristic.action(&pf, &v).unwrap(), first);
        let v = PersonView { robot: 0, belief: &b, person: 0 };
        // Cell 17 lies within range 3 of a few cells; closest still heads toward it.
        let c = ClosestHeuristic.action(&pf, &v).unwrap();
        assert_eq!(c, first);
    }

    #[test]
    fn closest_and_densest_can_differ() {
        // A small lump right next to the robot's view and a large basin far away.
        let pf = open_map("R..................");
        let n = pf.n_cells();
        let mut p = vec![0.0; n];
        p[5] = 0.1;
        for c in 12..19 {
            p[c] = 0.9 / 7.0;
        }
        let b = Belief::new(p.clone()).unwrap();
        let v = PersonView { robot: 0, belief: &b, person: 0 };
        assert_eq!(ClosestHeuristic.action(&pf, &v).unwrap(), Some(RobotAction::East));
        let t = densest_target(&pf, &p);
        assert!((12..19).contains(&t) || (9..=15).contains(&t));
        assert!(pf.distance(0, t).unwrap() > 5);
    }

    #[test]
    fn densest_matches_exhaustive_scan() {
        let pf = open_map("R.........");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let w: Vec<f64> = (0..10).map(|_| rng.gen::<f64>()).collect();
            let b = Belief::from_weights(w).unwrap();
            let mut best = (0, -1.0);
            for c in 0..10usize {
                let m: f64 = (0..10).filter(|&j| c.abs_diff(j) <= 3).map(|j| b.probs()[j]).sum();
                if m > best.1 {
                    best = (c, m);
                }
            }
            assert_eq!(densest_target(&pf, b.probs()), best.0);
        }
    }

    #[test]
    fn oracle_capture_times() {
        let mut model = PersonFindingModel::new(GridMap::parse("R.......\n........\n........", 1.0).unwrap());
        model.false_negative_rate = 0.0;
        model.sensing_range = 0.0;
        model.person_diffusion = 0.0;
        for target in [0usize, 5, 13, 23] {
            let mut p = vec![0.0; 24];
            p[target] = 1.0;
            model.person_belief = Some(Belief::new(p).unwrap());
            let pf = build_person_finding(&model).unwrap();
            let ep = run_person_episode(&pf, &OraclePursuit, 1, 100, false).unwrap();
            assert_eq!(ep.capture_time, Some(pf.distance(0, target).unwrap() as usize));
        }
    }

    prop_compose! {
        fn belief(n: usize)(w in proptest::collection::vec(0.01f64..1.0, n)) -> Vec<f64> { w }
    }

    proptest! {
        #[test]
        fn ml_is_scale_invariant(w in belief(20), scale in 0.01f64..100.0) {
            let m = build_two_corridor_maze(10, 5.0, 1.0).unwrap();
            let ml = ml_heuristic(&solve_underlying_mdp(&m, 1e-8).unwrap());
            let a = ml.action(&Belief::from_weights(w.clone()).unwrap()).unwrap();
            let b = ml.action(&Belief::from_weights(w.iter().map(|x| x * scale).collect()).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn collected_beliefs_are_valid(seed in any::<u64>()) {
            let m = build_two_corridor_maze(8, 5.0, 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = collect_beliefs(&m, 40, &CollectConfig::default(), &mut rng).unwrap();
            prop_assert_eq!(c.beliefs.sample_count(), 40);
            for j in 0..40 {
                prop_assert!(crate::pomdp::simplex_violation(c.beliefs.column(j)).is_none());
            }
        }
    }
}
