//! Planning in the compressed belief space.
//!
//! The learned surface is discretized into prototypes `b̃*`. Each prototype
//! is mapped back to a belief, pushed through the exact filter for every
//! action and observation, compressed again and snapped onto the prototype
//! set by an averager. This gives a finite MDP over prototypes that is
//! solved by fitted value iteration.

mod factored;
mod prototypes;
mod refine;

pub use factored::{plan_factored, FactoredConfig, FactoredPlan};
pub use prototypes::{approximator_weights, build_prototypes, ApproximatorKind, GridSpec, PrototypeConfig, PrototypeSet};
pub use refine::{
    disagreement, factored_disagreement, refine_factored, refine_prototypes, Disagreement, LoggedTransition,
    RefineConfig,
};

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::controllers::BeliefPolicy;
use crate::epca::{compress, compress_from, reconstruct_belief, BasisMatrix, EpcaConfig};
use crate::error::{Error, Result};
use crate::pomdp::{sample_index, Belief, Pomdp};

/// A finite MDP over prototypes with sparse transition rows.
#[derive(Clone, Debug)]
pub struct LowDimMdp {
    n_states: usize,
    n_actions: usize,
    rewards: Vec<f64>,
    row_start: Vec<usize>,
    entries: Vec<(usize, f64)>,
    pub discount: f64,
    terminal: Vec<bool>,
    pub value: Vec<f64>,
}

impl LowDimMdp {
    /// Assembles an MDP from per-(state, action) rows in row-major order.
    pub fn from_rows(
        n_states: usize,
        n_actions: usize,
        rewards: Vec<f64>,
        rows: Vec<Vec<(usize, f64)>>,
        discount: f64,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        if rewards.len() != n_states * n_actions || rows.len() != n_states * n_actions || terminal.len() != n_actions {
            return Err(Error::Dimension("reward, transition and terminal tables disagree in size".into()));
        }
        let mut row_start = Vec::with_capacity(rows.len() + 1);
        let mut entries = Vec::with_capacity(rows.iter().map(Vec::len).sum());
        row_start.push(0);
        for row in rows {
            for &(j, _) in &row {
                if j >= n_states {
                    return Err(Error::Dimension(format!("transition target {j} out of {n_states} states")));
                }
            }
            entries.extend(row);
            row_start.push(entries.len());
        }
        Ok(LowDimMdp { n_states, n_actions, rewards, row_start, entries, discount, terminal, value: vec![0.0; n_states] })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn reward(&self, i: usize, a: usize) -> f64 {
        self.rewards[i * self.n_actions + a]
    }

    pub fn row(&self, i: usize, a: usize) -> &[(usize, f64)] {
        let k = i * self.n_actions + a;
        &self.entries[self.row_start[k]..self.row_start[k + 1]]
    }

    pub fn is_terminal(&self, a: usize) -> bool {
        self.terminal[a]
    }

    pub fn terminal_actions(&self) -> &[bool] {
        &self.terminal
    }

    /// Bellman backup of `(i, a)` under `v`.
    pub fn q(&self, i: usize, a: usize, v: &[f64]) -> f64 {
        let r = self.reward(i, a);
        if self.terminal[a] {
            return r;
        }
        r + self.discount * self.row(i, a).iter().map(|&(j, p)| p * v[j]).sum::<f64>()
    }

    /// Greedy action at prototype `i` under the stored values.
    pub fn greedy(&self, i: usize) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for a in 0..self.n_actions {
            let q = self.q(i, a, &self.value);
            if q > best.1 {
                best = (a, q);
            }
        }
        best.0
    }

    /// Largest deviation of a row sum from one, and the smallest entry.
    pub fn stochasticity(&self) -> (f64, f64) {
        let mut worst = 0.0f64;
        let mut min_entry = f64::INFINITY;
        for k in 0..self.n_states * self.n_actions {
            let row = &self.entries[self.row_start[k]..self.row_start[k + 1]];
            let s: f64 = row.iter().map(|e| e.1).sum();
            worst = worst.max((s - 1.0).abs());
            for e in row {
                min_entry = min_entry.min(e.1);
            }
        }
        (worst, min_entry)
    }

    pub fn check_stochastic(&self, tol: f64) -> Result<()> {
        let (dev, min) = self.stochasticity();
        if dev > tol || min < 0.0 {
            return Err(Error::Invariant(format!("transition rows deviate from stochastic by {dev:e} (min entry {min:e})")));
        }
        Ok(())
    }

    /// All rows as `(state, action, target, probability)` triplets.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        (0..self.n_states * self.n_actions).flat_map(move |k| {
            self.entries[self.row_start[k]..self.row_start[k + 1]]
                .iter()
                .map(move |&(j, p)| (k / self.n_actions, k % self.n_actions, j, p))
        })
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }
}

/// `R̃*(i, a) = Σ_s R(s, a) b_i(s)` with `b_i` the renormalized
/// reconstruction of prototype `i`.
pub fn build_reward(p: &PrototypeSet, m: &Pomdp, u: &BasisMatrix) -> Result<Vec<f64>> {
    let na = m.n_actions();
    let rows = (0..p.len())
        .into_par_iter()
        .map(|i| {
            let b = reconstruct_belief(u, p.prototype(i)).map_err(|e| prototype_error(e, i))?;
            Ok((0..na).map(|a| m.expected_reward(&b, a)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

fn prototype_error(e: Error, i: usize) -> Error {
    Error::Numerical(format!("prototype {i}: {e}"))
}

/// Options for building transitions and solving the prototype MDP.
#[derive(Clone, Debug)]
pub struct PlannerConfig {
    /// Observations with `p(z | b_a)` at or below this are dropped and the
    /// row renormalized.
    pub z_floor: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Settings for compressing posteriors.
    pub epca: EpcaConfig,
    pub lookahead: Lookahead,
}

/// How an executed policy scores actions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lookahead {
    /// `Q` of the prototype MDP at the prototypes carrying the query's weight.
    #[default]
    Prototype,
    /// Expected reward under the tracked belief plus the discounted value of
    /// each compressed posterior, weighted by its observation probability.
    Belief,
}

impl std::str::FromStr for Lookahead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prototype" => Ok(Lookahead::Prototype),
            "belief" => Ok(Lookahead::Belief),
            other => Err(Error::Config(format!("unknown lookahead {other:?}; expected prototype or belief"))),
        }
    }
}

/// Ridge weight for fits and compressions that feed a planner. Beliefs with
/// exact zeros leave flat directions in coordinate space; a stronger ridge
/// keeps their coordinates, and so the prototype they snap to, stable.
pub const PLANNING_REGULARIZER: f64 = 1e-2;

/// E-PCA settings used for planning.
pub fn planning_epca(rank: usize, seed: u64) -> EpcaConfig {
    EpcaConfig { newton_regularizer: PLANNING_REGULARIZER, ..EpcaConfig::with_rank(rank, seed) }
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { z_floor: 1e-6, tol: 1e-4, max_iters: 10_000, epca: planning_epca(EpcaConfig::default().rank, 0), lookahead: Lookahead::Prototype }
    }
}

/// `T̃*(i, a, ·)` for every prototype and action. Rows of terminal actions
/// are self-loops; value iteration ignores their continuation.
pub fn build_transitions(p: &PrototypeSet, m: &Pomdp, u: &BasisMatrix, cfg: &PlannerConfig) -> Result<Vec<Vec<(usize, f64)>>> {
    let na = m.n_actions();
    let rows = (0..p.len() * na)
        .into_par_iter()
        .map(|k| {
            let (i, a) = (k / na, k % na);
            if m.is_terminal(a) {
                return Ok(vec![(i, 1.0)]);
            }
            let b = reconstruct_belief(u, p.prototype(i)).map_err(|e| prototype_error(e, i))?;
            let b_a = m.predict(&b, a);
            let pz = m.observation_probs(&b_a, a);
            let mut acc: Vec<(usize, f64)> = Vec::new();
            for (z, &pz) in pz.iter().enumerate() {
                if pz <= cfg.z_floor {
                    continue;
                }
                let (post, _) = m.update(&b_a, a, z)?;
                let c = compress_from(u, post.probs(), p.prototype(i), &cfg.epca)
                    .map_err(|e| Error::Numerical(format!("compressing (prototype {i}, action {a}, observation {z}): {e}")))?;
                for (j, w) in approximator_weights(p, &c) {
                    match acc.iter_mut().find(|e| e.0 == j) {
                        Some(e) => e.1 += pz * w,
                        None => acc.push((j, pz * w)),
                    }
                }
            }
            let total: f64 = acc.iter().map(|e| e.1).sum();
            if total <= 0.0 {
                return Err(Error::Numerical(format!("prototype {i}, action {a}: every observation fell below z_floor")));
            }
            acc.sort_by_key(|e| e.0);
            for e in &mut acc {
                e.1 /= total;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows)
}

/// Outcome of [`value_iteration`].
#[derive(Clone, Debug)]
pub struct ValueSolution {
    pub values: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Consecutive residual increases tolerated before declaring divergence.
const DIVERGENCE_WINDOW: usize = 100;

/// Synchronous value iteration from `V = 0` until the max-norm Bellman
/// residual drops below `tol` or `max_iters` is reached.
pub fn value_iteration(mdp: &LowDimMdp, tol: f64, max_iters: usize) -> Result<ValueSolution> {
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let mut residual = f64::INFINITY;
    let mut rising = 0;
    for it in 1..=max_iters {
        let next: Vec<f64> = (0..n)
            .into_par_iter()
            .with_min_len(256)
            .map(|i| (0..mdp.n_actions()).map(|a| mdp.q(i, a, &v)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let r = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if !r.is_finite() {
            return Err(Error::Model(format!("value iteration produced a non-finite residual at iteration {it}")));
        }
        rising = if r > residual { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_WINDOW {
            return Err(Error::Model(format!("value iteration diverges: residual grew for {DIVERGENCE_WINDOW} iterations")));
        }
        residual = r;
        v = next;
        if residual < tol {
            return Ok(ValueSolution { values: v, iterations: it, residual, converged: true });
        }
    }
    Ok(ValueSolution { values: v, iterations: max_iters, residual, converged: false })
}

/// Greedy one-step lookahead at the prototypes carrying the query's weight.
/// Ties go to the lowest action index.
pub fn policy_action(mdp: &LowDimMdp, p: &PrototypeSet, btilde: &DVector<f64>) -> usize {
    let w = approximator_weights(p, btilde);
    let mut best = (0, f64::NEG_INFINITY);
    for a in 0..mdp.n_actions() {
        let q: f64 = w.iter().map(|&(i, wi)| wi * mdp.q(i, a, &mdp.value)).sum();
        if q > best.1 {
            best = (a, q);
        }
    }
    best.0
}

/// A solved planner: basis, prototypes and the prototype MDP.
#[derive(Clone, Debug)]
pub struct Planner {
    pub basis: BasisMatrix,
    pub prototypes: PrototypeSet,
    pub mdp: LowDimMdp,
    pub epca: EpcaConfig,
    pub solution: ValueSolution,
    pub lookahead: Lookahead,
    pub z_floor: f64,
    model: Pomdp,
}

impl Planner {
    /// Builds `R̃*` and `T̃*` and runs value iteration.
    pub fn build(m: &Pomdp, basis: BasisMatrix, prototypes: PrototypeSet, cfg: &PlannerConfig) -> Result<Planner> {
        if basis.state_count() != m.n_states() {
            return Err(Error::Dimension(format!(
                "basis has {} rows for a model with {} states",
                basis.state_count(),
                m.n_states()
            )));
        }
        if prototypes.rank() != basis.rank() {
            return Err(Error::Dimension("prototype dimension differs from basis rank".into()));
        }
        let rewards = build_reward(&prototypes, m, &basis)?;
        let rows = build_transitions(&prototypes, m, &basis, cfg)?;
        let mut mdp = LowDimMdp::from_rows(
            prototypes.len(),
            m.n_actions(),
            rewards,
            rows,
            m.discount(),
            m.terminal_actions().to_vec(),
        )?;
        mdp.check_stochastic(1e-6)?;
        let solution = value_iteration(&mdp, cfg.tol, cfg.max_iters)?;
        mdp.value = solution.values.clone();
        Ok(Planner {
            basis,
            prototypes,
            mdp,
            epca: cfg.epca.clone(),
            solution,
            lookahead: cfg.lookahead,
            z_floor: cfg.z_floor,
            model: m.clone(),
        })
    }

    /// Reassembles a planner from a stored prototype MDP.
    pub fn from_parts(
        m: &Pomdp,
        basis: BasisMatrix,
        prototypes: PrototypeSet,
        mdp: LowDimMdp,
        solution: ValueSolution,
        cfg: &PlannerConfig,
    ) -> Result<Planner> {
        if basis.state_count() != m.n_states() || prototypes.rank() != basis.rank() {
            return Err(Error::Dimension("basis, prototypes and model disagree in size".into()));
        }
        if mdp.n_states() != prototypes.len() || mdp.n_actions() != m.n_actions() {
            return Err(Error::Dimension("prototype MDP does not match the prototypes and model".into()));
        }
        Ok(Planner {
            basis,
            prototypes,
            mdp,
            epca: cfg.epca.clone(),
            solution,
            lookahead: cfg.lookahead,
            z_floor: cfg.z_floor,
            model: m.clone(),
        })
    }

    pub fn model(&self) -> &Pomdp {
        &self.model
    }

    pub fn compress(&self, b: &Belief) -> Result<DVector<f64>> {
        compress(&self.basis, b.probs(), &self.epca)
    }

    pub fn act_on_coords(&self, c: &DVector<f64>) -> usize {
        policy_action(&self.mdp, &self.prototypes, c)
    }

    /// Belief-level one-step lookahead; `c` is the compressed `b`, used to
    /// warm-start the posterior compressions. Ties go to the lowest action.
    pub fn act_on_belief(&self, b: &Belief, c: &DVector<f64>) -> Result<usize> {
        let m = &self.model;
        let mut best = (0, f64::NEG_INFINITY);
        for a in 0..m.n_actions() {
            let mut q = m.expected_reward(b, a);
            if !m.is_terminal(a) {
                let b_a = m.predict(b, a);
                let mut cont = 0.0;
                for (z, pz) in m.observation_probs(&b_a, a).into_iter().enumerate() {
                    if pz <= self.z_floor {
                        continue;
                    }
                    let (post, _) = m.update(&b_a, a, z)?;
                    let c2 = compress_from(&self.basis, post.probs(), c, &self.epca)?;
                    let v: f64 = approximator_weights(&self.prototypes, &c2).iter().map(|&(j, w)| w * self.mdp.value[j]).sum();
                    cont += pz * v;
                }
                q += self.mdp.discount * cont;
            }
            if q > best.1 {
                best = (a, q);
            }
        }
        Ok(best.0)
    }

    /// Action under the configured lookahead.
    pub fn act(&self, b: &Belief, c: &DVector<f64>) -> Result<usize> {
        match self.lookahead {
            Lookahead::Prototype => Ok(self.act_on_coords(c)),
            Lookahead::Belief => self.act_on_belief(b, c),
        }
    }
}

impl BeliefPolicy for Planner {
    fn action(&self, b: &Belief) -> Result<usize> {
        self.act(b, &self.compress(b)?)
    }
}

/// One step of an executed policy.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub belief: Belief,
    pub coords: DVector<f64>,
    pub prototype: usize,
    pub action: usize,
    pub observation: Option<usize>,
    pub reward: f64,
}

#[derive(Clone, Debug)]
pub struct PolicyEpisode {
    pub steps: Vec<StepRecord>,
    pub total_reward: f64,
    pub success: bool,
}

impl PolicyEpisode {
    /// Consecutive `(b̃, a, b̃')` pairs, for refinement.
    pub fn transitions(&self) -> Vec<LoggedTransition> {
        self.steps
            .iter()
            .enumerate()
            .map(|(k, s)| LoggedTransition {
                cell: None,
                coords: s.coords.clone(),
                action: s.action,
                next: self.steps.get(k + 1).map(|n| n.coords.clone()),
            })
            .filter(|t| t.next.is_some())
            .collect()
    }
}

/// Simulates the planner's greedy policy with the exact filter, compressing
/// the belief at every step.
pub fn execute_policy<R: Rng + ?Sized>(m: &Pomdp, planner: &Planner, rng: &mut R, max_steps: usize) -> Result<PolicyEpisode> {
    let mut b = m.initial_belief();
    let mut s = sample_index(b.probs(), rng);
    let mut ep = PolicyEpisode { steps: Vec::new(), total_reward: 0.0, success: false };
    let mut warm: Option<DVector<f64>> = None;
    for _ in 0..max_steps {
        let c = match &warm {
            Some(w) => compress_from(&planner.basis, b.probs(), w, &planner.epca)?,
            None => planner.compress(&b)?,
        };
        let prototype = approximator_weights(&planner.prototypes, &c)[0].0;
        let a = planner.act(&b, &c)?;
        let (s2, z, r) = m.simulate_step(s, a, rng);
        ep.total_reward += r;
        let terminal = m.is_terminal(a);
        ep.steps.push(StepRecord {
            belief: b.clone(),
            coords: c.clone(),
            prototype,
            action: a,
            observation: (!terminal).then_some(z),
            reward: r,
        });
        if terminal {
            ep.success = r > 0.0;
            break;
        }
        b = m.update(&m.predict(&b, a), a, z)?.0;
        s = s2;
        warm = Some(c);
    }
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_mdp(discount: f64) -> LowDimMdp {
        // 0 -> 1 -> 2, action 1 is terminal and pays 5 at prototype 2.
        let rows = vec![vec![(1, 1.0)], vec![(0, 1.0)], vec![(2, 1.0)], vec![(1, 1.0)], vec![(2, 1.0)], vec![(2, 1.0)]];
        let rewards = vec![-1.0, 0.0, -1.0, 0.0, -1.0, 5.0];
        LowDimMdp::from_rows(3, 2, rewards, rows, discount, vec![false, true]).unwrap()
    }

    #[test]
    fn zero_rewards_zero_values() {
        let mdp = LowDimMdp::from_rows(2, 1, vec![0.0; 2], vec![vec![(1, 1.0)], vec![(0, 1.0)]], 0.9, vec![false]).unwrap();
        let v = value_iteration(&mdp, 1e-10, 100).unwrap();
        assert!(v.converged);
        assert!(v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_prototype_geometric() {
        let mdp = LowDimMdp::from_rows(1, 1, vec![1.0], vec![vec![(0, 1.0)]], 0.9, vec![false]).unwrap();
        let v = value_iteration(&mdp, 1e-9, 10_000).unwrap();
        assert!((v.values[0] - 10.0).abs() < 1e-7);
    }

    #[test]
    fn hand_chain() {
        let mdp = chain_mdp(0.9);
        let v = value_iteration(&mdp, 1e-12, 1000).unwrap();
        let v2 = 5.0;
        let v1 = -1.0 + 0.9 * v2;
        let v0 = -1.0 + 0.9 * v1;
        assert!((v.values[2] - v2).abs() < 1e-9);
        assert!((v.values[1] - v1).abs() < 1e-9);
        assert!((v.values[0] - v0).abs() < 1e-9);
    }

    #[test]
    fn undiscounted_growth_is_divergence() {
        let mdp = LowDimMdp::from_rows(1, 1, vec![1.0], vec![vec![(0, 1.0)]], 1.0, vec![false]).unwrap();
        // Residual stays at 1; it never rises, so this simply does not converge.
        let v = value_iteration(&mdp, 1e-6, 500).unwrap();
        assert!(!v.converged);
        let mut rows = Vec::new();
        rows.push(vec![(0, 1.0)]);
        let mdp = LowDimMdp::from_rows(1, 1, vec![1.0], rows, 1.5, vec![false]).unwrap();
        assert!(matches!(value_iteration(&mdp, 1e-6, 10_000), Err(Error::Model(_))));
    }

    #[test]
    fn residual_is_monotone_for_contractions() {
        let mdp = chain_mdp(0.95);
        let mut v = vec![0.0; 3];
        let mut last = f64::INFINITY;
        for it in 0..50 {
            let next: Vec<f64> = (0..3).map(|i| (0..2).map(|a| mdp.q(i, a, &v)).fold(f64::NEG_INFINITY, f64::max)).collect();
            let r = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if it > 0 {
                assert!(r <= last + 1e-12);
            }
            last = r;
            v = next;
        }
    }

    #[test]
    fn single_action_policy() {
        let mdp = LowDimMdp::from_rows(1, 1, vec![1.0], vec![vec![(0, 1.0)]], 0.9, vec![false]).unwrap();
        let p = PrototypeSet::nearest_neighbor(vec![DVector::from_vec(vec![0.0])]).unwrap();
        assert_eq!(policy_action(&mdp, &p, &DVector::from_vec(vec![3.0])), 0);
    }

    #[test]
    fn dominant_terminal_reward_wins() {
        let mut mdp = chain_mdp(0.9);
        mdp.value = value_iteration(&mdp, 1e-10, 1000).unwrap().values;
        let p = PrototypeSet::nearest_neighbor((0..3).map(|k| DVector::from_vec(vec![k as f64])).collect()).unwrap();
        assert_eq!(policy_action(&mdp, &p, &DVector::from_vec(vec![2.0])), 1);
        assert_eq!(policy_action(&mdp, &p, &DVector::from_vec(vec![0.1])), 0);
    }
}
