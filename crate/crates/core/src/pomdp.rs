//! Discrete POMDPs: model storage, exact Bayes filtering, expected rewards
//! and trajectory simulation.
//!
//! Tables are dense and row-major. The transition table is indexed
//! `T(s, a, s') = p(s' | s, a)` and the observation table
//! `O(z, a, s') = p(z | s', a)`. Internally both are laid out action-major
//! so that the rows touched by filtering are contiguous.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used for every "sums to one" check on beliefs and model rows.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A probability distribution over the states of a POMDP.
#[derive(Clone, Debug, PartialEq)]
pub struct Belief(DVector<f64>);

impl Belief {
    /// Validates that `probs` lies on the simplex.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if let Some(msg) = simplex_violation(&probs) {
            return Err(Error::Invariant(msg));
        }
        Ok(Belief(DVector::from_vec(probs)))
    }

    /// Normalizes nonnegative weights into a belief.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invariant("belief weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Invariant("belief weights sum to zero".into()));
        }
        Ok(Belief(DVector::from_iterator(weights.len(), weights.iter().map(|w| w / total))))
    }

    pub fn uniform(n: usize) -> Self {
        Belief(DVector::from_element(n, 1.0 / n as f64))
    }

    pub fn delta(n: usize, state: usize) -> Self {
        let mut v = DVector::zeros(n);
        v[state] = 1.0;
        Belief(v)
    }

    pub(crate) fn from_vector_unchecked(v: DVector<f64>) -> Self {
        Belief(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    /// Most likely state; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.0.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }
}

/// Describes why `probs` is not a valid belief, if it is not.
pub fn simplex_violation(probs: &[f64]) -> Option<String> {
    if probs.is_empty() {
        return Some("belief is empty".into());
    }
    if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
        return Some(format!("entry {i} = {p} is not a probability"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Some(format!("entries sum to {sum}"));
    }
    None
}

/// One failed model invariant, as reported by [`Pomdp::validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    TransitionRow { state: usize, action: usize, sum: f64 },
    ObservationSlice { action: usize, state: usize, sum: f64 },
    NegativeEntry { table: &'static str, index: usize, value: f64 },
    InitialBelief(String),
    Discount(f64),
    UnknownTerminalAction(String),
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::TransitionRow { state, action, sum } => {
                write!(f, "transition row (s={state}, a={action}) sums to {sum}")
            }
            Violation::ObservationSlice { action, state, sum } => {
                write!(f, "observation slice (a={action}, s'={state}) sums to {sum}")
            }
            Violation::NegativeEntry { table, index, value } => {
                write!(f, "{table} entry {index} is {value}")
            }
            Violation::InitialBelief(msg) => write!(f, "initial belief: {msg}"),
            Violation::Discount(g) => write!(f, "discount {g} outside [0, 1]"),
            Violation::UnknownTerminalAction(a) => write!(f, "unknown terminal action {a}"),
        }
    }
}

/// A discrete POMDP with dense tables.
#[derive(Clone, Debug)]
pub struct Pomdp {
    states: Vec<String>,
    actions: Vec<String>,
    observations: Vec<String>,
    // [a][s][s']
    transition: Vec<f64>,
    // [a][z][s']
    observation: Vec<f64>,
    // [s][a]
    reward: Vec<f64>,
    discount: f64,
    initial_belief: Vec<f64>,
    terminal: Vec<bool>,
}

impl Pomdp {
    /// Creates a model full of zeros with the given names. Tables are filled
    /// through the `set_*` methods; nothing is validated here.
    pub fn zeros(
        states: Vec<String>,
        actions: Vec<String>,
        observations: Vec<String>,
        discount: f64,
    ) -> Self {
        let (ns, na, nz) = (states.len(), actions.len(), observations.len());
        Pomdp {
            transition: vec![0.0; na * ns * ns],
            observation: vec![0.0; na * nz * ns],
            reward: vec![0.0; ns * na],
            initial_belief: vec![1.0 / ns.max(1) as f64; ns],
            terminal: vec![false; na],
            states,
            actions,
            observations,
            discount,
        }
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn state_names(&self) -> &[String] {
        &self.states
    }

    pub fn action_names(&self) -> &[String] {
        &self.actions
    }

    pub fn observation_names(&self) -> &[String] {
        &self.observations
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a == name)
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn set_discount(&mut self, discount: f64) {
        self.discount = discount;
    }

    pub fn initial_belief(&self) -> Belief {
        Belief::from_vector_unchecked(DVector::from_vec(self.initial_belief.clone()))
    }

    pub fn set_initial_belief(&mut self, probs: Vec<f64>) -> Result<()> {
        if probs.len() != self.n_states() {
            return Err(Error::Dimension(format!(
                "initial belief has {} entries for {} states",
                probs.len(),
                self.n_states()
            )));
        }
        self.initial_belief = probs;
        Ok(())
    }

    pub fn is_terminal(&self, action: usize) -> bool {
        self.terminal[action]
    }

    pub fn terminal_actions(&self) -> &[bool] {
        &self.terminal
    }

    pub fn set_terminal(&mut self, action: usize, terminal: bool) {
        self.terminal[action] = terminal;
    }

    #[inline]
    fn t_index(&self, s: usize, a: usize, s2: usize) -> usize {
        let ns = self.n_states();
        (a * ns + s) * ns + s2
    }

    #[inline]
    fn o_index(&self, z: usize, a: usize, s2: usize) -> usize {
        let ns = self.n_states();
        (a * self.n_observations() + z) * ns + s2
    }

    /// `p(s' | s, a)`.
    #[inline]
    pub fn transition(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[self.t_index(s, a, s2)]
    }

    pub fn set_transition(&mut self, s: usize, a: usize, s2: usize, p: f64) {
        let i = self.t_index(s, a, s2);
        self.transition[i] = p;
    }

    /// Successor distribution `T(s, a, ·)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = self.t_index(s, a, 0);
        &self.transition[start..start + self.n_states()]
    }

    /// `p(z | s', a)`.
    #[inline]
    pub fn observation(&self, z: usize, a: usize, s2: usize) -> f64 {
        self.observation[self.o_index(z, a, s2)]
    }

    pub fn set_observation(&mut self, z: usize, a: usize, s2: usize, p: f64) {
        let i = self.o_index(z, a, s2);
        self.observation[i] = p;
    }

    /// Likelihood of `z` under action `a` for every successor state.
    pub fn observation_slice(&self, a: usize, z: usize) -> &[f64] {
        let start = self.o_index(z, a, 0);
        &self.observation[start..start + self.n_states()]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions() + a]
    }

    pub fn set_reward(&mut self, s: usize, a: usize, r: f64) {
        let na = self.n_actions();
        self.reward[s * na + a] = r;
    }

    /// Belief after acting but before sensing: `b_a(s) = Σ_k T(s_k, a, s) b(s_k)`.
    pub fn predict(&self, b: &Belief, a: usize) -> Belief {
        let ns = self.n_states();
        let mut out = vec![0.0; ns];
        for (s, &p) in b.probs().iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (o, &t) in out.iter_mut().zip(self.transition_row(s, a)) {
                *o += t * p;
            }
        }
        Belief::from_vector_unchecked(DVector::from_vec(out))
    }

    /// `p(z | b_a)` for every observation.
    pub fn observation_probs(&self, b_a: &Belief, a: usize) -> Vec<f64> {
        (0..self.n_observations())
            .map(|z| dot(self.observation_slice(a, z), b_a.probs()))
            .collect()
    }

    /// Bayes correction of a predicted belief. Returns the posterior and the
    /// likelihood `p(z | b_a)`.
    pub fn update(&self, b_a: &Belief, a: usize, z: usize) -> Result<(Belief, f64)> {
        let slice = self.observation_slice(a, z);
        let likelihood = dot(slice, b_a.probs());
        if likelihood <= 0.0 {
            return Err(Error::ImpossibleObservation { action: a, observation: z });
        }
        let post = DVector::from_iterator(
            slice.len(),
            slice.iter().zip(b_a.probs()).map(|(o, p)| o * p / likelihood),
        );
        Ok((Belief::from_vector_unchecked(post), likelihood))
    }

    /// `Σ_s R(s, a) b(s)`.
    pub fn expected_reward(&self, b: &Belief, a: usize) -> f64 {
        b.probs().iter().enumerate().map(|(s, p)| self.reward(s, a) * p).sum()
    }

    /// Samples `(s', z, r)` for one step from true state `s`.
    pub fn simulate_step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> (usize, usize, f64) {
        let s2 = sample_index(self.transition_row(s, a), rng);
        let nz = self.n_observations();
        let z = sample_by(nz, |z| self.observation(z, a, s2), rng);
        (s2, z, self.reward(s, a))
    }

    /// Checks every table invariant; an empty list means the model is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let (ns, na, nz) = (self.n_states(), self.n_actions(), self.n_observations());
        for (table, values) in [("transition", &self.transition), ("observation", &self.observation)] {
            for (index, &value) in values.iter().enumerate() {
                if !value.is_finite() || value < 0.0 {
                    out.push(Violation::NegativeEntry { table, index, value });
                }
            }
        }
        for s in 0..ns {
            for a in 0..na {
                let sum: f64 = self.transition_row(s, a).iter().sum();
                if (sum - 1.0).abs() > SIMPLEX_TOL {
                    out.push(Violation::TransitionRow { state: s, action: a, sum });
                }
            }
        }
        for a in 0..na {
            for s2 in 0..ns {
                let sum: f64 = (0..nz).map(|z| self.observation(z, a, s2)).sum();
                if (sum - 1.0).abs() > SIMPLEX_TOL {
                    out.push(Violation::ObservationSlice { action: a, state: s2, sum });
                }
            }
        }
        if let Some(msg) = simplex_violation(&self.initial_belief) {
            out.push(Violation::InitialBelief(msg));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            out.push(Violation::Discount(self.discount));
        }
        out
    }

    pub fn to_spec(&self) -> PomdpSpec {
        let (ns, na, nz) = (self.n_states(), self.n_actions(), self.n_observations());
        let mut transition = Vec::new();
        for s in 0..ns {
            for a in 0..na {
                for s2 in 0..ns {
                    let p = self.transition(s, a, s2);
                    if p != 0.0 {
                        transition.push((s, a, s2, p));
                    }
                }
            }
        }
        let mut observation = Vec::new();
        for z in 0..nz {
            for a in 0..na {
                for s2 in 0..ns {
                    let p = self.observation(z, a, s2);
                    if p != 0.0 {
                        observation.push((z, a, s2, p));
                    }
                }
            }
        }
        PomdpSpec {
            states: self.states.clone(),
            actions: self.actions.clone(),
            observations: self.observations.clone(),
            transition: TensorSpec::Sparse(transition),
            observation: TensorSpec::Sparse(observation),
            reward: (0..ns).map(|s| (0..na).map(|a| self.reward(s, a)).collect()).collect(),
            discount: self.discount,
            initial_belief: self.initial_belief.clone(),
            terminal_actions: (0..na)
                .filter(|&a| self.terminal[a])
                .map(|a| self.actions[a].clone())
                .collect(),
        }
    }

    /// Builds a model from its file representation. Dimensions are checked;
    /// stochasticity is left to [`Pomdp::validate`].
    pub fn from_spec(spec: &PomdpSpec) -> Result<Self> {
        let (ns, na, nz) = (spec.states.len(), spec.actions.len(), spec.observations.len());
        if ns == 0 || na == 0 || nz == 0 {
            return Err(Error::Config("states, actions and observations must be non-empty".into()));
        }
        let mut m = Pomdp::zeros(
            spec.states.clone(),
            spec.actions.clone(),
            spec.observations.clone(),
            spec.discount,
        );
        spec.transition.fill("transition", [ns, na, ns], |s, a, s2, p| m.set_transition(s, a, s2, p))?;
        spec.observation.fill("observation", [nz, na, ns], |z, a, s2, p| m.set_observation(z, a, s2, p))?;
        if spec.reward.len() != ns || spec.reward.iter().any(|r| r.len() != na) {
            return Err(Error::Dimension(format!("reward must be {ns} x {na}")));
        }
        for (s, row) in spec.reward.iter().enumerate() {
            for (a, &r) in row.iter().enumerate() {
                m.set_reward(s, a, r);
            }
        }
        m.set_initial_belief(spec.initial_belief.clone())?;
        for name in &spec.terminal_actions {
            let a = m
                .action_index(name)
                .ok_or_else(|| Error::Config(format!("unknown terminal action `{name}`")))?;
            m.set_terminal(a, true);
        }
        Ok(m)
    }
}

/// File representation of a [`Pomdp`] (JSON).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PomdpSpec {
    pub states: Vec<String>,
    pub actions: Vec<String>,
    pub observations: Vec<String>,
    /// Indexed `[s][a][s']`.
    pub transition: TensorSpec,
    /// Indexed `[z][a][s']`.
    pub observation: TensorSpec,
    /// Indexed `[s][a]`.
    pub reward: Vec<Vec<f64>>,
    pub discount: f64,
    pub initial_belief: Vec<f64>,
    #[serde(default)]
    pub terminal_actions: Vec<String>,
}

/// A three-index probability table: nested arrays or `[i, j, k, p]` entries.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum TensorSpec {
    Dense(Vec<Vec<Vec<f64>>>),
    Sparse(Vec<(usize, usize, usize, f64)>),
}

impl TensorSpec {
    fn fill(&self, name: &str, dims: [usize; 3], mut set: impl FnMut(usize, usize, usize, f64)) -> Result<()> {
        let bad = || Error::Dimension(format!("{name} must be {} x {} x {}", dims[0], dims[1], dims[2]));
        match self {
            TensorSpec::Dense(t) => {
                if t.len() != dims[0] {
                    return Err(bad());
                }
                for (i, plane) in t.iter().enumerate() {
                    if plane.len() != dims[1] {
                        return Err(bad());
                    }
                    for (j, row) in plane.iter().enumerate() {
                        if row.len() != dims[2] {
                            return Err(bad());
                        }
                        for (k, &p) in row.iter().enumerate() {
                            set(i, j, k, p);
                        }
                    }
                }
            }
            TensorSpec::Sparse(entries) => {
                for &(i, j, k, p) in entries {
                    if i >= dims[0] || j >= dims[1] || k >= dims[2] {
                        return Err(Error::Dimension(format!("{name} entry ({i}, {j}, {k}) out of range")));
                    }
                    set(i, j, k, p);
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws an index from a discrete distribution given as a slice.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    sample_by(probs.len(), |i| probs[i], rng)
}

fn sample_by<R: Rng + ?Sized>(n: usize, prob: impl Fn(usize) -> f64, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for i in 0..n {
        let p = prob(i);
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}
