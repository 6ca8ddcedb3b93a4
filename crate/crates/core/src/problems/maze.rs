use crate::error::{Error, Result};
use crate::pomdp::Pomdp;

use super::{von_mises_weights, VonMisesSpec};

/// The two-corridor maze. Each corridor is a ring of `states_per_corridor`
/// positions; state `corridor * n + position`.
///
/// Observations `0..n` report a noisy position (identical in both corridors),
/// `n` and `n + 1` name the corridor.
#[derive(Clone, Debug)]
pub struct MazeConfig {
    pub states_per_corridor: usize,
    pub motion_kappa: f64,
    pub obs_kappa: f64,
    pub initial_kappa: f64,
    /// Half-width of the goal region around each corridor's goal position.
    /// Defaults to `max(1, n / 10)`.
    pub goal_halfwidth: Option<usize>,
    pub goal_reward: f64,
    pub wrong_goal_reward: f64,
    pub step_reward: f64,
    pub discount: f64,
}

pub const MAZE_ACTIONS: [&str; 4] = ["left", "right", "sense_corridor", "declare_goal"];

impl MazeConfig {
    pub fn new(states_per_corridor: usize) -> Self {
        MazeConfig {
            states_per_corridor,
            motion_kappa: 5.0,
            obs_kappa: 1.0,
            initial_kappa: 1.0,
            goal_halfwidth: None,
            goal_reward: 100.0,
            wrong_goal_reward: -100.0,
            step_reward: -1.0,
            discount: 0.95,
        }
    }

    pub fn halfwidth(&self) -> usize {
        self.goal_halfwidth.unwrap_or((self.states_per_corridor / 10).max(1))
    }

    /// Goal position of a corridor: a quarter of the way round in corridor 0,
    /// three quarters in corridor 1.
    pub fn goal_position(&self, corridor: usize) -> usize {
        let n = self.states_per_corridor;
        if corridor == 0 { n / 4 } else { (3 * n) / 4 }
    }

    pub fn in_goal(&self, state: usize) -> bool {
        let n = self.states_per_corridor;
        let (corridor, pos) = (state / n, state % n);
        let g = self.goal_position(corridor);
        let d = pos.abs_diff(g);
        d.min(n - d) <= self.halfwidth()
    }

    pub fn build(&self) -> Result<Pomdp> {
        let n = self.states_per_corridor;
        if n < 2 {
            return Err(Error::Config(format!("states_per_corridor must be at least 2, got {n}")));
        }
        let ns = 2 * n;
        let states = (0..ns).map(|s| format!("c{}p{}", s / n, s % n)).collect();
        let mut observations: Vec<String> = (0..n).map(|p| format!("pos{p}")).collect();
        observations.push("corridor0".into());
        observations.push("corridor1".into());
        let actions = MAZE_ACTIONS.iter().map(|s| s.to_string()).collect();
        let mut m = Pomdp::zeros(states, actions, observations, self.discount);

        let motion = von_mises_weights(&VonMisesSpec { support_size: n, mean: 0, concentration: self.motion_kappa })?;
        let sensor = von_mises_weights(&VonMisesSpec { support_size: n, mean: 0, concentration: self.obs_kappa })?;
        let start = von_mises_weights(&VonMisesSpec { support_size: n, mean: 0, concentration: self.initial_kappa })?;
        let initial: Vec<f64> = (0..ns).map(|s| 0.5 * start[s % n]).collect();

        for s in 0..ns {
            let (c, p) = (s / n, s % n);
            for (a, shift) in [(0, n - 1), (1, 1)] {
                let centre = (p + shift) % n;
                for q in 0..n {
                    m.set_transition(s, a, c * n + q, motion[(q + n - centre) % n]);
                }
            }
            m.set_transition(s, 2, s, 1.0);
            for (s2, &p0) in initial.iter().enumerate() {
                m.set_transition(s, 3, s2, p0);
            }

            for z in 0..n {
                let w = sensor[(z + n - p) % n];
                m.set_observation(z, 0, s, w);
                m.set_observation(z, 1, s, w);
                m.set_observation(z, 3, s, 1.0 / n as f64);
            }
            m.set_observation(n + c, 2, s, 1.0);

            for a in 0..3 {
                m.set_reward(s, a, self.step_reward);
            }
            m.set_reward(s, 3, if self.in_goal(s) { self.goal_reward } else { self.wrong_goal_reward });
        }
        m.set_terminal(3, true);
        m.set_initial_belief(initial)?;
        Ok(m)
    }
}

/// Builds the maze with default rewards, goal regions and discount.
pub fn build_two_corridor_maze(states_per_corridor: usize, motion_kappa: f64, obs_kappa: f64) -> Result<Pomdp> {
    MazeConfig { motion_kappa, obs_kappa, ..MazeConfig::new(states_per_corridor) }.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pomdp::Belief;

    #[test]
    fn sizes() {
        let m = build_two_corridor_maze(100, 5.0, 1.0).unwrap();
        assert_eq!((m.n_states(), m.n_actions(), m.n_observations()), (200, 4, 102));
        assert!(m.validate().is_empty());
        let m = build_two_corridor_maze(20, 5.0, 1.0).unwrap();
        assert_eq!(m.n_states(), 40);
        assert!(m.validate().is_empty());
        assert!(build_two_corridor_maze(1, 5.0, 1.0).is_err());
    }

    #[test]
    fn sense_identifies_corridor() {
        let m = build_two_corridor_maze(10, 5.0, 1.0).unwrap();
        for s in 10..20 {
            let b = Belief::delta(20, s);
            let b_a = m.predict(&b, 2);
            assert_eq!(b_a, b);
            let pz = m.observation_probs(&b_a, 2);
            assert_eq!(pz[11], 1.0);
        }
    }

    #[test]
    fn positional_observations_ignore_corridor() {
        let m = build_two_corridor_maze(12, 5.0, 1.0).unwrap();
        for p in 0..12 {
            for a in 0..2 {
                for z in 0..14 {
                    assert_eq!(m.observation(z, a, p), m.observation(z, a, 12 + p));
                }
            }
        }
    }

    #[test]
    fn initial_belief_is_split_evenly() {
        let m = build_two_corridor_maze(20, 5.0, 1.0).unwrap();
        let b = m.initial_belief();
        let top: f64 = b.probs()[..20].iter().sum();
        assert!((top - 0.5).abs() < 1e-12);
        assert!((b.probs()[5] / b.probs()[0] - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn goal_rewards() {
        let cfg = MazeConfig::new(20);
        let m = cfg.build().unwrap();
        assert_eq!(m.reward(5, 3), 100.0);
        assert_eq!(m.reward(20 + 15, 3), 100.0);
        assert_eq!(m.reward(15, 3), -100.0);
        assert_eq!(m.reward(3, 0), -1.0);
        assert_eq!(m.reward(3, 2), -1.0);
        assert!(m.is_terminal(3));
    }
}
