use nalgebra::DVector;
use rayon::prelude::*;

use super::{value_iteration, LoggedTransition, LowDimMdp, PrototypeSet, ValueSolution};
use crate::controllers::{PersonEpisode, PersonPolicy, PersonView};
use crate::epca::{compress, compress_from, reconstruct_belief, BasisMatrix, EpcaConfig};
use crate::error::{Error, Result};
use crate::problems::{PersonFinding, RobotAction, ROBOT_ACTIONS};

#[derive(Clone, Debug)]
pub struct FactoredConfig {
    pub discount: f64,
    /// Reward for catching the person.
    pub capture_reward: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub epca: EpcaConfig,
}

impl Default for FactoredConfig {
    fn default() -> Self {
        FactoredConfig { discount: 0.95, capture_reward: 1.0, tol: 1e-4, max_iters: 10_000, epca: super::planning_epca(EpcaConfig::default().rank, 0) }
    }
}

/// Plan over (robot cell, person-belief prototype) with one absorbing
/// capture state. State `cell * P + prototype`; the capture state is last.
#[derive(Clone, Debug)]
pub struct FactoredPlan {
    pub basis: BasisMatrix,
    pub prototypes: PrototypeSet,
    pub mdp: LowDimMdp,
    pub epca: EpcaConfig,
    pub solution: ValueSolution,
    n_cells: usize,
    // [cell * P + j] -> (detection probability, successor prototype)
    successors: Vec<(f64, usize)>,
}

impl FactoredPlan {
    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn state(&self, cell: usize, prototype: usize) -> usize {
        cell * self.prototypes.len() + prototype
    }

    pub fn capture_state(&self) -> usize {
        self.n_cells * self.prototypes.len()
    }

    /// Detection probability and successor prototype when the robot arrives
    /// at `cell` with the person belief at prototype `j`.
    pub fn successor(&self, cell: usize, j: usize) -> (f64, usize) {
        self.successors[cell * self.prototypes.len() + j]
    }

    /// Reassembles a plan from a stored MDP. The successor table is read
    /// off the `Stay` rows.
    pub fn from_parts(
        pf: &PersonFinding,
        basis: BasisMatrix,
        prototypes: PrototypeSet,
        mdp: LowDimMdp,
        solution: ValueSolution,
        epca: EpcaConfig,
    ) -> Result<FactoredPlan> {
        let (nc, np) = (pf.n_cells(), prototypes.len());
        let capture = nc * np;
        if basis.state_count() != nc || mdp.n_states() != capture + 1 || mdp.n_actions() != ROBOT_ACTIONS.len() {
            return Err(Error::Dimension("stored plan does not match the map and prototypes".into()));
        }
        let stay = RobotAction::Stay.index();
        let mut successors = Vec::with_capacity(capture);
        for s in 0..capture {
            let (mut p_det, mut next) = (0.0, s % np);
            for &(j, p) in mdp.row(s, stay) {
                if j == capture {
                    p_det = p;
                } else if j / np == s / np {
                    next = j % np;
                } else {
                    return Err(Error::Invariant(format!("stay row of state {s} moves the robot")));
                }
            }
            successors.push((p_det, next));
        }
        Ok(FactoredPlan { basis, prototypes, mdp, epca, solution, n_cells: nc, successors })
    }

    pub fn compress(&self, b: &[f64]) -> Result<DVector<f64>> {
        compress(&self.basis, b, &self.epca)
    }

    /// Greedy action at a robot cell and compressed person belief.
    pub fn act_on_coords(&self, robot: usize, c: &DVector<f64>) -> RobotAction {
        let s = self.state(robot, self.prototypes.locate(c));
        let mut best = (0, f64::NEG_INFINITY);
        for a in 0..self.mdp.n_actions() {
            let q = self.mdp.q(s, a, &self.mdp.value);
            if q > best.1 {
                best = (a, q);
            }
        }
        ROBOT_ACTIONS[best.0]
    }

    /// Compressed transitions of an episode recorded with beliefs.
    pub fn transitions(&self, ep: &PersonEpisode) -> Result<Vec<LoggedTransition>> {
        let coords = ep.beliefs.iter().map(|b| self.compress(b.probs())).collect::<Result<Vec<_>>>()?;
        Ok((0..coords.len().saturating_sub(1))
            .map(|k| LoggedTransition {
                cell: Some(ep.robots[k]),
                coords: coords[k].clone(),
                action: ep.actions[k].index(),
                next: Some(coords[k + 1].clone()),
            })
            .collect())
    }
}

impl PersonPolicy for FactoredPlan {
    fn action(&self, _pf: &PersonFinding, v: &PersonView) -> Result<Option<RobotAction>> {
        let c = self.compress(v.belief.probs())?;
        Ok(Some(self.act_on_coords(v.robot, &c)))
    }
}

/// Builds and solves the factored person-finding plan. For every arrival
/// cell and prototype the reconstructed belief is diffused, the detection
/// probability read off, and the missed-detection posterior compressed and
/// snapped to a prototype. The reward is the expected capture reward.
pub fn plan_factored(pf: &PersonFinding, basis: BasisMatrix, prototypes: PrototypeSet, cfg: &FactoredConfig) -> Result<FactoredPlan> {
    if basis.state_count() != pf.n_cells() {
        return Err(Error::Dimension(format!(
            "basis has {} rows for {} free cells",
            basis.state_count(),
            pf.n_cells()
        )));
    }
    let (nc, np) = (pf.n_cells(), prototypes.len());
    let beliefs = (0..np)
        .into_par_iter()
        .map(|j| {
            let b = reconstruct_belief(&basis, prototypes.prototype(j))?;
            Ok(pf.diffuse(b.probs()))
        })
        .collect::<Result<Vec<_>>>()?;
    let successors = (0..nc * np)
        .into_par_iter()
        .map(|k| {
            let (cell, j) = (k / np, k % np);
            let d = &beliefs[j];
            let p_det = pf.detection_prob(d, cell);
            if p_det >= 1.0 - 1e-12 {
                return Ok((1.0, j));
            }
            let (post, _) = pf.not_detected(d, cell)?;
            let c = compress_from(&basis, post.probs(), prototypes.prototype(j), &cfg.epca)
                .map_err(|e| Error::Numerical(format!("compressing (cell {cell}, prototype {j}): {e}")))?;
            Ok((p_det, prototypes.locate(&c)))
        })
        .collect::<Result<Vec<_>>>()?;

    let na = ROBOT_ACTIONS.len();
    let capture = nc * np;
    let mut rewards = Vec::with_capacity((capture + 1) * na);
    let mut rows = Vec::with_capacity((capture + 1) * na);
    for cell in 0..nc {
        for j in 0..np {
            for &a in &ROBOT_ACTIONS {
                let next = pf.move_robot(cell, a);
                let (p_det, j2) = successors[next * np + j];
                rewards.push(cfg.capture_reward * p_det);
                let mut row = Vec::with_capacity(2);
                if p_det < 1.0 {
                    row.push((next * np + j2, 1.0 - p_det));
                }
                if p_det > 0.0 {
                    row.push((capture, p_det));
                }
                rows.push(row);
            }
        }
    }
    for _ in 0..na {
        rewards.push(0.0);
        rows.push(vec![(capture, 1.0)]);
    }
    let mut mdp = LowDimMdp::from_rows(capture + 1, na, rewards, rows, cfg.discount, vec![false; na])?;
    mdp.check_stochastic(1e-6)?;
    let solution = value_iteration(&mdp, cfg.tol, cfg.max_iters)?;
    mdp.value = solution.values.clone();
    Ok(FactoredPlan { basis, prototypes, mdp, epca: cfg.epca.clone(), solution, n_cells: nc, successors })
}
