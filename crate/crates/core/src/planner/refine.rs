use std::collections::BTreeMap;

use nalgebra::DVector;

use super::{FactoredPlan, LowDimMdp, PrototypeSet};
use crate::error::Result;
use crate::problems::{PersonFinding, ROBOT_ACTIONS};

/// A compressed-belief transition observed while executing a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct LoggedTransition {
    /// Robot cell, for factored plans.
    pub cell: Option<usize>,
    pub coords: DVector<f64>,
    pub action: usize,
    /// Compressed successor belief; `None` when the episode ended.
    pub next: Option<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct RefineConfig {
    /// Total-variation distance above which a cell is split.
    pub threshold: f64,
    /// Pairs visited fewer times are not judged.
    pub min_visits: usize,
    /// Cap on new prototypes taken from one split cell.
    pub max_new_per_cell: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { threshold: 0.2, min_visits: 10, max_new_per_cell: 10 }
    }
}

/// Total-variation distance between model and experience at one
/// (prototype, action) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Disagreement {
    pub prototype: usize,
    pub action: usize,
    pub visits: usize,
    pub tv: f64,
}

struct Group {
    visits: usize,
    model: BTreeMap<usize, f64>,
    seen: BTreeMap<usize, f64>,
    members: Vec<usize>,
}

fn grouped<F>(p: &PrototypeSet, log: &[LoggedTransition], model_row: F) -> BTreeMap<(usize, usize), Group>
where
    F: Fn(&LoggedTransition, usize) -> Vec<(usize, f64)>,
{
    let mut groups: BTreeMap<(usize, usize), Group> = BTreeMap::new();
    for (k, t) in log.iter().enumerate() {
        let Some(next) = &t.next else { continue };
        let i = p.locate(&t.coords);
        let g = groups.entry((i, t.action)).or_insert_with(|| Group {
            visits: 0,
            model: BTreeMap::new(),
            seen: BTreeMap::new(),
            members: Vec::new(),
        });
        g.visits += 1;
        for (j, q) in model_row(t, i) {
            *g.model.entry(j).or_default() += q;
        }
        *g.seen.entry(p.locate(next)).or_default() += 1.0;
        g.members.push(k);
    }
    groups
}

fn tv(g: &Group) -> f64 {
    let n = g.visits as f64;
    let mut keys: Vec<usize> = g.model.keys().chain(g.seen.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    0.5 * keys
        .iter()
        .map(|j| (g.model.get(j).copied().unwrap_or(0.0) / n - g.seen.get(j).copied().unwrap_or(0.0) / n).abs())
        .sum::<f64>()
}

fn report(groups: &BTreeMap<(usize, usize), Group>, min_visits: usize) -> Vec<Disagreement> {
    groups
        .iter()
        .filter(|(_, g)| g.visits >= min_visits)
        .map(|(&(i, a), g)| Disagreement { prototype: i, action: a, visits: g.visits, tv: tv(g) })
        .collect()
}

fn split<F>(p: &PrototypeSet, log: &[LoggedTransition], cfg: &RefineConfig, model_row: F) -> Result<(PrototypeSet, Vec<Disagreement>)>
where
    F: Fn(&LoggedTransition, usize) -> Vec<(usize, f64)>,
{
    let groups = grouped(p, log, model_row);
    let mut split_cells = Vec::new();
    let mut extra = Vec::new();
    for d in report(&groups, cfg.min_visits) {
        if d.tv <= cfg.threshold {
            continue;
        }
        let g = &groups[&(d.prototype, d.action)];
        let mut added = 0;
        for &k in &g.members {
            if added == cfg.max_new_per_cell {
                break;
            }
            let c = log[k].coords.clone();
            if !extra.contains(&c) && !p.prototypes().contains(&c) {
                extra.push(c);
                added += 1;
            }
        }
        split_cells.push(d);
    }
    if extra.is_empty() {
        return Ok((p.clone(), split_cells));
    }
    Ok((p.extended(extra)?, split_cells))
}

/// Disagreement statistics of a prototype MDP over a rollout log.
pub fn disagreement(p: &PrototypeSet, mdp: &LowDimMdp, log: &[LoggedTransition], min_visits: usize) -> Vec<Disagreement> {
    report(&grouped(p, log, |t, i| mdp.row(i, t.action).to_vec()), min_visits)
}

/// Splits every cell whose model transition row disagrees with the
/// rollouts, adding the compressed beliefs logged in that cell as new
/// prototypes. Returns the new set
/// and the pairs that were split; the set is unchanged when nothing is.
pub fn refine_prototypes(
    p: &PrototypeSet,
    mdp: &LowDimMdp,
    log: &[LoggedTransition],
    cfg: &RefineConfig,
) -> Result<(PrototypeSet, Vec<Disagreement>)> {
    split(p, log, cfg, |t, i| mdp.row(i, t.action).to_vec())
}

fn factored_row(pf: &PersonFinding, plan: &FactoredPlan, t: &LoggedTransition, i: usize) -> Vec<(usize, f64)> {
    let cell = t.cell.expect("factored transitions carry the robot cell");
    let next_cell = pf.move_robot(cell, ROBOT_ACTIONS[t.action]);
    vec![(plan.successor(next_cell, i).1, 1.0)]
}

/// Person-belief disagreement of a factored plan: the model's successor
/// prototype after a missed detection against the one actually reached.
pub fn factored_disagreement(
    pf: &PersonFinding,
    plan: &FactoredPlan,
    log: &[LoggedTransition],
    min_visits: usize,
) -> Vec<Disagreement> {
    report(&grouped(&plan.prototypes, log, |t, i| factored_row(pf, plan, t, i)), min_visits)
}

/// Refinement of the person-belief prototypes of a factored plan.
pub fn refine_factored(
    pf: &PersonFinding,
    plan: &FactoredPlan,
    log: &[LoggedTransition],
    cfg: &RefineConfig,
) -> Result<(PrototypeSet, Vec<Disagreement>)> {
    split(&plan.prototypes, log, cfg, |t, i| factored_row(pf, plan, t, i))
}
