use rand::Rng;

use crate::error::{Error, Result};
use crate::pomdp::Belief;

use super::grid::{line_of_sight, Cell, GridMap, DIRS};

/// Robot motion on the person-finding map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RobotAction {
    North,
    East,
    South,
    West,
    Stay,
}

pub const ROBOT_ACTIONS: [RobotAction; 5] =
    [RobotAction::North, RobotAction::East, RobotAction::South, RobotAction::West, RobotAction::Stay];

impl RobotAction {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["north", "east", "south", "west", "stay"][self as usize]
    }
}

/// Eight rooms off a two-row corridor, 284 free cells; the robot starts
/// mid-corridor.
pub const OFFICE_MAP: &str = "\
################################
#.......#.......#.......#......#
#.......#.......#.......#......#
#.......#.......#.......#......#
#.......#.......#.......#......#
####.#######.#######.#######.###
#..............................#
#...............R..............#
####.#######.#######.#######.###
#.......#.......#.......#......#
#.......#.......#.......#......#
#.......#.......#.......#......#
#.......#.......#.......#......#
################################
";

/// Parameters of a person-finding problem.
#[derive(Clone, Debug)]
pub struct PersonFindingModel {
    pub map: GridMap,
    /// Robot start cell; defaults to the map's start.
    pub robot_cell: Option<Cell>,
    /// Initial person belief over free cells in row-major order; uniform when
    /// absent.
    pub person_belief: Option<Belief>,
    pub sensing_range: f64,
    pub false_negative_rate: f64,
    pub person_diffusion: f64,
}

impl PersonFindingModel {
    pub fn new(map: GridMap) -> Self {
        PersonFindingModel {
            map,
            robot_cell: None,
            person_belief: None,
            sensing_range: 3.0,
            false_negative_rate: 0.01,
            person_diffusion: 0.2,
        }
    }

    /// [`OFFICE_MAP`] with 1 m cells and default sensing.
    pub fn office() -> Self {
        PersonFindingModel::new(GridMap::parse(OFFICE_MAP, 1.0).expect("built-in map parses"))
    }
}

/// Compiled person-finding problem. Cells are indexed by their position in
/// the row-major list of free cells.
#[derive(Clone, Debug)]
pub struct PersonFinding {
    pub map: GridMap,
    cells: Vec<Cell>,
    grid_index: Vec<Option<usize>>,
    moves: Vec<[usize; 5]>,
    neighbors: Vec<Vec<usize>>,
    visible: Vec<Vec<usize>>,
    dist: Vec<u32>,
    pub robot_start: usize,
    initial: Belief,
    pub sensing_range: f64,
    pub false_negative_rate: f64,
    pub person_diffusion: f64,
}

pub fn build_person_finding(model: &PersonFindingModel) -> Result<PersonFinding> {
    let map = &model.map;
    let cells = map.free_cells();
    let n = cells.len();
    if n < 2 {
        return Err(Error::Config("person finding needs at least two free cells".into()));
    }
    if !(0.0..=1.0).contains(&model.false_negative_rate) || !(0.0..=1.0).contains(&model.person_diffusion) {
        return Err(Error::Config("false_negative_rate and person_diffusion must lie in [0, 1]".into()));
    }
    if !(model.sensing_range >= 0.0) {
        return Err(Error::Config("sensing_range must be >= 0".into()));
    }
    let robot = model
        .robot_cell
        .or(map.start)
        .ok_or_else(|| Error::Config("person finding needs a robot start cell".into()))?;
    map.check_free(robot, "robot start")?;

    let mut grid_index = vec![None; map.width * map.height];
    for (i, c) in cells.iter().enumerate() {
        grid_index[c.row * map.width + c.col] = Some(i);
    }
    let idx = |c: Cell| grid_index[c.row * map.width + c.col].unwrap();
    let moves: Vec<[usize; 5]> = cells
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut m = [i; 5];
            for (k, &(dr, dc)) in DIRS.iter().enumerate() {
                if let Some(nc) = map.step(c, dr, dc) {
                    m[k] = idx(nc);
                }
            }
            m
        })
        .collect();
    let neighbors = cells.iter().map(|&c| map.neighbors(c).map(idx).collect()).collect();
    // Only cells inside the range box can be visible.
    let reach = (model.sensing_range / map.cell_size).floor() as isize;
    let visible = cells
        .iter()
        .map(|&a| {
            let mut v = Vec::new();
            for dr in -reach..=reach {
                for dc in -reach..=reach {
                    let (r, c) = (a.row as isize + dr, a.col as isize + dc);
                    if !map.contains(r, c) {
                        continue;
                    }
                    let b = Cell::new(r as usize, c as usize);
                    if map.is_free(b) && line_of_sight(map, a, b, model.sensing_range) {
                        v.push(idx(b));
                    }
                }
            }
            v.sort_unstable();
            v
        })
        .collect();
    let mut dist = vec![u32::MAX; n * n];
    for (i, &c) in cells.iter().enumerate() {
        for (k, d) in map.bfs(c).into_iter().enumerate() {
            if let (Some(d), Some(j)) = (d, grid_index[k]) {
                dist[i * n + j] = d;
            }
        }
    }
    let initial = match &model.person_belief {
        Some(b) => {
            if b.len() != n {
                return Err(Error::Dimension(format!("person belief has {} entries for {n} free cells", b.len())));
            }
            b.clone()
        }
        None => Belief::uniform(n),
    };
    Ok(PersonFinding {
        map: map.clone(),
        robot_start: idx(robot),
        cells,
        grid_index,
        moves,
        neighbors,
        visible,
        dist,
        initial,
        sensing_range: model.sensing_range,
        false_negative_rate: model.false_negative_rate,
        person_diffusion: model.person_diffusion,
    })
}

impl PersonFinding {
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, i: usize) -> Cell {
        self.cells[i]
    }

    pub fn cell_index(&self, c: Cell) -> Option<usize> {
        if c.row >= self.map.height || c.col >= self.map.width {
            return None;
        }
        self.grid_index[c.row * self.map.width + c.col]
    }

    pub fn initial_belief(&self) -> Belief {
        self.initial.clone()
    }

    /// Robot cell after `action`; blocked moves stay in place.
    pub fn move_robot(&self, cell: usize, action: RobotAction) -> usize {
        self.moves[cell][action.index()]
    }

    pub fn neighbors(&self, cell: usize) -> &[usize] {
        &self.neighbors[cell]
    }

    /// Cells visible from `cell`, sorted.
    pub fn visible(&self, cell: usize) -> &[usize] {
        &self.visible[cell]
    }

    pub fn is_visible(&self, from: usize, to: usize) -> bool {
        self.visible[from].binary_search(&to).is_ok()
    }

    /// Shortest-path length between two free cells, `None` if disconnected.
    pub fn distance(&self, a: usize, b: usize) -> Option<u32> {
        let d = self.dist[a * self.n_cells() + b];
        (d != u32::MAX).then_some(d)
    }

    /// One step of person motion applied to a belief.
    pub fn diffuse(&self, b: &[f64]) -> Vec<f64> {
        let d = self.person_diffusion;
        let mut out: Vec<f64> = b.iter().map(|p| p * (1.0 - d)).collect();
        for (i, &p) in b.iter().enumerate() {
            let nb = &self.neighbors[i];
            if nb.is_empty() {
                out[i] += p * d;
            } else {
                let share = p * d / nb.len() as f64;
                for &j in nb {
                    out[j] += share;
                }
            }
        }
        out
    }

    /// Probability of a detection from `robot` under belief `b`.
    pub fn detection_prob(&self, b: &[f64], robot: usize) -> f64 {
        let mass: f64 = self.visible[robot].iter().map(|&j| b[j]).sum();
        (1.0 - self.false_negative_rate) * mass
    }

    /// Posterior after a "not detected" reading from `robot`, together with
    /// the probability of that reading.
    pub fn not_detected(&self, b: &[f64], robot: usize) -> Result<(Belief, f64)> {
        let mut out = b.to_vec();
        for &j in &self.visible[robot] {
            out[j] *= self.false_negative_rate;
        }
        let z: f64 = out.iter().sum();
        if z <= 0.0 {
            return Err(Error::ImpossibleObservation { action: robot, observation: 0 });
        }
        for p in &mut out {
            *p /= z;
        }
        Ok((Belief::from_vector_unchecked(out.into()), z))
    }

    /// Samples the person's next cell.
    pub fn step_person<R: Rng + ?Sized>(&self, person: usize, rng: &mut R) -> usize {
        let nb = &self.neighbors[person];
        if nb.is_empty() || !rng.gen_bool(self.person_diffusion) {
            return person;
        }
        nb[rng.gen_range(0..nb.len())]
    }

    /// Samples whether the robot detects the person.
    pub fn sample_detection<R: Rng + ?Sized>(&self, robot: usize, person: usize, rng: &mut R) -> bool {
        self.is_visible(robot, person) && rng.gen::<f64>() >= self.false_negative_rate
    }
}
