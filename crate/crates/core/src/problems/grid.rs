use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pomdp::Pomdp;

/// A grid cell, ordered row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }
}

/// Occupancy grid read from ASCII. `#` is an obstacle, `.` and `,` are free,
/// `G` marks the goal and `R` the robot start (both free).
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    obstacle: Vec<bool>,
    pub goal: Option<Cell>,
    pub start: Option<Cell>,
}

impl GridMap {
    /// An obstacle-free `height x width` map.
    pub fn open(height: usize, width: usize) -> Self {
        GridMap { width, height, cell_size: 1.0, obstacle: vec![false; width * height], goal: None, start: None }
    }

    pub fn parse(text: &str, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) {
            return Err(Error::Config(format!("cell_size {cell_size} must be positive")));
        }
        let lines: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        if lines.is_empty() {
            return Err(Error::Config("map is empty".into()));
        }
        let width = lines[0].chars().count();
        let mut map = GridMap::open(lines.len(), width);
        map.cell_size = cell_size;
        for (row, line) in lines.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::Config(format!("map row {row} has {} cells, expected {width}", line.chars().count())));
            }
            for (col, ch) in line.chars().enumerate() {
                let cell = Cell::new(row, col);
                match ch {
                    '#' => map.obstacle[row * width + col] = true,
                    '.' | ',' => {}
                    'G' => {
                        if map.goal.replace(cell).is_some() {
                            return Err(Error::Config("map has more than one goal".into()));
                        }
                    }
                    'R' => {
                        if map.start.replace(cell).is_some() {
                            return Err(Error::Config("map has more than one robot start".into()));
                        }
                    }
                    other => return Err(Error::Config(format!("unknown map character {other:?} at row {row}, column {col}"))),
                }
            }
        }
        Ok(map)
    }

    pub fn to_ascii(&self) -> String {
        let mut out = String::new();
        for row in 0..self.height {
            for col in 0..self.width {
                let c = Cell::new(row, col);
                let ch = if self.is_obstacle(c) {
                    '#'
                } else if Some(c) == self.goal {
                    'G'
                } else if Some(c) == self.start {
                    'R'
                } else {
                    '.'
                };
                out.push(ch);
            }
            let _ = writeln!(out);
        }
        out
    }

    pub fn contains(&self, row: isize, col: isize) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }

    pub fn is_obstacle(&self, c: Cell) -> bool {
        self.obstacle[c.row * self.width + c.col]
    }

    pub fn is_free(&self, c: Cell) -> bool {
        c.row < self.height && c.col < self.width && !self.is_obstacle(c)
    }

    pub fn set_obstacle(&mut self, c: Cell, blocked: bool) {
        self.obstacle[c.row * self.width + c.col] = blocked;
    }

    /// Free cells in row-major order.
    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| Cell::new(r, c)))
            .filter(|&c| !self.is_obstacle(c))
            .collect()
    }

    /// Free cell one step away in direction `(dr, dc)`, if any.
    pub fn step(&self, c: Cell, dr: isize, dc: isize) -> Option<Cell> {
        let (r, k) = (c.row as isize + dr, c.col as isize + dc);
        if !self.contains(r, k) {
            return None;
        }
        let n = Cell::new(r as usize, k as usize);
        (!self.is_obstacle(n)).then_some(n)
    }

    /// Free 4-neighbors in N, E, S, W order.
    pub fn neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        DIRS.iter().filter_map(move |&(dr, dc)| self.step(c, dr, dc))
    }

    pub(crate) fn check_free(&self, c: Cell, what: &str) -> Result<()> {
        if !self.is_free(c) {
            return Err(Error::Config(format!("{what} ({}, {}) is not a free cell", c.row, c.col)));
        }
        Ok(())
    }

    /// Breadth-first distances over free cells, `None` where unreachable.
    pub fn bfs(&self, from: Cell) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.width * self.height];
        let mut queue = VecDeque::new();
        if self.is_free(from) {
            dist[from.row * self.width + from.col] = Some(0);
            queue.push_back(from);
        }
        while let Some(c) = queue.pop_front() {
            let d = dist[c.row * self.width + c.col].unwrap();
            for n in self.neighbors(c) {
                let slot = &mut dist[n.row * self.width + n.col];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }
}

/// North, east, south, west as `(drow, dcol)`.
pub(crate) const DIRS: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

/// True iff the centers of `a` and `b` are within `range_m` and the discrete
/// ray between them crosses no obstacle cell. A ray passing exactly through a
/// cell corner touches only the two diagonal cells, not the flanking ones.
pub fn line_of_sight(map: &GridMap, a: Cell, b: Cell, range_m: f64) -> bool {
    if a == b {
        return true;
    }
    let dr = b.row as i64 - a.row as i64;
    let dc = b.col as i64 - a.col as i64;
    let dist = ((dr * dr + dc * dc) as f64).sqrt() * map.cell_size;
    if dist > range_m + 1e-9 {
        return false;
    }
    if map.is_obstacle(a) || map.is_obstacle(b) {
        return false;
    }
    let (sr, sc) = (dr.signum(), dc.signum());
    let (nr, nc) = (dr.abs(), dc.abs());
    let (mut r, mut c) = (a.row as i64, a.col as i64);
    let (mut ir, mut ic) = (0i64, 0i64);
    let blocked = |r: i64, c: i64| map.is_obstacle(Cell::new(r as usize, c as usize));
    while ir < nr || ic < nc {
        // Next crossings at t = (2i + 1) / (2n); compare exactly in integers.
        let tr = (2 * ir + 1) * nc;
        let tc = (2 * ic + 1) * nr;
        if ir < nr && (ic >= nc || tr < tc) {
            r += sr;
            ir += 1;
        } else if ic < nc && (ir >= nr || tc < tr) {
            c += sc;
            ic += 1;
        } else {
            r += sr;
            c += sc;
            ir += 1;
            ic += 1;
        }
        if blocked(r, c) {
            return false;
        }
    }
    true
}

/// Parameters of the grid navigation problem.
#[derive(Clone, Debug)]
pub struct GridNavConfig {
    /// Probability that a motion or rotation fails and the robot stays put.
    pub motion_noise: f64,
    pub sensor_range_m: f64,
    /// Probability mass spread uniformly over the three readings of each
    /// direction; zero gives a deterministic sensor.
    pub sensor_noise: f64,
    pub goal_reward: f64,
    pub wrong_goal_reward: f64,
    pub step_reward: f64,
    pub discount: f64,
}

impl Default for GridNavConfig {
    fn default() -> Self {
        GridNavConfig {
            motion_noise: 0.1,
            sensor_range_m: 2.0,
            sensor_noise: 0.0,
            goal_reward: 1000.0,
            wrong_goal_reward: -1000.0,
            step_reward: -1.0,
            discount: 0.95,
        }
    }
}

const GRID_ACTIONS: [&str; 4] = ["forward", "rotate_left", "rotate_right", "at_goal"];
const HEADINGS: [&str; 4] = ["N", "E", "S", "W"];

/// Per-direction reading: 0 = obstacle adjacent, 1 = obstacle within range,
/// 2 = nothing within range. Directions are front, right, back, left.
pub(crate) fn proximity_signature(map: &GridMap, c: Cell, heading: usize, range_cells: usize) -> [usize; 4] {
    let mut sig = [2; 4];
    for (k, s) in sig.iter_mut().enumerate() {
        let (dr, dc) = DIRS[(heading + k) % 4];
        let mut cur = c;
        for d in 1..=range_cells.max(1) {
            match map.step(cur, dr, dc) {
                Some(n) => cur = n,
                None => {
                    *s = if d == 1 { 0 } else { 1 };
                    break;
                }
            }
        }
    }
    sig
}

pub fn signature_index(sig: [usize; 4]) -> usize {
    sig.iter().rev().fold(0, |acc, &q| acc * 3 + q)
}

/// Builds the grid navigation POMDP over free cells x 4 headings. A state is
/// `free_index * 4 + heading`.
pub fn build_grid_nav(map: &GridMap, cfg: &GridNavConfig) -> Result<Pomdp> {
    let start = map.start.ok_or_else(|| Error::Config("grid navigation map needs a start cell 'R'".into()))?;
    let goal = map.goal.ok_or_else(|| Error::Config("grid navigation map needs a goal cell 'G'".into()))?;
    map.check_free(start, "start")?;
    map.check_free(goal, "goal")?;
    if map.bfs(start)[goal.row * map.width + goal.col].is_none() {
        return Err(Error::Model(format!("goal ({}, {}) is unreachable from the start", goal.row, goal.col)));
    }
    if !(0.0..=1.0).contains(&cfg.motion_noise) || !(0.0..=1.0).contains(&cfg.sensor_noise) {
        return Err(Error::Config("motion_noise and sensor_noise must lie in [0, 1]".into()));
    }
    if !(cfg.sensor_range_m > 0.0) {
        return Err(Error::Config("sensor_range_m must be positive".into()));
    }
    let free = map.free_cells();
    let index = |c: Cell| free.binary_search(&c).ok();
    let ns = free.len() * 4;
    let states = free
        .iter()
        .flat_map(|c| HEADINGS.iter().map(move |h| format!("r{}c{}{}", c.row, c.col, h)))
        .collect();
    let nz = 81;
    let observations = (0..nz)
        .map(|z| {
            let mut s = String::from("sig");
            let mut z = z;
            for _ in 0..4 {
                s.push(['n', 'f', 'm'][z % 3]);
                z /= 3;
            }
            s
        })
        .collect();
    let mut m = Pomdp::zeros(states, GRID_ACTIONS.iter().map(|s| s.to_string()).collect(), observations, cfg.discount);
    let range_cells = (cfg.sensor_range_m / map.cell_size + 1e-9).floor().max(1.0) as usize;
    let noise = cfg.motion_noise;

    let mut initial = vec![0.0; ns];
    let si = index(start).unwrap();
    for h in 0..4 {
        initial[si * 4 + h] = 0.25;
    }

    for (i, &c) in free.iter().enumerate() {
        for h in 0..4 {
            let s = i * 4 + h;
            // forward
            let (dr, dc) = DIRS[h];
            match map.step(c, dr, dc) {
                Some(n) => {
                    m.set_transition(s, 0, index(n).unwrap() * 4 + h, 1.0 - noise);
                    m.set_transition(s, 0, s, noise);
                }
                None => m.set_transition(s, 0, s, 1.0),
            }
            // rotations
            m.set_transition(s, 1, i * 4 + (h + 3) % 4, 1.0 - noise);
            m.set_transition(s, 2, i * 4 + (h + 1) % 4, 1.0 - noise);
            m.set_transition(s, 1, s, m.transition(s, 1, s) + noise);
            m.set_transition(s, 2, s, m.transition(s, 2, s) + noise);
            for (s2, &p) in initial.iter().enumerate() {
                if p > 0.0 {
                    m.set_transition(s, 3, s2, p);
                }
            }

            let sig = proximity_signature(map, c, h, range_cells);
            for z in 0..nz {
                let mut p = 1.0;
                let mut zz = z;
                for &q_true in &sig {
                    let q = zz % 3;
                    zz /= 3;
                    p *= (1.0 - cfg.sensor_noise) * f64::from(u8::from(q == q_true)) + cfg.sensor_noise / 3.0;
                }
                if p > 0.0 {
                    for a in 0..3 {
                        m.set_observation(z, a, s, p);
                    }
                }
                m.set_observation(z, 3, s, 1.0 / nz as f64);
            }

            for a in 0..3 {
                m.set_reward(s, a, cfg.step_reward);
            }
            m.set_reward(s, 3, if c == goal { cfg.goal_reward } else { cfg.wrong_goal_reward });
        }
    }
    m.set_terminal(3, true);
    m.set_initial_belief(initial)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pomdp::Belief;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parse_round_trip() {
        let text = "#####\n#R..#\n#.#G#\n#####\n";
        let m = GridMap::parse(text, 1.0).unwrap();
        assert_eq!((m.height, m.width), (4, 5));
        assert_eq!(m.start, Some(Cell::new(1, 1)));
        assert_eq!(m.goal, Some(Cell::new(2, 3)));
        assert!(m.is_obstacle(Cell::new(2, 2)));
        assert_eq!(m.to_ascii(), text);
        assert!(GridMap::parse("#.\n#", 1.0).is_err());
        assert!(GridMap::parse("#x", 1.0).is_err());
    }

    #[test]
    fn los_same_cell_and_blocking() {
        let m = GridMap::parse("...\n.#.\n...", 1.0).unwrap();
        assert!(line_of_sight(&m, Cell::new(0, 0), Cell::new(0, 0), 0.0));
        assert!(!line_of_sight(&m, Cell::new(1, 0), Cell::new(1, 2), 10.0));
        assert!(line_of_sight(&m, Cell::new(0, 0), Cell::new(0, 2), 10.0));
        assert!(!line_of_sight(&m, Cell::new(0, 0), Cell::new(0, 2), 1.5));
        // Cells next to a wall are hidden from each other.
        let w = GridMap::parse(".#.", 1.0).unwrap();
        assert!(!line_of_sight(&w, Cell::new(0, 0), Cell::new(0, 2), 10.0));
        // A diagonal ray only grazes the flanking cells.
        let d = GridMap::parse(".#\n#.", 1.0).unwrap();
        assert!(line_of_sight(&d, Cell::new(0, 0), Cell::new(1, 1), 10.0));
        let e = GridMap::parse("..#\n.#.", 1.0).unwrap();
        assert!(!line_of_sight(&e, Cell::new(1, 0), Cell::new(0, 2), 10.0));
    }

    fn supersampled(map: &GridMap, a: Cell, b: Cell) -> bool {
        let (x0, y0) = (a.col as f64 + 0.5, a.row as f64 + 0.5);
        let (x1, y1) = (b.col as f64 + 0.5, b.row as f64 + 0.5);
        let n = 4000;
        (0..=n).all(|k| {
            let t = k as f64 / n as f64;
            let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            !map.is_obstacle(Cell::new(y.floor() as usize, x.floor() as usize))
        })
    }

    #[test]
    fn los_matches_supersampled_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut map = GridMap::open(20, 20);
        for r in 0..20 {
            for c in 0..20 {
                if rng.gen_bool(0.2) {
                    map.set_obstacle(Cell::new(r, c), true);
                }
            }
        }
        let free = map.free_cells();
        let (mut agree, mut total) = (0, 0);
        for _ in 0..3000 {
            let a = free[rng.gen_range(0..free.len())];
            let b = free[rng.gen_range(0..free.len())];
            total += 1;
            if line_of_sight(&map, a, b, f64::INFINITY) == supersampled(&map, a, b) {
                agree += 1;
            } else {
                // Only exact diagonals can graze corners.
                let (dr, dc) = (b.row as i64 - a.row as i64, b.col as i64 - a.col as i64);
                let g = gcd(dr.unsigned_abs(), dc.unsigned_abs());
                assert!(g > 0 && (dr.unsigned_abs() / g) % 2 == 1 && (dc.unsigned_abs() / g) % 2 == 1, "{a:?} {b:?} los={}", line_of_sight(&map, a, b, f64::INFINITY));
            }
        }
        assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
    }

    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 { a } else { gcd(b, a % b) }
    }

    fn room() -> GridMap {
        GridMap::parse(
            "##########\n#R.......#\n#........#\n#..##....#\n#..##....#\n#........#\n#.....#..#\n#.....#..#\n#.......G#\n##########",
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn grid_nav_is_valid() {
        let m = build_grid_nav(&room(), &GridNavConfig::default()).unwrap();
        assert!(m.validate().is_empty(), "{:?}", m.validate());
        assert_eq!(m.n_observations(), 81);
        assert_eq!(m.n_actions(), 4);
    }

    #[test]
    fn unreachable_goal_is_rejected() {
        let map = GridMap::parse("#####\n#R#G#\n#####", 1.0).unwrap();
        assert!(matches!(build_grid_nav(&map, &GridNavConfig::default()), Err(Error::Model(_))));
    }

    #[test]
    fn corner_signature_identifies_heading() {
        let map = room();
        let cfg = GridNavConfig { motion_noise: 0.0, sensor_range_m: 20.0, ..Default::default() };
        let m = build_grid_nav(&map, &cfg).unwrap();
        let free = map.free_cells();
        let i = free.binary_search(&Cell::new(1, 1)).unwrap();
        let mut seen = Vec::new();
        for h in 0..4 {
            let b = Belief::delta(m.n_states(), i * 4 + h);
            let probs = m.observation_probs(&m.predict(&b, 1), 1);
            let z = probs.iter().position(|&p| p == 1.0).unwrap();
            assert!(!seen.contains(&z));
            seen.push(z);
            // The signature has walls adjacent in exactly two directions.
            let sig = proximity_signature(&map, Cell::new(1, 1), (h + 3) % 4, 20);
            assert_eq!(sig.iter().filter(|&&q| q == 0).count(), 2);
        }
    }

    #[test]
    fn uninformative_sense_keeps_entropy() {
        // Open room seen with range 1 from all interior cells: no walls in reach.
        let mut text = String::new();
        for r in 0..7 {
            for c in 0..7 {
                text.push(if r == 0 || c == 0 || r == 6 || c == 6 { '#' } else if (r, c) == (3, 3) { 'R' } else if (r, c) == (2, 3) { 'G' } else { '.' });
            }
            text.push('\n');
        }
        let map = GridMap::parse(&text, 1.0).unwrap();
        let cfg = GridNavConfig { motion_noise: 0.0, sensor_range_m: 1.0, ..Default::default() };
        let m = build_grid_nav(&map, &cfg).unwrap();
        let free = map.free_cells();
        let i = free.binary_search(&Cell::new(3, 3)).unwrap();
        let b = Belief::new((0..m.n_states()).map(|s| if s / 4 == i { 0.25 } else { 0.0 }).collect()).unwrap();
        let b_a = m.predict(&b, 1);
        let z = signature_index([2, 2, 2, 2]);
        let (post, lik) = m.update(&b_a, 1, z).unwrap();
        assert!((lik - 1.0).abs() < 1e-12);
        assert!((post.entropy() - b.entropy()).abs() < 1e-12);
    }

    /// Direct enumeration of the Bayes filter from the geometry, without the
    /// POMDP tables.
    fn brute_filter(map: &GridMap, cfg: &GridNavConfig, b: &[f64], a: usize, z: usize) -> Vec<f64> {
        let free = map.free_cells();
        let n = free.len() * 4;
        let range = cfg.sensor_range_m as usize;
        let mut out = vec![0.0; n];
        for s2 in 0..n {
            let (c2, h2) = (free[s2 / 4], s2 % 4);
            let mut pred = 0.0;
            for s in 0..n {
                let (c, h) = (free[s / 4], s % 4);
                let intended = match a {
                    0 => {
                        let (dr, dc) = DIRS[h];
                        (map.step(c, dr, dc).unwrap_or(c), h)
                    }
                    1 => (c, (h + 3) % 4),
                    _ => (c, (h + 1) % 4),
                };
                let mut p = 0.0;
                if intended == (c2, h2) {
                    p += 1.0 - cfg.motion_noise;
                }
                if (c, h) == (c2, h2) {
                    p += cfg.motion_noise;
                }
                pred += p * b[s];
            }
            let sig = proximity_signature(map, c2, h2, range);
            out[s2] = if signature_index(sig) == z { pred } else { 0.0 };
        }
        let t: f64 = out.iter().sum();
        out.iter().map(|x| x / t).collect()
    }

    #[test]
    fn filter_tracks_brute_force_oracle() {
        let map = room();
        let cfg = GridNavConfig { motion_noise: 0.2, sensor_range_m: 3.0, ..Default::default() };
        let m = build_grid_nav(&map, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = m.initial_belief();
        let mut s = crate::pomdp::sample_index(b.probs(), &mut rng);
        let mut oracle = b.probs().to_vec();
        let script = [0, 0, 2, 0, 0, 0, 2, 0, 0, 1, 0, 0, 0, 2, 2, 0, 0, 0, 1, 0];
        for &a in &script {
            let (s2, z, _) = m.simulate_step(s, a, &mut rng);
            s = s2;
            b = m.update(&m.predict(&b, a), a, z).unwrap().0;
            oracle = brute_filter(&map, &cfg, &oracle, a, z);
            for (x, y) in b.probs().iter().zip(&oracle) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
