use crate::error::{Error, Result};
use crate::pomdp::Pomdp;

/// Robot heading along the corridor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Heading {
    East,
    West,
}

impl Heading {
    fn sign(self) -> i64 {
        match self {
            Heading::East => 1,
            Heading::West => -1,
        }
    }

    fn index(self) -> usize {
        match self {
            Heading::East => 0,
            Heading::West => 1,
        }
    }
}

/// Sensor model of the corridor robot.
#[derive(Clone, Debug)]
pub struct CorridorSensing {
    /// A wall closer than this many cells reads as "near".
    pub near_range: usize,
    /// Probability that each sensor component reads correctly.
    pub accuracy: f64,
    /// Cells with an ordinary door.
    pub doors: Vec<usize>,
    /// Cells with a distinctive door.
    pub lab_doors: Vec<usize>,
}

impl Default for CorridorSensing {
    fn default() -> Self {
        CorridorSensing { near_range: 2, accuracy: 0.9, doors: vec![14, 25], lab_doors: vec![37] }
    }
}

/// 1-D corridor navigation with an unknown heading. State `heading * L + x`.
///
/// Observations combine front wall near/far, back wall near/far and the
/// landmark under the robot (none, door, lab door): index
/// `(front * 2 + back) * 3 + feature`.
#[derive(Clone, Debug)]
pub struct CorridorConfig {
    pub length: usize,
    pub goal: usize,
    pub sensing: CorridorSensing,
    pub move_success: f64,
    pub move_stay: f64,
    /// Start hypotheses, weighted equally.
    pub start: Vec<(usize, Heading)>,
    pub goal_reward: f64,
    pub wrong_goal_reward: f64,
    pub step_reward: f64,
    pub discount: f64,
}

impl Default for CorridorConfig {
    fn default() -> Self {
        CorridorConfig {
            length: 40,
            goal: 14,
            sensing: CorridorSensing::default(),
            move_success: 0.8,
            move_stay: 0.1,
            start: vec![(6, Heading::East), (33, Heading::West)],
            goal_reward: 1000.0,
            wrong_goal_reward: -1000.0,
            step_reward: -1.0,
            discount: 0.99,
        }
    }
}

pub const CORRIDOR_ACTIONS: [&str; 3] = ["forward", "backward", "at_goal"];

impl CorridorConfig {
    pub fn state(&self, x: usize, h: Heading) -> usize {
        h.index() * self.length + x
    }

    /// Position of a state along the corridor.
    pub fn position(&self, state: usize) -> usize {
        state % self.length
    }

    fn true_reading(&self, x: usize, h: Heading) -> (usize, usize, usize) {
        let l = self.length;
        let near = self.sensing.near_range;
        let east_near = usize::from(l - 1 - x <= near);
        let west_near = usize::from(x <= near);
        let (front, back) = match h {
            Heading::East => (east_near, west_near),
            Heading::West => (west_near, east_near),
        };
        let feature = if self.sensing.lab_doors.contains(&x) {
            2
        } else if self.sensing.doors.contains(&x) {
            1
        } else {
            0
        };
        (front, back, feature)
    }

    pub fn build(&self) -> Result<Pomdp> {
        let l = self.length;
        if l < 2 {
            return Err(Error::Config("corridor length must be at least 2".into()));
        }
        if self.goal >= l {
            return Err(Error::Config(format!("goal {} lies outside a corridor of length {l}", self.goal)));
        }
        if self.start.is_empty() || self.start.iter().any(|&(x, _)| x >= l) {
            return Err(Error::Config("start hypotheses must be non-empty and inside the corridor".into()));
        }
        let stay = self.move_stay;
        let over = 1.0 - self.move_success - stay;
        if self.move_success < 0.0 || stay < 0.0 || over < -1e-12 {
            return Err(Error::Config("move_success + move_stay must not exceed 1".into()));
        }
        let over = over.max(0.0);
        let acc = self.sensing.accuracy;
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Config("sensor accuracy must lie in [0, 1]".into()));
        }

        let ns = 2 * l;
        let states = [Heading::East, Heading::West]
            .iter()
            .flat_map(|h| (0..l).map(move |x| format!("x{x}{}", if *h == Heading::East { "E" } else { "W" })))
            .collect();
        let observations = (0..12)
            .map(|z| {
                let (fb, f) = (z / 3, z % 3);
                format!("f{}b{}{}", fb / 2, fb % 2, ["none", "door", "lab"][f])
            })
            .collect();
        let actions = CORRIDOR_ACTIONS.iter().map(|s| s.to_string()).collect();
        let mut m = Pomdp::zeros(states, actions, observations, self.discount);

        let mut initial = vec![0.0; ns];
        for &(x, h) in &self.start {
            initial[self.state(x, h)] += 1.0 / self.start.len() as f64;
        }

        for h in [Heading::East, Heading::West] {
            for x in 0..l {
                let s = self.state(x, h);
                for (a, dir) in [(0, h.sign()), (1, -h.sign())] {
                    for (steps, p) in [(0, stay), (1, self.move_success), (2, over)] {
                        let nx = (x as i64 + dir * steps).clamp(0, l as i64 - 1) as usize;
                        let s2 = self.state(nx, h);
                        m.set_transition(s, a, s2, m.transition(s, a, s2) + p);
                    }
                }
                for (s2, &p) in initial.iter().enumerate() {
                    m.set_transition(s, 2, s2, p);
                }

                let (front, back, feature) = self.true_reading(x, h);
                for z in 0..12 {
                    let (zf, zb, zx) = (z / 6, (z / 3) % 2, z % 3);
                    let pf = if zf == front { acc } else { 1.0 - acc };
                    let pb = if zb == back { acc } else { 1.0 - acc };
                    let px = if zx == feature { acc } else { (1.0 - acc) / 2.0 };
                    m.set_observation(z, 0, s, pf * pb * px);
                    m.set_observation(z, 1, s, pf * pb * px);
                    m.set_observation(z, 2, s, 1.0 / 12.0);
                }

                m.set_reward(s, 0, self.step_reward);
                m.set_reward(s, 1, self.step_reward);
                m.set_reward(s, 2, if x == self.goal { self.goal_reward } else { self.wrong_goal_reward });
            }
        }
        m.set_terminal(2, true);
        m.set_initial_belief(initial)?;
        Ok(m)
    }
}

/// Corridor navigation of `length_states` cells with the given goal cell and
/// sensor model; other parameters take their defaults.
pub fn build_corridor_nav(length_states: usize, goal: usize, sensing: CorridorSensing) -> Result<Pomdp> {
    CorridorConfig { length: length_states, goal, sensing, ..CorridorConfig::default() }.build()
}
