//! File formats: belief sets, factor matrices, reconstruction reports,
//! problem specs, planner artifacts, trial results and rollout logs.
//!
//! CSV files may start with `#` comment lines; readers skip them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::epca::{BasisMatrix, BeliefSet, CoordMatrix, EpcaConfig, ReconstructionStats};
use crate::error::{Error, Result};
use crate::planner::{ApproximatorKind, GridSpec, LowDimMdp, PrototypeSet};
use crate::pomdp::{Pomdp, PomdpSpec};
use crate::problems::{build_person_finding, Cell, GridMap, PersonFinding, PersonFindingModel};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn reader<R: Read>(r: R, headers: bool) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).has_headers(headers).from_reader(r)
}

fn read_comment_json<T: for<'de> Deserialize<'de>>(text: &str) -> Option<T> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| serde_json::from_str(l.trim_start_matches('#').trim()).ok())
}

fn parse_f64(field: &str, what: &str, row: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{what}: row {row} has a non-numeric entry {field:?}")))
}

/// Provenance carried in the comment line of a belief CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BeliefProvenance {
    #[serde(default)]
    pub spec_hash: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// One belief per row under a header `s0,s1,...`.
pub fn write_beliefs<W: Write>(mut w: W, b: &BeliefSet, provenance: &BeliefProvenance) -> Result<()> {
    writeln!(w, "# {}", serde_json::to_string(provenance)?)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record((0..b.state_count()).map(|i| format!("s{i}")))?;
    for j in 0..b.sample_count() {
        out.write_record(b.column(j).iter().map(|v| v.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a belief CSV and validates every row against the simplex.
pub fn read_beliefs(text: &str) -> Result<(BeliefSet, BeliefProvenance)> {
    let mut rdr = reader(text.as_bytes(), true);
    let ns = rdr.headers()?.len();
    let mut cols: Vec<f64> = Vec::new();
    let mut n = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != ns {
            return Err(Error::Dimension(format!("belief row {row} has {} entries, header has {ns}", rec.len())));
        }
        for f in rec.iter() {
            cols.push(parse_f64(f, "belief CSV", row)?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("belief CSV has no rows".into()));
    }
    let set = BeliefSet::new(DMatrix::from_vec(ns, n, cols))?;
    Ok((set, read_comment_json(text).unwrap_or_default()))
}

pub fn save_beliefs(path: &Path, b: &BeliefSet, provenance: &BeliefProvenance) -> Result<()> {
    let mut buf = Vec::new();
    write_beliefs(&mut buf, b, provenance)?;
    Ok(fs::write(path, buf)?)
}

pub fn load_beliefs(path: &Path) -> Result<(BeliefSet, BeliefProvenance)> {
    read_beliefs(&fs::read_to_string(path)?)
}

/// JSON record on the first line of a factor CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorHeader {
    pub rank: usize,
    pub state_count: usize,
    pub seed: u64,
    /// `epca` or `pca`.
    pub method: String,
    #[serde(default)]
    pub spec_hash: Option<String>,
    #[serde(default)]
    pub regularizer: Option<f64>,
}

/// A matrix under a one-line JSON header and a CSV column header.
pub fn write_matrix<W: Write>(mut w: W, header: &FactorHeader, prefix: &str, m: &DMatrix<f64>) -> Result<()> {
    writeln!(w, "{}", serde_json::to_string(header)?)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record((0..m.ncols()).map(|k| format!("{prefix}{k}")))?;
    for row in m.row_iter() {
        out.write_record(row.iter().map(|v| v.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix(text: &str) -> Result<(FactorHeader, DMatrix<f64>)> {
    let (first, rest) = text.split_once('\n').ok_or_else(|| Error::Config("factor file is empty".into()))?;
    let header: FactorHeader = serde_json::from_str(first.trim())?;
    let mut rdr = reader(rest.as_bytes(), true);
    let nc = rdr.headers()?.len();
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != nc {
            return Err(Error::Dimension(format!("factor row {r} has {} entries, header has {nc}", rec.len())));
        }
        for f in rec.iter() {
            rows.push(parse_f64(f, "factor CSV", r)?);
        }
    }
    let nr = rows.len() / nc.max(1);
    Ok((header, DMatrix::from_row_slice(nr, nc, &rows)))
}

/// Basis file: one row per state, one column per basis vector.
pub fn save_basis(path: &Path, u: &BasisMatrix, header: &FactorHeader) -> Result<()> {
    let mut buf = Vec::new();
    write_matrix(&mut buf, header, "u", u.matrix())?;
    Ok(fs::write(path, buf)?)
}

pub fn load_basis(path: &Path) -> Result<(BasisMatrix, FactorHeader)> {
    let (h, m) = read_matrix(&fs::read_to_string(path)?)?;
    if m.nrows() != h.state_count || m.ncols() != h.rank {
        return Err(Error::Invariant(format!(
            "basis file holds a {}x{} matrix but its header says {}x{}",
            m.nrows(),
            m.ncols(),
            h.state_count,
            h.rank
        )));
    }
    Ok((BasisMatrix::new(m)?, h))
}

/// Coordinate file: one row per sample, one column per dimension.
pub fn save_coords(path: &Path, c: &CoordMatrix, header: &FactorHeader) -> Result<()> {
    let mut buf = Vec::new();
    write_matrix(&mut buf, header, "c", &c.matrix().transpose())?;
    Ok(fs::write(path, buf)?)
}

pub fn load_coords(path: &Path) -> Result<(CoordMatrix, FactorHeader)> {
    let (h, m) = read_matrix(&fs::read_to_string(path)?)?;
    Ok((CoordMatrix::new(m.transpose())?, h))
}

/// One row of a reconstruction report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub bases: usize,
    pub mean_kl: f64,
    pub std_kl: f64,
    pub mean_l2: f64,
    pub std_l2: f64,
}

impl ReportRow {
    pub fn new(bases: usize, s: &ReconstructionStats) -> Self {
        ReportRow { bases, mean_kl: s.mean_kl, std_kl: s.std_kl, mean_l2: s.mean_l2, std_l2: s.std_l2 }
    }
}

pub fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    reader(text.as_bytes(), true).deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn save_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    write_rows(&mut buf, rows)?;
    Ok(fs::write(path, buf)?)
}

pub fn load_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_rows(&fs::read_to_string(path)?)
}

/// Person-finding problem on an ASCII map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub map: Vec<String>,
    pub cell_size: f64,
    pub sensing_range: f64,
    pub false_negative_rate: f64,
    pub person_diffusion: f64,
    #[serde(default)]
    pub robot_start: Option<Cell>,
    /// Initial person belief over free cells in row-major order.
    #[serde(default)]
    pub person_belief: Option<Vec<f64>>,
}

impl PersonSpec {
    pub fn from_model(model: &PersonFindingModel) -> Self {
        PersonSpec {
            map: model.map.to_ascii().lines().map(str::to_string).collect(),
            cell_size: model.map.cell_size,
            sensing_range: model.sensing_range,
            false_negative_rate: model.false_negative_rate,
            person_diffusion: model.person_diffusion,
            robot_start: model.robot_cell,
            person_belief: model.person_belief.as_ref().map(|b| b.probs().to_vec()),
        }
    }

    pub fn to_model(&self) -> Result<PersonFindingModel> {
        let map = GridMap::parse(&self.map.join("\n"), self.cell_size)?;
        let mut model = PersonFindingModel::new(map);
        model.sensing_range = self.sensing_range;
        model.false_negative_rate = self.false_negative_rate;
        model.person_diffusion = self.person_diffusion;
        model.robot_cell = self.robot_start;
        model.person_belief = match &self.person_belief {
            Some(p) => Some(crate::pomdp::Belief::new(p.clone())?),
            None => None,
        };
        Ok(model)
    }

    pub fn build(&self) -> Result<PersonFinding> {
        build_person_finding(&self.to_model()?)
    }
}

/// Contents of a problem spec file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemSpec {
    Pomdp(Box<PomdpSpec>),
    Person(PersonSpec),
}

/// A loaded problem.
pub enum Problem {
    Pomdp(Box<Pomdp>),
    Person(Box<PersonFinding>),
}

pub fn spec_json(spec: &ProblemSpec) -> Result<String> {
    Ok(serde_json::to_string_pretty(spec)? + "\n")
}

/// Loads and validates a spec file; returns the problem and the file hash.
pub fn load_problem(path: &Path) -> Result<(Problem, String)> {
    let bytes = fs::read(path)?;
    let hash = sha256_hex(&bytes);
    let spec: ProblemSpec = serde_json::from_slice(&bytes)?;
    let p = match spec {
        ProblemSpec::Pomdp(s) => {
            let m = Pomdp::from_spec(&s)?;
            let bad = m.validate();
            if !bad.is_empty() {
                let msgs: Vec<String> = bad.iter().map(|v| v.to_string()).collect();
                return Err(Error::Invariant(format!("invalid model: {}", msgs.join("; "))));
            }
            Problem::Pomdp(Box::new(m))
        }
        ProblemSpec::Person(s) => Problem::Person(Box::new(s.build()?)),
    };
    Ok((p, hash))
}

/// Approximator description stored in a planner manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproximatorRecord {
    pub kind: ApproximatorKind,
    #[serde(default)]
    pub grid_origin: Option<Vec<f64>>,
    #[serde(default)]
    pub grid_widths: Option<Vec<f64>>,
}

/// JSON manifest binding planner artifacts to their inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerManifest {
    /// `pomdp` or `person`.
    pub problem: String,
    pub spec_hash: String,
    /// Basis file, relative to the manifest directory or absolute.
    pub basis_file: String,
    pub basis_hash: String,
    pub rank: usize,
    pub regularizer: f64,
    pub approximator: ApproximatorRecord,
    pub prototypes: usize,
    /// States of the stored MDP; more than `prototypes` for factored plans.
    pub states: usize,
    pub actions: usize,
    pub discount: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// SHA-256 of every artifact file in the directory.
    pub files: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROTOTYPES_FILE: &str = "prototypes.csv";
pub const REWARD_FILE: &str = "reward.csv";
pub const TRANSITIONS_FILE: &str = "transitions.csv";
pub const VALUE_FILE: &str = "value.csv";

#[derive(Serialize, Deserialize)]
struct RewardRow {
    prototype: usize,
    action: usize,
    reward: f64,
}

#[derive(Serialize, Deserialize)]
struct TransitionRow {
    prototype: usize,
    action: usize,
    next: usize,
    probability: f64,
}

#[derive(Serialize, Deserialize)]
struct ValueRow {
    prototype: usize,
    value: f64,
}

fn prototypes_csv(p: &PrototypeSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut out = csv::Writer::from_writer(&mut buf);
    out.write_record((0..p.rank()).map(|k| format!("c{k}")))?;
    for v in p.prototypes() {
        out.write_record(v.iter().map(|x| x.to_string()))?;
    }
    out.flush()?;
    drop(out);
    Ok(buf)
}

fn parse_prototypes(text: &str, rec: &ApproximatorRecord) -> Result<PrototypeSet> {
    let mut rdr = reader(text.as_bytes(), true);
    let l = rdr.headers()?.len();
    let mut points = Vec::new();
    for (r, row) in rdr.records().enumerate() {
        let row = row?;
        if row.len() != l {
            return Err(Error::Dimension(format!("prototype row {r} has {} entries, header has {l}", row.len())));
        }
        let v = row.iter().map(|f| parse_f64(f, "prototype CSV", r)).collect::<Result<Vec<_>>>()?;
        points.push(DVector::from_vec(v));
    }
    match rec.kind {
        ApproximatorKind::NearestNeighbor => PrototypeSet::nearest_neighbor(points),
        ApproximatorKind::Grid => {
            let (Some(origin), Some(widths)) = (&rec.grid_origin, &rec.grid_widths) else {
                return Err(Error::Config("grid manifest lacks origin or widths".into()));
            };
            let spec = GridSpec::new(origin.clone(), widths.clone());
            let cells = points.iter().map(|p| spec.cell_of(p)).collect();
            let set = PrototypeSet::grid(spec, cells)?;
            if set.prototypes().iter().zip(&points).any(|(a, b)| (a - b).amax() > 1e-9 * (1.0 + b.amax())) {
                return Err(Error::Invariant("grid prototypes are not the centers of their cells".into()));
            }
            Ok(set)
        }
    }
}

/// Everything needed to write a planner directory.
pub struct PlannerArtifacts<'a> {
    pub problem: &'a str,
    pub spec_hash: &'a str,
    pub basis_file: &'a str,
    pub basis_hash: &'a str,
    pub epca: &'a EpcaConfig,
    pub prototypes: &'a PrototypeSet,
    pub mdp: &'a LowDimMdp,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Writes prototypes, reward and transition triplets, values and the
/// manifest into `dir`.
pub fn save_planner(dir: &Path, a: &PlannerArtifacts) -> Result<PlannerManifest> {
    fs::create_dir_all(dir)?;
    let mdp = a.mdp;
    let mut files = BTreeMap::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        files.insert(name.to_string(), sha256_hex(&bytes));
        Ok(fs::write(dir.join(name), bytes)?)
    };
    put(PROTOTYPES_FILE, prototypes_csv(a.prototypes)?)?;
    let rewards: Vec<RewardRow> = (0..mdp.n_states())
        .flat_map(|i| (0..mdp.n_actions()).map(move |act| RewardRow { prototype: i, action: act, reward: mdp.reward(i, act) }))
        .collect();
    let mut buf = Vec::new();
    write_rows(&mut buf, &rewards)?;
    put(REWARD_FILE, buf)?;
    let trans: Vec<TransitionRow> = mdp
        .triplets()
        .map(|(i, act, j, p)| TransitionRow { prototype: i, action: act, next: j, probability: p })
        .collect();
    let mut buf = Vec::new();
    write_rows(&mut buf, &trans)?;
    put(TRANSITIONS_FILE, buf)?;
    let values: Vec<ValueRow> = mdp.value.iter().enumerate().map(|(i, &v)| ValueRow { prototype: i, value: v }).collect();
    let mut buf = Vec::new();
    write_rows(&mut buf, &values)?;
    put(VALUE_FILE, buf)?;

    let grid = a.prototypes.grid_spec();
    let manifest = PlannerManifest {
        problem: a.problem.to_string(),
        spec_hash: a.spec_hash.to_string(),
        basis_file: a.basis_file.to_string(),
        basis_hash: a.basis_hash.to_string(),
        rank: a.prototypes.rank(),
        regularizer: a.epca.newton_regularizer,
        approximator: ApproximatorRecord {
            kind: a.prototypes.kind,
            grid_origin: grid.map(|g| g.origin.clone()),
            grid_widths: grid.map(|g| g.widths.clone()),
        },
        prototypes: a.prototypes.len(),
        states: mdp.n_states(),
        actions: mdp.n_actions(),
        discount: mdp.discount,
        iterations: a.iterations,
        residual: a.residual,
        converged: a.converged,
        files,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// A planner directory read back and checked against its manifest.
pub struct LoadedPlanner {
    pub manifest: PlannerManifest,
    pub dir: PathBuf,
    pub prototypes: PrototypeSet,
    pub rewards: Vec<f64>,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub value: Vec<f64>,
}

impl LoadedPlanner {
    pub fn basis_path(&self) -> PathBuf {
        self.dir.join(&self.manifest.basis_file)
    }

    /// The stored prototype MDP with its value function; rows are checked
    /// to be stochastic.
    pub fn mdp(&self, terminal: Vec<bool>) -> Result<LowDimMdp> {
        let mut mdp = LowDimMdp::from_rows(
            self.manifest.states,
            self.manifest.actions,
            self.rewards.clone(),
            self.rows.clone(),
            self.manifest.discount,
            terminal,
        )?;
        mdp.check_stochastic(1e-6)?;
        mdp.value = self.value.clone();
        Ok(mdp)
    }
}

/// Reads a planner directory, verifying file hashes and table shapes.
pub fn load_planner(dir: &Path) -> Result<LoadedPlanner> {
    let manifest: PlannerManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let read = |name: &str| -> Result<String> {
        let text = fs::read_to_string(dir.join(name))?;
        match manifest.files.get(name) {
            Some(h) if *h == sha256_hex(text.as_bytes()) => Ok(text),
            Some(_) => Err(Error::Invariant(format!("{name} does not match the hash recorded in the manifest"))),
            None => Err(Error::Config(format!("manifest does not list {name}"))),
        }
    };
    let prototypes = parse_prototypes(&read(PROTOTYPES_FILE)?, &manifest.approximator)?;
    if prototypes.len() != manifest.prototypes {
        return Err(Error::Invariant(format!("manifest lists {} prototypes, file holds {}", manifest.prototypes, prototypes.len())));
    }
    let (ns, na) = (manifest.states, manifest.actions);
    let mut rewards = vec![f64::NAN; ns * na];
    for r in read_rows::<RewardRow>(&read(REWARD_FILE)?)? {
        if r.prototype >= ns || r.action >= na {
            return Err(Error::Invariant(format!("reward entry ({}, {}) out of range", r.prototype, r.action)));
        }
        rewards[r.prototype * na + r.action] = r.reward;
    }
    if rewards.iter().any(|r| r.is_nan()) {
        return Err(Error::Invariant("reward table is incomplete".into()));
    }
    let mut rows = vec![Vec::new(); ns * na];
    for t in read_rows::<TransitionRow>(&read(TRANSITIONS_FILE)?)? {
        if t.prototype >= ns || t.action >= na || t.next >= ns {
            return Err(Error::Invariant(format!("transition entry ({}, {}, {}) out of range", t.prototype, t.action, t.next)));
        }
        rows[t.prototype * na + t.action].push((t.next, t.probability));
    }
    let mut value = vec![f64::NAN; ns];
    for v in read_rows::<ValueRow>(&read(VALUE_FILE)?)? {
        if v.prototype >= ns {
            return Err(Error::Invariant(format!("value entry {} out of range", v.prototype)));
        }
        value[v.prototype] = v.value;
    }
    if value.iter().any(|v| v.is_nan()) {
        return Err(Error::Invariant("value table is incomplete".into()));
    }
    Ok(LoadedPlanner { manifest, dir: dir.to_path_buf(), prototypes, rewards, rows, value })
}

/// One row of a trials CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub steps: usize,
    pub total_reward: f64,
    pub success: bool,
}

/// Summary of a trial run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub policy: String,
    pub trials: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub success_rate: f64,
    pub mean_steps: f64,
}

impl TrialSummary {
    pub fn from_rows(policy: &str, rows: &[TrialRow]) -> Self {
        let r: Vec<f64> = rows.iter().map(|t| t.total_reward).collect();
        let (mean_reward, std_reward) = crate::epca::mean_std(&r);
        let n = rows.len().max(1) as f64;
        TrialSummary {
            policy: policy.to_string(),
            trials: rows.len(),
            mean_reward,
            std_reward,
            success_rate: rows.iter().filter(|t| t.success).count() as f64 / n,
            mean_steps: rows.iter().map(|t| t.steps as f64).sum::<f64>() / n,
        }
    }
}

/// One step of a rollout log. `cell` is the robot cell of person-finding
/// rollouts before the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRow {
    pub episode: usize,
    pub step: usize,
    pub action: usize,
    pub observation: Option<usize>,
    pub reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<usize>,
}
