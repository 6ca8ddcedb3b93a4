//! Exponential-family PCA with an exponential link.
//!
//! A belief matrix `B` (|S| x n, one belief per column) is approximated by
//! `exp(U B̃)` with `U` (|S| x l) and `B̃` (l x n). The fitted loss is
//!
//! ```text
//! L(B, U, B̃) = Σ_j ( Σ_i exp((U B̃)_ij) − B_·j · (U B̃)_·j )
//! ```
//!
//! which is the unnormalized KL divergence between `B` and its
//! reconstruction up to terms that depend only on the data. In Bregman form
//! `F(x) = Σ exp(x)` and `F*(b) = b · ln b − Σ b`; neither is stored.
//!
//! Both factors are updated by damped Newton steps (iteratively reweighted
//! least squares): every column of `B̃` and every row of `U` is a convex
//! subproblem solved independently of the others.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Axis, Error, Result};
use crate::pomdp::{Belief, SIMPLEX_TOL};

/// Entries of `U B̃` above this value are treated as overflow.
pub const EXPONENT_GUARD: f64 = 700.0;

/// Sampled beliefs stored column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefSet {
    data: DMatrix<f64>,
}

impl BeliefSet {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Dimension("belief set must be non-empty".into()));
        }
        for (j, col) in data.column_iter().enumerate() {
            if let Some((i, v)) = col.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
                return Err(Error::Invariant(format!("belief {j} has entry {i} = {v}")));
            }
            let sum: f64 = col.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Invariant(format!("belief {j} sums to {sum}")));
            }
        }
        Ok(BeliefSet { data })
    }

    pub fn from_beliefs(beliefs: &[Belief]) -> Result<Self> {
        let first = beliefs
            .first()
            .ok_or_else(|| Error::Dimension("belief set must be non-empty".into()))?;
        let ns = first.len();
        if beliefs.iter().any(|b| b.len() != ns) {
            return Err(Error::Dimension("beliefs have different lengths".into()));
        }
        let data = DMatrix::from_fn(ns, beliefs.len(), |i, j| beliefs[j].probs()[i]);
        BeliefSet::new(data)
    }

    pub fn state_count(&self) -> usize {
        self.data.nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let ns = self.state_count();
        &self.data.as_slice()[j * ns..(j + 1) * ns]
    }

    pub fn belief(&self, j: usize) -> Belief {
        Belief::from_vector_unchecked(self.data.column(j).into_owned())
    }
}

/// The basis `U`, one basis vector per column.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisMatrix(DMatrix<f64>);

impl BasisMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.ncols() == 0 || entries.ncols() > entries.nrows() {
            return Err(Error::Dimension(format!(
                "basis rank {} must be in 1..={}",
                entries.ncols(),
                entries.nrows()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("basis has non-finite entries".into()));
        }
        Ok(BasisMatrix(entries))
    }

    pub fn rank(&self) -> usize {
        self.0.ncols()
    }

    pub fn state_count(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Compressed coordinates `B̃`, one compressed belief per column.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordMatrix(DMatrix<f64>);

impl CoordMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("coordinates have non-finite entries".into()));
        }
        Ok(CoordMatrix(entries))
    }

    pub fn rank(&self) -> usize {
        self.0.nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.0.column(j).into_owned()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpcaConfig {
    pub rank: usize,
    pub max_sweeps: usize,
    /// Relative per-sweep loss decrease below which fitting stops.
    pub loss_tolerance: f64,
    pub newton_regularizer: f64,
    pub line_search_shrink: f64,
    pub max_halvings: usize,
    /// Newton iterations allowed when compressing a single belief.
    pub compress_max_iters: usize,
    pub seed: u64,
}

impl Default for EpcaConfig {
    fn default() -> Self {
        EpcaConfig {
            rank: 4,
            max_sweeps: 200,
            loss_tolerance: 1e-6,
            newton_regularizer: 1e-5,
            line_search_shrink: 0.5,
            max_halvings: 20,
            compress_max_iters: 500,
            seed: 0,
        }
    }
}

impl EpcaConfig {
    pub fn with_rank(rank: usize, seed: u64) -> Self {
        EpcaConfig { rank, seed, ..Default::default() }
    }

    fn check(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        if self.max_sweeps == 0 {
            return Err(Error::Config("max_sweeps must be positive".into()));
        }
        if !(self.newton_regularizer > 0.0) {
            return Err(Error::Config("newton_regularizer must be positive".into()));
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return Err(Error::Config("line_search_shrink must lie in (0, 1)".into()));
        }
        if !(self.loss_tolerance >= 0.0) {
            return Err(Error::Config("loss_tolerance must be nonnegative".into()));
        }
        Ok(())
    }
}

fn check_dims(b: &BeliefSet, u: &BasisMatrix, c: &CoordMatrix) -> Result<()> {
    if u.state_count() != b.state_count() || c.rank() != u.rank() || c.sample_count() != b.sample_count() {
        return Err(Error::Dimension(format!(
            "B is {}x{}, U is {}x{}, B̃ is {}x{}",
            b.state_count(),
            b.sample_count(),
            u.state_count(),
            u.rank(),
            c.rank(),
            c.sample_count()
        )));
    }
    Ok(())
}

/// Total loss over all columns. Returns `+∞` when an exponent exceeds
/// [`EXPONENT_GUARD`].
pub fn epca_loss(b: &BeliefSet, u: &BasisMatrix, c: &CoordMatrix) -> Result<f64> {
    check_dims(b, u, c)?;
    let x = u.matrix() * c.matrix();
    let mut total = 0.0;
    for (xv, bv) in x.iter().zip(b.data().iter()) {
        if *xv > EXPONENT_GUARD {
            return Ok(f64::INFINITY);
        }
        total += xv.exp() - bv * xv;
    }
    Ok(total)
}

/// Analytic gradients `((e^{UB̃} − B) B̃ᵀ, Uᵀ (e^{UB̃} − B))`.
pub fn loss_gradients(b: &BeliefSet, u: &BasisMatrix, c: &CoordMatrix) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_dims(b, u, c)?;
    let mut resid = u.matrix() * c.matrix();
    for (i, (r, bv)) in resid.iter_mut().zip(b.data().iter()).enumerate() {
        if *r > EXPONENT_GUARD {
            return Err(Error::Overflow { index: i, value: *r });
        }
        *r = r.exp() - bv;
    }
    Ok((&resid * c.matrix().transpose(), u.matrix().transpose() * &resid))
}

/// Loss of one convex subproblem `Σ_r exp(x_r) − t_r x_r` with `x = design · v`.
fn subproblem_loss(design: &DMatrix<f64>, target: &[f64], v: &DVector<f64>) -> f64 {
    let x = design * v;
    let mut total = 0.0;
    for (xv, t) in x.iter().zip(target) {
        if *xv > EXPONENT_GUARD {
            return f64::INFINITY;
        }
        total += xv.exp() - t * xv;
    }
    total
}

/// Subproblem loss plus the ridge term `reg/2 ‖v‖²`. The regularized Newton
/// update is the exact Newton step for this objective, so it is the quantity
/// the line search monitors.
fn penalized_loss(design: &DMatrix<f64>, target: &[f64], v: &DVector<f64>, reg: f64) -> f64 {
    subproblem_loss(design, target, v) + 0.5 * reg * v.norm_squared()
}

/// Solves `(Dᵀ W D + reg I) v_new = Dᵀ W (x + W⁻¹ (t − w))` with `w = exp(x)`.
fn newton_target(
    design: &DMatrix<f64>,
    target: &[f64],
    v: &DVector<f64>,
    reg: f64,
    axis: Axis,
) -> Result<DVector<f64>> {
    let l = design.ncols();
    let x = design * v;
    let mut normal = DMatrix::<f64>::identity(l, l) * reg;
    let mut rhs = DVector::<f64>::zeros(l);
    let mut row = vec![0.0; l];
    for (r, (&xr, &tr)) in x.iter().zip(target).enumerate() {
        if xr > EXPONENT_GUARD {
            return Err(Error::Overflow { index: r, value: xr });
        }
        let w = xr.exp();
        let z = w * xr + tr - w;
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = design[(r, k)];
        }
        for a in 0..l {
            let wa = w * row[a];
            rhs[a] += z * row[a];
            for b in a..l {
                normal[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..l {
        for b in 0..a {
            normal[(a, b)] = normal[(b, a)];
        }
    }
    match normal.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&rhs)),
        None => normal.lu().solve(&rhs).ok_or(Error::Singular { axis, index: 0 }),
    }
}

/// One Newton step with backtracking: the returned point never has a larger
/// loss than `v`.
fn damped_newton(
    design: &DMatrix<f64>,
    target: &[f64],
    v: &DVector<f64>,
    f0: f64,
    cfg: &EpcaConfig,
    axis: Axis,
) -> Result<(DVector<f64>, f64)> {
    let proposal = newton_target(design, target, v, cfg.newton_regularizer, axis)?;
    let dir = proposal - v;
    let mut step = 1.0;
    for _ in 0..=cfg.max_halvings {
        let cand = v + &dir * step;
        let f = penalized_loss(design, target, &cand, cfg.newton_regularizer);
        if f <= f0 {
            return Ok((cand, f));
        }
        step *= cfg.line_search_shrink;
    }
    Ok((v.clone(), f0))
}

/// Undamped Newton update of one compressed belief given a fixed basis.
pub fn newton_update_coords(u: &BasisMatrix, b: &[f64], coords: &DVector<f64>, regularizer: f64) -> Result<DVector<f64>> {
    if b.len() != u.state_count() || coords.len() != u.rank() {
        return Err(Error::Dimension("belief or coordinates do not match the basis".into()));
    }
    newton_target(u.matrix(), b, coords, regularizer, Axis::Column)
}

/// Undamped Newton update of row `row_index` of the basis given fixed coordinates.
pub fn newton_update_basis(
    c: &CoordMatrix,
    b: &BeliefSet,
    u_row: &DVector<f64>,
    row_index: usize,
    regularizer: f64,
) -> Result<DVector<f64>> {
    if row_index >= b.state_count() || u_row.len() != c.rank() || c.sample_count() != b.sample_count() {
        return Err(Error::Dimension("row update dimensions disagree".into()));
    }
    let design = c.matrix().transpose();
    let target: Vec<f64> = b.data().row(row_index).iter().copied().collect();
    newton_target(&design, &target, u_row, regularizer, Axis::Row).map_err(|e| e.at_index(row_index))
}

/// Result of [`epca_fit`].
#[derive(Clone, Debug)]
pub struct EpcaFit {
    pub basis: BasisMatrix,
    pub coords: CoordMatrix,
    /// Objective before the first sweep followed by its value after every
    /// sweep. The objective is the loss plus the ridge term
    /// `reg/2 (‖U‖² + ‖B̃‖²)` implied by the regularized Newton updates.
    pub loss_trace: Vec<f64>,
    /// Unpenalized loss of the returned factors.
    pub data_loss: f64,
    pub grad_norm_basis: f64,
    pub grad_norm_coords: f64,
}

impl EpcaFit {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace holds the initial loss")
    }

    pub fn sweeps(&self) -> usize {
        self.loss_trace.len() - 1
    }
}

/// Alternating damped-Newton minimization of the loss from a small random start.
pub fn epca_fit(b: &BeliefSet, cfg: &EpcaConfig) -> Result<EpcaFit> {
    cfg.check()?;
    let (ns, n, l) = (b.state_count(), b.sample_count(), cfg.rank);
    if l > ns {
        return Err(Error::Config(format!("rank {l} exceeds state count {ns}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut u = DMatrix::from_fn(ns, l, |_, _| rng.gen_range(-0.01..=0.01));
    let mut c = DMatrix::from_fn(l, n, |_, _| rng.gen_range(-0.01..=0.01));

    let rows: Vec<Vec<f64>> = (0..ns).map(|i| b.data().row(i).iter().copied().collect()).collect();
    let penalty = |u: &DMatrix<f64>, c: &DMatrix<f64>| 0.5 * cfg.newton_regularizer * (u.norm_squared() + c.norm_squared());
    let mut loss = full_loss(b, &u, &c) + penalty(&u, &c);
    let mut trace = vec![loss];

    for sweep in 0..cfg.max_sweeps {
        let new_cols = (0..n)
            .into_par_iter()
            .map(|j| {
                let v = c.column(j).into_owned();
                let target = b.column(j);
                let f0 = penalized_loss(&u, target, &v, cfg.newton_regularizer);
                damped_newton(&u, target, &v, f0, cfg, Axis::Column)
                    .map(|(v, _)| v)
                    .map_err(|e| e.at_index(j))
            })
            .collect::<Result<Vec<_>>>()?;
        for (j, v) in new_cols.into_iter().enumerate() {
            c.set_column(j, &v);
        }

        let design = c.transpose();
        let new_rows = (0..ns)
            .into_par_iter()
            .map(|i| {
                let v = u.row(i).transpose();
                let f0 = penalized_loss(&design, &rows[i], &v, cfg.newton_regularizer);
                damped_newton(&design, &rows[i], &v, f0, cfg, Axis::Row)
                    .map(|(v, _)| v)
                    .map_err(|e| e.at_index(i))
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, v) in new_rows.into_iter().enumerate() {
            u.set_row(i, &v.transpose());
        }
        balance_scales(&mut u, &mut c);

        let next = full_loss(b, &u, &c) + penalty(&u, &c);
        if !next.is_finite() {
            return Err(Error::NonFiniteLoss { sweep });
        }
        trace.push(next);
        let decrease = (loss - next) / loss.abs().max(f64::MIN_POSITIVE);
        loss = next;
        if decrease < cfg.loss_tolerance {
            break;
        }
    }

    // Solve every column to convergence against the final basis so the
    // returned coordinates agree with `compress`.
    let basis = BasisMatrix::new(u)?;
    let polished = (0..n)
        .into_par_iter()
        .map(|j| compress_from(&basis, b.column(j), &c.column(j).into_owned(), cfg).map_err(|e| e.at_index(j)))
        .collect::<Result<Vec<_>>>()?;
    for (j, v) in polished.into_iter().enumerate() {
        c.set_column(j, &v);
    }
    let polished_loss = full_loss(b, basis.matrix(), &c) + penalty(basis.matrix(), &c);
    if polished_loss <= loss {
        trace.push(polished_loss);
    }
    let coords = CoordMatrix::new(c)?;
    let (gu, gc) = loss_gradients(b, &basis, &coords)?;
    let data_loss = epca_loss(b, &basis, &coords)?;
    Ok(EpcaFit {
        basis,
        coords,
        loss_trace: trace,
        data_loss,
        grad_norm_basis: gu.norm(),
        grad_norm_coords: gc.norm(),
    })
}

// Each rank component can be rescaled (u_k * s, c_k / s) without touching
// the product. Picking s to equalize the two norms minimizes the ridge term,
// which alternating updates otherwise reach only very slowly.
fn balance_scales(u: &mut DMatrix<f64>, c: &mut DMatrix<f64>) {
    for k in 0..u.ncols() {
        let nu = u.column(k).norm();
        let nc = c.row(k).norm();
        if nu > 0.0 && nc > 0.0 {
            let s = (nc / nu).sqrt();
            u.column_mut(k).scale_mut(s);
            c.row_mut(k).unscale_mut(s);
        }
    }
}

fn full_loss(b: &BeliefSet, u: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    let x = u * c;
    let mut total = 0.0;
    for (xv, bv) in x.iter().zip(b.data().iter()) {
        if *xv > EXPONENT_GUARD || !xv.is_finite() {
            return f64::INFINITY;
        }
        total += xv.exp() - bv * xv;
    }
    total
}

/// Loss of a single compressed belief, `Σ exp(U b̃) − b · U b̃`.
pub fn compressed_loss(u: &BasisMatrix, b: &[f64], coords: &DVector<f64>) -> f64 {
    subproblem_loss(u.matrix(), b, coords)
}

/// Best compressed representation of `b` on the basis, starting from zero.
///
/// Minimizes the single-column loss plus the ridge term of the regularized
/// Newton update; that objective is strongly convex, so the result does not
/// depend on the starting point.
pub fn compress(u: &BasisMatrix, b: &[f64], cfg: &EpcaConfig) -> Result<DVector<f64>> {
    compress_from(u, b, &DVector::zeros(u.rank()), cfg)
}

/// As [`compress`], starting the Newton iteration at `init`.
pub fn compress_from(u: &BasisMatrix, b: &[f64], init: &DVector<f64>, cfg: &EpcaConfig) -> Result<DVector<f64>> {
    if b.len() != u.state_count() || init.len() != u.rank() {
        return Err(Error::Dimension("belief or initial coordinates do not match the basis".into()));
    }
    let mut v = init.clone();
    let reg = cfg.newton_regularizer;
    let mut f = penalized_loss(u.matrix(), b, &v, reg);
    if !f.is_finite() {
        v = DVector::zeros(u.rank());
        f = penalized_loss(u.matrix(), b, &v, reg);
    }
    let mut last_decrease = f64::INFINITY;
    for _ in 0..cfg.compress_max_iters {
        let (next, fnext) = damped_newton(u.matrix(), b, &v, f, cfg, Axis::Column)?;
        last_decrease = f - fnext;
        v = next;
        f = fnext;
        if last_decrease <= 1e-13 * f.abs().max(1.0) {
            return Ok(v);
        }
    }
    if last_decrease <= cfg.loss_tolerance * f.abs().max(1.0) {
        Ok(v)
    } else {
        Err(Error::Numerical(format!(
            "compression still decreasing by {last_decrease} after {} iterations",
            cfg.compress_max_iters
        )))
    }
}

/// `exp(U b̃)`; strictly positive and not renormalized.
pub fn reconstruct(u: &BasisMatrix, coords: &DVector<f64>) -> Result<DVector<f64>> {
    if coords.len() != u.rank() {
        return Err(Error::Dimension("coordinates do not match the basis".into()));
    }
    let mut x = u.matrix() * coords;
    for (i, v) in x.iter_mut().enumerate() {
        if !(*v <= EXPONENT_GUARD) {
            return Err(Error::Overflow { index: i, value: *v });
        }
        *v = v.exp();
    }
    Ok(x)
}

/// Reconstruction rescaled onto the simplex.
pub fn reconstruct_belief(u: &BasisMatrix, coords: &DVector<f64>) -> Result<Belief> {
    let r = reconstruct(u, coords)?;
    let total = r.sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numerical(format!("reconstruction sums to {total}")));
    }
    Ok(Belief::from_vector_unchecked(r / total))
}

/// `KL(b ∥ r)` after rescaling `r` to sum to one; `0 · ln 0` counts as zero.
pub fn kl_divergence(b: &[f64], r: &[f64]) -> Result<f64> {
    if b.len() != r.len() {
        return Err(Error::Dimension(format!("KL over {} and {} entries", b.len(), r.len())));
    }
    if r.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Numerical("reference distribution has negative or non-finite entries".into()));
    }
    let total: f64 = r.iter().sum();
    let mut kl = 0.0;
    for (s, (&p, &q)) in b.iter().zip(r).enumerate() {
        if p > 0.0 {
            if q == 0.0 {
                return Err(Error::InfiniteDivergence { state: s });
            }
            kl += p * (p / (q / total)).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Shifts a possibly negative reconstruction so its minimum is `floor` and
/// rescales it to sum to one.
pub fn shift_to_simplex(r: &[f64], floor: f64) -> Vec<f64> {
    let min = r.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = floor - min.min(0.0);
    let shifted: Vec<f64> = r.iter().map(|v| v + shift).collect();
    let total: f64 = shifted.iter().sum();
    shifted.into_iter().map(|v| v / total).collect()
}

/// Floor added when shifting linear reconstructions before taking KL.
pub const PCA_KL_FLOOR: f64 = 1e-12;

/// Mean and spread of reconstruction errors over a belief set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconstructionStats {
    pub mean_kl: f64,
    pub std_kl: f64,
    pub mean_l2: f64,
    pub std_l2: f64,
}

impl ReconstructionStats {
    pub fn from_samples(kl: &[f64], l2: &[f64]) -> Self {
        let (mean_kl, std_kl) = mean_std(kl);
        let (mean_l2, std_l2) = mean_std(l2);
        ReconstructionStats { mean_kl, std_kl, mean_l2, std_l2 }
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// KL (after rescaling) and squared L2 (raw) errors of an E-PCA fit.
pub fn epca_reconstruction_stats(b: &BeliefSet, u: &BasisMatrix, c: &CoordMatrix) -> Result<ReconstructionStats> {
    check_dims(b, u, c)?;
    let mut kl = Vec::with_capacity(b.sample_count());
    let mut l2 = Vec::with_capacity(b.sample_count());
    for j in 0..b.sample_count() {
        let r = reconstruct(u, &c.column(j))?;
        kl.push(kl_divergence(b.column(j), r.as_slice())?);
        l2.push(squared_l2(b.column(j), r.as_slice()));
    }
    Ok(ReconstructionStats::from_samples(&kl, &l2))
}

/// Conventional PCA: mean-centred truncated SVD.
#[derive(Clone, Debug)]
pub struct PcaModel {
    /// |S| x rank, orthonormal columns.
    pub basis: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// rank x n.
    pub coords: DMatrix<f64>,
}

pub fn pca_fit(b: &BeliefSet, rank: usize) -> Result<PcaModel> {
    let (ns, n) = (b.state_count(), b.sample_count());
    if rank == 0 || rank > ns.min(n) {
        return Err(Error::Config(format!("PCA rank {rank} must be in 1..={}", ns.min(n))));
    }
    let mean = b.data().column_mean();
    let mut centred = b.data().clone();
    for mut col in centred.column_iter_mut() {
        col -= &mean;
    }
    let svd = centred.clone().svd(true, false);
    let left = svd.u.ok_or_else(|| Error::Numerical("SVD did not produce left vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let basis = DMatrix::from_fn(ns, rank, |i, k| left[(i, order[k])]);
    let coords = basis.transpose() * &centred;
    Ok(PcaModel { basis, mean, coords })
}

impl PcaModel {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, b: &[f64]) -> DVector<f64> {
        let centred = DVector::from_column_slice(b) - &self.mean;
        self.basis.transpose() * centred
    }
}

/// `mean + basis · coords`; may be negative.
pub fn pca_reconstruct(model: &PcaModel, coords: &DVector<f64>) -> DVector<f64> {
    &model.mean + &model.basis * coords
}

/// KL (after shift and rescale) and squared L2 errors of a PCA model.
pub fn pca_reconstruction_stats(b: &BeliefSet, model: &PcaModel) -> Result<ReconstructionStats> {
    let mut kl = Vec::with_capacity(b.sample_count());
    let mut l2 = Vec::with_capacity(b.sample_count());
    for j in 0..b.sample_count() {
        let r = pca_reconstruct(model, &model.coords.column(j).into_owned());
        kl.push(kl_divergence(b.column(j), &shift_to_simplex(r.as_slice(), PCA_KL_FLOOR))?);
        l2.push(squared_l2(b.column(j), r.as_slice()));
    }
    Ok(ReconstructionStats::from_samples(&kl, &l2))
}

/// Replaces `U` by an orthonormal basis of its span and adjusts `B̃` so the
/// product `U B̃` is unchanged.
pub fn orthonormalize(u: &BasisMatrix, c: &CoordMatrix) -> Result<(BasisMatrix, CoordMatrix)> {
    if u.rank() != c.rank() {
        return Err(Error::Dimension("basis and coordinates have different ranks".into()));
    }
    let qr = u.matrix().clone().qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if r.diagonal().iter().any(|v| v.abs() <= 1e-12 * scale) || scale == 0.0 {
        return Err(Error::Numerical("basis is rank deficient".into()));
    }
    let q = qr.q();
    Ok((BasisMatrix::new(q)?, CoordMatrix::new(r * c.matrix())?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_simplex_columns(ns: usize, n: usize, seed: u64) -> BeliefSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(ns, n, |_, _| rng.gen_range(0.05..1.0));
        let mut data = raw.clone();
        for mut col in data.column_iter_mut() {
            let s = col.sum();
            col /= s;
        }
        BeliefSet::new(data).unwrap()
    }

    fn random_matrix(r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
    }

    #[test]
    fn belief_set_rejects_off_simplex_columns() {
        let bad = DMatrix::from_column_slice(2, 1, &[0.5, 0.6]);
        assert!(matches!(BeliefSet::new(bad), Err(Error::Invariant(_))));
        let neg = DMatrix::from_column_slice(2, 1, &[1.5, -0.5]);
        assert!(BeliefSet::new(neg).is_err());
    }

    #[test]
    fn zero_factors_give_state_count_loss() {
        let b = random_simplex_columns(7, 1, 1);
        let u = BasisMatrix::new(DMatrix::zeros(7, 1)).unwrap();
        let c = CoordMatrix::new(DMatrix::zeros(1, 1)).unwrap();
        assert!((epca_loss(&b, &u, &c).unwrap() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn exact_fit_loss_is_data_term() {
        let b = random_simplex_columns(5, 1, 2);
        let u = BasisMatrix::new(DMatrix::identity(5, 5)).unwrap();
        let c = CoordMatrix::new(b.data().map(f64::ln)).unwrap();
        let col = b.column(0);
        let expect = 1.0 - col.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((epca_loss(&b, &u, &c).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_termwise_evaluation() {
        let b = BeliefSet::new(DMatrix::from_column_slice(3, 2, &[0.2, 0.3, 0.5, 0.6, 0.1, 0.3])).unwrap();
        let u = BasisMatrix::new(DMatrix::from_column_slice(3, 1, &[0.4, -1.2, 0.7])).unwrap();
        let c = CoordMatrix::new(DMatrix::from_row_slice(1, 2, &[0.9, -0.3])).unwrap();
        let mut expect = 0.0;
        for j in 0..2 {
            for i in 0..3 {
                let x = u.matrix()[(i, 0)] * c.matrix()[(0, j)];
                expect += x.exp() - b.data()[(i, j)] * x;
            }
        }
        assert!((epca_loss(&b, &u, &c).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch_is_structural() {
        let b = random_simplex_columns(4, 3, 2);
        let u = BasisMatrix::new(DMatrix::zeros(5, 2)).unwrap();
        let c = CoordMatrix::new(DMatrix::zeros(2, 3)).unwrap();
        assert!(matches!(epca_loss(&b, &u, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn gradients_vanish_at_exact_fit_and_zero_factors() {
        let b = random_simplex_columns(4, 1, 3);
        let u = BasisMatrix::new(DMatrix::identity(4, 4)).unwrap();
        let c = CoordMatrix::new(b.data().map(f64::ln)).unwrap();
        let (gu, gc) = loss_gradients(&b, &u, &c).unwrap();
        assert!(gu.amax() < 1e-15 && gc.amax() < 1e-15);

        let u0 = BasisMatrix::new(DMatrix::zeros(4, 2)).unwrap();
        let c0 = CoordMatrix::new(DMatrix::zeros(2, 1)).unwrap();
        let (gu, gc) = loss_gradients(&b, &u0, &c0).unwrap();
        assert_eq!(gu.amax(), 0.0);
        assert_eq!(gc.amax(), 0.0);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_simplex_columns(4, 3, 5);
        let u = random_matrix(4, 2, 1.0, &mut rng);
        let c = random_matrix(2, 3, 1.0, &mut rng);
        let (gu, gc) = loss_gradients(&b, &BasisMatrix::new(u.clone()).unwrap(), &CoordMatrix::new(c.clone()).unwrap()).unwrap();
        let h = 1e-6;
        let loss = |u: &DMatrix<f64>, c: &DMatrix<f64>| {
            epca_loss(&b, &BasisMatrix::new(u.clone()).unwrap(), &CoordMatrix::new(c.clone()).unwrap()).unwrap()
        };
        for k in 0..u.len() {
            let (mut up, mut dn) = (u.clone(), u.clone());
            up[k] += h;
            dn[k] -= h;
            let fd = (loss(&up, &c) - loss(&dn, &c)) / (2.0 * h);
            assert!((fd - gu[k]).abs() <= 1e-5 * gu[k].abs().max(1e-3), "{fd} vs {}", gu[k]);
        }
        for k in 0..c.len() {
            let (mut up, mut dn) = (c.clone(), c.clone());
            up[k] += h;
            dn[k] -= h;
            let fd = (loss(&u, &up) - loss(&u, &dn)) / (2.0 * h);
            assert!((fd - gc[k]).abs() <= 1e-5 * gc[k].abs().max(1e-3), "{fd} vs {}", gc[k]);
        }
    }

    #[test]
    fn coord_update_fixed_point_at_exact_fit() {
        let b = random_simplex_columns(3, 1, 6);
        let u = BasisMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let v = b.data().column(0).map(f64::ln);
        let next = newton_update_coords(&u, b.column(0), &v, 1e-14).unwrap();
        assert!((next - v).amax() < 1e-10);
    }

    #[test]
    fn coord_update_converges_to_uniform_log() {
        let ns = 6;
        let u = BasisMatrix::new(DMatrix::from_element(ns, 1, 1.0)).unwrap();
        let b = vec![1.0 / ns as f64; ns];
        let mut v = DVector::zeros(1);
        for _ in 0..50 {
            v = newton_update_coords(&u, &b, &v, 1e-5).unwrap();
        }
        assert!((v[0] - (1.0 / ns as f64).ln()).abs() < 1e-4);
    }

    #[test]
    fn iterated_coord_updates_reach_grid_search_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = BasisMatrix::new(random_matrix(5, 2, 0.8, &mut rng)).unwrap();
        let b = random_simplex_columns(5, 1, 8);
        let target = b.column(0);
        let cfg = EpcaConfig::default();
        let v = compress(&u, target, &cfg).unwrap();
        let got = compressed_loss(&u, target, &v);

        // Dense grid over [-10, 10]^2 at step 0.01.
        let mut best = f64::INFINITY;
        for i in 0..=2000 {
            for k in 0..=2000 {
                let p = DVector::from_vec(vec![-10.0 + 0.01 * i as f64, -10.0 + 0.01 * k as f64]);
                best = best.min(compressed_loss(&u, target, &p));
            }
        }
        assert!(got <= best + 1e-6, "newton {got} grid {best}");
        assert!(best - got < 1e-3);
    }

    #[test]
    fn basis_update_fixed_point_and_symmetry() {
        // n = 1, l = 1: the row update on U_i is the coordinate update with the
        // roles of the factors swapped.
        let b = BeliefSet::new(DMatrix::from_column_slice(2, 1, &[0.3, 0.7])).unwrap();
        let c = CoordMatrix::new(DMatrix::from_element(1, 1, 0.8)).unwrap();
        let row = DVector::from_element(1, -0.4);
        let via_rows = newton_update_basis(&c, &b, &row, 1, 1e-5).unwrap();
        let swapped = BasisMatrix::new(DMatrix::from_element(1, 1, 0.8)).unwrap();
        let via_cols = newton_update_coords(&swapped, &[0.7], &row, 1e-5).unwrap();
        assert!((via_rows[0] - via_cols[0]).abs() < 1e-15);

        // fixed point: U_i c = ln B_i
        let fixed = DVector::from_element(1, 0.7f64.ln() / 0.8);
        let next = newton_update_basis(&c, &b, &fixed, 1, 1e-14).unwrap();
        assert!((next[0] - fixed[0]).abs() < 1e-10);
    }

    #[test]
    fn basis_rows_match_grid_search() {
        let b = random_simplex_columns(4, 3, 9);
        let c = CoordMatrix::new(DMatrix::from_row_slice(1, 3, &[0.7, -0.4, 1.3])).unwrap();
        let cfg = EpcaConfig::default();
        let design = c.matrix().transpose();
        for i in 0..4 {
            let row: Vec<f64> = b.data().row(i).iter().copied().collect();
            let mut v = DVector::zeros(1);
            let mut f = penalized_loss(&design, &row, &v, cfg.newton_regularizer);
            for _ in 0..100 {
                let (nv, nf) = damped_newton(&design, &row, &v, f, &cfg, Axis::Row).unwrap();
                v = nv;
                f = nf;
            }
            let mut best = (f64::INFINITY, 0.0);
            for k in 0..=200_000 {
                let x = -10.0 + 1e-4 * k as f64;
                let fx = subproblem_loss(&design, &row, &DVector::from_element(1, x));
                if fx < best.0 {
                    best = (fx, x);
                }
            }
            assert!((v[0] - best.1).abs() < 2e-4, "row {i}: {} vs {}", v[0], best.1);
        }
    }

    #[test]
    fn default_regularizer_bias_is_small() {
        // The ridge term shifts the fixed point slightly off the exact fit.
        let col = [0.1, 0.2, 0.3, 0.4];
        let b = BeliefSet::new(DMatrix::from_fn(4, 6, |i, _| col[i])).unwrap();
        let cfg = EpcaConfig { rank: 1, loss_tolerance: 1e-14, seed: 3, ..Default::default() };
        let fit = epca_fit(&b, &cfg).unwrap();
        let r = reconstruct(&fit.basis, &fit.coords.column(0)).unwrap();
        for i in 0..4 {
            assert!((r[i] - col[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn rank_one_identical_columns_are_exact() {
        let col = [0.1, 0.2, 0.3, 0.4];
        let data = DMatrix::from_fn(4, 6, |i, _| col[i]);
        let b = BeliefSet::new(data).unwrap();
        let cfg = EpcaConfig { rank: 1, max_sweeps: 500, loss_tolerance: 1e-14, newton_regularizer: 1e-10, seed: 3, ..Default::default() };
        let fit = epca_fit(&b, &cfg).unwrap();
        for j in 0..6 {
            let r = reconstruct(&fit.basis, &fit.coords.column(j)).unwrap();
            for i in 0..4 {
                assert!((r[i] - col[i]).abs() < 1e-6, "{} vs {}", r[i], col[i]);
            }
        }
    }

    #[test]
    fn loss_trace_never_increases() {
        let b = random_simplex_columns(12, 20, 10);
        let fit = epca_fit(&b, &EpcaConfig::with_rank(3, 1)).unwrap();
        for w in fit.loss_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn fit_rejects_rank_above_state_count() {
        let b = random_simplex_columns(3, 4, 11);
        assert!(matches!(epca_fit(&b, &EpcaConfig::with_rank(4, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn compress_reproduces_training_coordinates() {
        // beliefs exactly representable with a constant basis and two bumps
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = DMatrix::from_fn(10, 15, |_, _| 0.0);
        let mut data = data;
        for j in 0..15 {
            let (a, c) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            for i in 0..10 {
                let t = i as f64 * 0.6;
                data[(i, j)] = (a * t.sin() + c * t.cos()).exp();
            }
            let s = data.column(j).sum();
            data.column_mut(j).unscale_mut(s);
        }
        let b = BeliefSet::new(data).unwrap();
        let cfg = EpcaConfig { rank: 3, loss_tolerance: 1e-12, max_sweeps: 400, seed: 5, ..Default::default() };
        let fit = epca_fit(&b, &cfg).unwrap();
        for j in 0..5 {
            let v = compress(&fit.basis, b.column(j), &cfg).unwrap();
            let trained = fit.coords.column(j);
            assert!((&v - &trained).amax() < 1e-4 * trained.amax().max(1.0));
        }
    }

    #[test]
    fn reconstruct_edge_cases() {
        let u = BasisMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let ones = reconstruct(&u, &DVector::zeros(3)).unwrap();
        assert!(ones.iter().all(|v| *v == 1.0));
        let b = [0.2, 0.5, 0.3];
        let r = reconstruct(&u, &DVector::from_iterator(3, b.iter().map(|p: &f64| p.ln()))).unwrap();
        for (x, y) in r.iter().zip(b) {
            assert!((x - y).abs() < 1e-15);
        }
        let err = reconstruct(&u, &DVector::from_vec(vec![0.0, 701.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Overflow { index: 1, .. }));
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::InfiniteDivergence { state: 1 })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let q: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..1.0)).collect();
        let (ps, qs): (f64, f64) = (p.iter().sum(), q.iter().sum());
        let p: Vec<f64> = p.iter().map(|v| v / ps).collect();
        let direct: f64 = (0..5).map(|i| p[i] * (p[i] / (q[i] / qs)).ln()).sum();
        assert!((kl_divergence(&p, &q).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn pca_exact_on_affine_subspace_and_full_rank() {
        // columns on the line mean + t * d
        let d = [0.1, -0.05, -0.05];
        let data = DMatrix::from_fn(3, 5, |i, j| 1.0 / 3.0 + (j as f64 - 2.0) * d[i]);
        let b = BeliefSet::new(data).unwrap();
        let m = pca_fit(&b, 1).unwrap();
        assert!(pca_reconstruction_stats(&b, &m).unwrap().mean_l2 < 1e-28);

        let b = random_simplex_columns(4, 6, 14);
        let m = pca_fit(&b, 4).unwrap();
        assert!(pca_reconstruction_stats(&b, &m).unwrap().mean_l2 < 1e-28);
        assert!(pca_fit(&b, 5).is_err());
    }

    #[test]
    fn orthonormalize_preserves_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let u = BasisMatrix::new(random_matrix(8, 3, 1.0, &mut rng)).unwrap();
        let c = CoordMatrix::new(random_matrix(3, 5, 1.0, &mut rng)).unwrap();
        let (u2, c2) = orthonormalize(&u, &c).unwrap();
        let gram = u2.matrix().transpose() * u2.matrix();
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-10);
        let before = u.matrix() * c.matrix();
        let after = u2.matrix() * c2.matrix();
        assert!((before - after).amax() < 1e-10);
    }

    #[test]
    fn orthonormal_basis_unchanged_up_to_sign() {
        let u = BasisMatrix::new(DMatrix::identity(4, 2)).unwrap();
        let c = CoordMatrix::new(DMatrix::from_element(2, 1, 0.5)).unwrap();
        let (u2, _) = orthonormalize(&u, &c).unwrap();
        assert!((u2.matrix().abs() - u.matrix()).amax() < 1e-12);
    }

    #[test]
    fn orthonormalize_rejects_rank_deficient_basis() {
        let u = BasisMatrix::new(DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0])).unwrap();
        let c = CoordMatrix::new(DMatrix::zeros(2, 1)).unwrap();
        assert!(matches!(orthonormalize(&u, &c), Err(Error::Numerical(_))));
    }

    mod props {
    use super::super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn reconstruction_is_positive(coords in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let u = BasisMatrix::new(DMatrix::from_fn(6, 3, |i, k| ((i * 3 + k) as f64).sin())).unwrap();
            let r = reconstruct(&u, &DVector::from_vec(coords)).unwrap();
            prop_assert!(r.min() > 0.0);
        }

        #[test]
        fn kl_is_nonnegative_and_scale_invariant(
            p in proptest::collection::vec(0.0f64..1.0, 4),
            q in proptest::collection::vec(0.01f64..1.0, 4),
            scale in 0.1f64..10.0,
        ) {
            let ps: f64 = p.iter().sum();
            prop_assume!(ps > 1e-6);
            let p: Vec<f64> = p.iter().map(|v| v / ps).collect();
            let kl = kl_divergence(&p, &q).unwrap();
            let scaled: Vec<f64> = q.iter().map(|v| v * scale).collect();
            prop_assert!(kl >= 0.0);
            prop_assert!((kl - kl_divergence(&p, &scaled).unwrap()).abs() < 1e-12);
            prop_assert!(kl_divergence(&p, &p).unwrap() < 1e-14);
        }
    }
}
}
