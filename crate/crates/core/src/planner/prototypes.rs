use std::collections::{BTreeMap, HashSet};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::epca::CoordMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApproximatorKind {
    /// One prototype per occupied cell of a regular grid.
    Grid,
    /// The prototypes themselves, queried by nearest neighbour.
    NearestNeighbor,
}

impl std::str::FromStr for ApproximatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(ApproximatorKind::Grid),
            "nn" | "nearest-neighbor" | "1nn" => Ok(ApproximatorKind::NearestNeighbor),
            other => Err(Error::Config(format!("unknown approximator kind {other:?} (expected grid or nn)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PrototypeConfig {
    pub kind: ApproximatorKind,
    /// Grid cell widths per dimension; defaults to range / `divisions`.
    pub widths: Option<Vec<f64>>,
    pub divisions: f64,
    /// Fraction of the coordinate range added on each side of the bounding box.
    pub padding: f64,
    /// Keep at most this many nearest-neighbour prototypes (evenly strided).
    pub subsample: Option<usize>,
    pub max_prototypes: usize,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig {
            kind: ApproximatorKind::Grid,
            widths: None,
            divisions: 12.0,
            padding: 0.1,
            subsample: None,
            max_prototypes: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub origin: Vec<f64>,
    pub widths: Vec<f64>,
    cells: BTreeMap<Vec<i64>, usize>,
}

impl GridSpec {
    pub fn new(origin: Vec<f64>, widths: Vec<f64>) -> Self {
        GridSpec { origin, widths, cells: BTreeMap::new() }
    }

    /// Integer cell index of a point.
    pub fn cell_of(&self, x: &DVector<f64>) -> Vec<i64> {
        x.iter()
            .zip(self.origin.iter().zip(&self.widths))
            .map(|(v, (o, w))| ((v - o) / w).floor() as i64)
            .collect()
    }

    fn center(&self, key: &[i64]) -> DVector<f64> {
        DVector::from_iterator(
            key.len(),
            key.iter().zip(self.origin.iter().zip(&self.widths)).map(|(&k, (o, w))| o + (k as f64 + 0.5) * w),
        )
    }
}

/// Finite set of compressed-belief prototypes with its averager.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub kind: ApproximatorKind,
    prototypes: Vec<DVector<f64>>,
    grid: Option<GridSpec>,
}

impl PrototypeSet {
    /// Nearest-neighbour set; exact duplicates are dropped, order is kept.
    pub fn nearest_neighbor(points: Vec<DVector<f64>>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut prototypes = Vec::new();
        for p in points {
            let bits: Vec<u64> = p.iter().map(|x| x.to_bits()).collect();
            if seen.insert(bits) {
                prototypes.push(p);
            }
        }
        Self::checked(ApproximatorKind::NearestNeighbor, prototypes, None)
    }

    /// Grid set whose prototypes are the centers of `cells`.
    pub fn grid(spec: GridSpec, cells: Vec<Vec<i64>>) -> Result<Self> {
        let mut spec = spec;
        let mut cells = cells;
        cells.sort();
        cells.dedup();
        let prototypes = cells.iter().map(|k| spec.center(k)).collect();
        spec.cells = cells.into_iter().enumerate().map(|(i, k)| (k, i)).collect();
        Self::checked(ApproximatorKind::Grid, prototypes, Some(spec))
    }

    fn checked(kind: ApproximatorKind, prototypes: Vec<DVector<f64>>, grid: Option<GridSpec>) -> Result<Self> {
        let Some(first) = prototypes.first() else {
            return Err(Error::Config("a prototype set needs at least one prototype".into()));
        };
        let l = first.len();
        if prototypes.iter().any(|p| p.len() != l || p.iter().any(|x| !x.is_finite())) {
            return Err(Error::Dimension("prototypes must share one dimension and be finite".into()));
        }
        Ok(PrototypeSet { kind, prototypes, grid })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.prototypes[0].len()
    }

    pub fn prototype(&self, i: usize) -> &DVector<f64> {
        &self.prototypes[i]
    }

    pub fn prototypes(&self) -> &[DVector<f64>] {
        &self.prototypes
    }

    pub fn grid_spec(&self) -> Option<&GridSpec> {
        self.grid.as_ref()
    }

    /// Occupied grid cells in prototype order.
    pub fn grid_cells(&self) -> Option<Vec<Vec<i64>>> {
        self.grid.as_ref().map(|g| {
            let mut cells: Vec<(usize, Vec<i64>)> = g.cells.iter().map(|(k, &i)| (i, k.clone())).collect();
            cells.sort();
            cells.into_iter().map(|(_, k)| k).collect()
        })
    }

    /// Nearest prototype by Euclidean distance; ties to the lowest index.
    pub fn nearest(&self, q: &DVector<f64>) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, p) in self.prototypes.iter().enumerate() {
            let d: f64 = p.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Prototype receiving all of the weight of `q`.
    pub fn locate(&self, q: &DVector<f64>) -> usize {
        if let Some(g) = &self.grid {
            if let Some(&i) = g.cells.get(&g.cell_of(q)) {
                return i;
            }
        }
        self.nearest(q)
    }

    /// A nearest-neighbour set holding these prototypes followed by `extra`.
    pub fn extended(&self, extra: Vec<DVector<f64>>) -> Result<Self> {
        let mut all = self.prototypes.clone();
        all.extend(extra);
        Self::nearest_neighbor(all)
    }
}

/// Discretizes the training coordinates.
pub fn build_prototypes(coords: &CoordMatrix, cfg: &PrototypeConfig) -> Result<PrototypeSet> {
    let (l, n) = (coords.rank(), coords.sample_count());
    if n == 0 {
        return Err(Error::Config("no training coordinates to discretize".into()));
    }
    match cfg.kind {
        ApproximatorKind::NearestNeighbor => {
            let stride = match cfg.subsample {
                Some(0) => return Err(Error::Config("subsample must be at least 1".into())),
                Some(k) if k < n => n.div_ceil(k),
                _ => 1,
            };
            let points: Vec<_> = (0..n).step_by(stride).map(|j| coords.column(j)).collect();
            let set = PrototypeSet::nearest_neighbor(points)?;
            if set.len() > cfg.max_prototypes {
                return Err(Error::Config(format!("{} prototypes exceed the cap of {}", set.len(), cfg.max_prototypes)));
            }
            Ok(set)
        }
        ApproximatorKind::Grid => {
            let c = coords.matrix();
            let mut origin = Vec::with_capacity(l);
            let mut widths = Vec::with_capacity(l);
            for d in 0..l {
                let row = c.row(d);
                let (lo, hi) = (row.min(), row.max());
                let range = hi - lo;
                let w = match &cfg.widths {
                    Some(ws) => *ws.get(d).ok_or_else(|| Error::Config(format!("missing grid width for dimension {d}")))?,
                    None if range > 0.0 => range / cfg.divisions,
                    None => 1.0,
                };
                if !(w > 0.0) || !w.is_finite() {
                    return Err(Error::Config(format!("grid width {w} for dimension {d} must be positive")));
                }
                origin.push(lo - cfg.padding * range);
                widths.push(w);
            }
            let spec = GridSpec::new(origin, widths);
            let mut cells: Vec<Vec<i64>> = (0..n).map(|j| spec.cell_of(&coords.column(j))).collect();
            cells.sort();
            cells.dedup();
            if cells.len() > cfg.max_prototypes {
                return Err(Error::Config(format!(
                    "grid resolution gives {} occupied cells, above the cap of {}",
                    cells.len(),
                    cfg.max_prototypes
                )));
            }
            PrototypeSet::grid(spec, cells)
        }
    }
}

/// Averager weights of `q`: all weight on one prototype.
pub fn approximator_weights(p: &PrototypeSet, q: &DVector<f64>) -> Vec<(usize, f64)> {
    vec![(p.locate(q), 1.0)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn coords(cols: &[&[f64]]) -> CoordMatrix {
        let l = cols[0].len();
        CoordMatrix::new(DMatrix::from_fn(l, cols.len(), |i, j| cols[j][i])).unwrap()
    }

    #[test]
    fn single_point_grid() {
        let p = build_prototypes(&coords(&[&[0.3, -2.0]]), &PrototypeConfig::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.prototype(0), &DVector::from_vec(vec![0.8, -1.5]));
        assert_eq!(p.locate(&DVector::from_vec(vec![0.3, -2.0])), 0);
    }

    #[test]
    fn nn_without_subsampling_keeps_coordinates() {
        let c = coords(&[&[0.0, 1.0], &[2.0, 3.0], &[0.0, 1.0], &[5.0, -1.0]]);
        let p = build_prototypes(&c, &PrototypeConfig { kind: ApproximatorKind::NearestNeighbor, ..Default::default() }).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.prototype(1), &c.column(1));
        assert_eq!(p.prototype(2), &c.column(3));
    }

    #[test]
    fn midpoint_goes_to_lower_index() {
        let p = PrototypeSet::nearest_neighbor(vec![DVector::from_vec(vec![1.0]), DVector::from_vec(vec![-1.0])]).unwrap();
        assert_eq!(approximator_weights(&p, &DVector::from_vec(vec![0.0])), vec![(0, 1.0)]);
    }

    #[test]
    fn query_at_prototype_weights_it() {
        let c = coords(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let p = build_prototypes(&c, &PrototypeConfig::default()).unwrap();
        for i in 0..p.len() {
            assert_eq!(approximator_weights(&p, p.prototype(i)), vec![(i, 1.0)]);
        }
    }

    #[test]
    fn every_training_point_lands_in_its_cell() {
        let pts: Vec<Vec<f64>> = (0..50).map(|k| vec![(k as f64 * 0.37).sin(), (k as f64 * 0.11).cos() * 3.0]).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|v| v.as_slice()).collect();
        let c = coords(&refs);
        let p = build_prototypes(&c, &PrototypeConfig::default()).unwrap();
        let g = p.grid_spec().unwrap();
        for j in 0..50 {
            let q = c.column(j);
            let i = p.locate(&q);
            for d in 0..2 {
                assert!((p.prototype(i)[d] - q[d]).abs() <= 0.5 * g.widths[d] + 1e-12);
            }
        }
    }

    #[test]
    fn prototype_cap() {
        let pts: Vec<Vec<f64>> = (0..100).map(|k| vec![k as f64]).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|v| v.as_slice()).collect();
        let cfg = PrototypeConfig { widths: Some(vec![0.5]), max_prototypes: 10, ..Default::default() };
        assert!(matches!(build_prototypes(&coords(&refs), &cfg), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn weights_are_an_averager(q in proptest::collection::vec(-10.0f64..10.0, 2)) {
            let c = coords(&[&[0.0, 0.0], &[1.0, 2.0], &[-3.0, 1.0], &[4.0, -4.0]]);
            for kind in [ApproximatorKind::Grid, ApproximatorKind::NearestNeighbor] {
                let p = build_prototypes(&c, &PrototypeConfig { kind, ..Default::default() }).unwrap();
                let w = approximator_weights(&p, &DVector::from_vec(q.clone()));
                prop_assert!(w.iter().all(|e| e.1 >= 0.0 && e.0 < p.len()));
                prop_assert!((w.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() == 0.0);
            }
        }
    }
}
