//! Areal supports, overlap tables, and the area-weighted partition
//! matrices that aggregate partition-scale values onto observed supports.

use std::collections::{BTreeSet, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative tolerance used for area bookkeeping.
pub const AREA_TOL: f64 = 1e-9;
/// Largest tolerated off-diagonal entry of `P P'`.
pub const DISJOINT_TOL: f64 = 1e-12;

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub const UNIT: Rect = Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1)]
    }

    /// Area of the intersection with `other` (zero when disjoint).
    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    fn is_degenerate(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
            || ![self.x0, self.x1, self.y0, self.y1].iter().all(|v| v.is_finite())
    }
}

/// A set of non-overlapping areal units with areas, centroids and a
/// symmetric adjacency structure.
#[derive(Clone, Debug)]
pub struct ArealSupport {
    ids: Vec<String>,
    areas: Vec<f64>,
    centroids: Vec<[f64; 2]>,
    neighbors: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
}

impl ArealSupport {
    /// Builds a support from per-unit data and an undirected edge list given
    /// by unit position.
    pub fn new(
        ids: Vec<String>,
        areas: Vec<f64>,
        centroids: Vec<[f64; 2]>,
        edges: &[(usize, usize)],
    ) -> Result<Self> {
        let n = ids.len();
        if areas.len() != n || centroids.len() != n {
            return Err(invalid(format!(
                "support has {n} ids, {} areas and {} centroids",
                areas.len(),
                centroids.len()
            )));
        }
        let mut index = HashMap::with_capacity(n);
        for (k, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), k).is_some() {
                return Err(invalid(format!("duplicate unit id `{id}`")));
            }
        }
        for (id, &a) in ids.iter().zip(&areas) {
            if !(a > 0.0) || !a.is_finite() {
                return Err(invalid(format!("unit `{id}` has non-positive area {a}")));
            }
        }
        let mut sets = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(invalid(format!("edge ({a}, {b}) references a unit outside 0..{n}")));
            }
            if a == b {
                return Err(invalid(format!("unit `{}` is listed as its own neighbour", ids[a])));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        let neighbors = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(Self { ids, areas, centroids, neighbors, index })
    }

    /// Same as [`ArealSupport::new`] with edges given by unit id.
    pub fn with_id_edges(
        ids: Vec<String>,
        areas: Vec<f64>,
        centroids: Vec<[f64; 2]>,
        edges: &[(String, String)],
    ) -> Result<Self> {
        let lookup: HashMap<&str, usize> =
            ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
        let mut idx = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            let ia = *lookup.get(a.as_str()).ok_or_else(|| invalid(format!("edge references unknown unit `{a}`")))?;
            let ib = *lookup.get(b.as_str()).ok_or_else(|| invalid(format!("edge references unknown unit `{b}`")))?;
            idx.push((ia, ib));
        }
        Self::new(ids, areas, centroids, &idx)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn centroids(&self) -> &[[f64; 2]] {
        &self.centroids
    }

    pub fn neighbors(&self, unit: usize) -> &[usize] {
        &self.neighbors[unit]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Undirected edges `(a, b)` with `a < b`, in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, nb) in self.neighbors.iter().enumerate() {
            out.extend(nb.iter().filter(|&&b| b > a).map(|&b| (a, b)));
        }
        out
    }

    /// Row sums `w_{i+}` of the adjacency matrix.
    pub fn degrees(&self) -> Vec<f64> {
        self.neighbors.iter().map(|nb| nb.len() as f64).collect()
    }

    /// Dense 0/1 adjacency matrix `W`.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut w = DMatrix::zeros(n, n);
        for (a, nb) in self.neighbors.iter().enumerate() {
            for &b in nb {
                w[(a, b)] = 1.0;
            }
        }
        w
    }

    /// Copy of this support with units renamed.
    pub fn relabel(&self, ids: Vec<String>) -> Result<Self> {
        Self::new(ids, self.areas.clone(), self.centroids.clone(), &self.edges())
    }
}

/// Builds a `rows x cols` grid of equal cells over `bounds` with rook
/// adjacency. Units are ordered row-major from the lower-left corner and
/// named `r{row}c{col}`.
pub fn build_grid_support(rows: usize, cols: usize, bounds: Rect) -> Result<ArealSupport> {
    if rows == 0 || cols == 0 {
        return Err(invalid("grid needs at least one row and one column"));
    }
    if bounds.is_degenerate() {
        return Err(invalid(format!("degenerate grid bounds {bounds:?}")));
    }
    let dx = bounds.width() / cols as f64;
    let dy = bounds.height() / rows as f64;
    let mut ids = Vec::with_capacity(rows * cols);
    let mut centroids = Vec::with_capacity(rows * cols);
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let k = r * cols + c;
            ids.push(format!("r{r}c{c}"));
            centroids.push([bounds.x0 + (c as f64 + 0.5) * dx, bounds.y0 + (r as f64 + 0.5) * dy]);
            if c + 1 < cols {
                edges.push((k, k + 1));
            }
            if r + 1 < rows {
                edges.push((k, k + cols));
            }
        }
    }
    ArealSupport::new(ids, vec![dx * dy; rows * cols], centroids, &edges)
}

/// One row of an overlap table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub fine_id: String,
    pub coarse_id: String,
    pub overlap_area: f64,
}

/// Which fine (partition) unit lies inside which coarse unit, with the
/// overlap area.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OverlapTable {
    rows: Vec<OverlapRow>,
}

impl OverlapTable {
    pub fn new(rows: Vec<OverlapRow>) -> Result<Self> {
        let mut seen = HashMap::new();
        for row in &rows {
            if !(row.overlap_area > 0.0) || !row.overlap_area.is_finite() {
                return Err(invalid(format!(
                    "overlap of fine `{}` with coarse `{}` is not positive ({})",
                    row.fine_id, row.coarse_id, row.overlap_area
                )));
            }
            if let Some(prev) = seen.insert(row.fine_id.clone(), row.coarse_id.clone()) {
                return Err(invalid(format!(
                    "fine unit `{}` is assigned to both `{prev}` and `{}`",
                    row.fine_id, row.coarse_id
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[OverlapRow] {
        &self.rows
    }
}

/// How rows of a partition matrix are normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowNormalization {
    /// Divide by the coarse unit's area; rows must then sum to one.
    #[default]
    CoarseArea,
    /// Divide by the summed overlap inside the modelled region. Used when a
    /// coarse unit extends past the domain.
    ObservedOverlap,
}

/// Sparse area-weighted aggregation operator (coarse x fine). Each column
/// holds at most one nonzero.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionMatrix {
    n_fine: usize,
    rows: Vec<Vec<(usize, f64)>>,
    coarse_ids: Vec<String>,
    fine_ids: Vec<String>,
}

impl PartitionMatrix {
    /// Builds a partition matrix from explicit sparse rows, checking every
    /// invariant.
    pub fn from_rows(
        rows: Vec<Vec<(usize, f64)>>,
        coarse_ids: Vec<String>,
        fine_ids: Vec<String>,
    ) -> Result<Self> {
        if rows.len() != coarse_ids.len() {
            return Err(invalid("row count does not match coarse ids"));
        }
        let pm = Self { n_fine: fine_ids.len(), rows, coarse_ids, fine_ids };
        pm.validate()?;
        Ok(pm)
    }

    /// Identity map on a support (partition scale onto itself).
    pub fn identity(support: &ArealSupport) -> Self {
        let n = support.len();
        Self {
            n_fine: n,
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
            coarse_ids: support.ids().to_vec(),
            fine_ids: support.ids().to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        let mut owner: Vec<Option<usize>> = vec![None; self.n_fine];
        for (i, row) in self.rows.iter().enumerate() {
            let mut sum = 0.0;
            for &(l, w) in row {
                if l >= self.n_fine {
                    return Err(invalid(format!("row {i} references fine column {l}")));
                }
                if !(w > 0.0) || !w.is_finite() {
                    return Err(invalid(format!("row {i} has non-positive weight {w}")));
                }
                if let Some(prev) = owner[l] {
                    return Err(Error::DisjointnessViolation { row_a: prev, row_b: i, value: w });
                }
                owner[l] = Some(i);
                sum += w;
            }
            if (sum - 1.0).abs() > AREA_TOL {
                return Err(Error::InconsistentOverlap {
                    coarse: self.coarse_ids[i].clone(),
                    total: sum,
                    area: 1.0,
                });
            }
        }
        Ok(())
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.n_fine
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn coarse_ids(&self) -> &[String] {
        &self.coarse_ids
    }

    pub fn fine_ids(&self) -> &[String] {
        &self.fine_ids
    }

    /// `P y` for a fine-scale vector `y`.
    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n_fine, "vector length must match the fine support");
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(l, w)| w * y[l]).sum())
            .collect()
    }

    /// `P M` for a fine-scale matrix `M` (n_fine x k).
    pub fn apply_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.nrows(), self.n_fine, "matrix rows must match the fine support");
        let mut out = DMatrix::zeros(self.nrows(), m.ncols());
        for (i, row) in self.rows.iter().enumerate() {
            for &(l, w) in row {
                for c in 0..m.ncols() {
                    out[(i, c)] += w * m[(l, c)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows(), self.n_fine);
        for (i, row) in self.rows.iter().enumerate() {
            for &(l, w) in row {
                d[(i, l)] = w;
            }
        }
        d
    }

    /// Number of nonzeros per column.
    pub fn column_nonzeros(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_fine];
        for row in &self.rows {
            for &(l, _) in row {
                counts[l] += 1;
            }
        }
        counts
    }

    /// Coarse row owning each fine column, if any.
    pub fn owners(&self) -> Vec<Option<usize>> {
        let mut owner = vec![None; self.n_fine];
        for (i, row) in self.rows.iter().enumerate() {
            for &(l, _) in row {
                owner[l] = Some(i);
            }
        }
        owner
    }
}

/// Builds `P` with entries `overlap(l, i) / |coarse_i|`.
pub fn build_partition_matrix(
    coarse: &ArealSupport,
    fine: &ArealSupport,
    overlaps: &OverlapTable,
) -> Result<PartitionMatrix> {
    build_partition_matrix_with(coarse, fine, overlaps, RowNormalization::CoarseArea)
}

/// Builds `P` with an explicit row normalization policy.
pub fn build_partition_matrix_with(
    coarse: &ArealSupport,
    fine: &ArealSupport,
    overlaps: &OverlapTable,
    normalization: RowNormalization,
) -> Result<PartitionMatrix> {
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); coarse.len()];
    for row in overlaps.rows() {
        let i = coarse
            .position(&row.coarse_id)
            .ok_or_else(|| invalid(format!("unknown coarse unit `{}`", row.coarse_id)))?;
        let l = fine
            .position(&row.fine_id)
            .ok_or_else(|| invalid(format!("unknown fine unit `{}`", row.fine_id)))?;
        rows[i].push((l, row.overlap_area));
    }
    for (i, row) in rows.iter_mut().enumerate() {
        row.sort_by_key(|&(l, _)| l);
        let total: f64 = row.iter().map(|&(_, a)| a).sum();
        let area = coarse.areas()[i];
        let denom = match normalization {
            RowNormalization::CoarseArea => {
                if (total - area).abs() > AREA_TOL * area {
                    return Err(Error::InconsistentOverlap {
                        coarse: coarse.ids()[i].clone(),
                        total,
                        area,
                    });
                }
                area
            }
            RowNormalization::ObservedOverlap => {
                if row.is_empty() {
                    return Err(Error::InconsistentOverlap {
                        coarse: coarse.ids()[i].clone(),
                        total,
                        area,
                    });
                }
                total
            }
        };
        for entry in row.iter_mut() {
            entry.1 /= denom;
        }
    }
    PartitionMatrix::from_rows(rows, coarse.ids().to_vec(), fine.ids().to_vec())
}

/// Block-diagonal `[[P1, 0], [0, P2]]` of size `(n1 + n2) x 2 n3`.
pub fn assemble_block_partition(p1: &PartitionMatrix, p2: &PartitionMatrix) -> Result<PartitionMatrix> {
    if p1.ncols() != p2.ncols() || p1.fine_ids() != p2.fine_ids() {
        return Err(invalid("P1 and P2 must target the same fine support"));
    }
    let n3 = p1.ncols();
    let mut rows = p1.rows.clone();
    rows.extend(p2.rows.iter().map(|r| r.iter().map(|&(l, w)| (l + n3, w)).collect()));
    let mut coarse_ids: Vec<String> = p1.coarse_ids.iter().map(|id| format!("1:{id}")).collect();
    coarse_ids.extend(p2.coarse_ids.iter().map(|id| format!("2:{id}")));
    let mut fine_ids: Vec<String> = p1.fine_ids.iter().map(|id| format!("1:{id}")).collect();
    fine_ids.extend(p1.fine_ids.iter().map(|id| format!("2:{id}")));
    PartitionMatrix::from_rows(rows, coarse_ids, fine_ids)
}

/// Diagonal of `P P'`, after confirming the off-diagonal part vanishes.
pub fn diag_ppt(p: &PartitionMatrix) -> Result<Vec<f64>> {
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; p.ncols()];
    for (i, row) in p.rows.iter().enumerate() {
        for &(l, w) in row {
            if let Some((prev, pw)) = owner[l] {
                let value = pw * w;
                if value.abs() >= DISJOINT_TOL {
                    return Err(Error::DisjointnessViolation { row_a: prev, row_b: i, value });
                }
            }
            owner[l] = Some((i, w));
        }
    }
    Ok(p.rows.iter().map(|row| row.iter().map(|&(_, w)| w * w).sum()).collect())
}

/// Adjacency for a coarse support whose units are unions of fine units:
/// two coarse units are neighbours when any of their fine units are.
pub fn coarse_edges_from_fine(fine: &ArealSupport, membership: &[usize]) -> Vec<(usize, usize)> {
    let mut set = BTreeSet::new();
    for (a, b) in fine.edges() {
        let (ca, cb) = (membership[a], membership[b]);
        if ca != cb {
            set.insert((ca.min(cb), ca.max(cb)));
        }
    }
    set.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (1..=n).map(|k| format!("{prefix}{k}")).collect()
    }

    /// Nine partition units with four B units and two C units (C units do
    /// not cover A1, A2, A6, A7).
    fn figure_one() -> (ArealSupport, ArealSupport, ArealSupport, OverlapTable, OverlapTable) {
        let a_areas = [1.0, 0.5, 1.5, 0.7, 1.2, 0.8, 2.0, 0.9, 1.1];
        let fine = ArealSupport::new(ids("A", 9), a_areas.to_vec(), vec![[0.0, 0.0]; 9], &[]).unwrap();
        let b_members: [&[usize]; 4] = [&[1], &[2, 3], &[4, 7], &[5, 6]];
        let c_members: [&[usize]; 2] = [&[3, 4, 5, 8], &[9]];
        let mk = |members: &[&[usize]], prefix: &str| {
            let areas: Vec<f64> =
                members.iter().map(|m| m.iter().map(|&a| a_areas[a - 1]).sum()).collect();
            let support =
                ArealSupport::new(ids(prefix, members.len()), areas, vec![[0.0, 0.0]; members.len()], &[])
                    .unwrap();
            let mut rows = Vec::new();
            for (i, m) in members.iter().enumerate() {
                for &a in m.iter() {
                    rows.push(OverlapRow {
                        fine_id: format!("A{a}"),
                        coarse_id: format!("{prefix}{}", i + 1),
                        overlap_area: a_areas[a - 1],
                    });
                }
            }
            (support, OverlapTable::new(rows).unwrap())
        };
        let (b, ob) = mk(&b_members, "B");
        let (c, oc) = mk(&c_members, "C");
        (fine, b, c, ob, oc)
    }

    #[test]
    fn grid_of_ten_by_ten() {
        let g = build_grid_support(10, 10, Rect::UNIT).unwrap();
        assert_eq!(g.len(), 100);
        assert!(g.areas().iter().all(|&a| (a - 0.01).abs() < 1e-15));
        assert_eq!(g.centroids()[0], [0.05, 0.05]);
    }

    #[test]
    fn single_cell_grid_has_no_neighbours() {
        let g = build_grid_support(1, 1, Rect::UNIT).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.edges().is_empty());
    }

    #[test]
    fn grid_neighbour_counts_match_edge_sharing() {
        let (rows, cols) = (20, 20);
        let g = build_grid_support(rows, cols, Rect::UNIT).unwrap();
        let cell = |k: usize| {
            let (r, c) = (k / cols, k % cols);
            Rect::new(c as f64 / 20.0, r as f64 / 20.0, (c + 1) as f64 / 20.0, (r + 1) as f64 / 20.0)
        };
        // brute force: two cells share an edge when their closures touch
        // along a segment of positive length
        for a in 0..rows * cols {
            let ra = cell(a);
            let mut count = 0;
            for b in 0..rows * cols {
                if a == b {
                    continue;
                }
                let rb = cell(b);
                let ox = ra.x1.min(rb.x1) - ra.x0.max(rb.x0);
                let oy = ra.y1.min(rb.y1) - ra.y0.max(rb.y0);
                let touch = (ox.abs() < 1e-12 && oy > 1e-12) || (oy.abs() < 1e-12 && ox > 1e-12);
                if touch {
                    count += 1;
                    assert!(g.neighbors(a).contains(&b));
                }
            }
            assert_eq!(count, g.neighbors(a).len());
            let (r, c) = (a / cols, a % cols);
            if r > 0 && r + 1 < rows && c > 0 && c + 1 < cols {
                assert_eq!(count, 4);
            }
        }
    }

    #[test]
    fn degenerate_bounds_rejected() {
        assert!(build_grid_support(2, 2, Rect::new(0.0, 0.0, 0.0, 1.0)).is_err());
        assert!(build_grid_support(0, 2, Rect::UNIT).is_err());
    }

    #[test]
    fn support_invariants_enforced() {
        let dup = ArealSupport::new(vec!["a".into(), "a".into()], vec![1.0, 1.0], vec![[0.0; 2]; 2], &[]);
        assert!(dup.is_err());
        let neg = ArealSupport::new(vec!["a".into()], vec![0.0], vec![[0.0; 2]], &[]);
        assert!(neg.is_err());
        let self_loop = ArealSupport::new(vec!["a".into()], vec![1.0], vec![[0.0; 2]], &[(0, 0)]);
        assert!(self_loop.is_err());
    }

    #[test]
    fn figure_one_rows() {
        let (fine, b, c, ob, oc) = figure_one();
        let p1 = build_partition_matrix(&b, &fine, &ob).unwrap();
        let p2 = build_partition_matrix(&c, &fine, &oc).unwrap();
        assert_eq!(p1.row(0), &[(0, 1.0)]);
        let dense = p2.to_dense();
        let union = 1.5 + 0.7 + 1.2 + 0.9;
        for (pos, area) in [(2, 1.5), (3, 0.7), (4, 1.2), (7, 0.9)] {
            assert!((dense[(0, pos)] - area / union).abs() < 1e-15);
        }
        assert_eq!(dense.row(0).iter().filter(|&&w| w > 0.0).count(), 4);
        assert_eq!(p2.row(1), &[(8, 1.0)]);
    }

    #[test]
    fn figure_one_aggregation_matches_area_weighted_mean() {
        let (fine, b, c, ob, oc) = figure_one();
        let y: Vec<f64> = (0..9).map(|k| (k as f64 * 1.3).cos() + 2.0).collect();
        for (coarse, table) in [(&b, &ob), (&c, &oc)] {
            let p = build_partition_matrix(coarse, &fine, table).unwrap();
            let agg = p.apply(&y);
            for (i, cid) in coarse.ids().iter().enumerate() {
                let (mut num, mut den) = (0.0, 0.0);
                for row in table.rows().iter().filter(|r| &r.coarse_id == cid) {
                    let l = fine.position(&row.fine_id).unwrap();
                    num += fine.areas()[l] * y[l];
                    den += fine.areas()[l];
                }
                assert!((agg[i] - num / den).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn figure_one_block_partition() {
        let (fine, b, c, ob, oc) = figure_one();
        let p1 = build_partition_matrix(&b, &fine, &ob).unwrap();
        let p2 = build_partition_matrix(&c, &fine, &oc).unwrap();
        let p = assemble_block_partition(&p1, &p2).unwrap();
        assert_eq!((p.nrows(), p.ncols()), (6, 18));
        let dense = p.to_dense();
        for col in 0..18 {
            let nnz = (0..6).filter(|&r| dense[(r, col)] != 0.0).count();
            assert!(nnz <= 1);
            // block structure: first 9 columns only in rows 0..4
            if nnz == 1 {
                let r = (0..6).find(|&r| dense[(r, col)] != 0.0).unwrap();
                assert_eq!(r < 4, col < 9);
            }
        }
        let ppt = &dense * dense.transpose();
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    assert!(ppt[(i, j)].abs() < DISJOINT_TOL);
                }
            }
        }
    }

    #[test]
    fn equal_area_quarter_row() {
        let fine = build_grid_support(2, 2, Rect::UNIT).unwrap();
        let coarse = ArealSupport::new(vec!["B".into()], vec![1.0], vec![[0.5, 0.5]], &[]).unwrap();
        let table = OverlapTable::new(
            fine.ids()
                .iter()
                .map(|f| OverlapRow { fine_id: f.clone(), coarse_id: "B".into(), overlap_area: 0.25 })
                .collect(),
        )
        .unwrap();
        let p = build_partition_matrix(&coarse, &fine, &table).unwrap();
        assert_eq!(p.row(0).iter().map(|e| e.1).collect::<Vec<_>>(), vec![0.25; 4]);
        assert_eq!(diag_ppt(&p).unwrap(), vec![0.25]);
    }

    #[test]
    fn identity_blocks() {
        let s = build_grid_support(1, 1, Rect::UNIT).unwrap();
        let id = PartitionMatrix::identity(&s);
        let p = assemble_block_partition(&id, &id).unwrap();
        assert_eq!(p.to_dense(), DMatrix::identity(2, 2));
        assert_eq!(diag_ppt(&id).unwrap(), vec![1.0]);
    }

    #[test]
    fn equal_area_aggregation_of_k_cells() {
        for k in 1..8usize {
            let fine = build_grid_support(1, k, Rect::UNIT).unwrap();
            let rows = vec![(0..k).map(|l| (l, 1.0 / k as f64)).collect()];
            let p = PartitionMatrix::from_rows(rows, vec!["B".into()], fine.ids().to_vec()).unwrap();
            assert!((diag_ppt(&p).unwrap()[0] - 1.0 / k as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_ids_and_bad_sums_are_reported() {
        let fine = build_grid_support(1, 2, Rect::UNIT).unwrap();
        let coarse = ArealSupport::new(vec!["B".into()], vec![1.0], vec![[0.5, 0.5]], &[]).unwrap();
        let unknown = OverlapTable::new(vec![OverlapRow {
            fine_id: "nope".into(),
            coarse_id: "B".into(),
            overlap_area: 1.0,
        }])
        .unwrap();
        assert!(matches!(
            build_partition_matrix(&coarse, &fine, &unknown),
            Err(Error::InvalidArgument(_))
        ));
        let short = OverlapTable::new(vec![OverlapRow {
            fine_id: "r0c0".into(),
            coarse_id: "B".into(),
            overlap_area: 0.5,
        }])
        .unwrap();
        match build_partition_matrix(&coarse, &fine, &short) {
            Err(Error::InconsistentOverlap { coarse, .. }) => assert_eq!(coarse, "B"),
            other => panic!("expected inconsistent overlap, got {other:?}"),
        }
        // clipped coarse units normalize over what is observed
        let p = build_partition_matrix_with(&coarse, &fine, &short, RowNormalization::ObservedOverlap).unwrap();
        assert_eq!(p.row(0), &[(0, 1.0)]);
    }

    #[test]
    fn overlap_table_rejects_double_assignment() {
        let rows = vec![
            OverlapRow { fine_id: "a".into(), coarse_id: "B".into(), overlap_area: 1.0 },
            OverlapRow { fine_id: "a".into(), coarse_id: "C".into(), overlap_area: 1.0 },
        ];
        assert!(OverlapTable::new(rows).is_err());
        let zero = vec![OverlapRow { fine_id: "a".into(), coarse_id: "B".into(), overlap_area: 0.0 }];
        assert!(OverlapTable::new(zero).is_err());
    }

    #[test]
    fn mismatched_fine_supports_rejected() {
        let a = build_grid_support(1, 2, Rect::UNIT).unwrap();
        let b = build_grid_support(1, 3, Rect::UNIT).unwrap();
        assert!(assemble_block_partition(&PartitionMatrix::identity(&a), &PartitionMatrix::identity(&b)).is_err());
    }

    #[test]
    fn overlapping_rows_violate_disjointness() {
        let rows = vec![vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)]];
        let err = PartitionMatrix::from_rows(rows, vec!["a".into(), "b".into()], vec!["x".into(), "y".into()]);
        assert!(matches!(err, Err(Error::DisjointnessViolation { .. })));
    }
}
