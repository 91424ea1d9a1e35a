//! Sparse bipartite graph kernels.
//!
//! The patient-disease interactions form a bipartite graph stored as a
//! binary matrix. This module provides the CSR representation, the block
//! adjacency [[0, Y], [Yᵀ, 0]], its symmetric normalization with self-loops,
//! and the sparse-dense product all propagation runs on.
//!
//! Node ordering convention throughout the crate: patients occupy indices
//! 0..P-1, diseases P..P+D-1.

use ndarray::parallel::prelude::*;
use ndarray::{Array2, ArrayView2, ArrayViewMut1, Axis};

use crate::error::{Error, Result};

/// Row count below which spmm stays single-threaded.
const SPMM_PAR_THRESHOLD: usize = 512;

/// One observed patient-disease interaction. Timestamps are epoch seconds
/// (or any total-ordered integer) and only matter for temporal splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Interaction {
    pub patient: usize,
    pub disease: usize,
    pub timestamp: i64,
}

/// Sparse binary patient×disease matrix with timestamps.
///
/// Entries are kept sorted by (patient, disease) and hold at most one entry
/// per pair; presence of an entry means y_pd = 1.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InteractionMatrix {
    num_patients: usize,
    num_diseases: usize,
    entries: Vec<Interaction>,
    /// Offsets into `entries` per patient, length P+1.
    row_offsets: Vec<usize>,
}

impl InteractionMatrix {
    pub fn new(
        num_patients: usize,
        num_diseases: usize,
        mut entries: Vec<Interaction>,
    ) -> Result<Self> {
        for e in &entries {
            if e.patient >= num_patients {
                return Err(Error::Structure(format!(
                    "patient index {} out of range (P={num_patients})",
                    e.patient
                )));
            }
            if e.disease >= num_diseases {
                return Err(Error::Structure(format!(
                    "disease index {} out of range (D={num_diseases})",
                    e.disease
                )));
            }
        }
        entries.sort_unstable_by_key(|e| (e.patient, e.disease));
        for w in entries.windows(2) {
            if w[0].patient == w[1].patient && w[0].disease == w[1].disease {
                return Err(Error::Structure(format!(
                    "duplicate interaction ({}, {})",
                    w[0].patient, w[0].disease
                )));
            }
        }
        let mut row_offsets = vec![0usize; num_patients + 1];
        for e in &entries {
            row_offsets[e.patient + 1] += 1;
        }
        for p in 0..num_patients {
            row_offsets[p + 1] += row_offsets[p];
        }
        Ok(Self {
            num_patients,
            num_diseases,
            entries,
            row_offsets,
        })
    }

    pub fn num_patients(&self) -> usize {
        self.num_patients
    }

    pub fn num_diseases(&self) -> usize {
        self.num_diseases
    }

    /// Total node count P+D of the bipartite graph.
    pub fn num_nodes(&self) -> usize {
        self.num_patients + self.num_diseases
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Interaction] {
        &self.entries
    }

    /// Interactions of one patient, sorted by disease index.
    pub fn patient_row(&self, p: usize) -> &[Interaction] {
        &self.entries[self.row_offsets[p]..self.row_offsets[p + 1]]
    }

    /// Number of diseases linked to patient p (|N_p|).
    pub fn patient_degree(&self, p: usize) -> usize {
        self.row_offsets[p + 1] - self.row_offsets[p]
    }

    /// Number of patients linked to each disease (|N_d| per disease).
    pub fn disease_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_diseases];
        for e in &self.entries {
            deg[e.disease] += 1;
        }
        deg
    }

    pub fn has_edge(&self, p: usize, d: usize) -> bool {
        self.patient_row(p).binary_search_by_key(&d, |e| e.disease).is_ok()
    }

    /// Merge two interaction sets over the same index space. Duplicate
    /// pairs are rejected, matching the split invariant train ∩ test = ∅.
    pub fn union(&self, other: &InteractionMatrix) -> Result<InteractionMatrix> {
        if self.num_patients != other.num_patients || self.num_diseases != other.num_diseases {
            return Err(Error::Structure("union over mismatched shapes".into()));
        }
        let mut entries = self.entries.clone();
        entries.extend_from_slice(&other.entries);
        InteractionMatrix::new(self.num_patients, self.num_diseases, entries)
    }
}

/// Compressed sparse row matrix over f64 values.
///
/// Column indices are strictly increasing within each row; offsets are
/// monotone with the final offset equal to nnz. Both invariants are
/// established at construction and relied on for deterministic products.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from (row, col, value) triplets. Rejects out-of-range indices
    /// and duplicate coordinates.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut triplets: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(r, c, _) in &triplets {
            if r >= rows || c >= cols {
                return Err(Error::Structure(format!(
                    "entry ({r}, {c}) out of range for {rows}x{cols} matrix"
                )));
            }
        }
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        for w in triplets.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::Structure(format!(
                    "duplicate entry at ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        let mut row_offsets = vec![0usize; rows + 1];
        for &(r, _, _) in &triplets {
            row_offsets[r + 1] += 1;
        }
        for r in 0..rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        let col_indices = triplets.iter().map(|&(_, c, _)| c).collect();
        let values = triplets.iter().map(|&(_, _, v)| v).collect();
        Ok(Self {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Stored entries of one row as (col, value), ascending by column.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_offsets[i];
        let hi = self.row_offsets[i + 1];
        self.col_indices[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c, v))
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let lo = self.row_offsets[i];
        let hi = self.row_offsets[i + 1];
        self.col_indices[lo..hi]
            .binary_search(&j)
            .ok()
            .map(|k| self.values[lo + k])
    }

    /// Exact structural and numeric symmetry check.
    pub fn is_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                if self.get(j, i) != Some(v) {
                    return false;
                }
            }
        }
        true
    }

    /// Row sums (weighted degrees).
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).map(|(_, v)| v).sum())
            .collect()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// Sparse-dense product `self · x`.
    ///
    /// Each output row accumulates in ascending column-index order, so the
    /// result is bit-reproducible on a given platform and independent of the
    /// worker count: rows may be distributed across threads but every row is
    /// summed sequentially.
    pub fn spmm(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.cols != x.nrows() {
            return Err(Error::Structure(format!(
                "spmm dimension mismatch: {}x{} by {}x{}",
                self.rows,
                self.cols,
                x.nrows(),
                x.ncols()
            )));
        }
        let mut out = Array2::zeros((self.rows, x.ncols()));
        let fill = |(i, row): (usize, ArrayViewMut1<f64>)| {
            let mut row = row;
            let lo = self.row_offsets[i];
            let hi = self.row_offsets[i + 1];
            for k in lo..hi {
                row.scaled_add(self.values[k], &x.row(self.col_indices[k]));
            }
        };
        if self.rows >= SPMM_PAR_THRESHOLD {
            out.axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .map(|(i, r)| (i, r))
                .for_each(fill);
        } else {
            out.axis_iter_mut(Axis(0)).enumerate().for_each(fill);
        }
        Ok(out)
    }
}

/// Symmetrically normalized adjacency with self-loops,
/// D^{-1/2}(A+I)D^{-1/2}, over the patients-then-diseases node ordering.
#[derive(Debug, Clone)]
pub struct NormalizedLaplacian {
    matrix: CsrMatrix,
}

impl NormalizedLaplacian {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn num_nodes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn apply(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.matrix.spmm(x)
    }
}

/// Block adjacency [[0, Y], [Yᵀ, 0]] of shape (P+D)×(P+D).
pub fn build_adjacency(y: &InteractionMatrix) -> CsrMatrix {
    let p = y.num_patients();
    let n = y.num_nodes();
    let mut triplets = Vec::with_capacity(2 * y.nnz());
    for e in y.entries() {
        triplets.push((e.patient, p + e.disease, 1.0));
        triplets.push((p + e.disease, e.patient, 1.0));
    }
    CsrMatrix::from_triplets(n, n, triplets).expect("indices validated by InteractionMatrix")
}

/// Normalize a symmetric adjacency: Â = D^{-1/2}(A+I)D^{-1/2} with D the
/// diagonal of row sums of Ã = A + I. The self-loop guarantees deg ≥ 1, so
/// no division by zero can occur.
pub fn normalize(a: &CsrMatrix) -> Result<NormalizedLaplacian> {
    if a.rows() != a.cols() {
        return Err(Error::Structure(format!(
            "normalize requires a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_symmetric() {
        return Err(Error::Structure("normalize requires a symmetric matrix".into()));
    }
    let n = a.rows();
    // Ã = A + I, merging any existing diagonal.
    let mut triplets = Vec::with_capacity(a.nnz() + n);
    for i in 0..n {
        let mut saw_diag = false;
        for (j, v) in a.row(i) {
            if j == i {
                triplets.push((i, j, v + 1.0));
                saw_diag = true;
            } else {
                triplets.push((i, j, v));
            }
        }
        if !saw_diag {
            triplets.push((i, i, 1.0));
        }
    }
    let tilde = CsrMatrix::from_triplets(n, n, triplets)?;
    let deg = tilde.row_sums();
    // ã_ij / sqrt(deg_i · deg_j); the product form keeps the matrix exactly
    // symmetric because deg_i · deg_j commutes bitwise.
    let scaled = (0..n).flat_map(|i| {
        let deg = &deg;
        tilde
            .row(i)
            .map(move |(j, v)| (i, j, v / (deg[i] * deg[j]).sqrt()))
            .collect::<Vec<_>>()
    });
    Ok(NormalizedLaplacian {
        matrix: CsrMatrix::from_triplets(n, n, scaled)?,
    })
}

/// Laplacian of the interaction graph in one step.
pub fn laplacian_from_interactions(y: &InteractionMatrix) -> NormalizedLaplacian {
    normalize(&build_adjacency(y)).expect("block adjacency is symmetric by construction")
}

/// Message decay weight w_pd = 1/sqrt(|N_p|·|N_d|) of an edge, with
/// neighborhoods taken in the bipartite graph without self-loops.
pub fn edge_decay(p: usize, d: usize, y: &InteractionMatrix) -> Result<f64> {
    if p >= y.num_patients() || d >= y.num_diseases() {
        return Err(Error::Domain(format!("({p}, {d}) out of range")));
    }
    if !y.has_edge(p, d) {
        return Err(Error::Domain(format!("({p}, {d}) is not an edge")));
    }
    let np = y.patient_degree(p);
    let nd = y.disease_degrees()[d];
    Ok(1.0 / ((np * nd) as f64).sqrt())
}

/// Bipartite adjacency carrying the decay weights w_pd (no self-loops);
/// the operator behind the first-order aggregation layer.
pub fn first_order_weights(y: &InteractionMatrix) -> CsrMatrix {
    let p = y.num_patients();
    let n = y.num_nodes();
    let disease_deg = y.disease_degrees();
    let mut triplets = Vec::with_capacity(2 * y.nnz());
    for e in y.entries() {
        let w = 1.0 / ((y.patient_degree(e.patient) * disease_deg[e.disease]) as f64).sqrt();
        triplets.push((e.patient, p + e.disease, w));
        triplets.push((p + e.disease, e.patient, w));
    }
    CsrMatrix::from_triplets(n, n, triplets).expect("indices validated by InteractionMatrix")
}
