//! Local parameter vectors and their flat layout.
//!
//! Flat order of `theta_i`:
//!
//! ```text
//! V0 | x_lb (n) | x_ub (n) | b (n) | f (n+m) | Q (n) | R (m) | omega (n)
//!    | A entries | A_ij entries for each neighbor j (ascending) | B entries
//! ```
//!
//! Which entries of `A_i`, `A_ij` and `B_i` are learnable is fixed by a
//! [`ModelStructure`]; all other entries are structurally zero.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sparsity pattern of the learnable model matrices, as `(row, col)` lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStructure {
    pub state_dim: usize,
    pub input_dim: usize,
    pub a: Vec<(usize, usize)>,
    pub a_neighbor: Vec<(usize, usize)>,
    pub b: Vec<(usize, usize)>,
}

impl ModelStructure {
    /// Upper-triangular `A_i`, a single `(1, 1)` coupling entry and a dense
    /// input column, for `n = 2`, `m = 1`.
    pub fn upper_triangular_2x1() -> Self {
        ModelStructure {
            state_dim: 2,
            input_dim: 1,
            a: vec![(0, 0), (0, 1), (1, 1)],
            a_neighbor: vec![(1, 1)],
            b: vec![(0, 0), (1, 0)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.state_dim, self.input_dim);
        if n == 0 || m == 0 {
            return Err(Error::Config("state and input dimensions must be positive".into()));
        }
        let check = |name: &str, list: &[(usize, usize)], cols: usize| -> Result<()> {
            let mut seen = std::collections::BTreeSet::new();
            for &(r, c) in list {
                if r >= n || c >= cols {
                    return Err(Error::Config(format!("{name} entry ({r}, {c}) out of range")));
                }
                if !seen.insert((r, c)) {
                    return Err(Error::Config(format!("{name} entry ({r}, {c}) listed twice")));
                }
            }
            Ok(())
        };
        check("A", &self.a, n)?;
        check("A_ij", &self.a_neighbor, n)?;
        check("B", &self.b, m)
    }

    /// Columns of `A_ij` that can be nonzero; only these components of a
    /// neighbor's trajectory influence the local dynamics.
    pub fn coupling_columns(&self) -> Vec<usize> {
        let mut cols: Vec<usize> = self.a_neighbor.iter().map(|&(_, c)| c).collect();
        cols.sort_unstable();
        cols.dedup();
        cols
    }

    pub fn layout(&self, degree: usize) -> ThetaLayout {
        let (n, m) = (self.state_dim, self.input_dim);
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let v0 = take(1).start;
        let x_lb = take(n);
        let x_ub = take(n);
        let b = take(n);
        let f = take(n + m);
        let q = take(n);
        let r = take(m);
        let omega = take(n);
        let a = take(self.a.len());
        let a_neighbor = (0..degree).map(|_| take(self.a_neighbor.len())).collect();
        let b_in = take(self.b.len());
        ThetaLayout {
            v0,
            x_lb,
            x_ub,
            b,
            f,
            q,
            r,
            omega,
            a,
            a_neighbor,
            b_in,
            len: at,
        }
    }
}

/// Index ranges of each sub-parameter inside a flat `theta_i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThetaLayout {
    pub v0: usize,
    pub x_lb: Range<usize>,
    pub x_ub: Range<usize>,
    pub b: Range<usize>,
    pub f: Range<usize>,
    pub q: Range<usize>,
    pub r: Range<usize>,
    pub omega: Range<usize>,
    pub a: Range<usize>,
    pub a_neighbor: Vec<Range<usize>>,
    pub b_in: Range<usize>,
    pub len: usize,
}

/// Parameters of one agent's part of the MPC scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaLocal {
    pub v0: f64,
    pub x_lb: Vec<f64>,
    pub x_ub: Vec<f64>,
    pub b: Vec<f64>,
    pub f: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub omega: Vec<f64>,
    /// Values of the learnable `A_i` entries, in structure order.
    pub a: Vec<f64>,
    /// One entry list per neighbor, neighbors in ascending order.
    pub a_neighbor: Vec<Vec<f64>>,
    pub b_in: Vec<f64>,
}

/// Initial values shared by every agent. Matrices are given row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialModel {
    pub a: Vec<Vec<f64>>,
    pub a_neighbor: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub omega: Vec<f64>,
}

impl InitialModel {
    pub fn theta(&self, structure: &ModelStructure, degree: usize) -> ThetaLocal {
        let n = structure.state_dim;
        let m = structure.input_dim;
        let pick = |mat: &[Vec<f64>], list: &[(usize, usize)]| list.iter().map(|&(r, c)| mat[r][c]).collect::<Vec<_>>();
        ThetaLocal {
            v0: 0.0,
            x_lb: vec![0.0; n],
            x_ub: vec![0.0; n],
            b: vec![0.0; n],
            f: vec![0.0; n + m],
            q: self.q.clone(),
            r: self.r.clone(),
            omega: self.omega.clone(),
            a: pick(&self.a, &structure.a),
            a_neighbor: vec![pick(&self.a_neighbor, &structure.a_neighbor); degree],
            b_in: pick(&self.b, &structure.b),
        }
    }
}

/// Row-major nested vectors to a dense matrix.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ThetaLocal {
    pub fn degree(&self) -> usize {
        self.a_neighbor.len()
    }

    pub fn check(&self, structure: &ModelStructure, degree: usize) -> Result<()> {
        let (n, m) = (structure.state_dim, structure.input_dim);
        let fields = [
            ("x_lb", self.x_lb.len(), n),
            ("x_ub", self.x_ub.len(), n),
            ("b", self.b.len(), n),
            ("f", self.f.len(), n + m),
            ("Q", self.q.len(), n),
            ("R", self.r.len(), m),
            ("omega", self.omega.len(), n),
            ("A entries", self.a.len(), structure.a.len()),
            ("B entries", self.b_in.len(), structure.b.len()),
            ("neighbor count", self.a_neighbor.len(), degree),
        ];
        for (context, got, expected) in fields {
            if got != expected {
                return Err(Error::Config(format!(
                    "theta field {context}: expected length {expected}, got {got}"
                )));
            }
        }
        for nb in &self.a_neighbor {
            if nb.len() != structure.a_neighbor.len() {
                return Err(Error::Config("theta A_ij entry count does not match structure".into()));
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(32);
        out.push(self.v0);
        for part in [
            &self.x_lb,
            &self.x_ub,
            &self.b,
            &self.f,
            &self.q,
            &self.r,
            &self.omega,
            &self.a,
        ] {
            out.extend_from_slice(part);
        }
        for nb in &self.a_neighbor {
            out.extend_from_slice(nb);
        }
        out.extend_from_slice(&self.b_in);
        DVector::from_vec(out)
    }

    pub fn unflatten(structure: &ModelStructure, degree: usize, flat: &DVector<f64>) -> Result<Self> {
        let lay = structure.layout(degree);
        if flat.len() != lay.len {
            return Err(Error::Dimension {
                context: "flat theta",
                expected: lay.len,
                got: flat.len(),
            });
        }
        let v = |r: &Range<usize>| flat.as_slice()[r.clone()].to_vec();
        Ok(ThetaLocal {
            v0: flat[lay.v0],
            x_lb: v(&lay.x_lb),
            x_ub: v(&lay.x_ub),
            b: v(&lay.b),
            f: v(&lay.f),
            q: v(&lay.q),
            r: v(&lay.r),
            omega: v(&lay.omega),
            a: v(&lay.a),
            a_neighbor: lay.a_neighbor.iter().map(v).collect(),
            b_in: v(&lay.b_in),
        })
    }

    pub fn a_matrix(&self, structure: &ModelStructure) -> DMatrix<f64> {
        scatter(structure.state_dim, structure.state_dim, &structure.a, &self.a)
    }

    /// `A_ij` for the `idx`-th neighbor in ascending order.
    pub fn a_neighbor_matrix(&self, structure: &ModelStructure, idx: usize) -> DMatrix<f64> {
        scatter(
            structure.state_dim,
            structure.state_dim,
            &structure.a_neighbor,
            &self.a_neighbor[idx],
        )
    }

    pub fn b_matrix(&self, structure: &ModelStructure) -> DMatrix<f64> {
        scatter(structure.state_dim, structure.input_dim, &structure.b, &self.b_in)
    }

    pub fn f_state(&self, n: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.f[..n])
    }

    pub fn f_input(&self, n: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.f[n..])
    }
}

fn scatter(rows: usize, cols: usize, list: &[(usize, usize)], vals: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for (&(r, c), &v) in list.iter().zip(vals) {
        m[(r, c)] = v;
    }
    m
}
