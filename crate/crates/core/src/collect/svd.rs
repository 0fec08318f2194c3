//! Truncated SVD by one-sided Jacobi rotations.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Orthonormality tolerance enforced when factors are validated.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

const ROTATION_EPS: f64 = 1e-15;
const MAX_SWEEPS: usize = 80;

/// Rank-`r` factors `u (L×r)`, `s (r)`, `v (D×r)` with `A ≈ u diag(s) vᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FactorsRepr", into = "FactorsRepr")]
pub struct SvdFactors {
    u: Array2<f64>,
    s: Array1<f64>,
    v: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorsRepr {
    rows: usize,
    cols: usize,
    rank: usize,
    u: Vec<f64>,
    s: Vec<f64>,
    v: Vec<f64>,
}

impl From<SvdFactors> for FactorsRepr {
    fn from(f: SvdFactors) -> Self {
        FactorsRepr {
            rows: f.u.nrows(),
            cols: f.v.nrows(),
            rank: f.s.len(),
            u: f.u.iter().cloned().collect(),
            s: f.s.to_vec(),
            v: f.v.iter().cloned().collect(),
        }
    }
}

impl TryFrom<FactorsRepr> for SvdFactors {
    type Error = Error;

    fn try_from(r: FactorsRepr) -> Result<Self> {
        let u = Array2::from_shape_vec((r.rows, r.rank), r.u)
            .map_err(|e| Error::InvalidFactors(format!("u: {e}")))?;
        let v = Array2::from_shape_vec((r.cols, r.rank), r.v)
            .map_err(|e| Error::InvalidFactors(format!("v: {e}")))?;
        SvdFactors::new(u, Array1::from(r.s), v)
    }
}

impl SvdFactors {
    /// Validated factors.
    pub fn new(u: Array2<f64>, s: Array1<f64>, v: Array2<f64>) -> Result<Self> {
        let f = Self { u, s, v };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.s.len();
        if r == 0 || self.u.ncols() != r || self.v.ncols() != r {
            return Err(Error::InvalidFactors(format!(
                "rank mismatch: u has {}, s has {r}, v has {} columns",
                self.u.ncols(),
                self.v.ncols()
            )));
        }
        if self
            .u
            .iter()
            .chain(self.s.iter())
            .chain(self.v.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::InvalidFactors("non-finite entry".into()));
        }
        if self.s.iter().any(|&x| x < 0.0) || self.s.windows(2).into_iter().any(|w| w[0] < w[1]) {
            return Err(Error::InvalidFactors(
                "singular values must be non-negative and descending".into(),
            ));
        }
        for (name, m) in [("u", &self.u), ("v", &self.v)] {
            let gram = m.t().dot(m);
            for ((i, j), g) in gram.indexed_iter() {
                let target = if i == j { 1.0 } else { 0.0 };
                if (g - target).abs() > ORTHONORMAL_TOL {
                    return Err(Error::InvalidFactors(format!(
                        "columns of {name} not orthonormal at ({i}, {j}): {g}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.nrows(), self.v.nrows())
    }

    pub fn u(&self) -> &Array2<f64> {
        &self.u
    }

    pub fn singular_values(&self) -> &Array1<f64> {
        &self.s
    }

    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }

    /// Number of stored floats: `r (L + D + 1)`.
    pub fn stored_len(&self) -> usize {
        self.rank() * (self.u.nrows() + self.v.nrows() + 1)
    }

    /// `u · diag(s) · vᵀ`.
    pub fn restore(&self) -> Array2<f64> {
        let scaled = &self.u * &self.s.view().insert_axis(Axis(0));
        scaled.dot(&self.v.t())
    }
}

/// Thin SVD of an `L × D` matrix: `k = min(L, D)` singular triplets sorted by
/// decreasing singular value.
pub fn full_svd(a: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
    if a.is_empty() {
        return Err(Error::InvalidFactors("empty matrix".into()));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidFactors("non-finite entry".into()));
    }
    let transposed = a.nrows() < a.ncols();
    let mut m = if transposed {
        a.t().to_owned()
    } else {
        a.to_owned()
    };
    let n = m.ncols();
    let mut right = Array2::<f64>::eye(n);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for (x, y) in m.column(p).iter().zip(m.column(q).iter()) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() <= ROTATION_EPS * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut m, p, q, c, s);
                rotate(&mut right, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = m.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let scale = norms.iter().cloned().fold(0.0, f64::max);

    let rows = m.nrows();
    let mut left = Array2::zeros((rows, n));
    let mut sing = Array1::zeros(n);
    let mut vecs = Array2::zeros((n, n));
    let mut filled = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        vecs.column_mut(k).assign(&right.column(j));
        if norms[j] > scale * 1e-14 && norms[j] > 0.0 {
            sing[k] = norms[j];
            left.column_mut(k).assign(&(&m.column(j) / norms[j]));
            filled.push(k);
        }
    }
    complete_basis(&mut left, &filled);

    if transposed {
        Ok((vecs, sing, left))
    } else {
        Ok((left, sing, vecs))
    }
}

fn rotate(m: &mut Array2<f64>, p: usize, q: usize, c: f64, s: f64) {
    for mut row in m.rows_mut() {
        let (x, y) = (row[p], row[q]);
        row[p] = c * x - s * y;
        row[q] = s * x + c * y;
    }
}

/// Fills the columns not listed in `filled` with unit vectors orthogonal to
/// every other column (Gram–Schmidt over the standard basis).
fn complete_basis(m: &mut Array2<f64>, filled: &[usize]) {
    let rows = m.nrows();
    let mut done: Vec<usize> = filled.to_vec();
    let mut candidate = 0;
    for k in 0..m.ncols() {
        if filled.contains(&k) {
            continue;
        }
        while candidate < rows {
            let mut v = Array1::<f64>::zeros(rows);
            v[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &j in &done {
                    let col = m.column(j);
                    let proj = col.dot(&v);
                    v.scaled_add(-proj, &col);
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                m.column_mut(k).assign(&(v / norm));
                done.push(k);
                break;
            }
        }
    }
}

/// Best rank-`r` factorisation of `a`.
pub fn svd_compress(a: &Array2<f64>, rank: usize) -> Result<SvdFactors> {
    let max = a.nrows().min(a.ncols());
    if rank == 0 || rank > max {
        return Err(Error::InvalidRank { rank, max });
    }
    let (u, s, v) = full_svd(a)?;
    SvdFactors::new(
        u.slice(ndarray::s![.., ..rank]).to_owned(),
        s.slice(ndarray::s![..rank]).to_owned(),
        v.slice(ndarray::s![.., ..rank]).to_owned(),
    )
}

pub fn svd_restore(f: &SvdFactors) -> Array2<f64> {
    f.restore()
}
