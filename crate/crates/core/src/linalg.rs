//! Dense linear-algebra backend.
//!
//! Symmetric eigendecompositions go through faer in sequential mode; linear
//! systems use hand-written partial-pivot LU and Cholesky factorizations.
//! Everything here is single-threaded and deterministic: identical inputs
//! produce identical bits regardless of how many worker threads the caller
//! runs elsewhere. Permuting a system's rows and columns permutes the
//! solution exactly in real arithmetic but not bit-for-bit, since the
//! elimination order changes with the labeling.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use std::sync::Once;

use crate::error::{Error, Result};

static FAER_SEQ: Once = Once::new();

fn faer_sequential() {
    FAER_SEQ.call_once(|| {
        faer::set_global_parallelism(faer::Par::Seq);
    });
}

/// Symmetric eigendecomposition. Returns eigenvalues in descending order and
/// the matching orthonormal eigenvectors as columns.
///
/// The input is not checked for symmetry here; callers validate according to
/// their own tolerance contracts.
pub fn eigh(a: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    faer_sequential();
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::input("eigh: matrix must be square"));
    }
    let mut m = faer::Mat::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = a[(i, j)];
        }
    }
    let evd = m.self_adjoint_eigen(faer::Side::Lower).map_err(|e| Error::Numeric {
        context: "symmetric eigendecomposition".into(),
        details: format!("solver did not converge ({e:?}); n={n}, max|a|={:.3e}", max_abs(a)),
    })?;
    let u = evd.U();
    let sv = evd.S();
    // faer returns ascending order; flip to descending.
    let mut vals = Array1::zeros(n);
    let mut vecs = Array2::zeros((n, n));
    for k in 0..n {
        let src = n - 1 - k;
        vals[k] = sv[src];
        for i in 0..n {
            vecs[(i, k)] = u[(i, src)];
        }
    }
    Ok((vals, vecs))
}

pub fn max_abs(a: &ArrayView2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Minimum-norm solution of a symmetric positive semidefinite system via
/// eigendecomposition, discarding components below a relative cutoff. The
/// solution is unique only up to the null space; use for reference solvers
/// where the quantities of interest are invariant to that ambiguity.
pub fn pseudo_solve(a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Result<Array1<f64>> {
    let (vals, vecs) = eigh(a)?;
    let n = b.len();
    let cutoff = 1e-12 * vals[0].max(0.0);
    let proj = vecs.t().dot(b);
    let mut scaled = Array1::<f64>::zeros(n);
    for k in 0..n {
        if vals[k] > cutoff {
            scaled[k] = proj[k] / vals[k];
        }
    }
    Ok(vecs.dot(&scaled))
}

/// Partial-pivot LU factorization of a dense square matrix.
pub struct LuFactor {
    lu: Array2<f64>,
    perm: Vec<usize>,
}

impl LuFactor {
    pub fn new(a: &ArrayView2<f64>) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::input("lu: matrix must be square"));
        }
        let mut lu = a.to_owned();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for r in (k + 1)..n {
                let v = lu[(r, k)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::Numeric {
                    context: "lu factorization".into(),
                    details: format!(
                        "pivot {k} of {n} is {best:.3e}; system is singular to working precision \
                         (a larger ridge parameter usually fixes this)"
                    ),
                });
            }
            if p != k {
                perm.swap(k, p);
                for c in 0..n {
                    lu.swap((k, c), (p, c));
                }
            }
            let piv = lu[(k, k)];
            for r in (k + 1)..n {
                let l = lu[(r, k)] / piv;
                lu[(r, k)] = l;
                if l != 0.0 {
                    let (row_k, mut row_r) = lu.multi_slice_mut((s![k, (k + 1)..], s![r, (k + 1)..]));
                    row_r.scaled_add(-l, &row_k);
                }
            }
        }
        Ok(LuFactor { lu, perm })
    }

    pub fn solve(&self, b: &ArrayView1<f64>) -> Array1<f64> {
        let n = self.perm.len();
        let mut x = Array1::zeros(n);
        for i in 0..n {
            x[i] = b[self.perm[i]];
        }
        for k in 0..n {
            let xk = x[k];
            if xk != 0.0 {
                for r in (k + 1)..n {
                    x[r] -= self.lu[(r, k)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut sum = x[k];
            for c in (k + 1)..n {
                sum -= self.lu[(k, c)] * x[c];
            }
            x[k] = sum / self.lu[(k, k)];
        }
        x
    }

    /// Solve with one pass of iterative refinement against the original matrix.
    pub fn solve_refined(&self, a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
        let mut x = self.solve(b);
        let r = b - &a.dot(&x);
        let dx = self.solve(&r.view());
        x += &dx;
        x
    }
}

/// Cholesky factorization of a symmetric positive-definite matrix (lower).
pub struct CholFactor {
    l: Array2<f64>,
}

impl CholFactor {
    pub fn new(a: &ArrayView2<f64>) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::input("cholesky: matrix must be square"));
        }
        let mut l = Array2::zeros((n, n));
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::Numeric {
                    context: "cholesky factorization".into(),
                    details: format!("leading minor {j} of {n} is not positive ({d:.3e})"),
                });
            }
            let dj = d.sqrt();
            l[(j, j)] = dj;
            for i in (j + 1)..n {
                let mut sum = a[(i, j)];
                for k in 0..j {
                    sum -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = sum / dj;
            }
        }
        Ok(CholFactor { l })
    }

    pub fn solve(&self, b: &ArrayView1<f64>) -> Array1<f64> {
        let n = self.l.nrows();
        let mut x = b.to_owned();
        for i in 0..n {
            let mut sum = x[i];
            for k in 0..i {
                sum -= self.l[(i, k)] * x[k];
            }
            x[i] = sum / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut sum = x[i];
            for k in (i + 1)..n {
                sum -= self.l[(k, i)] * x[k];
            }
            x[i] = sum / self.l[(i, i)];
        }
        x
    }
}

/// Orthogonal projector onto the column space of `z`: Z (Z'Z)^{-1} Z'.
pub fn hat_matrix(z: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let ztz = z.t().dot(z);
    let chol = CholFactor::new(&ztz.view()).map_err(|_| Error::Numeric {
        context: "hat matrix".into(),
        details: "Z'Z is not positive definite; columns of Z are collinear".into(),
    })?;
    let t = z.nrows();
    let k = z.ncols();
    // (Z'Z)^{-1} Z' column by column
    let mut w = Array2::zeros((k, t));
    for j in 0..t {
        let col = chol.solve(&z.row(j));
        w.column_mut(j).assign(&col);
    }
    let mut h = z.dot(&w);
    symmetrize(&mut h);
    Ok(h)
}

/// Annihilator of the column space of `z`: I - Z (Z'Z)^{-1} Z'.
pub fn annihilator(z: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut m = hat_matrix(z)?;
    let t = z.nrows();
    for i in 0..t {
        for j in 0..t {
            m[(i, j)] = if i == j { 1.0 - m[(i, j)] } else { -m[(i, j)] };
        }
    }
    symmetrize(&mut m);
    Ok(m)
}

pub fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn trace(a: &ArrayView2<f64>) -> f64 {
    (0..a.nrows().min(a.ncols())).map(|i| a[(i, i)]).sum()
}

/// Greedy column-rank analysis of a design matrix. Returns the labels of
/// columns that are numerically dependent on the preceding ones.
pub fn dependent_columns(z: &ArrayView2<f64>, labels: &[String]) -> Vec<String> {
    let t = z.nrows();
    let k = z.ncols();
    let mut basis: Vec<Array1<f64>> = Vec::new();
    let mut offenders = Vec::new();
    for j in 0..k {
        let mut v = z.column(j).to_owned();
        let orig = v.dot(&v).sqrt();
        for b in &basis {
            let c = v.dot(b);
            v.scaled_add(-c, b);
        }
        let rem = v.dot(&v).sqrt();
        if orig == 0.0 || rem <= 1e-10 * orig.max((t as f64).sqrt()) {
            offenders.push(labels.get(j).cloned().unwrap_or_else(|| format!("col{j}")));
        } else {
            basis.push(&v / rem);
        }
    }
    offenders
}

/// Multiply each T-row block of `m` by `p` on the left: (I_N ⊗ p) · m.
pub fn block_mul_left(p: &ArrayView2<f64>, m: &ArrayView2<f64>) -> Array2<f64> {
    let t = p.nrows();
    let nt = m.nrows();
    debug_assert_eq!(nt % t, 0);
    let mut out = Array2::zeros((nt, m.ncols()));
    for i in 0..nt / t {
        let r = i * t..(i + 1) * t;
        let block = m.slice(s![r.clone(), ..]);
        out.slice_mut(s![r, ..]).assign(&p.dot(&block));
    }
    out
}

/// Multiply each T-column block of `m` by `p` on the right: m · (I_N ⊗ p).
pub fn block_mul_right(m: &ArrayView2<f64>, p: &ArrayView2<f64>) -> Array2<f64> {
    let t = p.nrows();
    let nt = m.ncols();
    debug_assert_eq!(nt % t, 0);
    let mut out = Array2::zeros((m.nrows(), nt));
    for i in 0..nt / t {
        let r = i * t..(i + 1) * t;
        let block = m.slice(s![.., r.clone()]);
        out.slice_mut(s![.., r]).assign(&block.dot(p));
    }
    out
}

/// Apply `p` to each T-segment of a stacked vector: (I_N ⊗ p) · v.
pub fn block_mul_vec(p: &ArrayView2<f64>, v: &ArrayView1<f64>) -> Array1<f64> {
    let t = p.nrows();
    let nt = v.len();
    debug_assert_eq!(nt % t, 0);
    let mut out = Array1::zeros(nt);
    for i in 0..nt / t {
        let r = i * t..(i + 1) * t;
        let seg = v.slice(s![r.clone()]);
        out.slice_mut(s![r]).assign(&p.dot(&seg));
    }
    out
}
