//! Kernel specifications, Gram matrices, and their eigensystems.
//!
//! A kernel is described by a [`KernelSpec`]: a pure inner-product kernel
//! `x'y`, a finite-rank polynomial family `(1 + x'y)^(k-1)`, a Gaussian
//! kernel `exp(-|x-y|^2 / b^2)`, or an additive combination of those over
//! disjoint coordinate blocks. Specs have a small text grammar, for example
//! `add([0]:gaussian(b=1.0), [1,2]:poly(k=2))`, which round-trips through
//! the canonical `Display` form.
//!
//! [`GramEigen`] holds the eigendecomposition of `gram / n`. Its eigenpairs
//! drive the empirical effective dimension, the Nystrom extension of the
//! eigenfunctions, and the regularized kernel evaluations used by the
//! inference routines.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg;

/// Relative cutoff under which an eigenvalue of `gram / n` is treated as zero
/// for rank decisions, Nystrom extensions, and regularized sums.
pub const EIGENVALUE_CLAMP_REL: f64 = 1e-10;

/// Absolute symmetry tolerance required of a Gram matrix handed to
/// [`GramEigen::new`].
pub const GRAM_SYMMETRY_TOL: f64 = 1e-12;

/// Most negative eigenvalue of `gram / n` tolerated before the matrix is
/// rejected as non-PSD; anything in `[-PSD_TOL, 0)` is clamped to zero.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// Pure inner product `x'y`. Contains no constant functions.
    Linear,
    /// `(1 + x'y)^(order - 1)`; rank `order` on one dimension. `order >= 1`.
    Polynomial { order: u32 },
    /// `exp(-|x - y|^2 / bandwidth^2)`; `bandwidth > 0`.
    Gaussian { bandwidth: f64 },
    /// Sum of kernels over disjoint coordinate blocks. Blocks must be
    /// non-empty, strictly ascending, mutually disjoint, and jointly cover
    /// every coordinate of the data they are applied to.
    Additive { components: Vec<(Vec<usize>, KernelSpec)> },
}

/// A kernel flattened to primitive leaves with absolute coordinate indices.
/// Built once per data set by [`KernelSpec::plan_for_dim`]; evaluation is then
/// allocation-free.
#[derive(Debug, Clone)]
pub struct EvalPlan {
    leaves: Vec<(Leaf, Vec<usize>)>,
    dim: usize,
}

#[derive(Debug, Clone, Copy)]
enum Leaf {
    Linear,
    Poly(i32),
    Gauss(f64),
}

impl KernelSpec {
    pub fn linear() -> Self {
        KernelSpec::Linear
    }

    pub fn polynomial(order: u32) -> Self {
        KernelSpec::Polynomial { order }
    }

    pub fn gaussian(bandwidth: f64) -> Self {
        KernelSpec::Gaussian { bandwidth }
    }

    /// Gaussian kernel with bandwidth set by the median heuristic on `points`.
    pub fn gaussian_median(points: &ArrayView2<f64>) -> Result<Self> {
        Ok(KernelSpec::Gaussian { bandwidth: median_bandwidth(points)? })
    }

    /// Validate the spec against data dimension `d` and flatten it for
    /// evaluation.
    pub fn plan_for_dim(&self, d: usize) -> Result<EvalPlan> {
        if d == 0 {
            return Err(Error::spec("data dimension must be positive"));
        }
        let mut leaves = Vec::new();
        let full: Vec<usize> = (0..d).collect();
        self.collect_leaves(&full, &mut leaves)?;
        let mut seen = vec![false; d];
        for (_, idx) in &leaves {
            for &i in idx {
                if i >= d {
                    return Err(Error::spec(format!(
                        "additive block index {i} out of range for dimension {d}"
                    )));
                }
                if seen[i] {
                    return Err(Error::spec(format!(
                        "additive blocks overlap at coordinate {i}"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(miss) = seen.iter().position(|c| !c) {
            return Err(Error::spec(format!(
                "additive blocks do not cover coordinate {miss} (dimension {d})"
            )));
        }
        Ok(EvalPlan { leaves, dim: d })
    }

    fn collect_leaves(&self, idx: &[usize], out: &mut Vec<(Leaf, Vec<usize>)>) -> Result<()> {
        match self {
            KernelSpec::Linear => out.push((Leaf::Linear, idx.to_vec())),
            KernelSpec::Polynomial { order } => {
                if *order < 1 {
                    return Err(Error::spec("polynomial order must be at least 1"));
                }
                out.push((Leaf::Poly(*order as i32 - 1), idx.to_vec()));
            }
            KernelSpec::Gaussian { bandwidth } => {
                if !(*bandwidth > 0.0) || !bandwidth.is_finite() {
                    return Err(Error::spec(format!(
                        "gaussian bandwidth must be positive and finite, got {bandwidth}"
                    )));
                }
                out.push((Leaf::Gauss(*bandwidth), idx.to_vec()));
            }
            KernelSpec::Additive { components } => {
                if components.is_empty() {
                    return Err(Error::spec("additive kernel needs at least one block"));
                }
                for (dims, sub) in components {
                    if dims.is_empty() {
                        return Err(Error::spec("additive block index set is empty"));
                    }
                    if !dims.windows(2).all(|w| w[0] < w[1]) {
                        return Err(Error::spec(format!(
                            "additive block indices must be strictly ascending, got {dims:?}"
                        )));
                    }
                    // sub-block indices are relative to the enclosing block
                    let mut abs = Vec::with_capacity(dims.len());
                    for &rel in dims {
                        match idx.get(rel) {
                            Some(&a) => abs.push(a),
                            None => {
                                return Err(Error::spec(format!(
                                    "additive block index {rel} out of range for a block of \
                                     width {}",
                                    idx.len()
                                )))
                            }
                        }
                    }
                    sub.collect_leaves(&abs, out)?;
                }
            }
        }
        Ok(())
    }

    /// Evaluate the kernel at a pair of points, validating against their
    /// dimension first. Hot paths should build an [`EvalPlan`] instead.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::input(format!(
                "kernel arguments have different dimensions ({} vs {})",
                x.len(),
                y.len()
            )));
        }
        let plan = self.plan_for_dim(x.len())?;
        Ok(plan.eval(x, y))
    }

    /// Gram matrix of `points` (rows are observations). Exactly symmetric by
    /// construction: the upper triangle is computed and mirrored.
    pub fn gram(&self, points: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let plan = self.plan_for_dim(points.ncols())?;
        let n = points.nrows();
        let mut g = Array2::zeros((n, n));
        for i in 0..n {
            let xi = points.row(i);
            for j in i..n {
                let v = plan.eval(
                    xi.as_slice().expect("row-major panel points"),
                    points.row(j).as_slice().expect("row-major panel points"),
                );
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        Ok(g)
    }

    /// Vector of kernel values `K(points_t, x)` for all rows `t`.
    pub fn kernel_vector(&self, points: &ArrayView2<f64>, x: &[f64]) -> Result<Array1<f64>> {
        if x.len() != points.ncols() {
            return Err(Error::input(format!(
                "evaluation point has dimension {}, data has {}",
                x.len(),
                points.ncols()
            )));
        }
        let plan = self.plan_for_dim(points.ncols())?;
        let n = points.nrows();
        let mut v = Array1::zeros(n);
        for t in 0..n {
            v[t] = plan.eval(points.row(t).as_slice().expect("row-major panel points"), x);
        }
        Ok(v)
    }

    /// Canonical text form; inverse of [`KernelSpec::from_str`].
    pub fn canonical(&self) -> String {
        self.to_string()
    }
}

impl EvalPlan {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Index set of the purely linear block containing `coord`, if any.
    pub fn linear_block(&self, coord: usize) -> Option<&[usize]> {
        self.leaves.iter().find_map(|(leaf, idx)| {
            (matches!(leaf, Leaf::Linear) && idx.contains(&coord)).then_some(idx.as_slice())
        })
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(y.len(), self.dim);
        let mut total = 0.0;
        for (leaf, idx) in &self.leaves {
            total += match *leaf {
                Leaf::Linear => idx.iter().map(|&i| x[i] * y[i]).sum::<f64>(),
                Leaf::Poly(p) => {
                    let dot: f64 = idx.iter().map(|&i| x[i] * y[i]).sum();
                    (1.0 + dot).powi(p)
                }
                Leaf::Gauss(b) => {
                    let sq: f64 = idx
                        .iter()
                        .map(|&i| {
                            let d = x[i] - y[i];
                            d * d
                        })
                        .sum();
                    (-sq / (b * b)).exp()
                }
            };
        }
        total
    }
}

/// Median pairwise Euclidean distance, the usual bandwidth heuristic. For
/// large inputs the median is taken over a deterministic stride subsample of
/// at most 2048 rows.
pub fn median_bandwidth(points: &ArrayView2<f64>) -> Result<f64> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::input("median bandwidth needs at least two points"));
    }
    let cap = 2048usize;
    let stride = n.div_ceil(cap);
    let rows: Vec<usize> = (0..n).step_by(stride).collect();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in rows.iter().skip(a + 1) {
            let mut sq = 0.0;
            for c in 0..points.ncols() {
                let d = points[(i, c)] - points[(j, c)];
                sq += d * d;
            }
            dists.push(sq.sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let m = dists.len();
    let med = if m % 2 == 1 { dists[m / 2] } else { 0.5 * (dists[m / 2 - 1] + dists[m / 2]) };
    if med > 0.0 {
        Ok(med)
    } else {
        Err(Error::input("median pairwise distance is zero; points are degenerate"))
    }
}

// ---------------------------------------------------------------------------
// grammar

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Linear => write!(f, "linear"),
            KernelSpec::Polynomial { order } => write!(f, "poly(k={order})"),
            KernelSpec::Gaussian { bandwidth } => write!(f, "gaussian(b={bandwidth:?})"),
            KernelSpec::Additive { components } => {
                write!(f, "add(")?;
                for (i, (dims, sub)) in components.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "[")?;
                    for (j, d) in dims.iter().enumerate() {
                        if j > 0 {
                            write!(f, ",")?;
                        }
                        write!(f, "{d}")?;
                    }
                    write!(f, "]:{sub}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut p = Parser { src: s.as_bytes(), pos: 0 };
        let spec = p.parse_spec()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.err("trailing characters after kernel spec"));
        }
        Ok(spec)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::spec(format!("{msg} at byte {}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", c as char)))
        }
    }

    fn ident(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphabetic() {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn number(&mut self) -> Result<&'a str> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            if c.is_ascii_digit() || matches!(c, b'.' | b'-' | b'+' | b'e' | b'E') {
                self.pos += 1;
            } else {
                break;
            }
        }
        if start == self.pos {
            return Err(self.err("expected a number"));
        }
        Ok(std::str::from_utf8(&self.src[start..self.pos]).expect("ascii number"))
    }

    fn parse_spec(&mut self) -> Result<KernelSpec> {
        let name = self.ident();
        match name.as_str() {
            "linear" => Ok(KernelSpec::Linear),
            "poly" => {
                self.expect(b'(')?;
                let key = self.ident();
                if key != "k" {
                    return Err(self.err("expected 'k=' in poly(...)"));
                }
                self.expect(b'=')?;
                let num = self.number()?;
                let order: u32 = num
                    .parse()
                    .map_err(|_| self.err("polynomial order must be a positive integer"))?;
                self.expect(b')')?;
                if order < 1 {
                    return Err(self.err("polynomial order must be at least 1"));
                }
                Ok(KernelSpec::Polynomial { order })
            }
            "gaussian" => {
                self.expect(b'(')?;
                let key = self.ident();
                if key != "b" {
                    return Err(self.err("expected 'b=' in gaussian(...)"));
                }
                self.expect(b'=')?;
                let num = self.number()?;
                let bandwidth: f64 =
                    num.parse().map_err(|_| self.err("gaussian bandwidth must be a number"))?;
                self.expect(b')')?;
                if !(bandwidth > 0.0) || !bandwidth.is_finite() {
                    return Err(self.err("gaussian bandwidth must be positive"));
                }
                Ok(KernelSpec::Gaussian { bandwidth })
            }
            "add" => {
                self.expect(b'(')?;
                let mut components = Vec::new();
                loop {
                    self.expect(b'[')?;
                    let mut dims = Vec::new();
                    loop {
                        let num = self.number()?;
                        let d: usize =
                            num.parse().map_err(|_| self.err("block index must be an integer"))?;
                        dims.push(d);
                        match self.peek() {
                            Some(b',') => {
                                self.pos += 1;
                            }
                            Some(b']') => {
                                self.pos += 1;
                                break;
                            }
                            _ => return Err(self.err("expected ',' or ']' in block index list")),
                        }
                    }
                    if !dims.windows(2).all(|w| w[0] < w[1]) {
                        return Err(self.err("block indices must be strictly ascending"));
                    }
                    self.expect(b':')?;
                    let sub = self.parse_spec()?;
                    components.push((dims, sub));
                    match self.peek() {
                        Some(b',') => {
                            self.pos += 1;
                        }
                        Some(b')') => {
                            self.pos += 1;
                            break;
                        }
                        _ => return Err(self.err("expected ',' or ')' in add(...)")),
                    }
                }
                Ok(KernelSpec::Additive { components })
            }
            "" => Err(self.err("expected a kernel name")),
            other => Err(self.err(&format!(
                "unknown kernel '{other}' (expected linear, poly, gaussian, or add)"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// eigensystem

/// Eigendecomposition of `gram / n` with eigenvalues sorted descending and
/// negatives (down to `-PSD_TOL`) clamped to zero.
#[derive(Debug, Clone)]
pub struct GramEigen {
    /// The Gram matrix as supplied (unscaled).
    pub gram: Array2<f64>,
    /// Eigenvalues of `gram / n`, descending, clamped at zero.
    pub eigvals: Array1<f64>,
    /// Orthonormal eigenvectors, columns matching `eigvals`.
    pub eigvecs: Array2<f64>,
    /// Number of points backing the Gram matrix; also the Nystrom scale.
    pub n: usize,
}

impl GramEigen {
    pub fn new(gram: Array2<f64>) -> Result<Self> {
        let n = gram.nrows();
        if n == 0 {
            return Err(Error::input("gram matrix is empty"));
        }
        if n != gram.ncols() {
            return Err(Error::input("gram matrix must be square"));
        }
        let mut asym = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                asym = asym.max((gram[(i, j)] - gram[(j, i)]).abs());
            }
        }
        if asym > GRAM_SYMMETRY_TOL {
            return Err(Error::input(format!(
                "gram matrix is asymmetric (max |g_ij - g_ji| = {asym:.3e}, tolerance {GRAM_SYMMETRY_TOL:.0e})"
            )));
        }
        let scaled = &gram / n as f64;
        let (mut vals, vecs) = linalg::eigh(&scaled.view())?;
        if let Some(&min) = vals.iter().min_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"))
        {
            if min < -PSD_TOL {
                return Err(Error::Numeric {
                    context: "gram eigendecomposition".into(),
                    details: format!(
                        "matrix is not positive semidefinite (min eigenvalue {min:.3e})"
                    ),
                });
            }
        }
        vals.mapv_inplace(|v| v.max(0.0));
        Ok(GramEigen { gram, eigvals: vals, eigvecs: vecs, n })
    }

    /// Cutoff below which eigenvalues are excluded from rank decisions and
    /// regularized sums.
    pub fn clamp_threshold(&self) -> f64 {
        EIGENVALUE_CLAMP_REL * self.eigvals[0]
    }

    /// Number of eigenvalues above the clamp threshold.
    pub fn rank(&self) -> usize {
        if self.eigvals[0] <= 0.0 {
            return 0;
        }
        let thr = self.clamp_threshold();
        self.eigvals.iter().take_while(|&&v| v > thr).count()
    }

    /// Empirical effective dimension `sum_v mu_v / (mu_v + eta)` over retained
    /// eigenvalues. Strictly decreasing in `eta`; approaches the rank as
    /// `eta` drops to zero.
    pub fn effective_dim(&self, eta: f64) -> Result<f64> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::input(format!("effective dimension needs eta > 0, got {eta}")));
        }
        let thr = self.clamp_threshold();
        Ok(self
            .eigvals
            .iter()
            .take_while(|&&mu| mu > thr)
            .map(|&mu| mu / (mu + eta))
            .sum())
    }

    /// Nystrom extension of eigenfunction `nu` at an arbitrary point:
    /// `phi_v(x) = (1 / (n mu_v)) sum_t U_{tv} sqrt(n) K(p_t, x)`.
    ///
    /// At the training points this reproduces `sqrt(n) U_{tv}`, so the
    /// empirical normalization `(1/n) sum_t phi_v(p_t)^2 = 1` holds.
    pub fn nystrom_phi(
        &self,
        spec: &KernelSpec,
        points: &ArrayView2<f64>,
        nu: usize,
        x: &[f64],
    ) -> Result<f64> {
        if points.nrows() != self.n {
            return Err(Error::input("points do not match the gram matrix"));
        }
        if nu >= self.n {
            return Err(Error::input(format!("eigenfunction index {nu} out of range")));
        }
        let mu = self.eigvals[nu];
        if mu <= self.clamp_threshold() || mu <= 0.0 {
            return Err(Error::Numeric {
                context: "nystrom extension".into(),
                details: format!("eigenvalue {nu} is degenerate ({mu:.3e}); no stable extension"),
            });
        }
        let k = spec.kernel_vector(points, x)?;
        let c = self.eigvecs.column(nu).dot(&k);
        Ok(c / ((self.n as f64).sqrt() * mu))
    }

    /// Squared regularized kernel norm at `x0`:
    /// `sum_v phi_v(x0)^2 / (1 + eta / mu_v)^2` over retained eigenvalues.
    pub fn regularized_kernel_value(
        &self,
        spec: &KernelSpec,
        points: &ArrayView2<f64>,
        eta: f64,
        x0: &[f64],
    ) -> Result<f64> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::input(format!("regularized kernel value needs eta > 0, got {eta}")));
        }
        if points.nrows() != self.n {
            return Err(Error::input("points do not match the gram matrix"));
        }
        let k = spec.kernel_vector(points, x0)?;
        let c = self.eigvecs.t().dot(&k);
        let thr = self.clamp_threshold();
        let nf = self.n as f64;
        let mut total = 0.0;
        for (nu, &mu) in self.eigvals.iter().enumerate() {
            if mu <= thr || mu <= 0.0 {
                break;
            }
            let s = mu + eta;
            total += c[nu] * c[nu] / (nf * s * s);
        }
        Ok(total)
    }

    /// Column of the regularized kernel at `x0` evaluated at all training
    /// points: entry `t` is `sum_v phi_v(p_t) phi_v(x0) / (1 + eta / mu_v)`.
    pub fn regularized_kernel_column(
        &self,
        spec: &KernelSpec,
        points: &ArrayView2<f64>,
        eta: f64,
        x0: &[f64],
    ) -> Result<Array1<f64>> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::input(format!("regularized kernel column needs eta > 0, got {eta}")));
        }
        if points.nrows() != self.n {
            return Err(Error::input("points do not match the gram matrix"));
        }
        let k = spec.kernel_vector(points, x0)?;
        let c = self.eigvecs.t().dot(&k);
        let thr = self.clamp_threshold();
        let mut weights = Array1::zeros(self.n);
        for (nu, &mu) in self.eigvals.iter().enumerate() {
            if mu <= thr || mu <= 0.0 {
                break;
            }
            weights[nu] = c[nu] / (mu + eta);
        }
        Ok(self.eigvecs.dot(&weights))
    }
}

/// Convenience: decompose the Gram matrix of `points` under `spec`.
pub fn gram_eigen(spec: &KernelSpec, points: &ArrayView2<f64>) -> Result<GramEigen> {
    GramEigen::new(spec.gram(points)?)
}

pub use crate::linalg::trace;
