//! Pooled kernel ridge estimation with a common function across units.
//!
//! All N units share one nonparametric function evaluated at the stacked
//! NT covariate rows, while factor coefficients stay unit-specific. The
//! per-period annihilator `P` of the augmented design is applied blockwise
//! to every unit (`P_N = I_N (x) P` in stacked form, unit-major), profiling
//! the coefficients out of the objective. The representer weights solve the
//! nonsymmetric system
//!
//! `(P_N K + NT eta I) a = P_N y`
//!
//! by partial-pivot LU with one refinement pass; the fit then verifies the
//! normal equations and recovers each unit's coefficients by least squares
//! on `y_i - g`. Smoothing-parameter selection works in the eigenbasis of
//! the symmetric core `P_N K P_N`, which prices the whole GCV grid with a
//! single decomposition; the identities involved are exact and are checked
//! against dense smoother matrices in the tests.

use std::sync::OnceLock;

use ndarray::{s, Array1, Array2};

use crate::error::{Error, Result};
use crate::gcv::{EtaGrid, EtaSelection, SpectralGcv};
use crate::kernel::{self, GramEigen, KernelSpec};
use crate::linalg::{self, CholFactor, LuFactor};
use crate::panel::PanelData;

pub use crate::hetero::NORMAL_EQUATION_TOL;

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Upper bound on N*T for the dense pooled solve.
    pub nt_cap: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { nt_cap: 6000 }
    }
}

/// Fitted pooled model.
#[derive(Debug)]
pub struct HomoFit {
    /// Representer weights over the stacked sample, unit-major (length NT).
    pub weights: Array1<f64>,
    pub eta: f64,
    /// Per-unit coefficients on the augmented design, N x (q1+d).
    pub betas: Array2<f64>,
    /// Degrees-of-freedom corrected residual variance.
    pub sigma_sq: f64,
    pub fitted: Array2<f64>,
    /// Common function evaluated at the stacked sample points (length NT).
    pub g_points: Array1<f64>,
    /// Annihilator of the augmented design, T x T.
    pub projection: Array2<f64>,
    pub spec: KernelSpec,
    /// Stacked covariate rows backing kernel evaluation, NT x d.
    pub points: Array2<f64>,
    pub n: usize,
    pub t: usize,
    pub q1: usize,
    pub warnings: Vec<String>,
    eigen: OnceLock<GramEigen>,
}

impl Clone for HomoFit {
    fn clone(&self) -> Self {
        HomoFit {
            weights: self.weights.clone(),
            eta: self.eta,
            betas: self.betas.clone(),
            sigma_sq: self.sigma_sq,
            fitted: self.fitted.clone(),
            g_points: self.g_points.clone(),
            projection: self.projection.clone(),
            spec: self.spec.clone(),
            points: self.points.clone(),
            n: self.n,
            t: self.t,
            q1: self.q1,
            warnings: self.warnings.clone(),
            eigen: OnceLock::new(),
        }
    }
}

impl HomoFit {
    /// Common function at a new covariate value.
    pub fn predict_g(&self, x: &[f64]) -> Result<f64> {
        let kx = self.spec.kernel_vector(&self.points.view(), x)?;
        Ok(self.weights.dot(&kx))
    }

    /// Full conditional mean for unit `i` at covariates `x` and design row `z`.
    pub fn predict(&self, unit: usize, x: &[f64], z: &[f64]) -> Result<f64> {
        if unit >= self.n {
            return Err(Error::input(format!("unit {unit} out of range, fit has {}", self.n)));
        }
        let beta = self.betas.row(unit);
        if z.len() != beta.len() {
            return Err(Error::input(format!(
                "design row has {} entries, fit has {} coefficients",
                z.len(),
                beta.len()
            )));
        }
        let zb: f64 = z.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
        Ok(self.predict_g(x)? + zb)
    }

    /// Eigendecomposition of the pooled Gram matrix, computed on first use.
    /// The fit itself never needs it; inference does.
    pub fn eigen(&self) -> Result<&GramEigen> {
        if let Some(g) = self.eigen.get() {
            return Ok(g);
        }
        let ge = kernel::gram_eigen(&self.spec, &self.points.view())?;
        Ok(self.eigen.get_or_init(|| ge))
    }

    /// Effective dimension of the regularized kernel at the fitted eta.
    pub fn effective_dim(&self) -> Result<f64> {
        self.eigen()?.effective_dim(self.eta)
    }

    pub fn unit_g(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.g_points.slice(s![i * self.t..(i + 1) * self.t])
    }
}

fn design_and_annihilator(panel: &PanelData) -> Result<(Array2<f64>, Array2<f64>)> {
    let z = panel.design_matrix();
    let dep = linalg::dependent_columns(&z.view(), &panel.design_labels());
    if !dep.is_empty() {
        return Err(Error::RankDeficient {
            context: "augmented factor design".to_string(),
            columns: dep,
        });
    }
    let p = linalg::annihilator(&z.view())?;
    Ok((z, p))
}

fn check_cap(panel: &PanelData, opts: &FitOptions) -> Result<usize> {
    let nt = panel.n() * panel.t_len();
    if nt > opts.nt_cap {
        return Err(Error::resource(format!(
            "pooled fit needs a dense {nt} x {nt} solve; N*T = {nt} exceeds the cap of {} \
             (raise nt_cap only with memory to match)",
            opts.nt_cap
        )));
    }
    Ok(nt)
}

/// Fit the pooled model at a fixed smoothing parameter.
pub fn fit(panel: &PanelData, spec: &KernelSpec, eta: f64, opts: &FitOptions) -> Result<HomoFit> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::input(format!("eta must be positive and finite, got {eta}")));
    }
    let nt = check_cap(panel, opts)?;
    let (z, p) = design_and_annihilator(panel)?;
    let n = panel.n();
    let t = panel.t_len();
    let q1 = panel.q1();
    let points = panel.stacked_x();
    let y = panel.stacked_y();
    let gram = spec.gram(&points.view())?;
    let c = nt as f64 * eta;

    let mut sys = linalg::block_mul_left(&p.view(), &gram.view());
    for i in 0..nt {
        sys[[i, i]] += c;
    }
    let w = linalg::block_mul_vec(&p.view(), &y.view());
    let lu = LuFactor::new(&sys.view())?;
    let weights = lu.solve_refined(&sys.view(), &w.view());
    drop(lu);

    let resid_sys = &sys.dot(&weights) - &w;
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let err = resid_sys.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if err > NORMAL_EQUATION_TOL * scale {
        return Err(Error::numeric(
            "pooled ridge system",
            format!("normal equation residual {err:.3e} exceeds {NORMAL_EQUATION_TOL:.1e} x ||y||"),
        ));
    }
    drop(sys);

    let g_points = gram.dot(&weights);
    drop(gram);

    let ztz = z.t().dot(&z);
    let chol = CholFactor::new(&ztz.view())
        .map_err(|_| Error::numeric("factor design normal equations", "Z'Z not positive definite"))?;
    let k = z.ncols();
    let mut betas = Array2::<f64>::zeros((n, k));
    let mut fitted = Array2::<f64>::zeros((n, t));
    let mut ssq = 0.0;
    for i in 0..n {
        let g_i = g_points.slice(s![i * t..(i + 1) * t]);
        let r_i = &panel.unit_y(i).to_owned() - &g_i;
        let beta = chol.solve(&z.t().dot(&r_i).view());
        let fit_i = &g_i.to_owned() + &z.dot(&beta);
        fitted.row_mut(i).assign(&fit_i);
        betas.row_mut(i).assign(&beta);
        let pr = p.dot(&r_i);
        ssq += r_i.dot(&pr);
    }
    let df = t - k;
    let sigma_sq = ssq / (n as f64 * df as f64);

    Ok(HomoFit {
        weights,
        eta,
        betas,
        sigma_sq,
        fitted,
        g_points,
        projection: p,
        spec: spec.clone(),
        points,
        n,
        t,
        q1,
        warnings: Vec::new(),
        eigen: OnceLock::new(),
    })
}

/// GCV selection of the pooled smoothing parameter.
///
/// The default grid spans `[1e-6, 1e2] x trace(gram)/(NT)` with 40 log-spaced
/// points; skipped points and ties follow the same rules as the per-unit
/// selector.
pub fn select_eta(
    panel: &PanelData,
    spec: &KernelSpec,
    grid: Option<&EtaGrid>,
    opts: &FitOptions,
) -> Result<EtaSelection> {
    let nt = check_cap(panel, opts)?;
    let (z, p) = design_and_annihilator(panel)?;
    let points = panel.stacked_x();
    let y = panel.stacked_y();
    let gram = spec.gram(&points.view())?;
    let trace_scale = linalg::trace(&gram.view()) / nt as f64;
    let default_grid;
    let grid = match grid {
        Some(g) => g,
        None => {
            default_grid = EtaGrid::default_for_scale(trace_scale)?;
            &default_grid
        }
    };
    let pk = linalg::block_mul_left(&p.view(), &gram.view());
    drop(gram);
    let mut core = linalg::block_mul_right(&pk.view(), &p.view());
    drop(pk);
    linalg::symmetrize(&mut core);
    let w = linalg::block_mul_vec(&p.view(), &y.view());
    let hat = linalg::hat_matrix(&z.view())?;
    let hat_trace = panel.n() as f64 * linalg::trace(&hat.view());
    let gcv = SpectralGcv::new(core, &w, hat_trace, nt as f64)?;
    gcv.select(grid)
}

/// Select eta by GCV and fit at the selected value.
pub fn fit_gcv(
    panel: &PanelData,
    spec: &KernelSpec,
    grid: Option<&EtaGrid>,
    opts: &FitOptions,
) -> Result<(HomoFit, EtaSelection)> {
    let sel = select_eta(panel, spec, grid, opts)?;
    let mut fit = fit(panel, spec, sel.eta, opts)?;
    fit.warnings.extend(sel.warnings.iter().cloned());
    Ok((fit, sel))
}

/// Dense pooled smoother matrix `B` with `vec(fitted) = B vec(y)` in
/// unit-major stacking. Cubic in NT; intended for validation at test scale.
pub fn smoother_matrix(
    panel: &PanelData,
    spec: &KernelSpec,
    eta: f64,
    opts: &FitOptions,
) -> Result<Array2<f64>> {
    let nt = check_cap(panel, opts)?;
    let (z, p) = design_and_annihilator(panel)?;
    let t = panel.t_len();
    let n = panel.n();
    let gram = spec.gram(&panel.stacked_x().view())?;
    let mut sys = linalg::block_mul_left(&p.view(), &gram.view());
    let c = nt as f64 * eta;
    for i in 0..nt {
        sys[[i, i]] += c;
    }
    let lu = LuFactor::new(&sys.view())?;
    // columns of the stacked blockwise projector
    let mut p_n = Array2::<f64>::zeros((nt, nt));
    for b in 0..n {
        for i in 0..t {
            for j in 0..t {
                p_n[[b * t + i, b * t + j]] = p[[i, j]];
            }
        }
    }
    let mut s_mat = Array2::<f64>::zeros((nt, nt));
    for j in 0..nt {
        let col = lu.solve(&p_n.column(j));
        s_mat.slice_mut(s![.., j]).assign(&col);
    }
    let hat = linalg::hat_matrix(&z.view())?;
    let ks = gram.dot(&s_mat);
    let eye = Array2::<f64>::eye(nt);
    let rest = &eye - &ks;
    let b = &ks + &linalg::block_mul_left(&hat.view(), &rest.view());
    Ok(b)
}

/// Residual variance of a stored fit recomputed from the panel.
pub fn residual_variance(panel: &PanelData, fit: &HomoFit) -> f64 {
    let mut ssq = 0.0;
    for i in 0..fit.n {
        let r_i = &panel.unit_y(i).to_owned() - &fit.unit_g(i);
        let pr = fit.projection.dot(&r_i);
        ssq += r_i.dot(&pr);
    }
    let df = fit.t - fit.q1 - panel.d();
    ssq / (fit.n as f64 * df as f64)
}

/// Brute-force reference solver for the pooled model: joint normal
/// equations of the penalized objective in `(a, beta_1, ..., beta_N)`,
/// solved densely by a symmetric pseudo-inverse. Returns the minimum-norm
/// minimizer; when the gram is singular the weight vector itself is not
/// unique, so callers should compare the kernel part `gram . a` and the
/// coefficients, which the objective does determine. Independent of the
/// profiled closed form; meant for validation at small `N*T`.
pub fn dense_joint_solution(
    gram: &Array2<f64>,
    z: &Array2<f64>,
    y: &Array1<f64>,
    n_units: usize,
    eta: f64,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let nt = gram.nrows();
    let t = nt / n_units;
    let k = z.ncols();
    let dim = nt + n_units * k;
    let ntf = nt as f64;
    let mut sys = Array2::<f64>::zeros((dim, dim));
    let mut rhs = Array1::<f64>::zeros(dim);
    let kk = gram.dot(gram);
    let ky = gram.dot(y);
    for i in 0..nt {
        for j in 0..nt {
            sys[[i, j]] = kk[[i, j]] / ntf + eta * gram[[i, j]];
        }
        rhs[i] = ky[i] / ntf;
    }
    // K B / NT block, B = I_N (x) Z
    for i in 0..nt {
        for b in 0..n_units {
            for c in 0..k {
                let col = nt + b * k + c;
                let mut v = 0.0;
                for rr in 0..t {
                    v += gram[[i, b * t + rr]] * z[[rr, c]];
                }
                sys[[i, col]] = v / ntf;
            }
        }
    }
    // B' K / NT and B' B / NT blocks, B' y / NT right-hand side
    for b in 0..n_units {
        for c in 0..k {
            let row = nt + b * k + c;
            for j in 0..nt {
                let mut v = 0.0;
                for rr in 0..t {
                    v += z[[rr, c]] * gram[[b * t + rr, j]];
                }
                sys[[row, j]] = v / ntf;
            }
            for b2 in 0..n_units {
                for c2 in 0..k {
                    if b2 == b {
                        let mut v = 0.0;
                        for rr in 0..t {
                            v += z[[rr, c]] * z[[rr, c2]];
                        }
                        sys[[row, nt + b2 * k + c2]] = v / ntf;
                    }
                }
            }
            let mut v = 0.0;
            for rr in 0..t {
                v += z[[rr, c]] * y[b * t + rr];
            }
            rhs[row] = v / ntf;
        }
    }
    let sol = linalg::pseudo_solve(&sys.view(), &rhs.view())?;
    let a = sol.slice(s![..nt]).to_owned();
    let mut betas = Array2::<f64>::zeros((n_units, k));
    for b in 0..n_units {
        for c in 0..k {
            betas[[b, c]] = sol[nt + b * k + c];
        }
    }
    Ok((a, betas))
}
