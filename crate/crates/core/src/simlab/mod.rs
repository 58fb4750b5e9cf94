//! Monte Carlo harness: panel generators plus replication drivers for MSE
//! summaries and pointwise coverage curves.
//!
//! Replication r draws from the ChaCha stream `1 + r` of the spec seed, so
//! reports depend only on (seed, spec, reps), not on the thread count: the
//! per-replication results are gathered by index and every reduction runs in
//! a fixed order. Wall-clock timing lives outside the payload for the same
//! reason.

pub mod dgp;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::hetero;
use crate::homo::{self, FitOptions};
use crate::inference;
use crate::kernel::KernelSpec;
use dgp::{covariate_range, generate, DgpSpec, GeneratedPanel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Hetero,
    Homo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", untagged)]
pub enum EtaRule {
    Gcv(GcvTag),
    Fixed(f64),
}

/// Single-variant tag so "gcv" round-trips through serde as a bare string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcvTag {
    Gcv,
}

impl EtaRule {
    pub fn gcv() -> Self {
        EtaRule::Gcv(GcvTag::Gcv)
    }

    pub fn fixed(eta: f64) -> Self {
        EtaRule::Fixed(eta)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub model: ModelKind,
    /// Kernel grammar string; parsed per run so the config stays plain data.
    pub kernel: String,
    pub eta: EtaRule,
}

impl EstimatorConfig {
    pub fn new(model: ModelKind, kernel: &KernelSpec, eta: EtaRule) -> Self {
        EstimatorConfig { model, kernel: kernel.to_string(), eta }
    }

    fn kernel_spec(&self) -> Result<KernelSpec> {
        self.kernel.parse()
    }
}

/// One recorded estimator failure: which replication and why.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepFailure {
    pub rep: usize,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MseCell {
    pub design: String,
    pub n: usize,
    pub t: usize,
    pub mean_mse: f64,
    /// Sample standard deviation over replications divided by sqrt(reps).
    pub mc_se: f64,
    pub reps_requested: usize,
    pub reps_used: usize,
    /// Per-replication MSE values; null where the fit failed.
    pub per_rep: Vec<Option<f64>>,
    pub failures: Vec<RepFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub x: f64,
    /// Share of evaluated replications whose interval contained the truth.
    pub coverage: f64,
    /// Binomial standard error sqrt(p(1-p)/count).
    pub std_error: f64,
    pub hits: usize,
    /// Replications where this point fell inside the sample's covariate
    /// range; points outside a replication's range are not scored.
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub design: String,
    pub n: usize,
    pub t: usize,
    pub level: f64,
    pub reps_requested: usize,
    pub reps_used: usize,
    pub points: Vec<CoveragePoint>,
    pub failures: Vec<RepFailure>,
}

/// Everything that must be byte-stable across reruns and thread counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McPayload {
    pub task: String,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<MseCell>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageCurve>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McMeta {
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub payload: McPayload,
    pub meta: McMeta,
}

impl McReport {
    /// Canonical JSON of the deterministic part.
    pub fn payload_json(&self) -> String {
        serde_json::to_string_pretty(&self.payload).expect("payload serializes")
    }

    /// Flat CSV rows: one per cell for MSE runs, one per grid point for
    /// coverage runs. Numbers are printed in round-trippable form.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(cell) = &self.payload.mse {
            out.push_str("task,design,n,t,reps_requested,reps_used,failures,mean_mse,mc_se\n");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.16e},{:.16e}\n",
                self.payload.task,
                cell.design,
                cell.n,
                cell.t,
                cell.reps_requested,
                cell.reps_used,
                cell.failures.len(),
                cell.mean_mse,
                cell.mc_se,
            ));
        }
        if let Some(curve) = &self.payload.coverage {
            out.push_str("task,design,n,t,level,x,coverage,std_error,hits,count\n");
            for p in &curve.points {
                out.push_str(&format!(
                    "{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
                    self.payload.task,
                    curve.design,
                    curve.n,
                    curve.t,
                    curve.level,
                    p.x,
                    p.coverage,
                    p.std_error,
                    p.hits,
                    p.count,
                ));
            }
        }
        out
    }
}

fn rep_rng(seed: u64, rep: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(1 + rep as u64);
    rng
}

fn mse_one_rep(dgp: &DgpSpec, est: &EstimatorConfig, rep: usize) -> Result<f64> {
    let spec = est.kernel_spec()?;
    let mut rng = rep_rng(dgp.seed, rep);
    let GeneratedPanel { panel, truth } = generate(dgp, &mut rng)?;
    match est.model {
        ModelKind::Hetero => {
            let n = panel.n();
            let t = panel.t_len();
            let mut diffs = Vec::with_capacity(n * t);
            for i in 0..n {
                let fit = match est.eta {
                    EtaRule::Fixed(eta) => hetero::fit_unit(&panel, i, &spec, eta)?,
                    EtaRule::Gcv(_) => hetero::fit_unit_gcv(&panel, i, &spec, None)?.0,
                };
                for tt in 0..t {
                    let row = panel.x.slice(ndarray::s![i, tt, ..]);
                    let xt = row.as_slice().expect("contiguous covariate row");
                    diffs.push(fit.predict_g(xt)? - truth.eval(i, xt));
                }
            }
            let shift = diffs.iter().sum::<f64>() / diffs.len() as f64;
            Ok(diffs.iter().map(|d| (d - shift) * (d - shift)).sum::<f64>() / diffs.len() as f64)
        }
        ModelKind::Homo => {
            let fit = match est.eta {
                EtaRule::Fixed(eta) => homo::fit(&panel, &spec, eta, &FitOptions::default())?,
                EtaRule::Gcv(_) => {
                    homo::fit_gcv(&panel, &spec, None, &FitOptions::default())?.0
                }
            };
            let n = panel.n();
            let t = panel.t_len();
            let mut diffs = Vec::with_capacity(n * t);
            for i in 0..n {
                for tt in 0..t {
                    let row = panel.x.slice(ndarray::s![i, tt, ..]);
                    let xt = row.as_slice().expect("contiguous covariate row");
                    diffs.push(fit.g_points[i * t + tt] - truth.mean_eval(xt));
                }
            }
            let shift = diffs.iter().sum::<f64>() / diffs.len() as f64;
            Ok(diffs.iter().map(|d| (d - shift) * (d - shift)).sum::<f64>() / diffs.len() as f64)
        }
    }
}

fn split_outcomes(results: Vec<Result<f64>>) -> (Vec<Option<f64>>, Vec<RepFailure>) {
    let mut per_rep = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => per_rep.push(Some(v)),
            Err(e) => {
                per_rep.push(None);
                failures.push(RepFailure { rep, error: e.to_string() });
            }
        }
    }
    (per_rep, failures)
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Monte Carlo mean squared error of the fitted kernel part against the true
/// function at the generated design points: averaged over units for the
/// per-unit estimator, over all N*T points for the pooled one. The free
/// intercepts absorb any constant shift of the kernel part, so the comparison
/// removes the overall mean discrepancy before squaring; per-unit location
/// wobble stays in the measure. The pooled fit is scored against the
/// cross-unit average function when units differ.
pub fn mc_mse(dgp: &DgpSpec, est: &EstimatorConfig, reps: usize) -> Result<McReport> {
    if reps < 2 {
        return Err(Error::input("mc_mse needs at least 2 replications"));
    }
    est.kernel_spec()?;
    let start = std::time::Instant::now();
    let results: Vec<Result<f64>> =
        (0..reps).into_par_iter().map(|rep| mse_one_rep(dgp, est, rep)).collect();
    let (per_rep, failures) = split_outcomes(results);
    let ok: Vec<f64> = per_rep.iter().filter_map(|v| *v).collect();
    if ok.len() < 2 {
        return Err(Error::numeric(
            "mc_mse",
            format!("only {}/{} replications produced a fit", ok.len(), reps),
        ));
    }
    let (mean_mse, mc_se) = mean_and_se(&ok);
    let cell = MseCell {
        design: dgp.design.label().to_string(),
        n: dgp.n,
        t: dgp.t,
        mean_mse,
        mc_se,
        reps_requested: reps,
        reps_used: ok.len(),
        per_rep,
        failures,
    };
    let payload = McPayload {
        task: "mse".to_string(),
        config: json!({ "dgp": dgp, "estimator": est, "reps": reps }),
        mse: Some(cell),
        coverage: None,
    };
    Ok(McReport {
        payload,
        meta: McMeta { wall_clock_secs: start.elapsed().as_secs_f64() },
    })
}

/// Evenly spaced coverage grid on [0,1].
pub fn default_coverage_grid() -> Vec<f64> {
    (0..100).map(|j| j as f64 / 99.0).collect()
}

struct CoverageRep {
    hits: Vec<bool>,
    scored: Vec<bool>,
}

fn coverage_one_rep(
    dgp: &DgpSpec,
    est: &EstimatorConfig,
    x_grid: &[f64],
    level: f64,
    rep: usize,
) -> Result<CoverageRep> {
    let spec = est.kernel_spec()?;
    let mut rng = rep_rng(dgp.seed, rep);
    let GeneratedPanel { panel, truth } = generate(dgp, &mut rng)?;
    if panel.d() != 1 {
        return Err(Error::input(
            "coverage runs on scalar-covariate designs; the grid is one-dimensional",
        ));
    }
    let fit = match est.eta {
        EtaRule::Fixed(eta) => homo::fit(&panel, &spec, eta, &FitOptions::default())?,
        EtaRule::Gcv(_) => homo::fit_gcv(&panel, &spec, None, &FitOptions::default())?.0,
    };
    let (lo, hi) = covariate_range(&panel, 0);
    let mut hits = vec![false; x_grid.len()];
    let mut scored = vec![false; x_grid.len()];
    for (j, &x) in x_grid.iter().enumerate() {
        if x < lo || x > hi {
            continue;
        }
        let est_iv = inference::g_interval_homo(&fit, &[x], level)?;
        let g0 = truth.eval(0, &[x]);
        scored[j] = true;
        hits[j] = est_iv.lower <= g0 && g0 <= est_iv.upper;
    }
    Ok(CoverageRep { hits, scored })
}

/// Coverage of the pooled-function confidence interval over an x grid:
/// fraction of replications whose interval contains the true function,
/// scored only where the grid point lies inside that replication's sample
/// range.
pub fn mc_coverage(
    dgp: &DgpSpec,
    est: &EstimatorConfig,
    x_grid: &[f64],
    level: f64,
    reps: usize,
) -> Result<McReport> {
    if reps < 2 {
        return Err(Error::input("mc_coverage needs at least 2 replications"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::input(format!("level must lie in (0,1), got {level}")));
    }
    if x_grid.is_empty() {
        return Err(Error::input("coverage grid is empty"));
    }
    if x_grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("coverage grid contains non-finite points"));
    }
    if est.model != ModelKind::Homo {
        return Err(Error::input(
            "coverage is defined for the pooled estimator; pass the homogeneous model",
        ));
    }
    est.kernel_spec()?;
    let start = std::time::Instant::now();
    let results: Vec<Result<CoverageRep>> = (0..reps)
        .into_par_iter()
        .map(|rep| coverage_one_rep(dgp, est, x_grid, level, rep))
        .collect();
    let mut failures = Vec::new();
    let mut hits = vec![0usize; x_grid.len()];
    let mut counts = vec![0usize; x_grid.len()];
    let mut used = 0usize;
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(cr) => {
                used += 1;
                for j in 0..x_grid.len() {
                    if cr.scored[j] {
                        counts[j] += 1;
                        if cr.hits[j] {
                            hits[j] += 1;
                        }
                    }
                }
            }
            Err(e) => failures.push(RepFailure { rep, error: e.to_string() }),
        }
    }
    if used < 2 {
        return Err(Error::numeric(
            "mc_coverage",
            format!("only {used}/{reps} replications produced a fit"),
        ));
    }
    let points = x_grid
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let c = counts[j];
            let p = if c > 0 { hits[j] as f64 / c as f64 } else { f64::NAN };
            let se = if c > 0 { (p * (1.0 - p) / c as f64).sqrt() } else { f64::NAN };
            CoveragePoint { x, coverage: p, std_error: se, hits: hits[j], count: c }
        })
        .collect();
    let curve = CoverageCurve {
        design: dgp.design.label().to_string(),
        n: dgp.n,
        t: dgp.t,
        level,
        reps_requested: reps,
        reps_used: used,
        points,
        failures,
    };
    let payload = McPayload {
        task: "coverage".to_string(),
        config: json!({
            "dgp": dgp,
            "estimator": est,
            "reps": reps,
            "level": level,
            "grid_len": x_grid.len(),
        }),
        mse: None,
        coverage: Some(curve),
    };
    Ok(McReport {
        payload,
        meta: McMeta { wall_clock_secs: start.elapsed().as_secs_f64() },
    })
}

pub use dgp::{Design, TrueG};

#[cfg(test)]
mod tests {
    use super::*;

    fn cheap_hetero_est() -> EstimatorConfig {
        EstimatorConfig {
            model: ModelKind::Hetero,
            kernel: "gaussian(b=1.0)".to_string(),
            eta: EtaRule::fixed(0.05),
        }
    }

    #[test]
    fn rejects_single_rep() {
        let dgp = DgpSpec::new(Design::hetero_logistic(), 3, 10, 1);
        assert!(mc_mse(&dgp, &cheap_hetero_est(), 1).is_err());
    }

    #[test]
    fn per_rep_values_line_up_with_summary() {
        let dgp = DgpSpec::new(Design::hetero_logistic(), 3, 12, 42);
        let report = mc_mse(&dgp, &cheap_hetero_est(), 6).unwrap();
        let cell = report.payload.mse.as_ref().unwrap();
        assert_eq!(cell.per_rep.len(), 6);
        assert_eq!(cell.reps_used, 6);
        assert!(cell.failures.is_empty());
        let vals: Vec<f64> = cell.per_rep.iter().map(|v| v.unwrap()).collect();
        let (mean, se) = mean_and_se(&vals);
        assert!((cell.mean_mse - mean).abs() < 1e-14);
        assert!((cell.mc_se - se).abs() < 1e-14);
        assert!(cell.mean_mse.is_finite() && cell.mc_se > 0.0);
    }

    #[test]
    fn identical_reports_across_thread_counts() {
        let dgp = DgpSpec::new(Design::beta_mixture(), 4, 12, 7);
        let est = EstimatorConfig {
            model: ModelKind::Homo,
            kernel: "gaussian(b=1.0)".to_string(),
            eta: EtaRule::fixed(0.1),
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| mc_mse(&dgp, &est, 8).unwrap().payload_json())
        };
        let one = run(1);
        let four = run(4);
        assert_eq!(one, four);
    }

    #[test]
    fn doubling_reps_shrinks_se_like_sqrt2() {
        let dgp = DgpSpec::new(Design::hetero_logistic(), 3, 10, 99);
        let est = cheap_hetero_est();
        let r1 = mc_mse(&dgp, &est, 120).unwrap();
        let r2 = mc_mse(&dgp, &est, 240).unwrap();
        let se1 = r1.payload.mse.as_ref().unwrap().mc_se;
        let se2 = r2.payload.mse.as_ref().unwrap().mc_se;
        let ratio = se1 / se2;
        let target = 2.0f64.sqrt();
        assert!(
            ratio > target * 0.8 && ratio < target * 1.2,
            "se ratio {ratio} vs sqrt(2)"
        );
    }

    #[test]
    fn zero_noise_interpolates() {
        // no outcome noise and no factor term in y: the fit should recover
        // the function at the sample points almost exactly
        let dgp = DgpSpec::new(
            Design::FirmPanel {
                coefficients: [0.10, 0.10, 0.73],
                noise_sd: 0.0,
                ife_scale: 0.0,
            },
            10,
            40,
            5,
        );
        let est = EstimatorConfig {
            model: ModelKind::Homo,
            kernel: "add([0,1,2]:linear, [3]:gaussian(b=1.0))".to_string(),
            eta: EtaRule::fixed(1e-6),
        };
        let report = mc_mse(&dgp, &est, 3).unwrap();
        let mse = report.payload.mse.as_ref().unwrap().mean_mse;
        assert!(mse < 1e-3, "zero-noise MSE {mse}");
    }

    #[test]
    fn universal_failure_is_an_error_not_a_number() {
        // a negative eta is invalid for the closed form; when every rep
        // fails there is no mean to report
        let dgp = DgpSpec::new(Design::hetero_logistic(), 3, 10, 11);
        let est = EstimatorConfig {
            model: ModelKind::Hetero,
            kernel: "gaussian(b=1.0)".to_string(),
            eta: EtaRule::fixed(-1.0),
        };
        assert!(mc_mse(&dgp, &est, 3).is_err());
    }

    #[test]
    fn partial_failures_are_recorded_and_excluded() {
        let outcomes = vec![
            Ok(1.0),
            Err(Error::numeric("fit", "did not converge")),
            Ok(3.0),
            Ok(2.0),
        ];
        let (per_rep, failures) = split_outcomes(outcomes);
        assert_eq!(per_rep, vec![Some(1.0), None, Some(3.0), Some(2.0)]);
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].rep, 1);
        assert!(failures[0].error.contains("did not converge"));
    }

    #[test]
    fn coverage_demands_pooled_model() {
        let dgp = DgpSpec::new(Design::beta_mixture(), 4, 10, 3);
        let grid = default_coverage_grid();
        let est = cheap_hetero_est();
        assert!(mc_coverage(&dgp, &est, &grid, 0.95, 4).is_err());
    }

    #[test]
    fn near_total_level_covers_everywhere() {
        let dgp = DgpSpec::new(Design::beta_mixture(), 12, 16, 13);
        let est = EstimatorConfig {
            model: ModelKind::Homo,
            kernel: "gaussian(b=1.0)".to_string(),
            eta: EtaRule::gcv(),
        };
        let grid = default_coverage_grid();
        let report = mc_coverage(&dgp, &est, &grid, 1.0 - 1e-6, 10).unwrap();
        let curve = report.payload.coverage.as_ref().unwrap();
        let scored: Vec<&CoveragePoint> =
            curve.points.iter().filter(|p| p.count > 0).collect();
        assert!(!scored.is_empty());
        let mean = scored.iter().map(|p| p.coverage).sum::<f64>() / scored.len() as f64;
        assert!(mean > 0.99, "mean coverage {mean}");
        for p in &scored {
            assert!(p.coverage >= 0.9, "coverage {} at x={}", p.coverage, p.x);
            let se = (p.coverage * (1.0 - p.coverage) / p.count as f64).sqrt();
            assert!((p.std_error - se).abs() < 1e-15);
        }
    }

    #[test]
    fn default_grid_is_hundred_points_on_unit_interval() {
        let g = default_coverage_grid();
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[99], 1.0);
        for w in g.windows(2) {
            assert!((w[1] - w[0] - 1.0 / 99.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_has_one_row_per_grid_point() {
        let dgp = DgpSpec::new(Design::beta_mixture(), 5, 12, 19);
        let est = EstimatorConfig {
            model: ModelKind::Homo,
            kernel: "gaussian(b=1.0)".to_string(),
            eta: EtaRule::fixed(0.05),
        };
        let grid = [0.2, 0.5, 0.8];
        let report = mc_coverage(&dgp, &est, &grid, 0.95, 3).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 1 + grid.len());
        assert!(lines[0].starts_with("task,design"));
    }

    #[test]
    fn eta_rule_serializes_compactly() {
        let g = serde_json::to_string(&EtaRule::gcv()).unwrap();
        assert_eq!(g, "\"gcv\"");
        let f = serde_json::to_string(&EtaRule::fixed(0.25)).unwrap();
        assert_eq!(f, "0.25");
        let back: EtaRule = serde_json::from_str("\"gcv\"").unwrap();
        assert_eq!(back, EtaRule::gcv());
        let back: EtaRule = serde_json::from_str("0.5").unwrap();
        assert_eq!(back, EtaRule::fixed(0.5));
    }
}
