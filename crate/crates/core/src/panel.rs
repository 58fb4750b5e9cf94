//! Balanced panel data and the augmented design built from it.
//!
//! A panel holds outcomes `Y` (N units by T periods), covariates `X`
//! (N by T by d), and observed factors `F1` (T by q1, first column an
//! intercept). The estimators regress on the augmented design
//! `Z_t = (f_{1t}', xbar_t')'` where `xbar_t` is the cross-section average
//! of the covariates at period `t`; averaging the covariates proxies the
//! unobserved factor space they load on.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PanelData {
    /// Outcomes, `N x T`.
    pub y: Array2<f64>,
    /// Covariates, `N x T x d`.
    pub x: Array3<f64>,
    /// Observed factors, `T x q1`; the first column is identically 1.
    pub f1: Array2<f64>,
    pub unit_labels: Vec<String>,
    pub time_labels: Vec<String>,
}

impl PanelData {
    pub fn new(y: Array2<f64>, x: Array3<f64>, f1: Array2<f64>) -> Result<Self> {
        let n = y.nrows();
        let t = y.ncols();
        // zero-padded so the lexicographic order used by the CSV reader
        // matches the index order
        let uw = n.saturating_sub(1).to_string().len();
        let tw = t.saturating_sub(1).to_string().len();
        let unit_labels = (0..n).map(|i| format!("{i:0uw$}")).collect();
        let time_labels = (0..t).map(|s| format!("{s:0tw$}")).collect();
        Self::with_labels(y, x, f1, unit_labels, time_labels)
    }

    pub fn with_labels(
        y: Array2<f64>,
        x: Array3<f64>,
        f1: Array2<f64>,
        unit_labels: Vec<String>,
        time_labels: Vec<String>,
    ) -> Result<Self> {
        let n = y.nrows();
        let t = y.ncols();
        let (xn, xt, d) = x.dim();
        if n == 0 || t == 0 {
            return Err(Error::input("panel has no observations"));
        }
        if xn != n || xt != t {
            return Err(Error::input(format!(
                "covariate array is {xn}x{xt}x{d}, outcomes are {n}x{t}"
            )));
        }
        if d == 0 {
            return Err(Error::input("panel needs at least one covariate"));
        }
        if f1.nrows() != t {
            return Err(Error::input(format!(
                "observed factors have {} periods, outcomes have {t}",
                f1.nrows()
            )));
        }
        let q1 = f1.ncols();
        if q1 == 0 {
            return Err(Error::input("observed factors need at least the intercept column"));
        }
        for ti in 0..t {
            if f1[(ti, 0)] != 1.0 {
                return Err(Error::input(format!(
                    "first observed-factor column must be identically 1 (period {ti} has {})",
                    f1[(ti, 0)]
                )));
            }
        }
        if t < q1 + d + 1 {
            return Err(Error::input(format!(
                "panel needs T >= q1 + d + 1 periods (T={t}, q1={q1}, d={d}); the factor \
                 projection would leave no residual degrees of freedom"
            )));
        }
        if unit_labels.len() != n || time_labels.len() != t {
            return Err(Error::input("label lengths do not match panel dimensions"));
        }
        for (what, arr) in [("outcome", y.iter().find(|v| !v.is_finite())), (
            "covariate",
            x.iter().find(|v| !v.is_finite()),
        ), ("factor", f1.iter().find(|v| !v.is_finite()))]
        {
            if arr.is_some() {
                return Err(Error::input(format!("panel contains a non-finite {what} value")));
            }
        }
        Ok(PanelData { y, x, f1, unit_labels, time_labels })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn t_len(&self) -> usize {
        self.y.ncols()
    }

    pub fn d(&self) -> usize {
        self.x.dim().2
    }

    pub fn q1(&self) -> usize {
        self.f1.ncols()
    }

    pub fn unit_y(&self, i: usize) -> ArrayView1<'_, f64> {
        self.y.row(i)
    }

    pub fn unit_x(&self, i: usize) -> ArrayView2<'_, f64> {
        self.x.slice(s![i, .., ..])
    }

    /// Covariates of all units stacked unit-major: rows `i*T + t`.
    pub fn stacked_x(&self) -> Array2<f64> {
        let (n, t, d) = self.x.dim();
        let mut out = Array2::zeros((n * t, d));
        for i in 0..n {
            out.slice_mut(s![i * t..(i + 1) * t, ..]).assign(&self.unit_x(i));
        }
        out
    }

    /// Outcomes stacked unit-major, matching [`PanelData::stacked_x`].
    pub fn stacked_y(&self) -> Array1<f64> {
        let (n, t) = self.y.dim();
        let mut out = Array1::zeros(n * t);
        for i in 0..n {
            out.slice_mut(s![i * t..(i + 1) * t]).assign(&self.y.row(i));
        }
        out
    }

    /// Cross-section averages `xbar_t`, `T x d`.
    pub fn xbar(&self) -> Array2<f64> {
        let (n, t, d) = self.x.dim();
        let mut out = Array2::zeros((t, d));
        for i in 0..n {
            out += &self.unit_x(i);
        }
        out / n as f64
    }

    /// Augmented design `Z` (`T x (q1 + d)`): observed factors, then
    /// cross-section covariate averages.
    pub fn design_matrix(&self) -> Array2<f64> {
        let t = self.t_len();
        let q1 = self.q1();
        let d = self.d();
        let xb = self.xbar();
        let mut z = Array2::zeros((t, q1 + d));
        z.slice_mut(s![.., ..q1]).assign(&self.f1);
        z.slice_mut(s![.., q1..]).assign(&xb);
        debug_assert_eq!(z.ncols(), q1 + d);
        z
    }

    /// Human-readable labels for the columns of [`PanelData::design_matrix`].
    pub fn design_labels(&self) -> Vec<String> {
        let mut labels = Vec::with_capacity(self.q1() + self.d());
        labels.push("intercept".to_string());
        for j in 1..self.q1() {
            labels.push(format!("f1[{j}]"));
        }
        for j in 0..self.d() {
            labels.push(format!("xbar[{j}]"));
        }
        labels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_panel() -> PanelData {
        // N=2, T=4, d=1, q1=1
        let y = array![[1.0, 2.0, 3.0, 4.0], [0.5, 1.5, 2.5, 3.5]];
        let mut x = Array3::zeros((2, 4, 1));
        for i in 0..2 {
            for t in 0..4 {
                x[(i, t, 0)] = (i + 1) as f64 * t as f64;
            }
        }
        let f1 = Array2::from_elem((4, 1), 1.0);
        PanelData::new(y, x, f1).unwrap()
    }

    #[test]
    fn design_stacks_factors_then_averages() {
        let p = small_panel();
        let z = p.design_matrix();
        assert_eq!(z.dim(), (4, 2));
        for t in 0..4 {
            assert_eq!(z[(t, 0)], 1.0);
            // mean of (1*t, 2*t)
            assert!((z[(t, 1)] - 1.5 * t as f64).abs() < 1e-15);
        }
        assert_eq!(p.design_labels(), vec!["intercept", "xbar[0]"]);
    }

    #[test]
    fn stacking_is_unit_major() {
        let p = small_panel();
        let sy = p.stacked_y();
        assert_eq!(sy.len(), 8);
        assert_eq!(sy[0], 1.0);
        assert_eq!(sy[4], 0.5);
        let sx = p.stacked_x();
        assert_eq!(sx[(5, 0)], 2.0);
    }

    #[test]
    fn rejects_intercept_violation() {
        let y = array![[1.0, 2.0, 3.0, 4.0]];
        let x = Array3::zeros((1, 4, 1));
        let mut f1 = Array2::from_elem((4, 1), 1.0);
        f1[(2, 0)] = 0.0;
        assert!(PanelData::new(y, x, f1).is_err());
    }

    #[test]
    fn rejects_degenerate_t() {
        // T = q1 + d leaves a zero projection; T = q1 + d + 1 is the minimum
        let y = array![[1.0, 2.0]];
        let x = Array3::zeros((1, 2, 1));
        let f1 = Array2::from_elem((2, 1), 1.0);
        assert!(PanelData::new(y, x, f1).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let y = array![[1.0, f64::NAN, 3.0, 4.0]];
        let x = Array3::zeros((1, 4, 1));
        let f1 = Array2::from_elem((4, 1), 1.0);
        assert!(PanelData::new(y, x, f1).is_err());
    }
}
