//! Small least-squares fits used by the sweeps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `y ≈ intercept + slope · x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

pub fn line_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Domain(format!(
            "line fit needs two or more paired points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("line fit over a single abscissa".into()));
    }
    let slope = sxy / sxx;
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// Slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if ys.iter().chain(xs).any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    Ok(line_fit(&lx, &ly)?.slope)
}

/// `y ≈ a + b·T + c·T²` with its coefficient of determination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r2: f64,
}

/// Least-squares quadratic fit. Abscissae are rescaled by their maximum
/// before solving so the normal matrix stays well conditioned.
pub fn quadratic_fit(ts: &[f64], ys: &[f64]) -> Result<QuadFit> {
    if ts.len() != ys.len() || ts.len() < 3 {
        return Err(Error::Domain("quadratic fit needs three or more paired points".into()));
    }
    let scale = ts.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    if scale == 0.0 {
        return Err(Error::Domain("quadratic fit over zero abscissae".into()));
    }
    let design = DMatrix::from_fn(ts.len(), 3, |i, j| (ts[i] / scale).powi(j as i32));
    let rhs = DVector::from_column_slice(ys);
    let coef = design
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Domain(format!("quadratic fit failed: {e}")))?;
    let fitted = &design * &coef;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_res: f64 = fitted.iter().zip(ys).map(|(f, y)| (y - f).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(QuadFit {
        a: coef[0],
        b: coef[1] / scale,
        c: coef[2] / (scale * scale),
        r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic_is_recovered() {
        let ts = [200.0, 400.0, 800.0, 1600.0];
        let ys: Vec<f64> = ts.iter().map(|t| t * (t + 1.0) / 2.0).collect();
        let f = quadratic_fit(&ts, &ys).unwrap();
        assert!((f.c - 0.5).abs() < 1e-9);
        assert!((f.b - 0.5).abs() < 1e-6);
        assert!(f.r2 > 1.0 - 1e-12);
    }

    #[test]
    fn power_law_slope() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-1.5)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() + 1.5).abs() < 1e-12);
        assert!(loglog_slope(&xs, &[1.0, 0.0, 1.0, 1.0]).is_err());
    }
}
