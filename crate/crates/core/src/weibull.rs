//! Two-parameter Weibull distribution: maximum-likelihood fitting and the
//! probability-of-inclusion kernel used by extreme vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ITER: usize = 200;
/// Required residual of the shape equation at the returned estimate.
const STATIONARITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullParams {
    shape: f64,
    scale: f64,
}

impl WeibullParams {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0 && scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Weibull parameters must be positive and finite (shape {shape}, scale {scale})"
            )));
        }
        Ok(WeibullParams { shape, scale })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `1 - exp(-(x/scale)^shape)`.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        check_non_negative(x, "cdf argument")?;
        Ok(-(-self.reduced(x)).exp_m1())
    }

    /// Probability of inclusion at `distance`: `exp(-(distance/scale)^shape)`.
    pub fn psi(&self, distance: f64) -> Result<f64> {
        check_non_negative(distance, "distance")?;
        Ok(self.psi_unchecked(distance))
    }

    /// [`psi`](Self::psi) for callers that already hold a valid distance.
    #[inline]
    pub(crate) fn psi_unchecked(&self, distance: f64) -> f64 {
        (-self.reduced(distance)).exp()
    }

    #[inline]
    fn reduced(&self, x: f64) -> f64 {
        (x / self.scale).powf(self.shape)
    }

    /// `psi(distance) >= level`, decided on the reduced distance
    /// `(distance/scale)^shape <= -ln(level)` so that `level = 1` admits only
    /// distance 0 even where `psi` would round to 1.
    #[inline]
    pub(crate) fn includes_at(&self, distance: f64, level: f64) -> bool {
        self.reduced(distance) <= -level.ln()
    }

    pub fn log_likelihood(&self, samples: &[f64]) -> f64 {
        let (k, lam) = (self.shape, self.scale);
        samples
            .iter()
            .map(|&x| k.ln() - lam.ln() + (k - 1.0) * (x / lam).ln() - (x / lam).powf(k))
            .sum()
    }
}

fn check_non_negative(x: f64, what: &str) -> Result<()> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "{what} must be non-negative, got {x}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeibullFit {
    pub params: WeibullParams,
    pub log_likelihood: f64,
    pub iterations: usize,
}

/// Maximum-likelihood fit of shape and scale.
///
/// Solves the profile equation for the shape,
/// `sum(x^k ln x) / sum(x^k) - 1/k - mean(ln x) = 0`,
/// with Newton steps kept inside a sign-change bracket (bisection or bracket
/// expansion when a step leaves it), starting from the moment estimate
/// `pi / (sqrt 6 * sd(ln x))`. The scale follows in closed form as
/// `(sum(x^k) / n)^(1/k)`. Powers are evaluated relative to the largest
/// sample so large shapes do not overflow.
pub fn fit_mle(samples: &[f64]) -> Result<WeibullFit> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "Weibull fit needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if let Some(bad) = samples.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "Weibull samples must be positive and finite, got {bad}"
        )));
    }
    if samples.iter().all(|&x| x == samples[0]) {
        return Err(Error::Degenerate(
            "all Weibull samples are equal; the shape diverges".into(),
        ));
    }

    let n = samples.len() as f64;
    let logs: Vec<f64> = samples.iter().map(|x| x.ln()).collect();
    let log_max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logs.iter().map(|l| l - log_max).collect();
    let mean_shifted = shifted.iter().sum::<f64>() / n;
    let var = shifted
        .iter()
        .map(|s| (s - mean_shifted).powi(2))
        .sum::<f64>()
        / n;
    if var == 0.0 {
        return Err(Error::Degenerate("log-samples have zero variance".into()));
    }

    // Residual of the shape equation and its derivative.
    let equation = |k: f64| -> (f64, f64) {
        let (mut sw, mut sws, mut swss) = (0.0, 0.0, 0.0);
        for &s in &shifted {
            let w = (k * s).exp();
            sw += w;
            sws += w * s;
            swss += w * s * s;
        }
        let m1 = sws / sw;
        let m2 = swss / sw;
        (m1 - 1.0 / k - mean_shifted, (m2 - m1 * m1) + 1.0 / (k * k))
    };

    let mut shape = std::f64::consts::PI / (6f64.sqrt() * var.sqrt());
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=MAX_ITER {
        iterations = it;
        let (g, dg) = equation(shape);
        if !g.is_finite() {
            return Err(Error::NoConvergence {
                what: format!("Weibull shape equation not finite at shape {shape}"),
                iterations: it,
            });
        }
        if g.abs() <= 1e-13 {
            converged = true;
            break;
        }
        if g < 0.0 {
            lo = lo.max(shape);
        } else {
            hi = hi.min(shape);
        }
        let newton = shape - g / dg;
        let next = if newton > lo && newton < hi && newton.is_finite() {
            newton
        } else if hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            2.0 * shape
        };
        let step = (next - shape).abs();
        shape = next;
        if step <= 1e-15 * shape {
            converged = equation(shape).0.abs() <= STATIONARITY_TOL;
            break;
        }
    }
    if !converged && equation(shape).0.abs() > STATIONARITY_TOL {
        return Err(Error::NoConvergence {
            what: "Weibull shape MLE".into(),
            iterations,
        });
    }

    let mean_w = shifted.iter().map(|s| (shape * s).exp()).sum::<f64>() / n;
    let scale = (log_max + mean_w.ln() / shape).exp();
    let params = WeibullParams::new(shape, scale)
        .map_err(|_| Error::Degenerate(format!("fit produced shape {shape}, scale {scale}")))?;
    Ok(WeibullFit {
        params,
        log_likelihood: params.log_likelihood(samples),
        iterations,
    })
}
