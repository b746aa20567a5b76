//! Plug-in variance and covariance of the two estimators from per-sample
//! influence-function values.
//!
//! With centered influence values `phi_u(Z_i)`, `phi_b(Z_i)` for `i = 1..n`,
//! the asymptotic (co)variances are estimated by `n^-1 sum phi_u^2`,
//! `n^-1 sum phi_b^2`, `n^-1 sum phi_u phi_b`, and the finite-sample moments
//! of the estimators by a further factor `n^-1`. The divisor is `n`, not
//! `n - 1`, and values are not re-centered here.

use crate::combiner::MomentEstimates;
use crate::error::{Error, Result};
use crate::stats::CompensatedSum;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfluenceSample {
    pub phi_u: f64,
    pub phi_b: f64,
}

/// Ordered influence values of one dataset; at least two samples.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluencePanel {
    samples: Vec<InfluenceSample>,
}

impl InfluencePanel {
    pub fn new(samples: Vec<InfluenceSample>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "influence panel needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        if let Some(s) = samples.iter().find(|s| !(s.phi_u.is_finite() && s.phi_b.is_finite())) {
            return Err(Error::InvalidArgument(format!("non-finite influence value {s:?}")));
        }
        Ok(InfluencePanel { samples })
    }

    pub fn from_pairs<I: IntoIterator<Item = (f64, f64)>>(pairs: I) -> Result<Self> {
        Self::new(
            pairs
                .into_iter()
                .map(|(phi_u, phi_b)| InfluenceSample { phi_u, phi_b })
                .collect(),
        )
    }

    pub fn samples(&self) -> &[InfluenceSample] {
        &self.samples
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }
}

/// Variance/covariance estimates of `theta_u`, `theta_b` from an influence panel.
///
/// Fails with [`Error::Degenerate`] when the estimated variance of
/// `theta_u - theta_b` is zero and with [`Error::InvalidMoments`] when the
/// estimated variance of `theta_u` is zero.
pub fn estimate_moments(panel: &InfluencePanel) -> Result<MomentEstimates> {
    let (mut suu, mut sbb, mut sub) = (CompensatedSum::new(), CompensatedSum::new(), CompensatedSum::new());
    for s in &panel.samples {
        suu.add(s.phi_u * s.phi_u);
        sbb.add(s.phi_b * s.phi_b);
        sub.add(s.phi_u * s.phi_b);
    }
    let n = panel.n() as f64;
    let n2 = n * n;
    MomentEstimates::new(suu.value() / n2, sbb.value() / n2, sub.value() / n2)
}

/// Centered influence value of an inverse-probability-weighted difference in
/// means for one unit:
/// `(y - mu_hat(t)) (t / e - (1 - t) / (1 - e)) + (mu1 - mu0) - theta_hat`.
pub fn ipw_influence(
    y: f64,
    treated: bool,
    e_hat: f64,
    mu1_hat: f64,
    mu0_hat: f64,
    theta_hat: f64,
) -> Result<f64> {
    if !(e_hat > 0.0 && e_hat < 1.0) {
        return Err(Error::Positivity(format!(
            "treatment probability {e_hat} outside (0, 1)"
        )));
    }
    let (resid, weight) = if treated {
        (y - mu1_hat, 1.0 / e_hat)
    } else {
        (y - mu0_hat, -1.0 / (1.0 - e_hat))
    };
    Ok(resid * weight + (mu1_hat - mu0_hat) - theta_hat)
}
