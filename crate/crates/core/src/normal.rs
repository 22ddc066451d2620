//! Univariate and bivariate normal tail probabilities.

use libm::erfc;

use crate::error::{Error, Result};
use crate::quad;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_677_939_946_059_934;

pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Upper tail `P{N > x}`.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

pub fn norm_cdf(x: f64) -> f64 {
    norm_sf(-x)
}

/// `P{N1 > x1, N2 > x2}` for a standard bivariate normal with correlation `rho`.
///
/// Computed as `int_{x1}^inf phi(z) P{N > (x2 - rho z)/sqrt(1 - rho^2)} dz` by adaptive
/// quadrature with a breakpoint where the conditional tail switches.
pub fn bvn_upper(x1: f64, x2: f64, rho: f64) -> Result<f64> {
    if rho.is_nan() || rho.abs() > 1.0 {
        return Err(Error::Domain(format!("correlation {rho} outside [-1, 1]")));
    }
    if x1.is_nan() || x2.is_nan() {
        return Err(Error::Domain("NaN threshold".into()));
    }
    if x1 == f64::NEG_INFINITY {
        return Ok(norm_sf(x2));
    }
    if x2 == f64::NEG_INFINITY {
        return Ok(norm_sf(x1));
    }
    if rho == 1.0 {
        return Ok(norm_sf(x1.max(x2)));
    }
    if rho == -1.0 {
        return Ok((norm_cdf(-x2) - norm_cdf(x1)).max(0.0));
    }
    // integrate over the coordinate with the larger threshold: shorter domain
    let (lo_thr, other) = if x1 >= x2 { (x1, x2) } else { (x2, x1) };
    const Z_MAX: f64 = 39.0;
    if lo_thr >= Z_MAX {
        return Ok(0.0);
    }
    let lo = lo_thr.max(-Z_MAX);
    let s = (1.0 - rho * rho).sqrt();
    let f = |z: f64| norm_pdf(z) * norm_sf((other - rho * z) / s);
    let mut breaks = Vec::new();
    if rho != 0.0 {
        let c = other / rho;
        breaks.extend([c - 8.0 * s, c, c + 8.0 * s]);
    }
    let q = quad::integrate_with_breaks(f, lo, Z_MAX, &breaks, 1e-300, 1e-12);
    Ok(q.value.clamp(0.0, 1.0))
}
