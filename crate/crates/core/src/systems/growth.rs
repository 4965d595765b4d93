//! Numerical checks of the polynomial growth and coercivity hypotheses used
//! by the existence theory: `|f| ≤ c_f|x|^{p+θ}`, `‖g‖ ≤ c_g|x|^{p/2+θ}`,
//! `h ≥ c_h|x|^p`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::ControlAffineSystem;
use crate::error::{Error, Result};
use crate::sampling::sphere_directions;

/// Shell maxima below this are treated as zero and left out of the log fit.
const ZERO_NORM: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthCertificate {
    /// `p` in the coercivity bound, taken from the fit of `h` when it is
    /// coercive and otherwise the smallest `p` with `θ = 0`.
    pub exponent_p: f64,
    pub growth_theta: f64,
    pub f_exponent: f64,
    pub g_exponent: f64,
    /// Fitted exponent of the shell minimum of `h`; `None` if `h` vanishes
    /// somewhere on a sampled shell.
    pub h_exponent: Option<f64>,
    pub c_f: f64,
    pub c_g: f64,
    pub c_h: f64,
    pub rho: f64,
    pub h_coercive: bool,
    /// `θ ≥ 1`: no admissible `θ` exists for the fitted exponents.
    pub violation: bool,
    pub sample_radii: Vec<f64>,
    pub fit_residual: f64,
    pub decay_rate: Option<f64>,
    pub decay_gain: Option<f64>,
}

impl GrowthCertificate {
    /// Growth hypotheses hold on the sampled shells.
    pub fn passes(&self) -> bool {
        !self.violation && self.h_coercive
    }
}

/// Least-squares slope, intercept and RMS residual of `y` against `x`.
fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    (slope, intercept, (rss / n).sqrt())
}

fn log_fit(radii: &[f64], values: &[f64]) -> (f64, f64) {
    let (x, y): (Vec<f64>, Vec<f64>) = radii
        .iter()
        .zip(values)
        .filter(|(_, v)| **v > ZERO_NORM)
        .map(|(r, v)| (r.ln(), v.ln()))
        .unzip();
    if x.len() < 2 {
        return (0.0, 0.0);
    }
    let (slope, _, res) = fit_line(&x, &y);
    (slope, res)
}

/// Fits growth exponents of `|f|`, `‖g‖` (shell maxima) and `h` (shell
/// minima) over spheres of the given radii.
pub fn growth_certificate(
    sys: &dyn ControlAffineSystem,
    radii: &[f64],
    samples_per_shell: usize,
) -> Result<GrowthCertificate> {
    if radii.len() < 2 {
        return Err(Error::InsufficientSamples(format!("need at least 2 shells, got {}", radii.len())));
    }
    if samples_per_shell == 0 {
        return Err(Error::InsufficientSamples("samples_per_shell must be positive".into()));
    }
    if radii[0] <= 0.0 || radii.windows(2).any(|w| w[1] <= w[0]) || radii.iter().any(|r| !r.is_finite()) {
        return Err(Error::InsufficientSamples("radii must be positive and strictly increasing".into()));
    }
    let dirs = sphere_directions(sys.n(), samples_per_shell);
    let mut f_max = Vec::with_capacity(radii.len());
    let mut g_max = Vec::with_capacity(radii.len());
    let mut h_min = Vec::with_capacity(radii.len());
    for &r in radii {
        let (mut fm, mut gm, mut hm) = (0.0f64, 0.0f64, f64::INFINITY);
        for d in &dirs {
            let x: DVector<f64> = d * r;
            fm = fm.max(sys.f(&x).norm());
            gm = gm.max(sys.g(&x).norm());
            hm = hm.min(sys.h(&x));
        }
        f_max.push(fm);
        g_max.push(gm);
        h_min.push(hm);
    }

    let (f_exponent, f_res) = log_fit(radii, &f_max);
    let (g_exponent, g_res) = log_fit(radii, &g_max);

    // h is coercive beyond the smallest radius after which every shell minimum is positive.
    let first_positive = h_min.iter().rposition(|&v| v <= ZERO_NORM).map_or(0, |i| i + 1);
    let tail = &radii[first_positive..];
    let (h_exponent, h_res) = if tail.len() >= 2 {
        let (slope, res) = log_fit(tail, &h_min[first_positive..]);
        (Some(slope).filter(|s| *s > 0.0), res)
    } else {
        (None, 0.0)
    };
    let h_coercive = h_exponent.is_some();
    let exponent_p = match h_exponent {
        Some(p) => p,
        None => f_exponent.max(2.0 * g_exponent).max(0.0),
    };
    let growth_theta = (f_exponent - exponent_p).max(g_exponent - exponent_p / 2.0).max(0.0);
    let violation = growth_theta >= 1.0;

    let bound = |vals: &[f64], e: f64| {
        radii
            .iter()
            .zip(vals)
            .map(|(r, v)| v / r.powf(e))
            .fold(0.0f64, f64::max)
    };
    let c_f = bound(&f_max, exponent_p + growth_theta);
    let c_g = bound(&g_max, exponent_p / 2.0 + growth_theta);
    let (c_h, rho) = if h_coercive {
        let c = tail
            .iter()
            .zip(&h_min[first_positive..])
            .map(|(r, v)| v / r.powf(exponent_p))
            .fold(f64::INFINITY, f64::min);
        (c, tail[0])
    } else {
        (0.0, f64::NAN)
    };

    Ok(GrowthCertificate {
        exponent_p,
        growth_theta,
        f_exponent,
        g_exponent,
        h_exponent,
        c_f,
        c_g,
        c_h,
        rho,
        h_coercive,
        violation,
        sample_radii: radii.to_vec(),
        fit_residual: f_res.max(g_res).max(h_res),
        decay_rate: None,
        decay_gain: None,
    })
}

/// Geometric radii `r₀, r₀q, …` with `count` shells.
pub fn geometric_radii(r0: f64, ratio: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| r0 * ratio.powi(k as i32)).collect()
}
