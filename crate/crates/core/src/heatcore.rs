//! Fundamental solution of the heat operator, heat-ball quadrature and
//! Cauchy-estimate diagnostics.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::calpoly::CaloricPolynomial;
use crate::error::{LabError, Result};
use crate::pargeo::{golden_section, HeatBall, ParaPoint};

/// Diffusivity and spatial dimension for `Γ_a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub a: f64,
    pub n: usize,
}

impl KernelParams {
    pub fn new(a: f64, n: usize) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(LabError::invalid(format!("diffusivity must be positive, got {a}")));
        }
        if n == 0 {
            return Err(LabError::invalid("spatial dimension must be at least 1"));
        }
        Ok(KernelParams { a, n })
    }

    pub fn unit(n: usize) -> Self {
        KernelParams { a: 1.0, n }
    }
}

/// `Γ_a(x, t) = (4π a t)^{-n/2} exp(-|x|^2 / (4 a t))` for `t > 0`, else 0.
pub fn gamma(q: &ParaPoint, params: &KernelParams) -> f64 {
    if q.t <= 0.0 {
        return 0.0;
    }
    let x2: f64 = q.x.iter().map(|v| v * v).sum();
    let at = params.a * q.t;
    (4.0 * PI * at).powf(-(params.n as f64) / 2.0) * (-x2 / (4.0 * at)).exp()
}

/// `Γ(x̄ - ȳ)` for the unit-diffusivity kernel without allocating.
#[inline]
pub fn gamma_diff(x: &[f64], t: f64, y: &[f64], s: f64) -> f64 {
    let dt = t - s;
    if dt <= 0.0 {
        return 0.0;
    }
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (4.0 * PI * dt).powf(-(x.len() as f64) / 2.0) * (-d2 / (4.0 * dt)).exp()
}

/// Constant `C_h` with `Γ(x̄) <= C_h π^{-n/2} ‖x̄‖^{-n}`, found by maximizing the
/// scale-free profile `(4τ)^{-n/2} e^{-1/(4τ)}` over `τ ∈ (0, 1]`.
pub fn heat_kernel_constant(n: usize) -> f64 {
    static CACHE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = CACHE.get_or_init(|| (0..=8).map(compute_heat_kernel_constant).collect());
    if n < table.len() {
        table[n]
    } else {
        compute_heat_kernel_constant(n)
    }
}

fn compute_heat_kernel_constant(n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let nf = n as f64;
    // maximize in log τ for a well-conditioned bracket
    let neg_log_profile = |lt: f64| {
        let tau = lt.exp();
        nf / 2.0 * (4.0 * tau).ln() + 1.0 / (4.0 * tau)
    };
    let (lt, _) = golden_section(neg_log_profile, -12.0, 0.0, 200);
    let tau = lt.exp();
    let coarse = (4.0 * tau).powf(-nf / 2.0) * (-1.0 / (4.0 * tau)).exp();
    let at_edge = 4f64.powf(-nf / 2.0) * (-0.25f64).exp();
    coarse.max(at_edge)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    let mf = m as f64;
    for i in 0..(m + 1) / 2 {
        let mut z = (PI * (i as f64 + 0.75) / (mf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=m {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = mf * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[m - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    (nodes, weights)
}

/// Gauss-Legendre rule mapped to `[lo, hi]`.
pub fn gauss_legendre_on(m: usize, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(m);
    let (mid, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0);
    x.iter().zip(&w).map(|(xi, wi)| (mid + half * xi, half * wi)).collect()
}

/// Node counts for [`mean_value_quadrature`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanValueRule {
    pub depth: usize,
    pub radial: usize,
    pub angular: usize,
}

impl Default for MeanValueRule {
    fn default() -> Self {
        MeanValueRule { depth: 128, radial: 64, angular: 32 }
    }
}

/// Unit directions and weights integrating over `S^{n-1}` (total `|S^{n-1}|`).
fn sphere_rule(n: usize, angular: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    match n {
        1 => Ok(vec![(vec![1.0], 1.0), (vec![-1.0], 1.0)]),
        2 => {
            let m = angular.max(1);
            let w = 2.0 * PI / m as f64;
            Ok((0..m)
                .map(|k| {
                    let th = 2.0 * PI * (k as f64 + 0.5) / m as f64;
                    (vec![th.cos(), th.sin()], w)
                })
                .collect())
        }
        3 => {
            let m = angular.max(1);
            let mut out = Vec::with_capacity(m * m);
            for (z, wz) in gauss_legendre_on(m, -1.0, 1.0) {
                let s = (1.0 - z * z).max(0.0).sqrt();
                for k in 0..2 * m {
                    let ph = PI * (k as f64 + 0.5) / m as f64;
                    out.push((vec![s * ph.cos(), s * ph.sin(), z], wz * PI / m as f64));
                }
            }
            Ok(out)
        }
        _ => Err(LabError::invalid(format!("heat-ball quadrature supports n <= 3, got {n}"))),
    }
}

/// Watson mean value `(4πρ)^{-n/2} ∫_E u(y, s) |x - y|^2 / (4 (t - s)^2) dy ds`
/// over the heat ball `hb` (or its adjoint).
///
/// The depth `u = |t - s|` is written `u = ρ e^{-v^2}`, so the slice radius is
/// `v sqrt(2 n u)`; each slice is integrated in polar coordinates.
pub fn mean_value_quadrature<F>(u: F, hb: &HeatBall, rule: &MeanValueRule) -> Result<f64>
where
    F: Fn(&ParaPoint) -> f64,
{
    let n = hb.center.dim();
    let nf = n as f64;
    let dirs = sphere_rule(n, rule.angular)?;
    let v_max = (80.0 / nf).sqrt() + 2.0;
    let depth_nodes = gauss_legendre_on(rule.depth.max(1), 0.0, v_max);
    let radial_nodes = gauss_legendre_on(rule.radial.max(1), 0.0, 1.0);
    let mut total = 0.0;
    let mut y = vec![0.0; n];
    for &(v, wv) in &depth_nodes {
        let depth = hb.rho * (-v * v).exp();
        if depth <= 0.0 {
            continue;
        }
        let radius = v * (2.0 * nf * depth).sqrt();
        let mut slice = 0.0;
        for &(s, ws) in &radial_nodes {
            let mut shell = 0.0;
            for (dir, wd) in &dirs {
                for (yi, di) in y.iter_mut().zip(dir) {
                    *yi = radius * s * di;
                }
                let val = u(&hb.point_at(&y, depth));
                if !val.is_finite() {
                    return Err(LabError::Numerical("non-finite integrand sample in heat ball".into()));
                }
                shell += wd * val;
            }
            slice += ws * s.powi(n as i32 + 1) * shell;
        }
        total += wv * 2.0 * v * depth * radius.powi(n as i32 + 2) / (4.0 * depth * depth) * slice;
    }
    Ok((4.0 * PI * hb.rho).powf(-nf / 2.0) * total)
}

/// Closed-cylinder sample used for sup-norm estimates: radial shells including
/// the lateral boundary, a direction grid, and time levels including both caps.
pub fn closed_cylinder_samples(n: usize, r: f64, m: usize) -> Vec<ParaPoint> {
    let m = m.max(2);
    let mut spatial: Vec<Vec<f64>> = Vec::new();
    match n {
        1 => {
            for i in 0..=2 * m {
                spatial.push(vec![-r + r * i as f64 / m as f64]);
            }
        }
        2 => {
            spatial.push(vec![0.0, 0.0]);
            for i in 1..=m {
                let rad = r * i as f64 / m as f64;
                let k = 4 * m;
                for j in 0..k {
                    let th = 2.0 * PI * j as f64 / k as f64;
                    spatial.push(vec![rad * th.cos(), rad * th.sin()]);
                }
            }
        }
        _ => {
            spatial.push(vec![0.0; n]);
            let dirs = crate::calpoly::sphere_points(n, 8 * m * m);
            for i in 1..=m {
                let rad = r * i as f64 / m as f64;
                for d in &dirs {
                    spatial.push(d.iter().map(|v| v * rad).collect());
                }
                for axis in 0..n {
                    for sign in [-1.0, 1.0] {
                        let mut e = vec![0.0; n];
                        e[axis] = sign * rad;
                        spatial.push(e);
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(spatial.len() * (2 * m + 1));
    for j in 0..=2 * m {
        let t = -r * r + r * r * j as f64 / m as f64;
        for y in &spatial {
            out.push(ParaPoint::new(y, t));
        }
    }
    out
}

/// Normalized Cauchy ratios `|D^{α,ℓ} h(0̄)| (R - r_fraction R)^m / sup_{C_R} |h|`
/// with `m = |α| + 2ℓ`, one per entry of `radii`.
pub fn cauchy_ratio(
    h: &CaloricPolynomial,
    alpha: &[u32],
    ell: u32,
    radii: &[f64],
    r_fraction: f64,
    samples: usize,
) -> Result<Vec<f64>> {
    if radii.is_empty() {
        return Err(LabError::Empty("radius grid".into()));
    }
    if h.is_zero() {
        return Err(LabError::invalid("polynomial is identically zero"));
    }
    if alpha.len() != h.n() {
        return Err(LabError::DimensionMismatch { expected: h.n(), got: alpha.len() });
    }
    if !(r_fraction > 0.0 && r_fraction < 1.0) {
        return Err(LabError::invalid(format!("r_fraction must lie in (0,1), got {r_fraction}")));
    }
    let deriv = h.derivative_at_origin(alpha, ell).abs();
    let m = alpha.iter().sum::<u32>() + 2 * ell;
    let mut out = Vec::with_capacity(radii.len());
    for &big_r in radii {
        crate::pargeo::check_radius(big_r)?;
        let sup = closed_cylinder_samples(h.n(), big_r, samples)
            .iter()
            .map(|p| h.eval(p).abs())
            .fold(0.0, f64::max);
        if sup <= 0.0 {
            return Err(LabError::Numerical(format!("h vanishes on the sample of C_{big_r}")));
        }
        out.push(deriv * (big_r - r_fraction * big_r).powi(m as i32) / sup);
    }
    Ok(out)
}
