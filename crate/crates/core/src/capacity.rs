//! Thermal capacity as a linear program over discrete measures on a compact
//! set, and capacity-density ratios.
//!
//! Atoms sit on the lattice `center + (i h, j h^2)`; constraint points sit on
//! the staggered lattice `center + ((i + 1/2) h / 3^m, (j + 1/2) h^2 / 9^m)`
//! near the atoms. Refining `m` nests the constraint sets, so the LP value can
//! only decrease.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::heatcore::gamma_diff;
use crate::lp::{self, DenseMatrix};
use crate::pargeo::{check_radius, hausdorff_content_unchecked, ParaPoint, PointCloudSet};
use crate::stochastic::{DomainSpec, WalkConfig};

/// Potential kernel of the capacity problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Free-space heat kernel `Γ`.
    Gamma,
    /// Green function of a domain estimated by walks; values enter with
    /// `±2` standard errors for the reported bracket.
    MonteCarlo { domain: DomainSpec, walk: WalkConfig },
}

impl KernelSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            KernelSpec::Gamma => "gamma",
            KernelSpec::MonteCarlo { .. } => "monte_carlo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityInstance {
    pub atoms: Vec<ParaPoint>,
    pub constraints: Vec<ParaPoint>,
    pub kernel: KernelSpec,
}

impl CapacityInstance {
    pub fn new(atoms: Vec<ParaPoint>, constraints: Vec<ParaPoint>, kernel: KernelSpec) -> Result<Self> {
        let inst = CapacityInstance { atoms, constraints, kernel };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.atoms.first().or(self.constraints.first()).map(|p| p.dim());
        for p in self.atoms.iter().chain(&self.constraints) {
            if Some(p.dim()) != n {
                return Err(LabError::DimensionMismatch { expected: n.unwrap_or(0), got: p.dim() });
            }
            if !p.is_finite() {
                return Err(LabError::invalid("grid point is not finite"));
            }
        }
        let key = |p: &ParaPoint| -> Vec<u64> { p.x.iter().chain(std::iter::once(&p.t)).map(|v| v.to_bits()).collect() };
        let atoms: HashSet<Vec<u64>> = self.atoms.iter().map(key).collect();
        if self.constraints.iter().any(|c| atoms.contains(&key(c))) {
            return Err(LabError::invalid("atom and constraint grids must be disjoint"));
        }
        Ok(())
    }

    /// All points mapped by `δ_ρ`.
    pub fn dilated(&self, rho: f64) -> Result<CapacityInstance> {
        check_radius(rho)?;
        let map = |p: &ParaPoint| ParaPoint { x: p.x.iter().map(|v| v * rho).collect(), t: p.t * rho * rho };
        Ok(CapacityInstance {
            atoms: self.atoms.iter().map(map).collect(),
            constraints: self.constraints.iter().map(map).collect(),
            kernel: self.kernel.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    pub value: f64,
    /// One optimal measure; optimal weights need not be unique.
    pub weights: Vec<f64>,
    /// Values with the Monte Carlo kernel shifted by `+2` and `-2` standard
    /// errors; `None` for the exact kernel.
    pub bracket: Option<(f64, f64)>,
    pub pivots: usize,
}

/// `max Σ w_i` subject to `Σ_i w_i K(c, a_i) <= 1` at every constraint point
/// and `w >= 0`.
pub fn thermal_capacity(inst: &CapacityInstance) -> Result<CapacityResult> {
    inst.validate()?;
    if inst.atoms.is_empty() {
        return Ok(CapacityResult { value: 0.0, weights: Vec::new(), bracket: None, pivots: 0 });
    }
    match &inst.kernel {
        KernelSpec::Gamma => {
            let rows: Vec<Vec<f64>> = inst
                .constraints
                .par_iter()
                .map(|c| inst.atoms.iter().map(|a| gamma_diff(&c.x, c.t, &a.x, a.t)).collect())
                .collect();
            let sol = solve(&rows, inst.atoms.len())?;
            Ok(CapacityResult { value: sol.objective, weights: sol.x, bracket: None, pivots: sol.pivots })
        }
        KernelSpec::MonteCarlo { domain, walk } => {
            let (mean, se) = green_matrix(domain, walk, &inst.atoms, &inst.constraints)?;
            let k = inst.atoms.len();
            let sol = solve(&mean, k)?;
            let shift = |s: f64| -> Vec<Vec<f64>> {
                mean.iter().zip(&se).map(|(m, e)| m.iter().zip(e).map(|(a, b)| (a + s * b).max(0.0)).collect()).collect()
            };
            let lo = solve(&shift(2.0), k)?.objective;
            let hi = solve(&shift(-2.0), k)?.objective;
            Ok(CapacityResult { value: sol.objective, weights: sol.x, bracket: Some((lo, hi)), pivots: sol.pivots })
        }
    }
}

/// Solves with the kernel normalized by its largest entry, so that the pivot
/// sequence does not depend on the overall scale.
fn solve(rows: &[Vec<f64>], k: usize) -> Result<lp::LpSolution> {
    let scale = rows.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut a = DenseMatrix::zeros(rows.len(), k);
    for (i, row) in rows.iter().enumerate() {
        for (dst, v) in a.data[i * k..(i + 1) * k].iter_mut().zip(row) {
            *dst = v / scale;
        }
    }
    let b = vec![1.0; rows.len()];
    let sol = lp::maximize(&vec![1.0; k], &a, &b);
    sol.map(|mut s| {
        s.objective /= scale;
        for w in s.x.iter_mut().chain(s.duals.iter_mut()) {
            *w /= scale;
        }
        s
    })
    .map_err(|e| match e {
        LabError::Unbounded(_) => {
            LabError::Unbounded("capacity LP is unbounded: some atom has no constraint point in its forward influence region".into())
        }
        other => other,
    })
}

/// Green kernel `G(c, a)` with standard errors: one batch of walks per
/// constraint point, reused for every atom.
fn green_matrix(domain: &DomainSpec, cfg: &WalkConfig, atoms: &[ParaPoint], constraints: &[ParaPoint]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    cfg.validate()?;
    domain.validate()?;
    if atoms.iter().any(|a| !domain.contains(a)) {
        return Err(LabError::PointNotAdmissible("capacity atoms must lie in the domain".into()));
    }
    let t_min = atoms.iter().map(|a| a.t).fold(f64::INFINITY, f64::min);
    let rows: Vec<(Vec<f64>, Vec<f64>)> = constraints
        .par_iter()
        .enumerate()
        .map(|(ci, c)| {
            let k = atoms.len();
            if !domain.contains(c) || c.t <= t_min {
                return (vec![0.0; k], vec![0.0; k]);
            }
            let exits = crate::stochastic::exit_points(domain, c, cfg, 5_000_000 + ci as u64, c.t - t_min);
            let nw = cfg.n_walks as f64;
            let mut mean = vec![0.0; k];
            let mut se = vec![0.0; k];
            for (j, a) in atoms.iter().enumerate() {
                let g0 = gamma_diff(&c.x, c.t, &a.x, a.t);
                let (mut s, mut s2) = (0.0, 0.0);
                for e in &exits {
                    let v = g0 - e.as_ref().map_or(0.0, |p| gamma_diff(&p.x, p.t, &a.x, a.t));
                    s += v;
                    s2 += v * v;
                }
                let m = s / nw;
                mean[j] = m.max(0.0);
                se[j] = if nw > 1.0 { ((s2 / nw - m * m).max(0.0) / (nw - 1.0)).sqrt() } else { 0.0 };
            }
            (mean, se)
        })
        .collect();
    Ok(rows.into_iter().unzip())
}

/// Lattice resolution of capacity grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    /// Atom cells per radius: `h = r / cells`.
    pub cells: usize,
    /// Ternary refinements of the constraint lattice.
    pub refine: u32,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions { cells: 4, refine: 0 }
    }
}

/// Atom and constraint lattices of a compact set.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSet {
    pub atoms: Vec<ParaPoint>,
    pub constraints: Vec<ParaPoint>,
    pub h: f64,
}

fn lattice_indices(n: usize, lo: i64, hi: i64) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        let mut next = Vec::new();
        for v in &out {
            for i in lo..=hi {
                let mut w = v.clone();
                w.push(i);
                next.push(w);
            }
        }
        out = next;
    }
    out
}

/// Grids for the closed set `{p : member(p)}` contained in
/// `B(center.x, half_width) × [t_lo, t_hi]`. Constraint points are kept when
/// one of the corners of their atom cell is an atom.
pub fn lattice_grids<F: Fn(&ParaPoint) -> bool>(
    center: &ParaPoint,
    half_width: f64,
    t_span: (f64, f64),
    h: f64,
    refine: u32,
    member: F,
) -> Result<GridSet> {
    check_radius(h)?;
    let n = center.dim();
    let h2 = h * h;
    let k_s = (half_width / h).floor() as i64 + 1;
    let (j_lo, j_hi) = (((t_span.0 - center.t) / h2).ceil() as i64 - 1, ((t_span.1 - center.t) / h2).floor() as i64 + 1);
    let spatial = lattice_indices(n, -k_s, k_s);
    let mut atoms = Vec::new();
    let mut keys: HashSet<Vec<i64>> = HashSet::new();
    for j in j_lo..=j_hi {
        for s in &spatial {
            let p = ParaPoint {
                x: center.x.iter().zip(s).map(|(c, i)| c + *i as f64 * h).collect(),
                t: center.t + j as f64 * h2,
            };
            if member(&p) {
                let mut key = s.clone();
                key.push(j);
                keys.insert(key);
                atoms.push(p);
            }
        }
    }
    let f_s = 3i64.pow(refine);
    let f_t = 9i64.pow(refine);
    let hs = h / f_s as f64;
    let ht = h2 / f_t as f64;
    let fine_spatial = lattice_indices(n, -(k_s + 1) * f_s, (k_s + 1) * f_s);
    let mut constraints = Vec::new();
    for jj in (j_lo - 1) * f_t..=(j_hi + 1) * f_t {
        // offsets measured in half fine cells: (2 jj + 1) / 2
        let t_coarse = (jj as f64 + 0.5) / f_t as f64;
        let jt = [t_coarse.floor() as i64, t_coarse.ceil() as i64];
        for s in &fine_spatial {
            let coarse: Vec<f64> = s.iter().map(|&i| (i as f64 + 0.5) / f_s as f64).collect();
            if !cell_has_atom(&coarse, jt, &keys) {
                continue;
            }
            constraints.push(ParaPoint {
                x: center.x.iter().zip(s).map(|(c, &i)| c + (i as f64 + 0.5) * hs).collect(),
                t: center.t + (jj as f64 + 0.5) * ht,
            });
        }
    }
    Ok(GridSet { atoms, constraints, h })
}

fn cell_has_atom(coarse: &[f64], jt: [i64; 2], keys: &HashSet<Vec<i64>>) -> bool {
    let n = coarse.len();
    for mask in 0..(1u32 << n) {
        let mut key: Vec<i64> = coarse
            .iter()
            .enumerate()
            .map(|(d, v)| if mask >> d & 1 == 1 { v.ceil() as i64 } else { v.floor() as i64 })
            .collect();
        for &j in &jt {
            key.push(j);
            if keys.contains(&key) {
                return true;
            }
            key.pop();
        }
    }
    false
}

fn slack(r: f64) -> f64 {
    1e-9 * r.max(1.0)
}

/// Grids of the closed truncated cylinder `B̄(ξ, r) × [t_ξ - (a r)^2, t_ξ - (b r)^2]`.
pub fn truncated_grids(center: &ParaPoint, r: f64, a: f64, b: f64, opts: &GridOptions) -> Result<GridSet> {
    check_radius(r)?;
    if !(0.0 <= b && b < a) {
        return Err(LabError::invalid(format!("need 0 <= b < a, got a={a}, b={b}")));
    }
    let (lo, hi) = (center.t - (a * r).powi(2), center.t - (b * r).powi(2));
    let eps = slack(r);
    lattice_grids(center, r, (lo, hi), r / opts.cells.max(1) as f64, opts.refine, |p| {
        p.sub(center).spatial_norm() <= r + eps && p.t >= lo - eps * r && p.t <= hi + eps * r
    })
}

/// Grids of the closed cylinder `C̄_r(center)`.
pub fn cylinder_grids(center: &ParaPoint, r: f64, opts: &GridOptions) -> Result<GridSet> {
    check_radius(r)?;
    let (lo, hi) = (center.t - r * r, center.t + r * r);
    let eps = slack(r);
    lattice_grids(center, r, (lo, hi), r / opts.cells.max(1) as f64, opts.refine, |p| {
        p.sub(center).spatial_norm() <= r + eps && p.t >= lo - eps * r && p.t <= hi + eps * r
    })
}

pub fn grid_capacity(g: &GridSet, kernel: KernelSpec) -> Result<CapacityResult> {
    thermal_capacity(&CapacityInstance::new(g.atoms.clone(), g.constraints.clone(), kernel)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdcDirection {
    Backward,
    Forward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdcRatio {
    pub r: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub ratio: f64,
    pub atoms_numerator: usize,
    pub atoms_denominator: usize,
    pub constraints: usize,
    pub kernel: String,
    /// No grid atom of the truncated cylinder lies outside the domain.
    pub empty_complement: bool,
}

/// Capacity of `R^-_a(ξ; r) ∩ Ω^c` against that of `R^-_a(ξ; r)` on shared
/// grids with the free-space kernel.
pub fn complement_capacity(domain: &DomainSpec, xi: &ParaPoint, r: f64, a: f64, opts: &GridOptions) -> Result<CdcRatio> {
    cdc_one(domain, xi, r, a, CdcDirection::Backward, opts)
}

fn cdc_one(domain: &DomainSpec, xi: &ParaPoint, r: f64, a: f64, dir: CdcDirection, opts: &GridOptions) -> Result<CdcRatio> {
    if !(a > 0.0 && a < 1.0) {
        return Err(LabError::invalid(format!("a={a} not in (0,1)")));
    }
    let g = truncated_grids(xi, r, 1.0, a, opts)?;
    // the forward cylinder is the time reflection of the backward one about t_ξ
    let actual = |p: &ParaPoint| match dir {
        CdcDirection::Backward => p.clone(),
        CdcDirection::Forward => ParaPoint { x: p.x.clone(), t: 2.0 * xi.t - p.t },
    };
    let outside: Vec<ParaPoint> = g.atoms.iter().filter(|p| !domain.contains(&actual(p))).cloned().collect();
    let den = thermal_capacity(&CapacityInstance::new(g.atoms.clone(), g.constraints.clone(), KernelSpec::Gamma)?)?.value;
    let empty = outside.is_empty();
    let num = if empty {
        0.0
    } else {
        thermal_capacity(&CapacityInstance::new(outside.clone(), g.constraints.clone(), KernelSpec::Gamma)?)?.value
    };
    Ok(CdcRatio {
        r,
        numerator: num,
        denominator: den,
        ratio: if den > 0.0 { num / den } else { 0.0 },
        atoms_numerator: outside.len(),
        atoms_denominator: g.atoms.len(),
        constraints: g.constraints.len(),
        kernel: KernelSpec::Gamma.tag().into(),
        empty_complement: empty,
    })
}

/// Capacity-density ratios at `ξ` for each radius.
pub fn cdc_ratios(
    domain: &DomainSpec,
    xi: &ParaPoint,
    radii: &[f64],
    a: f64,
    direction: CdcDirection,
    opts: &GridOptions,
) -> Result<Vec<CdcRatio>> {
    domain.validate()?;
    if domain.contains(xi) {
        return Err(LabError::PointNotAdmissible("ξ must lie on the boundary, not inside".into()));
    }
    radii.iter().map(|&r| cdc_one(domain, xi, r, a, direction, opts)).collect()
}

/// `ℋ^{n+s}_{p,∞}(K) / min(diam K, r)^s`, the content lower bound for the
/// capacity of `K ⊂ C̄_r`.
pub fn heat_ball_capacity_lower(k: &PointCloudSet, s: f64, r: f64) -> Result<f64> {
    check_radius(r)?;
    let n = k.dim().ok_or_else(|| LabError::Empty("K".into()))?;
    if !(s > 0.0 && s <= 2.0) {
        return Err(LabError::invalid(format!("s={s} not in (0, 2]")));
    }
    let diam = k.diameter();
    if diam == 0.0 {
        return Ok(0.0);
    }
    let content = hausdorff_content_unchecked(k, n as f64 + s, diam)?;
    Ok(content / diam.min(r).powf(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_atoms_give_zero() {
        let inst = CapacityInstance::new(vec![], vec![ParaPoint::origin(1)], KernelSpec::Gamma).unwrap();
        assert_eq!(thermal_capacity(&inst).unwrap().value, 0.0);
    }

    #[test]
    fn grids_are_disjoint_and_nested() {
        let o = ParaPoint::origin(1);
        let g0 = truncated_grids(&o, 1.0, 1.0, 0.5, &GridOptions { cells: 3, refine: 0 }).unwrap();
        let g1 = truncated_grids(&o, 1.0, 1.0, 0.5, &GridOptions { cells: 3, refine: 1 }).unwrap();
        assert_eq!(g0.atoms, g1.atoms);
        let close = |a: &ParaPoint, b: &ParaPoint| a.dist(b) < 1e-9;
        assert!(g0.constraints.iter().all(|c| g1.constraints.iter().any(|d| close(c, d))));
        assert!(g1.constraints.iter().all(|c| g0.atoms.iter().all(|a| !close(a, c))));
    }

    #[test]
    fn refinement_decreases_value() {
        let o = ParaPoint::origin(1);
        let v: Vec<f64> = (0..3)
            .map(|m| {
                let g = truncated_grids(&o, 1.0, 1.0, 0.5, &GridOptions { cells: 3, refine: m }).unwrap();
                grid_capacity(&g, KernelSpec::Gamma).unwrap().value
            })
            .collect();
        assert!(v[1] <= v[0] * (1.0 + 1e-9) && v[2] <= v[1] * (1.0 + 1e-9), "{v:?}");
    }

    #[test]
    fn missing_forward_constraints_is_unbounded() {
        let inst = CapacityInstance::new(vec![ParaPoint::new(&[0.0], 1.0)], vec![ParaPoint::new(&[0.0], 0.5)], KernelSpec::Gamma).unwrap();
        assert!(matches!(thermal_capacity(&inst), Err(LabError::Unbounded(_))));
    }

    #[test]
    fn overlapping_grids_rejected() {
        let p = ParaPoint::origin(1);
        assert!(CapacityInstance::new(vec![p.clone()], vec![p], KernelSpec::Gamma).is_err());
    }

    #[test]
    fn proxy_examples() {
        let single = PointCloudSet::new(vec![ParaPoint::new(&[0.1, 0.1], 0.0)]);
        assert_eq!(heat_ball_capacity_lower(&single, 2.0, 1.0).unwrap(), 0.0);
        assert!(heat_ball_capacity_lower(&single, 2.5, 1.0).is_err());
    }
}
