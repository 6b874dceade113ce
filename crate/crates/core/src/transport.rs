//! Kantorovich-Rubinshtein norm of signed measures on a bounded spatial
//! domain and its primal form `Wb_1`, transport with mass annihilation at the
//! boundary. Costs are Euclidean.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::flow::{self, End};
use crate::measures::lipschitz_lp_full;

/// Bounded domains with closed-form distance to the boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpatialDomain {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Convex polygon in the plane, vertices in either orientation.
    Polygon { vertices: Vec<[f64; 2]> },
    Interval { lo: f64, hi: f64 },
}

impl SpatialDomain {
    pub fn unit_square() -> Self {
        SpatialDomain::Box { lo: vec![0.0, 0.0], hi: vec![1.0, 1.0] }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SpatialDomain::Box { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return Err(LabError::invalid("box corners must have equal, positive length"));
                }
                if lo.iter().zip(hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b)) {
                    return Err(LabError::invalid("box needs lo < hi in every coordinate"));
                }
            }
            SpatialDomain::Interval { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(LabError::invalid("interval needs lo < hi"));
                }
            }
            SpatialDomain::Polygon { vertices } => {
                if vertices.len() < 3 {
                    return Err(LabError::invalid("polygon needs at least 3 vertices"));
                }
                let k = vertices.len();
                let mut sign = 0.0;
                for i in 0..k {
                    let (a, b, c) = (vertices[i], vertices[(i + 1) % k], vertices[(i + 2) % k]);
                    let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
                    if !cross.is_finite() || cross == 0.0 || (sign != 0.0 && cross * sign < 0.0) {
                        return Err(LabError::invalid("polygon must be strictly convex"));
                    }
                    sign = cross.signum();
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            SpatialDomain::Box { lo, .. } => lo.len(),
            SpatialDomain::Polygon { .. } => 2,
            SpatialDomain::Interval { .. } => 1,
        }
    }

    /// Signed distance to the boundary, positive inside.
    pub fn signed_boundary_distance(&self, x: &[f64]) -> f64 {
        match self {
            SpatialDomain::Box { lo, hi } => {
                lo.iter().zip(hi).zip(x).map(|((a, b), v)| (v - a).min(b - v)).fold(f64::INFINITY, f64::min)
            }
            SpatialDomain::Interval { lo, hi } => (x[0] - lo).min(hi - x[0]),
            SpatialDomain::Polygon { vertices } => {
                let k = vertices.len();
                let area2: f64 = (0..k)
                    .map(|i| {
                        let (a, b) = (vertices[i], vertices[(i + 1) % k]);
                        a[0] * b[1] - b[0] * a[1]
                    })
                    .sum();
                let orient = area2.signum();
                (0..k)
                    .map(|i| {
                        let (a, b) = (vertices[i], vertices[(i + 1) % k]);
                        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
                        let len = (ex * ex + ey * ey).sqrt();
                        orient * (ex * (x[1] - a[1]) - ey * (x[0] - a[0])) / len
                    })
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && self.signed_boundary_distance(x) > 0.0
    }

    /// `dist(x, ∂Ω)` for `x` inside.
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        self.signed_boundary_distance(x).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialAtom {
    pub x: Vec<f64>,
    pub w: f64,
}

/// Signed atoms inside a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportInstance {
    pub domain: SpatialDomain,
    pub atoms: Vec<SpatialAtom>,
}

impl TransportInstance {
    pub fn new(domain: SpatialDomain, atoms: Vec<SpatialAtom>) -> Result<Self> {
        let inst = TransportInstance { domain, atoms };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        check_atoms(&self.atoms, &self.domain, true)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let inst: TransportInstance = serde_json::from_str(s)?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Split into the positive and negative parts.
    pub fn jordan(&self) -> (Vec<SpatialAtom>, Vec<SpatialAtom>) {
        let pos = self.atoms.iter().filter(|a| a.w > 0.0).cloned().collect();
        let neg = self.atoms.iter().filter(|a| a.w < 0.0).map(|a| SpatialAtom { x: a.x.clone(), w: -a.w }).collect();
        (pos, neg)
    }
}

fn check_atoms(atoms: &[SpatialAtom], domain: &SpatialDomain, signed: bool) -> Result<()> {
    for a in atoms {
        if a.x.len() != domain.dim() {
            return Err(LabError::DimensionMismatch { expected: domain.dim(), got: a.x.len() });
        }
        if !a.w.is_finite() || a.x.iter().any(|v| !v.is_finite()) {
            return Err(LabError::invalid("atom has non-finite data"));
        }
        if !signed && a.w < 0.0 {
            return Err(LabError::SignedMeasure);
        }
        if !domain.contains(&a.x) {
            return Err(LabError::invalid(format!("atom {:?} is not inside the domain", a.x)));
        }
    }
    Ok(())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrResult {
    pub value: f64,
    /// Optimal potential at each atom, in input order.
    pub phi: Vec<f64>,
}

/// `‖μ‖_KR`: the supremum of `Σ φ_i μ_i` over potentials that are
/// 1-Lipschitz between atoms and bounded by the distance to the boundary.
pub fn kr_norm_dual(inst: &TransportInstance) -> Result<KrResult> {
    inst.validate()?;
    let atoms = &inst.atoms;
    if atoms.is_empty() {
        return Ok(KrResult { value: 0.0, phi: Vec::new() });
    }
    let m: Vec<f64> = atoms.iter().map(|a| a.w).collect();
    let caps: Vec<f64> = atoms.iter().map(|a| inst.domain.boundary_distance(&a.x)).collect();
    let (value, phi) = lipschitz_lp_full(&m, &caps, |i, j| euclid(&atoms[i].x, &atoms[j].x))?;
    Ok(KrResult { value, phi })
}

/// Endpoint of a plan entry: an atom index or the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanEnd {
    Atom(usize),
    Boundary,
}

impl From<End> for PlanEnd {
    fn from(e: End) -> Self {
        match e {
            End::Atom(i) => PlanEnd::Atom(i),
            End::Boundary => PlanEnd::Boundary,
        }
    }
}

impl std::fmt::Display for PlanEnd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlanEnd::Atom(i) => write!(f, "{i}"),
            PlanEnd::Boundary => write!(f, "boundary"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub from: PlanEnd,
    pub to: PlanEnd,
    pub flow: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wb1Result {
    pub value: f64,
    pub plan: Vec<PlanEntry>,
    /// Optimal dual potentials on the `μ` and `ν` atoms.
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl Wb1Result {
    /// Plan CSV with columns `i,j,flow,cost`.
    pub fn write_plan_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "i,j,flow,cost")?;
        for e in &self.plan {
            writeln!(w, "{},{},{},{}", e.from, e.to, e.flow, e.cost)?;
        }
        Ok(())
    }
}

/// `Wb_1(μ, ν)` as min-cost flow with a boundary node that supplies or absorbs
/// any amount of mass at cost `dist(·, ∂Ω)`.
pub fn wb1_primal(mu: &[SpatialAtom], nu: &[SpatialAtom], domain: &SpatialDomain) -> Result<Wb1Result> {
    domain.validate()?;
    check_atoms(mu, domain, false)?;
    check_atoms(nu, domain, false)?;
    let sol = flow::solve(
        &mu.iter().map(|a| a.w).collect::<Vec<_>>(),
        &nu.iter().map(|a| a.w).collect::<Vec<_>>(),
        |i, j| euclid(&mu[i].x, &nu[j].x),
        &mu.iter().map(|a| domain.boundary_distance(&a.x)).collect::<Vec<_>>(),
        &nu.iter().map(|a| domain.boundary_distance(&a.x)).collect::<Vec<_>>(),
    )?;
    let plan = sol
        .flows
        .iter()
        .map(|f| PlanEntry { from: f.from.into(), to: f.to.into(), flow: f.amount, cost: f.cost })
        .collect();
    Ok(Wb1Result { value: sol.value, plan, phi: sol.phi, psi: sol.psi })
}

/// A violated dual constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub i: PlanEnd,
    pub j: PlanEnd,
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub feasible: bool,
    /// Primal value minus the dual objective of the candidate.
    pub gap: f64,
    pub violations: Vec<Violation>,
}

/// Check `φ(x_i) + ψ(y_j) <= |x_i - y_j|`, `φ(x_i) <= dist(x_i, ∂Ω)` and
/// `ψ(y_j) <= dist(y_j, ∂Ω)`, and report the duality gap of the pair.
pub fn kantorovich_pair_check(
    mu: &[SpatialAtom],
    nu: &[SpatialAtom],
    domain: &SpatialDomain,
    phi: &[f64],
    psi: &[f64],
    tol: f64,
) -> Result<PairCheck> {
    if phi.len() != mu.len() || psi.len() != nu.len() {
        return Err(LabError::invalid("one potential value per atom is required"));
    }
    let primal = wb1_primal(mu, nu, domain)?.value;
    let mut violations = Vec::new();
    for (i, a) in mu.iter().enumerate() {
        let e = phi[i] - domain.boundary_distance(&a.x);
        if e > tol {
            violations.push(Violation { i: PlanEnd::Atom(i), j: PlanEnd::Boundary, excess: e });
        }
        for (j, b) in nu.iter().enumerate() {
            let e = phi[i] + psi[j] - euclid(&a.x, &b.x);
            if e > tol {
                violations.push(Violation { i: PlanEnd::Atom(i), j: PlanEnd::Atom(j), excess: e });
            }
        }
    }
    for (j, b) in nu.iter().enumerate() {
        let e = psi[j] - domain.boundary_distance(&b.x);
        if e > tol {
            violations.push(Violation { i: PlanEnd::Boundary, j: PlanEnd::Atom(j), excess: e });
        }
    }
    let dual: f64 = mu.iter().zip(phi).map(|(a, p)| a.w * p).sum::<f64>() + nu.iter().zip(psi).map(|(b, q)| b.w * q).sum::<f64>();
    Ok(PairCheck { feasible: violations.is_empty(), gap: primal - dual, violations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: &[f64], w: f64) -> SpatialAtom {
        SpatialAtom { x: x.to_vec(), w }
    }

    #[test]
    fn kr_examples() {
        let sq = SpatialDomain::unit_square();
        let empty = TransportInstance::new(sq.clone(), vec![]).unwrap();
        assert_eq!(kr_norm_dual(&empty).unwrap().value, 0.0);
        let dirac = TransportInstance::new(sq.clone(), vec![at(&[0.5, 0.5], 1.0)]).unwrap();
        assert!((kr_norm_dual(&dirac).unwrap().value - 0.5).abs() < 1e-12);
        let pair = TransportInstance::new(sq.clone(), vec![at(&[0.5, 0.5], 1.0), at(&[0.6, 0.5], -1.0)]).unwrap();
        assert!((kr_norm_dual(&pair).unwrap().value - 0.1).abs() < 1e-12);
        let far = TransportInstance::new(sq, vec![at(&[0.1, 0.5], 1.0), at(&[0.9, 0.5], -1.0)]).unwrap();
        assert!((kr_norm_dual(&far).unwrap().value - 0.2).abs() < 1e-12);
    }

    #[test]
    fn wb1_examples() {
        let sq = SpatialDomain::unit_square();
        let mu = vec![at(&[0.5, 0.5], 1.0)];
        let r = wb1_primal(&mu, &[], &sq).unwrap();
        assert!((r.value - 0.5).abs() < 1e-12);
        assert_eq!(r.plan.len(), 1);
        assert_eq!(r.plan[0].to, PlanEnd::Boundary);
        assert_eq!(wb1_primal(&mu, &mu, &sq).unwrap().value, 0.0);
        assert!(matches!(wb1_primal(&[at(&[0.5, 0.5], -1.0)], &[], &sq), Err(LabError::SignedMeasure)));
        let mut buf = Vec::new();
        r.write_plan_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "i,j,flow,cost\n0,boundary,1,0.5\n");
    }

    #[test]
    fn pair_check_examples() {
        let sq = SpatialDomain::unit_square();
        let mu = vec![at(&[0.3, 0.5], 1.0)];
        let nu = vec![at(&[0.6, 0.5], 0.5)];
        let primal = wb1_primal(&mu, &nu, &sq).unwrap();
        let zero = kantorovich_pair_check(&mu, &nu, &sq, &[0.0], &[0.0], 1e-12).unwrap();
        assert!(zero.feasible && (zero.gap - primal.value).abs() < 1e-12);
        let opt = kantorovich_pair_check(&mu, &nu, &sq, &primal.phi, &primal.psi, 1e-9).unwrap();
        assert!(opt.feasible && opt.gap.abs() < 1e-6, "{opt:?}");
        let bad = kantorovich_pair_check(&mu, &nu, &sq, &[0.2], &[0.2], 1e-12).unwrap();
        assert!(!bad.feasible);
        assert_eq!(bad.violations[0].i, PlanEnd::Atom(0));
        assert_eq!(bad.violations[0].j, PlanEnd::Atom(0));
    }

    #[test]
    fn domains() {
        let tri = SpatialDomain::Polygon { vertices: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]] };
        tri.validate().unwrap();
        assert!((tri.boundary_distance(&[0.2, 0.2]) - 0.2).abs() < 1e-12);
        let cw = SpatialDomain::Polygon { vertices: vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]] };
        assert!((cw.boundary_distance(&[0.2, 0.2]) - 0.2).abs() < 1e-12);
        assert!(!tri.contains(&[0.8, 0.8]));
        let bowtie = SpatialDomain::Polygon { vertices: vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]] };
        assert!(bowtie.validate().is_err());
        let iv = SpatialDomain::Interval { lo: -1.0, hi: 2.0 };
        assert_eq!(iv.boundary_distance(&[0.0]), 1.0);
        assert!(TransportInstance::new(iv, vec![at(&[3.0], 1.0)]).is_err());
    }

    #[test]
    fn instance_json() {
        let s = r#"{"domain":{"type":"box","lo":[0,0],"hi":[1,1]},"atoms":[{"x":[0.5,0.5],"w":1.0}]}"#;
        let inst = TransportInstance::from_json(s).unwrap();
        assert_eq!(inst.atoms.len(), 1);
        assert!(TransportInstance::from_json(r#"{"domain":{"type":"box","lo":[0],"hi":[1]},"atoms":[],"extra":1}"#).is_err());
    }
}
