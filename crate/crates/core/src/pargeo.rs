//! Parabolic metric geometry on space-time `R^{n+1}`.
//!
//! Points carry the parabolic norm `max(|x|, |t|^{1/2})`, which is homogeneous
//! of degree one under the dilations `(x, t) -> (r x, r^2 t)`. Sets are finite
//! point clouds; sup-type distances computed on them are lower estimates and
//! cover-based contents are upper estimates.


use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::calpoly::{CaloricPolynomial, Orientation, TraceResolution};
use crate::error::{LabError, Result};

pub type Coords = SmallVec<[f64; 3]>;

/// A space-time point `(x, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParaPoint {
    pub x: Coords,
    pub t: f64,
}

impl ParaPoint {
    pub fn new(x: &[f64], t: f64) -> Self {
        ParaPoint { x: Coords::from_slice(x), t }
    }

    pub fn origin(n: usize) -> Self {
        ParaPoint { x: smallvec::smallvec![0.0; n], t: 0.0 }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.x.iter().all(|v| v.is_finite())
    }

    /// Euclidean length of the spatial part.
    #[inline]
    pub fn spatial_norm(&self) -> f64 {
        self.x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Parabolic norm `max(|x|, |t|^{1/2})`.
    #[inline]
    pub fn norm(&self) -> f64 {
        self.spatial_norm().max(self.t.abs().sqrt())
    }

    pub fn sub(&self, other: &ParaPoint) -> ParaPoint {
        ParaPoint {
            x: self.x.iter().zip(&other.x).map(|(a, b)| a - b).collect(),
            t: self.t - other.t,
        }
    }

    pub fn add(&self, other: &ParaPoint) -> ParaPoint {
        ParaPoint {
            x: self.x.iter().zip(&other.x).map(|(a, b)| a + b).collect(),
            t: self.t + other.t,
        }
    }

    /// Parabolic distance to another point.
    #[inline]
    pub fn dist(&self, other: &ParaPoint) -> f64 {
        let s2: f64 = self.x.iter().zip(&other.x).map(|(a, b)| (a - b) * (a - b)).sum();
        s2.sqrt().max((self.t - other.t).abs().sqrt())
    }

    /// `(r x, r^2 t)` without validating `r`.
    pub(crate) fn scaled(&self, r: f64) -> ParaPoint {
        ParaPoint { x: self.x.iter().map(|v| v * r).collect(), t: self.t * r * r }
    }

    /// Time-reflected copy `(x, -t)`.
    pub fn time_reflected(&self) -> ParaPoint {
        ParaPoint { x: self.x.clone(), t: -self.t }
    }
}

/// Parabolic norm of a point.
pub fn para_norm(p: &ParaPoint) -> f64 {
    p.norm()
}

/// Parabolic dilation `δ_r(x, t) = (r x, r^2 t)`.
pub fn dilate(p: &ParaPoint, r: f64) -> Result<ParaPoint> {
    check_radius(r)?;
    Ok(p.scaled(r))
}

/// Blow-up map `T_{center, r}(p) = δ_{1/r}(p - center)`.
pub fn blow_up_map(p: &ParaPoint, center: &ParaPoint, r: f64) -> Result<ParaPoint> {
    check_radius(r)?;
    check_same_dim(p, center)?;
    Ok(p.sub(center).scaled(1.0 / r))
}

/// Inverse of [`blow_up_map`]: `center + δ_r(q)`.
pub fn blow_down_map(q: &ParaPoint, center: &ParaPoint, r: f64) -> Result<ParaPoint> {
    check_radius(r)?;
    check_same_dim(q, center)?;
    Ok(q.scaled(r).add(center))
}

pub(crate) fn check_radius(r: f64) -> Result<()> {
    if r.is_finite() && r > 0.0 {
        Ok(())
    } else {
        Err(LabError::invalid(format!("radius must be positive and finite, got {r}")))
    }
}

pub(crate) fn check_same_dim(a: &ParaPoint, b: &ParaPoint) -> Result<()> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(LabError::DimensionMismatch { expected: a.dim(), got: b.dim() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CylinderKind {
    /// `C_r`: the full parabolic ball.
    Full,
    /// `C^-_r`: `B(x, r) × (t - r^2, t)`.
    Backward,
    /// `C^+_r`: `B(x, r) × (t, t + r^2)`.
    Forward,
}

/// Parabolic cylinder around a center point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub center: ParaPoint,
    pub r: f64,
    pub kind: CylinderKind,
}

impl Cylinder {
    pub fn new(center: ParaPoint, r: f64) -> Result<Self> {
        check_radius(r)?;
        Ok(Cylinder { center, r, kind: CylinderKind::Full })
    }

    pub fn with_kind(center: ParaPoint, r: f64, kind: CylinderKind) -> Result<Self> {
        check_radius(r)?;
        Ok(Cylinder { center, r, kind })
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }

    /// Time interval `(lo, hi)` covered by the cylinder.
    pub fn time_span(&self) -> (f64, f64) {
        let (t, r2) = (self.center.t, self.r * self.r);
        match self.kind {
            CylinderKind::Full => (t - r2, t + r2),
            CylinderKind::Backward => (t - r2, t),
            CylinderKind::Forward => (t, t + r2),
        }
    }

    pub fn contains(&self, q: &ParaPoint) -> bool {
        let d = q.sub(&self.center);
        if d.spatial_norm() >= self.r {
            return false;
        }
        let (lo, hi) = self.time_span();
        q.t > lo && q.t < hi
    }
}

/// Heat ball `E(x̄; ρ)` (or its adjoint `E*(x̄; ρ)` living in the future).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatBall {
    pub center: ParaPoint,
    pub rho: f64,
    pub adjoint: bool,
}

impl HeatBall {
    pub fn new(center: ParaPoint, rho: f64) -> Result<Self> {
        check_radius(rho)?;
        Ok(HeatBall { center, rho, adjoint: false })
    }

    pub fn adjoint(center: ParaPoint, rho: f64) -> Result<Self> {
        check_radius(rho)?;
        Ok(HeatBall { center, rho, adjoint: true })
    }

    /// Spatial radius of the heat ball at time depth `u = |t - s|`.
    pub fn radius_at_depth(&self, u: f64) -> f64 {
        if u <= 0.0 || u >= self.rho {
            return 0.0;
        }
        let n = self.center.dim() as f64;
        (2.0 * n * u * (self.rho / u).ln()).sqrt()
    }

    /// Depth `u` measured in the direction the ball extends.
    pub fn depth_of(&self, q: &ParaPoint) -> f64 {
        if self.adjoint {
            q.t - self.center.t
        } else {
            self.center.t - q.t
        }
    }

    /// The point at spatial offset `y` and depth `u` from the center.
    pub fn point_at(&self, y: &[f64], u: f64) -> ParaPoint {
        let t = if self.adjoint { self.center.t + u } else { self.center.t - u };
        ParaPoint { x: self.center.x.iter().zip(y).map(|(c, v)| c + v).collect(), t }
    }
}

/// Membership in a heat ball via the explicit radius inequality.
pub fn heat_ball_contains(hb: &HeatBall, q: &ParaPoint) -> bool {
    let u = hb.depth_of(q);
    if !(u > 0.0 && u < hb.rho) {
        return false;
    }
    let n = hb.center.dim() as f64;
    let d2: f64 = q.x.iter().zip(&hb.center.x).map(|(a, b)| (a - b) * (a - b)).sum();
    d2 < 2.0 * n * u * (hb.rho / u).ln()
}

/// Which truncated cylinder a [`TruncatedCylinder`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum TruncatedKind {
    /// `R^-_a(x̄; r) = B(x, r) × (t - r^2, t - (a r)^2)`.
    BackwardA { a: f64 },
    /// `R̂^+_a(x̄; r) = B(x, r) × (t - (a r)^2 / 2, t + r^2)`.
    ForwardHat { a: f64 },
    /// `R^-_{a,b}(x̄; r) = B(x, r) × (t - (a r)^2, t - (b r)^2)`, `0 < b < a <= 1`.
    BackwardAB { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedCylinder {
    pub center: ParaPoint,
    pub r: f64,
    pub kind: TruncatedKind,
}

impl TruncatedCylinder {
    pub fn new(center: ParaPoint, r: f64, kind: TruncatedKind) -> Result<Self> {
        check_radius(r)?;
        match kind {
            TruncatedKind::BackwardA { a } | TruncatedKind::ForwardHat { a } => {
                if !(a > 0.0 && a < 1.0) {
                    return Err(LabError::invalid(format!("truncation parameter a={a} not in (0,1)")));
                }
            }
            TruncatedKind::BackwardAB { a, b } => {
                if !(b > 0.0 && b < a && a <= 1.0) {
                    return Err(LabError::invalid(format!("need 0 < b < a <= 1, got a={a}, b={b}")));
                }
            }
        }
        Ok(TruncatedCylinder { center, r, kind })
    }

    pub fn backward(center: ParaPoint, r: f64, a: f64) -> Result<Self> {
        Self::new(center, r, TruncatedKind::BackwardA { a })
    }

    pub fn time_span(&self) -> (f64, f64) {
        let (t, r) = (self.center.t, self.r);
        match self.kind {
            TruncatedKind::BackwardA { a } => (t - r * r, t - (a * r).powi(2)),
            TruncatedKind::ForwardHat { a } => (t - (a * r).powi(2) / 2.0, t + r * r),
            TruncatedKind::BackwardAB { a, b } => (t - (a * r).powi(2), t - (b * r).powi(2)),
        }
    }

    pub fn contains(&self, q: &ParaPoint) -> bool {
        let (lo, hi) = self.time_span();
        q.sub(&self.center).spatial_norm() < self.r && q.t > lo && q.t < hi
    }

    /// Closed-cylinder grid: lattice points of the spatial ball (cell centers,
    /// `m` per axis) times `levels` evenly spaced time levels including both ends.
    pub fn closed_grid(&self, m: usize, levels: usize) -> Vec<ParaPoint> {
        let (lo, hi) = self.time_span();
        let spatial = ball_lattice(self.center.dim(), self.r, m);
        let mut out = Vec::with_capacity(spatial.len() * levels);
        for k in 0..levels {
            let t = if levels == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * k as f64 / (levels - 1) as f64 };
            for y in &spatial {
                out.push(ParaPoint {
                    x: self.center.x.iter().zip(y).map(|(c, v)| c + v).collect(),
                    t,
                });
            }
        }
        out
    }
}

/// Cell-centered lattice with `m` points per axis on `[-r, r]^n`, clipped to
/// the closed ball of radius `r`.
pub fn ball_lattice(n: usize, r: f64, m: usize) -> Vec<Coords> {
    let h = 2.0 * r / m as f64;
    let mut out = Vec::new();
    let total = m.pow(n as u32);
    for idx in 0..total {
        let mut rem = idx;
        let mut y = Coords::with_capacity(n);
        for _ in 0..n {
            y.push(-r + h * ((rem % m) as f64 + 0.5));
            rem /= m;
        }
        if y.iter().map(|v| v * v).sum::<f64>() <= r * r {
            out.push(y);
        }
    }
    out
}

/// Smallest `ρ / r^2` for which `R^-_a(ξ; r) ⊂ E(ξ; ρ)`. The top face at depth
/// `(a r)^2` needs `a^2 e^{1/(2 n a^2)}` and the bottom face needs `e^{1/(2n)}`;
/// convexity of the heat ball handles the rest.
pub fn truncated_heat_ball_factor(n: usize, a: f64) -> f64 {
    let n = n as f64;
    let top = a * a * (1.0 / (2.0 * n * a * a)).exp();
    let bottom = (1.0 / (2.0 * n)).exp();
    top.max(bottom)
}

/// An admissible plane: the set `{(y, s) : (y - anchor.x) · e = 0}`, which
/// contains every line parallel to the time axis through its points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissiblePlane {
    pub normal: Coords,
    pub anchor: ParaPoint,
}

impl AdmissiblePlane {
    pub fn new(normal: &[f64], anchor: ParaPoint) -> Result<Self> {
        if normal.len() != anchor.dim() {
            return Err(LabError::DimensionMismatch { expected: anchor.dim(), got: normal.len() });
        }
        let len = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(len > 0.0 && len.is_finite()) {
            return Err(LabError::invalid("plane normal must be nonzero"));
        }
        Ok(AdmissiblePlane { normal: normal.iter().map(|v| v / len).collect(), anchor })
    }

    pub fn signed_offset(&self, p: &ParaPoint) -> f64 {
        p.x.iter().zip(&self.anchor.x).zip(&self.normal).map(|((a, b), e)| (a - b) * e).sum()
    }

    /// Parabolic distance to the plane; the optimal move is purely spatial.
    pub fn dist(&self, p: &ParaPoint) -> f64 {
        self.signed_offset(p).abs()
    }

    /// Samples of the plane inside `C_r(anchor)`: `m_s` points per tangential
    /// axis and `m_t` time levels, all cell-centered.
    pub fn samples_in_cylinder(&self, r: f64, m_s: usize, m_t: usize) -> Vec<ParaPoint> {
        let n = self.normal.len();
        let basis = orthonormal_complement(&self.normal);
        let tangential = ball_lattice(n - 1, r, m_s.max(1));
        let mut out = Vec::with_capacity(tangential.len().max(1) * m_t);
        for k in 0..m_t {
            let t = self.anchor.t - r * r + 2.0 * r * r * (k as f64 + 0.5) / m_t as f64;
            if n == 1 {
                out.push(ParaPoint { x: self.anchor.x.clone(), t });
                continue;
            }
            for c in &tangential {
                let mut x = self.anchor.x.clone();
                for (coef, b) in c.iter().zip(&basis) {
                    for (xi, bi) in x.iter_mut().zip(b) {
                        *xi += coef * bi;
                    }
                }
                out.push(ParaPoint { x, t });
            }
        }
        out
    }
}

/// Orthonormal basis of the complement of a unit vector (Gram-Schmidt on the
/// standard basis).
pub(crate) fn orthonormal_complement(e: &[f64]) -> Vec<Coords> {
    let n = e.len();
    let mut basis: Vec<Coords> = Vec::with_capacity(n.saturating_sub(1));
    for k in 0..n {
        if basis.len() + 1 == n {
            break;
        }
        let mut v: Coords = smallvec::smallvec![0.0; n];
        v[k] = 1.0;
        let proj: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
        for (vi, ei) in v.iter_mut().zip(e) {
            *vi -= proj * ei;
        }
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= p * bi;
            }
        }
        let len = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if len > 1e-8 {
            basis.push(v.iter().map(|a| a / len).collect());
        }
    }
    basis
}

/// A finite sample standing in for a subset of space-time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointCloudSet {
    pub samples: Vec<ParaPoint>,
}

impl PointCloudSet {
    pub fn new(samples: Vec<ParaPoint>) -> Self {
        PointCloudSet { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|p| p.dim())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: PointCloudSet = serde_json::from_str(s)?;
        if let Some(n) = set.dim() {
            if set.samples.iter().any(|p| p.dim() != n || !p.is_finite()) {
                return Err(LabError::invalid("point cloud has mixed dimensions or non-finite values"));
            }
        }
        Ok(set)
    }

    /// Parabolic diameter (quadratic scan).
    pub fn diameter(&self) -> f64 {
        diameter_of(&self.samples.iter().collect::<Vec<_>>())
    }
}

fn diameter_of(pts: &[&ParaPoint]) -> f64 {
    let mut d = 0.0f64;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            d = d.max(pts[i].dist(pts[j]));
        }
    }
    d
}

/// k-d tree for nearest-neighbour and range queries in the parabolic metric.
/// Boxes are pruned with the exact lower bound
/// `max(|x - box_x|, |t - box_t|^{1/2})`.
pub struct ParabolicIndex<'a> {
    points: &'a [ParaPoint],
    order: Vec<u32>,
    nodes: Vec<KdNode>,
}

struct KdNode {
    lo: Vec<f64>,
    hi: Vec<f64>,
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

const KD_LEAF: usize = 16;

fn coord(p: &ParaPoint, k: usize) -> f64 {
    if k < p.x.len() {
        p.x[k]
    } else {
        p.t
    }
}

impl<'a> ParabolicIndex<'a> {
    pub fn new(points: &'a [ParaPoint]) -> Self {
        let mut idx = ParabolicIndex { points, order: (0..points.len() as u32).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            idx.build(0, points.len());
        }
        idx
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let d = self.points[self.order[start] as usize].dim() + 1;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for &i in &self.order[start..end] {
            let p = &self.points[i as usize];
            for k in 0..d {
                let v = coord(p, k);
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(KdNode { lo: lo.clone(), hi: hi.clone(), start, end, children: None });
        if end - start > KD_LEAF {
            // widest side in parabolic units
            let axis = (0..d)
                .max_by(|&a, &b| {
                    let w = |k: usize| if k + 1 == d { (hi[k] - lo[k]).sqrt() } else { hi[k] - lo[k] };
                    w(a).total_cmp(&w(b))
                })
                .unwrap_or(0);
            let mid = (start + end) / 2;
            let pts = self.points;
            self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| coord(&pts[a as usize], axis).total_cmp(&coord(&pts[b as usize], axis)));
            let l = self.build(start, mid);
            let r = self.build(mid, end);
            self.nodes[id].children = Some((l, r));
        }
        id
    }

    fn box_dist(node: &KdNode, q: &ParaPoint) -> f64 {
        let n = q.x.len();
        let mut s2 = 0.0;
        for k in 0..n {
            let v = q.x[k];
            let g = (node.lo[k] - v).max(v - node.hi[k]).max(0.0);
            s2 += g * g;
        }
        let gt = (node.lo[n] - q.t).max(q.t - node.hi[n]).max(0.0);
        s2.sqrt().max(gt.sqrt())
    }

    /// Distance from `q` to the nearest indexed point, `f64::INFINITY` if empty.
    pub fn nearest_dist(&self, q: &ParaPoint) -> f64 {
        self.nearest_impl(q, usize::MAX)
    }

    /// Like [`Self::nearest_dist`] but ignoring the indexed point `skip`.
    pub fn nearest_dist_excluding(&self, q: &ParaPoint, skip: usize) -> f64 {
        self.nearest_impl(q, skip)
    }

    fn nearest_impl(&self, q: &ParaPoint, skip: usize) -> f64 {
        let mut best = f64::INFINITY;
        if !self.nodes.is_empty() {
            self.nearest_rec(0, q, skip, &mut best);
        }
        best
    }

    fn nearest_rec(&self, id: usize, q: &ParaPoint, skip: usize, best: &mut f64) {
        let node = &self.nodes[id];
        match node.children {
            None => {
                for &i in &self.order[node.start..node.end] {
                    if i as usize != skip {
                        *best = best.min(q.dist(&self.points[i as usize]));
                    }
                }
            }
            Some((l, r)) => {
                let dl = Self::box_dist(&self.nodes[l], q);
                let dr = Self::box_dist(&self.nodes[r], q);
                let (first, df, second, ds) = if dl <= dr { (l, dl, r, dr) } else { (r, dr, l, dl) };
                if df < *best {
                    self.nearest_rec(first, q, skip, best);
                }
                if ds < *best {
                    self.nearest_rec(second, q, skip, best);
                }
            }
        }
    }

    /// Indices of points at parabolic distance `<= rho` from `q`, sorted.
    pub fn within(&self, q: &ParaPoint, rho: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.within_rec(0, q, rho, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn within_rec(&self, id: usize, q: &ParaPoint, rho: f64, out: &mut Vec<usize>) {
        let node = &self.nodes[id];
        if Self::box_dist(node, q) > rho {
            return;
        }
        match node.children {
            None => {
                for &i in &self.order[node.start..node.end] {
                    if q.dist(&self.points[i as usize]) <= rho {
                        out.push(i as usize);
                    }
                }
            }
            Some((l, r)) => {
                self.within_rec(l, q, rho, out);
                self.within_rec(r, q, rho, out);
            }
        }
    }
}

/// Greedy-cover upper estimate of the parabolic `s`-dimensional Hausdorff
/// content using cylinders of radius at most `delta`.
///
/// Each greedy pass picks the first uncovered sample, covers everything within
/// parabolic distance `ρ` of it and charges `diam(piece)^s`. The reported value
/// is the minimum over the dyadic radii `2^j ρ_0 <= delta`, where `ρ_0` is
/// the sample resolution, so enlarging `delta` can only lower it.
pub fn hausdorff_content(a: &PointCloudSet, s: f64, delta: f64) -> Result<f64> {
    let n = a.dim().ok_or_else(|| LabError::Empty("point cloud".into()))?;
    if !(s >= 2.0 && s <= n as f64 + 2.0) {
        return Err(LabError::invalid(format!("content exponent s={s} outside [2, n+2]")));
    }
    hausdorff_content_unchecked(a, s, delta)
}

pub(crate) fn hausdorff_content_unchecked(a: &PointCloudSet, s: f64, delta: f64) -> Result<f64> {
    check_radius(delta)?;
    if a.is_empty() {
        return Err(LabError::Empty("point cloud".into()));
    }
    let pts = &a.samples;
    let floor = sample_resolution(pts);
    if floor <= 0.0 {
        return Ok(greedy_cover_cost(pts, s, delta));
    }
    let mut best = greedy_cover_cost(pts, s, floor);
    let mut rho = 2.0 * floor;
    while rho <= delta {
        best = best.min(greedy_cover_cost(pts, s, rho));
        rho *= 2.0;
    }
    Ok(best)
}

/// Twice the largest nearest-neighbour distance: below this scale the sample
/// no longer represents the set, so covers are clamped to it.
fn sample_resolution(pts: &[ParaPoint]) -> f64 {
    if pts.len() < 2 {
        return 0.0;
    }
    let idx = ParabolicIndex::new(pts);
    let worst = pts
        .iter()
        .enumerate()
        .map(|(i, p)| idx.nearest_dist_excluding(p, i))
        .fold(0.0, f64::max);
    if worst.is_finite() {
        2.0 * worst
    } else {
        0.0
    }
}

fn greedy_cover_cost(pts: &[ParaPoint], s: f64, rho: f64) -> f64 {
    let idx = ParabolicIndex::new(pts);
    let mut covered = vec![false; pts.len()];
    let mut total = 0.0;
    for i in 0..pts.len() {
        if covered[i] {
            continue;
        }
        let members = idx.within(&pts[i], rho);
        let mut piece: Vec<&ParaPoint> = Vec::with_capacity(members.len());
        for j in members {
            if !covered[j] {
                covered[j] = true;
                piece.push(&pts[j]);
            }
        }
        total += diameter_of(&piece).powf(s);
    }
    total
}


/// Family of model sets for the flatness functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FlatnessFamily {
    /// Admissible planes through the center.
    Planes,
    /// Zero sets of homogeneous caloric polynomials of degree `k`.
    HomogeneousZeroSets { k: u32 },
    /// Zero sets of caloric polynomials of degree at most `d` vanishing at the center.
    PolynomialZeroSets { d: u32 },
}

/// Tuning knobs for [`theta_flatness`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessOptions {
    /// Coarse directions for the plane search (half circle when `n = 2`).
    pub directions: usize,
    /// Golden-section iterations on the best coarse cell.
    pub refine_iters: usize,
    /// Model-set samples per tangential axis and per time level.
    pub plane_samples: usize,
    pub time_samples: usize,
    /// Coefficient samples for the zero-set families.
    pub zero_set_samples: usize,
    pub trace: TraceResolution,
    pub orientation: Orientation,
}

impl Default for FlatnessOptions {
    fn default() -> Self {
        FlatnessOptions {
            directions: 256,
            refine_iters: 40,
            plane_samples: 64,
            time_samples: 64,
            zero_set_samples: 64,
            trace: TraceResolution { slices: 48, grid: 48 },
            orientation: Orientation::Caloric,
        }
    }
}

/// Result of a flatness evaluation: the value and the minimizing model set
/// (a spatial normal for planes, a coefficient vector for zero sets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessResult {
    pub theta: f64,
    pub argmin: Vec<f64>,
}

/// Bilateral flatness `Θ^S_A(center, r)`: the infimum over model sets `S` of
/// the larger of `sup_{a ∈ A ∩ C_r} dist(a, center + S) / r` and
/// `sup_{z ∈ (center + S) ∩ C_r} dist(z, A) / r`, capped at 2.
pub fn theta_flatness(
    a: &PointCloudSet,
    center: &ParaPoint,
    r: f64,
    family: &FlatnessFamily,
    opts: &FlatnessOptions,
) -> Result<FlatnessResult> {
    check_radius(r)?;
    let n = center.dim();
    if a.samples.iter().any(|p| p.dim() != n) {
        return Err(LabError::DimensionMismatch { expected: n, got: a.dim().unwrap_or(0) });
    }
    let cyl = Cylinder::new(center.clone(), r)?;
    let inside: Vec<ParaPoint> = a.samples.iter().filter(|p| cyl.contains(p)).cloned().collect();
    if inside.is_empty() {
        return Err(LabError::Empty("A ∩ C_r(center) is empty".into()));
    }
    let index = ParabolicIndex::new(&a.samples);
    match family {
        FlatnessFamily::Planes => plane_flatness(&inside, &index, center, r, opts),
        FlatnessFamily::HomogeneousZeroSets { k } => {
            let cands = crate::calpoly::homogeneous_family(n, *k, opts.zero_set_samples, opts.orientation)?;
            zero_set_flatness(&inside, &index, center, r, cands, opts)
        }
        FlatnessFamily::PolynomialZeroSets { d } => {
            let cands = crate::calpoly::vanishing_family(n, *d, opts.zero_set_samples, opts.orientation)?;
            zero_set_flatness(&inside, &index, center, r, cands, opts)
        }
    }
}

fn plane_objective(
    inside: &[ParaPoint],
    index: &ParabolicIndex<'_>,
    center: &ParaPoint,
    r: f64,
    normal: &[f64],
    opts: &FlatnessOptions,
) -> f64 {
    let plane = AdmissiblePlane { normal: Coords::from_slice(normal), anchor: center.clone() };
    let first = inside.iter().map(|p| plane.dist(p)).fold(0.0, f64::max) / r;
    let samples = plane.samples_in_cylinder(r, opts.plane_samples, opts.time_samples);
    let cyl = Cylinder { center: center.clone(), r, kind: CylinderKind::Full };
    let second = samples
        .iter()
        .filter(|z| cyl.contains(z))
        .map(|z| index.nearest_dist(z))
        .fold(0.0, f64::max)
        / r;
    first.max(second).min(2.0)
}

fn plane_flatness(
    inside: &[ParaPoint],
    index: &ParabolicIndex<'_>,
    center: &ParaPoint,
    r: f64,
    opts: &FlatnessOptions,
) -> Result<FlatnessResult> {
    let n = center.dim();
    let dirs: Vec<Vec<f64>> = match n {
        1 => vec![vec![1.0]],
        2 => (0..opts.directions.max(1))
            .map(|i| {
                let th = std::f64::consts::PI * i as f64 / opts.directions.max(1) as f64;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        _ => hemisphere_directions(n, opts.directions.max(1)),
    };
    let mut best = (f64::INFINITY, dirs[0].clone(), 0usize);
    for (i, d) in dirs.iter().enumerate() {
        let v = plane_objective(inside, index, center, r, d, opts);
        // strict comparison keeps the first (lexicographically earliest) minimizer
        if v < best.0 - 1e-15 || (v <= best.0 + 1e-15 && lex_less(d, &best.1)) {
            best = (v, d.clone(), i);
        }
    }
    if n == 2 && opts.refine_iters > 0 {
        let step = std::f64::consts::PI / opts.directions.max(1) as f64;
        let th0 = step * best.2 as f64;
        let f = |th: f64| plane_objective(inside, index, center, r, &[th.cos(), th.sin()], opts);
        let (th, v) = golden_section(f, th0 - step, th0 + step, opts.refine_iters);
        if v < best.0 {
            let mut d = vec![th.cos(), th.sin()];
            canonical_sign(&mut d);
            best = (v, d, best.2);
        }
    }
    Ok(FlatnessResult { theta: best.0, argmin: best.1 })
}

fn zero_set_flatness(
    inside: &[ParaPoint],
    index: &ParabolicIndex<'_>,
    center: &ParaPoint,
    r: f64,
    cands: Vec<(Vec<f64>, CaloricPolynomial)>,
    opts: &FlatnessOptions,
) -> Result<FlatnessResult> {
    let cyl = Cylinder::new(ParaPoint::origin(center.dim()), r)?;
    let mut best = FlatnessResult { theta: f64::INFINITY, argmin: Vec::new() };
    for (coef, h) in cands {
        let Ok(trace) = crate::calpoly::nodal_trace(&h, &cyl, &opts.trace) else {
            continue;
        };
        let s_pts: Vec<ParaPoint> = trace.points.into_iter().map(|p| p.point.add(center)).collect();
        if s_pts.is_empty() {
            continue;
        }
        let s_index = ParabolicIndex::new(&s_pts);
        let first = inside.iter().map(|p| s_index.nearest_dist(p)).fold(0.0, f64::max) / r;
        let second = s_pts.iter().map(|z| index.nearest_dist(z)).fold(0.0, f64::max) / r;
        let v = first.max(second).min(2.0);
        if v < best.theta {
            best = FlatnessResult { theta: v, argmin: coef };
        }
    }
    if !best.theta.is_finite() {
        return Err(LabError::Empty("no model zero set meets C_r(center)".into()));
    }
    Ok(best)
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

fn canonical_sign(d: &mut [f64]) {
    if let Some(first) = d.iter().find(|v| v.abs() > 1e-15) {
        if *first < 0.0 {
            for v in d.iter_mut() {
                *v = -*v;
            }
        }
    }
}

/// Golden-section minimization on `[lo, hi]`; returns `(argmin, min)`.
pub(crate) fn golden_section<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, iters: usize) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Deterministic near-uniform unit vectors with a nonnegative first nonzero
/// coordinate. Fibonacci lattice for `n = 3`, Gaussian-free radial
/// lattice otherwise.
pub fn hemisphere_directions(n: usize, count: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    let pts = crate::calpoly::sphere_points(n, 2 * count);
    for mut p in pts {
        canonical_sign(&mut p);
        if !out.iter().any(|q: &Vec<f64>| q.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-12)) {
            out.push(p);
        }
        if out.len() == count {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: &[f64], t: f64) -> ParaPoint {
        ParaPoint::new(x, t)
    }

    #[test]
    fn norm_examples() {
        assert_eq!(para_norm(&pt(&[0.0, 0.0], 0.0)), 0.0);
        assert_eq!(para_norm(&pt(&[3.0, 4.0], -16.0)), 5.0);
        assert_eq!(para_norm(&pt(&[0.0, 0.0], 9.0)), 3.0);
    }

    #[test]
    fn dilate_examples() {
        let p = pt(&[1.0, 1.0], 1.0);
        assert_eq!(dilate(&p, 1.0).unwrap(), p);
        assert_eq!(dilate(&p, 2.0).unwrap(), pt(&[2.0, 2.0], 4.0));
        let back = dilate(&dilate(&p, 3.0).unwrap(), 1.0 / 3.0).unwrap();
        assert!(back.dist(&p) < 1e-7);
        assert!(dilate(&p, 0.0).is_err());
        assert!(dilate(&p, -1.0).is_err());
    }

    #[test]
    fn blow_up_examples() {
        let p = pt(&[0.3, -0.2], 0.7);
        let o = ParaPoint::origin(2);
        assert_eq!(blow_up_map(&p, &o, 1.0).unwrap(), p);
        assert_eq!(blow_up_map(&p, &p, 0.5).unwrap().norm(), 0.0);
        let c = pt(&[1.0, 2.0], -3.0);
        let q = blow_up_map(&p, &c, 0.25).unwrap();
        let back = blow_down_map(&q, &c, 0.25).unwrap();
        assert!(back.dist(&p) < 1e-7);
        assert!(blow_up_map(&p, &c, 0.0).is_err());
    }

    #[test]
    fn blow_up_maps_cylinder_to_unit() {
        let c = pt(&[0.5, 0.5], 1.0);
        let cyl = Cylinder::new(c.clone(), 0.3).unwrap();
        let unit = Cylinder::new(ParaPoint::origin(2), 1.0).unwrap();
        for i in 0..200 {
            let f = i as f64 / 200.0;
            let q = pt(&[0.5 + 0.5 * (f * 7.0).sin(), 0.5 + 0.4 * (f * 3.0).cos()], 1.0 + 0.2 * (f * 5.0).sin());
            let img = blow_up_map(&q, &c, 0.3).unwrap();
            assert_eq!(cyl.contains(&q), unit.contains(&img));
        }
    }

    #[test]
    fn heat_ball_examples() {
        let hb = HeatBall::new(ParaPoint::origin(2), 1.0).unwrap();
        assert!(heat_ball_contains(&hb, &pt(&[0.0, 0.0], -0.5)));
        assert!(!heat_ball_contains(&hb, &pt(&[0.0, 0.0], -1.5)));
        let u = (-1.0f64).exp();
        assert!(heat_ball_contains(&hb, &pt(&[1.2, 0.0], -u)));
        assert!(!heat_ball_contains(&hb, &pt(&[1.22, 0.0], -u)));
        // future points are never in E, only in E*
        assert!(!heat_ball_contains(&hb, &pt(&[0.0, 0.0], 0.5)));
        let hb_star = HeatBall::adjoint(ParaPoint::origin(2), 1.0).unwrap();
        assert!(heat_ball_contains(&hb_star, &pt(&[0.0, 0.0], 0.5)));
    }

    #[test]
    fn truncated_cylinder_validation() {
        let o = ParaPoint::origin(2);
        assert!(TruncatedCylinder::backward(o.clone(), 1.0, 0.0).is_err());
        assert!(TruncatedCylinder::backward(o.clone(), 1.0, 1.0).is_err());
        assert!(TruncatedCylinder::new(o.clone(), 1.0, TruncatedKind::BackwardAB { a: 0.5, b: 0.5 }).is_err());
        let r = TruncatedCylinder::backward(o, 2.0, 0.5).unwrap();
        assert_eq!(r.time_span(), (-4.0, -1.0));
        assert!(r.contains(&pt(&[1.0, 1.0], -2.0)));
        assert!(!r.contains(&pt(&[1.0, 1.0], -0.5)));
    }

    #[test]
    fn truncated_heat_ball_factor_matches_faces() {
        // a large enough that the bottom face dominates
        assert!((truncated_heat_ball_factor(2, 0.5) - (0.25f64).exp()).abs() < 1e-12);
        // small a: the top face needs a much larger ball
        assert!(truncated_heat_ball_factor(2, 0.1) > 100.0);
    }

    #[test]
    fn plane_distance_is_spatial() {
        let plane = AdmissiblePlane::new(&[3.0, 4.0], ParaPoint::origin(2)).unwrap();
        assert!((plane.dist(&pt(&[3.0, 4.0], 100.0)) - 5.0).abs() < 1e-12);
        for z in plane.samples_in_cylinder(1.0, 8, 8) {
            assert!(plane.dist(&z) < 1e-12);
        }
        assert!(AdmissiblePlane::new(&[0.0, 0.0], ParaPoint::origin(2)).is_err());
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut pts = Vec::new();
        for i in 0..400 {
            let f = i as f64;
            pts.push(pt(&[(f * 0.37).sin(), (f * 0.71).cos()], (f * 0.13).sin() * 0.8));
        }
        let idx = ParabolicIndex::new(&pts);
        for j in 0..50 {
            let f = j as f64;
            let q = pt(&[(f * 1.3).cos() * 1.5, (f * 0.4).sin()], (f * 0.9).cos() * 2.0);
            let brute = pts.iter().map(|p| q.dist(p)).fold(f64::INFINITY, f64::min);
            assert!((idx.nearest_dist(&q) - brute).abs() < 1e-14);
            let w = idx.within(&q, 0.4);
            let wb: Vec<usize> = (0..pts.len()).filter(|&i| q.dist(&pts[i]) <= 0.4).collect();
            assert_eq!(w, wb);
        }
    }

    #[test]
    fn content_of_singleton_and_segment() {
        let single = PointCloudSet::new(vec![pt(&[0.1, 0.2], 0.3)]);
        assert!(hausdorff_content(&single, 2.0, 0.01).unwrap() <= (0.02f64).powi(2));
        let len = 1.0;
        let seg = PointCloudSet::new((0..=2000).map(|k| pt(&[0.0, 0.0], len * k as f64 / 2000.0)).collect());
        let c = hausdorff_content(&seg, 2.0, 0.1).unwrap();
        assert!(c >= len / 4.0 && c <= 4.0 * len, "content {c}");
        assert!(hausdorff_content(&seg, 1.5, 0.1).is_err());
        assert!(hausdorff_content(&seg, 4.5, 0.1).is_err());
    }

    #[test]
    fn flatness_of_plane_is_zero() {
        let plane = AdmissiblePlane::new(&[0.6, 0.8], ParaPoint::origin(2)).unwrap();
        let a = PointCloudSet::new(plane.samples_in_cylinder(1.2, 80, 120));
        let opts = FlatnessOptions { plane_samples: 24, time_samples: 24, ..Default::default() };
        let res = theta_flatness(&a, &ParaPoint::origin(2), 1.0, &FlatnessFamily::Planes, &opts).unwrap();
        // sampling of A limits theta: half the time gap, measured parabolically
        let bound = (0.5 * 2.0 * 1.44 / 120.0f64).sqrt().max(0.5 * 2.4 / 80.0) / 1.0;
        assert!(res.theta <= bound + 1e-9, "theta {} bound {bound}", res.theta);
        // a normal tilted by φ puts samples at distance ~ sin φ from its plane
        let cross = (res.argmin[0] * 0.8 - res.argmin[1] * 0.6).abs();
        assert!(cross <= res.theta / 0.95 + 0.01, "argmin {:?}", res.argmin);
    }

    #[test]
    fn flatness_requires_points_in_cylinder() {
        let a = PointCloudSet::new(vec![pt(&[5.0, 5.0], 0.0)]);
        let err = theta_flatness(&a, &ParaPoint::origin(2), 1.0, &FlatnessFamily::Planes, &FlatnessOptions::default());
        assert!(matches!(err, Err(LabError::Empty(_))));
    }

    #[test]
    fn point_cloud_json() {
        let a = PointCloudSet::new(vec![pt(&[1.0, 2.0], 3.0)]);
        let s = a.to_json().unwrap();
        assert_eq!(s, r#"[{"x":[1.0,2.0],"t":3.0}]"#);
        assert_eq!(PointCloudSet::from_json(&s).unwrap(), a);
        assert!(PointCloudSet::from_json(r#"[{"x":[1.0],"t":0.0},{"x":[1.0,2.0],"t":0.0}]"#).is_err());
    }
}
