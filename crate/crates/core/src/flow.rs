//! Transportation with a boundary reservoir, solved by successive shortest
//! paths with reduced costs.
//!
//! Sources carry supplies `a_i`, sinks demands `b_j`. Besides direct arcs
//! `i -> j`, any source may dump mass on the boundary at cost `α_i` and any
//! sink may draw from it at cost `β_j`. Costs are rounded to integers on a
//! `1e-9` lattice so reduced-cost comparisons are exact; flows stay real.

use crate::error::{LabError, Result};

const COST_SCALE: f64 = 1e9;

/// One end of a transport arc.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum End {
    Atom(usize),
    Boundary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowEntry {
    pub from: End,
    pub to: End,
    pub amount: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryTransport {
    pub value: f64,
    pub flows: Vec<FlowEntry>,
    /// Dual potential on sources; `φ_i + ψ_j <= c_ij`, `φ_i <= α_i`.
    pub phi: Vec<f64>,
    /// Dual potential on sinks; `ψ_j <= β_j`.
    pub psi: Vec<f64>,
    pub augmentations: usize,
}

fn to_int(c: f64) -> i64 {
    (c * COST_SCALE).round() as i64
}

/// Solve the transportation problem with a boundary node. `cost(i, j)` must be
/// nonnegative and finite.
pub fn solve<F>(supply: &[f64], demand: &[f64], cost: F, supply_bd: &[f64], demand_bd: &[f64]) -> Result<BoundaryTransport>
where
    F: Fn(usize, usize) -> f64,
{
    if supply.len() != supply_bd.len() || demand.len() != demand_bd.len() {
        return Err(LabError::invalid("boundary cost arrays must match atom counts"));
    }
    for &v in supply.iter().chain(demand).chain(supply_bd).chain(demand_bd) {
        if !(v.is_finite() && v >= 0.0) {
            return Err(LabError::invalid("transport masses and costs must be finite and nonnegative"));
        }
    }
    let (ps, ns) = (supply.len(), demand.len());
    let (p, n) = (ps + 1, ns + 1);
    let total_a: f64 = supply.iter().sum();
    let total_b: f64 = demand.iter().sum();

    let mut c = vec![0i64; p * n];
    let mut creal = vec![0.0f64; p * n];
    for i in 0..ps {
        for j in 0..ns {
            let v = cost(i, j);
            if !(v.is_finite() && v >= 0.0) {
                return Err(LabError::invalid(format!("transport cost ({i},{j}) is {v}")));
            }
            creal[i * n + j] = v;
            c[i * n + j] = to_int(v);
        }
        creal[i * n + ns] = supply_bd[i];
        c[i * n + ns] = to_int(supply_bd[i]);
    }
    for j in 0..ns {
        creal[ps * n + j] = demand_bd[j];
        c[ps * n + j] = to_int(demand_bd[j]);
    }

    let mut ex_s: Vec<f64> = supply.iter().copied().chain(std::iter::once(total_b)).collect();
    let mut ex_d: Vec<f64> = demand.iter().copied().chain(std::iter::once(total_a)).collect();
    let eps = 1e-14 * (total_a + total_b).max(f64::MIN_POSITIVE);
    for v in ex_s.iter_mut().chain(ex_d.iter_mut()) {
        if *v <= eps {
            *v = 0.0;
        }
    }
    let mut flow = vec![0.0f64; p * n];
    let mut pi_s = vec![0i64; p];
    let mut pi_t = vec![0i64; n];
    let mut dist_s = vec![i64::MAX; p];
    let mut dist_t = vec![i64::MAX; n];
    let mut done_s = vec![false; p];
    let mut done_t = vec![false; n];
    let mut pred_s = vec![usize::MAX; p];
    let mut pred_t = vec![usize::MAX; n];
    let mut augmentations = 0usize;
    let max_aug = 50 * (p + n) * (p + n) + 1000;

    while ex_s.iter().any(|&v| v > 0.0) && ex_d.iter().any(|&v| v > 0.0) {
        dist_s.fill(i64::MAX);
        dist_t.fill(i64::MAX);
        done_s.fill(false);
        done_t.fill(false);
        for i in 0..p {
            if ex_s[i] > 0.0 {
                dist_s[i] = 0;
                pred_s[i] = usize::MAX;
            }
        }
        let target = loop {
            // pick the closest unsettled node
            let mut best = i64::MAX;
            let mut pick: Option<(bool, usize)> = None;
            for i in 0..p {
                if !done_s[i] && dist_s[i] < best {
                    best = dist_s[i];
                    pick = Some((true, i));
                }
            }
            for j in 0..n {
                if !done_t[j] && dist_t[j] < best {
                    best = dist_t[j];
                    pick = Some((false, j));
                }
            }
            let Some((is_source, u)) = pick else {
                return Err(LabError::Numerical("transport residual graph disconnected".into()));
            };
            if is_source {
                done_s[u] = true;
                let du = dist_s[u];
                let row = &c[u * n..(u + 1) * n];
                for j in 0..n {
                    if done_t[j] {
                        continue;
                    }
                    let nd = du + row[j] + pi_s[u] - pi_t[j];
                    if nd < dist_t[j] {
                        dist_t[j] = nd;
                        pred_t[j] = u;
                    }
                }
            } else {
                done_t[u] = true;
                if ex_d[u] > 0.0 {
                    break u;
                }
                let du = dist_t[u];
                for i in 0..p {
                    if done_s[i] || flow[i * n + u] <= 0.0 {
                        continue;
                    }
                    let nd = du - c[i * n + u] + pi_t[u] - pi_s[i];
                    if nd < dist_s[i] {
                        dist_s[i] = nd;
                        pred_s[i] = u;
                    }
                }
            }
        };
        let d_target = dist_t[target];
        for i in 0..p {
            pi_s[i] += dist_s[i].min(d_target);
        }
        for j in 0..n {
            pi_t[j] += dist_t[j].min(d_target);
        }

        // walk back to find the bottleneck
        let mut amount = ex_d[target];
        let mut j = target;
        let start;
        loop {
            let i = pred_t[j];
            let back = pred_s[i];
            if back == usize::MAX {
                start = i;
                break;
            }
            amount = amount.min(flow[i * n + back]);
            j = back;
        }
        amount = amount.min(ex_s[start]);
        let mut j = target;
        loop {
            let i = pred_t[j];
            flow[i * n + j] += amount;
            let back = pred_s[i];
            if back == usize::MAX {
                break;
            }
            flow[i * n + back] -= amount;
            if flow[i * n + back] <= eps {
                flow[i * n + back] = 0.0;
            }
            j = back;
        }
        ex_s[start] -= amount;
        if ex_s[start] <= eps {
            ex_s[start] = 0.0;
        }
        ex_d[target] -= amount;
        if ex_d[target] <= eps {
            ex_d[target] = 0.0;
        }
        augmentations += 1;
        if augmentations > max_aug {
            return Err(LabError::Numerical("transport solver exceeded its augmentation budget".into()));
        }
    }

    let left: f64 = ex_s.iter().chain(&ex_d).sum();
    if left > 1e-9 * (total_a + total_b) {
        return Err(LabError::Numerical(format!("transport left {left:e} of mass unrouted")));
    }
    let mut value = 0.0;
    let mut flows = Vec::new();
    for i in 0..p {
        for j in 0..n {
            let f = flow[i * n + j];
            if f > 0.0 && !(i == ps && j == ns) {
                let cost = creal[i * n + j];
                value += f * cost;
                let from = if i == ps { End::Boundary } else { End::Atom(i) };
                let to = if j == ns { End::Boundary } else { End::Atom(j) };
                flows.push(FlowEntry { from, to, amount: f, cost });
            }
        }
    }
    let u_b = -(pi_s[ps] as f64) / COST_SCALE;
    let v_b = pi_t[ns] as f64 / COST_SCALE;
    let phi = (0..ps).map(|i| -(pi_s[i] as f64) / COST_SCALE + v_b).collect();
    let psi = (0..ns).map(|j| pi_t[j] as f64 / COST_SCALE + u_b).collect();
    Ok(BoundaryTransport { value, flows, phi, psi, augmentations })
}
