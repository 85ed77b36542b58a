//! Per-slot bandwidth allocation: minimize `Σ ξ_b λ_b / r_b` subject to box
//! bounds on each rate and link capacities, solved in the dual.

use crate::auction::{BidBook, Solution};
use crate::model::{System, Tier};

#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    /// Bid index in the book the flow was built from.
    pub bid: usize,
    pub weight: f64,
    /// Traffic load in bits at the start of the slot.
    pub traffic: f64,
    pub lower: f64,
    pub upper: f64,
    /// Indices into [`FlowSet::capacities`].
    pub links: Vec<usize>,
}

impl Flow {
    fn demand(&self) -> f64 {
        self.weight * self.traffic
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowSet {
    pub flows: Vec<Flow>,
    /// Link capacities in bit/s.
    pub capacities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("flow {0}: bounds must satisfy 0 < lower <= upper")]
    Bounds(usize),
    #[error("flow {0}: weight and traffic must be finite and non-negative")]
    Load(usize),
    #[error("flow {flow}: unknown link {link}")]
    UnknownLink { flow: usize, link: usize },
    #[error("link {0}: capacity must be positive")]
    Capacity(usize),
    #[error("link {0}: lower bounds exceed capacity")]
    LowerBounds(usize),
    #[error("negative dual on link {0}")]
    NegativeDual(usize),
    #[error("expected {expected} entries, got {got}")]
    Length { expected: usize, got: usize },
}

/// How rate bounds are derived for flows built from a placement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsRule {
    /// Lower bound as a fraction of the VM type's base bandwidth.
    pub lower_fraction: f64,
    /// Upper bound in bit/s; the smallest capacity on the path when unset.
    pub upper: Option<f64>,
}

impl Default for BoundsRule {
    fn default() -> Self {
        BoundsRule {
            lower_fraction: 0.1,
            upper: None,
        }
    }
}

impl FlowSet {
    /// Builds the flows of all bids placed off the field tier. `traffic` is
    /// indexed by bid.
    pub fn from_solution(
        system: &System,
        book: &BidBook,
        solution: &Solution,
        traffic: &[f64],
        bounds: BoundsRule,
    ) -> FlowSet {
        let topo = &system.topology;
        let capacities: Vec<f64> = topo
            .links()
            .into_iter()
            .map(|l| topo.link_capacity(l) as f64)
            .collect();
        let mut flows = Vec::new();
        for (i, p) in solution.placement.iter().enumerate() {
            let Some(p) = p else { continue };
            if topo.cloudlet(p.cloudlet).tier == Tier::Field {
                continue;
            }
            let bid = &book.bids()[i];
            let Ok(path) = topo.links_on_path(bid.ap, p.cloudlet) else {
                continue;
            };
            let links: Vec<usize> = path.into_iter().map(|l| topo.link_index(l)).collect();
            let narrowest = links
                .iter()
                .map(|&l| capacities[l])
                .fold(f64::INFINITY, f64::min);
            let r_min = system.catalog.vm(bid.vm_type).base_bandwidth as f64;
            let lower = bounds.lower_fraction * r_min;
            flows.push(Flow {
                bid: i,
                weight: topo.qos_weight(bid.ap, p.cloudlet),
                traffic: traffic.get(i).copied().unwrap_or(0.0),
                lower,
                upper: bounds.upper.unwrap_or(narrowest).max(lower),
                links,
            });
        }
        FlowSet { flows, capacities }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        for (m, &cap) in self.capacities.iter().enumerate() {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(FlowError::Capacity(m));
            }
        }
        let mut floor = vec![0.0; self.capacities.len()];
        for (i, f) in self.flows.iter().enumerate() {
            if !(f.lower > 0.0 && f.lower <= f.upper && f.upper.is_finite()) {
                return Err(FlowError::Bounds(i));
            }
            let ok = |x: f64| x.is_finite() && x >= 0.0;
            if !ok(f.weight) || !ok(f.traffic) {
                return Err(FlowError::Load(i));
            }
            for &m in &f.links {
                if m >= floor.len() {
                    return Err(FlowError::UnknownLink { flow: i, link: m });
                }
                floor[m] += f.lower;
            }
        }
        for (m, (&lo, &cap)) in floor.iter().zip(&self.capacities).enumerate() {
            if lo > cap * (1.0 + 1e-12) {
                return Err(FlowError::LowerBounds(m));
            }
        }
        Ok(())
    }

    pub fn objective(&self, rates: &[f64]) -> f64 {
        self.flows
            .iter()
            .zip(rates)
            .map(|(f, &r)| f.demand() / r)
            .sum()
    }

    pub fn link_loads(&self, rates: &[f64]) -> Vec<f64> {
        let mut load = vec![0.0; self.capacities.len()];
        for (f, &r) in self.flows.iter().zip(rates) {
            for &m in &f.links {
                load[m] += r;
            }
        }
        load
    }

    fn price(&self, flow: &Flow, duals: &[f64]) -> f64 {
        flow.links.iter().map(|&m| duals[m]).sum()
    }

    fn rate(&self, flow: &Flow, price: f64) -> f64 {
        let d = flow.demand();
        if d == 0.0 {
            flow.lower
        } else if price <= 0.0 {
            flow.upper
        } else {
            (d / price).sqrt().clamp(flow.lower, flow.upper)
        }
    }
}

/// Minimizer of the Lagrangian for fixed link duals.
pub fn primal_from_duals(flows: &FlowSet, duals: &[f64]) -> Result<Vec<f64>, FlowError> {
    if duals.len() != flows.capacities.len() {
        return Err(FlowError::Length {
            expected: flows.capacities.len(),
            got: duals.len(),
        });
    }
    if let Some(m) = duals.iter().position(|&g| g < 0.0 || g.is_nan()) {
        return Err(FlowError::NegativeDual(m));
    }
    Ok(flows
        .flows
        .iter()
        .map(|f| flows.rate(f, flows.price(f, duals)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    /// Exact per-link maximization of the dual, cycled over links, then a
    /// Newton step on the binding links.
    #[default]
    CoordinateAscent,
    /// Projected subgradient with step `s0 / sqrt(t)`,
    /// `s0 = 1 / max_m Σ_b v_mb u_b`.
    Subgradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub feasibility: f64,
    pub complementary_slackness: f64,
    pub stationarity: f64,
    pub max_iterations: usize,
    pub method: Method,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            feasibility: 1e-6,
            complementary_slackness: 1e-6,
            stationarity: 1e-6,
            max_iterations: 100_000,
            method: Method::CoordinateAscent,
        }
    }
}

/// Residuals of the optimality conditions, all relative.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KktReport {
    /// Worst capacity overshoot `(Vr - R)_m / R_m` or box violation over the
    /// bound, zero when feasible.
    pub feasibility: f64,
    /// Per link `|γ_m ((Vr)_m - R_m)|` over the objective value.
    pub complementary_slackness: Vec<f64>,
    /// Worst `|Σ γ v - ξλ/r²| / (ξλ/r²)` over interior flows with traffic.
    pub stationarity: f64,
    /// Worst multiplier sign error at clamped flows, relative like
    /// `stationarity`.
    pub bound_sign: f64,
    pub dual_sign: f64,
}

impl KktReport {
    pub fn max_complementary_slackness(&self) -> f64 {
        self.complementary_slackness
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }

    pub fn within(&self, tol: &Tolerances) -> bool {
        self.feasibility <= tol.feasibility
            && self.max_complementary_slackness() <= tol.complementary_slackness
            && self.stationarity <= tol.stationarity
            && self.bound_sign <= tol.stationarity
            && self.dual_sign == 0.0
    }
}

/// Recomputes every residual family from the rates and duals alone.
pub fn kkt_report(flows: &FlowSet, rates: &[f64], duals: &[f64]) -> KktReport {
    let loads = flows.link_loads(rates);
    let objective = flows.objective(rates);
    let scale = if objective > 0.0 { objective } else { 1.0 };
    let mut report = KktReport::default();
    for (m, (&load, &cap)) in loads.iter().zip(&flows.capacities).enumerate() {
        report.feasibility = report.feasibility.max((load - cap).max(0.0) / cap);
        let g = duals.get(m).copied().unwrap_or(0.0);
        if g < 0.0 {
            report.dual_sign = report.dual_sign.max(-g);
        }
        report
            .complementary_slackness
            .push((g * (load - cap)).abs() / scale);
    }
    for (f, &r) in flows.flows.iter().zip(rates) {
        let below = (f.lower - r).max(0.0);
        let above = (r - f.upper).max(0.0);
        report.feasibility = report.feasibility.max((below + above) / f.upper);
        let d = f.demand();
        if d == 0.0 {
            continue;
        }
        let marginal = d / (r * r);
        let price: f64 = f
            .links
            .iter()
            .map(|&m| duals.get(m).copied().unwrap_or(0.0))
            .sum();
        let gap = price - marginal;
        let at_lower = r <= f.lower * (1.0 + 1e-12);
        let at_upper = r >= f.upper * (1.0 - 1e-12);
        if at_lower && at_upper {
            continue;
        } else if at_lower {
            // Raising r must not pay off: price >= marginal.
            report.bound_sign = report.bound_sign.max((-gap).max(0.0) / marginal);
        } else if at_upper {
            report.bound_sign = report.bound_sign.max(gap.max(0.0) / marginal);
        } else {
            report.stationarity = report.stationarity.max(gap.abs() / marginal);
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub rates: Vec<f64>,
    pub duals: Vec<f64>,
    pub objective: f64,
    pub report: KktReport,
    pub iterations: usize,
    pub converged: bool,
}

impl Allocation {
    /// Links whose capacity is exhausted within `rel_tol`.
    pub fn binding_links(&self, flows: &FlowSet, rel_tol: f64) -> Vec<usize> {
        flows
            .link_loads(&self.rates)
            .iter()
            .zip(&flows.capacities)
            .enumerate()
            .filter(|(m, (load, cap))| self.duals[*m] > 0.0 || **load >= **cap * (1.0 - rel_tol))
            .map(|(m, _)| m)
            .collect()
    }
}

pub fn solve_allocation(flows: &FlowSet, tol: &Tolerances) -> Result<Allocation, FlowError> {
    solve_allocation_from(flows, tol, &vec![0.0; flows.capacities.len()])
}

/// Like [`solve_allocation`], starting the dual iteration at `duals`.
pub fn solve_allocation_from(
    flows: &FlowSet,
    tol: &Tolerances,
    duals: &[f64],
) -> Result<Allocation, FlowError> {
    flows.validate()?;
    primal_from_duals(flows, duals)?;
    let incidence = link_members(flows);
    let mut gamma = duals.to_vec();
    let (iterations, converged) = match tol.method {
        Method::CoordinateAscent => coordinate_ascent(flows, &incidence, &mut gamma, tol),
        Method::Subgradient => subgradient(flows, &mut gamma, tol),
    };
    let rates = primal_from_duals(flows, &gamma)?;
    let report = kkt_report(flows, &rates, &gamma);
    Ok(Allocation {
        objective: flows.objective(&rates),
        converged: converged && report.within(tol),
        rates,
        duals: gamma,
        report,
        iterations,
    })
}

fn link_members(flows: &FlowSet) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); flows.capacities.len()];
    for (b, f) in flows.flows.iter().enumerate() {
        for &m in &f.links {
            members[m].push(b);
        }
    }
    members
}

fn converged(flows: &FlowSet, gamma: &[f64], tol: &Tolerances) -> bool {
    let rates: Vec<f64> = flows
        .flows
        .iter()
        .map(|f| flows.rate(f, flows.price(f, gamma)))
        .collect();
    kkt_report(flows, &rates, gamma).within(tol)
}

fn coordinate_ascent(
    flows: &FlowSet,
    members: &[Vec<usize>],
    gamma: &mut [f64],
    tol: &Tolerances,
) -> (usize, bool) {
    let mut prices: Vec<f64> = flows.flows.iter().map(|f| flows.price(f, gamma)).collect();
    for sweep in 1..=tol.max_iterations {
        for m in 0..gamma.len() {
            if members[m].is_empty() {
                gamma[m] = 0.0;
                continue;
            }
            let load_at = |g: f64| -> f64 {
                members[m]
                    .iter()
                    .map(|&b| flows.rate(&flows.flows[b], prices[b] - gamma[m] + g))
                    .sum()
            };
            let cap = flows.capacities[m];
            let new = if load_at(0.0) <= cap {
                0.0
            } else {
                let mut hi = gamma[m].max(f64::MIN_POSITIVE);
                while load_at(hi) > cap {
                    hi *= 2.0;
                }
                let mut lo = 0.0;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if load_at(mid) > cap {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            };
            for &b in &members[m] {
                prices[b] += new - gamma[m];
            }
            gamma[m] = new;
        }
        if sweep % 8 == 1 {
            newton_polish(flows, members, gamma);
            for (p, f) in prices.iter_mut().zip(&flows.flows) {
                *p = flows.price(f, gamma);
            }
        }
        if converged(flows, gamma, tol) {
            return (sweep, true);
        }
    }
    (tol.max_iterations, false)
}

/// Newton iteration on `load_m(γ) = R_m` over links with positive duals,
/// keeping each step only while it lowers the residual and stays
/// non-negative.
fn newton_polish(flows: &FlowSet, members: &[Vec<usize>], gamma: &mut [f64]) {
    let active: Vec<usize> = (0..gamma.len()).filter(|&m| gamma[m] > 0.0).collect();
    if active.is_empty() {
        return;
    }
    let residual = |g: &[f64]| -> Vec<f64> {
        active
            .iter()
            .map(|&m| {
                let load: f64 = members[m]
                    .iter()
                    .map(|&b| flows.rate(&flows.flows[b], flows.price(&flows.flows[b], g)))
                    .sum();
                (load - flows.capacities[m]) / flows.capacities[m]
            })
            .collect()
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut res = residual(gamma);
    for _ in 0..20 {
        let n = active.len();
        let mut jac = vec![vec![0.0; n]; n];
        for f in &flows.flows {
            let p = flows.price(f, gamma);
            let r = flows.rate(f, p);
            let interior = f.demand() > 0.0 && p > 0.0 && r > f.lower && r < f.upper;
            if !interior {
                continue;
            }
            // dr/dp = -r / (2p)
            let dr = -r / (2.0 * p);
            for (i, &mi) in active.iter().enumerate() {
                if !f.links.contains(&mi) {
                    continue;
                }
                for (j, &mj) in active.iter().enumerate() {
                    if f.links.contains(&mj) {
                        jac[i][j] += dr / flows.capacities[mi];
                    }
                }
            }
        }
        let Some(step) = solve_dense(jac, res.iter().map(|x| -x).collect()) else {
            return;
        };
        let mut trial = gamma.to_vec();
        for (i, &m) in active.iter().enumerate() {
            trial[m] += step[i];
        }
        if trial.iter().any(|&g| g < 0.0 || !g.is_finite()) {
            return;
        }
        let trial_res = residual(&trial);
        if norm(&trial_res) >= norm(&res) {
            return;
        }
        gamma.copy_from_slice(&trial);
        res = trial_res;
    }
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            let (upper, lower) = a.split_at_mut(row);
            for (x, p) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                *x -= factor * p;
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

fn subgradient(flows: &FlowSet, gamma: &mut [f64], tol: &Tolerances) -> (usize, bool) {
    let uppers: Vec<f64> = flows.flows.iter().map(|f| f.upper).collect();
    let worst = flows.link_loads(&uppers).into_iter().fold(0.0, f64::max);
    if worst == 0.0 {
        return (0, converged(flows, gamma, tol));
    }
    let step0 = 1.0 / worst;
    for t in 1..=tol.max_iterations {
        let rates = primal_from_duals(flows, gamma).expect("duals stay non-negative");
        let loads = flows.link_loads(&rates);
        let step = step0 / (t as f64).sqrt();
        for (m, g) in gamma.iter_mut().enumerate() {
            *g = (*g + step * (loads[m] - flows.capacities[m])).max(0.0);
        }
        if converged(flows, gamma, tol) {
            return (t, true);
        }
    }
    (tol.max_iterations, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(weight: f64, traffic: f64, lower: f64, upper: f64, links: Vec<usize>) -> Flow {
        Flow {
            bid: 0,
            weight,
            traffic,
            lower,
            upper,
            links,
        }
    }

    fn shared_link() -> FlowSet {
        FlowSet {
            flows: vec![
                flow(1.0, 1.0, 0.01, 100.0, vec![0]),
                flow(1.0, 4.0, 0.01, 100.0, vec![0]),
            ],
            capacities: vec![10.0],
        }
    }

    #[test]
    fn closed_form_rates() {
        let fs = FlowSet {
            flows: vec![
                flow(1.0, 4.0, 0.1, 10.0, vec![0]),
                flow(1.0, 0.0, 0.1, 10.0, vec![0]),
            ],
            capacities: vec![100.0],
        };
        assert_eq!(primal_from_duals(&fs, &[1.0]).unwrap(), vec![2.0, 0.1]);
        assert_eq!(primal_from_duals(&fs, &[0.0]).unwrap(), vec![10.0, 0.1]);
        assert_eq!(
            primal_from_duals(&fs, &[-1.0]),
            Err(FlowError::NegativeDual(0))
        );
    }

    #[test]
    fn shared_link_splits_by_square_root() {
        let fs = shared_link();
        for method in [Method::CoordinateAscent, Method::Subgradient] {
            let tol = Tolerances {
                method,
                ..Tolerances::default()
            };
            let a = solve_allocation(&fs, &tol).unwrap();
            assert!(a.converged, "{method:?}: {:?}", a.report);
            assert!((a.rates[0] - 10.0 / 3.0).abs() / (10.0 / 3.0) < 1e-4);
            assert!((a.rates[1] - 20.0 / 3.0).abs() / (20.0 / 3.0) < 1e-4);
            assert!((a.objective - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn slack_capacity_gives_upper_bounds() {
        let fs = FlowSet {
            flows: vec![
                flow(1.0, 1.0, 0.1, 2.0, vec![0]),
                flow(1.0, 4.0, 0.1, 3.0, vec![0, 1]),
            ],
            capacities: vec![10.0, 10.0],
        };
        let a = solve_allocation(&fs, &Tolerances::default()).unwrap();
        assert_eq!(a.duals, vec![0.0, 0.0]);
        assert_eq!(a.rates, vec![2.0, 3.0]);
        assert_eq!(a.iterations, 1);
    }

    #[test]
    fn single_binding_link_on_a_path() {
        let fs = FlowSet {
            flows: vec![flow(0.4, 1e6, 1e5, 1e9, vec![0, 1, 2])],
            capacities: vec![1e9, 5e7, 2e8],
        };
        let a = solve_allocation(&fs, &Tolerances::default()).unwrap();
        assert!(a.converged);
        assert!((a.rates[0] - 5e7).abs() / 5e7 < 1e-6);
        assert_eq!(a.duals[0], 0.0);
        assert!(a.duals[1] > 0.0);
        assert_eq!(a.duals[2], 0.0);
        assert_eq!(a.binding_links(&fs, 1e-6), vec![1]);
    }

    #[test]
    fn report_on_hand_built_optimum() {
        let fs = shared_link();
        // γ = ξλ/r² = 1 / (10/3)² = 0.09
        let rates = [10.0 / 3.0, 20.0 / 3.0];
        let r = kkt_report(&fs, &rates, &[0.09]);
        assert!(r.feasibility <= 1e-9);
        assert!(r.max_complementary_slackness() <= 1e-9);
        assert!(r.stationarity <= 1e-9);

        let nudged = [rates[0] * 1.01, rates[1]];
        assert!(kkt_report(&fs, &nudged, &[0.09]).stationarity > r.stationarity);
    }

    #[test]
    fn infeasible_rates_are_reported() {
        let fs = shared_link();
        let r = kkt_report(&fs, &[6.0, 6.0], &[0.0]);
        assert!((r.feasibility - 0.2).abs() < 1e-12);
    }

    #[test]
    fn invalid_flow_sets_are_rejected() {
        let mut fs = shared_link();
        fs.flows[0].lower = 9.0;
        fs.flows[1].lower = 9.0;
        assert_eq!(fs.validate(), Err(FlowError::LowerBounds(0)));
        let mut fs = shared_link();
        fs.flows[0].links = vec![3];
        assert_eq!(
            fs.validate(),
            Err(FlowError::UnknownLink { flow: 0, link: 3 })
        );
        let mut fs = shared_link();
        fs.flows[1].traffic = -1.0;
        assert_eq!(fs.validate(), Err(FlowError::Load(1)));
    }

    #[test]
    fn scaling_demand_scales_unclamped_rates() {
        let fs = shared_link();
        let mut scaled = fs.clone();
        for f in &mut scaled.flows {
            f.traffic *= 9.0;
        }
        let a = primal_from_duals(&fs, &[0.5]).unwrap();
        let b = primal_from_duals(&scaled, &[0.5]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y - 3.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_flow_set() {
        let fs = FlowSet {
            flows: vec![],
            capacities: vec![1.0, 2.0],
        };
        let a = solve_allocation(&fs, &Tolerances::default()).unwrap();
        assert!(a.converged);
        assert_eq!(a.objective, 0.0);
    }
}
