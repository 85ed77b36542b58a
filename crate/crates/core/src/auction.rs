//! Bid bookkeeping and exact evaluation of the frame objective
//! (revenue minus electricity cost minus lost revenue), plus a feasibility
//! checker for arbitrary candidate solutions.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::model::{fits, ApId, CloudletId, PmTypeId, System, Tier, VmTypeId};
use crate::money::Money;

pub type BidId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bid {
    pub id: BidId,
    pub ap: ApId,
    pub vm_type: VmTypeId,
    /// Willingness price for one instance over one frame.
    pub price: Money,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuctionError {
    #[error("bid {bid} references unknown AP #{ap}")]
    UnknownAp { bid: BidId, ap: usize },
    #[error("bid {bid} references unknown VM type #{vm}")]
    UnknownVmType { bid: BidId, vm: usize },
    #[error("bid {0} has a negative price")]
    NegativePrice(BidId),
    #[error("duplicate bid id {0}")]
    DuplicateBid(BidId),
    #[error("solution does not match the bid book ({0})")]
    Shape(&'static str),
    #[error("served flags are not monotone for AP #{ap}, VM type #{vm} at rank {rank}")]
    NonMonotone { ap: usize, vm: usize, rank: usize },
    #[error("bid {bid} is placed on an invalid or powered-off PM")]
    BadPlacement { bid: BidId },
}

/// Bids grouped per `(AP, VM type)` into sequences sorted by price,
/// highest first. Ties go to the lower bid id.
#[derive(Debug, Clone, Default)]
pub struct BidBook {
    bids: Vec<Bid>,
    sequences: BTreeMap<(ApId, VmTypeId), Vec<usize>>,
    rank: Vec<usize>,
}

impl BidBook {
    pub fn new(mut bids: Vec<Bid>, system: &System) -> Result<Self, AuctionError> {
        bids.sort_by_key(|b| b.id);
        for w in bids.windows(2) {
            if w[0].id == w[1].id {
                return Err(AuctionError::DuplicateBid(w[0].id));
            }
        }
        let mut sequences: BTreeMap<(ApId, VmTypeId), Vec<usize>> = BTreeMap::new();
        for (i, b) in bids.iter().enumerate() {
            if b.ap.0 >= system.topology.aps.len() {
                return Err(AuctionError::UnknownAp {
                    bid: b.id,
                    ap: b.ap.0,
                });
            }
            if b.vm_type.0 >= system.catalog.vm_types.len() {
                return Err(AuctionError::UnknownVmType {
                    bid: b.id,
                    vm: b.vm_type.0,
                });
            }
            if b.price.is_negative() {
                return Err(AuctionError::NegativePrice(b.id));
            }
            sequences.entry((b.ap, b.vm_type)).or_default().push(i);
        }
        let mut rank = vec![0; bids.len()];
        for seq in sequences.values_mut() {
            // Stable sort keeps ascending id among equal prices.
            seq.sort_by(|&x, &y| bids[y].price.cmp(&bids[x].price));
            for (k, &i) in seq.iter().enumerate() {
                rank[i] = k + 1;
            }
        }
        Ok(BidBook {
            bids,
            sequences,
            rank,
        })
    }

    /// Bids in ascending id order; solution vectors are indexed the same way.
    pub fn bids(&self) -> &[Bid] {
        &self.bids
    }

    pub fn len(&self) -> usize {
        self.bids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bids.is_empty()
    }

    /// 1-based rank of a bid within its sequence.
    pub fn rank(&self, bid_index: usize) -> usize {
        self.rank[bid_index]
    }

    /// Bid indices of one sequence, by rank.
    pub fn sequence(&self, ap: ApId, vm: VmTypeId) -> &[usize] {
        self.sequences.get(&(ap, vm)).map_or(&[], Vec::as_slice)
    }

    pub fn sequences(&self) -> impl Iterator<Item = ((ApId, VmTypeId), &[usize])> {
        self.sequences.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Prices of one sequence, by rank.
    pub fn prices(&self, ap: ApId, vm: VmTypeId) -> Vec<Money> {
        self.sequence(ap, vm)
            .iter()
            .map(|&i| self.bids[i].price)
            .collect()
    }

    pub fn index_of(&self, id: BidId) -> Option<usize> {
        self.bids.binary_search_by_key(&id, |b| b.id).ok()
    }

    /// Indices of bids that could be served at `cloudlet` (their AP reaches it).
    pub fn serveable_at(&self, system: &System, cloudlet: CloudletId) -> Vec<usize> {
        (0..self.bids.len())
            .filter(|&i| {
                system
                    .topology
                    .reachable_cloudlets(self.bids[i].ap)
                    .is_ok_and(|r| r.iter().any(|(c, _)| *c == cloudlet))
            })
            .collect()
    }
}

/// Where a served bid runs: PM `instance` (0-based) of `pm_type` at `cloudlet`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Placement {
    pub cloudlet: CloudletId,
    pub pm_type: PmTypeId,
    pub instance: u32,
}

/// The `(x, y, z)` decision triple. `served` and `placement` are indexed by
/// bid index in the book; `powered` holds the on/off flag of each PM instance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Solution {
    pub served: Vec<bool>,
    pub placement: Vec<Option<Placement>>,
    pub powered: BTreeMap<(CloudletId, PmTypeId), Vec<bool>>,
}

impl Solution {
    pub fn empty(book: &BidBook) -> Self {
        Solution {
            served: vec![false; book.len()],
            placement: vec![None; book.len()],
            powered: BTreeMap::new(),
        }
    }

    /// Builds a solution whose served set is exactly the placed bids and whose
    /// powered PMs are the index prefix covering every used instance.
    pub fn from_placements(placement: Vec<Option<Placement>>) -> Self {
        let served = placement.iter().map(Option::is_some).collect();
        let mut powered: BTreeMap<(CloudletId, PmTypeId), Vec<bool>> = BTreeMap::new();
        for p in placement.iter().flatten() {
            let v = powered.entry((p.cloudlet, p.pm_type)).or_default();
            let need = p.instance as usize + 1;
            if v.len() < need {
                v.resize(need, true);
            }
        }
        Solution {
            served,
            placement,
            powered,
        }
    }

    pub fn served_count(&self) -> usize {
        self.served.iter().filter(|s| **s).count()
    }

    pub fn powered_count(&self) -> usize {
        self.powered.values().flatten().filter(|y| **y).count()
    }

    fn is_powered(&self, p: &Placement) -> bool {
        self.powered
            .get(&(p.cloudlet, p.pm_type))
            .and_then(|v| v.get(p.instance as usize))
            .copied()
            .unwrap_or(false)
    }

    /// Number of served bids in one sequence, if the served flags form a
    /// prefix of it.
    pub fn cut_point(&self, book: &BidBook, ap: ApId, vm: VmTypeId) -> Result<usize, AuctionError> {
        let seq = book.sequence(ap, vm);
        let k = seq.iter().take_while(|&&i| self.served[i]).count();
        if let Some(pos) = seq[k..].iter().position(|&i| self.served[i]) {
            return Err(AuctionError::NonMonotone {
                ap: ap.0,
                vm: vm.0,
                rank: k + pos + 1,
            });
        }
        Ok(k)
    }

    /// Clearing price per sequence with at least one served bid: the
    /// willingness price of the last served rank.
    pub fn local_prices(
        &self,
        book: &BidBook,
    ) -> Result<BTreeMap<(ApId, VmTypeId), Money>, AuctionError> {
        let mut out = BTreeMap::new();
        for ((ap, vm), seq) in book.sequences() {
            let k = self.cut_point(book, ap, vm)?;
            if k > 0 {
                out.insert((ap, vm), book.bids()[seq[k - 1]].price);
            }
        }
        Ok(out)
    }

    fn check_shape(&self, book: &BidBook) -> Result<(), AuctionError> {
        if self.served.len() != book.len() {
            return Err(AuctionError::Shape("served"));
        }
        if self.placement.len() != book.len() {
            return Err(AuctionError::Shape("placement"));
        }
        Ok(())
    }
}

/// Per-unit cost coefficients of the objective, each rounded once onto the
/// money grid so that the objective is additive over bids and PMs.
#[derive(Debug, Clone)]
pub struct CostTable {
    n_cloudlets: usize,
    n_aps: usize,
    /// `[vm][cloudlet]`: energy of one VM for one frame.
    vm_energy: Vec<Money>,
    /// `[pm][cloudlet]`: idle energy of one powered PM for one frame.
    pm_idle: Vec<Money>,
    /// `[vm][ap][cloudlet]`: lost revenue of one bid.
    lost: Vec<Money>,
}

impl CostTable {
    pub fn new(system: &System) -> Self {
        let topo = &system.topology;
        let cat = &system.catalog;
        let nc = topo.cloudlets.len();
        let na = topo.aps.len();
        let energy_factor = topo.frame_hours() * topo.pue;
        let mut vm_energy = Vec::with_capacity(cat.vm_types.len() * nc);
        let mut lost = Vec::with_capacity(cat.vm_types.len() * na * nc);
        for vm in &cat.vm_types {
            for c in &topo.cloudlets {
                vm_energy.push(Money::from_f64(
                    energy_factor * c.electricity_price * vm.peak_power_kw,
                ));
            }
            let util = vm.utilization_bound(topo.frame_length_s);
            for a in 0..na {
                for c in 0..nc {
                    lost.push(Money::from_f64(
                        topo.qos_weight(ApId(a), CloudletId(c)) * util,
                    ));
                }
            }
        }
        let pm_idle = cat
            .pm_types
            .iter()
            .flat_map(|pm| {
                topo.cloudlets.iter().map(move |c| {
                    Money::from_f64(energy_factor * c.electricity_price * pm.idle_power_kw)
                })
            })
            .collect();
        CostTable {
            n_cloudlets: nc,
            n_aps: na,
            vm_energy,
            pm_idle,
            lost,
        }
    }

    pub fn vm_energy(&self, vm: VmTypeId, c: CloudletId) -> Money {
        self.vm_energy[vm.0 * self.n_cloudlets + c.0]
    }

    pub fn pm_idle(&self, pm: PmTypeId, c: CloudletId) -> Money {
        self.pm_idle[pm.0 * self.n_cloudlets + c.0]
    }

    pub fn lost(&self, vm: VmTypeId, ap: ApId, c: CloudletId) -> Money {
        self.lost[(vm.0 * self.n_aps + ap.0) * self.n_cloudlets + c.0]
    }

    /// Energy plus lost revenue of serving one `(ap, vm)` bid at `c`.
    pub fn bid_cost(&self, vm: VmTypeId, ap: ApId, c: CloudletId) -> Money {
        self.vm_energy(vm, c) + self.lost(vm, ap, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ProfitBreakdown {
    pub revenue: Money,
    pub electricity_cost: Money,
    pub lost_revenue: Money,
    pub profit: Money,
}

/// Revenue as the telescoping sum over served ranks,
/// `x_k * (k * e_k - (k - 1) * e_{k-1})`, with the `k = 1` predecessor term
/// taken as zero.
pub fn revenue(solution: &Solution, book: &BidBook) -> Result<Money, AuctionError> {
    solution.check_shape(book)?;
    let mut total = Money::ZERO;
    for ((ap, vm), seq) in book.sequences() {
        solution.cut_point(book, ap, vm)?;
        let mut prev = Money::ZERO;
        for (k0, &i) in seq.iter().enumerate() {
            let k = k0 as i64 + 1;
            let e = book.bids()[i].price;
            if solution.served[i] {
                total += e * k - prev * (k - 1);
            }
            prev = e;
        }
    }
    Ok(total)
}

fn placement_ok(solution: &Solution, book: &BidBook, system: &System) -> Result<(), AuctionError> {
    solution.check_shape(book)?;
    let nc = system.topology.cloudlets.len();
    let np = system.catalog.pm_types.len();
    for (i, p) in solution.placement.iter().enumerate() {
        if let Some(p) = p {
            if p.cloudlet.0 >= nc || p.pm_type.0 >= np || !solution.is_powered(p) {
                return Err(AuctionError::BadPlacement {
                    bid: book.bids()[i].id,
                });
            }
        }
    }
    Ok(())
}

fn powered_pairs<'s>(
    solution: &'s Solution,
    system: &System,
) -> impl Iterator<Item = (CloudletId, PmTypeId, usize)> + 's {
    let nc = system.topology.cloudlets.len();
    let np = system.catalog.pm_types.len();
    solution
        .powered
        .iter()
        .filter(move |((c, p), _)| c.0 < nc && p.0 < np)
        .map(|((c, p), ys)| (*c, *p, ys.iter().filter(|y| **y).count()))
}

/// Electricity cost of one frame on the money grid.
pub fn electricity_cost(
    solution: &Solution,
    book: &BidBook,
    system: &System,
    costs: &CostTable,
) -> Result<Money, AuctionError> {
    placement_ok(solution, book, system)?;
    let vm_part: Money = solution
        .placement
        .iter()
        .zip(book.bids())
        .filter_map(|(p, b)| p.map(|p| costs.vm_energy(b.vm_type, p.cloudlet)))
        .sum();
    let idle_part: Money = powered_pairs(solution, system)
        .map(|(c, p, on)| costs.pm_idle(p, c) * on as i64)
        .sum();
    Ok(vm_part + idle_part)
}

/// Electricity cost in plain floating point, without grid rounding.
pub fn electricity_cost_raw(
    solution: &Solution,
    book: &BidBook,
    system: &System,
) -> Result<f64, AuctionError> {
    placement_ok(solution, book, system)?;
    let topo = &system.topology;
    let mut sum = 0.0;
    for (p, b) in solution.placement.iter().zip(book.bids()) {
        if let Some(p) = p {
            sum += topo.cloudlet(p.cloudlet).electricity_price
                * system.catalog.vm(b.vm_type).peak_power_kw;
        }
    }
    for (c, p, on) in powered_pairs(solution, system) {
        sum += topo.cloudlet(c).electricity_price * system.catalog.pm(p).idle_power_kw * on as f64;
    }
    Ok(topo.frame_hours() * topo.pue * sum)
}

/// QoS penalty of bids placed off the field tier.
pub fn lost_revenue(
    solution: &Solution,
    book: &BidBook,
    system: &System,
    costs: &CostTable,
) -> Result<Money, AuctionError> {
    solution.check_shape(book)?;
    let nc = system.topology.cloudlets.len();
    Ok(solution
        .placement
        .iter()
        .zip(book.bids())
        .filter_map(|(p, b)| {
            p.filter(|p| p.cloudlet.0 < nc)
                .map(|p| costs.lost(b.vm_type, b.ap, p.cloudlet))
        })
        .sum())
}

pub fn lost_revenue_raw(
    solution: &Solution,
    book: &BidBook,
    system: &System,
) -> Result<f64, AuctionError> {
    solution.check_shape(book)?;
    let topo = &system.topology;
    let nc = topo.cloudlets.len();
    Ok(solution
        .placement
        .iter()
        .zip(book.bids())
        .filter_map(|(p, b)| p.filter(|p| p.cloudlet.0 < nc).map(|p| (p, b)))
        .map(|(p, b)| {
            topo.qos_weight(b.ap, p.cloudlet)
                * system
                    .catalog
                    .vm(b.vm_type)
                    .utilization_bound(topo.frame_length_s)
        })
        .sum())
}

pub fn profit(
    solution: &Solution,
    book: &BidBook,
    system: &System,
    costs: &CostTable,
) -> Result<ProfitBreakdown, AuctionError> {
    let revenue = revenue(solution, book)?;
    let electricity_cost = electricity_cost(solution, book, system, costs)?;
    let lost_revenue = lost_revenue(solution, book, system, costs)?;
    Ok(ProfitBreakdown {
        revenue,
        electricity_cost,
        lost_revenue,
        profit: revenue - electricity_cost - lost_revenue,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Constraint {
    Assignment,
    PmCapacity,
    LastMile,
    Aggregation,
    Backhaul,
    PricePrefix,
    PowerOrder,
    ServedShape,
    PlacementShape,
    PowerBound,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConstraintViolation {
    pub constraint: Constraint,
    pub detail: String,
}

impl fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.constraint, self.detail)
    }
}

/// Checks a candidate against every constraint of the placement program and
/// names each failure. Never fails itself.
pub fn check_feasibility(
    solution: &Solution,
    book: &BidBook,
    system: &System,
) -> Vec<ConstraintViolation> {
    let mut out = Vec::new();
    let mut push =
        |constraint, detail: String| out.push(ConstraintViolation { constraint, detail });
    let topo = &system.topology;
    let cat = &system.catalog;

    // Binarity is carried by the types; only the dimensions can be wrong.
    if solution.served.len() != book.len() {
        push(
            Constraint::ServedShape,
            format!(
                "x has {} entries for {} bids",
                solution.served.len(),
                book.len()
            ),
        );
    }
    if solution.placement.len() != book.len() {
        push(
            Constraint::PlacementShape,
            format!(
                "z has {} entries for {} bids",
                solution.placement.len(),
                book.len()
            ),
        );
    }
    if solution.served.len() != book.len() || solution.placement.len() != book.len() {
        return out;
    }
    let n_bids = book.len();

    for (&(c, p), ys) in &solution.powered {
        let bound = topo
            .cloudlets
            .get(c.0)
            .map_or(0, |cl| cl.pm_count(p) as usize)
            .min(n_bids);
        if ys.iter().enumerate().any(|(m, y)| *y && m >= bound) {
            push(
                Constraint::PowerBound,
                format!(
                    "PM type #{} at cloudlet #{} powered beyond index bound {bound}",
                    p.0, c.0
                ),
            );
        }
        if let Some(m) = ys.windows(2).position(|w| w[1] && !w[0]) {
            push(
                Constraint::PowerOrder,
                format!(
                    "PM {} of type #{} at cloudlet #{} is on while PM {} is off",
                    m + 2,
                    p.0,
                    c.0,
                    m + 1
                ),
            );
        }
    }

    // Assignments and per-PM loads.
    let mut loads: BTreeMap<Placement, Vec<f64>> = BTreeMap::new();
    let mut last_mile = vec![0u128; topo.aps.len()];
    let mut aggregation = vec![0u128; topo.shallow_sites.len()];
    let mut backhaul = 0u128;
    for (i, b) in book.bids().iter().enumerate() {
        let x = solution.served[i];
        match (x, solution.placement[i]) {
            (false, None) => {}
            (true, None) => push(
                Constraint::Assignment,
                format!("bid {} is served but not assigned", b.id),
            ),
            (false, Some(_)) => push(
                Constraint::Assignment,
                format!("bid {} is assigned but not served", b.id),
            ),
            (true, Some(p)) => {
                let tier = topo
                    .reachable_cloudlets(b.ap)
                    .ok()
                    .and_then(|r| r.iter().find(|(c, _)| *c == p.cloudlet).map(|(_, t)| *t));
                let Some(tier) = tier else {
                    push(
                        Constraint::Assignment,
                        format!("bid {} assigned to a cloudlet its AP cannot reach", b.id),
                    );
                    continue;
                };
                let bound = topo
                    .cloudlet(p.cloudlet)
                    .pm_count(p.pm_type)
                    .min(n_bids as u32);
                if p.instance >= bound {
                    push(
                        Constraint::Assignment,
                        format!("bid {} assigned to nonexistent PM {}", b.id, p.instance + 1),
                    );
                    continue;
                }
                let vm = cat.vm(b.vm_type);
                let load = loads
                    .entry(p)
                    .or_insert_with(|| vec![0.0; cat.resources.len()]);
                for (l, d) in load.iter_mut().zip(&vm.demand) {
                    *l += d;
                }
                let r_min = vm.base_bandwidth as u128;
                if tier != Tier::Field {
                    last_mile[b.ap.0] += r_min;
                }
                if tier == Tier::Deep {
                    if let Some(s) = topo.shallow_site_of(b.ap) {
                        aggregation[s] += r_min;
                    }
                    backhaul += r_min;
                }
            }
        }
    }
    for (p, load) in &loads {
        let on = solution.is_powered(p);
        let pm = cat.pm(p.pm_type);
        for (r, (l, s)) in load.iter().zip(&pm.supply).enumerate() {
            let supply = if on { *s } else { 0.0 };
            if !fits(*l, supply) {
                push(
                    Constraint::PmCapacity,
                    format!(
                        "{} demand {l} exceeds supply {supply} on PM {} of type {} at {}",
                        cat.resources[r],
                        p.instance + 1,
                        pm.name,
                        topo.cloudlet(p.cloudlet).name
                    ),
                );
            }
        }
    }
    for (a, used) in last_mile.iter().enumerate() {
        let cap = topo.link_capacity(crate::model::Link::LastMile(ApId(a))) as u128;
        if *used > cap {
            push(
                Constraint::LastMile,
                format!(
                    "last-mile link of {} carries {used} > {cap} bit/s",
                    topo.aps[a].name
                ),
            );
        }
    }
    for (s, used) in aggregation.iter().enumerate() {
        let cap = topo.shallow_sites[s].aggregation_capacity as u128;
        if *used > cap {
            push(
                Constraint::Aggregation,
                format!("aggregation link #{s} carries {used} > {cap} bit/s"),
            );
        }
    }
    if backhaul > topo.backhaul_capacity as u128 {
        push(
            Constraint::Backhaul,
            format!(
                "backhaul carries {backhaul} > {} bit/s",
                topo.backhaul_capacity
            ),
        );
    }
    for ((ap, vm), _) in book.sequences() {
        if let Err(AuctionError::NonMonotone { rank, .. }) = solution.cut_point(book, ap, vm) {
            push(
                Constraint::PricePrefix,
                format!(
                    "rank {rank} served out of order at {}/{}",
                    topo.aps[ap.0].name,
                    cat.vm(vm).name
                ),
            );
        }
    }
    out
}
