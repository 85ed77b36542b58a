//! Exact profit maximization for small instances.
//!
//! The served set is fully described by one cut point per `(AP, VM type)`
//! sequence, so both solvers search over cut points and solve a packing
//! subproblem (which PM at which cloudlet hosts each served bid) for the
//! resulting served set. [`solve_exhaustive`] enumerates every cut vector and
//! packs bid by bid; [`solve_bnb`] prunes cut vectors with a revenue bound and
//! packs by per-PM count patterns.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use crate::auction::{
    self, AuctionError, BidBook, CostTable, Placement, ProfitBreakdown, Solution,
};
use crate::model::{fits, ApId, CloudletId, PmTypeId, System, Tier, Violation, VmTypeId};
use crate::money::Money;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverLimits {
    /// Largest bid count [`solve_exhaustive`] accepts.
    pub exhaustive_max_bids: usize,
    /// Search nodes (cut-point and packing nodes together).
    pub node_budget: u64,
    pub time_budget: Option<Duration>,
}

impl Default for SolverLimits {
    fn default() -> Self {
        SolverLimits {
            exhaustive_max_bids: 12,
            node_budget: 20_000_000,
            time_budget: Some(Duration::from_secs(30)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolveError {
    #[error("exhaustive mode accepts at most {limit} bids, got {bids}")]
    GuardExceeded { bids: usize, limit: usize },
    #[error("solver limits must be positive")]
    BadLimits,
    #[error("system is invalid: {}", .0.first().map(|v| v.to_string()).unwrap_or_default())]
    InvalidSystem(Vec<Violation>),
    #[error(transparent)]
    Auction(#[from] AuctionError),
}

#[derive(Debug, Clone)]
pub struct Instance<'a> {
    pub system: &'a System,
    pub book: &'a BidBook,
    pub costs: CostTable,
    pub limits: SolverLimits,
}

impl<'a> Instance<'a> {
    pub fn new(
        system: &'a System,
        book: &'a BidBook,
        limits: SolverLimits,
    ) -> Result<Self, SolveError> {
        if limits.exhaustive_max_bids == 0
            || limits.node_budget == 0
            || limits.time_budget == Some(Duration::ZERO)
        {
            return Err(SolveError::BadLimits);
        }
        let violations = system.validate();
        if !violations.is_empty() {
            return Err(SolveError::InvalidSystem(violations));
        }
        Ok(Instance {
            system,
            book,
            costs: CostTable::new(system),
            limits,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: Solution,
    pub objective: Money,
    pub breakdown: ProfitBreakdown,
    /// Set when the search finished without hitting a budget.
    pub optimal: bool,
    pub nodes: u64,
    pub wall: Duration,
}

/// One `(AP, VM type)` sequence.
#[derive(Debug, Clone)]
struct Group {
    ap: ApId,
    vm: VmTypeId,
    bids: Vec<usize>,
    prices: Vec<Money>,
    r_min: u64,
    /// Link indices traversed when hosted at the field, shallow, deep tier.
    paths: [Vec<usize>; 3],
}

impl Group {
    /// Telescoped revenue of serving the first `k` bids.
    fn revenue(&self, k: usize) -> Money {
        if k == 0 {
            Money::ZERO
        } else {
            self.prices[k - 1] * k as i64
        }
    }
}

/// A PM type at a cloudlet, with instances indexed `0..max_instances`.
#[derive(Debug, Clone)]
struct Slot {
    cloudlet: CloudletId,
    tier: Tier,
    pm: PmTypeId,
    max_instances: u32,
    idle: Money,
    supply: Vec<f64>,
}

/// Tables shared by both solvers.
struct Layout {
    groups: Vec<Group>,
    slots: Vec<Slot>,
    /// `hosts[g][s]`: per-bid cost when slot `s` can host group `g`.
    hosts: Vec<Vec<Option<Money>>>,
    demand: Vec<Vec<f64>>,
    link_caps: Vec<u64>,
}

impl Layout {
    fn new(inst: &Instance<'_>) -> Self {
        let sys = inst.system;
        let topo = &sys.topology;
        let book = inst.book;
        let n_bids = book.len() as u32;
        let groups: Vec<Group> = book
            .sequences()
            .map(|((ap, vm), seq)| {
                let reach = topo.reachable_cloudlets(ap).expect("validated");
                let paths = reach.map(|(c, _)| {
                    topo.links_on_path(ap, c)
                        .expect("validated")
                        .into_iter()
                        .map(|l| topo.link_index(l))
                        .collect()
                });
                Group {
                    ap,
                    vm,
                    bids: seq.to_vec(),
                    prices: seq.iter().map(|&i| book.bids()[i].price).collect(),
                    r_min: sys.catalog.vm(vm).base_bandwidth,
                    paths,
                }
            })
            .collect();
        // Field, then shallow, then deep; cloudlet index, then PM type index.
        let mut order: Vec<usize> = (0..topo.cloudlets.len()).collect();
        order.sort_by_key(|&c| (topo.cloudlets[c].tier, c));
        let mut slots = Vec::new();
        for c in order {
            let cl = &topo.cloudlets[c];
            let mut inv = cl.pm_inventory.clone();
            inv.sort_by_key(|(p, _)| *p);
            for (p, count) in inv {
                let max_instances = count.min(n_bids);
                if max_instances == 0 {
                    continue;
                }
                slots.push(Slot {
                    cloudlet: CloudletId(c),
                    tier: cl.tier,
                    pm: p,
                    max_instances,
                    idle: inst.costs.pm_idle(p, CloudletId(c)),
                    supply: sys.catalog.pm(p).supply.clone(),
                });
            }
        }
        let hosts = groups
            .iter()
            .map(|g| {
                let reach = topo.reachable_cloudlets(g.ap).expect("validated");
                let vm = sys.catalog.vm(g.vm);
                slots
                    .iter()
                    .map(|s| {
                        let ok = reach.iter().any(|(c, _)| *c == s.cloudlet)
                            && sys.catalog.pm(s.pm).can_host(vm);
                        ok.then(|| inst.costs.bid_cost(g.vm, g.ap, s.cloudlet))
                    })
                    .collect()
            })
            .collect();
        let demand = groups
            .iter()
            .map(|g| sys.catalog.vm(g.vm).demand.clone())
            .collect();
        let link_caps = topo
            .links()
            .into_iter()
            .map(|l| topo.link_capacity(l))
            .collect();
        Layout {
            groups,
            slots,
            hosts,
            demand,
            link_caps,
        }
    }

    /// Links a group's bids traverse when hosted at a tier.
    fn path(&self, g: usize, tier: Tier) -> &[usize] {
        &self.groups[g].paths[tier as usize]
    }

    /// Cheapest per-bid cost of a group over all hosting slots.
    fn min_bid_cost(&self, g: usize) -> Option<Money> {
        self.hosts[g].iter().flatten().copied().min()
    }
}

struct Budget {
    nodes: u64,
    limit: u64,
    deadline: Option<Instant>,
    exhausted: bool,
}

impl Budget {
    fn new(limits: &SolverLimits, start: Instant) -> Self {
        Budget {
            nodes: 0,
            limit: limits.node_budget,
            deadline: limits.time_budget.map(|d| start + d),
            exhausted: false,
        }
    }

    /// Counts one node; returns false once any budget is spent.
    fn tick(&mut self) -> bool {
        if self.exhausted {
            return false;
        }
        self.nodes += 1;
        if self.nodes > self.limit
            || (self.nodes.is_multiple_of(1024)
                && self.deadline.is_some_and(|d| Instant::now() >= d))
        {
            self.exhausted = true;
        }
        !self.exhausted
    }
}

fn finish(
    inst: &Instance<'_>,
    solution: Solution,
    search_objective: Money,
    optimal: bool,
    nodes: u64,
    start: Instant,
) -> Result<SolveReport, SolveError> {
    let breakdown = auction::profit(&solution, inst.book, inst.system, &inst.costs)?;
    debug_assert_eq!(
        breakdown.profit, search_objective,
        "incremental objective drifted"
    );
    Ok(SolveReport {
        solution,
        objective: breakdown.profit,
        breakdown,
        optimal,
        nodes,
        wall: start.elapsed(),
    })
}

// ---------------------------------------------------------------------------
// Exhaustive mode
// ---------------------------------------------------------------------------

/// Enumerates every cut vector and, for each, every packing of the served
/// bids. Refuses instances with more than `exhaustive_max_bids` bids.
pub fn solve_exhaustive(inst: &Instance<'_>) -> Result<SolveReport, SolveError> {
    let start = Instant::now();
    if inst.book.len() > inst.limits.exhaustive_max_bids {
        return Err(SolveError::GuardExceeded {
            bids: inst.book.len(),
            limit: inst.limits.exhaustive_max_bids,
        });
    }
    let layout = Layout::new(inst);
    let n_groups = layout.groups.len();
    let mut cuts = vec![0usize; n_groups];
    let mut best_profit = Money::ZERO;
    let mut best_placement: Vec<Option<Placement>> = vec![None; inst.book.len()];
    let mut nodes = 0u64;
    loop {
        let revenue: Money = layout
            .groups
            .iter()
            .zip(&cuts)
            .map(|(g, &k)| g.revenue(k))
            .sum();
        if revenue > best_profit {
            let served: Vec<usize> = cuts
                .iter()
                .enumerate()
                .flat_map(|(gi, &k)| std::iter::repeat_n(gi, k))
                .collect();
            let mut packer = BidPacker::new(&layout);
            packer.search(&served, 0);
            nodes += packer.nodes;
            if let Some((cost, targets)) = packer.best {
                let profit = revenue - cost;
                if profit > best_profit {
                    best_profit = profit;
                    best_placement = vec![None; inst.book.len()];
                    let mut next = vec![0usize; n_groups];
                    for (&gi, t) in served.iter().zip(targets) {
                        let bid = layout.groups[gi].bids[next[gi]];
                        next[gi] += 1;
                        best_placement[bid] = Some(t);
                    }
                }
            }
        }
        // Odometer over cut points.
        let mut d = 0;
        loop {
            if d == n_groups {
                let solution = Solution::from_placements(best_placement);
                return finish(inst, solution, best_profit, true, nodes, start);
            }
            if cuts[d] < layout.groups[d].bids.len() {
                cuts[d] += 1;
                break;
            }
            cuts[d] = 0;
            d += 1;
        }
    }
}

/// Assigns served bids one at a time to an already powered PM or to the next
/// unpowered instance of a reachable PM type, keeping the cheapest complete
/// assignment. Consecutive bids of the same group take non-decreasing targets.
struct BidPacker<'a> {
    layout: &'a Layout,
    /// `(slot, load)` per powered instance, in `opened` order per slot.
    opened: Vec<Vec<Vec<f64>>>,
    links: Vec<u128>,
    targets: Vec<(usize, u32)>,
    best: Option<(Money, Vec<Placement>)>,
    nodes: u64,
}

impl<'a> BidPacker<'a> {
    fn new(layout: &'a Layout) -> Self {
        BidPacker {
            layout,
            opened: vec![Vec::new(); layout.slots.len()],
            links: vec![0; layout.link_caps.len()],
            targets: Vec::new(),
            best: None,
            nodes: 0,
        }
    }

    fn search(&mut self, served: &[usize], i: usize) {
        self.nodes += 1;
        let layout = self.layout;
        if i == served.len() {
            let mut cost = Money::ZERO;
            for (&gi, &(s, _)) in served.iter().zip(&self.targets) {
                cost += layout.hosts[gi][s].expect("only hosting slots are chosen");
            }
            for (s, pms) in self.opened.iter().enumerate() {
                cost += layout.slots[s].idle * pms.len() as i64;
            }
            if self.best.as_ref().is_none_or(|(b, _)| cost < *b) {
                let placements = self
                    .targets
                    .iter()
                    .map(|&(s, m)| Placement {
                        cloudlet: layout.slots[s].cloudlet,
                        pm_type: layout.slots[s].pm,
                        instance: m,
                    })
                    .collect();
                self.best = Some((cost, placements));
            }
            return;
        }
        let g = served[i];
        let floor = if i > 0 && served[i - 1] == g {
            self.targets[i - 1]
        } else {
            (0, 0)
        };
        let demand = &layout.demand[g];
        for s in 0..layout.slots.len() {
            if layout.hosts[g][s].is_none() {
                continue;
            }
            let slot = &layout.slots[s];
            let links = layout.path(g, slot.tier);
            let r_min = layout.groups[g].r_min as u128;
            if links
                .iter()
                .any(|&l| self.links[l] + r_min > layout.link_caps[l] as u128)
            {
                continue;
            }
            let open = self.opened[s].len() as u32;
            let upper = if open < slot.max_instances {
                open + 1
            } else {
                open
            };
            for m in 0..upper {
                if (s, m) < floor {
                    continue;
                }
                let fresh = m == open;
                if fresh {
                    self.opened[s].push(vec![0.0; demand.len()]);
                }
                let saved = self.opened[s][m as usize].clone();
                let ok = saved
                    .iter()
                    .zip(demand)
                    .zip(&slot.supply)
                    .all(|((l, d), sup)| fits(l + d, *sup));
                if ok {
                    for (l, d) in self.opened[s][m as usize].iter_mut().zip(demand) {
                        *l += d;
                    }
                    for &l in links {
                        self.links[l] += r_min;
                    }
                    self.targets.push((s, m));
                    self.search(served, i + 1);
                    self.targets.pop();
                    for &l in links {
                        self.links[l] -= r_min;
                    }
                    self.opened[s][m as usize] = saved;
                }
                if fresh {
                    self.opened[s].pop();
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Branch and bound
// ---------------------------------------------------------------------------

/// PMs of one packing: `(slot, bids per group)` in opening order.
#[derive(Debug, Clone)]
struct Packing {
    cost: Money,
    pms: Vec<(usize, Vec<u32>)>,
}

#[derive(Debug, Clone)]
enum PackOutcome {
    Packed(Packing),
    Infeasible,
    /// Budget ran out; the best packing found so far, if any.
    Unknown(Option<Packing>),
}

/// Extra tables for pattern-based packing.
struct PatternTables {
    /// Groups each slot can host.
    slot_groups: Vec<Vec<usize>>,
    /// `min_cost_from[g][s]`: cheapest per-bid cost of `g` over slots `>= s`.
    min_cost_from: Vec<Vec<Option<Money>>>,
}

impl PatternTables {
    fn new(layout: &Layout) -> Self {
        let ns = layout.slots.len();
        let slot_groups = (0..ns)
            .map(|s| {
                (0..layout.groups.len())
                    .filter(|&g| layout.hosts[g][s].is_some())
                    .collect()
            })
            .collect();
        let min_cost_from = layout
            .hosts
            .iter()
            .map(|row| {
                let mut out = vec![None; ns + 1];
                for s in (0..ns).rev() {
                    out[s] = match (row[s], out[s + 1]) {
                        (Some(a), Some(b)) => Some(a.min(b)),
                        (a, b) => a.or(b),
                    };
                }
                out
            })
            .collect();
        PatternTables {
            slot_groups,
            min_cost_from,
        }
    }
}

/// Minimum-cost packing of a served-count vector. PMs are filled slot by
/// slot with count patterns; instances of one slot take non-increasing
/// patterns, and an empty pattern closes the slot.
struct CountPacker<'a> {
    layout: &'a Layout,
    tables: &'a PatternTables,
    budget: &'a mut Budget,
    remaining: Vec<u32>,
    links: Vec<u128>,
    cost: Money,
    current: Vec<(usize, Vec<u32>)>,
    best: Option<Packing>,
}

impl<'a> CountPacker<'a> {
    fn run(
        layout: &'a Layout,
        tables: &'a PatternTables,
        budget: &'a mut Budget,
        counts: &[u32],
    ) -> PackOutcome {
        let mut packer = CountPacker {
            layout,
            tables,
            budget,
            remaining: counts.to_vec(),
            links: vec![0; layout.link_caps.len()],
            cost: Money::ZERO,
            current: Vec::new(),
            best: None,
        };
        if packer.quick_infeasible() {
            return PackOutcome::Infeasible;
        }
        packer.search(0, 0, None);
        match (packer.budget.exhausted, packer.best) {
            (true, best) => PackOutcome::Unknown(best),
            (false, Some(p)) => PackOutcome::Packed(p),
            (false, None) => PackOutcome::Infeasible,
        }
    }

    /// Necessary condition: each group alone fits into its hosting PMs.
    fn quick_infeasible(&self) -> bool {
        let layout = self.layout;
        self.remaining.iter().enumerate().any(|(g, &n)| {
            if n == 0 {
                return false;
            }
            let d = &layout.demand[g];
            let room: u64 = (0..layout.slots.len())
                .filter(|&s| layout.hosts[g][s].is_some())
                .map(|s| {
                    let slot = &layout.slots[s];
                    per_pm_max(d, &slot.supply, n) as u64 * slot.max_instances as u64
                })
                .sum();
            room < n as u64
        })
    }

    fn lower_bound(&self, s: usize) -> Option<Money> {
        let mut lb = Money::ZERO;
        for (g, &n) in self.remaining.iter().enumerate() {
            if n > 0 {
                lb += self.tables.min_cost_from[g][s]? * n as i64;
            }
        }
        Some(lb)
    }

    fn search(&mut self, s: usize, opened: u32, prev: Option<&[u32]>) {
        if !self.budget.tick() {
            return;
        }
        if self.remaining.iter().all(|&n| n == 0) {
            if self.best.as_ref().is_none_or(|b| self.cost < b.cost) {
                self.best = Some(Packing {
                    cost: self.cost,
                    pms: self.current.clone(),
                });
            }
            return;
        }
        if s == self.layout.slots.len() {
            return;
        }
        let Some(lb) = self.lower_bound(s) else {
            return;
        };
        if self.best.as_ref().is_some_and(|b| self.cost + lb >= b.cost) {
            return;
        }
        if opened < self.layout.slots[s].max_instances {
            let width = self.tables.slot_groups[s].len();
            let mut pattern = vec![0u32; width];
            let load = vec![0.0; self.layout.slots[s].supply.len()];
            self.patterns(s, opened, prev, 0, true, &load, &mut pattern);
        }
        self.search(s + 1, 0, None);
    }

    #[allow(clippy::too_many_arguments)]
    fn patterns(
        &mut self,
        s: usize,
        opened: u32,
        prev: Option<&[u32]>,
        j: usize,
        tight: bool,
        load: &[f64],
        pattern: &mut Vec<u32>,
    ) {
        if self.budget.exhausted {
            return;
        }
        let layout = self.layout;
        let tables = self.tables;
        let slot = &layout.slots[s];
        if j == pattern.len() {
            if pattern.iter().all(|&c| c == 0) {
                return;
            }
            let mut delta = slot.idle;
            for (&g, &c) in tables.slot_groups[s].iter().zip(pattern.iter()) {
                delta += layout.hosts[g][s].expect("hostable") * c as i64;
            }
            self.cost += delta;
            self.current.push((s, self.expand(s, pattern)));
            let snapshot = pattern.clone();
            self.search(s, opened + 1, Some(&snapshot));
            self.current.pop();
            self.cost -= delta;
            return;
        }
        let g = tables.slot_groups[s][j];
        let d = &layout.demand[g];
        let r_min = layout.groups[g].r_min as u128;
        let path = layout.path(g, slot.tier);
        let mut max_c = self.remaining[g];
        if tight {
            if let Some(p) = prev {
                max_c = max_c.min(p[j]);
            }
        }
        for &l in path {
            if let Some(room) = (layout.link_caps[l] as u128)
                .saturating_sub(self.links[l])
                .checked_div(r_min)
            {
                max_c = max_c.min(room.min(u32::MAX as u128) as u32);
            }
        }
        while max_c > 0 && !fits_all(load, d, max_c, &slot.supply) {
            max_c -= 1;
        }
        for c in (0..=max_c).rev() {
            let next_load: Vec<f64> = load.iter().zip(d).map(|(l, x)| l + x * c as f64).collect();
            for &l in path {
                self.links[l] += r_min * c as u128;
            }
            self.remaining[g] -= c;
            pattern[j] = c;
            let still_tight = tight && prev.is_some_and(|p| p[j] == c);
            self.patterns(s, opened, prev, j + 1, still_tight, &next_load, pattern);
            pattern[j] = 0;
            self.remaining[g] += c;
            for &l in path {
                self.links[l] -= r_min * c as u128;
            }
            if self.budget.exhausted {
                return;
            }
        }
    }

    /// Pattern over `slot_groups[s]` to a dense per-group count vector.
    fn expand(&self, s: usize, pattern: &[u32]) -> Vec<u32> {
        let mut dense = vec![0; self.remaining.len()];
        for (&g, &c) in self.tables.slot_groups[s].iter().zip(pattern) {
            dense[g] = c;
        }
        dense
    }
}

fn fits_all(load: &[f64], demand: &[f64], count: u32, supply: &[f64]) -> bool {
    load.iter()
        .zip(demand)
        .zip(supply)
        .all(|((l, d), s)| fits(l + d * count as f64, *s))
}

/// Most copies of one VM shape a single PM holds, capped at `cap`.
fn per_pm_max(demand: &[f64], supply: &[f64], cap: u32) -> u32 {
    let zero = vec![0.0; demand.len()];
    let mut n = cap;
    while n > 0 && !fits_all(&zero, demand, n, supply) {
        n -= 1;
    }
    n
}

struct Bnb<'a> {
    layout: &'a Layout,
    tables: PatternTables,
    budget: Budget,
    order: Vec<usize>,
    /// `candidates[g]`: cut points to try, most promising first.
    candidates: Vec<Vec<usize>>,
    /// Optimistic profit of the groups at depth `>= d`.
    suffix_bound: Vec<Money>,
    mu: Vec<Option<Money>>,
    counts: Vec<u32>,
    memo: HashMap<Vec<u32>, PackOutcome>,
    incumbent: Money,
    incumbent_packing: Packing,
}

impl Bnb<'_> {
    fn pack(&mut self) -> PackOutcome {
        if let Some(p) = self.memo.get(&self.counts) {
            return p.clone();
        }
        let out = CountPacker::run(self.layout, &self.tables, &mut self.budget, &self.counts);
        self.memo.insert(self.counts.clone(), out.clone());
        out
    }

    fn dfs(&mut self, d: usize, revenue: Money, cost_lb: Money, feasible: Option<Packing>) {
        if d == self.order.len() {
            if let Some(p) = feasible {
                let profit = revenue - p.cost;
                if profit > self.incumbent {
                    self.incumbent = profit;
                    self.incumbent_packing = p;
                }
            }
            return;
        }
        if !self.budget.tick() {
            return;
        }
        let g = self.order[d];
        for ci in 0..self.candidates[g].len() {
            if self.budget.exhausted {
                break;
            }
            let k = self.candidates[g][ci];
            let rev = revenue + self.layout.groups[g].revenue(k);
            self.counts[g] = k as u32;
            let (lb, packing) = if k == 0 {
                (cost_lb, feasible.clone())
            } else {
                match self.pack() {
                    PackOutcome::Infeasible => continue,
                    PackOutcome::Packed(p) => (p.cost, Some(p)),
                    PackOutcome::Unknown(p) => {
                        (cost_lb + self.mu[g].unwrap_or(Money::ZERO) * k as i64, p)
                    }
                }
            };
            let bound = rev - lb + self.suffix_bound[d + 1];
            if bound <= self.incumbent {
                continue;
            }
            self.dfs(d + 1, rev, lb, packing);
        }
        self.counts[g] = 0;
    }
}

/// Depth-first branch and bound over cut points. Groups are visited in
/// decreasing order of their optimistic profit; a node is pruned when fixed
/// revenue minus the exact packing cost of the fixed bids plus the optimistic
/// profit of the unfixed groups cannot beat the incumbent.
pub fn solve_bnb(inst: &Instance<'_>) -> Result<SolveReport, SolveError> {
    let start = Instant::now();
    let layout = Layout::new(inst);
    let n = layout.groups.len();
    let mu: Vec<Option<Money>> = (0..n).map(|g| layout.min_bid_cost(g)).collect();
    let mut candidates = Vec::with_capacity(n);
    let mut optimistic = Vec::with_capacity(n);
    for (g, group) in layout.groups.iter().enumerate() {
        let score = |k: usize| group.revenue(k) - mu[g].unwrap_or(Money::ZERO) * k as i64;
        let mut ks: Vec<usize> = match mu[g] {
            Some(_) => (0..=group.bids.len()).collect(),
            None => vec![0],
        };
        ks.sort_by(|&a, &b| score(b).cmp(&score(a)).then(b.cmp(&a)));
        optimistic.push(score(ks[0]).max(Money::ZERO));
        candidates.push(ks);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| optimistic[b].cmp(&optimistic[a]).then(a.cmp(&b)));
    let mut suffix_bound = vec![Money::ZERO; n + 1];
    for d in (0..n).rev() {
        suffix_bound[d] = suffix_bound[d + 1] + optimistic[order[d]];
    }
    let mut bnb = Bnb {
        layout: &layout,
        tables: PatternTables::new(&layout),
        budget: Budget::new(&inst.limits, start),
        order,
        candidates,
        suffix_bound,
        mu,
        counts: vec![0; n],
        memo: HashMap::new(),
        incumbent: Money::ZERO,
        incumbent_packing: Packing {
            cost: Money::ZERO,
            pms: Vec::new(),
        },
    };
    if bnb.suffix_bound[0] > Money::ZERO {
        let empty = Packing {
            cost: Money::ZERO,
            pms: Vec::new(),
        };
        bnb.dfs(0, Money::ZERO, Money::ZERO, Some(empty));
    }
    let optimal = !bnb.budget.exhausted;
    let nodes = bnb.budget.nodes;
    let objective = bnb.incumbent;

    let mut placement = vec![None; inst.book.len()];
    let mut next = vec![0usize; n];
    let mut instance_of_slot = vec![0u32; layout.slots.len()];
    for (s, counts) in &bnb.incumbent_packing.pms {
        let m = instance_of_slot[*s];
        instance_of_slot[*s] += 1;
        for (g, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                let bid = layout.groups[g].bids[next[g]];
                next[g] += 1;
                placement[bid] = Some(Placement {
                    cloudlet: layout.slots[*s].cloudlet,
                    pm_type: layout.slots[*s].pm,
                    instance: m,
                });
            }
        }
    }
    finish(
        inst,
        Solution::from_placements(placement),
        objective,
        optimal,
        nodes,
        start,
    )
}
