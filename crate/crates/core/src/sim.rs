//! Two-time-scale engine: an auction per frame, bandwidth allocation per
//! slot.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Triangular};
use serde::Serialize;

use crate::auction::{
    check_feasibility, profit, AuctionError, Bid, BidBook, ConstraintViolation, CostTable, Solution,
};
use crate::bandwidth::{solve_allocation, FlowError, FlowSet};
use crate::exact::{solve_bnb, Instance, SolveError, SolverLimits};
use crate::heuristics::{run_heuristic, HeuristicOptions};
use crate::model::{ApId, System, Tier, VmTypeId};
use crate::money::Money;
use crate::scenario::BandwidthConfig;

/// Triangular price law `(min, mode, max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleLaw {
    pub min: f64,
    pub mode: f64,
    pub max: f64,
}

impl TriangleLaw {
    pub fn under_cap(cap: f64) -> Self {
        TriangleLaw {
            min: 0.0,
            mode: 0.5 * cap,
            max: cap,
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match Triangular::new(self.min, self.max, self.mode) {
            Ok(d) => d.sample(rng),
            Err(_) => self.min,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Bids per frame, cycled when shorter than the run.
    pub bid_schedule: Vec<usize>,
    /// Relative share of each VM type, indexed like the catalog.
    pub mix: Vec<f64>,
    pub prices: Vec<TriangleLaw>,
    /// Probability that a persistent bid moves to a uniformly drawn AP
    /// between frames.
    pub mobility_rate: f64,
    pub persistent_bids: bool,
    /// Slot traffic is uniform on `[0, fraction * D * τ / T]`.
    pub traffic_fraction: f64,
    pub frames: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.bid_schedule.is_empty() {
            out.push("bid schedule is empty".to_string());
        }
        if self.mix.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || !self.mix.iter().any(|w| *w > 0.0)
        {
            out.push("mix ratios must be non-negative with at least one positive".to_string());
        }
        for (i, law) in self.prices.iter().enumerate() {
            if !(law.min >= 0.0
                && law.min <= law.mode
                && law.mode <= law.max
                && law.max.is_finite())
            {
                out.push(format!(
                    "price law {i} must satisfy 0 <= min <= mode <= max"
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.mobility_rate) {
            out.push("mobility rate must lie in [0, 1]".to_string());
        }
        if !(self.traffic_fraction >= 0.0 && self.traffic_fraction.is_finite()) {
            out.push("traffic fraction must be >= 0".to_string());
        }
        if self.frames == 0 {
            out.push("at least one frame is required".to_string());
        }
        out
    }

    pub fn bids_in_frame(&self, frame: usize) -> usize {
        self.bid_schedule
            .get(frame % self.bid_schedule.len().max(1))
            .copied()
            .unwrap_or(0)
    }
}

/// Splits `total` by `weights` with largest-remainder rounding; remainder
/// ties go to the lower index.
pub fn type_counts(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum.is_nan() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Draws one frame of bids: VM types by the mix, APs uniformly, prices by
/// each type's triangular law. Ids start at `first_id`.
pub fn generate_bids(
    config: &GeneratorConfig,
    system: &System,
    frame: usize,
    rng: &mut ChaCha8Rng,
    first_id: u64,
) -> Vec<Bid> {
    let n_aps = system.topology.aps.len();
    let counts = type_counts(&config.mix, config.bids_in_frame(frame));
    let mut bids = Vec::new();
    let mut id = first_id;
    for (v, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let ap = ApId(rng.random_range(0..n_aps));
            let price = config.prices[v].sample(rng);
            bids.push(Bid {
                id,
                ap,
                vm_type: VmTypeId(v),
                price: Money::from_f64(price),
            });
            id += 1;
        }
    }
    bids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverChoice {
    #[default]
    Heuristic,
    Exact,
    /// Both solvers; the heuristic solution drives the slots.
    Both,
}

impl fmt::Display for SolverChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverChoice::Heuristic => "heuristic",
            SolverChoice::Exact => "exact",
            SolverChoice::Both => "both",
        })
    }
}

impl FromStr for SolverChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "heuristic" => Ok(SolverChoice::Heuristic),
            "exact" => Ok(SolverChoice::Exact),
            "both" => Ok(SolverChoice::Both),
            _ => Err(format!("unknown solver {s:?}")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Auction(#[from] AuctionError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("frame {frame}: {solver} solution violates {} constraint(s)", violations.len())]
    Infeasible {
        frame: usize,
        solver: String,
        violations: Vec<ConstraintViolation>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub solver: String,
    pub bids: usize,
    pub served: usize,
    pub served_ratio: f64,
    pub revenue: Money,
    pub electricity_cost: Money,
    pub lost_revenue: Money,
    pub profit: Money,
    pub dropped: Option<usize>,
    pub optimal: Option<bool>,
    pub nodes: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PriceRecord {
    pub frame: usize,
    pub solver: String,
    pub ap: String,
    pub vm_type: String,
    pub bids: usize,
    pub served: usize,
    pub price: Option<Money>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TimingRecord {
    pub frame: usize,
    pub solver: String,
    pub pricing_s: f64,
    pub distribution_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SlotRecord {
    pub frame: usize,
    pub slot: usize,
    pub flows: usize,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub feasibility: f64,
    pub complementary_slackness: f64,
    pub stationarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LinkRecord {
    pub frame: usize,
    pub slot: usize,
    pub link: String,
    pub load_bps: f64,
    pub capacity_bps: f64,
    pub utilization: f64,
    pub dual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AllocationRecord {
    pub frame: usize,
    pub slot: usize,
    pub bid: u64,
    pub cloudlet: String,
    pub traffic_bits: f64,
    pub rate_bps: f64,
    pub links: String,
    pub binding: String,
}

/// Everything one frame produced.
#[derive(Debug, Clone)]
pub struct FrameOutcome {
    pub book: BidBook,
    /// The solution the slots run on.
    pub solution: Solution,
    pub records: Vec<FrameRecord>,
    pub prices: Vec<PriceRecord>,
    pub timings: Vec<TimingRecord>,
    /// The exact solver stopped on its budget without proving optimality.
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SlotOutcome {
    pub slots: Vec<SlotRecord>,
    pub links: Vec<LinkRecord>,
    pub allocations: Vec<AllocationRecord>,
}

impl SlotOutcome {
    pub fn all_converged(&self) -> bool {
        self.slots.iter().all(|s| s.converged)
    }
}

pub struct Simulator<'a> {
    system: &'a System,
    config: GeneratorConfig,
    bandwidth: BandwidthConfig,
    pub limits: SolverLimits,
    pub heuristic: HeuristicOptions,
    bid_rng: ChaCha8Rng,
    traffic_rng: ChaCha8Rng,
    frame: usize,
    next_id: u64,
    bids: Vec<Bid>,
}

impl<'a> Simulator<'a> {
    pub fn new(system: &'a System, config: GeneratorConfig, bandwidth: BandwidthConfig) -> Self {
        let bid_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut traffic_rng = ChaCha8Rng::seed_from_u64(config.seed);
        traffic_rng.set_stream(1);
        Simulator {
            system,
            config,
            bandwidth,
            limits: SolverLimits::default(),
            heuristic: HeuristicOptions::default(),
            bid_rng,
            traffic_rng,
            frame: 0,
            next_id: 1,
            bids: Vec::new(),
        }
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    fn refresh_bids(&mut self) {
        let n_aps = self.system.topology.aps.len();
        if self.config.persistent_bids && self.frame > 0 {
            for b in &mut self.bids {
                if self.bid_rng.random_bool(self.config.mobility_rate) {
                    b.ap = ApId(self.bid_rng.random_range(0..n_aps));
                }
            }
        } else {
            self.bids = generate_bids(
                &self.config,
                self.system,
                self.frame,
                &mut self.bid_rng,
                self.next_id,
            );
            self.next_id += self.bids.len() as u64;
        }
    }

    /// Refreshes bids, runs the chosen solver(s) and checks feasibility.
    pub fn run_frame(&mut self, solver: SolverChoice) -> Result<FrameOutcome, SimError> {
        self.refresh_bids();
        let book = BidBook::new(self.bids.clone(), self.system)?;
        let outcome = self.evaluate(book, solver)?;
        self.frame += 1;
        Ok(outcome)
    }

    /// Runs the chosen solver(s) on a fixed bid book as the current frame.
    pub fn evaluate(&self, book: BidBook, solver: SolverChoice) -> Result<FrameOutcome, SimError> {
        let frame = self.frame;
        let mut records = Vec::new();
        let mut prices = Vec::new();
        let mut timings = Vec::new();
        let mut primary = None;
        let mut budget_exhausted = false;

        if matches!(solver, SolverChoice::Heuristic | SolverChoice::Both) {
            let run = run_heuristic(&book, self.system, self.heuristic);
            let name = "heuristic".to_string();
            self.assert_feasible(&run.solution, &book, &name)?;
            let mut rec = self.frame_record(&book, &run.solution, &name)?;
            rec.dropped = Some(run.dropped());
            records.push(rec);
            prices.extend(self.price_records(&book, &run.solution, &name)?);
            timings.push(TimingRecord {
                frame,
                solver: name,
                pricing_s: run.pricing_time.as_secs_f64(),
                distribution_s: run.distribution_time.as_secs_f64(),
                total_s: (run.pricing_time + run.distribution_time).as_secs_f64(),
            });
            primary = Some(run.solution);
        }
        if matches!(solver, SolverChoice::Exact | SolverChoice::Both) {
            let started = Instant::now();
            let inst = Instance::new(self.system, &book, self.limits)?;
            let report = solve_bnb(&inst)?;
            let name = "exact".to_string();
            self.assert_feasible(&report.solution, &book, &name)?;
            let mut rec = self.frame_record(&book, &report.solution, &name)?;
            rec.optimal = Some(report.optimal);
            rec.nodes = Some(report.nodes);
            budget_exhausted = !report.optimal;
            records.push(rec);
            prices.extend(self.price_records(&book, &report.solution, &name)?);
            timings.push(TimingRecord {
                frame,
                solver: name,
                pricing_s: 0.0,
                distribution_s: 0.0,
                total_s: started.elapsed().as_secs_f64(),
            });
            primary.get_or_insert(report.solution);
        }
        Ok(FrameOutcome {
            book,
            solution: primary.expect("at least one solver ran"),
            records,
            prices,
            timings,
            budget_exhausted,
        })
    }

    fn assert_feasible(
        &self,
        solution: &Solution,
        book: &BidBook,
        solver: &str,
    ) -> Result<(), SimError> {
        let violations = check_feasibility(solution, book, self.system);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(SimError::Infeasible {
                frame: self.frame,
                solver: solver.to_string(),
                violations,
            })
        }
    }

    fn frame_record(
        &self,
        book: &BidBook,
        solution: &Solution,
        solver: &str,
    ) -> Result<FrameRecord, SimError> {
        let costs = CostTable::new(self.system);
        let p = profit(solution, book, self.system, &costs)?;
        let served = solution.served_count();
        Ok(FrameRecord {
            frame: self.frame,
            solver: solver.to_string(),
            bids: book.len(),
            served,
            served_ratio: if book.is_empty() {
                0.0
            } else {
                served as f64 / book.len() as f64
            },
            revenue: p.revenue,
            electricity_cost: p.electricity_cost,
            lost_revenue: p.lost_revenue,
            profit: p.profit,
            dropped: None,
            optimal: None,
            nodes: None,
        })
    }

    fn price_records(
        &self,
        book: &BidBook,
        solution: &Solution,
        solver: &str,
    ) -> Result<Vec<PriceRecord>, SimError> {
        let topo = &self.system.topology;
        let cat = &self.system.catalog;
        let mut out = Vec::new();
        for ((ap, vm), seq) in book.sequences() {
            let k = solution.cut_point(book, ap, vm)?;
            out.push(PriceRecord {
                frame: self.frame,
                solver: solver.to_string(),
                ap: topo.aps[ap.0].name.clone(),
                vm_type: cat.vm(vm).name.clone(),
                bids: seq.len(),
                served: k,
                price: (k > 0).then(|| book.bids()[seq[k - 1]].price),
            });
        }
        Ok(out)
    }

    /// Runs every slot of the frame that produced `outcome`.
    pub fn run_slots(&mut self, outcome: &FrameOutcome) -> Result<SlotOutcome, SimError> {
        let system = self.system;
        let topo = &system.topology;
        let frame = self.frame.saturating_sub(1);
        let tau = topo.slot_length_s;
        let t = topo.frame_length_s;
        let links = topo.links();
        let mut out = SlotOutcome::default();
        for slot in 0..topo.slots_per_frame() {
            let mut traffic = vec![0.0; outcome.book.len()];
            for (i, p) in outcome.solution.placement.iter().enumerate() {
                let Some(p) = p else { continue };
                if topo.cloudlet(p.cloudlet).tier == Tier::Field {
                    continue;
                }
                let vm = system.catalog.vm(outcome.book.bids()[i].vm_type);
                let hi = self.config.traffic_fraction * vm.max_data_per_frame * tau / t;
                traffic[i] = if hi > 0.0 {
                    self.traffic_rng.random_range(0.0..=hi)
                } else {
                    0.0
                };
            }
            let flows = FlowSet::from_solution(
                system,
                &outcome.book,
                &outcome.solution,
                &traffic,
                self.bandwidth.bounds,
            );
            let alloc = solve_allocation(&flows, &self.bandwidth.tolerances)?;
            out.slots.push(SlotRecord {
                frame,
                slot,
                flows: flows.flows.len(),
                objective: alloc.objective,
                converged: alloc.converged,
                iterations: alloc.iterations,
                feasibility: alloc.report.feasibility,
                complementary_slackness: alloc.report.max_complementary_slackness(),
                stationarity: alloc.report.stationarity,
            });
            let loads = flows.link_loads(&alloc.rates);
            for (m, link) in links.iter().enumerate() {
                out.links.push(LinkRecord {
                    frame,
                    slot,
                    link: topo.link_name(*link),
                    load_bps: loads[m],
                    capacity_bps: flows.capacities[m],
                    utilization: loads[m] / flows.capacities[m],
                    dual: alloc.duals[m],
                });
            }
            let binding = alloc.binding_links(&flows, self.bandwidth.tolerances.feasibility);
            for (f, &rate) in flows.flows.iter().zip(&alloc.rates) {
                let bid = &outcome.book.bids()[f.bid];
                let placement =
                    outcome.solution.placement[f.bid].expect("flows come from placed bids");
                let names = |ms: &mut dyn Iterator<Item = usize>| {
                    ms.map(|m| topo.link_name(links[m]))
                        .collect::<Vec<_>>()
                        .join("|")
                };
                out.allocations.push(AllocationRecord {
                    frame,
                    slot,
                    bid: bid.id,
                    cloudlet: topo.cloudlet(placement.cloudlet).name.clone(),
                    traffic_bits: f.traffic,
                    rate_bps: rate,
                    links: names(&mut f.links.iter().copied()),
                    binding: names(&mut f.links.iter().copied().filter(|m| binding.contains(m))),
                });
            }
        }
        Ok(out)
    }
}
