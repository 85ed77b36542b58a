//! Two-phase heuristic: per-sequence pricing from an estimated unit serving
//! cost, then greedy PM opening by utility.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crate::auction::{BidBook, Placement, Solution};
use crate::model::{fits, ApId, CloudletId, PmTypeId, System, Tier, VmTypeId};
use crate::money::Money;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeuristicOptions {
    /// Let a cut point with zero estimated profit win the pricing scan.
    /// Off by default: nothing is served unless some `k` has a strictly
    /// positive estimate.
    pub admit_break_even: bool,
}

/// Pricing result of one `(AP, VM type)` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePricing {
    pub ap: ApId,
    pub vm: VmTypeId,
    /// Capacity-weighted mean serving cost of one instance.
    pub unit_cost: f64,
    /// Total capacity weight over hostable PM types; zero means unservable.
    pub capacity_weight: u64,
    pub served_count: usize,
    pub local_price: Money,
    pub estimated_profit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PricingOutcome {
    pub sequences: Vec<SequencePricing>,
    /// Bid indices selected for service, in book order (AP, VM type, rank).
    pub served: Vec<usize>,
}

impl PricingOutcome {
    pub fn local_price(&self, ap: ApId, vm: VmTypeId) -> Option<Money> {
        self.sequences
            .iter()
            .find(|s| s.ap == ap && s.vm == vm && s.served_count > 0)
            .map(|s| s.local_price)
    }
}

/// Estimates, for every sequence, a unit serving cost and picks the cut
/// point maximizing `k * (e_k - cost)`.
pub fn price_vms(book: &BidBook, system: &System, options: HeuristicOptions) -> PricingOutcome {
    let topo = &system.topology;
    let cat = &system.catalog;
    let n_res = cat.resources.len().max(1) as f64;
    let energy_factor = topo.frame_hours() * topo.pue;
    let mut sequences = Vec::new();
    let mut served = Vec::new();
    for ((ap, vm_id), seq) in book.sequences() {
        let vm = cat.vm(vm_id);
        let Ok(reach) = topo.reachable_cloudlets(ap) else {
            continue;
        };
        let last_mile = topo.link_capacity(crate::model::Link::LastMile(ap));
        let mut weight: u64 = 0;
        let mut weighted_cost = 0.0;
        for (c, tier) in reach {
            let cloudlet = topo.cloudlet(c);
            for &(p, count) in &cloudlet.pm_inventory {
                let pm = cat.pm(p);
                if count == 0 || !pm.can_host(vm) {
                    continue;
                }
                let mut g = (count as u64).min(seq.len() as u64);
                if tier != Tier::Field {
                    g = g.min(last_mile / vm.base_bandwidth);
                }
                let share: f64 = vm.demand.iter().zip(&pm.supply).map(|(d, s)| d / s).sum();
                let f = energy_factor
                    * cloudlet.electricity_price
                    * (vm.peak_power_kw + pm.idle_power_kw / n_res * share)
                    + topo.qos_weight(ap, c) * vm.utilization_bound(topo.frame_length_s);
                weight += g;
                weighted_cost += g as f64 * f;
            }
        }
        let mut entry = SequencePricing {
            ap,
            vm: vm_id,
            unit_cost: 0.0,
            capacity_weight: weight,
            served_count: 0,
            local_price: Money::ZERO,
            estimated_profit: 0.0,
        };
        if weight > 0 {
            let phi = weighted_cost / weight as f64;
            entry.unit_cost = phi;
            for (k0, &i) in seq.iter().enumerate() {
                let k = k0 + 1;
                let e = book.bids()[i].price;
                let rho = k as f64 * (e.to_f64() - phi);
                let accept = if options.admit_break_even || entry.served_count > 0 {
                    rho >= entry.estimated_profit
                } else {
                    rho > 0.0
                };
                if accept {
                    entry.estimated_profit = rho;
                    entry.local_price = e;
                    entry.served_count = k;
                }
            }
            served.extend_from_slice(&seq[..entry.served_count]);
        }
        sequences.push(entry);
    }
    PricingOutcome { sequences, served }
}

/// One candidate evaluated during a distribution round.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub pm_type: PmTypeId,
    pub cloudlet: CloudletId,
    pub packing: Vec<usize>,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub candidates: Vec<Candidate>,
    /// Index into `candidates` of the PM that was opened.
    pub chosen: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub solution: Solution,
    /// Bids selected by pricing that no PM could take.
    pub unplaced: Vec<usize>,
    /// Bids placed but then withdrawn to keep each sequence served as a
    /// prefix.
    pub demoted: Vec<usize>,
    pub rounds: Vec<Round>,
}

fn utility(numerator: f64, denominator: f64) -> f64 {
    if denominator > 0.0 {
        numerator / denominator
    } else if numerator > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Repeatedly builds a first-fit packing list for every PM type and
/// cloudlet with a spare instance, opens the one with the highest utility,
/// and assigns its list, until every priced bid is placed or nothing fits.
pub fn distribute_vms(pricing: &PricingOutcome, book: &BidBook, system: &System) -> Distribution {
    let topo = &system.topology;
    let cat = &system.catalog;
    let frame = topo.frame_length_s;
    let mut opened: BTreeMap<(CloudletId, PmTypeId), u32> = BTreeMap::new();
    let mut link_used = vec![0u128; topo.link_count()];
    let link_caps: Vec<u128> = topo
        .links()
        .into_iter()
        .map(|l| topo.link_capacity(l) as u128)
        .collect();
    let mut pending: Vec<usize> = pricing.served.clone();
    let mut placement: Vec<Option<Placement>> = vec![None; book.len()];
    let mut rounds = Vec::new();

    let price_of: BTreeMap<(ApId, VmTypeId), Money> = pricing
        .sequences
        .iter()
        .map(|s| ((s.ap, s.vm), s.local_price))
        .collect();
    let paths: Vec<Vec<Option<Vec<usize>>>> = book
        .bids()
        .iter()
        .map(|b| {
            (0..topo.cloudlets.len())
                .map(|c| {
                    topo.links_on_path(b.ap, CloudletId(c))
                        .ok()
                        .map(|links| links.into_iter().map(|l| topo.link_index(l)).collect())
                })
                .collect()
        })
        .collect();

    while !pending.is_empty() {
        let mut candidates = Vec::new();
        let mut best: Option<(usize, f64)> = None;
        for (p_idx, pm) in cat.pm_types.iter().enumerate() {
            let p = PmTypeId(p_idx);
            for (c_idx, cloudlet) in topo.cloudlets.iter().enumerate() {
                let c = CloudletId(c_idx);
                let inventory = cloudlet.pm_count(p);
                if inventory == 0 || opened.get(&(c, p)).copied().unwrap_or(0) >= inventory {
                    continue;
                }
                let mut load = vec![0.0; pm.supply.len()];
                let mut links = link_used.clone();
                let mut list = Vec::new();
                for &b in &pending {
                    let bid = &book.bids()[b];
                    // Reachability and residual fit must both hold.
                    let Some(path) = &paths[b][c_idx] else {
                        continue;
                    };
                    let vm = cat.vm(bid.vm_type);
                    let fits_pm = load
                        .iter()
                        .zip(&vm.demand)
                        .zip(&pm.supply)
                        .all(|((l, d), s)| fits(l + d, *s));
                    let r_min = vm.base_bandwidth as u128;
                    let fits_links = path.iter().all(|&l| links[l] + r_min <= link_caps[l]);
                    if fits_pm && fits_links {
                        for (l, d) in load.iter_mut().zip(&vm.demand) {
                            *l += d;
                        }
                        for &l in path {
                            links[l] += r_min;
                        }
                        list.push(b);
                    }
                }
                if list.is_empty() {
                    continue;
                }
                let mut income = 0.0;
                let mut peak = 0.0;
                let mut qos = 0.0;
                for &b in &list {
                    let bid = &book.bids()[b];
                    let vm = cat.vm(bid.vm_type);
                    income += price_of
                        .get(&(bid.ap, bid.vm_type))
                        .copied()
                        .unwrap_or_default()
                        .to_f64();
                    peak += vm.peak_power_kw;
                    qos += topo.qos_weight(bid.ap, c) * vm.utilization_bound(frame);
                }
                let u = utility(
                    income,
                    cloudlet.electricity_price * (pm.idle_power_kw + peak) + qos,
                );
                if u > best.map_or(0.0, |(_, b)| b) {
                    best = Some((candidates.len(), u));
                }
                candidates.push(Candidate {
                    pm_type: p,
                    cloudlet: c,
                    packing: list,
                    utility: u,
                });
            }
        }
        let Some((chosen, _)) = best else {
            rounds.push(Round {
                candidates,
                chosen: None,
            });
            break;
        };
        let pick = &candidates[chosen];
        let slot = opened.entry((pick.cloudlet, pick.pm_type)).or_insert(0);
        let instance = *slot;
        *slot += 1;
        for &b in &pick.packing {
            placement[b] = Some(Placement {
                cloudlet: pick.cloudlet,
                pm_type: pick.pm_type,
                instance,
            });
            let r_min = cat.vm(book.bids()[b].vm_type).base_bandwidth as u128;
            for &l in paths[b][pick.cloudlet.0].as_ref().expect("reachable") {
                link_used[l] += r_min;
            }
        }
        pending.retain(|b| placement[*b].is_none());
        rounds.push(Round {
            candidates,
            chosen: Some(chosen),
        });
    }

    // Keep each sequence's served bids a prefix of its ranks.
    let mut demoted = Vec::new();
    for (_, seq) in book.sequences() {
        if let Some(gap) = seq.iter().position(|&i| placement[i].is_none()) {
            for &i in &seq[gap + 1..] {
                if placement[i].take().is_some() {
                    demoted.push(i);
                }
            }
        }
    }
    if !demoted.is_empty() {
        compact_instances(&mut placement);
    }
    Distribution {
        solution: Solution::from_placements(placement),
        unplaced: pending,
        demoted,
        rounds,
    }
}

/// Renumbers PM instances per `(cloudlet, PM type)` so the used ones form
/// the prefix `0..n`, preserving their order.
fn compact_instances(placement: &mut [Option<Placement>]) {
    let mut used: BTreeMap<(CloudletId, PmTypeId), Vec<u32>> = BTreeMap::new();
    for p in placement.iter().flatten() {
        used.entry((p.cloudlet, p.pm_type))
            .or_default()
            .push(p.instance);
    }
    for v in used.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    for p in placement.iter_mut().flatten() {
        let v = &used[&(p.cloudlet, p.pm_type)];
        p.instance = v.binary_search(&p.instance).expect("collected above") as u32;
    }
}

/// Per-sequence summary of one heuristic run.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub ap: ApId,
    pub vm: VmTypeId,
    pub local_price: Money,
    pub priced_count: usize,
    pub served_count: usize,
    pub dropped_count: usize,
}

#[derive(Debug, Clone)]
pub struct HeuristicRun {
    pub solution: Solution,
    pub pricing: PricingOutcome,
    pub distribution_rounds: usize,
    pub records: Vec<SequenceRecord>,
    pub pricing_time: Duration,
    pub distribution_time: Duration,
}

impl HeuristicRun {
    pub fn dropped(&self) -> usize {
        self.records.iter().map(|r| r.dropped_count).sum()
    }
}

pub fn run_heuristic(book: &BidBook, system: &System, options: HeuristicOptions) -> HeuristicRun {
    let t0 = Instant::now();
    let pricing = price_vms(book, system, options);
    let t1 = Instant::now();
    let dist = distribute_vms(&pricing, book, system);
    let t2 = Instant::now();
    let records = pricing
        .sequences
        .iter()
        .map(|s| {
            let seq = book.sequence(s.ap, s.vm);
            let served = seq.iter().filter(|&&i| dist.solution.served[i]).count();
            SequenceRecord {
                ap: s.ap,
                vm: s.vm,
                local_price: s.local_price,
                priced_count: s.served_count,
                served_count: served,
                dropped_count: s.served_count - served,
            }
        })
        .collect();
    HeuristicRun {
        solution: dist.solution,
        pricing,
        distribution_rounds: dist.rounds.len(),
        records,
        pricing_time: t1 - t0,
        distribution_time: t2 - t1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::{check_feasibility, Bid};
    use crate::model::fixtures::five_ap_system;

    fn bid(id: u64, ap: usize, price: f64) -> Bid {
        Bid {
            id,
            ap: ApId(ap),
            vm_type: VmTypeId(0),
            price: Money::from_f64(price),
        }
    }

    /// System whose only serving cost is a flat `phi` per VM at the field.
    fn flat_cost_system(phi: f64) -> System {
        let mut sys = five_ap_system();
        for c in &mut sys.topology.cloudlets {
            c.electricity_price = 1.0;
            c.pm_inventory = if c.tier == Tier::Field {
                vec![(PmTypeId(0), 4)]
            } else {
                vec![]
            };
        }
        sys.catalog.pm_types[0].idle_power_kw = 0.0;
        // energy factor = 300/3600 * 1.0 (pue) => peak = phi * 12
        sys.topology.pue = 1.0;
        sys.catalog.vm_types[0].peak_power_kw = phi * 12.0;
        sys
    }

    #[test]
    fn pricing_picks_the_argmax_cut() {
        let sys = flat_cost_system(5.0);
        let book =
            BidBook::new(vec![bid(1, 0, 10.0), bid(2, 0, 8.0), bid(3, 0, 1.0)], &sys).unwrap();
        let out = price_vms(&book, &sys, HeuristicOptions::default());
        let s = &out.sequences[0];
        assert!((s.unit_cost - 5.0).abs() < 1e-9);
        assert_eq!(s.served_count, 2);
        assert_eq!(s.local_price, Money::from_f64(8.0));
        assert!((s.estimated_profit - 6.0).abs() < 1e-9);
        assert_eq!(out.served.len(), 2);
    }

    #[test]
    fn pricing_serves_nothing_below_cost() {
        let sys = flat_cost_system(5.0);
        let book = BidBook::new(vec![bid(1, 0, 4.0), bid(2, 0, 3.0)], &sys).unwrap();
        for admit_break_even in [false, true] {
            let out = price_vms(&book, &sys, HeuristicOptions { admit_break_even });
            assert_eq!(out.sequences[0].served_count, 0);
            assert!(out.served.is_empty());
        }
    }

    #[test]
    fn break_even_switch() {
        let sys = flat_cost_system(5.0);
        let book = BidBook::new(vec![bid(1, 0, 5.0)], &sys).unwrap();
        let strict = price_vms(&book, &sys, HeuristicOptions::default());
        assert_eq!(strict.sequences[0].served_count, 0);
        let lax = price_vms(
            &book,
            &sys,
            HeuristicOptions {
                admit_break_even: true,
            },
        );
        assert_eq!(lax.sequences[0].served_count, 1);
    }

    #[test]
    fn ties_move_toward_larger_cuts() {
        let sys = flat_cost_system(2.0);
        // k(e_k - 2): 1*(6-2)=4, 2*(4-2)=4
        let book = BidBook::new(vec![bid(1, 0, 6.0), bid(2, 0, 4.0)], &sys).unwrap();
        let out = price_vms(&book, &sys, HeuristicOptions::default());
        assert_eq!(out.sequences[0].served_count, 2);
        assert_eq!(out.sequences[0].local_price, Money::from_f64(4.0));
    }

    #[test]
    fn unhostable_sequence_serves_nothing() {
        let mut sys = five_ap_system();
        sys.catalog.vm_types[0].demand = vec![100.0, 1.0];
        let book = BidBook::new(vec![bid(1, 0, 100.0)], &sys).unwrap();
        let out = price_vms(&book, &sys, HeuristicOptions::default());
        assert_eq!(out.sequences[0].capacity_weight, 0);
        assert!(out.served.is_empty());
    }

    #[test]
    fn single_bid_opens_one_field_pm() {
        let sys = five_ap_system();
        let book = BidBook::new(vec![bid(1, 0, 1.0)], &sys).unwrap();
        let run = run_heuristic(&book, &sys, HeuristicOptions::default());
        assert_eq!(run.solution.served_count(), 1);
        assert_eq!(run.solution.powered_count(), 1);
        assert_eq!(run.solution.placement[0].unwrap().cloudlet, CloudletId(0));
        assert!(check_feasibility(&run.solution, &book, &sys).is_empty());
    }

    #[test]
    fn cheaper_electricity_wins_the_first_round() {
        let mut sys = five_ap_system();
        // Only the shallow and deep cloudlets have PMs; identical lists.
        for c in &mut sys.topology.cloudlets {
            if c.tier == Tier::Field {
                c.pm_inventory.clear();
            }
        }
        for w in sys.topology.qos_weights.values_mut() {
            *w = 0.0;
        }
        sys.topology.cloudlets[5].electricity_price = 3.0;
        sys.topology.cloudlets[7].electricity_price = 1.0;
        let book = BidBook::new(vec![bid(1, 0, 1.0)], &sys).unwrap();
        let pricing = price_vms(&book, &sys, HeuristicOptions::default());
        let dist = distribute_vms(&pricing, &book, &sys);
        let first = &dist.rounds[0];
        let chosen = &first.candidates[first.chosen.unwrap()];
        assert_eq!(chosen.cloudlet, CloudletId(7));
        for c in &first.candidates {
            assert!(chosen.utility >= c.utility);
        }
    }

    #[test]
    fn unplaceable_bids_are_reported() {
        let mut sys = five_ap_system();
        for c in &mut sys.topology.cloudlets {
            c.pm_inventory = vec![(PmTypeId(0), 1)];
        }
        // 8 per PM, 3 reachable PMs: 24 fit, 6 do not.
        let book = BidBook::new((0..30).map(|i| bid(i, 0, 5.0)).collect(), &sys).unwrap();
        let pricing = price_vms(&book, &sys, HeuristicOptions::default());
        assert_eq!(pricing.served.len(), 30);
        let dist = distribute_vms(&pricing, &book, &sys);
        assert_eq!(dist.unplaced.len(), 6);
        assert_eq!(dist.solution.served_count(), 24);
        assert!(check_feasibility(&dist.solution, &book, &sys).is_empty());
    }

    #[test]
    fn compaction_restores_instance_prefix() {
        let p = |c, m| {
            Some(Placement {
                cloudlet: CloudletId(c),
                pm_type: PmTypeId(0),
                instance: m,
            })
        };
        let mut v = vec![p(0, 2), None, p(0, 0), p(1, 3)];
        compact_instances(&mut v);
        assert_eq!(v, vec![p(0, 1), None, p(0, 0), p(1, 0)]);
    }
}
