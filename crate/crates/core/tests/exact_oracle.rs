mod common;

use std::collections::BTreeMap;

use himec::auction::{check_feasibility, Bid, BidBook, Placement, Solution};
use himec::exact::{solve_bnb, solve_exhaustive, Instance, SolverLimits};
use himec::model::{ApId, CloudletId, PmTypeId, System, Tier};
use himec::Money;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Brute force over every per-bid choice of reject or (cloudlet, PM type,
/// instance), written against the raw system description.
struct Oracle<'a> {
    sys: &'a System,
    bids: &'a [Bid],
    options: Vec<Vec<Option<Placement>>>,
}

impl<'a> Oracle<'a> {
    fn new(sys: &'a System, bids: &'a [Bid]) -> Self {
        let topo = &sys.topology;
        let options = bids
            .iter()
            .map(|b| {
                let field = topo.aps[b.ap.0].field;
                let site = topo
                    .shallow_sites
                    .iter()
                    .find(|s| s.attachments.iter().any(|l| l.ap == b.ap))
                    .unwrap();
                let mut opts = vec![None];
                for c in [field, site.cloudlet, topo.deep] {
                    for &(p, count) in &topo.cloudlets[c.0].pm_inventory {
                        for m in 0..count.min(bids.len() as u32) {
                            opts.push(Some(Placement {
                                cloudlet: c,
                                pm_type: p,
                                instance: m,
                            }));
                        }
                    }
                }
                opts
            })
            .collect();
        Oracle { sys, bids, options }
    }

    fn path(&self, ap: ApId, c: CloudletId) -> Vec<(&'static str, usize, u64)> {
        let topo = &self.sys.topology;
        let (si, site) = topo
            .shallow_sites
            .iter()
            .enumerate()
            .find(|(_, s)| s.attachments.iter().any(|l| l.ap == ap))
            .unwrap();
        let lm = site
            .attachments
            .iter()
            .find(|l| l.ap == ap)
            .unwrap()
            .capacity;
        match topo.cloudlets[c.0].tier {
            Tier::Field => vec![],
            Tier::Shallow => vec![("lm", ap.0, lm)],
            Tier::Deep => vec![
                ("lm", ap.0, lm),
                ("agg", si, site.aggregation_capacity),
                ("bh", 0, topo.backhaul_capacity),
            ],
        }
    }

    fn feasible(&self, choice: &[Option<Placement>]) -> bool {
        self.capacities_ok(choice) && self.prefix_ok(choice)
    }

    /// PM resources and link capacities; `choice` may cover a prefix of
    /// the bids.
    fn capacities_ok(&self, choice: &[Option<Placement>]) -> bool {
        let cat = &self.sys.catalog;
        let mut load: BTreeMap<(CloudletId, PmTypeId, u32), Vec<f64>> = BTreeMap::new();
        let mut links: BTreeMap<(&str, usize), (u64, u64)> = BTreeMap::new();
        for (b, p) in self.bids.iter().zip(choice) {
            let Some(p) = p else { continue };
            let vm = cat.vm(b.vm_type);
            let l = load
                .entry((p.cloudlet, p.pm_type, p.instance))
                .or_insert_with(|| vec![0.0; vm.demand.len()]);
            for (x, d) in l.iter_mut().zip(&vm.demand) {
                *x += d;
            }
            for (kind, idx, cap) in self.path(b.ap, p.cloudlet) {
                let e = links.entry((kind, idx)).or_insert((0, cap));
                e.0 += vm.base_bandwidth;
            }
        }
        load.iter().all(|((_, p, _), l)| {
            l.iter()
                .zip(&cat.pm(*p).supply)
                .all(|(x, s)| *x <= s + 1e-9)
        }) && links.values().all(|(used, cap)| used <= cap)
    }

    fn sequences(&self) -> BTreeMap<(ApId, usize), Vec<usize>> {
        let mut seqs: BTreeMap<(ApId, usize), Vec<usize>> = BTreeMap::new();
        for (i, b) in self.bids.iter().enumerate() {
            seqs.entry((b.ap, b.vm_type.0)).or_default().push(i);
        }
        for v in seqs.values_mut() {
            v.sort_by(|&x, &y| {
                self.bids[y]
                    .price
                    .cmp(&self.bids[x].price)
                    .then(self.bids[x].id.cmp(&self.bids[y].id))
            });
        }
        seqs
    }

    fn prefix_ok(&self, choice: &[Option<Placement>]) -> bool {
        self.sequences().values().all(|seq| {
            let served: Vec<bool> = seq.iter().map(|&i| choice[i].is_some()).collect();
            served.windows(2).all(|w| w[0] || !w[1])
        })
    }

    fn objective(&self, choice: &[Option<Placement>]) -> Money {
        let topo = &self.sys.topology;
        let cat = &self.sys.catalog;
        let ef = topo.frame_length_s / 3600.0 * topo.pue;
        let mut total = Money::ZERO;
        for seq in self.sequences().values() {
            let k = seq.iter().take_while(|&&i| choice[i].is_some()).count();
            if k > 0 {
                total += self.bids[seq[k - 1]].price * k as i64;
            }
        }
        let mut top: BTreeMap<(CloudletId, PmTypeId), u32> = BTreeMap::new();
        for (b, p) in self.bids.iter().zip(choice) {
            let Some(p) = p else { continue };
            let vm = cat.vm(b.vm_type);
            let q = topo.cloudlets[p.cloudlet.0].electricity_price;
            total -= Money::from_f64(ef * q * vm.peak_power_kw);
            let xi = topo
                .qos_weights
                .get(&(b.ap, p.cloudlet))
                .copied()
                .unwrap_or(0.0);
            total -= Money::from_f64(xi * vm.utilization_bound(topo.frame_length_s));
            let t = top.entry((p.cloudlet, p.pm_type)).or_insert(0);
            *t = (*t).max(p.instance + 1);
        }
        for ((c, p), n) in top {
            let q = topo.cloudlets[c.0].electricity_price;
            total -= Money::from_f64(ef * q * cat.pm(p).idle_power_kw) * n as i64;
        }
        total
    }

    /// Best objective over all feasible choices.
    fn best(&self) -> Money {
        let mut choice = vec![None; self.bids.len()];
        let mut best = Money::ZERO;
        self.search(0, &mut choice, &mut best);
        best
    }

    fn search(&self, i: usize, choice: &mut Vec<Option<Placement>>, best: &mut Money) {
        if i == self.bids.len() {
            if self.feasible(choice) {
                *best = (*best).max(self.objective(choice));
            }
            return;
        }
        for opt in &self.options[i] {
            choice[i] = *opt;
            // Loads only grow, so a capacity breach cannot be repaired.
            if opt.is_some() && !self.capacities_ok(&choice[..=i]) {
                continue;
            }
            self.search(i + 1, choice, best);
        }
        choice[i] = None;
    }
}

fn limits() -> SolverLimits {
    SolverLimits {
        time_budget: None,
        ..SolverLimits::default()
    }
}

#[test]
fn solvers_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for round in 0..24 {
        let (n, pms) = if round % 2 == 0 { (7, 1) } else { (5, 2) };
        let sys = common::small_system(&mut rng, pms);
        let bids = common::random_bids(&mut rng, n);
        let oracle = Oracle::new(&sys, &bids);
        let expected = oracle.best();

        let book = BidBook::new(bids.clone(), &sys).unwrap();
        let inst = Instance::new(&sys, &book, limits()).unwrap();
        let ex = solve_exhaustive(&inst).unwrap();
        let bb = solve_bnb(&inst).unwrap();
        assert_eq!(ex.objective, expected, "round {round}: exhaustive");
        assert_eq!(bb.objective, expected, "round {round}: bnb");
        assert!(bb.optimal && ex.optimal);
        for rep in [&ex, &bb] {
            assert!(check_feasibility(&rep.solution, &book, &sys).is_empty());
            // The oracle agrees with the solver's own accounting.
            let sorted: Vec<Option<Placement>> = bids
                .iter()
                .map(|b| rep.solution.placement[book.index_of(b.id).unwrap()])
                .collect();
            assert!(oracle.feasible(&sorted));
            assert_eq!(oracle.objective(&sorted), rep.objective);
        }
    }
}

#[test]
fn feasibility_check_agrees_with_oracle_predicate() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut seen = [0usize; 2];
    for _ in 0..12 {
        let sys = common::small_system(&mut rng, 1);
        let mut bids = common::random_bids(&mut rng, 5);
        bids.sort_by_key(|b| b.id);
        let oracle = Oracle::new(&sys, &bids);
        let book = BidBook::new(bids.clone(), &sys).unwrap();
        let mut idx = vec![0usize; bids.len()];
        loop {
            let choice: Vec<Option<Placement>> = idx
                .iter()
                .enumerate()
                .map(|(i, &k)| oracle.options[i][k])
                .collect();
            let expected = oracle.feasible(&choice);
            let sol = Solution::from_placements(choice);
            let got = check_feasibility(&sol, &book, &sys).is_empty();
            assert_eq!(got, expected, "{sol:?}");
            seen[expected as usize] += 1;
            // Odometer.
            let mut d = 0;
            while d < idx.len() {
                idx[d] += 1;
                if idx[d] < oracle.options[d].len() {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == idx.len() {
                break;
            }
        }
    }
    assert!(seen[0] > 0 && seen[1] > 0);
}

#[test]
fn adding_a_bid_never_lowers_the_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let sys = common::small_system(&mut rng, 2);
        let bids = common::random_bids(&mut rng, 7);
        let solve = |bs: &[Bid]| {
            let book = BidBook::new(bs.to_vec(), &sys).unwrap();
            let inst = Instance::new(&sys, &book, limits()).unwrap();
            solve_bnb(&inst).unwrap().objective
        };
        assert!(solve(&bids[..6]) <= solve(&bids));
    }
}
