#![allow(dead_code)]

use std::collections::BTreeMap;

use himec::auction::Bid;
use himec::bandwidth::{Flow, FlowSet};
use himec::model::{
    Ap, ApId, Catalog, Cloudlet, CloudletId, LastMile, PmType, PmTypeId, ShallowSite, System, Tier,
    Topology, VmType, VmTypeId,
};
use himec::Money;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Two APs sharing one PoP, a deep cloudlet, two VM types and one PM type
/// small enough that PM capacity and links both bind.
pub fn small_system(rng: &mut ChaCha8Rng, max_pms: u32) -> System {
    let mbps = 1_000_000u64;
    let catalog = Catalog {
        resources: vec!["cpu".into(), "memory".into()],
        vm_types: vec![
            VmType {
                name: "a".into(),
                demand: vec![2.0, 4.0],
                base_bandwidth: 10 * mbps,
                max_data_per_frame: 1.5e9,
                peak_power_kw: 0.05,
                on_demand_cap: Money::from_units(1_000_000),
            },
            VmType {
                name: "b".into(),
                demand: vec![4.0, 4.0],
                base_bandwidth: 20 * mbps,
                max_data_per_frame: 3.0e9,
                peak_power_kw: 0.1,
                on_demand_cap: Money::from_units(1_500_000),
            },
        ],
        pm_types: vec![PmType {
            name: "pm".into(),
            supply: vec![8.0, 16.0],
            idle_power_kw: 0.7,
        }],
    };
    let mut pms = || vec![(PmTypeId(0), rng.random_range(1..=max_pms))];
    let cloudlets = vec![
        Cloudlet {
            name: "f1".into(),
            tier: Tier::Field,
            pm_inventory: pms(),
            electricity_price: 0.0,
        },
        Cloudlet {
            name: "f2".into(),
            tier: Tier::Field,
            pm_inventory: pms(),
            electricity_price: 0.0,
        },
        Cloudlet {
            name: "s".into(),
            tier: Tier::Shallow,
            pm_inventory: pms(),
            electricity_price: 0.0,
        },
        Cloudlet {
            name: "d".into(),
            tier: Tier::Deep,
            pm_inventory: pms(),
            electricity_price: 0.0,
        },
    ];
    let mut topology = Topology {
        aps: vec![
            Ap {
                name: "a1".into(),
                field: CloudletId(0),
            },
            Ap {
                name: "a2".into(),
                field: CloudletId(1),
            },
        ],
        cloudlets,
        shallow_sites: vec![],
        deep: CloudletId(3),
        backhaul_capacity: [20, 40, 60][rng.random_range(0..3)] * mbps,
        qos_weights: BTreeMap::new(),
        pue: 1.2,
        frame_length_s: 300.0,
        slot_length_s: 5.0,
    };
    for c in &mut topology.cloudlets {
        c.electricity_price = rng.random_range(1.0..4.0);
    }
    topology.shallow_sites.push(ShallowSite {
        cloudlet: CloudletId(2),
        attachments: (0..2)
            .map(|a| LastMile {
                ap: ApId(a),
                capacity: [20, 30, 40][rng.random_range(0..3)] * mbps,
            })
            .collect(),
        aggregation_capacity: [20, 40][rng.random_range(0..2)] * mbps,
    });
    for a in 0..2 {
        topology
            .qos_weights
            .insert((ApId(a), CloudletId(2)), rng.random_range(0.0..0.3));
        topology
            .qos_weights
            .insert((ApId(a), CloudletId(3)), rng.random_range(0.0..0.6));
    }
    let system = System { catalog, topology };
    assert!(system.validate().is_empty());
    system
}

pub fn random_bids(rng: &mut ChaCha8Rng, n: usize) -> Vec<Bid> {
    (0..n)
        .map(|i| Bid {
            id: i as u64 + 1,
            ap: ApId(rng.random_range(0..2)),
            vm_type: VmTypeId(rng.random_range(0..2)),
            // Coarse grid so equal prices occur.
            price: Money::from_units(rng.random_range(0..=40) * 25_000),
        })
        .collect()
}

/// Random flow set with jointly feasible lower bounds.
pub fn random_flow_set(rng: &mut ChaCha8Rng, max_flows: usize, max_links: usize) -> FlowSet {
    let m = rng.random_range(1..=max_links);
    let n = rng.random_range(1..=max_flows);
    let capacities: Vec<f64> = (0..m).map(|_| rng.random_range(5.0..50.0)).collect();
    let mut flows = Vec::new();
    for b in 0..n {
        let mut links: Vec<usize> = (0..m).filter(|_| rng.random_bool(0.4)).collect();
        if links.is_empty() {
            links.push(rng.random_range(0..m));
        }
        let lower = rng.random_range(0.01..0.2);
        let upper = lower + rng.random_range(0.5..30.0);
        let traffic = if rng.random_bool(0.1) {
            0.0
        } else {
            rng.random_range(0.0..10.0)
        };
        flows.push(Flow {
            bid: b,
            weight: rng.random_range(0.05..2.0),
            traffic,
            lower,
            upper,
            links,
        });
    }
    let fs = FlowSet { flows, capacities };
    fs.validate().expect("generator keeps lower bounds small");
    fs
}

/// Zooming grid over the box, keeping only capacity-feasible points.
pub fn grid_minimum(fs: &FlowSet) -> f64 {
    let n = fs.flows.len();
    let mut lo: Vec<f64> = fs.flows.iter().map(|f| f.lower).collect();
    let mut hi: Vec<f64> = fs.flows.iter().map(|f| f.upper).collect();
    let steps = 60usize;
    let mut best = f64::INFINITY;
    let mut best_r = lo.clone();
    for _ in 0..40 {
        let mut idx = vec![0usize; n];
        loop {
            let r: Vec<f64> = (0..n)
                .map(|i| lo[i] + (hi[i] - lo[i]) * idx[i] as f64 / steps as f64)
                .collect();
            let ok = fs
                .link_loads(&r)
                .iter()
                .zip(&fs.capacities)
                .all(|(l, c)| l <= c);
            if ok {
                let v = fs.objective(&r);
                if v < best {
                    best = v;
                    best_r = r;
                }
            }
            let mut d = 0;
            while d < n {
                idx[d] += 1;
                if idx[d] <= steps {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == n {
                break;
            }
        }
        for i in 0..n {
            let f = &fs.flows[i];
            let cell = (hi[i] - lo[i]) / steps as f64;
            lo[i] = (best_r[i] - 4.0 * cell).max(f.lower);
            hi[i] = (best_r[i] + 4.0 * cell).min(f.upper);
        }
    }
    best
}
