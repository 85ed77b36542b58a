//! Static description of a three-tier edge deployment: access points, field,
//! shallow and deep cloudlets, PM/VM catalogs and the link hierarchy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::money::Money;

/// Energy prices are per kWh while frame lengths are in seconds.
pub const SECONDS_PER_HOUR: f64 = 3600.0;

macro_rules! index_newtype {
    ($($name:ident),*) => {$(
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(pub usize);

        impl $name {
            pub fn index(self) -> usize {
                self.0
            }
        }
    )*};
}

index_newtype!(ApId, CloudletId, VmTypeId, PmTypeId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Field,
    Shallow,
    Deep,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Field => "field",
            Tier::Shallow => "shallow",
            Tier::Deep => "deep",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmType {
    pub name: String,
    /// Demand per resource kind, indexed like [`Catalog::resources`].
    pub demand: Vec<f64>,
    /// Base bandwidth in bit/s.
    pub base_bandwidth: u64,
    /// Maximum data moved to/from the VM within one frame, in bits.
    pub max_data_per_frame: f64,
    pub peak_power_kw: f64,
    pub on_demand_cap: Money,
}

impl VmType {
    /// Upper bound on the link utilization of one instance over a frame of
    /// `frame_length_s` seconds.
    pub fn utilization_bound(&self, frame_length_s: f64) -> f64 {
        self.max_data_per_frame / (frame_length_s * self.base_bandwidth as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmType {
    pub name: String,
    pub supply: Vec<f64>,
    pub idle_power_kw: f64,
}

impl PmType {
    pub fn can_host(&self, vm: &VmType) -> bool {
        vm.demand
            .iter()
            .zip(&self.supply)
            .all(|(d, s)| fits(*d, *s))
    }
}

/// Resource-fit comparison shared by every feasibility check in the crate.
pub fn fits(total_demand: f64, supply: f64) -> bool {
    total_demand <= supply + 1e-9 * supply.abs().max(1.0)
}

/// Prorates a PM's power draw onto a VM type by the mean fraction of each
/// resource the VM occupies.
pub fn prorated_peak_power(vm_demand: &[f64], pm: &PmType) -> f64 {
    if pm.supply.is_empty() {
        return 0.0;
    }
    let share: f64 = vm_demand
        .iter()
        .zip(&pm.supply)
        .map(|(d, s)| d / s)
        .sum::<f64>()
        / pm.supply.len() as f64;
    pm.idle_power_kw * share
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    pub resources: Vec<String>,
    pub vm_types: Vec<VmType>,
    pub pm_types: Vec<PmType>,
}

impl Catalog {
    pub fn vm(&self, id: VmTypeId) -> &VmType {
        &self.vm_types[id.0]
    }

    pub fn pm(&self, id: PmTypeId) -> &PmType {
        &self.pm_types[id.0]
    }

    pub fn vm_ids(&self) -> impl Iterator<Item = VmTypeId> {
        (0..self.vm_types.len()).map(VmTypeId)
    }

    pub fn vm_by_name(&self, name: &str) -> Option<VmTypeId> {
        self.vm_types
            .iter()
            .position(|v| v.name == name)
            .map(VmTypeId)
    }

    pub fn pm_by_name(&self, name: &str) -> Option<PmTypeId> {
        self.pm_types
            .iter()
            .position(|p| p.name == name)
            .map(PmTypeId)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cloudlet {
    pub name: String,
    pub tier: Tier,
    /// PM inventory `(type, count)`; a type appears at most once.
    pub pm_inventory: Vec<(PmTypeId, u32)>,
    /// Currency per kWh.
    pub electricity_price: f64,
}

impl Cloudlet {
    pub fn pm_count(&self, pm: PmTypeId) -> u32 {
        self.pm_inventory
            .iter()
            .find(|(p, _)| *p == pm)
            .map_or(0, |(_, n)| *n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ap {
    pub name: String,
    pub field: CloudletId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LastMile {
    pub ap: ApId,
    /// bit/s
    pub capacity: u64,
}

/// A shallow cloudlet together with the APs it aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct ShallowSite {
    pub cloudlet: CloudletId,
    pub attachments: Vec<LastMile>,
    /// bit/s
    pub aggregation_capacity: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Link {
    LastMile(ApId),
    /// Aggregation link of the shallow site at this index.
    Aggregation(usize),
    Backhaul,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub aps: Vec<Ap>,
    pub cloudlets: Vec<Cloudlet>,
    pub shallow_sites: Vec<ShallowSite>,
    pub deep: CloudletId,
    /// bit/s
    pub backhaul_capacity: u64,
    /// QoS weights for `(ap, non-field reachable cloudlet)` pairs.
    pub qos_weights: BTreeMap<(ApId, CloudletId), f64>,
    pub pue: f64,
    pub frame_length_s: f64,
    pub slot_length_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("unknown AP index {0}")]
    UnknownAp(usize),
    #[error("AP {ap} is not attached to any shallow cloudlet")]
    Detached { ap: String },
    #[error("cloudlet {cloudlet} is not reachable from AP {ap}")]
    Unreachable { ap: String, cloudlet: String },
}

impl Topology {
    pub fn ap_ids(&self) -> impl Iterator<Item = ApId> {
        (0..self.aps.len()).map(ApId)
    }

    pub fn cloudlet(&self, id: CloudletId) -> &Cloudlet {
        &self.cloudlets[id.0]
    }

    pub fn ap_by_name(&self, name: &str) -> Option<ApId> {
        self.aps.iter().position(|a| a.name == name).map(ApId)
    }

    pub fn cloudlet_by_name(&self, name: &str) -> Option<CloudletId> {
        self.cloudlets
            .iter()
            .position(|c| c.name == name)
            .map(CloudletId)
    }

    /// Index of the shallow site the AP is attached to (first match).
    pub fn shallow_site_of(&self, ap: ApId) -> Option<usize> {
        self.shallow_sites
            .iter()
            .position(|s| s.attachments.iter().any(|l| l.ap == ap))
    }

    fn ap_name(&self, ap: ApId) -> String {
        self.aps
            .get(ap.0)
            .map_or_else(|| format!("#{}", ap.0), |a| a.name.clone())
    }

    fn cloudlet_name(&self, c: CloudletId) -> String {
        self.cloudlets
            .get(c.0)
            .map_or_else(|| format!("#{}", c.0), |c| c.name.clone())
    }

    /// The cloudlets serving an AP, in tier order: field, shallow, deep.
    pub fn reachable_cloudlets(&self, ap: ApId) -> Result<[(CloudletId, Tier); 3], ModelError> {
        let entry = self.aps.get(ap.0).ok_or(ModelError::UnknownAp(ap.0))?;
        let site = self
            .shallow_site_of(ap)
            .ok_or_else(|| ModelError::Detached {
                ap: entry.name.clone(),
            })?;
        Ok([
            (entry.field, Tier::Field),
            (self.shallow_sites[site].cloudlet, Tier::Shallow),
            (self.deep, Tier::Deep),
        ])
    }

    pub fn links_on_path(&self, ap: ApId, cloudlet: CloudletId) -> Result<Vec<Link>, ModelError> {
        let reach = self.reachable_cloudlets(ap)?;
        let site = self
            .shallow_site_of(ap)
            .expect("checked by reachable_cloudlets");
        match reach.iter().find(|(c, _)| *c == cloudlet) {
            Some((_, Tier::Field)) => Ok(Vec::new()),
            Some((_, Tier::Shallow)) => Ok(vec![Link::LastMile(ap)]),
            Some((_, Tier::Deep)) => Ok(vec![
                Link::LastMile(ap),
                Link::Aggregation(site),
                Link::Backhaul,
            ]),
            None => Err(ModelError::Unreachable {
                ap: self.ap_name(ap),
                cloudlet: self.cloudlet_name(cloudlet),
            }),
        }
    }

    /// Every link: last-mile links in AP order, then aggregation links in
    /// site order, then the backhaul.
    pub fn links(&self) -> Vec<Link> {
        self.ap_ids()
            .map(Link::LastMile)
            .chain((0..self.shallow_sites.len()).map(Link::Aggregation))
            .chain(std::iter::once(Link::Backhaul))
            .collect()
    }

    pub fn link_count(&self) -> usize {
        self.aps.len() + self.shallow_sites.len() + 1
    }

    /// Dense index matching the order of [`Topology::links`].
    pub fn link_index(&self, link: Link) -> usize {
        match link {
            Link::LastMile(ap) => ap.0,
            Link::Aggregation(s) => self.aps.len() + s,
            Link::Backhaul => self.aps.len() + self.shallow_sites.len(),
        }
    }

    pub fn link_capacity(&self, link: Link) -> u64 {
        match link {
            Link::LastMile(ap) => self
                .shallow_sites
                .iter()
                .flat_map(|s| &s.attachments)
                .find(|l| l.ap == ap)
                .map_or(0, |l| l.capacity),
            Link::Aggregation(s) => self
                .shallow_sites
                .get(s)
                .map_or(0, |s| s.aggregation_capacity),
            Link::Backhaul => self.backhaul_capacity,
        }
    }

    pub fn link_name(&self, link: Link) -> String {
        match link {
            Link::LastMile(ap) => format!("last-mile:{}", self.ap_name(ap)),
            Link::Aggregation(s) => format!(
                "aggregation:{}",
                self.shallow_sites
                    .get(s)
                    .map_or_else(|| format!("#{s}"), |site| self.cloudlet_name(site.cloudlet))
            ),
            Link::Backhaul => "backhaul".to_string(),
        }
    }

    /// QoS weight of serving `ap` at `cloudlet`; field placements weigh zero.
    pub fn qos_weight(&self, ap: ApId, cloudlet: CloudletId) -> f64 {
        if self.cloudlets.get(cloudlet.0).map(|c| c.tier) == Some(Tier::Field) {
            return 0.0;
        }
        self.qos_weights
            .get(&(ap, cloudlet))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn frame_hours(&self) -> f64 {
        self.frame_length_s / SECONDS_PER_HOUR
    }

    pub fn slots_per_frame(&self) -> usize {
        (self.frame_length_s / self.slot_length_s).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Invariant {
    UnknownReference,
    VmType,
    PmType,
    Cloudlet,
    FieldBinding,
    Partition,
    Tiers,
    Capacity,
    QosWeights,
    Pue,
    Timing,
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit enum");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Violation {
    pub invariant: Invariant,
    pub entity: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.invariant, self.entity, self.detail)
    }
}

/// Catalog plus topology: everything the provider knows before bids arrive.
#[derive(Debug, Clone, PartialEq)]
pub struct System {
    pub catalog: Catalog,
    pub topology: Topology,
}

impl System {
    /// Checks every structural invariant; an empty list means the system is
    /// usable by the solvers.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |invariant, entity: &str, detail: String| {
            out.push(Violation {
                invariant,
                entity: entity.to_string(),
                detail,
            })
        };
        let cat = &self.catalog;
        let topo = &self.topology;
        let n_res = cat.resources.len();

        for vm in &cat.vm_types {
            if vm.demand.len() != n_res {
                push(
                    Invariant::VmType,
                    &vm.name,
                    "demand vector does not match resource set".into(),
                );
            }
            if vm.demand.iter().any(|d| !(*d >= 0.0)) {
                push(
                    Invariant::VmType,
                    &vm.name,
                    "negative resource demand".into(),
                );
            }
            if vm.base_bandwidth == 0 {
                push(
                    Invariant::VmType,
                    &vm.name,
                    "base bandwidth must be positive".into(),
                );
            }
            if !(vm.max_data_per_frame >= 0.0) {
                push(
                    Invariant::VmType,
                    &vm.name,
                    "max data per frame must be >= 0".into(),
                );
            }
            if !(vm.peak_power_kw >= 0.0) {
                push(
                    Invariant::VmType,
                    &vm.name,
                    "peak power must be >= 0".into(),
                );
            }
            if vm.on_demand_cap.is_negative() {
                push(
                    Invariant::VmType,
                    &vm.name,
                    "on-demand cap must be >= 0".into(),
                );
            }
        }
        for pm in &cat.pm_types {
            if pm.supply.len() != n_res {
                push(
                    Invariant::PmType,
                    &pm.name,
                    "supply vector does not match resource set".into(),
                );
            }
            if pm.supply.iter().any(|s| !(*s > 0.0)) {
                push(
                    Invariant::PmType,
                    &pm.name,
                    "resource supplies must be positive".into(),
                );
            }
            if !(pm.idle_power_kw >= 0.0) {
                push(
                    Invariant::PmType,
                    &pm.name,
                    "idle power must be >= 0".into(),
                );
            }
        }

        let n_cloudlets = topo.cloudlets.len();
        for c in &topo.cloudlets {
            if !(c.electricity_price >= 0.0) {
                push(
                    Invariant::Cloudlet,
                    &c.name,
                    "electricity price must be >= 0".into(),
                );
            }
            let mut seen = BTreeSet::new();
            for (p, _) in &c.pm_inventory {
                if p.0 >= cat.pm_types.len() {
                    push(
                        Invariant::UnknownReference,
                        &c.name,
                        format!("unknown PM type #{}", p.0),
                    );
                } else if !seen.insert(*p) {
                    push(
                        Invariant::Cloudlet,
                        &c.name,
                        format!("PM type {} listed twice", cat.pm(*p).name),
                    );
                }
            }
        }

        // Tiers.
        let deep_ok = topo.deep.0 < n_cloudlets;
        if !deep_ok {
            push(
                Invariant::UnknownReference,
                "deep",
                format!("unknown cloudlet #{}", topo.deep.0),
            );
        } else if topo.cloudlet(topo.deep).tier != Tier::Deep {
            push(
                Invariant::Tiers,
                &topo.cloudlet(topo.deep).name,
                "deep cloudlet is not of tier deep".into(),
            );
        }
        let deep_count = topo
            .cloudlets
            .iter()
            .filter(|c| c.tier == Tier::Deep)
            .count();
        if deep_count != 1 {
            push(
                Invariant::Tiers,
                "deep",
                format!("expected exactly one deep cloudlet, found {deep_count}"),
            );
        }
        let mut shallow_seen = BTreeSet::new();
        for site in &topo.shallow_sites {
            match topo.cloudlets.get(site.cloudlet.0) {
                None => push(
                    Invariant::UnknownReference,
                    "shallow site",
                    format!("unknown cloudlet #{}", site.cloudlet.0),
                ),
                Some(c) => {
                    if c.tier != Tier::Shallow {
                        push(
                            Invariant::Tiers,
                            &c.name,
                            "aggregation site is not a shallow cloudlet".into(),
                        );
                    }
                    if !shallow_seen.insert(site.cloudlet) {
                        push(
                            Invariant::Tiers,
                            &c.name,
                            "shallow cloudlet declared as two sites".into(),
                        );
                    }
                    if site.aggregation_capacity == 0 {
                        push(
                            Invariant::Capacity,
                            &c.name,
                            "aggregation link capacity must be positive".into(),
                        );
                    }
                }
            }
            for lm in &site.attachments {
                if lm.ap.0 >= topo.aps.len() {
                    push(
                        Invariant::UnknownReference,
                        "shallow site",
                        format!("unknown AP #{}", lm.ap.0),
                    );
                } else if lm.capacity == 0 {
                    push(
                        Invariant::Capacity,
                        &topo.aps[lm.ap.0].name,
                        "last-mile link capacity must be positive".into(),
                    );
                }
            }
        }
        for (i, c) in topo.cloudlets.iter().enumerate() {
            if c.tier == Tier::Shallow && !shallow_seen.contains(&CloudletId(i)) {
                push(
                    Invariant::Tiers,
                    &c.name,
                    "shallow cloudlet has no aggregation site".into(),
                );
            }
        }
        if topo.backhaul_capacity == 0 {
            push(
                Invariant::Capacity,
                "backhaul",
                "backhaul link capacity must be positive".into(),
            );
        }

        // APs: field binding and partition over shallow sites.
        let mut field_owner: BTreeMap<CloudletId, ApId> = BTreeMap::new();
        for (i, ap) in topo.aps.iter().enumerate() {
            let id = ApId(i);
            match topo.cloudlets.get(ap.field.0) {
                None => push(
                    Invariant::UnknownReference,
                    &ap.name,
                    format!("unknown field cloudlet #{}", ap.field.0),
                ),
                Some(c) if c.tier != Tier::Field => push(
                    Invariant::FieldBinding,
                    &ap.name,
                    format!("{} is not a field cloudlet", c.name),
                ),
                Some(c) => {
                    if let Some(other) = field_owner.insert(ap.field, id) {
                        push(
                            Invariant::FieldBinding,
                            &ap.name,
                            format!(
                                "field cloudlet {} already bound to {}",
                                c.name, topo.aps[other.0].name
                            ),
                        );
                    }
                }
            }
            let memberships: usize = topo
                .shallow_sites
                .iter()
                .map(|s| s.attachments.iter().filter(|l| l.ap == id).count())
                .sum();
            if memberships != 1 {
                push(
                    Invariant::Partition,
                    &ap.name,
                    format!("attached to {memberships} shallow cloudlets, expected exactly 1"),
                );
            }
        }
        for (i, c) in topo.cloudlets.iter().enumerate() {
            if c.tier == Tier::Field && !field_owner.contains_key(&CloudletId(i)) {
                push(
                    Invariant::FieldBinding,
                    &c.name,
                    "field cloudlet is not bound to any AP".into(),
                );
            }
        }

        // QoS weights exist exactly for the shallow and deep cloudlets an AP reaches.
        for (&(ap, c), &w) in &topo.qos_weights {
            let entity = format!("{}/{}", topo.ap_name(ap), topo.cloudlet_name(c));
            if !(w >= 0.0) {
                push(Invariant::QosWeights, &entity, "weight must be >= 0".into());
            }
            let reachable_non_field = topo
                .reachable_cloudlets(ap)
                .map(|r| r.iter().any(|(rc, t)| *rc == c && *t != Tier::Field))
                .unwrap_or(false);
            if !reachable_non_field {
                push(
                    Invariant::QosWeights,
                    &entity,
                    "weight declared for a cloudlet the AP does not reach above the field tier"
                        .into(),
                );
            }
        }
        for ap in topo.ap_ids() {
            if let Ok(reach) = topo.reachable_cloudlets(ap) {
                for (c, tier) in &reach[1..] {
                    if c.0 < n_cloudlets && !topo.qos_weights.contains_key(&(ap, *c)) {
                        push(
                            Invariant::QosWeights,
                            &format!("{}/{}", topo.ap_name(ap), topo.cloudlet_name(*c)),
                            format!("missing weight for {tier} cloudlet"),
                        );
                    }
                }
            }
        }

        if !(topo.pue >= 1.0) {
            push(
                Invariant::Pue,
                "pue",
                format!("must be >= 1, got {}", topo.pue),
            );
        }
        let (t, tau) = (topo.frame_length_s, topo.slot_length_s);
        if !(t > 0.0 && tau > 0.0) {
            push(
                Invariant::Timing,
                "frame",
                "frame and slot lengths must be positive".into(),
            );
        } else {
            let ratio = t / tau;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
                push(
                    Invariant::Timing,
                    "frame",
                    format!("frame length {t}s is not a multiple of slot length {tau}s"),
                );
            }
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Five APs over two PoPs ({1,2,3} and {4,5}) and one deep cloudlet, all
    /// links at 1 Gbit/s.
    pub fn five_ap_system() -> System {
        let catalog = Catalog {
            resources: vec!["cpu".into(), "memory".into()],
            vm_types: vec![VmType {
                name: "small".into(),
                demand: vec![2.0, 4.0],
                base_bandwidth: 10_000_000,
                max_data_per_frame: 1.5e9,
                peak_power_kw: 0.05,
                on_demand_cap: Money::from_units(1_000_000),
            }],
            pm_types: vec![PmType {
                name: "pm".into(),
                supply: vec![16.0, 64.0],
                idle_power_kw: 0.7,
            }],
        };
        let mut cloudlets: Vec<Cloudlet> = (1..=5)
            .map(|i| Cloudlet {
                name: format!("field-{i}"),
                tier: Tier::Field,
                pm_inventory: vec![(PmTypeId(0), 2)],
                electricity_price: 2.0,
            })
            .collect();
        for i in 1..=2 {
            cloudlets.push(Cloudlet {
                name: format!("shallow-{i}"),
                tier: Tier::Shallow,
                pm_inventory: vec![(PmTypeId(0), 4)],
                electricity_price: 2.0,
            });
        }
        cloudlets.push(Cloudlet {
            name: "deep".into(),
            tier: Tier::Deep,
            pm_inventory: vec![(PmTypeId(0), 8)],
            electricity_price: 2.0,
        });
        let gbps = 1_000_000_000;
        let aps = (0..5)
            .map(|i| Ap {
                name: format!("ap{}", i + 1),
                field: CloudletId(i),
            })
            .collect();
        let site = |c: usize, aps: &[usize]| ShallowSite {
            cloudlet: CloudletId(c),
            attachments: aps
                .iter()
                .map(|a| LastMile {
                    ap: ApId(*a),
                    capacity: gbps,
                })
                .collect(),
            aggregation_capacity: gbps,
        };
        let mut qos = BTreeMap::new();
        for a in 0..5 {
            let shallow = if a < 3 { 5 } else { 6 };
            qos.insert((ApId(a), CloudletId(shallow)), 0.1);
            qos.insert((ApId(a), CloudletId(7)), 0.2);
        }
        System {
            catalog,
            topology: Topology {
                aps,
                cloudlets,
                shallow_sites: vec![site(5, &[0, 1, 2]), site(6, &[3, 4])],
                deep: CloudletId(7),
                backhaul_capacity: gbps,
                qos_weights: qos,
                pue: 1.2,
                frame_length_s: 300.0,
                slot_length_s: 5.0,
            },
        }
    }
}
