//! Scenario files: a versioned TOML document describing the catalog, the
//! topology, the bid generator and the bandwidth solver settings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::bandwidth::{BoundsRule, Method, Tolerances};
use crate::model::{
    prorated_peak_power, Ap, ApId, Catalog, Cloudlet, CloudletId, LastMile, PmType, PmTypeId,
    ShallowSite, System, Tier, Topology, Violation, VmType,
};
use crate::money::Money;
use crate::sim::{GeneratorConfig, TriangleLaw};

pub const SCHEMA: &str = "himec-scenario/1";

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("the first key must be `schema = \"{SCHEMA}\"`")]
    MissingSchema,
    #[error("unsupported schema {found:?}, expected {SCHEMA:?}")]
    SchemaMismatch { found: String },
    #[error("{0}")]
    Syntax(#[from] toml::de::Error),
    #[error("{kind} {name:?} referenced by {by} is not declared")]
    UnknownName {
        kind: &'static str,
        name: String,
        by: String,
    },
    #[error("{kind} {name:?} declared twice")]
    Duplicate { kind: &'static str, name: String },
    #[error("invalid amount for {field}: {detail}")]
    Amount { field: String, detail: String },
    #[error("invalid generator settings: {0}")]
    Generator(String),
    #[error("scenario violates {} invariant(s)", .0.len())]
    Invalid(Vec<Violation>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    schema: String,
    name: String,
    resources: Vec<String>,
    pue: f64,
    frame_length_s: f64,
    slot_length_s: f64,
    backhaul_bps: u64,
    #[serde(default)]
    seed: u64,
    vm_types: Vec<VmTypeSpec>,
    pm_types: Vec<PmTypeSpec>,
    cloudlets: Vec<CloudletSpec>,
    aps: Vec<ApSpec>,
    shallow_sites: Vec<ShallowSiteSpec>,
    #[serde(default)]
    qos_defaults: Option<QosDefaults>,
    #[serde(default)]
    qos_weights: Vec<QosSpec>,
    #[serde(default)]
    generator: GeneratorSpec,
    #[serde(default)]
    bandwidth: BandwidthSpec,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Amount {
    Text(String),
    Number(f64),
}

impl Amount {
    fn to_money(&self, field: &str) -> Result<Money, ScenarioError> {
        match self {
            Amount::Text(s) => {
                s.parse()
                    .map_err(|e: crate::money::MoneyParseError| ScenarioError::Amount {
                        field: field.to_string(),
                        detail: e.to_string(),
                    })
            }
            Amount::Number(x) if x.is_finite() => Ok(Money::from_f64(*x)),
            Amount::Number(x) => Err(ScenarioError::Amount {
                field: field.to_string(),
                detail: format!("{x} is not finite"),
            }),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VmTypeSpec {
    name: String,
    demand: BTreeMap<String, f64>,
    base_bandwidth_bps: u64,
    max_data_per_frame_bits: f64,
    /// Prorated from the first PM type when omitted.
    peak_power_kw: Option<f64>,
    on_demand_cap: Amount,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PmTypeSpec {
    name: String,
    supply: BTreeMap<String, f64>,
    idle_power_kw: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CloudletSpec {
    name: String,
    tier: Tier,
    electricity_price: f64,
    pms: BTreeMap<String, u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ApSpec {
    name: String,
    field: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShallowSiteSpec {
    cloudlet: String,
    aggregation_bps: u64,
    attachments: Vec<AttachmentSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttachmentSpec {
    ap: String,
    last_mile_bps: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QosDefaults {
    shallow: f64,
    deep: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QosSpec {
    ap: String,
    cloudlet: String,
    weight: f64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum BidSchedule {
    Fixed(usize),
    PerFrame(Vec<usize>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriceSpec {
    min: Option<f64>,
    mode: Option<f64>,
    max: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorSpec {
    bids: BidSchedule,
    #[serde(default)]
    mix: BTreeMap<String, f64>,
    #[serde(default)]
    prices: BTreeMap<String, PriceSpec>,
    #[serde(default)]
    mobility_rate: f64,
    #[serde(default)]
    persistent_bids: bool,
    #[serde(default = "one")]
    traffic_fraction: f64,
    #[serde(default = "one_frame")]
    frames: usize,
}

fn one() -> f64 {
    1.0
}

fn one_frame() -> usize {
    1
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            bids: BidSchedule::Fixed(0),
            mix: BTreeMap::new(),
            prices: BTreeMap::new(),
            mobility_rate: 0.0,
            persistent_bids: false,
            traffic_fraction: 1.0,
            frames: 1,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BandwidthSpec {
    lower_fraction: Option<f64>,
    upper_bps: Option<f64>,
    tolerance: Option<f64>,
    max_iterations: Option<usize>,
    #[serde(default)]
    subgradient: bool,
}

/// Per-slot bandwidth settings.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BandwidthConfig {
    pub bounds: BoundsRule,
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub system: System,
    pub generator: GeneratorConfig,
    pub bandwidth: BandwidthConfig,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Scenario::parse(&text)
    }

    /// Parses and resolves a scenario without checking model invariants;
    /// see [`Scenario::parse_valid`].
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        check_schema_line(text)?;
        let file: ScenarioFile = toml::from_str(text)?;
        if file.schema != SCHEMA {
            return Err(ScenarioError::SchemaMismatch { found: file.schema });
        }
        file.resolve()
    }

    pub fn parse_valid(text: &str) -> Result<Scenario, ScenarioError> {
        let scenario = Scenario::parse(text)?;
        let violations = scenario.system.validate();
        if violations.is_empty() {
            Ok(scenario)
        } else {
            Err(ScenarioError::Invalid(violations))
        }
    }

    pub fn load_valid(path: &Path) -> Result<Scenario, ScenarioError> {
        let scenario = Scenario::load(path)?;
        let violations = scenario.system.validate();
        if violations.is_empty() {
            Ok(scenario)
        } else {
            Err(ScenarioError::Invalid(violations))
        }
    }
}

fn check_schema_line(text: &str) -> Result<(), ScenarioError> {
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .ok_or(ScenarioError::MissingSchema)?;
    let Some((key, value)) = first.split_once('=') else {
        return Err(ScenarioError::MissingSchema);
    };
    if key.trim() != "schema" {
        return Err(ScenarioError::MissingSchema);
    }
    let value = value
        .split('#')
        .next()
        .unwrap_or("")
        .trim()
        .trim_matches('"');
    if value != SCHEMA {
        return Err(ScenarioError::SchemaMismatch {
            found: value.to_string(),
        });
    }
    Ok(())
}

fn index_by_name<'a>(
    kind: &'static str,
    names: impl Iterator<Item = &'a str>,
) -> Result<BTreeMap<&'a str, usize>, ScenarioError> {
    let mut map = BTreeMap::new();
    for (i, n) in names.enumerate() {
        if map.insert(n, i).is_some() {
            return Err(ScenarioError::Duplicate {
                kind,
                name: n.to_string(),
            });
        }
    }
    Ok(map)
}

fn lookup(
    map: &BTreeMap<&str, usize>,
    kind: &'static str,
    name: &str,
    by: &str,
) -> Result<usize, ScenarioError> {
    map.get(name)
        .copied()
        .ok_or_else(|| ScenarioError::UnknownName {
            kind,
            name: name.to_string(),
            by: by.to_string(),
        })
}

fn resource_vector(
    resources: &BTreeMap<&str, usize>,
    values: &BTreeMap<String, f64>,
    owner: &str,
) -> Result<Vec<f64>, ScenarioError> {
    let mut out = vec![0.0; resources.len()];
    for (k, v) in values {
        out[lookup(resources, "resource", k, owner)?] = *v;
    }
    Ok(out)
}

impl ScenarioFile {
    fn resolve(self) -> Result<Scenario, ScenarioError> {
        let resources = index_by_name("resource", self.resources.iter().map(String::as_str))?;
        let pm_names = index_by_name("PM type", self.pm_types.iter().map(|p| p.name.as_str()))?;
        let vm_names = index_by_name("VM type", self.vm_types.iter().map(|v| v.name.as_str()))?;
        let cloudlet_names =
            index_by_name("cloudlet", self.cloudlets.iter().map(|c| c.name.as_str()))?;
        let ap_names = index_by_name("AP", self.aps.iter().map(|a| a.name.as_str()))?;

        let mut pm_types = Vec::new();
        for p in &self.pm_types {
            pm_types.push(PmType {
                name: p.name.clone(),
                supply: resource_vector(&resources, &p.supply, &p.name)?,
                idle_power_kw: p.idle_power_kw,
            });
        }
        let mut vm_types = Vec::new();
        for v in &self.vm_types {
            let demand = resource_vector(&resources, &v.demand, &v.name)?;
            let peak_power_kw = match (v.peak_power_kw, pm_types.first()) {
                (Some(p), _) => p,
                (None, Some(pm)) => prorated_peak_power(&demand, pm),
                (None, None) => 0.0,
            };
            vm_types.push(VmType {
                name: v.name.clone(),
                demand,
                base_bandwidth: v.base_bandwidth_bps,
                max_data_per_frame: v.max_data_per_frame_bits,
                peak_power_kw,
                on_demand_cap: v
                    .on_demand_cap
                    .to_money(&format!("{}.on_demand_cap", v.name))?,
            });
        }
        let mut cloudlets = Vec::new();
        for c in &self.cloudlets {
            let mut inventory = Vec::new();
            for (pm, &count) in &c.pms {
                inventory.push((PmTypeId(lookup(&pm_names, "PM type", pm, &c.name)?), count));
            }
            inventory.sort();
            cloudlets.push(Cloudlet {
                name: c.name.clone(),
                tier: c.tier,
                pm_inventory: inventory,
                electricity_price: c.electricity_price,
            });
        }
        let mut aps = Vec::new();
        for a in &self.aps {
            aps.push(Ap {
                name: a.name.clone(),
                field: CloudletId(lookup(&cloudlet_names, "cloudlet", &a.field, &a.name)?),
            });
        }
        let mut shallow_sites = Vec::new();
        for s in &self.shallow_sites {
            let mut attachments = Vec::new();
            for att in &s.attachments {
                attachments.push(LastMile {
                    ap: ApId(lookup(&ap_names, "AP", &att.ap, &s.cloudlet)?),
                    capacity: att.last_mile_bps,
                });
            }
            shallow_sites.push(ShallowSite {
                cloudlet: CloudletId(lookup(
                    &cloudlet_names,
                    "cloudlet",
                    &s.cloudlet,
                    "shallow_sites",
                )?),
                attachments,
                aggregation_capacity: s.aggregation_bps,
            });
        }
        let deep = cloudlets
            .iter()
            .position(|c| c.tier == Tier::Deep)
            .map_or(CloudletId(cloudlets.len()), CloudletId);

        let mut topology = Topology {
            aps,
            cloudlets,
            shallow_sites,
            deep,
            backhaul_capacity: self.backhaul_bps,
            qos_weights: BTreeMap::new(),
            pue: self.pue,
            frame_length_s: self.frame_length_s,
            slot_length_s: self.slot_length_s,
        };
        if let Some(d) = &self.qos_defaults {
            for ap in topology.ap_ids() {
                if let Ok(reach) = topology.reachable_cloudlets(ap) {
                    topology.qos_weights.insert((ap, reach[1].0), d.shallow);
                    topology.qos_weights.insert((ap, reach[2].0), d.deep);
                }
            }
        }
        for q in &self.qos_weights {
            let ap = ApId(lookup(&ap_names, "AP", &q.ap, "qos_weights")?);
            let c = CloudletId(lookup(
                &cloudlet_names,
                "cloudlet",
                &q.cloudlet,
                "qos_weights",
            )?);
            topology.qos_weights.insert((ap, c), q.weight);
        }

        let catalog = Catalog {
            resources: self.resources.clone(),
            vm_types,
            pm_types,
        };
        let generator = self.generator.resolve(&catalog, &vm_names, self.seed)?;
        let bandwidth = self.bandwidth.resolve();
        Ok(Scenario {
            name: self.name,
            system: System { catalog, topology },
            generator,
            bandwidth,
        })
    }
}

impl GeneratorSpec {
    fn resolve(
        &self,
        catalog: &Catalog,
        vm_names: &BTreeMap<&str, usize>,
        seed: u64,
    ) -> Result<GeneratorConfig, ScenarioError> {
        let n = catalog.vm_types.len();
        let mut mix = vec![if self.mix.is_empty() { 1.0 } else { 0.0 }; n];
        for (name, &w) in &self.mix {
            mix[lookup(vm_names, "VM type", name, "generator.mix")?] = w;
        }
        let mut prices: Vec<TriangleLaw> = catalog
            .vm_types
            .iter()
            .map(|v| TriangleLaw::under_cap(v.on_demand_cap.to_f64()))
            .collect();
        for (name, spec) in &self.prices {
            let law = &mut prices[lookup(vm_names, "VM type", name, "generator.prices")?];
            if let Some(x) = spec.max {
                law.max = x;
                law.mode = 0.5 * (law.min + x);
            }
            if let Some(x) = spec.min {
                law.min = x;
            }
            if let Some(x) = spec.mode {
                law.mode = x;
            }
        }
        let bid_schedule = match &self.bids {
            BidSchedule::Fixed(n) => vec![*n],
            BidSchedule::PerFrame(v) => v.clone(),
        };
        let config = GeneratorConfig {
            bid_schedule,
            mix,
            prices,
            mobility_rate: self.mobility_rate,
            persistent_bids: self.persistent_bids,
            traffic_fraction: self.traffic_fraction,
            frames: self.frames,
            seed,
        };
        let problems = config.problems();
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(ScenarioError::Generator(problems.join("; ")))
        }
    }
}

impl BandwidthSpec {
    fn resolve(&self) -> BandwidthConfig {
        let mut cfg = BandwidthConfig::default();
        if let Some(x) = self.lower_fraction {
            cfg.bounds.lower_fraction = x;
        }
        cfg.bounds.upper = self.upper_bps;
        if let Some(t) = self.tolerance {
            cfg.tolerances.feasibility = t;
            cfg.tolerances.complementary_slackness = t;
            cfg.tolerances.stationarity = t;
        }
        if let Some(i) = self.max_iterations {
            cfg.tolerances.max_iterations = i;
        }
        if self.subgradient {
            cfg.tolerances.method = Method::Subgradient;
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
# two APs, one PoP
schema = "himec-scenario/1"
name = "mini"
resources = ["cpu", "memory"]
pue = 1.2
frame_length_s = 300
slot_length_s = 5
backhaul_bps = 1000000000
qos_defaults = { shallow = 0.2, deep = 0.4 }

[[vm_types]]
name = "small"
demand = { cpu = 2, memory = 4 }
base_bandwidth_bps = 10000000
max_data_per_frame_bits = 1.5e9
on_demand_cap = "1.108"

[[pm_types]]
name = "pm"
supply = { cpu = 16, memory = 64 }
idle_power_kw = 0.7

[[cloudlets]]
name = "f1"
tier = "field"
electricity_price = 2.0
pms = { pm = 1 }

[[cloudlets]]
name = "f2"
tier = "field"
electricity_price = 2.0
pms = { pm = 1 }

[[cloudlets]]
name = "s"
tier = "shallow"
electricity_price = 2.0
pms = { pm = 2 }

[[cloudlets]]
name = "d"
tier = "deep"
electricity_price = 2.0
pms = { pm = 4 }

[[aps]]
name = "a1"
field = "f1"

[[aps]]
name = "a2"
field = "f2"

[[shallow_sites]]
cloudlet = "s"
aggregation_bps = 1000000000
attachments = [
  { ap = "a1", last_mile_bps = 1000000000 },
  { ap = "a2", last_mile_bps = 1000000000 },
]

[generator]
bids = 10
"#;

    #[test]
    fn minimal_scenario_resolves() {
        let s = Scenario::parse_valid(MINIMAL).unwrap();
        let sys = &s.system;
        assert_eq!(sys.topology.cloudlets.len(), 4);
        assert_eq!(sys.topology.deep, CloudletId(3));
        assert_eq!(sys.topology.qos_weight(ApId(1), CloudletId(3)), 0.4);
        assert_eq!(
            sys.catalog.vm_types[0].on_demand_cap,
            Money::from_units(1_108_000)
        );
        // mean(2/16, 4/64) * 0.7
        let expected = 0.7 * (0.125 + 0.0625) / 2.0;
        assert!((sys.catalog.vm_types[0].peak_power_kw - expected).abs() < 1e-15);
        assert_eq!(s.generator.bid_schedule, vec![10]);
        assert_eq!(s.generator.mix, vec![1.0]);
        assert_eq!(s.generator.prices[0].mode, 0.554);
    }

    #[test]
    fn schema_must_come_first() {
        let moved = MINIMAL.replace("schema = \"himec-scenario/1\"\n", "")
            + "schema = \"himec-scenario/1\"\n";
        assert!(matches!(
            Scenario::parse(&moved),
            Err(ScenarioError::MissingSchema)
        ));
        let wrong = MINIMAL.replace("himec-scenario/1", "himec-scenario/9");
        assert!(matches!(
            Scenario::parse(&wrong),
            Err(ScenarioError::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let extra = MINIMAL.replace("name = \"mini\"", "name = \"mini\"\ncolour = \"red\"");
        assert!(matches!(
            Scenario::parse(&extra),
            Err(ScenarioError::Syntax(_))
        ));
    }

    #[test]
    fn missing_link_capacity_is_an_error() {
        let gone = MINIMAL.replace(
            "{ ap = \"a2\", last_mile_bps = 1000000000 }",
            "{ ap = \"a2\" }",
        );
        assert!(matches!(
            Scenario::parse(&gone),
            Err(ScenarioError::Syntax(_))
        ));
    }

    #[test]
    fn unresolved_names_are_reported() {
        let bad = MINIMAL.replace("field = \"f2\"", "field = \"f9\"");
        match Scenario::parse(&bad) {
            Err(ScenarioError::UnknownName { kind, name, .. }) => {
                assert_eq!(kind, "cloudlet");
                assert_eq!(name, "f9");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invariant_violations_surface() {
        let bad = MINIMAL.replace("pue = 1.2", "pue = 0.5");
        assert!(Scenario::parse(&bad).is_ok());
        assert!(
            matches!(Scenario::parse_valid(&bad), Err(ScenarioError::Invalid(v)) if v.len() == 1)
        );
    }

    #[test]
    fn bad_generator_settings() {
        let bad = MINIMAL.replace("bids = 10", "bids = 10\nmobility_rate = 1.5");
        assert!(matches!(
            Scenario::parse(&bad),
            Err(ScenarioError::Generator(_))
        ));
    }
}
