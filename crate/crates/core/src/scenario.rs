//! Load/PV scenario generation.
//!
//! A pool of synthetic households stands in for metered midday data. Each
//! household carries a time series over the midday window; all households
//! share common per-sample factors (irradiance, demand level) plus their own
//! idiosyncratic noise. A scenario picks one sample time and, for every load
//! point, aggregates a random draw of households. PV output is expressed
//! relative to the node's nominal load, so per-node PV/load ratios stay inside
//! `pv_to_load_ratio_range` before the hard clip at the inverter's rating.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feeder::{Feeder, Phase};
use crate::powerflow::InjectionSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub count: usize,
    /// PV output as a fraction of the node's nominal load.
    pub pv_to_load_ratio_range: [f64; 2],
    /// Midday demand as a fraction of the node's nominal load.
    pub load_scale_range: [f64; 2],
    /// Lagging power factor of each household.
    pub power_factor_range: [f64; 2],
    pub household_pool_size: usize,
    pub households_per_node: usize,
    /// Samples in each household's midday window.
    pub samples_per_household: usize,
    /// Weight in [0, 1] of the factors shared by all households at a sample time.
    pub common_variation: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 1000,
            pv_to_load_ratio_range: [0.74, 1.05],
            load_scale_range: [0.25, 0.65],
            power_factor_range: [0.85, 1.0],
            household_pool_size: 11,
            households_per_node: 4,
            samples_per_household: 620,
            common_variation: 0.9,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("pv_to_load_ratio_range", self.pv_to_load_ratio_range),
            ("load_scale_range", self.load_scale_range),
            ("power_factor_range", self.power_factor_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) || lo < 0.0 {
                return Err(Error::Config(format!(
                    "{name}: need 0 <= low <= high, got [{lo}, {hi}]"
                )));
            }
        }
        let [pf_lo, pf_hi] = self.power_factor_range;
        if pf_lo <= 0.0 || pf_hi > 1.0 {
            return Err(Error::Config("power_factor_range must lie in (0, 1]".into()));
        }
        if self.count < 1 {
            return Err(Error::Config("count must be >= 1".into()));
        }
        if self.household_pool_size < 1 || self.households_per_node < 1 || self.samples_per_household < 1 {
            return Err(Error::Config(
                "household_pool_size, households_per_node and samples_per_household must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.common_variation) {
            return Err(Error::Config("common_variation must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One household over the midday window, in fractions of a nominal load.
#[derive(Clone, Debug, PartialEq)]
pub struct HouseholdProfile {
    pub load: Vec<f64>,
    pub pv: Vec<f64>,
    pub power_factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HouseholdPool {
    pub households: Vec<HouseholdProfile>,
}

impl HouseholdPool {
    pub fn len(&self) -> usize {
        self.households.len()
    }

    pub fn is_empty(&self) -> bool {
        self.households.is_empty()
    }

    /// Shortest window over all households.
    pub fn samples(&self) -> usize {
        self.households
            .iter()
            .map(|h| h.load.len().min(h.pv.len()))
            .min()
            .unwrap_or(0)
    }
}

pub fn generate_household_pool(config: &GenConfig, seed: u64) -> Result<HouseholdPool> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = config.samples_per_household;
    let c = config.common_variation;
    let own = (1.0 - c * c).sqrt();
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let z_load: Vec<f64> = (0..t_len).map(|_| normal()).collect();
    let z_sun: Vec<f64> = (0..t_len).map(|_| normal()).collect();

    let [l_lo, l_hi] = config.load_scale_range;
    let [r_lo, r_hi] = config.pv_to_load_ratio_range;
    let [pf_lo, pf_hi] = config.power_factor_range;
    let r_mid = 0.5 * (r_lo + r_hi);

    let mut households = Vec::with_capacity(config.household_pool_size);
    for _ in 0..config.household_pool_size {
        let u = (normal() * 0.5).tanh() * 0.5 + 0.5;
        let power_factor = pf_lo + (pf_hi - pf_lo) * u;
        let mut load = Vec::with_capacity(t_len);
        let mut pv = Vec::with_capacity(t_len);
        for t in 0..t_len {
            // Lognormal demand squashed into the configured band.
            let x = (c * z_load[t] + own * normal()).exp();
            load.push(l_lo + (l_hi - l_lo) * x / (1.0 + x));
            // Clipped Gaussian around the midday irradiance level.
            let g = r_mid + 0.25 * (r_hi - r_lo) * (c * z_sun[t] + own * normal());
            pv.push(g.clamp(r_lo, r_hi));
        }
        households.push(HouseholdProfile { load, pv, power_factor });
    }
    Ok(HouseholdPool { households })
}

/// Reads household profiles from a `household_id,p_kw,pv_kw` CSV.
///
/// Rows of one household form its time series. Values are scaled by the
/// largest household demand in the file so profiles become fractions of a
/// nominal load; every household gets the midpoint of `power_factor_range`.
pub fn load_household_csv(path: impl AsRef<Path>, config: &GenConfig) -> Result<HouseholdPool> {
    #[derive(Deserialize)]
    struct Row {
        household_id: String,
        p_kw: f64,
        pv_kw: f64,
    }
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut order: Vec<String> = Vec::new();
    let mut series: HashMap<String, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for row in reader.deserialize() {
        let row: Row = row?;
        if !(row.p_kw >= 0.0 && row.pv_kw >= 0.0) {
            return Err(Error::Dataset(format!(
                "{}: negative power for household {}",
                path.display(),
                row.household_id
            )));
        }
        let entry = series.entry(row.household_id.clone()).or_insert_with(|| {
            order.push(row.household_id.clone());
            (Vec::new(), Vec::new())
        });
        entry.0.push(row.p_kw);
        entry.1.push(row.pv_kw);
    }
    let peak = series
        .values()
        .flat_map(|(p, _)| p.iter().copied())
        .fold(0.0f64, f64::max);
    if order.is_empty() || peak <= 0.0 {
        return Err(Error::Dataset(format!("{}: no household demand", path.display())));
    }
    let pf = 0.5 * (config.power_factor_range[0] + config.power_factor_range[1]);
    let households = order
        .iter()
        .map(|id| {
            let (p, pv) = &series[id];
            HouseholdProfile {
                load: p.iter().map(|x| x / peak).collect(),
                pv: pv.iter().map(|x| x / peak).collect(),
                power_factor: pf,
            }
        })
        .collect();
    Ok(HouseholdPool { households })
}

/// One snapshot of per-unit demand and PV output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: usize,
    /// Per load point (feeder order).
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
    /// Per PV unit (feeder order).
    pub p_pv: Vec<f64>,
}

impl Scenario {
    /// All-zero demand and generation.
    pub fn empty(feeder: &Feeder, id: usize) -> Self {
        Scenario {
            id,
            p_load: vec![0.0; feeder.loads().len()],
            q_load: vec![0.0; feeder.loads().len()],
            p_pv: vec![0.0; feeder.pv_units().len()],
        }
    }

    /// Nominal demand from the feeder file, no PV.
    pub fn nominal(feeder: &Feeder, id: usize) -> Self {
        Scenario {
            id,
            p_load: feeder.loads().iter().map(|l| l.p_nominal).collect(),
            q_load: feeder.loads().iter().map(|l| l.q_nominal).collect(),
            p_pv: vec![0.0; feeder.pv_units().len()],
        }
    }

    pub fn injections(&self, feeder: &Feeder, q_pv: &[f64]) -> Result<InjectionSet> {
        InjectionSet::from_parts(feeder, &self.p_load, &self.q_load, &self.p_pv, q_pv)
    }

    /// PV output multiplied by `factor`, re-clipped to the rating.
    pub fn with_pv_scaled(&self, feeder: &Feeder, factor: f64) -> Self {
        let mut s = self.clone();
        for (p, unit) in s.p_pv.iter_mut().zip(feeder.pv_units()) {
            *p = (*p * factor).clamp(0.0, unit.p_rated);
        }
        s
    }
}

/// Nominal load behind each PV unit: the load point on the same node-phase,
/// or the unit's own active rating when there is none.
fn pv_reference(feeder: &Feeder) -> Vec<(Option<usize>, f64)> {
    let by_node: HashMap<(usize, Phase), usize> = feeder
        .loads()
        .iter()
        .enumerate()
        .map(|(i, l)| ((l.bus, l.phase), i))
        .collect();
    feeder
        .pv_units()
        .iter()
        .map(|pv| match by_node.get(&(pv.bus, pv.phase)) {
            Some(&l) => (Some(l), feeder.loads()[l].p_nominal),
            None => (None, pv.p_rated),
        })
        .collect()
}

/// Builds one scenario from a random sample time and random household draws.
pub fn aggregate_profiles<R: Rng + ?Sized>(
    pool: &HouseholdPool,
    feeder: &Feeder,
    config: &GenConfig,
    id: usize,
    rng: &mut R,
) -> Result<Scenario> {
    if pool.is_empty() {
        return Err(Error::Dataset("household pool is empty".into()));
    }
    let samples = pool.samples();
    if samples == 0 {
        return Err(Error::Dataset("household profiles are empty".into()));
    }
    let per_node = config.households_per_node.max(1);
    let t = rng.random_range(0..samples);

    let draw = |rng: &mut R| -> Vec<usize> { (0..per_node).map(|_| rng.random_range(0..pool.len())).collect() };

    let mut picks = Vec::with_capacity(feeder.loads().len());
    let mut p_load = Vec::with_capacity(feeder.loads().len());
    let mut q_load = Vec::with_capacity(feeder.loads().len());
    for load in feeder.loads() {
        let chosen = draw(rng);
        let share = load.p_nominal / per_node as f64;
        let (mut p, mut q) = (0.0, 0.0);
        for &h in &chosen {
            let hh = &pool.households[h];
            let ph = share * hh.load[t];
            let pf = hh.power_factor;
            p += ph;
            q += ph * (1.0 - pf * pf).max(0.0).sqrt() / pf;
        }
        p_load.push(p);
        q_load.push(q);
        picks.push(chosen);
    }

    let mut p_pv = Vec::with_capacity(feeder.pv_units().len());
    for ((load, reference), unit) in pv_reference(feeder).into_iter().zip(feeder.pv_units()) {
        let chosen = match load {
            Some(l) => picks[l].clone(),
            None => draw(rng),
        };
        let share = reference / per_node as f64;
        let p: f64 = chosen.iter().map(|&h| share * pool.households[h].pv[t]).sum();
        p_pv.push(p.clamp(0.0, unit.p_rated));
    }

    Ok(Scenario {
        id,
        p_load,
        q_load,
        p_pv,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSet {
    pub scenarios: Vec<Scenario>,
    pub seed: u64,
    pub generator_config: GenConfig,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.scenarios.iter().map(|s| s.id).collect()
    }
}

/// Generates `config.count` scenarios with ids `0..count`.
pub fn generate_scenarios(feeder: &Feeder, config: &GenConfig, seed: u64) -> Result<ScenarioSet> {
    let pool = generate_household_pool(config, seed)?;
    generate_from_pool(&pool, feeder, config, seed)
}

pub fn generate_from_pool(pool: &HouseholdPool, feeder: &Feeder, config: &GenConfig, seed: u64) -> Result<ScenarioSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE7_A210);
    let scenarios = (0..config.count)
        .map(|id| aggregate_profiles(pool, feeder, config, id, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioSet {
        scenarios,
        seed,
        generator_config: config.clone(),
    })
}

/// Random disjoint partition; scenario ids are preserved.
pub fn split(set: &ScenarioSet, train_fraction: f64, seed: u64) -> Result<(ScenarioSet, ScenarioSet)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let n = set.len();
    if n < 2 {
        return Err(Error::Dataset(format!("cannot split {n} scenario(s)")));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train_idx, test_idx) = order.split_at(n_train);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        ScenarioSet {
            scenarios: idx.iter().map(|&i| set.scenarios[i].clone()).collect(),
            seed: set.seed,
            generator_config: set.generator_config.clone(),
        }
    };
    Ok((pick(train_idx), pick(test_idx)))
}

#[derive(Serialize, Deserialize)]
struct ScenarioMeta {
    seed: u64,
    count: usize,
    load_points: usize,
    pv_units: usize,
    generator_config: GenConfig,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.json");
    PathBuf::from(os)
}

/// Writes `scenario_id,element_type,element_id,p_pu,q_pu` rows plus a
/// `<path>.meta.json` sidecar holding the generator config and seed.
pub fn write_scenarios(set: &ScenarioSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scenario_id", "element_type", "element_id", "p_pu", "q_pu"])?;
    for s in &set.scenarios {
        for (i, (p, q)) in s.p_load.iter().zip(&s.q_load).enumerate() {
            w.write_record([
                s.id.to_string(),
                "load".into(),
                i.to_string(),
                p.to_string(),
                q.to_string(),
            ])?;
        }
        for (i, p) in s.p_pv.iter().enumerate() {
            w.write_record([s.id.to_string(), "pv".into(), i.to_string(), p.to_string(), "0".into()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let first = set.scenarios.first();
    let meta = ScenarioMeta {
        seed: set.seed,
        count: set.len(),
        load_points: first.map_or(0, |s| s.p_load.len()),
        pv_units: first.map_or(0, |s| s.p_pv.len()),
        generator_config: set.generator_config.clone(),
    };
    let meta_file = meta_path(path);
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(&meta_file, text + "\n").map_err(|e| Error::io(&meta_file, e))
}

pub fn read_scenarios(path: impl AsRef<Path>) -> Result<ScenarioSet> {
    #[derive(Deserialize)]
    struct Row {
        scenario_id: usize,
        element_type: String,
        element_id: usize,
        p_pu: f64,
        q_pu: f64,
    }
    let path = path.as_ref();
    let meta_file = meta_path(path);
    let meta_text = std::fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
    let meta: ScenarioMeta = serde_json::from_str(&meta_text).map_err(|e| Error::schema_from_json(&e))?;

    let mut scenarios: Vec<Scenario> = Vec::with_capacity(meta.count);
    let mut position: HashMap<usize, usize> = HashMap::new();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    for row in reader.deserialize() {
        let row: Row = row?;
        let slot = *position.entry(row.scenario_id).or_insert_with(|| {
            scenarios.push(Scenario {
                id: row.scenario_id,
                p_load: vec![f64::NAN; meta.load_points],
                q_load: vec![f64::NAN; meta.load_points],
                p_pv: vec![f64::NAN; meta.pv_units],
            });
            scenarios.len() - 1
        });
        let s = &mut scenarios[slot];
        let bad = || {
            Error::Dataset(format!(
                "{}: bad element {} {}",
                path.display(),
                row.element_type,
                row.element_id
            ))
        };
        match row.element_type.as_str() {
            "load" => {
                *s.p_load.get_mut(row.element_id).ok_or_else(bad)? = row.p_pu;
                *s.q_load.get_mut(row.element_id).ok_or_else(bad)? = row.q_pu;
            }
            "pv" => *s.p_pv.get_mut(row.element_id).ok_or_else(bad)? = row.p_pu,
            _ => return Err(bad()),
        }
    }
    if scenarios.len() != meta.count {
        return Err(Error::Dataset(format!(
            "{}: {} scenarios, metadata says {}",
            path.display(),
            scenarios.len(),
            meta.count
        )));
    }
    if let Some(s) = scenarios
        .iter()
        .find(|s| s.p_load.iter().chain(&s.q_load).chain(&s.p_pv).any(|x| x.is_nan()))
    {
        return Err(Error::Dataset(format!(
            "{}: scenario {} incomplete",
            path.display(),
            s.id
        )));
    }
    Ok(ScenarioSet {
        scenarios,
        seed: meta.seed,
        generator_config: meta.generator_config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::load_feeder;

    fn synth34() -> Feeder {
        load_feeder(concat!(env!("CARGO_MANIFEST_DIR"), "/../../feeders/synth34.json")).unwrap()
    }

    #[test]
    fn pool_has_configured_size_and_is_seeded() {
        let cfg = GenConfig::default();
        let a = generate_household_pool(&cfg, 5).unwrap();
        assert_eq!(a.len(), 11);
        assert_eq!(a, generate_household_pool(&cfg, 5).unwrap());
        assert_ne!(a, generate_household_pool(&cfg, 6).unwrap());
    }

    #[test]
    fn zero_ratio_means_no_pv() {
        let cfg = GenConfig {
            pv_to_load_ratio_range: [0.0, 0.0],
            ..GenConfig::default()
        };
        let pool = generate_household_pool(&cfg, 1).unwrap();
        assert!(pool.households.iter().all(|h| h.pv.iter().all(|&p| p == 0.0)));
    }

    #[test]
    fn identical_pool_gives_identical_nodes() {
        let f = synth34();
        let profile = HouseholdProfile {
            load: vec![0.5],
            pv: vec![0.9],
            power_factor: 1.0,
        };
        let pool = HouseholdPool {
            households: vec![profile; 3],
        };
        let cfg = GenConfig {
            households_per_node: 1,
            ..GenConfig::default()
        };
        let s = aggregate_profiles(&pool, &f, &cfg, 0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (p, load) in s.p_load.iter().zip(f.loads()) {
            assert!((p - 0.5 * load.p_nominal).abs() < 1e-15);
        }
        assert!(s.q_load.iter().all(|&q| q == 0.0));
        for (p, load) in s.p_pv.iter().zip(f.loads()) {
            assert!((p - 0.9 * load.p_nominal).abs() < 1e-15);
        }
    }

    #[test]
    fn pv_is_clipped_at_rating() {
        let f = synth34();
        let pool = HouseholdPool {
            households: vec![HouseholdProfile {
                load: vec![0.5],
                pv: vec![3.0],
                power_factor: 0.9,
            }],
        };
        let s = aggregate_profiles(&pool, &f, &GenConfig::default(), 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (p, unit) in s.p_pv.iter().zip(f.pv_units()) {
            assert_eq!(*p, unit.p_rated);
        }
    }

    #[test]
    fn ratios_and_power_factors_stay_in_range() {
        let f = synth34();
        let cfg = GenConfig {
            count: 200,
            ..GenConfig::default()
        };
        let set = generate_scenarios(&f, &cfg, 11).unwrap();
        assert_eq!(set.ids(), (0..200).collect::<Vec<_>>());
        for s in &set.scenarios {
            for ((p, unit), load) in s.p_pv.iter().zip(f.pv_units()).zip(f.loads()) {
                assert!(*p >= 0.0 && *p <= unit.p_rated);
                let ratio = p / load.p_nominal;
                assert!((0.74 - 1e-12..=1.05 + 1e-12).contains(&ratio), "{ratio}");
            }
            for (p, q) in s.p_load.iter().zip(&s.q_load) {
                let pf = p / (p * p + q * q).sqrt();
                assert!((0.85 - 1e-12..=1.0).contains(&pf), "{pf}");
            }
        }
    }

    #[test]
    fn split_sizes_and_coverage() {
        let f = synth34();
        let cfg = GenConfig {
            count: 10,
            ..GenConfig::default()
        };
        let set = generate_scenarios(&f, &cfg, 2).unwrap();
        let (train, test) = split(&set, 0.8, 7).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let again = split(&set, 0.8, 7).unwrap();
        assert_eq!(train.ids(), again.0.ids());
        let mut all: Vec<usize> = train.ids().into_iter().chain(test.ids()).collect();
        all.sort_unstable();
        assert_eq!(all, set.ids());

        let one = ScenarioSet {
            scenarios: set.scenarios[..1].to_vec(),
            ..set.clone()
        };
        assert!(split(&one, 0.5, 0).is_err());
        assert!(split(&set, 1.0, 0).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact_and_reproducible() {
        let f = synth34();
        let cfg = GenConfig {
            count: 5,
            ..GenConfig::default()
        };
        let set = generate_scenarios(&f, &cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_scenarios(&set, &a).unwrap();
        write_scenarios(&generate_scenarios(&f, &cfg, 3).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(
            std::fs::read(meta_path(&a)).unwrap(),
            std::fs::read(meta_path(&b)).unwrap()
        );
        let back = read_scenarios(&a).unwrap();
        assert_eq!(back, set);
        let header = std::fs::read_to_string(&a).unwrap();
        assert!(header.starts_with("scenario_id,element_type,element_id,p_pu,q_pu\n"));
    }

    #[test]
    fn household_csv_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("houses.csv");
        std::fs::write(
            &path,
            "household_id,p_kw,pv_kw\nh1,2.0,1.0\nh1,4.0,3.0\nh2,1.0,0.0\nh2,1.0,0.5\n",
        )
        .unwrap();
        let pool = load_household_csv(&path, &GenConfig::default()).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.households[0].load, vec![0.5, 1.0]);
        assert_eq!(pool.households[0].pv, vec![0.25, 0.75]);
        assert_eq!(pool.samples(), 2);
    }
}
