//! Synthetic coupled datasets: county populations, gravity-model flows, a
//! stochastic metapopulation SEIR epidemic and mobility trends, emitted in the
//! same file layouts the ingestion code reads.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::data_ingest::{
    compute_deltas, write_cases, write_json, write_populations, write_trends, CaseTable,
    CountySeries, MobilityTrends,
};
use crate::days::{week_of, Fips};
use crate::dp_mobility::{write_trips, FlowRecord, FlowTable, TripRecord};
use crate::error::{Error, Result};

/// Generator constants. They are not calibrated to anything.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixtures {
    /// Intra-county flow as a fraction of population.
    pub intra_fraction: f64,
    /// Fraction of new infections that are eventually reported.
    pub reporting_rate: f64,
    /// Total inter-county outflow as a fraction of total population.
    pub outflow_fraction: f64,
    /// Fraction of travellers present in the trip panel.
    pub panel_rate: f64,
    pub death_fraction: f64,
    pub death_lag: u32,
    /// Mobility falls linearly over `[lockdown_start, lockdown_end]`, stays
    /// at the county's minimum until `recovery_start` and then climbs back
    /// halfway by the horizon.
    pub lockdown_start: u32,
    pub lockdown_end: u32,
    pub recovery_start: u32,
    pub min_mobility: (f64, f64),
    pub mobility_jitter: f64,
    /// Log-uniform population range.
    pub population_range: (f64, f64),
    /// Floor on squared distances in the unit square.
    pub min_dist2: f64,
    pub counties_per_state: usize,
}

impl Default for Fixtures {
    fn default() -> Self {
        Fixtures {
            intra_fraction: 0.3,
            reporting_rate: 0.25,
            outflow_fraction: 0.1,
            panel_rate: 0.01,
            death_fraction: 0.02,
            death_lag: 10,
            lockdown_start: 70,
            lockdown_end: 84,
            recovery_start: 100,
            min_mobility: (0.4, 0.7),
            mobility_jitter: 0.02,
            population_range: (5e4, 1e6),
            min_dist2: 0.0025,
            counties_per_state: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpidemicParams {
    pub n_counties: usize,
    /// Drawn from the fixture range when absent.
    pub populations: Option<Vec<u64>>,
    pub beta: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub kappa: f64,
    /// County indices infected on `seed_day`. With drawn populations county 0
    /// is the most populous.
    pub seed_counties: Vec<usize>,
    pub seed_infected: u64,
    pub seed_day: u32,
    /// Last simulated day (inclusive).
    pub horizon: u32,
    pub seed: u64,
    pub fixtures: Fixtures,
}

impl Default for EpidemicParams {
    fn default() -> Self {
        EpidemicParams {
            n_counties: 50,
            populations: None,
            beta: 0.25,
            sigma: 0.2,
            gamma: 1.0 / 7.0,
            kappa: 0.5,
            seed_counties: vec![0],
            seed_infected: 20,
            seed_day: 20,
            horizon: 150,
            seed: 0,
            fixtures: Fixtures::default(),
        }
    }
}

impl EpidemicParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_counties == 0 {
            return bad("at least one county is required".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta {} must be non-negative", self.beta));
        }
        for (name, v) in [("sigma", self.sigma), ("gamma", self.gamma)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa {} outside [0, 1]", self.kappa));
        }
        if let Some(p) = &self.populations {
            if p.len() != self.n_counties {
                return bad(format!(
                    "{} populations for {} counties",
                    p.len(),
                    self.n_counties
                ));
            }
            if let Some(v) = p.iter().find(|&&v| v < 1000) {
                return bad(format!("population {v} below 1000"));
            }
        }
        if let Some(&i) = self.seed_counties.iter().find(|&&i| i >= self.n_counties) {
            return bad(format!("seed county {i} out of range"));
        }
        if self.seed_day > self.horizon {
            return bad(format!(
                "seed day {} after horizon {}",
                self.seed_day, self.horizon
            ));
        }
        let f = &self.fixtures;
        if !(f.lockdown_start <= f.lockdown_end && f.lockdown_end <= f.recovery_start) {
            return bad("lockdown schedule out of order".into());
        }
        if !(0.0 < f.min_mobility.0
            && f.min_mobility.0 <= f.min_mobility.1
            && f.min_mobility.1 <= 1.0)
        {
            return bad("min mobility range must lie in (0, 1]".into());
        }
        if !(1000.0 <= f.population_range.0 && f.population_range.0 <= f.population_range.1) {
            return bad("population range must start at 1000 or more".into());
        }
        for (name, v) in [
            ("intra fraction", f.intra_fraction),
            ("reporting rate", f.reporting_rate),
            ("panel rate", f.panel_rate),
            ("death fraction", f.death_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if f.intra_fraction == 0.0
            || f.counties_per_state == 0
            || f.min_dist2 <= 0.0
            || f.outflow_fraction < 0.0
        {
            return bad(
                "intra fraction, counties per state and distance floor must be positive".into(),
            );
        }
        Ok(())
    }
}

/// SEIR compartments of every county on one day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Compartments {
    pub s: Vec<u64>,
    pub e: Vec<u64>,
    pub i: Vec<u64>,
    pub r: Vec<u64>,
}

impl Compartments {
    pub fn total(&self, county: usize) -> u64 {
        self.s[county] + self.e[county] + self.i[county] + self.r[county]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub params: EpidemicParams,
    pub fips: Vec<Fips>,
    pub populations: Vec<u64>,
    pub coords: Vec<(f64, f64)>,
    /// `base_flows[j][i]`: pre-lockdown daily flow from county j to county i.
    pub base_flows: Vec<Vec<f64>>,
    /// `mobility[t][i]`: outflow of county i on day t relative to baseline.
    pub mobility: Vec<Vec<f64>>,
    /// Compartments at the end of each day.
    pub states: Vec<Compartments>,
    pub cases: CaseTable,
    /// Raw weekly distinct-traveller counts of the trip panel.
    pub flows: FlowTable,
    pub trends: MobilityTrends,
}

impl Simulation {
    /// Daily flow from `j` to `i` on day `t`.
    pub fn flow(&self, t: u32, j: usize, i: usize) -> f64 {
        if i == j {
            self.base_flows[j][j]
        } else {
            self.base_flows[j][i] * self.mobility[t as usize][j]
        }
    }

    /// First day with a reported case, per county.
    pub fn first_case_day(&self) -> Vec<Option<u32>> {
        self.cases
            .counties
            .values()
            .map(|s| {
                s.cum_cases
                    .iter()
                    .position(|&c| c > 0)
                    .map(|p| s.first_day + p as u32)
            })
            .collect()
    }

    /// One trip record per distinct traveller, week and county pair.
    pub fn trips(&self) -> impl Iterator<Item = TripRecord> + '_ {
        self.flows.records.iter().flat_map(|r| {
            (0..r.count as u64).map(move |k| TripRecord {
                user_id: format!("u{}-{}-{k}", r.origin, r.dest),
                week: r.week,
                origin: r.origin,
                dest: r.dest,
            })
        })
    }

    pub fn population_map(&self) -> BTreeMap<Fips, u64> {
        self.fips
            .iter()
            .copied()
            .zip(self.populations.iter().copied())
            .collect()
    }
}

fn fips_of(k: usize, per_state: usize) -> Fips {
    let state = (k / per_state + 1) as u32;
    Fips(state * 1000 + 2 * (k % per_state) as u32 + 1)
}

fn mobility_schedule(f: &Fixtures, floor: f64, t: u32, horizon: u32) -> f64 {
    let t = t as f64;
    let (a, b, c) = (
        f.lockdown_start as f64,
        f.lockdown_end as f64,
        f.recovery_start as f64,
    );
    let h = horizon as f64;
    if t <= a {
        1.0
    } else if t < b {
        1.0 - (1.0 - floor) * (t - a) / (b - a)
    } else if t <= c || h <= c {
        floor
    } else {
        floor + 0.5 * (1.0 - floor) * (t - c) / (h - c)
    }
}

fn binomial<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p)
        .expect("probability in (0, 1)")
        .sample(rng)
}

pub fn simulate(params: &EpidemicParams) -> Result<Simulation> {
    params.validate()?;
    let f = params.fixtures;
    let n = params.n_counties;
    let horizon = params.horizon;
    let days = horizon as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let populations = match &params.populations {
        Some(p) => p.clone(),
        None => {
            let (lo, hi) = (f.population_range.0.ln(), f.population_range.1.ln());
            let mut p: Vec<u64> = (0..n)
                .map(|_| rng.random_range(lo..=hi).exp().round() as u64)
                .collect();
            p.sort_unstable_by(|a, b| b.cmp(a));
            p
        }
    };
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    let fips: Vec<Fips> = (0..n).map(|k| fips_of(k, f.counties_per_state)).collect();

    let mut gravity = vec![vec![0.0; n]; n];
    let mut gravity_total = 0.0;
    for j in 0..n {
        for i in 0..n {
            if i != j {
                let (dx, dy) = (coords[i].0 - coords[j].0, coords[i].1 - coords[j].1);
                let d2 = (dx * dx + dy * dy).max(f.min_dist2);
                gravity[j][i] = populations[j] as f64 * populations[i] as f64 / d2;
                gravity_total += gravity[j][i];
            }
        }
    }
    let total_pop: f64 = populations.iter().map(|&p| p as f64).sum();
    let g = if gravity_total > 0.0 {
        f.outflow_fraction * total_pop / gravity_total
    } else {
        0.0
    };
    let base_flows: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            (0..n)
                .map(|i| {
                    if i == j {
                        f.intra_fraction * populations[j] as f64
                    } else {
                        g * gravity[j][i]
                    }
                })
                .collect()
        })
        .collect();

    let floors: Vec<f64> = (0..n)
        .map(|_| {
            if f.min_mobility.0 < f.min_mobility.1 {
                rng.random_range(f.min_mobility.0..=f.min_mobility.1)
            } else {
                f.min_mobility.0
            }
        })
        .collect();
    let mobility: Vec<Vec<f64>> = (0..=horizon)
        .map(|t| {
            (0..n)
                .map(|i| {
                    let jitter = if t > f.lockdown_start && f.mobility_jitter > 0.0 {
                        rng.random_range(-f.mobility_jitter..=f.mobility_jitter)
                    } else {
                        0.0
                    };
                    (mobility_schedule(&f, floors[i], t, horizon) + jitter).clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect();

    let mut state = Compartments {
        s: populations.clone(),
        e: vec![0; n],
        i: vec![0; n],
        r: vec![0; n],
    };
    let mut infected_total = vec![0u64; n];
    let mut states = Vec::with_capacity(days);
    let mut reported = vec![Vec::with_capacity(days); n];
    for t in 0..=horizon {
        if t > 0 {
            let prev = t as usize - 1;
            let lambda: Vec<f64> = (0..n)
                .map(|i| {
                    let imported: f64 = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| {
                            base_flows[j][i] * mobility[prev][j] / base_flows[i][i]
                                * state.i[j] as f64
                        })
                        .sum();
                    params.beta * (state.i[i] as f64 + params.kappa * imported)
                        / populations[i] as f64
                })
                .collect();
            for c in 0..n {
                let new_e = binomial(&mut rng, state.s[c], 1.0 - (-lambda[c]).exp());
                let new_i = binomial(&mut rng, state.e[c], 1.0 - (-params.sigma).exp());
                let new_r = binomial(&mut rng, state.i[c], 1.0 - (-params.gamma).exp());
                state.s[c] -= new_e;
                state.e[c] = state.e[c] + new_e - new_i;
                state.i[c] = state.i[c] + new_i - new_r;
                state.r[c] += new_r;
                infected_total[c] += new_i;
            }
        }
        if t == params.seed_day {
            for &c in &params.seed_counties {
                let k = params.seed_infected.min(state.s[c]);
                state.s[c] -= k;
                state.i[c] += k;
                infected_total[c] += k;
            }
        }
        for c in 0..n {
            reported[c].push((f.reporting_rate * infected_total[c] as f64).floor() as u64);
        }
        states.push(state.clone());
    }

    let mut counties = BTreeMap::new();
    for c in 0..n {
        let cum_deaths = (0..days)
            .map(|t| {
                t.checked_sub(f.death_lag as usize).map_or(0, |s| {
                    (f.death_fraction * reported[c][s] as f64).floor() as u64
                })
            })
            .collect();
        counties.insert(
            fips[c],
            CountySeries {
                fips: fips[c],
                county: format!("County {}", fips[c]),
                state: format!("State {:02}", fips[c].state()),
                first_day: 0,
                cum_cases: reported[c].clone(),
                cum_deaths,
                deltas: None,
            },
        );
    }
    let mut cases = compute_deltas(CaseTable {
        last_day: Some(horizon),
        counties,
        ..CaseTable::default()
    });
    cases.populations = fips
        .iter()
        .copied()
        .zip(populations.iter().copied())
        .collect();

    let mut records = Vec::new();
    for week in 0..=week_of(horizon) {
        let week_days: Vec<usize> = (week * 7..(week * 7 + 7).min(horizon + 1))
            .map(|t| t as usize)
            .collect();
        for j in 0..n {
            for i in 0..n {
                let mean = week_days
                    .iter()
                    .map(|&t| {
                        if i == j {
                            base_flows[j][j]
                        } else {
                            base_flows[j][i] * mobility[t][j]
                        }
                    })
                    .sum::<f64>()
                    / week_days.len() as f64;
                let count = (f.panel_rate * mean).round();
                if count > 0.0 {
                    records.push(FlowRecord {
                        week,
                        origin: fips[j],
                        dest: fips[i],
                        count,
                        privatized: false,
                    });
                }
            }
        }
    }
    let flows = FlowTable::new(false, records)?;

    let mut trends = MobilityTrends::default();
    for t in 0..=horizon {
        for c in 0..n {
            let change = mobility[t as usize][c] - 1.0;
            let mut v = [change.clamp(-1.0, 1.0); 6];
            v[5] = (-0.3 * change).clamp(-1.0, 1.0);
            trends.insert(fips[c], t, v)?;
        }
    }

    Ok(Simulation {
        params: EpidemicParams {
            populations: Some(populations.clone()),
            ..params.clone()
        },
        fips,
        populations,
        coords,
        base_flows,
        mobility,
        states,
        cases,
        flows,
        trends,
    })
}

#[derive(Serialize)]
struct Metadata<'a> {
    params: &'a EpidemicParams,
    fips: &'a [Fips],
    coords: &'a [(f64, f64)],
    files: [&'a str; 4],
}

/// Writes `cases.csv`, `trips.csv`, `trends.csv`, `population.csv` and
/// `metadata.json` into `dir`.
pub fn write_dataset(dir: &Path, sim: &Simulation) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let create = |name: &str| -> Result<BufWriter<File>> {
        let path = dir.join(name);
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| Error::io(&path, e))
    };
    write_cases(create("cases.csv")?, &sim.cases)?;
    write_trips(create("trips.csv")?, sim.trips())?;
    write_trends(create("trends.csv")?, &sim.trends)?;
    write_populations(create("population.csv")?, &sim.population_map())?;
    write_json(
        &dir.join("metadata.json"),
        &Metadata {
            params: &sim.params,
            fips: &sim.fips,
            coords: &sim.coords,
            files: ["cases.csv", "trips.csv", "trends.csv", "population.csv"],
        },
    )
}
