use proptest::prelude::*;

use stgnn::data_ingest::{compute_deltas, parse_cases, parse_populations, parse_trends, read_json};
use stgnn::dp_mobility::{aggregate_weekly, parse_trips};
use stgnn::synth::{simulate, write_dataset, EpidemicParams};

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn no_transmission_without_beta() {
    let p = EpidemicParams {
        n_counties: 12,
        beta: 0.0,
        horizon: 80,
        ..Default::default()
    };
    let sim = simulate(&p).unwrap();
    for (k, s) in sim.cases.counties.values().enumerate() {
        let d = &s.deltas.as_ref().unwrap().cases;
        let seed_county = sim.fips[0] == s.fips;
        for (i, &x) in d.iter().enumerate() {
            let day = s.first_day + i as u32;
            if !seed_county || day != p.seed_day {
                assert_eq!(x, 0, "county {k} day {day}");
            }
        }
        assert_eq!(seed_county, s.cum_cases.last().copied().unwrap_or(0) > 0);
    }
}

#[test]
fn decoupled_counties_stay_clean() {
    let sim = simulate(&EpidemicParams {
        n_counties: 10,
        kappa: 0.0,
        horizon: 120,
        ..Default::default()
    })
    .unwrap();
    let first = sim.first_case_day();
    let seed_index = sim
        .cases
        .counties
        .keys()
        .position(|f| *f == sim.fips[0])
        .unwrap();
    for (k, f) in first.iter().enumerate() {
        assert_eq!(f.is_some(), k == seed_index, "county {k}");
    }
    for st in &sim.states {
        for i in 1..sim.fips.len() {
            assert_eq!(st.e[i] + st.i[i] + st.r[i], 0);
        }
    }
}

#[test]
fn stronger_inbound_flow_means_earlier_arrival() {
    let mut total = 0.0;
    for seed in 0..10 {
        let p = EpidemicParams {
            seed,
            ..Default::default()
        };
        let sim = simulate(&p).unwrap();
        let first = sim.first_case_day();
        let by_fips: std::collections::BTreeMap<_, _> =
            sim.cases.counties.keys().copied().zip(first).collect();
        let (mut weight, mut arrival) = (vec![], vec![]);
        for i in 1..sim.fips.len() {
            weight.push(sim.base_flows[0][i]);
            arrival.push(by_fips[&sim.fips[i]].map_or(f64::from(p.horizon + 1), f64::from));
        }
        let rho = spearman(&weight, &arrival);
        assert!(rho < 0.0, "seed {seed}: {rho}");
        total += rho;
    }
    assert!(
        total / 10.0 < -0.5,
        "mean rank correlation {}",
        total / 10.0
    );
}

#[test]
fn written_dataset_reads_back() {
    let sim = simulate(&EpidemicParams {
        n_counties: 7,
        horizon: 40,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &sim).unwrap();
    let open = |name: &str| std::fs::File::open(dir.path().join(name)).unwrap();
    let (cases, _) = parse_cases(open("cases.csv")).unwrap();
    let mut cases = compute_deltas(cases);
    cases.populations = parse_populations(open("population.csv")).unwrap();
    assert_eq!(cases, sim.cases);
    let (trends, _) = parse_trends(open("trends.csv")).unwrap();
    assert_eq!(trends, sim.trends);
    assert_eq!(
        aggregate_weekly(&parse_trips(open("trips.csv")).unwrap()),
        sim.flows
    );
    let meta: serde_json::Value = read_json(&dir.path().join("metadata.json")).unwrap();
    assert!(meta.is_object());
}

#[test]
fn invalid_parameters_are_rejected() {
    for p in [
        EpidemicParams {
            n_counties: 0,
            ..Default::default()
        },
        EpidemicParams {
            beta: -0.1,
            ..Default::default()
        },
        EpidemicParams {
            seed_counties: vec![60],
            ..Default::default()
        },
        EpidemicParams {
            populations: Some(vec![1000; 3]),
            ..Default::default()
        },
    ] {
        assert!(simulate(&p).is_err(), "{p:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn compartments_conserve_population(seed in any::<u64>(), n in 2usize..15, beta in 0.0f64..0.8, kappa in 0.0f64..1.0) {
        let p = EpidemicParams { n_counties: n, beta, kappa, seed, horizon: 90, ..Default::default() };
        let sim = simulate(&p).unwrap();
        prop_assert_eq!(sim.states.len(), 91);
        for st in &sim.states {
            for i in 0..n {
                prop_assert_eq!(st.total(i), sim.populations[i]);
            }
        }
        for s in sim.cases.counties.values() {
            prop_assert!(s.cum_cases.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(s.cum_deaths.windows(2).all(|w| w[0] <= w[1]));
        }
        prop_assert_eq!(&simulate(&p).unwrap(), &sim);
    }
}
