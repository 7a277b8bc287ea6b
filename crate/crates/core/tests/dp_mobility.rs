use proptest::prelude::*;

use stgnn::days::Fips;
use stgnn::dp_mobility::{
    aggregate_weekly, parse_flows, privatize, privatize_with_noise, write_flows, LaplaceSampler,
    PrivacyParams, TripRecord,
};
use stgnn::synth::{simulate, EpidemicParams};

fn trip(user: &str, week: u32, o: u32, d: u32) -> TripRecord {
    TripRecord {
        user_id: user.into(),
        week,
        origin: Fips(o),
        dest: Fips(d),
    }
}

#[test]
fn repeated_trips_count_once() {
    let t = aggregate_weekly(&[
        trip("a", 3, 1001, 1003),
        trip("a", 3, 1001, 1003),
        trip("a", 3, 1001, 1003),
    ]);
    assert_eq!(t.len(), 1);
    assert_eq!(t.records[0].count, 1.0);
    assert!(aggregate_weekly(&[]).is_empty());
}

#[test]
fn four_users_two_pairs() {
    let t = aggregate_weekly(&[
        trip("a", 1, 1001, 1003),
        trip("b", 1, 1001, 1003),
        trip("c", 1, 1003, 1001),
        trip("d", 1, 1003, 1001),
    ]);
    let counts: Vec<f64> = t.records.iter().map(|r| r.count).collect();
    assert_eq!(counts, vec![2.0, 2.0]);
}

#[test]
fn threshold_boundary() {
    let raw = aggregate_weekly(
        &(0..150)
            .map(|u| trip(&format!("u{u}"), 0, 1001, 1003))
            .chain((0..99).map(|u| trip(&format!("v{u}"), 0, 1003, 1001)))
            .chain((0..100).map(|u| trip(&format!("w{u}"), 0, 1005, 1001)))
            .collect::<Vec<_>>(),
    );
    let p = privatize_with_noise(&raw, &PrivacyParams::default(), || 0.0).unwrap();
    let kept: Vec<_> = p.records.iter().map(|r| (r.origin.0, r.count)).collect();
    assert_eq!(kept, vec![(1001, 150.0), (1005, 100.0)]);
    assert!(privatize(&p, &PrivacyParams::default(), 0).is_err());
}

#[test]
fn bad_params_rejected() {
    assert!(PrivacyParams::new(0.0, 100.0).is_err());
    assert!(PrivacyParams::new(0.66, -1.0).is_err());
    let p = PrivacyParams::new(0.66, 100.0).unwrap();
    assert!((p.noise_scale - 1.0 / 0.66).abs() < 1e-15);
}

#[test]
fn laplace_moments() {
    let mut s = LaplaceSampler::new(2.0, 9);
    let draws: Vec<f64> = (0..200_000).map(|_| s.sample()).collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let mad = draws.iter().map(|x| x.abs()).sum::<f64>() / n;
    assert!(mean.abs() < 0.02, "{mean}");
    assert!((mad - 2.0).abs() < 0.02, "{mad}");
}

#[test]
fn simulated_trips_reproduce_flows() {
    let sim = simulate(&EpidemicParams {
        n_counties: 6,
        horizon: 30,
        ..Default::default()
    })
    .unwrap();
    let trips: Vec<_> = sim.trips().collect();
    assert_eq!(aggregate_weekly(&trips), sim.flows);
}

#[test]
fn flows_csv_round_trip() {
    let sim = simulate(&EpidemicParams {
        n_counties: 5,
        horizon: 20,
        ..Default::default()
    })
    .unwrap();
    let p = privatize(&sim.flows, &PrivacyParams::default(), 4).unwrap();
    let mut buf = Vec::new();
    write_flows(&mut buf, &p).unwrap();
    let (back, warnings) = parse_flows(buf.as_slice(), true).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(back, p);
}

proptest! {
    #[test]
    fn privatize_is_deterministic_and_thresholded(
        counts in prop::collection::vec(0u32..400, 1..60),
        seed in any::<u64>(),
    ) {
        let trips: Vec<_> = counts
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| (0..n).map(move |u| trip(&format!("u{u}"), k as u32 / 6, 1001 + 2 * (k as u32 % 6), 1001)))
            .collect();
        let raw = aggregate_weekly(&trips);
        let a = privatize(&raw, &PrivacyParams::default(), seed).unwrap();
        let b = privatize(&raw, &PrivacyParams::default(), seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.records.iter().all(|r| r.count >= 100.0 && r.privatized));
        prop_assert!(a.len() <= raw.len());
    }

    #[test]
    fn distinct_users_bound_counts(pairs in prop::collection::vec((0u8..5, 0u8..3, 0u8..3), 0..80)) {
        let trips: Vec<_> = pairs.iter().map(|&(u, o, d)| trip(&u.to_string(), 0, 1001 + o as u32, 1001 + d as u32)).collect();
        let t = aggregate_weekly(&trips);
        for r in &t.records {
            let mut users: Vec<_> = pairs.iter().filter(|p| 1001 + p.1 as u32 == r.origin.0 && 1001 + p.2 as u32 == r.dest.0).map(|p| p.0).collect();
            users.sort();
            users.dedup();
            prop_assert_eq!(r.count, users.len() as f64);
        }
    }
}
