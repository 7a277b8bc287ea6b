use nalgebra::DMatrix;
use proptest::prelude::*;

use stgnn::days::{DayRange, DaySpan, Fips};
use stgnn::dp_mobility::{FlowRecord, FlowTable};
use stgnn::numerics::CsrMatrix;
use stgnn::st_graph::{
    build_graph, build_layer, normalized_from_edges, read_bundle, spatial_weight, top_k_in_edges,
    write_bundle, Edge, GraphConfig,
};
use stgnn::synth::{simulate, EpidemicParams};

fn flows(week: u32, rows: &[(u32, u32, f64)]) -> FlowTable {
    FlowTable::new(
        false,
        rows.iter()
            .map(|&(o, d, c)| FlowRecord {
                week,
                origin: Fips(o),
                dest: Fips(d),
                count: c,
                privatized: false,
            })
            .collect(),
    )
    .unwrap()
}

fn dense(a: &CsrMatrix) -> DMatrix<f64> {
    let d = a.to_dense();
    DMatrix::from_fn(d.len(), d.len(), |i, j| d[i][j])
}

#[test]
fn weight_examples() {
    assert_eq!(spatial_weight(50.0, 1000.0).unwrap(), 0.05);
    assert_eq!(spatial_weight(0.0, 1000.0).unwrap(), 0.0);
    assert_eq!(spatial_weight(10.0, 0.0).unwrap(), 10.0);
    assert!(spatial_weight(-1.0, 10.0).is_err());
}

#[test]
fn five_county_layer_matches_hand_build() {
    let nodes: Vec<Fips> = [1001, 1003, 1005, 1007, 1009].map(Fips).to_vec();
    let table = flows(
        1,
        &[
            (1001, 1001, 1000.0),
            (1003, 1003, 500.0),
            (1003, 1001, 50.0),
            (1005, 1001, 20.0),
            (1007, 1001, 0.0),
            (1001, 1003, 40.0),
            (1009, 1005, 7.0),
        ],
    );
    let span = DaySpan::new(0, 20).unwrap();
    let (layer, w) = build_layer(&table, &nodes, 8, 32, span).unwrap();
    assert!(w.is_empty());
    let e = |s, d, w| Edge {
        src: Fips(s),
        dst: Fips(d),
        weight: w,
    };
    assert_eq!(
        layer.edges,
        vec![
            e(1003, 1001, 0.05),
            e(1005, 1001, 0.02),
            e(1001, 1003, 0.08),
            e(1009, 1005, 7.0)
        ]
    );
    let (k1, _) = build_layer(&table, &nodes, 8, 1, span).unwrap();
    assert_eq!(k1.edges.iter().filter(|x| x.dst == Fips(1001)).count(), 1);
}

#[test]
fn top_k_keeps_largest_and_smaller_fips_on_ties() {
    let edges: Vec<Edge> = (0..40)
        .map(|s| Edge {
            src: Fips(2001 + 2 * s),
            dst: Fips(1001),
            weight: ((s * 17) % 40) as f64,
        })
        .collect();
    let kept = top_k_in_edges(edges.clone(), 32);
    assert_eq!(kept.len(), 32);
    let min_kept = kept.iter().map(|e| e.weight).fold(f64::INFINITY, f64::min);
    assert_eq!(min_kept, 8.0);

    let tie = vec![
        Edge {
            src: Fips(1009),
            dst: Fips(1001),
            weight: 1.0,
        },
        Edge {
            src: Fips(1003),
            dst: Fips(1001),
            weight: 1.0,
        },
        Edge {
            src: Fips(1005),
            dst: Fips(1001),
            weight: 2.0,
        },
    ];
    let kept: Vec<u32> = top_k_in_edges(tie, 2).iter().map(|e| e.src.0).collect();
    assert_eq!(kept, vec![1005, 1003]);
}

#[test]
fn normalization_examples() {
    let nodes: Vec<Fips> = [1001, 1003, 1005].map(Fips).to_vec();
    assert_eq!(
        normalized_from_edges(&nodes, &[]).unwrap().to_dense(),
        CsrMatrix::identity(3).to_dense()
    );
    let two = normalized_from_edges(
        &nodes[..2],
        &[
            Edge {
                src: nodes[0],
                dst: nodes[1],
                weight: 1.0,
            },
            Edge {
                src: nodes[1],
                dst: nodes[0],
                weight: 1.0,
            },
        ],
    )
    .unwrap();
    for row in two.to_dense() {
        for v in row {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }
}

#[test]
fn one_day_span_and_missing_weeks() {
    let sim = simulate(&EpidemicParams {
        n_counties: 6,
        horizon: 60,
        ..Default::default()
    })
    .unwrap();
    let config = GraphConfig {
        span: DaySpan::new(30, 30).unwrap(),
        normalization_window: DayRange { start: 30, end: 31 },
        ..Default::default()
    };
    let (g, _) = build_graph(&sim.cases, &sim.trends, &sim.flows, config).unwrap();
    assert_eq!(g.layers.len(), 1);
    assert_eq!(g.features[0][0].past_cases.len(), 7);

    let mut thin = sim.flows.clone();
    thin.records.retain(|r| r.week != 5);
    let config = GraphConfig {
        span: DaySpan::new(28, 45).unwrap(),
        normalization_window: DayRange { start: 28, end: 46 },
        ..Default::default()
    };
    let (g, w) = build_graph(&sim.cases, &sim.trends, &thin, config).unwrap();
    assert!(!w.is_empty());
    let l = g.layer(36).unwrap();
    assert_eq!(l.source_week, Some(4));
    assert_eq!(l.edges, g.layer(34).unwrap().edges);
}

#[test]
fn bundle_round_trip() {
    let sim = simulate(&EpidemicParams {
        n_counties: 8,
        horizon: 80,
        ..Default::default()
    })
    .unwrap();
    let config = GraphConfig {
        span: DaySpan::new(52, 80).unwrap(),
        k: 4,
        normalization_window: DayRange { start: 59, end: 75 },
        ..Default::default()
    };
    let (g, _) = build_graph(&sim.cases, &sim.trends, &sim.flows, config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), &g).unwrap();
    assert_eq!(read_bundle(dir.path()).unwrap(), g);
}

#[test]
fn simulated_layers_have_unit_bounded_spectrum() {
    let sim = simulate(&EpidemicParams {
        n_counties: 40,
        horizon: 151,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let (g, _) = build_graph(
        &sim.cases,
        &sim.trends,
        &sim.flows,
        GraphConfig {
            k: 6,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(g.layers.len(), 100);
    for layer in g.layers.iter().step_by(7) {
        let m = dense(&layer.adjacency_norm);
        assert!((&m - m.transpose()).amax() <= 1e-12);
        let eig = m.symmetric_eigen().eigenvalues;
        assert!(eig.max() <= 1.0 + 1e-9 && eig.min() >= -1.0 - 1e-9, "{eig}");
        let in_degree = |n: &Fips| layer.edges.iter().filter(|e| e.dst == *n).count();
        assert!(g.nodes.iter().all(|n| in_degree(n) <= 6));
    }
}

fn arb_edges() -> impl Strategy<Value = (usize, Vec<(usize, usize, f64)>)> {
    (2usize..12).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec((0..n, 0..n, 0.0f64..50.0), 0..60),
        )
    })
}

proptest! {
    #[test]
    fn normalized_adjacency_is_symmetric_and_contractive((n, raw) in arb_edges()) {
        let nodes: Vec<Fips> = (0..n as u32).map(|i| Fips(1001 + 2 * i)).collect();
        let mut seen = std::collections::BTreeSet::new();
        let edges: Vec<Edge> = raw
            .into_iter()
            .filter(|&(s, d, w)| s != d && w > 0.0 && seen.insert((d, s)))
            .map(|(s, d, w)| Edge { src: nodes[s], dst: nodes[d], weight: w })
            .collect();
        let m = dense(&normalized_from_edges(&nodes, &edges).unwrap());
        prop_assert!((&m - m.transpose()).amax() <= 1e-12);
        let eig = m.symmetric_eigen().eigenvalues;
        prop_assert!(eig.max() <= 1.0 + 1e-9);
        prop_assert!(eig.min() >= -1.0 - 1e-9);
    }

    #[test]
    fn pruning_is_a_sub_multiset(weights in prop::collection::vec(0.0f64..10.0, 0..50), k in 1usize..40) {
        let edges: Vec<Edge> = weights.iter().enumerate().map(|(s, &w)| Edge { src: Fips(3001 + s as u32), dst: Fips(1001), weight: w }).collect();
        let kept = top_k_in_edges(edges.clone(), k);
        prop_assert_eq!(kept.len(), k.min(edges.len()));
        prop_assert!(kept.iter().all(|e| edges.contains(e)));
        let floor = kept.iter().map(|e| e.weight).fold(f64::INFINITY, f64::min);
        let dropped = edges.iter().filter(|e| !kept.contains(e));
        prop_assert!(dropped.into_iter().all(|e| e.weight <= floor));
    }
}
