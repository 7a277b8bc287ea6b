//! Layered spatio-temporal county graph.
//!
//! Each day of the span gets a spatial layer: directed edges `j → i` carry the
//! week's flow from origin `j` into destination `i`, normalized by `i`'s
//! intra-county flow, pruned to the `k` strongest in-edges per node, then
//! symmetrized and normalized as `D^{-1/2} (A_sym + I) D^{-1/2}`. Temporal
//! structure is carried by the per-node feature windows of the last `d` days.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_ingest::{
    numeric_width, read_json, write_json, CaseTable, FeatureNormalizer, FeatureSource,
    MobilityTrends, NodeFeatures, Warnings,
};
use crate::days::{week_of, DayRange, DaySpan, Fips};
use crate::dp_mobility::FlowTable;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numerics::{CsrMatrix, Tensor2};

/// Directed spatial edge `src → dst`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: Fips,
    pub dst: Fips,
    pub weight: f64,
}

/// Spatial graph of one day.
#[derive(Debug, Clone, PartialEq)]
pub struct DayLayer {
    pub day: u32,
    /// Week whose flows built this layer, `None` when no flows were available.
    pub source_week: Option<u32>,
    pub nodes: Vec<Fips>,
    /// Pruned edges sorted by `(dst, src)`.
    pub edges: Vec<Edge>,
    pub adjacency_norm: CsrMatrix,
}

/// Edge weight of flow `j → i` normalized by `i`'s intra-county flow. An
/// intra-flow below 1 (e.g. suppressed by privatization) normalizes by 1.
pub fn spatial_weight(flow_in: f64, intra_flow: f64) -> Result<f64> {
    if !(flow_in >= 0.0 && intra_flow >= 0.0) || !flow_in.is_finite() || !intra_flow.is_finite() {
        return Err(Error::Validation(format!(
            "flows must be finite and non-negative (in {flow_in}, intra {intra_flow})"
        )));
    }
    Ok(flow_in / intra_flow.max(1.0))
}

/// Keeps the `k` largest-weight edges; equal weights keep the smaller source.
pub fn top_k_in_edges(mut edges: Vec<Edge>, k: usize) -> Vec<Edge> {
    edges.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.src.cmp(&b.src)));
    edges.truncate(k);
    edges
}

fn node_index(nodes: &[Fips]) -> Result<HashMap<Fips, usize>> {
    let index: HashMap<Fips, usize> = nodes.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    if index.len() != nodes.len() {
        return Err(Error::Validation("duplicate county in node list".into()));
    }
    Ok(index)
}

/// Builds the pruned, normalized layer of `day` over `nodes` (in that order).
pub fn build_layer(
    flows: &FlowTable,
    nodes: &[Fips],
    day: u32,
    k: usize,
    span: DaySpan,
) -> Result<(DayLayer, Warnings)> {
    span.offset(day)?;
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let index = node_index(nodes)?;
    let mut warnings = Warnings::new();
    let week = week_of(day);
    let source_week = flows.resolve_week(week);
    match source_week {
        Some(w) if w != week => warnings.push(format!(
            "day {day}: no flows for week {week}, reusing week {w}"
        )),
        None => warnings.push(format!(
            "day {day}: flow table is empty, layer has no edges"
        )),
        _ => {}
    }

    let records = source_week.map_or(&[][..], |w| flows.week(w));
    let intra: HashMap<Fips, f64> = records
        .iter()
        .filter(|r| r.origin == r.dest)
        .map(|r| (r.dest, r.count))
        .collect();
    let mut incoming: BTreeMap<Fips, Vec<Edge>> = BTreeMap::new();
    for r in records {
        if r.origin == r.dest || !index.contains_key(&r.origin) || !index.contains_key(&r.dest) {
            continue;
        }
        let weight = spatial_weight(r.count, intra.get(&r.dest).copied().unwrap_or(0.0))?;
        if weight > 0.0 {
            incoming.entry(r.dest).or_default().push(Edge {
                src: r.origin,
                dst: r.dest,
                weight,
            });
        }
    }
    let mut edges: Vec<Edge> = incoming
        .into_values()
        .flat_map(|e| top_k_in_edges(e, k))
        .collect();
    edges.sort_by_key(|e| (e.dst, e.src));
    let adjacency_norm = normalized_from_edges(nodes, &edges)?;
    Ok((
        DayLayer {
            day,
            source_week,
            nodes: nodes.to_vec(),
            edges,
            adjacency_norm,
        },
        warnings,
    ))
}

/// `D^{-1/2} (A_sym + I) D^{-1/2}` of a layer.
pub fn normalize_adjacency(layer: &DayLayer) -> Result<CsrMatrix> {
    normalized_from_edges(&layer.nodes, &layer.edges)
}

/// Row `i` of `A` holds the in-edges of node `i`. Entries within a row are
/// ordered by the column's county code, so sums do not depend on node order.
pub fn normalized_from_edges(nodes: &[Fips], edges: &[Edge]) -> Result<CsrMatrix> {
    let index = node_index(nodes)?;
    let n = nodes.len();
    // (a_ij, a_ji) per entry of row i
    let mut pairs: Vec<BTreeMap<Fips, (f64, f64)>> = vec![BTreeMap::new(); n];
    for e in edges {
        let (Some(&i), Some(&j)) = (index.get(&e.dst), index.get(&e.src)) else {
            return Err(Error::Validation(format!(
                "edge {} -> {} leaves the node set",
                e.src, e.dst
            )));
        };
        if i == j {
            continue;
        }
        if !(e.weight.is_finite() && e.weight >= 0.0) {
            return Err(Error::Validation(format!(
                "edge weight {} is invalid",
                e.weight
            )));
        }
        pairs[i].entry(e.src).or_default().0 += e.weight;
        pairs[j].entry(e.dst).or_default().1 += e.weight;
    }
    let rows: Vec<Vec<(usize, f64)>> = pairs
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut row: BTreeMap<Fips, f64> = row
                .into_iter()
                .map(|(f, (a, b))| (f, (a + b) / 2.0))
                .collect();
            row.insert(nodes[i], 1.0);
            row.into_iter().map(|(f, v)| (index[&f], v)).collect()
        })
        .collect();
    let inv_sqrt_deg: Vec<f64> = rows
        .iter()
        .map(|r| 1.0 / r.iter().map(|&(_, v)| v).sum::<f64>().sqrt())
        .collect();
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.into_iter()
                .map(|(j, v)| (j, v * (inv_sqrt_deg[i] * inv_sqrt_deg[j])))
                .collect()
        })
        .collect();
    CsrMatrix::from_rows(rows)
}

/// Construction parameters of an [`STGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub span: DaySpan,
    pub temporal_depth: usize,
    pub k: usize,
    /// Days whose features fit the normalization statistics.
    pub normalization_window: DayRange,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            span: DaySpan::default_graph_span(),
            temporal_depth: 7,
            k: 32,
            normalization_window: DayRange {
                start: 59,
                end: 120,
            },
        }
    }
}

/// Daily spatial layers plus per-(day, node) features and case truth.
#[derive(Debug, Clone, PartialEq)]
pub struct STGraph {
    pub config: GraphConfig,
    pub nodes: Vec<Fips>,
    /// Dense state index per node, for the state embedding.
    pub state_index: Vec<usize>,
    pub n_states: usize,
    pub layers: Vec<DayLayer>,
    /// `features[day offset][node]`.
    pub features: Vec<Vec<NodeFeatures>>,
    pub normalizer: FeatureNormalizer,
    /// Case truth from `span.start` through `truth_end`.
    pub truth_end: u32,
    pub cum_cases: Vec<Vec<u64>>,
    pub delta_cases: Vec<Vec<i64>>,
}

impl STGraph {
    pub fn span(&self) -> DaySpan {
        self.config.span
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn layer(&self, day: u32) -> Result<&DayLayer> {
        Ok(&self.layers[self.span().offset(day)?])
    }

    pub fn day_features(&self, day: u32) -> Result<&[NodeFeatures]> {
        Ok(&self.features[self.span().offset(day)?])
    }

    /// Normalized numeric feature matrix of a day (`nodes × width`).
    pub fn feature_matrix(&self, day: u32) -> Result<Tensor2> {
        let rows: Vec<Vec<f64>> = self
            .day_features(day)?
            .iter()
            .map(|f| self.normalizer.apply(f))
            .collect();
        Tensor2::from_rows(&rows)
    }

    fn truth_offset(&self, day: u32) -> Result<usize> {
        if day < self.span().start || day > self.truth_end {
            return Err(Error::Range(format!(
                "no case truth for day {day} (have {}..={})",
                self.span().start,
                self.truth_end
            )));
        }
        Ok((day - self.span().start) as usize)
    }

    pub fn cum_cases_on(&self, day: u32) -> Result<&[u64]> {
        Ok(&self.cum_cases[self.truth_offset(day)?])
    }

    pub fn delta_cases_on(&self, day: u32) -> Result<&[i64]> {
        Ok(&self.delta_cases[self.truth_offset(day)?])
    }
}

/// Builds one layer per day of the span over every county of the case table.
pub fn build_graph(
    cases: &CaseTable,
    trends: &MobilityTrends,
    flows: &FlowTable,
    config: GraphConfig,
) -> Result<(STGraph, Warnings)> {
    build_graph_with(cases, trends, flows, config, Execution::default())
}

pub fn build_graph_with(
    cases: &CaseTable,
    trends: &MobilityTrends,
    flows: &FlowTable,
    config: GraphConfig,
    exec: Execution,
) -> Result<(STGraph, Warnings)> {
    let span = config.span;
    let d = config.temporal_depth;
    if d == 0 {
        return Err(Error::Config("temporal depth must be at least 1".into()));
    }
    let last_day = cases
        .last_day
        .ok_or_else(|| Error::Validation("case table is empty".into()))?;
    if span.end > last_day {
        return Err(Error::Range(format!(
            "span ends on day {} but case data ends on day {last_day}",
            span.end
        )));
    }
    let nodes = cases.fips();
    let mut states: Vec<u32> = nodes.iter().map(|f| f.state()).collect();
    states.sort_unstable();
    states.dedup();
    let state_index = nodes
        .iter()
        .map(|f| states.binary_search(&f.state()).expect("state listed"))
        .collect();

    let days: Vec<u32> = span.days().collect();
    let mut warnings = Warnings::new();
    let built = exec.try_map(&days, |&day| {
        build_layer(flows, &nodes, day, config.k, span)
    })?;
    let mut layers = Vec::with_capacity(built.len());
    for (layer, mut w) in built {
        warnings.append(&mut w);
        layers.push(layer);
    }

    let source = FeatureSource::new(cases, trends, flows, span);
    let features = exec.try_map(&days, |&day| {
        nodes
            .iter()
            .map(|&f| source.build(f, day, d))
            .collect::<Result<Vec<_>>>()
    })?;

    let window = DayRange {
        start: config.normalization_window.start.max(span.start),
        end: config.normalization_window.end.min(span.end + 1),
    };
    let window = if window.is_empty() {
        warnings.push(format!(
            "normalization window {}..{} misses the span; fitting on the whole span",
            config.normalization_window.start, config.normalization_window.end
        ));
        DayRange {
            start: span.start,
            end: span.end + 1,
        }
    } else {
        window
    };
    let normalizer = FeatureNormalizer::fit(features.iter().flatten(), window, numeric_width(d))?;

    let truth_end = (span.end + 1).min(last_day);
    let mut cum_cases = Vec::new();
    let mut delta_cases = Vec::new();
    for day in span.start..=truth_end {
        cum_cases.push(
            nodes
                .iter()
                .map(|&f| cases.cum_cases(f, day))
                .collect::<Result<Vec<_>>>()?,
        );
        delta_cases.push(
            nodes
                .iter()
                .map(|&f| cases.delta_cases(f, day))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((
        STGraph {
            config,
            nodes,
            state_index,
            n_states: states.len(),
            layers,
            features,
            normalizer,
            truth_end,
            cum_cases,
            delta_cases,
        },
        warnings,
    ))
}

#[derive(Serialize, Deserialize)]
struct BundleIndex {
    config: GraphConfig,
    nodes: Vec<Fips>,
    state_index: Vec<usize>,
    n_states: usize,
    normalizer: FeatureNormalizer,
    truth_end: u32,
    cum_cases: Vec<Vec<u64>>,
    delta_cases: Vec<Vec<i64>>,
    layers: Vec<String>,
    features: Vec<Vec<NodeFeatures>>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    day: u32,
    source_week: Option<u32>,
    edges: Vec<Edge>,
}

/// Writes `dir/index.json` plus one edge list per layer under `dir/layers/`.
pub fn write_bundle(dir: &Path, graph: &STGraph) -> Result<()> {
    let mut names = Vec::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let name = format!("layers/day_{:03}.json", layer.day);
        write_json(
            &dir.join(&name),
            &LayerFile {
                day: layer.day,
                source_week: layer.source_week,
                edges: layer.edges.clone(),
            },
        )?;
        names.push(name);
    }
    write_json(
        &dir.join("index.json"),
        &BundleIndex {
            config: graph.config,
            nodes: graph.nodes.clone(),
            state_index: graph.state_index.clone(),
            n_states: graph.n_states,
            normalizer: graph.normalizer.clone(),
            truth_end: graph.truth_end,
            cum_cases: graph.cum_cases.clone(),
            delta_cases: graph.delta_cases.clone(),
            layers: names,
            features: graph.features.clone(),
        },
    )
}

/// Reads a bundle written by [`write_bundle`], renormalizing each layer.
pub fn read_bundle(dir: &Path) -> Result<STGraph> {
    let index: BundleIndex = read_json(&dir.join("index.json"))?;
    let span = index.config.span;
    if index.layers.len() != span.len() || index.features.len() != span.len() {
        return Err(Error::Validation(format!(
            "bundle has {} layers and {} feature days for a {}-day span",
            index.layers.len(),
            index.features.len(),
            span.len()
        )));
    }
    let mut layers = Vec::with_capacity(index.layers.len());
    for (name, day) in index.layers.iter().zip(span.days()) {
        let file: LayerFile = read_json(&dir.join(name))?;
        if file.day != day {
            return Err(Error::Validation(format!(
                "{name} holds day {} not {day}",
                file.day
            )));
        }
        let adjacency_norm = normalized_from_edges(&index.nodes, &file.edges)?;
        layers.push(DayLayer {
            day,
            source_week: file.source_week,
            nodes: index.nodes.clone(),
            edges: file.edges,
            adjacency_norm,
        });
    }
    Ok(STGraph {
        config: index.config,
        nodes: index.nodes,
        state_index: index.state_index,
        n_states: index.n_states,
        layers,
        features: index.features,
        normalizer: index.normalizer,
        truth_end: index.truth_end,
        cum_cases: index.cum_cases,
        delta_cases: index.delta_cases,
    })
}
