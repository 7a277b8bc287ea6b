//! Skip-connection spatio-temporal graph convolution model.
//!
//! ```text
//! H0 = drop(relu([county_emb | state_emb | x] W0 + b0))            64 wide
//! H1 = drop(relu(Â H0 W1 + b1)) | H0                               32 + 64
//! H2 = drop(relu(Â H1 W2 + b2)) | H0                               32 + 64
//! H3 = H2 W3 + b3                                                   32 wide
//! P  = H3 Wout + bout                                               log1p(delta)
//! ```
//!
//! `x` is the normalized feature vector of a node on day `t` (its last `d`
//! days of case and death deltas plus mobility), and `P` predicts the case
//! delta of day `t + 1` in log1p space.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_ingest::numeric_width;
use crate::days::DayRange;
use crate::error::{Error, Result};
use crate::evaluation::Prediction;
use crate::exec::Execution;
use crate::numerics::{
    adam_step, glorot_uniform, l2_penalty, AdamState, CsrMatrix, Mode, Param, ParamKind, Tape,
    Tensor2, Var,
};
use crate::st_graph::STGraph;

pub const EMBED_DIM: usize = 8;
/// Output widths of W0 (embedding), W1 and W2 (spatial hops) and W3 (prediction).
pub const HIDDEN: [usize; 4] = [64, 32, 32, 32];
pub const HOPS: usize = 2;

const LAYOUT: [(&str, ParamKind); 12] = [
    ("county_emb", ParamKind::Embedding),
    ("state_emb", ParamKind::Embedding),
    ("w0", ParamKind::Weight),
    ("b0", ParamKind::Bias),
    ("w1", ParamKind::Weight),
    ("b1", ParamKind::Bias),
    ("w2", ParamKind::Weight),
    ("b2", ParamKind::Bias),
    ("w3", ParamKind::Weight),
    ("b3", ParamKind::Bias),
    ("w_out", ParamKind::Weight),
    ("b_out", ParamKind::Bias),
];

/// Trainable tensors in [`LAYOUT`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub params: Vec<Param>,
    pub feature_width: usize,
    pub dropout: f64,
}

fn shapes(n_counties: usize, n_states: usize, feature_width: usize) -> [(usize, usize); 12] {
    let [h0, h1, h2, h3] = HIDDEN;
    let input = 2 * EMBED_DIM + feature_width;
    [
        (n_counties, EMBED_DIM),
        (n_states, EMBED_DIM),
        (input, h0),
        (1, h0),
        (h0, h1),
        (1, h1),
        (h1 + h0, h2),
        (1, h2),
        (h2 + h0, h3),
        (1, h3),
        (h3, 1),
        (1, 1),
    ]
}

impl ModelParams {
    /// Glorot-uniform weights and embeddings, zero biases.
    pub fn init(
        n_counties: usize,
        n_states: usize,
        feature_width: usize,
        dropout: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = LAYOUT
            .iter()
            .zip(shapes(n_counties, n_states, feature_width))
            .map(|(&(name, kind), (r, c))| Param {
                name: name.into(),
                kind,
                value: match kind {
                    ParamKind::Bias => Tensor2::zeros(r, c),
                    _ => glorot_uniform(r, c, &mut rng),
                },
            })
            .collect();
        ModelParams {
            params,
            feature_width,
            dropout,
        }
    }

    pub fn zeros(n_counties: usize, n_states: usize, feature_width: usize) -> Self {
        let mut p = ModelParams::init(n_counties, n_states, feature_width, 0.0, 0);
        for param in &mut p.params {
            param.value.data_mut().fill(0.0);
        }
        p
    }

    /// Sized for a graph's node, state and feature counts.
    pub fn for_graph(graph: &STGraph, dropout: f64, seed: u64) -> Self {
        ModelParams::init(
            graph.n_nodes(),
            graph.n_states,
            numeric_width(graph.config.temporal_depth),
            dropout,
            seed,
        )
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn n_counties(&self) -> usize {
        self.params[0].value.rows()
    }

    pub fn n_states(&self) -> usize {
        self.params[1].value.rows()
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    fn check_shapes(&self) -> Result<()> {
        let expected = shapes(self.n_counties(), self.n_states(), self.feature_width);
        if self.params.len() != LAYOUT.len() {
            return Err(Error::Dimension(format!(
                "{} parameter tensors",
                self.params.len()
            )));
        }
        for ((p, (name, kind)), shape) in self.params.iter().zip(LAYOUT).zip(expected) {
            if p.name != name || p.kind != kind || p.value.shape() != shape {
                return Err(Error::Dimension(format!(
                    "parameter {} {:?} {:?}, expected {name} {kind:?} {shape:?}",
                    p.name,
                    p.kind,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    kind: ParamKind,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    feature_width: usize,
    dropout: f64,
    layers: BTreeMap<String, LayerJson>,
}

impl Serialize for ModelParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let layers = self
            .params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    LayerJson {
                        kind: p.kind,
                        shape: [p.value.rows(), p.value.cols()],
                        values: p.value.data().to_vec(),
                    },
                )
            })
            .collect();
        ModelJson {
            feature_width: self.feature_width,
            dropout: self.dropout,
            layers,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ModelParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut json = ModelJson::deserialize(d)?;
        let mut params = Vec::with_capacity(LAYOUT.len());
        for (name, kind) in LAYOUT {
            let layer = json
                .layers
                .remove(name)
                .ok_or_else(|| D::Error::custom(format!("missing layer {name}")))?;
            if layer.kind != kind {
                return Err(D::Error::custom(format!(
                    "layer {name} has kind {:?}",
                    layer.kind
                )));
            }
            let value = Tensor2::new(layer.shape[0], layer.shape[1], layer.values)
                .map_err(|e| D::Error::custom(format!("layer {name}: {e}")))?;
            params.push(Param {
                name: name.into(),
                kind,
                value,
            });
        }
        if let Some(extra) = json.layers.keys().next() {
            return Err(D::Error::custom(format!("unknown layer {extra}")));
        }
        let p = ModelParams {
            params,
            feature_width: json.feature_width,
            dropout: json.dropout,
        };
        p.check_shapes().map_err(D::Error::custom)?;
        Ok(p)
    }
}

/// Inputs of one forward pass over all nodes of a day.
#[derive(Debug, Clone, Copy)]
pub struct ForwardInputs<'a> {
    pub adjacency: &'a CsrMatrix,
    /// Normalized numeric features, `nodes × feature_width`.
    pub features: &'a Tensor2,
    /// County embedding row of each node.
    pub county_index: &'a [usize],
    /// State embedding row of each node.
    pub state_index: &'a [usize],
}

/// A recorded forward pass: parameter leaves and the prediction column.
pub struct Recorded<'g> {
    pub tape: Tape<'g>,
    pub params: Vec<Var>,
    pub prediction: Var,
}

/// Records the forward pass on a fresh tape.
pub fn record_forward<'g>(
    params: &ModelParams,
    inputs: ForwardInputs<'g>,
    mode: Mode,
    seed: u64,
) -> Result<Recorded<'g>> {
    params.check_shapes()?;
    let n = inputs.features.rows();
    if inputs.features.cols() != params.feature_width
        || inputs.adjacency.n() != n
        || inputs.county_index.len() != n
        || inputs.state_index.len() != n
    {
        return Err(Error::Dimension(format!(
            "{n} nodes with {} features, {}-node adjacency, {} county and {} state ids; model expects {} features",
            inputs.features.cols(),
            inputs.adjacency.n(),
            inputs.county_index.len(),
            inputs.state_index.len(),
            params.feature_width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .params
        .iter()
        .map(|p| tape.leaf(p.value.clone()))
        .collect();
    let [county_emb, state_emb, w0, b0, w1, b1, w2, b2, w3, b3, w_out, b_out] =
        vars[..].try_into().expect("layout has 12 tensors");
    let rate = params.dropout;

    let ce = tape.gather(county_emb, inputs.county_index)?;
    let se = tape.gather(state_emb, inputs.state_index)?;
    let x = tape.leaf(inputs.features.clone());
    let emb = tape.concat(ce, se)?;
    let input = tape.concat(emb, x)?;
    let h0 = tape.affine(input, w0, b0)?;
    let h0 = tape.relu(h0);
    let h0 = tape.dropout(h0, rate, mode, &mut rng)?;

    let mut h = h0;
    for (w, b) in [(w1, b1), (w2, b2)] {
        let spread = tape.propagate(inputs.adjacency, h)?;
        let z = tape.affine(spread, w, b)?;
        let z = tape.relu(z);
        let z = tape.dropout(z, rate, mode, &mut rng)?;
        h = tape.concat(z, h0)?;
    }

    let h3 = tape.affine(h, w3, b3)?;
    let prediction = tape.affine(h3, w_out, b_out)?;
    Ok(Recorded {
        tape,
        params: vars,
        prediction,
    })
}

/// Per-node predictions in log1p-delta space for explicit inputs.
pub fn forward_inputs(
    params: &ModelParams,
    inputs: ForwardInputs<'_>,
    mode: Mode,
    seed: u64,
) -> Result<Vec<f64>> {
    let rec = record_forward(params, inputs, mode, seed)?;
    Ok(rec.tape.value(rec.prediction).data().to_vec())
}

/// Feature matrix and embedding ids of one graph day.
struct DayInputs {
    features: Tensor2,
    county_index: Vec<usize>,
}

impl DayInputs {
    fn new(graph: &STGraph, day: u32) -> Result<Self> {
        Ok(DayInputs {
            features: graph.feature_matrix(day)?,
            county_index: (0..graph.n_nodes()).collect(),
        })
    }

    fn inputs<'a>(&'a self, graph: &'a STGraph, day: u32) -> Result<ForwardInputs<'a>> {
        Ok(ForwardInputs {
            adjacency: &graph.layer(day)?.adjacency_norm,
            features: &self.features,
            county_index: &self.county_index,
            state_index: &graph.state_index,
        })
    }
}

/// Per-node predictions `P` (log1p of the next day's case delta) for `day`.
pub fn forward(
    graph: &STGraph,
    day: u32,
    params: &ModelParams,
    mode: Mode,
    seed: u64,
) -> Result<Vec<f64>> {
    let day_inputs = DayInputs::new(graph, day)?;
    forward_inputs(params, day_inputs.inputs(graph, day)?, mode, seed)
}

/// Training loss (MSLE on the next day's deltas plus L2 on weight matrices)
/// and its gradient for every parameter tensor.
pub fn loss_and_gradients(
    params: &ModelParams,
    inputs: ForwardInputs<'_>,
    target_delta: &[f64],
    l2: f64,
    mode: Mode,
    seed: u64,
) -> Result<(f64, Vec<Tensor2>)> {
    let rec = record_forward(params, inputs, mode, seed)?;
    let mut tape = rec.tape;
    let loss = tape.msle(rec.prediction, target_delta)?;
    let msle = tape.value(loss).get(0, 0);
    let grads = tape.backward(loss)?;
    let mut out: Vec<Tensor2> = rec
        .params
        .iter()
        .zip(&params.params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.value.rows(), p.value.cols()))
        .collect();
    crate::numerics::add_l2_gradient(&params.params, &mut out, l2);
    Ok((msle + l2_penalty(&params.params, l2), out))
}

/// Training loss only (no backward pass).
pub fn loss_value(
    params: &ModelParams,
    inputs: ForwardInputs<'_>,
    target_delta: &[f64],
    l2: f64,
    mode: Mode,
    seed: u64,
) -> Result<f64> {
    let p = forward_inputs(params, inputs, mode, seed)?;
    let (msle, _) = crate::numerics::msle_loss(&p, target_delta)?;
    Ok(msle + l2_penalty(&params.params, l2))
}

/// Training hyperparameters. Missing fields of a config file take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub dropout: f64,
    pub l2: f64,
    pub d: usize,
    pub k: usize,
    pub hops: usize,
    pub max_steps: u64,
    pub train_days: DayRange,
    pub test_days: DayRange,
    pub seed: u64,
    pub eval_county_count: usize,
    /// Steps per recorded loss-history point.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            dropout: 0.5,
            l2: 5e-4,
            d: 7,
            k: 32,
            hops: HOPS,
            max_steps: 20_000,
            train_days: DayRange {
                start: 59,
                end: 120,
            },
            test_days: DayRange {
                start: 120,
                end: 150,
            },
            seed: 0,
            eval_county_count: 20,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hops != HOPS {
            return bad(format!("hops must be {HOPS}, got {}", self.hops));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 {} must be non-negative", self.l2));
        }
        if self.d == 0 || self.k == 0 || self.log_every == 0 {
            return bad("d, k and log_every must be positive".into());
        }
        if self.train_days.is_empty() || self.test_days.is_empty() {
            return bad("train and test windows must be non-empty".into());
        }
        let (a, b) = (self.train_days, self.test_days);
        if a.start < b.end && b.start < a.end {
            return bad(format!(
                "train window {}..{} overlaps test window {}..{}",
                a.start, a.end, b.start, b.end
            ));
        }
        Ok(())
    }

    /// Days sampled as training inputs: `[train_start + d, train_end)`.
    pub fn sample_days(&self) -> DayRange {
        DayRange {
            start: self.train_days.start + self.d as u32,
            end: self.train_days.end,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    /// Last step of the block.
    pub step: u64,
    /// Mean training loss over the block.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<LossPoint>,
}

/// Trains with ADAM, one uniformly sampled training day per step and all
/// counties of that day as the batch.
pub fn train(graph: &STGraph, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if graph.config.temporal_depth != config.d {
        return Err(Error::Config(format!(
            "graph window {} != configured window {}",
            graph.config.temporal_depth, config.d
        )));
    }
    let days = config.sample_days();
    if days.is_empty() {
        return Err(Error::Config(
            "training window shorter than the feature window".into(),
        ));
    }
    let span = graph.span();
    if !span.contains(days.start) || !span.contains(days.end - 1) || graph.truth_end < days.end {
        return Err(Error::Range(format!(
            "graph {}..={} (truth to {}) does not cover training days {}..{} and their next-day targets",
            span.start, span.end, graph.truth_end, days.start, days.end
        )));
    }

    let mut params = ModelParams::for_graph(graph, config.dropout, config.seed);
    let mut state = AdamState::new(&params.params, config.lr);
    let mut history = Vec::new();
    if config.max_steps == 0 {
        return Ok(TrainOutcome { params, history });
    }

    let cached: Vec<(DayInputs, Vec<f64>)> = days
        .days()
        .map(|t| {
            let targets = graph
                .delta_cases_on(t + 1)?
                .iter()
                .map(|&x| x as f64)
                .collect();
            Ok((DayInputs::new(graph, t)?, targets))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);
    let mut block = 0.0;
    for step in 0..config.max_steps {
        let offset = rng.random_range(0..cached.len());
        let dropout_seed: u64 = rng.random();
        let t = days.start + offset as u32;
        let (day_inputs, targets) = &cached[offset];
        let (loss, grads) = loss_and_gradients(
            &params,
            day_inputs.inputs(graph, t)?,
            targets,
            config.l2,
            Mode::Train,
            dropout_seed,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at step {} (day {t})",
                step + 1
            )));
        }
        adam_step(&mut params.params, &grads, &mut state, config.l2).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m}; day {t}")),
            other => other,
        })?;
        block += loss;
        if (step + 1) % config.log_every == 0 {
            history.push(LossPoint {
                step: step + 1,
                loss: block / config.log_every as f64,
            });
            block = 0.0;
        }
    }
    Ok(TrainOutcome { params, history })
}

/// Next-day delta implied by a log1p-space prediction, floored at zero.
pub fn delta_from_log(p: f64) -> f64 {
    p.exp_m1().max(0.0)
}

/// Eval-mode forecasts of day `t + 1` for every county, made on day `t`.
pub fn forecast(params: &ModelParams, graph: &STGraph, t: u32) -> Result<Vec<Prediction>> {
    let p = forward(graph, t, params, Mode::Eval, 0)?;
    let cum = graph.cum_cases_on(t)?;
    Ok(graph
        .nodes
        .iter()
        .zip(p)
        .zip(cum)
        .map(|((&fips, p), &c)| Prediction::from_delta(fips, t, c, delta_from_log(p)))
        .collect())
}

/// [`forecast`] over several origin days.
pub fn forecast_days(
    params: &ModelParams,
    graph: &STGraph,
    days: DayRange,
    exec: Execution,
) -> Result<Vec<Prediction>> {
    let days: Vec<u32> = days.days().collect();
    Ok(exec
        .try_map(&days, |&t| forecast(params, graph, t))?
        .into_iter()
        .flatten()
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_inputs(n: usize, width: usize) -> (CsrMatrix, Tensor2, Vec<usize>, Vec<usize>) {
        let data = (0..n * width)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0)
            .collect();
        (
            CsrMatrix::identity(n),
            Tensor2::new(n, width, data).unwrap(),
            (0..n).collect(),
            vec![0; n],
        )
    }

    #[test]
    fn hidden_widths_and_shapes() {
        let p = ModelParams::init(5, 2, 23, 0.5, 1);
        assert_eq!(p.get("w0").unwrap().shape(), (39, 64));
        assert_eq!(p.get("w1").unwrap().shape(), (64, 32));
        assert_eq!(p.get("w2").unwrap().shape(), (96, 32));
        assert_eq!(p.get("w3").unwrap().shape(), (96, 32));
        assert_eq!(p.get("w_out").unwrap().shape(), (32, 1));
        assert_eq!(p.get("b0").unwrap().data(), &[0.0; 64][..]);
    }

    #[test]
    fn zero_params_predict_zero() {
        let p = ModelParams::zeros(3, 1, 23);
        let (adj, x, c, s) = toy_inputs(3, 23);
        let inputs = ForwardInputs {
            adjacency: &adj,
            features: &x,
            county_index: &c,
            state_index: &s,
        };
        assert_eq!(
            forward_inputs(&p, inputs, Mode::Eval, 0).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = ModelParams::init(3, 1, 23, 0.5, 1);
        let (adj, x, c, s) = toy_inputs(3, 22);
        let inputs = ForwardInputs {
            adjacency: &adj,
            features: &x,
            county_index: &c,
            state_index: &s,
        };
        assert!(matches!(
            forward_inputs(&p, inputs, Mode::Eval, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn train_mode_is_seeded() {
        let p = ModelParams::init(4, 1, 23, 0.5, 3);
        let (adj, x, c, s) = toy_inputs(4, 23);
        let inputs = ForwardInputs {
            adjacency: &adj,
            features: &x,
            county_index: &c,
            state_index: &s,
        };
        let a = forward_inputs(&p, inputs, Mode::Train, 11).unwrap();
        let b = forward_inputs(&p, inputs, Mode::Train, 11).unwrap();
        let e = forward_inputs(&p, inputs, Mode::Eval, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, e);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let p = ModelParams::init(3, 2, 23, 0.5, 9);
        let text = serde_json::to_string(&p).unwrap();
        let back: ModelParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["layers"]["w1"]["shape"] = serde_json::json!([32, 64]);
        assert!(serde_json::from_value::<ModelParams>(v).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let overlap = TrainConfig {
            test_days: DayRange {
                start: 100,
                end: 130,
            },
            ..Default::default()
        };
        assert!(overlap.validate().is_err());
        let hops = TrainConfig {
            hops: 3,
            ..Default::default()
        };
        assert!(hops.validate().is_err());
        assert_eq!(
            TrainConfig::default().sample_days(),
            DayRange {
                start: 66,
                end: 120
            }
        );
    }

    #[test]
    fn log_delta_inverse() {
        assert_eq!(delta_from_log(0.0), 0.0);
        assert!((delta_from_log(11f64.ln()) - 10.0).abs() < 1e-12);
        assert_eq!(delta_from_log(-3.0), 0.0);
    }
}
