use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CaseTable, MobilityTrends};
use crate::days::{week_of, DayRange, DaySpan, Fips};
use crate::dp_mobility::FlowTable;
use crate::error::{Error, Result};

pub const MOBILITY_LEN: usize = 6;
pub const FLOW_SUMMARY_LEN: usize = 2;

/// Width of [`NodeFeatures::numeric`] for a window of `d` days.
pub const fn numeric_width(d: usize) -> usize {
    1 + 2 * d + MOBILITY_LEN + FLOW_SUMMARY_LEN
}

/// Features of one county on one day.
///
/// `past_cases[k]` and `past_deaths[k]` hold `log1p(max(0, delta))` for day
/// `day - k`, `k = 0..d`. The categorical ids are fed to learned embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatures {
    pub fips: Fips,
    pub county_id: u32,
    pub state_id: u32,
    pub day: u32,
    pub day_scalar: f64,
    pub past_cases: Vec<f64>,
    pub past_deaths: Vec<f64>,
    pub mobility: [f64; MOBILITY_LEN],
    /// `log1p` of intra-county flow and of total incoming flow.
    pub flow_summary: [f64; FLOW_SUMMARY_LEN],
}

impl NodeFeatures {
    /// Numeric layout: `[day_scalar, past_cases.., past_deaths.., mobility.., flow_summary..]`.
    pub fn numeric(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(numeric_width(self.past_cases.len()));
        v.push(self.day_scalar);
        v.extend_from_slice(&self.past_cases);
        v.extend_from_slice(&self.past_deaths);
        v.extend_from_slice(&self.mobility);
        v.extend_from_slice(&self.flow_summary);
        v
    }
}

fn log1p_clamped(x: f64) -> f64 {
    x.max(0.0).ln_1p()
}

/// Case, trend and flow tables with a per-week flow summary index, for
/// assembling many feature vectors.
pub struct FeatureSource<'a> {
    cases: &'a CaseTable,
    trends: &'a MobilityTrends,
    flows: &'a FlowTable,
    span: DaySpan,
    summaries: BTreeMap<(u32, Fips), [f64; 2]>,
}

impl<'a> FeatureSource<'a> {
    pub fn new(
        cases: &'a CaseTable,
        trends: &'a MobilityTrends,
        flows: &'a FlowTable,
        span: DaySpan,
    ) -> Self {
        let mut summaries: BTreeMap<(u32, Fips), [f64; 2]> = BTreeMap::new();
        for r in &flows.records {
            let s = summaries.entry((r.week, r.dest)).or_default();
            if r.origin == r.dest {
                s[0] += r.count.max(0.0);
            } else {
                s[1] += r.count.max(0.0);
            }
        }
        FeatureSource {
            cases,
            trends,
            flows,
            span,
            summaries,
        }
    }

    pub fn span(&self) -> DaySpan {
        self.span
    }

    pub fn build(&self, fips: Fips, t: u32, d: usize) -> Result<NodeFeatures> {
        if (t as usize) < d {
            return Err(Error::Window(format!(
                "day {t} has fewer than {d} prior days"
            )));
        }
        let offset = self.span.offset(t)?;
        let series = self.cases.series(fips)?;
        let window = |delta: fn(&super::CountySeries, u32) -> Option<i64>| -> Result<Vec<f64>> {
            (0..d as u32)
                .map(|k| {
                    delta(series, t - k)
                        .map(|x| log1p_clamped(x as f64))
                        .ok_or_else(|| {
                            Error::Range(format!("day {} beyond case data for {fips}", t - k))
                        })
                })
                .collect()
        };
        let flow_summary = self
            .flows
            .resolve_week(week_of(t))
            .and_then(|w| self.summaries.get(&(w, fips)))
            .map(|s| [log1p_clamped(s[0]), log1p_clamped(s[1])])
            .unwrap_or([0.0; 2]);
        let day_scalar = if self.span.len() > 1 {
            offset as f64 / (self.span.len() - 1) as f64
        } else {
            0.0
        };
        Ok(NodeFeatures {
            fips,
            county_id: fips.county(),
            state_id: fips.state(),
            day: t,
            day_scalar,
            past_cases: window(super::CountySeries::delta_cases_at)?,
            past_deaths: window(super::CountySeries::delta_deaths_at)?,
            mobility: self.trends.get(fips, t),
            flow_summary,
        })
    }
}

/// Assembles the feature vector of `fips` on day `t` with a `d`-day window.
/// Missing trend and flow values read as 0.
pub fn build_features(
    cases: &CaseTable,
    trends: &MobilityTrends,
    flows: &FlowTable,
    fips: Fips,
    t: u32,
    d: usize,
    span: DaySpan,
) -> Result<NodeFeatures> {
    FeatureSource::new(cases, trends, flows, span).build(fips, t, d)
}

/// Per-feature z-score statistics, fit on the training window only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub window: DayRange,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNormalizer {
    /// Fits on the features whose day lies in `window`; other days are ignored.
    /// Zero-variance features keep a unit scale.
    pub fn fit<'a>(
        features: impl IntoIterator<Item = &'a NodeFeatures>,
        window: DayRange,
        width: usize,
    ) -> Result<Self> {
        let rows: Vec<Vec<f64>> = features
            .into_iter()
            .filter(|f| window.days().contains(&f.day))
            .map(NodeFeatures::numeric)
            .collect();
        if rows.is_empty() {
            return Err(Error::Range(format!(
                "no features inside normalization window {}..{}",
                window.start, window.end
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != width) {
            return Err(Error::Dimension(format!(
                "feature width {} != {width}",
                r.len()
            )));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; width];
        for r in &rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; width];
        for r in &rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(FeatureNormalizer { window, mean, std })
    }

    pub fn apply(&self, features: &NodeFeatures) -> Vec<f64> {
        features
            .numeric()
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_ingest::{parse_cases, parse_trends};
    use crate::dp_mobility::FlowRecord;

    fn fixture() -> (CaseTable, MobilityTrends, FlowTable) {
        let mut csv = String::from("date,county,state,fips,cases,deaths\n");
        // deltas 1..=10 over days 60..=69 for county 53033; a flat county too
        let mut cum = 0;
        for (k, day) in (60..=69).enumerate() {
            cum += k as u64 + 1;
            let date = crate::days::date_of(day);
            csv.push_str(&format!("{date},King,Washington,53033,{cum},{}\n", k / 3));
            csv.push_str(&format!("{date},Pierce,Washington,53053,0,0\n"));
        }
        let (cases, _) = parse_cases(csv.as_bytes()).unwrap();
        let (trends, _) = parse_trends(
            "date,fips,retail,grocery,parks,transit,workplaces,residential\n\
             2020-03-10,53033,-0.2,-0.1,0.3,-0.5,-0.4,0.15\n"
                .as_bytes(),
        )
        .unwrap();
        let rec = |origin, dest, count| FlowRecord {
            week: 9,
            origin: Fips(origin),
            dest: Fips(dest),
            count,
            privatized: true,
        };
        let flows = FlowTable::new(
            true,
            vec![
                rec(53033, 53033, 999.0),
                rec(53053, 53033, 120.0),
                rec(53061, 53033, 129.0),
            ],
        )
        .unwrap();
        (cases, trends, flows)
    }

    #[test]
    fn zero_deltas_and_trends_give_zero_vectors() {
        let (cases, trends, flows) = fixture();
        let span = DaySpan::new(60, 69).unwrap();
        let f = build_features(&cases, &trends, &flows, Fips(53053), 69, 7, span).unwrap();
        assert_eq!(f.past_cases, vec![0.0; 7]);
        assert_eq!(f.past_deaths, vec![0.0; 7]);
        assert_eq!(f.mobility, [0.0; 6]);
        assert_eq!(f.flow_summary, [0.0; 2]);
    }

    #[test]
    fn hand_assembled_layout() {
        let (cases, trends, flows) = fixture();
        let span = DaySpan::new(60, 69).unwrap();
        let f = build_features(&cases, &trends, &flows, Fips(53033), 69, 7, span).unwrap();
        // day 69 is the 10th report: deltas 10, 9, ..., 4
        let expected_cases: Vec<f64> = (4..=10).rev().map(|x: i32| (x as f64).ln_1p()).collect();
        assert_eq!(f.past_cases, expected_cases);
        assert!((f.past_cases[0] - 11f64.ln()).abs() < 1e-15);
        // cumulative deaths are k/3 for k=0..9: 0,0,0,1,1,1,2,2,2,3
        let deaths = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0].map(f64::ln_1p);
        assert_eq!(f.past_deaths, deaths.to_vec());
        assert_eq!(f.mobility, [-0.2, -0.1, 0.3, -0.5, -0.4, 0.15]);
        assert_eq!(f.flow_summary, [999f64.ln_1p(), 249f64.ln_1p()]);
        assert_eq!(f.day_scalar, 1.0);
        assert_eq!((f.state_id, f.county_id), (53, 33));

        let mut expected = vec![1.0];
        expected.extend(expected_cases);
        expected.extend(deaths);
        expected.extend([-0.2, -0.1, 0.3, -0.5, -0.4, 0.15]);
        expected.extend([999f64.ln_1p(), 249f64.ln_1p()]);
        let got = f.numeric();
        assert_eq!(got.len(), numeric_width(7));
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&got), bits(&expected));
    }

    #[test]
    fn delta_nine_maps_to_ln_ten() {
        let (cases, trends, flows) = fixture();
        let span = DaySpan::new(60, 69).unwrap();
        let f = build_features(&cases, &trends, &flows, Fips(53033), 68, 7, span).unwrap();
        assert_eq!(f.past_cases[0], 10f64.ln());
    }

    #[test]
    fn window_must_fit() {
        let (cases, trends, flows) = fixture();
        let span = DaySpan::new(0, 69).unwrap();
        let err = build_features(&cases, &trends, &flows, Fips(53033), 6, 7, span).unwrap_err();
        assert!(matches!(err, Error::Window(_)));
        assert!(build_features(&cases, &trends, &flows, Fips(53033), 7, 7, span).is_ok());
    }

    #[test]
    fn assembly_is_deterministic() {
        let (cases, trends, flows) = fixture();
        let span = DaySpan::new(60, 69).unwrap();
        let a = build_features(&cases, &trends, &flows, Fips(53033), 66, 7, span).unwrap();
        let b = build_features(&cases, &trends, &flows, Fips(53033), 66, 7, span).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normalizer_ignores_days_outside_window() {
        let (cases, trends, flows) = fixture();
        let span = DaySpan::new(60, 69).unwrap();
        let src = FeatureSource::new(&cases, &trends, &flows, span);
        let feats: Vec<NodeFeatures> = (60..=69)
            .map(|t| src.build(Fips(53033), t, 7).unwrap())
            .collect();
        let window = DayRange { start: 60, end: 65 };
        let a = FeatureNormalizer::fit(&feats, window, numeric_width(7)).unwrap();
        let b = FeatureNormalizer::fit(&feats[..5], window, numeric_width(7)).unwrap();
        assert_eq!(a, b);
        let z = a.apply(&feats[0]);
        assert!(z.iter().all(|x| x.is_finite()));
        assert!(
            FeatureNormalizer::fit(&feats, DayRange { start: 0, end: 5 }, numeric_width(7))
                .is_err()
        );
    }
}
