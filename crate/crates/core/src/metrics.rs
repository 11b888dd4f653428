//! MAP / NDCG and run aggregation.
//!
//! Gains are `2^rel - 1` with a `log2(i + 1)` discount. Reports carry the
//! error-rate convention `1 - metric`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Average precision of a ranked label list; any label > 0 counts as relevant.
pub fn average_precision(ranked: &[u8]) -> Result<f64> {
    let positives = ranked.iter().filter(|&&l| l > 0).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one relevant item".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &l) in ranked.iter().enumerate() {
        if l > 0 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

fn dcg(labels: impl Iterator<Item = u8>) -> f64 {
    labels
        .enumerate()
        .map(|(i, l)| (2f64.powi(l as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG at cutoff `p` for graded labels.
pub fn ndcg_p(ranked: &[u8], p: usize) -> Result<f64> {
    if p == 0 {
        return Err(Error::invalid("NDCG cutoff must be at least 1"));
    }
    if ranked.iter().all(|&l| l == 0) {
        return Err(Error::UndefinedMetric("NDCG needs at least one relevant item".into()));
    }
    let mut ideal = ranked.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(p));
    Ok(dcg(ranked.iter().copied().take(p)) / idcg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub sd: Option<f64>,
    pub runs: usize,
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunSummary> {
    if values.is_empty() {
        return Err(Error::invalid("cannot aggregate zero runs"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Ok(RunSummary {
        mean,
        sd,
        runs: values.len(),
    })
}

/// How relevance labels are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelView {
    /// Binarize at `label >= k` for every metric.
    AtLeast(u8),
    /// AP binarized at `>= 1`; NDCG on the raw grades.
    Graded,
}

impl LabelView {
    fn binary(self, label: u8) -> u8 {
        let k = match self {
            LabelView::AtLeast(k) => k,
            LabelView::Graded => 1,
        };
        u8::from(label >= k)
    }

    fn graded(self, label: u8) -> u8 {
        match self {
            LabelView::AtLeast(_) => self.binary(label),
            LabelView::Graded => label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub ap: f64,
    pub ndcg3: f64,
    pub ndcg5: f64,
}

/// Metrics of one ranked label list, or `None` when the view leaves it without positives.
pub fn query_metrics(ranked: &[u8], view: LabelView) -> Option<QueryMetrics> {
    let binary: Vec<u8> = ranked.iter().map(|&l| view.binary(l)).collect();
    let graded: Vec<u8> = ranked.iter().map(|&l| view.graded(l)).collect();
    Some(QueryMetrics {
        ap: average_precision(&binary).ok()?,
        ndcg3: ndcg_p(&graded, 3).ok()?,
        ndcg5: ndcg_p(&graded, 5).ok()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub error: f64,
    pub sd: Option<f64>,
}

impl MetricSummary {
    fn from_runs(values: &[f64]) -> Self {
        let s = aggregate_runs(values).expect("at least one run");
        MetricSummary {
            mean: s.mean,
            error: 1.0 - s.mean,
            sd: s.sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub view: LabelView,
    /// Per-query values; empty for reports combined over several runs.
    pub per_query: Vec<QueryMetrics>,
    /// Queries dropped because they had no relevant candidate under `view`.
    pub excluded: usize,
    pub runs: usize,
    pub map: MetricSummary,
    pub ndcg3: MetricSummary,
    pub ndcg5: MetricSummary,
}

impl MetricReport {
    /// Report over the ranked label lists of one run.
    pub fn from_rankings<'a>(rankings: impl IntoIterator<Item = &'a [u8]>, view: LabelView) -> Result<Self> {
        let mut per_query = Vec::new();
        let mut excluded = 0;
        for ranked in rankings {
            match query_metrics(ranked, view) {
                Some(m) => per_query.push(m),
                None => excluded += 1,
            }
        }
        if excluded > 0 {
            log::warn!("{excluded} queries without relevant candidates excluded from metrics");
        }
        if per_query.is_empty() {
            return Err(Error::UndefinedMetric("no query has a relevant candidate".into()));
        }
        let n = per_query.len() as f64;
        let mean = |f: fn(&QueryMetrics) -> f64| {
            let m = per_query.iter().map(f).sum::<f64>() / n;
            MetricSummary {
                mean: m,
                error: 1.0 - m,
                sd: None,
            }
        };
        Ok(MetricReport {
            view,
            map: mean(|q| q.ap),
            ndcg3: mean(|q| q.ndcg3),
            ndcg5: mean(|q| q.ndcg5),
            per_query,
            excluded,
            runs: 1,
        })
    }

    /// Mean and sample sd of the per-run means.
    pub fn combine_runs(reports: &[MetricReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::invalid("cannot combine zero runs"))?;
        if reports.iter().any(|r| r.view != first.view) {
            return Err(Error::invalid("cannot combine reports with different label views"));
        }
        let col = |f: fn(&MetricReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
        Ok(MetricReport {
            view: first.view,
            per_query: Vec::new(),
            excluded: reports.iter().map(|r| r.excluded).sum(),
            runs: reports.len(),
            map: MetricSummary::from_runs(&col(|r| r.map.mean)),
            ndcg3: MetricSummary::from_runs(&col(|r| r.ndcg3.mean)),
            ndcg5: MetricSummary::from_runs(&col(|r| r.ndcg5.mean)),
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

fn cell(s: &MetricSummary) -> String {
    match s.sd {
        Some(sd) => format!("{:.2} ± {:.2}", 100.0 * s.error, 100.0 * sd),
        None => format!("{:.2}", 100.0 * s.error),
    }
}

/// Error rates in percent, columns MAP, NDCG3, NDCG5.
pub fn format_table(rows: &[(String, &MetricReport)]) -> String {
    let header = ["method", "MAP", "NDCG3", "NDCG5"];
    let body: Vec<[String; 4]> = rows
        .iter()
        .map(|(name, r)| [name.clone(), cell(&r.map), cell(&r.ndcg3), cell(&r.ndcg5)])
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
            let pad = w - c.chars().count();
            if i == 0 {
                write!(out, "{c}{}", " ".repeat(pad)).unwrap();
            } else {
                write!(out, "  {}{c}", " ".repeat(pad)).unwrap();
            }
        }
        out.push('\n');
    };
    line(&mut out, &header);
    for row in &body {
        line(&mut out, &row.each_ref().map(String::as_str));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use proptest::prelude::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[1, 1, 0, 0]).unwrap(), 1.0);
        assert!((average_precision(&[1, 0, 1]).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0, 1]).unwrap(), 0.5);
        assert!(matches!(average_precision(&[0, 0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_p(&[2, 1, 1, 0], 3).unwrap(), 1.0);
        let expected = 1.5 / (1.0 + 1.0 / 3f64.log2());
        assert!((ndcg_p(&[1, 0, 1], 3).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.91972).abs() < 1e-5);
        assert_eq!(ndcg_p(&[1, 1, 1, 0, 1], 3).unwrap(), 1.0);
        assert!(ndcg_p(&[1], 0).is_err());
        assert!(matches!(ndcg_p(&[0, 0, 0], 3), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate_runs(&[0.3; 4]).unwrap();
        assert_eq!((s.mean, s.sd), (0.3, Some(0.0)));
        let s = aggregate_runs(&[0.4, 0.6]).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-15);
        assert!((s.sd.unwrap() - 0.141421356).abs() < 1e-8);
        assert_eq!(aggregate_runs(&[0.7]).unwrap().sd, None);
    }

    #[test]
    fn aggregate_matches_spreadsheet_recomputation() {
        // Five runs; mean and STDEV.S evaluated by hand: deviations ±0.02, ±0.01, 0.
        let runs = [0.81, 0.79, 0.80, 0.82, 0.78];
        let s = aggregate_runs(&runs).unwrap();
        assert!((s.mean - 0.80).abs() < 1e-12);
        let sd = ((0.0004 + 0.0001 + 0.0 + 0.0004 + 0.0001) / 4.0f64).sqrt();
        assert!((s.sd.unwrap() - sd).abs() < 1e-12);
    }

    #[test]
    fn report_views_and_error_convention() {
        let rankings: Vec<Vec<u8>> = vec![vec![2, 1, 0, 0, 1], vec![0, 1, 2, 0, 0], vec![0, 0, 0, 0, 1]];
        let graded = MetricReport::from_rankings(rankings.iter().map(Vec::as_slice), LabelView::Graded).unwrap();
        assert_eq!(graded.per_query.len(), 3);
        let topic = MetricReport::from_rankings(rankings.iter().map(Vec::as_slice), LabelView::AtLeast(2)).unwrap();
        assert_eq!((topic.per_query.len(), topic.excluded), (2, 1));
        assert_eq!(topic.per_query[0].ap, 1.0);
        assert!((topic.per_query[1].ap - 1.0 / 3.0).abs() < 1e-15);
        for r in [&graded, &topic] {
            for s in [r.map, r.ndcg3, r.ndcg5] {
                assert!((s.error - (1.0 - s.mean)).abs() <= 1e-15);
                assert!((0.0..=1.0).contains(&s.mean));
            }
        }
        let combined = MetricReport::combine_runs(&[graded.clone(), topic.clone()]).unwrap_err();
        assert!(matches!(combined, Error::InvalidArgument(_)));
        let combined = MetricReport::combine_runs(&[graded.clone(), graded.clone()]).unwrap();
        assert_eq!(combined.map.sd, Some(0.0));
        assert_eq!(combined.runs, 2);
    }

    #[test]
    fn table_layout() {
        let r = MetricReport::from_rankings([&[1u8, 0, 1][..]], LabelView::AtLeast(1)).unwrap();
        let table = format_table(&[("AttRN-HL".into(), &r)]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("method"));
        let cols: Vec<&str> = lines[1].split_whitespace().collect();
        assert_eq!(cols, ["AttRN-HL", "16.67", "8.03", "8.03"]);
    }

    #[test]
    fn random_permutation_map_matches_expectation() {
        let labels: Vec<u8> = [1u8; 4].into_iter().chain([0u8; 26]).collect();
        let (n, p) = (30.0, 4.0);
        let h: f64 = (1..=30).map(|k| 1.0 / k as f64).sum();
        let expected = (h + (p - 1.0) / (n - 1.0) * (n - h)) / n;
        let mut rng = Rng::new(77);
        let mut ranked = labels.clone();
        let samples: Vec<f64> = (0..10_000)
            .map(|_| {
                rng.shuffle(&mut ranked);
                average_precision(&ranked).unwrap()
            })
            .collect();
        let s = aggregate_runs(&samples).unwrap();
        let se = s.sd.unwrap() / (samples.len() as f64).sqrt();
        assert!((s.mean - expected).abs() < 3.0 * se, "{} vs {expected}", s.mean);
    }

    proptest! {
        #[test]
        fn equal_label_swaps_are_invisible(labels in prop::collection::vec(0u8..3, 2..20), i in 0usize..20, j in 0usize..20) {
            prop_assume!(labels.iter().any(|&l| l > 0));
            let (i, j) = (i % labels.len(), j % labels.len());
            prop_assume!(labels[i] == labels[j]);
            let mut swapped = labels.clone();
            swapped.swap(i, j);
            prop_assert_eq!(average_precision(&labels).unwrap(), average_precision(&swapped).unwrap());
            prop_assert_eq!(ndcg_p(&labels, 5).unwrap(), ndcg_p(&swapped, 5).unwrap());
        }

        #[test]
        fn promoting_better_item_never_hurts_ndcg(labels in prop::collection::vec(0u8..3, 2..20), i in 0usize..19, p in 1usize..8) {
            prop_assume!(labels.iter().any(|&l| l > 0));
            let i = i % (labels.len() - 1);
            prop_assume!(labels[i] < labels[i + 1]);
            let mut swapped = labels.clone();
            swapped.swap(i, i + 1);
            prop_assert!(ndcg_p(&swapped, p).unwrap() >= ndcg_p(&labels, p).unwrap());
        }

        #[test]
        fn metrics_stay_in_unit_interval(labels in prop::collection::vec(0u8..3, 1..30)) {
            prop_assume!(labels.iter().any(|&l| l > 0));
            let m = query_metrics(&labels, LabelView::Graded).unwrap();
            for v in [m.ap, m.ndcg3, m.ndcg5] {
                prop_assert!((0.0..=1.0 + 1e-15).contains(&v));
            }
        }
    }
}
