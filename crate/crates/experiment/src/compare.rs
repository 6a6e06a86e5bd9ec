//! Paired comparison of two runs over their common validation cases.

use std::collections::BTreeSet;
use std::path::Path;

use pfda_core::metrics::{CaseMetrics, Metric};
use pfda_core::stats::paired_t_test;

use crate::error::{Error, Result};
use crate::run::{read_cases, CASES};

pub const ALPHA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricComparison {
    pub metric: Metric,
    /// Pairs where the metric is defined in both runs.
    pub n: usize,
    /// `mean(a - b) / se`; NaN when flagged.
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub significant: bool,
    pub flag: Option<String>,
}

/// Pairs cases by id; the id sets must match exactly.
pub fn compare_cases(a: &[CaseMetrics], b: &[CaseMetrics]) -> Result<Vec<MetricComparison>> {
    let ids = |v: &[CaseMetrics]| v.iter().map(|c| c.case_id.clone()).collect::<BTreeSet<_>>();
    let (ia, ib) = (ids(a), ids(b));
    if ia.len() != a.len() || ib.len() != b.len() {
        return Err(Error::Alignment("duplicate case ids".into()));
    }
    if ia != ib {
        let only_a: Vec<_> = ia.difference(&ib).cloned().collect();
        let only_b: Vec<_> = ib.difference(&ia).cloned().collect();
        return Err(Error::Alignment(format!(
            "only in A: [{}]; only in B: [{}]",
            only_a.join(", "),
            only_b.join(", ")
        )));
    }
    let mut b_sorted: Vec<&CaseMetrics> = b.iter().collect();
    b_sorted.sort_by(|x, y| x.case_id.cmp(&y.case_id));
    let mut a_sorted: Vec<&CaseMetrics> = a.iter().collect();
    a_sorted.sort_by(|x, y| x.case_id.cmp(&y.case_id));

    Ok(Metric::ALL
        .iter()
        .map(|&m| {
            let (x, y): (Vec<f64>, Vec<f64>) = a_sorted
                .iter()
                .zip(&b_sorted)
                .map(|(p, q)| (p.get(m), q.get(m)))
                .filter(|(p, q)| !p.is_nan() && !q.is_nan())
                .unzip();
            let n = x.len();
            match paired_t_test(&x, &y) {
                Ok(r) => MetricComparison {
                    metric: m,
                    n,
                    t: r.t,
                    p: r.p,
                    df: r.df,
                    significant: r.p < ALPHA,
                    flag: None,
                },
                Err(e) => MetricComparison {
                    metric: m,
                    n,
                    t: f64::NAN,
                    p: f64::NAN,
                    df: n.saturating_sub(1),
                    significant: false,
                    flag: Some(match e {
                        pfda_core::Error::DegenerateVariance(_) => "degenerate_variance".into(),
                        other => other.to_string(),
                    }),
                },
            }
        })
        .collect())
}

pub fn compare_runs(a: &Path, b: &Path) -> Result<Vec<MetricComparison>> {
    compare_cases(&read_cases(&a.join(CASES))?, &read_cases(&b.join(CASES))?)
}

pub fn write_stats(path: &Path, rows: &[MetricComparison]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "n", "t", "p", "df", "significant", "flag"])?;
    for r in rows {
        w.write_record([
            r.metric.name().to_string(),
            r.n.to_string(),
            r.t.to_string(),
            r.p.to_string(),
            r.df.to_string(),
            r.significant.to_string(),
            r.flag.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
