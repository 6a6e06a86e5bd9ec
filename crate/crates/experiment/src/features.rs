//! Agreement between shape/intensity features of predicted and reference
//! masks across cases.

use std::path::Path;

use pfda_core::metrics::{mask_features, MaskFeatures};
use pfda_core::stats::pearson_r;

use crate::error::Result;
use crate::run::StoredCase;

pub const FEATURES: &str = "features.csv";
pub const FEATURE_VALUES: &str = "feature_values.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub feature: &'static str,
    pub n: usize,
    /// NaN when flagged.
    pub r: f64,
    pub flag: Option<String>,
}

/// Per-case `(id, predicted, reference)` features; cases with an empty
/// prediction are listed separately.
pub struct FeatureTable {
    pub cases: Vec<(String, MaskFeatures, MaskFeatures)>,
    pub empty_predictions: Vec<String>,
}

pub fn extract(cases: &[StoredCase]) -> Result<FeatureTable> {
    let mut t = FeatureTable {
        cases: Vec::new(),
        empty_predictions: Vec::new(),
    };
    for c in cases {
        if c.pred.is_empty() {
            t.empty_predictions.push(c.id.clone());
            continue;
        }
        t.cases.push((c.id.clone(), mask_features(&c.volume, &c.pred)?, mask_features(&c.volume, &c.gt)?));
    }
    Ok(t)
}

pub fn consistency(t: &FeatureTable) -> Vec<FeatureRow> {
    let skipped = (!t.empty_predictions.is_empty()).then(|| format!("{} empty predictions skipped", t.empty_predictions.len()));
    MaskFeatures::NAMES
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let pred: Vec<f64> = t.cases.iter().map(|c| c.1.as_array()[i]).collect();
            let gt: Vec<f64> = t.cases.iter().map(|c| c.2.as_array()[i]).collect();
            let (r, flag) = match pearson_r(&pred, &gt) {
                Ok(r) => (r, skipped.clone()),
                Err(e) => (f64::NAN, Some(format!("degenerate: {e}"))),
            };
            FeatureRow {
                feature: name,
                n: pred.len(),
                r,
                flag,
            }
        })
        .collect()
}

pub fn write_features(dir: &Path, t: &FeatureTable, rows: &[FeatureRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(FEATURES))?;
    w.write_record(["feature", "n", "r", "flag"])?;
    for r in rows {
        w.write_record([r.feature.to_string(), r.n.to_string(), r.r.to_string(), r.flag.clone().unwrap_or_default()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join(FEATURE_VALUES))?;
    w.write_record(
        std::iter::once("case_id".to_string()).chain(
            MaskFeatures::NAMES
                .iter()
                .flat_map(|n| [format!("{n}_pred"), format!("{n}_gt")]),
        ),
    )?;
    for (id, p, g) in &t.cases {
        let (p, g) = (p.as_array(), g.as_array());
        w.write_record(std::iter::once(id.clone()).chain((0..4).flat_map(|i| [p[i].to_string(), g[i].to_string()])))?;
    }
    w.flush()?;
    Ok(())
}
