//! Localization error statistics and recall tables.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::geometry::{localization_error, Pose};

/// Translation unit every reported threshold and error is expressed in.
pub const TRANSLATION_UNIT: &str = "scene_units";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub label: String,
    pub translation: f64,
    pub rotation_deg: f64,
}

impl Threshold {
    pub fn new(label: impl Into<String>, translation: f64, rotation_deg: f64) -> Self {
        Self {
            label: label.into(),
            translation,
            rotation_deg,
        }
    }
}

/// The four fixed pairs `500/10°, 200/5°, 5/5°, 2/2°` plus pairs scaled to the scene extent.
pub fn default_thresholds(extent: f64) -> Vec<Threshold> {
    let mut v = vec![
        Threshold::new("500/10°", 500.0, 10.0),
        Threshold::new("200/5°", 200.0, 5.0),
        Threshold::new("5/5°", 5.0, 5.0),
        Threshold::new("2/2°", 2.0, 2.0),
    ];
    for (pct, deg) in [(5.0, 10.0), (2.0, 5.0), (1.0, 2.0)] {
        v.push(Threshold::new(format!("{pct}%ext/{deg}°"), extent * pct / 100.0, deg));
    }
    v
}

/// One query's outcome: the estimate (if any) and whether it passed verification.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub id: String,
    pub estimate: Option<Pose<f64>>,
    pub reliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub id: String,
    pub ae_deg: Option<f64>,
    pub te: Option<f64>,
    pub reliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub label: String,
    pub translation: f64,
    pub translation_unit: String,
    pub rotation_deg: f64,
    /// Percent of reliable queries under both thresholds.
    pub filtered: f64,
    /// Percent of all queries under both thresholds, counting missing poses as failures.
    pub unfiltered: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub queries: usize,
    pub with_pose: usize,
    pub unreliable: usize,
    pub translation_unit: String,
    /// Medians over every query that produced a pose.
    pub median_ae_deg: Option<f64>,
    pub median_te: Option<f64>,
    /// Medians over reliable queries only.
    pub filtered_median_ae_deg: Option<f64>,
    pub filtered_median_te: Option<f64>,
    pub recall: Vec<RecallEntry>,
    pub per_query: Vec<QueryMetrics>,
}

/// Median with the even-count midpoint convention; `None` for an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Errors and recall of `outcomes` against `gt`, matched by query id.
pub fn compute_metrics(
    outcomes: &[QueryOutcome],
    gt: &BTreeMap<String, Pose<f64>>,
    thresholds: &[Threshold],
) -> Result<MetricsReport, EvalError> {
    let mut per_query = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let truth = gt
            .get(&o.id)
            .ok_or_else(|| EvalError::IdMismatch(format!("no ground truth for query {:?}", o.id)))?;
        let err = o.estimate.as_ref().map(|e| localization_error(e, truth));
        per_query.push(QueryMetrics {
            id: o.id.clone(),
            ae_deg: err.map(|d| d.angular_deg),
            te: err.map(|d| d.translational),
            reliable: o.reliable && err.is_some(),
        });
    }
    let posed: Vec<&QueryMetrics> = per_query.iter().filter(|q| q.ae_deg.is_some()).collect();
    let reliable: Vec<&QueryMetrics> = posed.iter().copied().filter(|q| q.reliable).collect();
    let ae = |v: &[&QueryMetrics]| v.iter().filter_map(|q| q.ae_deg).collect::<Vec<_>>();
    let te = |v: &[&QueryMetrics]| v.iter().filter_map(|q| q.te).collect::<Vec<_>>();
    let under = |q: &QueryMetrics, t: &Threshold| match (q.te, q.ae_deg) {
        (Some(te), Some(ae)) => te < t.translation && ae < t.rotation_deg,
        _ => false,
    };
    let recall = thresholds
        .iter()
        .map(|t| RecallEntry {
            label: t.label.clone(),
            translation: t.translation,
            translation_unit: TRANSLATION_UNIT.into(),
            rotation_deg: t.rotation_deg,
            filtered: percent(reliable.iter().filter(|q| under(q, t)).count(), reliable.len()),
            unfiltered: percent(per_query.iter().filter(|q| under(q, t)).count(), per_query.len()),
        })
        .collect();
    Ok(MetricsReport {
        queries: per_query.len(),
        with_pose: posed.len(),
        unreliable: per_query.len() - reliable.len(),
        translation_unit: TRANSLATION_UNIT.into(),
        median_ae_deg: median(&ae(&posed)),
        median_te: median(&te(&posed)),
        filtered_median_ae_deg: median(&ae(&reliable)),
        filtered_median_te: median(&te(&reliable)),
        recall,
        per_query,
    })
}

/// Recall table: one column per threshold label, rows `filtered` and `unfiltered`.
pub fn write_metrics_csv(report: &MetricsReport, w: &mut impl Write) -> io::Result<()> {
    write!(w, "recall")?;
    for r in &report.recall {
        write!(w, ",{}", r.label)?;
    }
    writeln!(w)?;
    for (name, pick) in [("filtered", true), ("unfiltered", false)] {
        write!(w, "{name}")?;
        for r in &report.recall {
            write!(w, ",{}", if pick { r.filtered } else { r.unfiltered })?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// `query_id, gt_xyz, est_xyz, AE, TE` per query; estimate fields are empty when no pose exists.
pub fn write_trajectory_csv(
    outcomes: &[QueryOutcome],
    gt: &BTreeMap<String, Pose<f64>>,
    w: &mut impl Write,
) -> Result<(), EvalError> {
    let io = |e: io::Error| EvalError::Io(format!("trajectory: {e}"));
    writeln!(w, "query_id,gt_x,gt_y,gt_z,est_x,est_y,est_z,ae_deg,te,reliable").map_err(io)?;
    for o in outcomes {
        let truth = gt
            .get(&o.id)
            .ok_or_else(|| EvalError::IdMismatch(format!("no ground truth for query {:?}", o.id)))?;
        let c = truth.center();
        write!(w, "{},{},{},{}", o.id, c.x, c.y, c.z).map_err(io)?;
        match &o.estimate {
            Some(e) => {
                let d = localization_error(e, truth);
                let ec = e.center();
                writeln!(w, ",{},{},{},{},{},{}", ec.x, ec.y, ec.z, d.angular_deg, d.translational, o.reliable).map_err(io)?;
            }
            None => writeln!(w, ",,,,,,false").map_err(io)?,
        }
    }
    Ok(())
}
