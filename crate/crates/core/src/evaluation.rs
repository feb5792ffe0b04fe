//! Grounding accuracy: a prediction is correct when its box, clipped to the
//! canvas, reaches the IoU threshold against the ground truth. Accuracy is
//! reported per category, overall (instance-weighted) and per tag group.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, CoordSpace};
use crate::reward::{box_literals, parse_response};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub instance_id: String,
    pub category: String,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
    /// Normalized 0..=1000 box.
    pub bbox: [i64; 4],
}

/// A model output: raw text, or a box already extracted by the caller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[i64; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// `<think>..</think><answer>[..]</answer>` responses, parsed strictly.
    #[default]
    Tagged,
    /// Box literals anywhere in the text, for models that answer directly.
    BareBox,
}

/// Which literal counts when a bare-box response holds several.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiBoxPolicy {
    #[default]
    First,
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub mode: PredictionMode,
    pub multi_box: MultiBoxPolicy,
    pub tag_columns: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            mode: PredictionMode::Tagged,
            multi_box: MultiBoxPolicy::First,
            tag_columns: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub instance_id: String,
    pub category: String,
    pub tags: BTreeMap<String, String>,
    pub iou: Option<f64>,
    pub correct: bool,
}

fn candidate_boxes(pred: &Prediction, mode: PredictionMode) -> Vec<[i64; 4]> {
    if let Some(b) = pred.bbox {
        return vec![b];
    }
    let Some(text) = pred.response.as_deref() else {
        return Vec::new();
    };
    match mode {
        PredictionMode::Tagged => {
            let p = parse_response(text);
            p.extracted_box.filter(|_| p.structure_ok).into_iter().collect()
        }
        PredictionMode::BareBox => box_literals(text).into_iter().filter_map(|r| r.ok()).collect(),
    }
}

/// IoU of the extracted prediction, or `None` when no usable box exists.
pub fn prediction_iou(pred: &Prediction, gt: &GroundTruth, cfg: &EvalConfig) -> Result<Option<f64>> {
    if pred.instance_id != gt.instance_id {
        return Err(Error::UnknownInstance(pred.instance_id.clone()));
    }
    let gt_box = BBox::normalized(gt.bbox)?;
    let ious: Vec<f64> = candidate_boxes(pred, cfg.mode)
        .into_iter()
        .filter_map(|c| BBox::clipped(c, CoordSpace::Normalized1000).ok())
        .map(|b| gt_box.iou(&b))
        .collect::<Result<_>>()?;
    Ok(match cfg.multi_box {
        MultiBoxPolicy::First => ious.first().copied(),
        MultiBoxPolicy::Best => ious.into_iter().reduce(f64::max),
    })
}

pub fn score_instance(pred: &Prediction, gt: &GroundTruth, cfg: &EvalConfig) -> Result<bool> {
    Ok(prediction_iou(pred, gt, cfg)?.is_some_and(|iou| iou >= cfg.threshold))
}

/// Scores every ground-truth instance. Instances without a prediction count
/// as incorrect; predictions for unknown instances are an error.
pub fn score_all(gts: &[GroundTruth], preds: &[Prediction], cfg: &EvalConfig) -> Result<Vec<ScoredInstance>> {
    cfg.validate()?;
    let mut by_id: BTreeMap<&str, &Prediction> = BTreeMap::new();
    let known: BTreeSet<&str> = gts.iter().map(|g| g.instance_id.as_str()).collect();
    if known.len() != gts.len() {
        return Err(Error::InvalidArgument("duplicate ground-truth instance ids".to_string()));
    }
    for p in preds {
        if !known.contains(p.instance_id.as_str()) {
            return Err(Error::UnknownInstance(p.instance_id.clone()));
        }
        if by_id.insert(p.instance_id.as_str(), p).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate prediction for `{}`",
                p.instance_id
            )));
        }
    }
    gts.par_iter()
        .map(|gt| {
            let iou = match by_id.get(gt.instance_id.as_str()) {
                Some(p) => prediction_iou(p, gt, cfg)?,
                None => None,
            };
            Ok(ScoredInstance {
                instance_id: gt.instance_id.clone(),
                category: gt.category.clone(),
                tags: gt.tags.clone(),
                iou,
                correct: iou.is_some_and(|v| v >= cfg.threshold),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl AccuracyRow {
    pub fn new(n: usize, correct: usize) -> Self {
        AccuracyRow {
            n,
            correct,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        }
    }

    fn add(&mut self, correct: bool) {
        *self = AccuracyRow::new(self.n + 1, self.correct + usize::from(correct));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEcho {
    pub threshold: f64,
    pub clip_to_canvas: bool,
    pub mode: PredictionMode,
    pub multi_box: MultiBoxPolicy,
    pub tag_columns: Vec<String>,
}

impl From<&EvalConfig> for EvalEcho {
    fn from(c: &EvalConfig) -> Self {
        EvalEcho {
            threshold: c.threshold,
            clip_to_canvas: true,
            mode: c.mode,
            multi_box: c.multi_box,
            tag_columns: c.tag_columns.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: BTreeMap<String, AccuracyRow>,
    pub overall: AccuracyRow,
    /// Keyed by `col=value` pairs joined with `,`, one key per combination.
    pub tag_groups: BTreeMap<String, AccuracyRow>,
    pub config: EvalEcho,
}

fn tag_key(tags: &BTreeMap<String, String>, columns: &[String]) -> String {
    columns
        .iter()
        .map(|c| format!("{c}={}", tags.get(c).map_or("<none>", String::as_str)))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn aggregate(scored: &[ScoredInstance], cfg: &EvalConfig) -> Result<EvalReport> {
    if scored.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".to_string()));
    }
    let mut categories: BTreeMap<String, AccuracyRow> = BTreeMap::new();
    let mut tag_groups: BTreeMap<String, AccuracyRow> = BTreeMap::new();
    for s in scored {
        categories
            .entry(s.category.clone())
            .or_insert(AccuracyRow::new(0, 0))
            .add(s.correct);
        if !cfg.tag_columns.is_empty() {
            tag_groups
                .entry(tag_key(&s.tags, &cfg.tag_columns))
                .or_insert(AccuracyRow::new(0, 0))
                .add(s.correct);
        }
    }
    let n = categories.values().map(|r| r.n).sum();
    let correct = categories.values().map(|r| r.correct).sum();
    Ok(EvalReport {
        categories,
        overall: AccuracyRow::new(n, correct),
        tag_groups,
        config: cfg.into(),
    })
}

pub fn evaluate(gts: &[GroundTruth], preds: &[Prediction], cfg: &EvalConfig) -> Result<(Vec<ScoredInstance>, EvalReport)> {
    let scored = score_all(gts, preds, cfg)?;
    let report = aggregate(&scored, cfg)?;
    Ok((scored, report))
}

/// Accuracy differences `b − a`, as fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub categories: BTreeMap<String, f64>,
    pub tag_groups: BTreeMap<String, f64>,
    pub overall: f64,
}

impl ReportDelta {
    pub fn overall_points(&self) -> f64 {
        self.overall * 100.0
    }
}

pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<ReportDelta> {
    fn diff(
        what: &str,
        a: &BTreeMap<String, AccuracyRow>,
        b: &BTreeMap<String, AccuracyRow>,
    ) -> Result<BTreeMap<String, f64>> {
        if !a.keys().eq(b.keys()) {
            return Err(Error::StructureMismatch(format!(
                "{what} differ: {:?} vs {:?}",
                a.keys().collect::<Vec<_>>(),
                b.keys().collect::<Vec<_>>()
            )));
        }
        Ok(a.iter()
            .zip(b.values())
            .map(|((k, ra), rb)| (k.clone(), rb.accuracy - ra.accuracy))
            .collect())
    }
    Ok(ReportDelta {
        categories: diff("categories", &a.categories, &b.categories)?,
        tag_groups: diff("tag groups", &a.tag_groups, &b.tag_groups)?,
        overall: b.overall.accuracy - a.overall.accuracy,
    })
}

fn render_rows(out: &mut String, title: &str, rows: &[(String, AccuracyRow)]) {
    let width = rows.iter().map(|(k, _)| k.len()).chain([title.len()]).max().unwrap_or(0);
    let _ = writeln!(out, "{title:<width$}  {:>7}  {:>7}  {:>8}", "n", "correct", "acc(%)");
    for (k, r) in rows {
        let _ = writeln!(
            out,
            "{k:<width$}  {:>7}  {:>7}  {:>8.2}",
            r.n,
            r.correct,
            r.accuracy * 100.0
        );
    }
}

/// Human-readable aligned table.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let mut rows: Vec<(String, AccuracyRow)> = report.categories.iter().map(|(k, v)| (k.clone(), *v)).collect();
    rows.push(("overall".to_string(), report.overall));
    render_rows(&mut out, "category", &rows);
    if !report.tag_groups.is_empty() {
        out.push('\n');
        let rows: Vec<_> = report.tag_groups.iter().map(|(k, v)| (k.clone(), *v)).collect();
        render_rows(&mut out, "tag group", &rows);
    }
    let _ = writeln!(
        out,
        "\nthreshold {} (boxes clipped to canvas)",
        report.config.threshold
    );
    out
}

pub fn render_delta_table(delta: &ReportDelta) -> String {
    let mut rows: Vec<(&str, f64)> = delta.categories.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    rows.push(("overall", delta.overall));
    rows.extend(delta.tag_groups.iter().map(|(k, v)| (k.as_str(), *v)));
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max(4);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>9}", "row", "delta(pp)");
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<width$}  {:>+9.2}", v * 100.0);
    }
    out
}
