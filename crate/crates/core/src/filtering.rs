//! Stage-2 data filtering: sample every case several times and keep only the
//! cases the scorer sometimes gets right and sometimes gets wrong.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_engine::{render_grounding_prompt, SceneRecord};
use crate::error::{Error, Result};
use crate::geometry::{box_literal, BBox};
use crate::reward::parse_response;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Kept,
    DroppedAllCorrect,
    DroppedAllIncorrect,
}

pub fn classify_case(flags: &[bool]) -> Result<Verdict> {
    if flags.is_empty() {
        return Err(Error::InvalidArgument("no samples to classify".to_string()));
    }
    Ok(if flags.iter().all(|&f| f) {
        Verdict::DroppedAllCorrect
    } else if flags.iter().all(|&f| !f) {
        Verdict::DroppedAllIncorrect
    } else {
        Verdict::Kept
    })
}

/// One grounding query: find `entity` in the image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingCase {
    pub query_id: String,
    pub scene_id: String,
    pub image_ref: String,
    pub category: String,
    pub entity: String,
    pub prompt: String,
    /// Target box on the normalized 0..=1000 grid.
    pub bbox: [i64; 4],
}

impl GroundingCase {
    pub fn gt(&self) -> Result<BBox> {
        BBox::normalized(self.bbox)
    }
}

/// Every labeled placement of every scene as a grounding case.
pub fn cases_from_scenes(scenes: &[SceneRecord]) -> Result<Vec<GroundingCase>> {
    let mut out = Vec::new();
    for s in scenes {
        for (i, p) in s.placements.iter().enumerate() {
            let Some(entity) = p.entity.as_deref() else {
                continue;
            };
            out.push(GroundingCase {
                query_id: format!("{}#{i}", s.scene_id),
                scene_id: s.scene_id.clone(),
                image_ref: s.image_ref.clone(),
                category: s.category.clone(),
                entity: entity.to_string(),
                prompt: render_grounding_prompt(entity)?,
                bbox: s.placement_bbox(i)?.to_normalized_1000()?.coords(),
            });
        }
    }
    Ok(out)
}

/// Produces sample `index` of a case. Stochastic scorers draw from
/// `sample_seed`; replayed responses look up `index`.
pub trait Scorer: Sync {
    fn respond(&self, case: &GroundingCase, index: usize, sample_seed: u64) -> Result<String>;
}

impl<F> Scorer for F
where
    F: Fn(&GroundingCase, usize, u64) -> Result<String> + Sync,
{
    fn respond(&self, case: &GroundingCase, index: usize, sample_seed: u64) -> Result<String> {
        self(case, index, sample_seed)
    }
}

/// Decides whether a response grounds the case correctly.
pub trait CorrectnessRule: Sync {
    fn is_correct(&self, case: &GroundingCase, response: &str) -> Result<bool>;
}

/// Correct when the parsed (and canvas-clipped) box reaches `threshold` IoU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouRule {
    pub threshold: f64,
}

impl Default for IouRule {
    fn default() -> Self {
        IouRule { threshold: 0.5 }
    }
}

impl CorrectnessRule for IouRule {
    fn is_correct(&self, case: &GroundingCase, response: &str) -> Result<bool> {
        let gt = case.gt()?;
        let parsed = parse_response(response);
        let Some(raw) = parsed.extracted_box.filter(|_| parsed.structure_ok) else {
            return Ok(false);
        };
        match BBox::clipped(raw, gt.space()) {
            Ok(pred) => Ok(gt.iou(&pred)? >= self.threshold),
            Err(_) => Ok(false),
        }
    }
}

/// The bundled toy policy: with probability `accuracy` it answers with the
/// ground-truth box, otherwise with a box that misses it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyScorer {
    pub accuracy: f64,
}

impl Scorer for ToyScorer {
    fn respond(&self, case: &GroundingCase, _index: usize, sample_seed: u64) -> Result<String> {
        let gt = case.gt()?;
        let mut rng = seed::rng(sample_seed, &[]);
        let answer = if rng.gen_bool(self.accuracy.clamp(0.0, 1.0)) {
            gt.coords()
        } else {
            miss_box(&gt, &mut rng)
        };
        Ok(format!(
            "<think>Looking for {} among the {} objects.</think><answer>{}</answer>",
            case.entity,
            case.category,
            box_literal(answer)
        ))
    }
}

/// A box with IoU below 0.5 against `gt`: a corner quarter of it, or a
/// disjoint box when there is room.
fn miss_box(gt: &BBox, rng: &mut seed::Rng) -> [i64; 4] {
    let [x1, y1, x2, y2] = gt.coords();
    let mut options = Vec::new();
    if x1 >= 10 {
        options.push([0, y1, x1, y2]);
    }
    if x2 <= 990 {
        options.push([x2, y1, 1000, y2]);
    }
    if y1 >= 10 {
        options.push([x1, 0, x2, y1]);
    }
    if y2 <= 990 {
        options.push([x1, y2, x2, 1000]);
    }
    if let Some(b) = options.choose(rng) {
        return *b;
    }
    // gt spans the canvas: answer its top-left quarter (IoU 1/4)
    let mx = x1 + (x2 - x1) / 2;
    let my = y1 + (y2 - y1) / 2;
    [x1, y1, mx.max(x1 + 1), my.max(y1 + 1)]
}

/// Responses supplied up front, e.g. from a real model's sampling run.
#[derive(Debug, Clone, Default)]
pub struct ResponseTable {
    responses: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub query_id: String,
    pub sample_index: usize,
    pub response: String,
}

impl ResponseTable {
    pub fn from_records(records: &[ResponseRecord]) -> Self {
        let mut by_query: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
        for r in records {
            by_query
                .entry(r.query_id.clone())
                .or_default()
                .push((r.sample_index, r.response.clone()));
        }
        let responses = by_query
            .into_iter()
            .map(|(q, mut v)| {
                v.sort_by_key(|(i, _)| *i);
                (q, v.into_iter().map(|(_, r)| r).collect())
            })
            .collect();
        ResponseTable { responses }
    }

    pub fn get(&self, query_id: &str, sample_index: usize) -> Result<&str> {
        self.responses
            .get(query_id)
            .and_then(|v| v.get(sample_index))
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownInstance(format!("{query_id} sample {sample_index}")))
    }
}

impl Scorer for ResponseTable {
    fn respond(&self, case: &GroundingCase, index: usize, _sample_seed: u64) -> Result<String> {
        self.get(&case.query_id, index).map(str::to_string)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPassResult {
    pub query_id: String,
    pub n_samples: usize,
    pub flags: Vec<bool>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErroredCase {
    pub query_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub kept: usize,
    pub dropped_all_correct: usize,
    pub dropped_all_incorrect: usize,
    pub errored: usize,
    pub kept_fraction: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub passes: Vec<SamplingPassResult>,
    pub errors: Vec<ErroredCase>,
}

pub struct FilterOutcome {
    pub kept: Vec<GroundingCase>,
    pub report: FilterReport,
}

/// Seed for sample `index` of a case. Depends only on the run seed and the
/// query id, so filtering a subset reproduces the same samples.
pub fn sample_seed(run_seed: u64, query_id: &str, index: usize) -> u64 {
    seed::derive(run_seed, &[6, seed::stable_hash(query_id), index as u64])
}

/// Scores every case `n_samples` times and keeps the mixed ones. A scorer or
/// rule failure excludes the case and is reported separately.
pub fn filter_dataset(
    cases: &[GroundingCase],
    scorer: &dyn Scorer,
    n_samples: usize,
    rule: &dyn CorrectnessRule,
    rng_seed: u64,
) -> Result<FilterOutcome> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be positive".to_string()));
    }
    let results: Vec<std::result::Result<SamplingPassResult, String>> = cases
        .par_iter()
        .map(|case| {
            let flags = (0..n_samples)
                .map(|i| {
                    let response = scorer.respond(case, i, sample_seed(rng_seed, &case.query_id, i))?;
                    rule.is_correct(case, &response)
                })
                .collect::<Result<Vec<bool>>>()
                .map_err(|e| e.to_string())?;
            let verdict = classify_case(&flags).map_err(|e| e.to_string())?;
            Ok(SamplingPassResult {
                query_id: case.query_id.clone(),
                n_samples,
                flags,
                verdict,
            })
        })
        .collect();

    let mut kept = Vec::new();
    let mut passes = Vec::with_capacity(cases.len());
    let mut errors = Vec::new();
    let (mut all_correct, mut all_incorrect) = (0, 0);
    for (case, result) in cases.iter().zip(results) {
        match result {
            Ok(pass) => {
                match pass.verdict {
                    Verdict::Kept => kept.push(case.clone()),
                    Verdict::DroppedAllCorrect => all_correct += 1,
                    Verdict::DroppedAllIncorrect => all_incorrect += 1,
                }
                passes.push(pass);
            }
            Err(error) => errors.push(ErroredCase {
                query_id: case.query_id.clone(),
                error,
            }),
        }
    }
    let report = FilterReport {
        total: cases.len(),
        kept: kept.len(),
        dropped_all_correct: all_correct,
        dropped_all_incorrect: all_incorrect,
        errored: errors.len(),
        kept_fraction: if cases.is_empty() {
            0.0
        } else {
            kept.len() as f64 / cases.len() as f64
        },
        n_samples,
        seed: rng_seed,
        passes,
        errors,
    };
    Ok(FilterOutcome { kept, report })
}
