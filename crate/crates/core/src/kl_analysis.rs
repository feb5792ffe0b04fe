//! Token-level KL divergence between two models over the same response,
//! averaged separately over the reasoning segment (before the closing think
//! tag) and the answer segment.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest;

/// Token id to probability. May be a top-k truncation.
pub type SparseDist = BTreeMap<u32, f64>;

pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;
pub const SMOOTHING: f64 = 1e-10;

fn check_dist(d: &SparseDist, truncated: bool) -> Result<()> {
    if d.is_empty() {
        return Err(Error::InvalidArgument("empty distribution".to_string()));
    }
    if let Some(v) = d.values().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidArgument(format!("invalid probability {v}")));
    }
    let sum: f64 = d.values().sum();
    let ok = if truncated {
        sum > 0.0 && sum <= 1.0 + NORMALIZATION_TOLERANCE
    } else {
        (sum - 1.0).abs() <= NORMALIZATION_TOLERANCE
    };
    if !ok {
        return Err(Error::InvalidArgument(format!(
            "distribution sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

fn kl_unchecked(p: &SparseDist, q: &SparseDist) -> f64 {
    let support: Vec<u32> = p.keys().chain(q.keys()).copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let smooth = |d: &SparseDist| -> Vec<f64> {
        let raw: Vec<f64> = support.iter().map(|t| d.get(t).copied().unwrap_or(0.0) + SMOOTHING).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / z).collect()
    };
    let (ps, qs) = (smooth(p), smooth(q));
    let kl: f64 = ps.iter().zip(&qs).map(|(a, b)| a * (a / b).ln()).sum();
    kl.max(0.0)
}

/// `Σ p ln(p / q)` after smoothing both distributions over their union
/// support.
pub fn token_kl(p: &SparseDist, q: &SparseDist) -> Result<f64> {
    check_dist(p, false)?;
    check_dist(q, false)?;
    Ok(kl_unchecked(p, q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePosition {
    pub p: SparseDist,
    pub q: SparseDist,
}

/// Per-position distributions of models P and Q over one realized response.
/// Positions `< split_index` are reasoning tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistributionTrace {
    split_index: usize,
    truncated: bool,
    positions: Vec<TracePosition>,
}

impl TokenDistributionTrace {
    pub fn new(positions: Vec<TracePosition>, split_index: usize, truncated: bool) -> Result<Self> {
        if split_index > positions.len() {
            return Err(Error::InvalidArgument(format!(
                "split index {split_index} beyond {} positions",
                positions.len()
            )));
        }
        for (i, pos) in positions.iter().enumerate() {
            check_dist(&pos.p, truncated)
                .and_then(|_| check_dist(&pos.q, truncated))
                .map_err(|e| Error::InvalidArgument(format!("position {i}: {e}")))?;
        }
        Ok(TokenDistributionTrace {
            split_index,
            truncated,
            positions,
        })
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn positions(&self) -> &[TracePosition] {
        &self.positions
    }

    pub fn per_position_kl(&self) -> Vec<f64> {
        self.positions.iter().map(|pos| kl_unchecked(&pos.p, &pos.q)).collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |line: usize, message: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let lines: Vec<serde_json::Value> = manifest::read_jsonl(path)?;
        let mut iter = lines.into_iter().enumerate();
        let header: TraceHeader = match iter.next() {
            Some((_, v)) if v.get("split_index").is_some() => {
                serde_json::from_value(v).map_err(|e| bad(1, e.to_string()))?
            }
            _ => {
                return Err(bad(
                    1,
                    "trace must start with a {\"split_index\": ..} header".to_string(),
                ))
            }
        };
        let mut positions = Vec::new();
        for (i, v) in iter {
            positions.push(serde_json::from_value(v).map_err(|e| bad(i + 1, e.to_string()))?);
        }
        Self::new(positions, header.split_index, header.truncated)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = TraceHeader {
            split_index: self.split_index,
            truncated: self.truncated,
        };
        let mut out = manifest::to_jsonl([&header])?;
        out.push_str(&manifest::to_jsonl(&self.positions)?);
        Ok(out)
    }
}

/// First line of a trace file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceHeader {
    split_index: usize,
    #[serde(default)]
    truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDivergence {
    /// `None` when the segment is empty.
    pub cot_mean_kl: Option<f64>,
    pub answer_mean_kl: Option<f64>,
    pub cot_tokens: usize,
    pub answer_tokens: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn segment_divergence(trace: &TokenDistributionTrace) -> SegmentDivergence {
    let kl = trace.per_position_kl();
    let (cot, answer) = kl.split_at(trace.split_index);
    SegmentDivergence {
        cot_mean_kl: mean(cot),
        answer_mean_kl: mean(answer),
        cot_tokens: cot.len(),
        answer_tokens: answer.len(),
    }
}

/// Cross-trace means. Macro averages per-trace means; micro pools tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlAggregate {
    pub traces: usize,
    pub cot_macro: Option<f64>,
    pub answer_macro: Option<f64>,
    pub cot_micro: Option<f64>,
    pub answer_micro: Option<f64>,
}

pub fn aggregate(results: &[SegmentDivergence]) -> KlAggregate {
    let macro_of = |f: fn(&SegmentDivergence) -> Option<f64>| mean(&results.iter().filter_map(f).collect::<Vec<_>>());
    let micro_of = |f: fn(&SegmentDivergence) -> (Option<f64>, usize)| {
        let (mut sum, mut n) = (0.0, 0usize);
        for r in results {
            if let (Some(m), k) = f(r) {
                sum += m * k as f64;
                n += k;
            }
        }
        (n > 0).then(|| sum / n as f64)
    };
    KlAggregate {
        traces: results.len(),
        cot_macro: macro_of(|r| r.cot_mean_kl),
        answer_macro: macro_of(|r| r.answer_mean_kl),
        cot_micro: micro_of(|r| (r.cot_mean_kl, r.cot_tokens)),
        answer_micro: micro_of(|r| (r.answer_mean_kl, r.answer_tokens)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceResult {
    pub trace: String,
    #[serde(flatten)]
    pub divergence: SegmentDivergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub per_trace: Vec<TraceResult>,
    pub aggregate: KlAggregate,
}

/// Analyzes every `*.jsonl` trace in `dir`, in file-name order.
pub fn analyze_dir(dir: &Path) -> Result<KlReport> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut per_trace = Vec::with_capacity(files.len());
    for f in files {
        let trace = TokenDistributionTrace::read(&f)?;
        per_trace.push(TraceResult {
            trace: f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            divergence: segment_divergence(&trace),
        });
    }
    let divs: Vec<_> = per_trace.iter().map(|t| t.divergence.clone()).collect();
    Ok(KlReport {
        per_trace,
        aggregate: aggregate(&divs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn dist(v: &[f64]) -> SparseDist {
        v.iter().enumerate().map(|(i, &p)| (i as u32, p)).collect()
    }

    #[test]
    fn token_kl_examples() {
        let p = dist(&[0.5, 0.5]);
        assert_eq!(token_kl(&p, &p).unwrap(), 0.0);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let got = token_kl(&p, &dist(&[0.9, 0.1])).unwrap();
        assert!((got - expected).abs() < 1e-8);
        assert!((got - 0.5108).abs() < 1e-4);
        let point = dist(&[1.0, 0.0]);
        assert_eq!(token_kl(&point, &point).unwrap(), 0.0);
        assert!(token_kl(&dist(&[0.5, 0.4]), &p).is_err());
        assert!(token_kl(&dist(&[1.5, -0.5]), &p).is_err());
    }

    #[test]
    fn disjoint_support_is_finite() {
        let mut p = SparseDist::new();
        p.insert(1, 1.0);
        let mut q = SparseDist::new();
        q.insert(2, 1.0);
        let kl = token_kl(&p, &q).unwrap();
        assert!(kl.is_finite() && kl > 20.0);
    }

    fn pos(p: &[f64], q: &[f64]) -> TracePosition {
        TracePosition { p: dist(p), q: dist(q) }
    }

    #[test]
    fn segment_examples() {
        let t = TokenDistributionTrace::new(vec![pos(&[0.5, 0.5], &[0.5, 0.5]); 3], 2, false).unwrap();
        let d = segment_divergence(&t);
        assert_eq!((d.cot_mean_kl, d.answer_mean_kl), (Some(0.0), Some(0.0)));

        let t = TokenDistributionTrace::new(
            vec![pos(&[0.5, 0.5], &[0.5, 0.5]), pos(&[0.5, 0.5], &[0.5, 0.5]), pos(&[0.2, 0.8], &[0.7, 0.3])],
            2,
            false,
        )
        .unwrap();
        let d = segment_divergence(&t);
        assert_eq!(d.cot_mean_kl, Some(0.0));
        assert!(d.answer_mean_kl.unwrap() > 0.0);

        let t = TokenDistributionTrace::new(vec![pos(&[0.5, 0.5], &[0.9, 0.1]), pos(&[0.3, 0.7], &[0.3, 0.7])], 1, false).unwrap();
        let d = segment_divergence(&t);
        assert!((d.cot_mean_kl.unwrap() - 0.5108).abs() < 1e-4);
        assert_eq!(d.answer_mean_kl, Some(0.0));
    }

    #[test]
    fn empty_segments_are_absent() {
        let t = TokenDistributionTrace::new(vec![pos(&[1.0], &[1.0])], 0, false).unwrap();
        assert_eq!(segment_divergence(&t).cot_mean_kl, None);
        let t = TokenDistributionTrace::new(vec![pos(&[1.0], &[1.0])], 1, false).unwrap();
        assert_eq!(segment_divergence(&t).answer_mean_kl, None);
        assert!(TokenDistributionTrace::new(vec![], 1, false).is_err());
    }

    #[test]
    fn truncated_traces_allow_partial_mass() {
        let p = pos(&[0.6, 0.3], &[0.5, 0.2]);
        assert!(TokenDistributionTrace::new(vec![p.clone()], 0, false).is_err());
        let t = TokenDistributionTrace::new(vec![p], 0, true).unwrap();
        assert!(segment_divergence(&t).answer_mean_kl.unwrap() >= 0.0);
    }

    #[test]
    fn macro_and_micro_means() {
        let a = SegmentDivergence {
            cot_mean_kl: Some(1.0),
            answer_mean_kl: None,
            cot_tokens: 1,
            answer_tokens: 0,
        };
        let b = SegmentDivergence {
            cot_mean_kl: Some(0.0),
            answer_mean_kl: Some(2.0),
            cot_tokens: 3,
            answer_tokens: 2,
        };
        let agg = aggregate(&[a, b]);
        assert_eq!(agg.cot_macro, Some(0.5));
        assert_eq!(agg.cot_micro, Some(0.25));
        assert_eq!(agg.answer_macro, Some(2.0));
        assert_eq!(agg.answer_micro, Some(2.0));
    }

    #[test]
    fn trace_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = TokenDistributionTrace::new(vec![pos(&[0.5, 0.5], &[0.9, 0.1]), pos(&[1.0], &[1.0])], 1, false).unwrap();
        fs::write(dir.path().join("b.jsonl"), t.to_jsonl().unwrap()).unwrap();
        fs::write(dir.path().join("a.jsonl"), t.to_jsonl().unwrap()).unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        assert_eq!(TokenDistributionTrace::read(dir.path().join("a.jsonl")).unwrap(), t);
        let report = analyze_dir(dir.path()).unwrap();
        assert_eq!(report.per_trace.len(), 2);
        assert_eq!(report.per_trace[0].trace, "a.jsonl");

        fs::write(dir.path().join("c.jsonl"), "{\"p\":{\"0\":1.0},\"q\":{\"0\":1.0}}\n").unwrap();
        assert!(analyze_dir(dir.path()).is_err());
    }
}
