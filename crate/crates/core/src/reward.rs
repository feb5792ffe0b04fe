//! Rule-based grounding rewards.
//!
//! A response must be exactly `<think>...</think>` followed by
//! `<answer>...</answer>` (whitespace allowed around and between the blocks)
//! and the answer must hold exactly one `[x1, y1, x2, y2]` literal of four
//! integers. The IoU reward is the IoU itself when it clears the threshold
//! `tau` and zero otherwise, which denies any credit to near-miss boxes such
//! as a full-canvas `[0, 0, 1000, 1000]`.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseFailure {
    MissingThink,
    MissingAnswer,
    DuplicateTags,
    WrongOrder,
    /// Text outside the two blocks.
    StrayContent,
    MissingBox,
    MultipleBoxes,
    BadBoxArity,
    BadBoxNumber,
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParseFailure::MissingThink => "missing-think",
            ParseFailure::MissingAnswer => "missing-answer",
            ParseFailure::DuplicateTags => "duplicate-tags",
            ParseFailure::WrongOrder => "wrong-order",
            ParseFailure::StrayContent => "stray-content",
            ParseFailure::MissingBox => "missing-box",
            ParseFailure::MultipleBoxes => "multiple-boxes",
            ParseFailure::BadBoxArity => "bad-box-arity",
            ParseFailure::BadBoxNumber => "bad-box-number",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub think_text: Option<String>,
    pub answer_text: Option<String>,
    /// Raw literal; may still violate box invariants (e.g. `x1 > x2`).
    pub extracted_box: Option<[i64; 4]>,
    pub structure_ok: bool,
    pub failure: Option<ParseFailure>,
    pub token_count: usize,
}

impl ParsedResponse {
    /// The extracted literal as a valid normalized box, if it is one.
    pub fn normalized_box(&self) -> Option<BBox> {
        self.extracted_box.and_then(|c| BBox::normalized(c).ok())
    }
}

fn bracket_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\[\]]*)\]").expect("static pattern"))
}

fn int_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-]?[0-9]+$").expect("static pattern"))
}

/// Whitespace token count, used as the response-length metric.
pub fn count_tokens(raw: &str) -> usize {
    raw.split_whitespace().count()
}

/// Every `[...]` group in `text`, parsed as a four-integer box when possible.
pub fn box_literals(text: &str) -> Vec<std::result::Result<[i64; 4], ParseFailure>> {
    bracket_re()
        .captures_iter(text)
        .map(|c| parse_box_body(&c[1]))
        .collect()
}

fn parse_box_body(body: &str) -> std::result::Result<[i64; 4], ParseFailure> {
    let parts: Vec<&str> = body.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(ParseFailure::BadBoxArity);
    }
    let mut out = [0i64; 4];
    for (dst, p) in out.iter_mut().zip(&parts) {
        if !int_re().is_match(p) {
            return Err(ParseFailure::BadBoxNumber);
        }
        *dst = p.parse().map_err(|_| ParseFailure::BadBoxNumber)?;
    }
    Ok(out)
}

pub fn parse_response(raw: &str) -> ParsedResponse {
    let mut parsed = ParsedResponse {
        token_count: count_tokens(raw),
        ..ParsedResponse::default()
    };
    match split_blocks(raw.trim()) {
        Ok((think, answer)) => {
            parsed.think_text = Some(think.to_string());
            parsed.answer_text = Some(answer.to_string());
            let literals = box_literals(answer);
            match literals.as_slice() {
                [] => parsed.failure = Some(ParseFailure::MissingBox),
                [Ok(b)] => {
                    parsed.extracted_box = Some(*b);
                    parsed.structure_ok = true;
                }
                [Err(e)] => parsed.failure = Some(*e),
                _ => parsed.failure = Some(ParseFailure::MultipleBoxes),
            }
        }
        Err(f) => parsed.failure = Some(f),
    }
    parsed
}

fn split_blocks(s: &str) -> std::result::Result<(&str, &str), ParseFailure> {
    let counts = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE].map(|t| s.matches(t).count());
    if counts[0] == 0 || counts[1] == 0 {
        return Err(ParseFailure::MissingThink);
    }
    if counts[2] == 0 || counts[3] == 0 {
        return Err(ParseFailure::MissingAnswer);
    }
    if counts.iter().any(|&c| c > 1) {
        return Err(ParseFailure::DuplicateTags);
    }
    let pos = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE].map(|t| s.find(t).expect("counted"));
    if !(pos[0] < pos[1] && pos[1] < pos[2] && pos[2] < pos[3]) {
        return Err(ParseFailure::WrongOrder);
    }
    let between = &s[pos[1] + THINK_CLOSE.len()..pos[2]];
    if pos[0] != 0 || pos[3] + ANSWER_CLOSE.len() != s.len() || !between.trim().is_empty() {
        return Err(ParseFailure::StrayContent);
    }
    Ok((
        &s[pos[0] + THINK_OPEN.len()..pos[1]],
        &s[pos[2] + ANSWER_OPEN.len()..pos[3]],
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub tau: f64,
    pub w_iou: f64,
    pub w_format: f64,
    /// Multiply the IoU reward by the format reward instead of only summing.
    pub gate_iou_on_format: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            tau: 0.5,
            w_iou: 1.0,
            w_format: 1.0,
            gate_iou_on_format: false,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        if !(self.w_iou >= 0.0 && self.w_format >= 0.0) || !self.w_iou.is_finite() || !self.w_format.is_finite() {
            return Err(Error::InvalidArgument(
                "reward weights must be finite and nonnegative".to_string(),
            ));
        }
        Ok(())
    }
}

/// Thresholded IoU: the IoU when it is at least `tau`, else zero.
pub fn iou_reward(pred: &BBox, gt: &BBox, cfg: &RewardConfig) -> Result<f64> {
    let iou = gt.iou(pred)?;
    Ok(if iou >= cfg.tau { iou } else { 0.0 })
}

pub fn format_reward(p: &ParsedResponse) -> f64 {
    if p.structure_ok && p.normalized_box().is_some() {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub total: f64,
    pub iou_reward: f64,
    pub format_reward: f64,
}

/// Weighted sum of both rewards for a raw response against a normalized
/// ground-truth box. No extracted box means no IoU reward.
pub fn total_reward(raw: &str, gt: &BBox, cfg: &RewardConfig) -> Result<RewardBreakdown> {
    let parsed = parse_response(raw);
    score_parsed(&parsed, gt, cfg)
}

pub fn score_parsed(parsed: &ParsedResponse, gt: &BBox, cfg: &RewardConfig) -> Result<RewardBreakdown> {
    let format = format_reward(parsed);
    let iou = match parsed.normalized_box() {
        Some(pred) if parsed.structure_ok => iou_reward(&pred, gt, cfg)?,
        _ => 0.0,
    };
    let iou_term = if cfg.gate_iou_on_format { iou * format } else { iou };
    Ok(RewardBreakdown {
        total: cfg.w_iou * iou_term + cfg.w_format * format,
        iou_reward: iou,
        format_reward: format,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(c: [i64; 4]) -> BBox {
        BBox::normalized(c).unwrap()
    }

    #[test]
    fn well_formed_response() {
        let p = parse_response("<think>both are jets…</think><answer>[100, 50, 400, 300]</answer>");
        assert!(p.structure_ok);
        assert_eq!(p.extracted_box, Some([100, 50, 400, 300]));
        assert_eq!(p.think_text.as_deref(), Some("both are jets…"));
        assert_eq!(format_reward(&p), 1.0);
    }

    #[test]
    fn failure_reasons() {
        let cases = [
            ("[100, 50, 400, 300]", ParseFailure::MissingThink),
            ("<think>a</think><answer>[10, 20]</answer>", ParseFailure::BadBoxArity),
            ("<think>a</think>", ParseFailure::MissingAnswer),
            ("<answer>[1, 2, 3, 4]</answer><think>a</think>", ParseFailure::WrongOrder),
            ("<think>a</think><think>b</think><answer>[1, 2, 3, 4]</answer>", ParseFailure::DuplicateTags),
            ("hi <think>a</think><answer>[1, 2, 3, 4]</answer>", ParseFailure::StrayContent),
            ("<think>a</think> so <answer>[1, 2, 3, 4]</answer>", ParseFailure::StrayContent),
            ("<think>a</think><answer>none</answer>", ParseFailure::MissingBox),
            ("<think>a</think><answer>[1, 2, 3, 4] [5, 6, 7, 8]</answer>", ParseFailure::MultipleBoxes),
            ("<think>a</think><answer>[1.5, 2, 3, 4]</answer>", ParseFailure::BadBoxNumber),
            ("<think>a</think><answer>[99999999999999999999, 2, 3, 4]</answer>", ParseFailure::BadBoxNumber),
        ];
        for (raw, reason) in cases {
            let p = parse_response(raw);
            assert!(!p.structure_ok, "{raw}");
            assert_eq!(p.failure, Some(reason), "{raw}");
            assert!(p.extracted_box.is_none());
            assert_eq!(format_reward(&p), 0.0);
        }
    }

    #[test]
    fn outer_and_inner_whitespace_allowed() {
        let p = parse_response("  \n<think>x</think>\n\n<answer> box: [ 1 ,2, 3,4 ] </answer>\n");
        assert!(p.structure_ok);
        assert_eq!(p.extracted_box, Some([1, 2, 3, 4]));
    }

    #[test]
    fn tags_are_case_sensitive() {
        let p = parse_response("<THINK>a</THINK><answer>[1, 2, 3, 4]</answer>");
        assert_eq!(p.failure, Some(ParseFailure::MissingThink));
    }

    #[test]
    fn inverted_box_parses_but_scores_zero_format() {
        let p = parse_response("<think>a</think><answer>[400, 300, 100, 50]</answer>");
        assert!(p.structure_ok);
        assert_eq!(format_reward(&p), 0.0);
        assert_eq!(format_reward(&parse_response("")), 0.0);
    }

    #[test]
    fn iou_reward_examples() {
        let cfg = RewardConfig::default();
        let gt = norm([100, 100, 300, 300]);
        assert_eq!(iou_reward(&gt, &gt, &RewardConfig { tau: 1.0, ..cfg.clone() }).unwrap(), 1.0);
        // IoU 1/3
        let a = norm([0, 0, 10, 10]);
        let b = norm([5, 0, 15, 10]);
        assert_eq!(iou_reward(&b, &a, &cfg).unwrap(), 0.0);
        assert!((iou_reward(&b, &a, &RewardConfig { tau: 0.3, ..cfg.clone() }).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // full-canvas box against a 4% gt
        assert_eq!(iou_reward(&norm([0, 0, 1000, 1000]), &gt, &cfg).unwrap(), 0.0);
        assert!(iou_reward(&a, &BBox::pixel([0, 0, 10, 10], 100, 100).unwrap(), &cfg).is_err());
    }

    #[test]
    fn total_reward_examples() {
        let cfg = RewardConfig::default();
        let gt = norm([100, 50, 400, 300]);
        let perfect = "<think>ok</think><answer>[100, 50, 400, 300]</answer>";
        assert_eq!(total_reward(perfect, &gt, &cfg).unwrap().total, 2.0);

        let broken = "<think>ok<answer>[100, 50, 400, 300]</answer>";
        let r = total_reward(broken, &gt, &cfg).unwrap();
        assert_eq!((r.total, r.iou_reward, r.format_reward), (0.0, 0.0, 0.0));

        let disjoint = "<think>ok</think><answer>[600, 600, 700, 700]</answer>";
        let r = total_reward(disjoint, &gt, &cfg).unwrap();
        assert_eq!((r.total, r.iou_reward, r.format_reward), (1.0, 0.0, 1.0));
    }

    #[test]
    fn gating_switch() {
        let gt = norm([100, 50, 400, 300]);
        let raw = "<think>ok</think><answer>[100, 50, 400, 300]</answer>";
        let cfg = RewardConfig {
            gate_iou_on_format: true,
            w_format: 0.0,
            ..RewardConfig::default()
        };
        assert_eq!(total_reward(raw, &gt, &cfg).unwrap().total, 1.0);
        assert!(RewardConfig { tau: 1.5, ..RewardConfig::default() }.validate().is_err());
        assert!(RewardConfig { w_iou: -1.0, ..RewardConfig::default() }.validate().is_err());
    }
}
