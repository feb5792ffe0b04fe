use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use kvg_core::data_engine::{self, pack_sft_records, render_cot_prompt, CotText, SceneRecord, SourceRecord};
use kvg_core::evaluation::{self, EvalReport, GroundTruth, Prediction};
use kvg_core::filtering::{self, cases_from_scenes, IouRule, ResponseRecord, ResponseTable, Scorer, ToyScorer};
use kvg_core::geometry::BBox;
use kvg_core::grpo::{self, ToyGroundingEnv};
use kvg_core::kl_analysis;
use kvg_core::manifest::read_jsonl;
use kvg_core::reward::{parse_response, score_parsed};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::output::{table, write_file, Context};
use crate::CliError;

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

pub fn synth(ctx: &Context) -> Result<(), CliError> {
    let sources = ctx.input("sources", &ctx.cfg.paths.sources, None)?;
    let pool: Vec<SourceRecord> = read_jsonl(&sources)?;
    let base = sources.parent().unwrap_or(Path::new("."));
    let composed = data_engine::synthesize(&pool, &ctx.cfg.synth, ctx.cfg.seed, base)?;
    if composed.is_empty() {
        return Err(CliError::data(format!(
            "{}: no category has two distinct entities, nothing to compose",
            sources.display()
        )));
    }

    composed.par_iter().try_for_each(|(scene, img)| {
        let path = ctx.out_dir.join(&scene.image_ref);
        let mut png = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        write_file(&path, &png)
    })?;

    let scenes: Vec<SceneRecord> = composed.into_iter().map(|(s, _)| s).collect();
    let (stage1, stage2) = data_engine::partition(&scenes, ctx.cfg.synth.stage1_fraction, ctx.cfg.seed)?;
    let mut all: Vec<&SceneRecord> = stage1.iter().chain(&stage2).collect();
    all.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    ctx.write_manifest("scenes.jsonl", all.iter().copied())?;
    ctx.write_manifest("stage1.jsonl", &stage1)?;
    ctx.write_manifest("stage2.jsonl", &stage2)?;

    let mut by_layout: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for s in &scenes {
        let e = by_layout.entry(format!("{:?}", s.layout).to_lowercase()).or_default();
        e.0 += 1;
        e.1 += usize::from(s.layout_fallback);
        e.2 += s.placements.len();
    }
    let mut rows: Vec<Vec<String>> = by_layout
        .iter()
        .map(|(k, (n, fb, p))| vec![k.clone(), n.to_string(), fb.to_string(), p.to_string()])
        .collect();
    rows.push(vec![
        "total".into(),
        scenes.len().to_string(),
        by_layout.values().map(|v| v.1).sum::<usize>().to_string(),
        by_layout.values().map(|v| v.2).sum::<usize>().to_string(),
    ]);
    let mut text = table(&["layout", "scenes", "fallback", "placements"], &rows);
    text.push('\n');
    text.push_str(&table(
        &["split", "scenes"],
        &[vec!["stage1".into(), stage1.len().to_string()], vec!["stage2".into(), stage2.len().to_string()]],
    ));
    ctx.write_table("synth_summary.txt", &text)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CotPrompt {
    scene_id: String,
    target_index: usize,
    image_ref: String,
    prompt: String,
}

pub fn pack_sft(ctx: &Context) -> Result<(), CliError> {
    let scenes_path = ctx.input("scenes", &ctx.cfg.paths.scenes, Some("stage1.jsonl"))?;
    let scenes: Vec<SceneRecord> = read_jsonl(&scenes_path)?;
    let mut prompts = Vec::new();
    for s in &scenes {
        for (i, p) in s.placements.iter().enumerate() {
            if p.entity.is_some() {
                prompts.push(CotPrompt {
                    scene_id: s.scene_id.clone(),
                    target_index: i,
                    image_ref: s.image_ref.clone(),
                    prompt: render_cot_prompt(s, i)?,
                });
            }
        }
    }
    ctx.write_manifest("cot_prompts.jsonl", &prompts)?;
    let mut rows = vec![
        vec!["scenes".to_string(), scenes.len().to_string()],
        vec!["cot prompts".to_string(), prompts.len().to_string()],
    ];
    if ctx.cfg.paths.cots.is_some() {
        let cots_path = ctx.input("cots", &ctx.cfg.paths.cots, None)?;
        let cots: Vec<CotText> = read_jsonl(&cots_path)?;
        let records = pack_sft_records(&scenes, &cots)?;
        ctx.write_manifest("sft.jsonl", &records)?;
        rows.push(vec!["sft records".to_string(), records.len().to_string()]);
    }
    ctx.write_table("pack_sft_summary.txt", &table(&["item", "count"], &rows))?;
    Ok(())
}

pub fn filter(ctx: &Context) -> Result<(), CliError> {
    let scenes_path = ctx.input("scenes", &ctx.cfg.paths.scenes, Some("stage2.jsonl"))?;
    let scenes: Vec<SceneRecord> = read_jsonl(&scenes_path)?;
    let cases = cases_from_scenes(&scenes)?;
    let fc = &ctx.cfg.filter;
    let table_scorer;
    let toy = ToyScorer { accuracy: fc.scorer_accuracy };
    let scorer: &dyn Scorer = if ctx.cfg.paths.responses.is_some() {
        let path = ctx.input("responses", &ctx.cfg.paths.responses, None)?;
        let records: Vec<ResponseRecord> = read_jsonl(&path)?;
        table_scorer = ResponseTable::from_records(&records);
        &table_scorer
    } else {
        &toy
    };
    let outcome = filtering::filter_dataset(&cases, scorer, fc.n_samples, &IouRule { threshold: fc.threshold }, ctx.cfg.seed)?;
    let kept_scenes: BTreeSet<&str> = outcome.kept.iter().map(|c| c.scene_id.as_str()).collect();
    ctx.write_manifest("kept_cases.jsonl", &outcome.kept)?;
    ctx.write_manifest("kept_scenes.jsonl", scenes.iter().filter(|s| kept_scenes.contains(s.scene_id.as_str())))?;
    ctx.write_manifest("filter_passes.jsonl", &outcome.report.passes)?;
    ctx.write_report("filter_report.json", "report", &outcome.report)?;

    let r = &outcome.report;
    let frac = |n: usize| if r.total == 0 { 0.0 } else { n as f64 / r.total as f64 };
    let rows: Vec<Vec<String>> = [
        ("kept", r.kept),
        ("dropped_all_correct", r.dropped_all_correct),
        ("dropped_all_incorrect", r.dropped_all_incorrect),
        ("errored", r.errored),
        ("total", r.total),
    ]
    .iter()
    .map(|(k, n)| vec![k.to_string(), n.to_string(), pct(frac(*n))])
    .collect();
    ctx.write_table("filter_report.txt", &table(&["verdict", "cases", "%"], &rows))?;
    Ok(())
}

pub fn train_toy(ctx: &Context) -> Result<(), CliError> {
    let env = ToyGroundingEnv::generate(ctx.cfg.toy_env.scenes, ctx.cfg.toy_env.candidates, ctx.cfg.seed)?;
    let log = grpo::train(&env, &ctx.cfg.grpo, &ctx.cfg.reward, ctx.cfg.seed)?;
    ctx.write_manifest("train_log.jsonl", &log.rows)?;
    ctx.write_report("policy.json", "policy", &log.policy)?;

    let n = log.rows.len();
    let stride = (n / 10).max(1);
    let rows: Vec<Vec<String>> = log
        .rows
        .iter()
        .enumerate()
        .filter(|(i, _)| i % stride == 0 || *i == n - 1)
        .map(|(_, r)| {
            vec![
                r.iteration.to_string(),
                fmt4(r.mean_reward),
                format!("{:.2e}", r.mean_kl),
                format!("{:.1}", r.mean_response_length),
                fmt4(r.objective_value),
                fmt4(r.greedy_accuracy),
            ]
        })
        .collect();
    ctx.write_table(
        "train_summary.txt",
        &table(&["iteration", "reward", "kl", "length", "objective", "accuracy"], &rows),
    )?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct RewardPair {
    id: String,
    response: String,
    /// Normalized 0..=1000 box.
    gt: [i64; 4],
}

#[derive(Debug, Serialize)]
struct RewardScore {
    id: String,
    total: f64,
    iou_reward: f64,
    format_reward: f64,
    structure_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<String>,
    #[serde(rename = "box", skip_serializing_if = "Option::is_none")]
    extracted_box: Option<[i64; 4]>,
}

pub fn reward_score(ctx: &Context) -> Result<(), CliError> {
    let path = ctx.input("pairs", &ctx.cfg.paths.pairs, None)?;
    let pairs: Vec<RewardPair> = read_jsonl(&path)?;
    let scores = pairs
        .par_iter()
        .map(|p| {
            let gt = BBox::normalized(p.gt)
                .map_err(|e| CliError::data(format!("{}: pair `{}`: {e}", path.display(), p.id)))?;
            let parsed = parse_response(&p.response);
            let b = score_parsed(&parsed, &gt, &ctx.cfg.reward)?;
            Ok(RewardScore {
                id: p.id.clone(),
                total: b.total,
                iou_reward: b.iou_reward,
                format_reward: b.format_reward,
                structure_ok: parsed.structure_ok,
                failure: parsed.failure.map(|f| f.to_string()),
                extracted_box: parsed.extracted_box,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    ctx.write_manifest("scores.jsonl", &scores)?;

    let n = scores.len().max(1) as f64;
    let mean = |f: fn(&RewardScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let rows = vec![
        vec!["pairs".into(), scores.len().to_string()],
        vec!["mean total".into(), fmt4(mean(|s| s.total))],
        vec!["mean iou_reward".into(), fmt4(mean(|s| s.iou_reward))],
        vec!["mean format_reward".into(), fmt4(mean(|s| s.format_reward))],
    ];
    ctx.write_table("scores_summary.txt", &table(&["metric", "value"], &rows))?;
    Ok(())
}

fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let report = doc.get_mut("report").map(serde_json::Value::take).unwrap_or(doc);
    serde_json::from_value(report).map_err(|e| CliError::data(format!("{}: not an eval report: {e}", path.display())))
}

pub fn eval(ctx: &Context) -> Result<(), CliError> {
    let gt_path = ctx.input("gt", &ctx.cfg.paths.gt, None)?;
    let pred_path = ctx.input("predictions", &ctx.cfg.paths.predictions, None)?;
    let gts: Vec<GroundTruth> = read_jsonl(&gt_path)?;
    let preds: Vec<Prediction> = read_jsonl(&pred_path)?;
    let (scored, report) = evaluation::evaluate(&gts, &preds, &ctx.cfg.eval)?;
    ctx.write_manifest("scored.jsonl", &scored)?;
    ctx.write_report("eval_report.json", "report", &report)?;
    let mut text = evaluation::render_table(&report);
    if ctx.cfg.paths.baseline.is_some() {
        let base_path = ctx.input("baseline", &ctx.cfg.paths.baseline, None)?;
        let baseline = read_report(&base_path)?;
        let delta = evaluation::compare_reports(&baseline, &report)?;
        ctx.write_report("eval_delta.json", "delta", &delta)?;
        text.push('\n');
        text.push_str(&evaluation::render_delta_table(&delta));
    }
    ctx.write_table("eval_report.txt", &text)?;
    Ok(())
}

pub fn analyze_kl(ctx: &Context) -> Result<(), CliError> {
    let dir = ctx.input("traces", &ctx.cfg.paths.traces, None)?;
    if !dir.is_dir() {
        return Err(CliError::config(format!("paths.traces: {} is not a directory", dir.display())));
    }
    let report = kl_analysis::analyze_dir(&dir)?;
    ctx.write_manifest("kl_per_trace.jsonl", &report.per_trace)?;
    ctx.write_report("kl_report.json", "report", &report)?;

    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    let mut rows: Vec<Vec<String>> = report
        .per_trace
        .iter()
        .map(|t| {
            vec![
                t.trace.clone(),
                t.divergence.cot_tokens.to_string(),
                opt(t.divergence.cot_mean_kl),
                t.divergence.answer_tokens.to_string(),
                opt(t.divergence.answer_mean_kl),
            ]
        })
        .collect();
    let a = &report.aggregate;
    rows.push(vec!["macro".into(), String::new(), opt(a.cot_macro), String::new(), opt(a.answer_macro)]);
    rows.push(vec!["micro".into(), String::new(), opt(a.cot_micro), String::new(), opt(a.answer_micro)]);
    ctx.write_table(
        "kl_report.txt",
        &table(&["trace", "cot n", "cot KL", "answer n", "answer KL"], &rows),
    )?;
    Ok(())
}
