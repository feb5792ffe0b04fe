use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::SceneRecord;
use crate::error::{Error, Result};
use crate::geometry::box_literal;

pub const UNKNOWN_ENTITY: &str = "[Unknown]";

const COT_INSTRUCTIONS: [&str; 4] = [
    "Give the reasoning process that would identify it based on the image and your knowledge",
    "Note that you MUST pay attention to the differences from other objects of the same type in this image and make a detailed comparison between them to find evidence that distinguishes this object from the others",
    "Note that you MUST first analyze the visual features that help you make a judgment, and then compare the objects",
    "Note that when an object is \"[Unknown]\", you can still make a comparison based on its visual features without knowing its name",
];

pub fn render_grounding_prompt(entity: &str) -> Result<String> {
    if entity.trim().is_empty() {
        return Err(Error::InvalidArgument("empty entity".to_string()));
    }
    Ok(format!("Find and give the bounding box of {entity}"))
}

/// Placement box on the 0..=1000 grid of the scene canvas.
fn normalized_box(scene: &SceneRecord, index: usize) -> Result<[i64; 4]> {
    Ok(scene.placement_bbox(index)?.to_normalized_1000()?.coords())
}

fn entity_name(scene: &SceneRecord, index: usize) -> &str {
    scene.placements[index]
        .entity
        .as_deref()
        .filter(|e| !e.trim().is_empty())
        .unwrap_or(UNKNOWN_ENTITY)
}

/// The instruction given to a teacher model to write a grounding rationale
/// for placement `target_index`. Boxes use the normalized 0..=1000 grid.
pub fn render_cot_prompt(scene: &SceneRecord, target_index: usize) -> Result<String> {
    let target_box = normalized_box(scene, target_index)?;
    let mut items = Vec::with_capacity(scene.placements.len());
    for i in 0..scene.placements.len() {
        items.push(format!(
            "{} ({})",
            entity_name(scene, i),
            box_literal(normalized_box(scene, i)?)
        ));
    }
    let listing = match items.as_slice() {
        [] => String::new(),
        [only] => only.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    };

    let mut lines = vec![
        format!("<|vision_start|>{}<|vision_end|>", scene.image_ref),
        format!("This image shows {listing}."),
        format!(
            "The bounding box of {} is {}.",
            entity_name(scene, target_index),
            box_literal(target_box)
        ),
    ];
    lines.extend(COT_INSTRUCTIONS.iter().map(|s| s.to_string()));
    Ok(lines.join("\n\n"))
}

/// A teacher-written rationale for one grounding target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotText {
    pub scene_id: String,
    pub target_index: usize,
    pub cot: String,
}

/// One supervised fine-tuning example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub scene_id: String,
    pub target_index: usize,
    pub image_ref: String,
    pub prompt: String,
    pub cot: String,
    /// Target box on the normalized 0..=1000 grid.
    pub answer: [i64; 4],
    pub response: String,
}

pub fn sft_response(cot: &str, answer: [i64; 4]) -> String {
    format!("<think>{cot}</think><answer>{}</answer>", box_literal(answer))
}

/// One record per labeled placement of every scene, in scene order.
pub fn pack_sft_records(scenes: &[SceneRecord], cot_texts: &[CotText]) -> Result<Vec<SftRecord>> {
    let mut texts: BTreeMap<(&str, usize), &str> = BTreeMap::new();
    for t in cot_texts {
        if texts
            .insert((t.scene_id.as_str(), t.target_index), t.cot.as_str())
            .is_some()
        {
            return Err(Error::InvalidArgument(format!(
                "duplicate CoT text for scene `{}` target {}",
                t.scene_id, t.target_index
            )));
        }
    }

    let mut out = Vec::new();
    for scene in scenes {
        for (i, p) in scene.placements.iter().enumerate() {
            let Some(entity) = p.entity.as_deref() else {
                continue;
            };
            let cot = texts
                .remove(&(scene.scene_id.as_str(), i))
                .ok_or_else(|| Error::MissingCot {
                    scene_id: scene.scene_id.clone(),
                    target: i,
                })?;
            let answer = normalized_box(scene, i)?;
            out.push(SftRecord {
                scene_id: scene.scene_id.clone(),
                target_index: i,
                image_ref: scene.image_ref.clone(),
                prompt: render_grounding_prompt(entity)?,
                cot: cot.to_string(),
                answer,
                response: sft_response(cot, answer),
            });
        }
    }
    if let Some(((scene_id, target), _)) = texts.into_iter().next() {
        return Err(Error::InvalidArgument(format!(
            "CoT text for scene `{scene_id}` target {target} matches no labeled placement"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_engine::{Layout, Placement};
    use crate::geometry::AffineTransform;
    use crate::manifest;

    fn scene(id: &str, entities: &[Option<&str>]) -> SceneRecord {
        let placements = entities
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let ox = 100 * i as i64;
                Placement {
                    entity: e.map(str::to_string),
                    source_ref: format!("src{i}.png"),
                    source_width: 100,
                    source_height: 100,
                    source_bbox: [10, 20, 60, 80],
                    transform: AffineTransform::translation(ox, 0),
                    bbox: [10 + ox, 20, 60 + ox, 80],
                    region: [ox, 0, ox + 100, 100],
                }
            })
            .collect();
        SceneRecord {
            scene_id: id.to_string(),
            image_ref: format!("images/{id}.png"),
            width: 100 * entities.len() as i64,
            height: 100,
            category: "aircraft".to_string(),
            layout: Layout::Horizontal,
            layout_fallback: false,
            split: None,
            placements,
        }
    }

    #[test]
    fn grounding_prompt_template() {
        assert_eq!(
            render_grounding_prompt("Airbus A330").unwrap(),
            "Find and give the bounding box of Airbus A330"
        );
        assert_eq!(
            render_grounding_prompt("Clumber Spaniel").unwrap(),
            "Find and give the bounding box of Clumber Spaniel"
        );
        assert!(render_grounding_prompt("").is_err());
    }

    #[test]
    fn cot_prompt_lists_entities_and_target() {
        let s = scene("s0", &[Some("Airbus A330"), Some("Boeing 747")]);
        let p = render_cot_prompt(&s, 0).unwrap();
        assert!(p.contains(
            "This image shows Airbus A330 ([50, 200, 300, 800]) and Boeing 747 ([550, 200, 800, 800])."
        ));
        assert!(p.contains("The bounding box of Airbus A330 is [50, 200, 300, 800]."));
        assert_eq!(p.matches("Note that you MUST").count(), 2);
        assert_eq!(p.matches("Note that").count(), 3);
        assert!(p.starts_with("<|vision_start|>images/s0.png<|vision_end|>"));
    }

    #[test]
    fn cot_prompt_three_items_and_unknown() {
        let s = scene("s1", &[Some("A"), None, Some("C")]);
        let p = render_cot_prompt(&s, 2).unwrap();
        assert!(p.contains("This image shows A ("));
        assert!(p.contains(", [Unknown] ("));
        assert!(p.contains("), and C ("));
        assert!(p.contains("The bounding box of C is"));
        assert!(render_cot_prompt(&s, 3).is_err());
    }

    fn cots(scenes: &[SceneRecord]) -> Vec<CotText> {
        scenes
            .iter()
            .flat_map(|s| {
                (0..s.placements.len()).map(move |i| CotText {
                    scene_id: s.scene_id.clone(),
                    target_index: i,
                    cot: format!("reasoning about {} #{i}", s.scene_id),
                })
            })
            .collect()
    }

    #[test]
    fn sft_cardinality_and_answer_space() {
        let scenes: Vec<_> = (0..3).map(|i| scene(&format!("s{i}"), &[Some("A"), Some("B")])).collect();
        let records = pack_sft_records(&scenes, &cots(&scenes)).unwrap();
        assert_eq!(records.len(), 6);
        for r in &records {
            assert!(r.answer.iter().all(|c| (0..=1000).contains(c)));
            assert!(r.response.starts_with("<think>reasoning"));
        }
        assert_eq!(records[1].prompt, "Find and give the bounding box of B");
    }

    #[test]
    fn sft_round_trip_through_manifest() {
        let scenes = vec![scene("s0", &[Some("A"), Some("B")])];
        let records = pack_sft_records(&scenes, &cots(&scenes)).unwrap();
        let text = manifest::to_jsonl(&records).unwrap();
        let back: Vec<SftRecord> = manifest::parse_jsonl(&text).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn sft_missing_and_stray_texts() {
        let scenes = vec![scene("s0", &[Some("A"), Some("B")])];
        let mut texts = cots(&scenes);
        let last = texts.pop().unwrap();
        assert!(matches!(
            pack_sft_records(&scenes, &texts),
            Err(Error::MissingCot { target: 1, .. })
        ));
        texts.push(last.clone());
        texts.push(CotText {
            target_index: 9,
            ..last
        });
        assert!(pack_sft_records(&scenes, &texts).is_err());
    }

    #[test]
    fn unlabeled_placements_are_not_targets() {
        let scenes = vec![scene("s0", &[Some("A"), None])];
        let texts: Vec<_> = cots(&scenes).into_iter().take(1).collect();
        assert_eq!(pack_sft_records(&scenes, &texts).unwrap().len(), 1);
    }
}
