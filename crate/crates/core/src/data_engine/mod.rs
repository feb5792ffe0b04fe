//! Composite-scene synthesis from single-entity annotated sources.
//!
//! Sources of one category are drawn in groups of `k` distinct entities
//! without replacement, pasted onto a shared canvas with one of four
//! layouts, and their boxes rewritten through the exact paste transform.

mod compose;
mod prompts;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AffineTransform, BBox};
use crate::seed;

pub use compose::{compose_scene, plan_layout, render_scene, validate_scene, CanvasPolicy, LayoutPlan};
pub use prompts::{
    pack_sft_records, render_cot_prompt, render_grounding_prompt, CotText, SftRecord,
    UNKNOWN_ENTITY,
};

pub const MIN_GROUP: usize = 2;
pub const MAX_GROUP: usize = 6;

/// One single-entity annotated image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub image_ref: String,
    pub width: i64,
    pub height: i64,
    pub entity: String,
    pub category: String,
    pub bbox: [i64; 4],
}

impl SourceRecord {
    pub fn bbox(&self) -> Result<BBox> {
        BBox::pixel(self.bbox, self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entity.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "source `{}` has an empty entity",
                self.image_ref
            )));
        }
        if self.category.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "source `{}` has an empty category",
                self.image_ref
            )));
        }
        self.bbox().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Horizontal,
    Vertical,
    Grid,
    Random,
}

impl Layout {
    pub const ALL: [Layout; 4] = [
        Layout::Horizontal,
        Layout::Vertical,
        Layout::Grid,
        Layout::Random,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Stage1,
    Stage2,
    HeldOut,
}

/// A source pasted into a composite canvas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    /// `None` for an unlabeled object.
    pub entity: Option<String>,
    pub source_ref: String,
    pub source_width: i64,
    pub source_height: i64,
    pub source_bbox: [i64; 4],
    pub transform: AffineTransform,
    /// Entity box in scene pixel coordinates.
    pub bbox: [i64; 4],
    /// Canvas area covered by the pasted source image.
    pub region: [i64; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub image_ref: String,
    pub width: i64,
    pub height: i64,
    pub category: String,
    pub layout: Layout,
    /// Set when a random layout exhausted its attempts and fell back to a grid.
    #[serde(default)]
    pub layout_fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub placements: Vec<Placement>,
}

impl SceneRecord {
    pub fn placement_bbox(&self, index: usize) -> Result<BBox> {
        let p = self.placements.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "target index {index} out of range for scene `{}` with {} placements",
                self.scene_id,
                self.placements.len()
            ))
        })?;
        BBox::pixel(p.bbox, self.width, self.height)
    }
}

/// Distribution of group sizes over `2..=6`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SelectionDistribution {
    weights: [f64; MAX_GROUP - MIN_GROUP + 1],
}

impl TryFrom<Vec<f64>> for SelectionDistribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        SelectionDistribution::new(&v)
    }
}

impl From<SelectionDistribution> for Vec<f64> {
    fn from(d: SelectionDistribution) -> Self {
        d.weights.to_vec()
    }
}

impl Default for SelectionDistribution {
    fn default() -> Self {
        Self::uniform()
    }
}

impl SelectionDistribution {
    /// Weights for k = 2, 3, 4, 5, 6 in order; normalized on construction.
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.len() != MAX_GROUP - MIN_GROUP + 1 {
            return Err(Error::InvalidArgument(format!(
                "p_sel needs {} weights for k in {MIN_GROUP}..={MAX_GROUP}, got {}",
                MAX_GROUP - MIN_GROUP + 1,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "p_sel weights must be finite and nonnegative".to_string(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument(
                "p_sel needs at least one positive weight".to_string(),
            ));
        }
        let mut w = [0.0; MAX_GROUP - MIN_GROUP + 1];
        for (dst, src) in w.iter_mut().zip(weights) {
            *dst = src / total;
        }
        Ok(SelectionDistribution { weights: w })
    }

    pub fn uniform() -> Self {
        Self::new(&[1.0; MAX_GROUP - MIN_GROUP + 1]).expect("uniform weights are valid")
    }

    pub fn point_mass(k: usize) -> Result<Self> {
        if !(MIN_GROUP..=MAX_GROUP).contains(&k) {
            return Err(Error::InvalidArgument(format!("k={k} outside 2..=6")));
        }
        let mut w = [0.0; MAX_GROUP - MIN_GROUP + 1];
        w[k - MIN_GROUP] = 1.0;
        Self::new(&w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample(&self, rng: &mut seed::Rng) -> usize {
        let dist = WeightedIndex::new(self.weights).expect("validated weights");
        MIN_GROUP + dist.sample(rng)
    }
}

/// Draws entity-exclusive groups from one category without replacement.
pub struct GroupSampler<'a> {
    remaining: Vec<&'a SourceRecord>,
    p_sel: &'a SelectionDistribution,
}

impl<'a> GroupSampler<'a> {
    pub fn new(pool: impl IntoIterator<Item = &'a SourceRecord>, p_sel: &'a SelectionDistribution) -> Self {
        GroupSampler {
            remaining: pool.into_iter().collect(),
            p_sel,
        }
    }

    pub fn remaining(&self) -> usize {
        self.remaining.len()
    }

    /// Next group, or `None` once fewer than two distinct entities remain
    /// (the end of the pass).
    pub fn next_group(&mut self, rng: &mut seed::Rng) -> Option<Vec<SourceRecord>> {
        let entities: BTreeSet<&str> = self.remaining.iter().map(|s| s.entity.as_str()).collect();
        if entities.len() < MIN_GROUP {
            return None;
        }
        let k = self.p_sel.sample(rng).min(entities.len());
        let entities: Vec<&str> = entities.into_iter().collect();
        let chosen: Vec<&str> = entities.choose_multiple(rng, k).copied().collect();

        let mut group = Vec::with_capacity(k);
        for entity in chosen {
            let candidates: Vec<usize> = (0..self.remaining.len())
                .filter(|&i| self.remaining[i].entity == entity)
                .collect();
            let pick = candidates[rng.gen_range(0..candidates.len())];
            group.push(self.remaining.remove(pick).clone());
        }
        Some(group)
    }
}

/// Draws one group from `pool`. The category is chosen uniformly among
/// those with at least two distinct entities; returns `None` if there is none.
pub fn sample_group(
    pool: &[SourceRecord],
    p_sel: &SelectionDistribution,
    rng_seed: u64,
) -> Option<Vec<SourceRecord>> {
    let by_cat = group_by_category(pool);
    let eligible: Vec<&Vec<&SourceRecord>> = by_cat
        .values()
        .filter(|v| v.iter().map(|s| &s.entity).collect::<BTreeSet<_>>().len() >= MIN_GROUP)
        .collect();
    let mut rng = seed::rng(rng_seed, &[]);
    let members = eligible.choose(&mut rng)?;
    GroupSampler::new(members.iter().copied(), p_sel).next_group(&mut rng)
}

fn group_by_category(pool: &[SourceRecord]) -> BTreeMap<&str, Vec<&SourceRecord>> {
    let mut by_cat: BTreeMap<&str, Vec<&SourceRecord>> = BTreeMap::new();
    for s in pool {
        by_cat.entry(s.category.as_str()).or_default().push(s);
    }
    by_cat
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub layouts: Vec<Layout>,
    pub p_sel: SelectionDistribution,
    pub stage1_fraction: f64,
    pub background: [u8; 3],
    pub max_rejection_attempts: usize,
    /// Full passes over each category pool.
    pub passes: usize,
    pub max_scenes: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            layouts: Layout::ALL.to_vec(),
            p_sel: SelectionDistribution::uniform(),
            stage1_fraction: 0.8,
            background: [128, 128, 128],
            max_rejection_attempts: 100,
            passes: 1,
            max_scenes: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layouts.is_empty() {
            return Err(Error::InvalidArgument("no layouts enabled".to_string()));
        }
        if !(self.stage1_fraction > 0.0 && self.stage1_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "stage1_fraction must be in (0, 1), got {}",
                self.stage1_fraction
            )));
        }
        if self.passes == 0 {
            return Err(Error::InvalidArgument("passes must be positive".to_string()));
        }
        Ok(())
    }

    pub fn canvas_policy(&self) -> CanvasPolicy {
        CanvasPolicy {
            background: self.background,
            max_rejection_attempts: self.max_rejection_attempts,
        }
    }
}

/// Sampling stage of synthesis: every group that will become a scene, in
/// scene order.
pub fn plan_groups(pool: &[SourceRecord], cfg: &SynthConfig, seed_value: u64) -> Result<Vec<Vec<SourceRecord>>> {
    cfg.validate()?;
    for s in pool {
        s.validate()?;
    }
    let by_cat = group_by_category(pool);
    let mut groups = Vec::new();
    'passes: for pass in 0..cfg.passes {
        for (cat, members) in &by_cat {
            let mut rng = seed::rng(seed_value, &[1, pass as u64, seed::stable_hash(cat)]);
            let mut sampler = GroupSampler::new(members.iter().copied(), &cfg.p_sel);
            while let Some(g) = sampler.next_group(&mut rng) {
                if cfg.max_scenes.is_some_and(|m| groups.len() >= m) {
                    break 'passes;
                }
                groups.push(g);
            }
        }
    }
    Ok(groups)
}

pub fn scene_id(index: usize) -> String {
    format!("scene-{index:06}")
}

/// Samples groups and composes every scene. Scenes are composed in parallel,
/// each with its own derived seed, so output order and content do not depend
/// on the thread count. Relative source image refs resolve against `base_dir`.
pub fn synthesize(
    pool: &[SourceRecord],
    cfg: &SynthConfig,
    seed_value: u64,
    base_dir: &Path,
) -> Result<Vec<(SceneRecord, image::RgbImage)>> {
    let groups = plan_groups(pool, cfg, seed_value)?;
    let policy = cfg.canvas_policy();
    groups
        .par_iter()
        .enumerate()
        .map(|(i, group)| {
            let mut rng = seed::rng(seed_value, &[2, i as u64]);
            let layout = *cfg.layouts.choose(&mut rng).expect("validated non-empty");
            let id = scene_id(i);
            let image_ref = format!("images/{id}.png");
            let images = group
                .iter()
                .map(|s| load_source(s, base_dir))
                .collect::<Result<Vec<_>>>()?;
            compose_scene(&id, &image_ref, group, &images, layout, &policy, rng.gen())
        })
        .collect()
}

pub fn resolve_ref(image_ref: &str, base_dir: &Path) -> PathBuf {
    let p = Path::new(image_ref);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

pub fn load_source(src: &SourceRecord, base_dir: &Path) -> Result<image::RgbImage> {
    let path = resolve_ref(&src.image_ref, base_dir);
    let img = image::open(&path)
        .map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?
        .to_rgb8();
    if i64::from(img.width()) != src.width || i64::from(img.height()) != src.height {
        return Err(Error::Manifest {
            path,
            line: 0,
            message: format!(
                "image is {}x{} but the manifest says {}x{}",
                img.width(),
                img.height(),
                src.width,
                src.height
            ),
        });
    }
    Ok(img)
}

/// Disjoint, exhaustive, seeded split. Each side keeps the input order.
pub fn partition(
    scenes: &[SceneRecord],
    stage1_fraction: f64,
    rng_seed: u64,
) -> Result<(Vec<SceneRecord>, Vec<SceneRecord>)> {
    if !(stage1_fraction > 0.0 && stage1_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "stage1_fraction must be in (0, 1), got {stage1_fraction}"
        )));
    }
    let n = scenes.len();
    let n1 = ((n as f64) * stage1_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(rng_seed, &[3]));
    let mut in_stage1 = vec![false; n];
    for &i in &order[..n1.min(n)] {
        in_stage1[i] = true;
    }
    let mut s1 = Vec::with_capacity(n1);
    let mut s2 = Vec::with_capacity(n - n1);
    for (scene, first) in scenes.iter().zip(in_stage1) {
        let mut scene = scene.clone();
        if first {
            scene.split = Some(Split::Stage1);
            s1.push(scene);
        } else {
            scene.split = Some(Split::Stage2);
            s2.push(scene);
        }
    }
    Ok((s1, s2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src(entity: &str, category: &str, i: usize) -> SourceRecord {
        SourceRecord {
            image_ref: format!("{category}/{entity}-{i}.png"),
            width: 100,
            height: 80,
            entity: entity.to_string(),
            category: category.to_string(),
            bbox: [10, 10, 60, 50],
        }
    }

    fn distinct(group: &[SourceRecord]) -> bool {
        group.iter().map(|s| &s.entity).collect::<BTreeSet<_>>().len() == group.len()
    }

    #[test]
    fn forced_k_returns_two_distinct() {
        let pool: Vec<_> = (0..6).map(|i| src(&format!("jet{i}"), "aircraft", i)).collect();
        let g = sample_group(&pool, &SelectionDistribution::point_mass(2).unwrap(), 7).unwrap();
        assert_eq!(g.len(), 2);
        assert!(distinct(&g));
        assert!(g.iter().all(|s| s.category == "aircraft"));
    }

    #[test]
    fn duplicate_entities_never_paired() {
        let pool = vec![src("A330", "aircraft", 0), src("A330", "aircraft", 1), src("B747", "aircraft", 2)];
        for seed in 0..200 {
            let g = sample_group(&pool, &SelectionDistribution::uniform(), seed).unwrap();
            assert_eq!(g.len(), 2);
            assert!(distinct(&g));
        }
    }

    #[test]
    fn k_capped_by_distinct_entities() {
        let pool: Vec<_> = (0..3).map(|i| src(&format!("dog{i}"), "dogs", i)).collect();
        let p = SelectionDistribution::uniform();
        for seed in 0..1000 {
            let g = sample_group(&pool, &p, seed).unwrap();
            assert!((2..=3).contains(&g.len()));
        }
    }

    #[test]
    fn exhausted_pool_ends_pass() {
        let pool = vec![src("A", "c", 0), src("A", "c", 1)];
        assert!(sample_group(&pool, &SelectionDistribution::uniform(), 0).is_none());
        assert!(sample_group(&[], &SelectionDistribution::uniform(), 0).is_none());
    }

    #[test]
    fn sampler_uses_each_source_once_per_pass() {
        let pool: Vec<_> = (0..20).map(|i| src(&format!("e{}", i % 7), "c", i)).collect();
        let p = SelectionDistribution::uniform();
        let mut sampler = GroupSampler::new(pool.iter(), &p);
        let mut rng = seed::rng(5, &[]);
        let mut seen = BTreeSet::new();
        while let Some(g) = sampler.next_group(&mut rng) {
            assert!(distinct(&g));
            for s in g {
                assert!(seen.insert(s.image_ref));
            }
        }
        let left_entities: BTreeSet<_> = pool
            .iter()
            .filter(|s| !seen.contains(&s.image_ref))
            .map(|s| &s.entity)
            .collect();
        assert!(left_entities.len() < 2);
    }

    #[test]
    fn selection_distribution_validation() {
        assert!(SelectionDistribution::new(&[0.0; 5]).is_err());
        assert!(SelectionDistribution::new(&[1.0; 4]).is_err());
        assert!(SelectionDistribution::new(&[1.0, -1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(SelectionDistribution::point_mass(7).is_err());
        let d = SelectionDistribution::new(&[2.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(d.weights(), &[0.5, 0.0, 0.0, 0.0, 0.5]);
        let mut rng = seed::rng(1, &[]);
        for _ in 0..200 {
            let k = d.sample(&mut rng);
            assert!(k == 2 || k == 6);
        }
    }

    fn dummy_scene(i: usize) -> SceneRecord {
        SceneRecord {
            scene_id: scene_id(i),
            image_ref: String::new(),
            width: 10,
            height: 10,
            category: "c".into(),
            layout: Layout::Grid,
            layout_fallback: false,
            split: None,
            placements: Vec::new(),
        }
    }

    #[test]
    fn partition_examples() {
        let scenes: Vec<_> = (0..10).map(dummy_scene).collect();
        let (a, b) = partition(&scenes, 0.8, 1).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let ids_a: BTreeSet<_> = a.iter().map(|s| &s.scene_id).collect();
        assert!(b.iter().all(|s| !ids_a.contains(&s.scene_id)));
        assert!(a.iter().all(|s| s.split == Some(Split::Stage1)));
        assert!(b.iter().all(|s| s.split == Some(Split::Stage2)));
        assert_eq!(partition(&scenes, 0.8, 1).unwrap(), (a, b));
        assert!(partition(&scenes, 1.0, 1).is_err());
        assert!(partition(&scenes, 0.0, 1).is_err());
    }

    #[test]
    fn partition_at_training_scale() {
        // 25K stage-1 scenes plus a stage-2 pool large enough to filter down to 4K
        let scenes: Vec<_> = (0..31_250).map(dummy_scene).collect();
        let (a, b) = partition(&scenes, 0.8, 42).unwrap();
        assert_eq!(a.len(), 25_000);
        assert_eq!(b.len(), 6_250);
        assert!(b.len() >= 4_000);
    }
}
