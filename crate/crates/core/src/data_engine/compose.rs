use std::collections::BTreeSet;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use num_rational::Ratio;
use rand::Rng as _;

use super::{Layout, Placement, SceneRecord, SourceRecord, MIN_GROUP};
use crate::error::{Error, Result};
use crate::geometry::{AffineTransform, BBox};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanvasPolicy {
    pub background: [u8; 3],
    pub max_rejection_attempts: usize,
}

impl Default for CanvasPolicy {
    fn default() -> Self {
        CanvasPolicy {
            background: [128, 128, 128],
            max_rejection_attempts: 100,
        }
    }
}

/// Where each source goes on the canvas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutPlan {
    pub layout: Layout,
    pub fallback: bool,
    pub width: i64,
    pub height: i64,
    pub transforms: Vec<AffineTransform>,
}

impl LayoutPlan {
    /// Canvas area covered by source `i` of size `(w, h)`.
    pub fn region(&self, i: usize, (w, h): (i64, i64)) -> [i64; 4] {
        self.transforms[i].map_coords([0, 0, w, h])
    }
}

pub fn grid_shape(k: usize) -> (usize, usize) {
    let mut cols = (k as f64).sqrt().ceil() as usize;
    // guard against float error on perfect squares
    while cols * cols < k {
        cols += 1;
    }
    while cols > 1 && (cols - 1) * (cols - 1) >= k {
        cols -= 1;
    }
    let rows = k.div_ceil(cols);
    (cols, rows)
}

/// Computes the paste transforms for sources of the given `(width, height)`.
///
/// Horizontal scales everything to the smallest height, vertical to the
/// smallest width, and grid fits each source into a cell of the smallest
/// width by the smallest height. Random uses grid scaling on a canvas one
/// cell larger in each direction and falls back to the grid when it cannot
/// place a source without overlap.
pub fn plan_layout(
    sizes: &[(i64, i64)],
    layout: Layout,
    policy: &CanvasPolicy,
    rng: &mut seed::Rng,
) -> Result<LayoutPlan> {
    if sizes.len() < MIN_GROUP {
        return Err(Error::InvalidArgument(format!(
            "a scene needs at least {MIN_GROUP} sources, got {}",
            sizes.len()
        )));
    }
    if let Some(&(w, h)) = sizes.iter().find(|(w, h)| *w <= 0 || *h <= 0) {
        return Err(Error::InvalidArgument(format!("empty source image {w}x{h}")));
    }
    match layout {
        Layout::Horizontal => {
            let target = sizes.iter().map(|s| s.1).min().expect("non-empty");
            let mut x = 0;
            let mut transforms = Vec::with_capacity(sizes.len());
            for &(w, h) in sizes {
                let t = AffineTransform::uniform(Ratio::new(target, h), x, 0);
                x = t.map_x(w);
                transforms.push(t);
            }
            Ok(LayoutPlan {
                layout,
                fallback: false,
                width: x,
                height: target,
                transforms,
            })
        }
        Layout::Vertical => {
            let target = sizes.iter().map(|s| s.0).min().expect("non-empty");
            let mut y = 0;
            let mut transforms = Vec::with_capacity(sizes.len());
            for &(w, h) in sizes {
                let t = AffineTransform::uniform(Ratio::new(target, w), 0, y);
                y = t.map_y(h);
                transforms.push(t);
            }
            Ok(LayoutPlan {
                layout,
                fallback: false,
                width: target,
                height: y,
                transforms,
            })
        }
        Layout::Grid => Ok(grid_plan(sizes, false)),
        Layout::Random => random_plan(sizes, policy, rng),
    }
}

fn cell_dims(sizes: &[(i64, i64)]) -> (i64, i64) {
    (
        sizes.iter().map(|s| s.0).min().expect("non-empty"),
        sizes.iter().map(|s| s.1).min().expect("non-empty"),
    )
}

fn fit_scale((w, h): (i64, i64), (cw, ch): (i64, i64)) -> Ratio<i64> {
    Ratio::new(cw, w).min(Ratio::new(ch, h))
}

fn grid_plan(sizes: &[(i64, i64)], fallback: bool) -> LayoutPlan {
    let (cols, rows) = grid_shape(sizes.len());
    let cell = cell_dims(sizes);
    let transforms = sizes
        .iter()
        .enumerate()
        .map(|(i, &size)| {
            let (c, r) = ((i % cols) as i64, (i / cols) as i64);
            AffineTransform::uniform(fit_scale(size, cell), c * cell.0, r * cell.1)
        })
        .collect();
    LayoutPlan {
        layout: Layout::Grid,
        fallback,
        width: cols as i64 * cell.0,
        height: rows as i64 * cell.1,
        transforms,
    }
}

fn random_plan(sizes: &[(i64, i64)], policy: &CanvasPolicy, rng: &mut seed::Rng) -> Result<LayoutPlan> {
    let (cols, rows) = grid_shape(sizes.len());
    let cell = cell_dims(sizes);
    let width = (cols as i64 + 1) * cell.0;
    let height = (rows as i64 + 1) * cell.1;

    let mut transforms = Vec::with_capacity(sizes.len());
    let mut regions: Vec<BBox> = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let scale = fit_scale(size, cell);
        let scaled = AffineTransform::uniform(scale, 0, 0).map_coords([0, 0, size.0, size.1]);
        let (sw, sh) = (scaled[2], scaled[3]);
        let mut placed = false;
        for _ in 0..policy.max_rejection_attempts {
            let x = rng.gen_range(0..=width - sw);
            let y = rng.gen_range(0..=height - sh);
            let region = BBox::pixel([x, y, x + sw, y + sh], width, height)?;
            if regions.iter().all(|r| !r.overlaps(&region)) {
                transforms.push(AffineTransform::uniform(scale, x, y));
                regions.push(region);
                placed = true;
                break;
            }
        }
        if !placed {
            return Ok(grid_plan(sizes, true));
        }
    }
    Ok(LayoutPlan {
        layout: Layout::Random,
        fallback: false,
        width,
        height,
        transforms,
    })
}

/// Pastes every source onto a background-filled canvas following `plan`.
pub fn render_scene(plan: &LayoutPlan, images: &[RgbImage], background: [u8; 3]) -> RgbImage {
    let mut canvas = RgbImage::from_pixel(plan.width as u32, plan.height as u32, Rgb(background));
    for (i, img) in images.iter().enumerate() {
        let [x1, y1, x2, y2] = plan.region(i, (i64::from(img.width()), i64::from(img.height())));
        let (w, h) = ((x2 - x1) as u32, (y2 - y1) as u32);
        if (w, h) == img.dimensions() {
            imageops::replace(&mut canvas, img, x1, y1);
        } else {
            let scaled = imageops::resize(img, w, h, FilterType::Triangle);
            imageops::replace(&mut canvas, &scaled, x1, y1);
        }
    }
    canvas
}

/// Lays out `group`, rewrites every annotation through its paste transform
/// and renders the composite. `images[i]` is the decoded image of `group[i]`.
pub fn compose_scene(
    scene_id: &str,
    image_ref: &str,
    group: &[SourceRecord],
    images: &[RgbImage],
    layout: Layout,
    policy: &CanvasPolicy,
    rng_seed: u64,
) -> Result<(SceneRecord, RgbImage)> {
    if group.len() != images.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sources but {} images",
            group.len(),
            images.len()
        )));
    }
    let category = &group
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty group".to_string()))?
        .category;
    let mut entities = BTreeSet::new();
    for s in group {
        s.validate()?;
        if &s.category != category {
            return Err(Error::InvalidArgument(format!(
                "group mixes categories `{category}` and `{}`",
                s.category
            )));
        }
        if !entities.insert(s.entity.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "entity `{}` appears twice in one group",
                s.entity
            )));
        }
    }

    let sizes: Vec<(i64, i64)> = group.iter().map(|s| (s.width, s.height)).collect();
    let mut rng = seed::rng(rng_seed, &[]);
    let plan = plan_layout(&sizes, layout, policy, &mut rng)?;

    let mut placements = Vec::with_capacity(group.len());
    for (i, s) in group.iter().enumerate() {
        let t = plan.transforms[i];
        let bbox = s
            .bbox()?
            .apply_transform(&t)?
            .with_space(crate::geometry::CoordSpace::Pixel {
                width: plan.width,
                height: plan.height,
            })?;
        placements.push(Placement {
            entity: Some(s.entity.clone()),
            source_ref: s.image_ref.clone(),
            source_width: s.width,
            source_height: s.height,
            source_bbox: s.bbox,
            transform: t,
            bbox: bbox.coords(),
            region: plan.region(i, sizes[i]),
        });
    }

    let scene = SceneRecord {
        scene_id: scene_id.to_string(),
        image_ref: image_ref.to_string(),
        width: plan.width,
        height: plan.height,
        category: category.clone(),
        layout: plan.layout,
        layout_fallback: plan.fallback,
        split: None,
        placements,
    };
    let raster = render_scene(&plan, images, policy.background);
    Ok((scene, raster))
}

/// Checks every structural invariant of a synthesized scene.
pub fn validate_scene(scene: &SceneRecord) -> Result<()> {
    let fail = |msg: String| Err(Error::Invariant(format!("scene `{}`: {msg}", scene.scene_id)));
    if scene.placements.len() < MIN_GROUP {
        return fail(format!("{} placements", scene.placements.len()));
    }
    let mut names = BTreeSet::new();
    let mut regions = Vec::new();
    for (i, p) in scene.placements.iter().enumerate() {
        if let Some(name) = &p.entity {
            if !names.insert(name.as_str()) {
                return fail(format!("entity `{name}` repeated"));
            }
        }
        let src = BBox::pixel(p.source_bbox, p.source_width, p.source_height)?;
        let derived = src.apply_transform(&p.transform)?;
        if derived.coords() != p.bbox {
            return fail(format!(
                "placement {i} bbox {:?} does not match transformed source {:?}",
                p.bbox,
                derived.coords()
            ));
        }
        BBox::pixel(p.bbox, scene.width, scene.height)?;
        let region = BBox::pixel(p.region, scene.width, scene.height)?;
        if region.coords() != p.transform.map_coords([0, 0, p.source_width, p.source_height]) {
            return fail(format!("placement {i} region does not match its transform"));
        }
        regions.push(region);
    }
    for i in 0..regions.len() {
        for j in i + 1..regions.len() {
            if regions[i].overlaps(&regions[j]) {
                return fail(format!("placements {i} and {j} overlap"));
            }
        }
    }
    Ok(())
}
