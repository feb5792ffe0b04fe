use std::collections::BTreeSet;
use std::path::Path;

use image::{Rgb, RgbImage};
use kvg_core::data_engine::{partition, synthesize, validate_scene, Layout, SceneRecord, SourceRecord, SynthConfig};
use kvg_core::manifest::to_jsonl;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CATEGORIES: [&str; 5] = ["aircraft", "birds", "cars", "dogs", "flowers"];

/// Writes `per_category` small PNGs per category and returns their records.
fn source_pool(dir: &Path, per_category: usize) -> Vec<SourceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut pool = Vec::new();
    for cat in CATEGORIES {
        for i in 0..per_category {
            let (w, h) = (rng.gen_range(30..90), rng.gen_range(30..90));
            let x1 = rng.gen_range(0..w / 2);
            let y1 = rng.gen_range(0..h / 2);
            let bbox = [x1, y1, rng.gen_range(x1 + 4..=w), rng.gen_range(y1 + 4..=h)];
            let shade = rng.gen::<[u8; 3]>();
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let inside = (x as i64) >= bbox[0] && (x as i64) < bbox[2] && (y as i64) >= bbox[1] && (y as i64) < bbox[3];
                if inside { Rgb(shade) } else { Rgb([255, 255, 255]) }
            });
            let rel = format!("src/{cat}-{i:03}.png");
            std::fs::create_dir_all(dir.join("src")).unwrap();
            img.save(dir.join(&rel)).unwrap();
            pool.push(SourceRecord {
                image_ref: rel,
                width: w,
                height: h,
                // a few entities appear in two images so distinctness is exercised
                entity: format!("{cat} species {}", i % (per_category - 3)),
                category: cat.to_string(),
                bbox,
            });
        }
    }
    pool
}

fn corpus_config() -> SynthConfig {
    SynthConfig { passes: 8, max_scenes: Some(200), ..SynthConfig::default() }
}

/// Nearest integer to `n * v / d`, halves rounded up.
fn scale_round(n: i64, d: i64, v: i64) -> i64 {
    let num = 2 * n as i128 * v as i128 + d as i128;
    num.div_euclid(2 * d as i128) as i64
}

fn disjoint(a: [i64; 4], b: [i64; 4]) -> bool {
    a[2] <= b[0] || b[2] <= a[0] || a[3] <= b[1] || b[3] <= a[1]
}

fn check_corpus(scenes: &[SceneRecord]) {
    assert_eq!(scenes.len(), 200);
    let layouts: BTreeSet<_> = scenes.iter().map(|s| s.layout).collect();
    assert_eq!(layouts.len(), Layout::ALL.len());
    for s in scenes {
        validate_scene(s).unwrap();
        let entities: Vec<_> = s.placements.iter().filter_map(|p| p.entity.clone()).collect();
        let distinct: BTreeSet<_> = entities.iter().collect();
        assert_eq!(distinct.len(), entities.len(), "{}", s.scene_id);
        assert!(entities.len() >= 2);
        for p in &s.placements {
            let sx = p.transform.scale_x();
            let sy = p.transform.scale_y();
            let (ox, oy) = p.transform.offset();
            let [x1, y1, x2, y2] = p.source_bbox;
            let expect = [
                scale_round(*sx.numer(), *sx.denom(), x1) + ox,
                scale_round(*sy.numer(), *sy.denom(), y1) + oy,
                scale_round(*sx.numer(), *sx.denom(), x2) + ox,
                scale_round(*sy.numer(), *sy.denom(), y2) + oy,
            ];
            assert_eq!(p.bbox, expect, "{}", s.scene_id);
            assert!(p.bbox[0] >= 0 && p.bbox[1] >= 0 && p.bbox[2] <= s.width && p.bbox[3] <= s.height);
        }
        if s.layout != Layout::Random || s.layout_fallback {
            for (i, a) in s.placements.iter().enumerate() {
                for b in &s.placements[i + 1..] {
                    assert!(disjoint(a.region, b.region), "{}", s.scene_id);
                    assert!(disjoint(a.bbox, b.bbox), "{}", s.scene_id);
                }
            }
        }
    }
}

#[test]
fn synthesized_corpus_is_consistent_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let pool = source_pool(dir.path(), 24);
    let cfg = corpus_config();
    let first = synthesize(&pool, &cfg, 77, dir.path()).unwrap();
    let second = synthesize(&pool, &cfg, 77, dir.path()).unwrap();
    let scenes: Vec<SceneRecord> = first.iter().map(|(s, _)| s.clone()).collect();
    check_corpus(&scenes);

    let (a1, a2) = partition(&scenes, 0.8, 77).unwrap();
    let again: Vec<SceneRecord> = second.iter().map(|(s, _)| s.clone()).collect();
    let (b1, b2) = partition(&again, 0.8, 77).unwrap();
    assert_eq!(to_jsonl(&a1).unwrap().into_bytes(), to_jsonl(&b1).unwrap().into_bytes());
    assert_eq!(to_jsonl(&a2).unwrap().into_bytes(), to_jsonl(&b2).unwrap().into_bytes());
    assert_eq!(a1.len(), 160);
    for ((_, x), (_, y)) in first.iter().zip(&second) {
        assert_eq!(x.as_raw(), y.as_raw());
    }

    let ids1: BTreeSet<_> = a1.iter().map(|s| &s.scene_id).collect();
    assert!(a2.iter().all(|s| !ids1.contains(&s.scene_id)));

    let other = synthesize(&pool, &cfg, 78, dir.path()).unwrap();
    let other: Vec<SceneRecord> = other.into_iter().map(|(s, _)| s).collect();
    assert_ne!(to_jsonl(&scenes).unwrap(), to_jsonl(&other).unwrap());
}

#[test]
fn pasted_pixels_land_inside_the_recorded_boxes() {
    let dir = tempfile::tempdir().unwrap();
    let pool = source_pool(dir.path(), 8);
    let cfg = SynthConfig { layouts: vec![Layout::Horizontal, Layout::Grid], max_scenes: Some(10), ..SynthConfig::default() };
    for (scene, img) in synthesize(&pool, &cfg, 5, dir.path()).unwrap() {
        assert_eq!((img.width() as i64, img.height() as i64), (scene.width, scene.height));
        for p in &scene.placements {
            let [x1, y1, x2, y2] = p.bbox;
            let (cx, cy) = ((x1 + x2) / 2, (y1 + y2) / 2);
            assert_ne!(*img.get_pixel(cx as u32, cy as u32), Rgb([255, 255, 255]), "{}", scene.scene_id);
        }
    }
}
