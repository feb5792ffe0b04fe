use kvg_core::kl_analysis::{
    aggregate, segment_divergence, token_kl, SparseDist, TokenDistributionTrace, TracePosition,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dist(rng: &mut ChaCha8Rng) -> SparseDist {
    let k = rng.gen_range(1..8);
    let mut d = SparseDist::new();
    for _ in 0..k {
        *d.entry(rng.gen_range(0..20)).or_insert(0.0) += rng.gen_range(0.01..1.0);
    }
    let z: f64 = d.values().sum();
    d.values_mut().for_each(|v| *v /= z);
    d
}

fn random_trace(rng: &mut ChaCha8Rng) -> TokenDistributionTrace {
    let len = rng.gen_range(1..40);
    let positions = (0..len)
        .map(|_| TracePosition { p: random_dist(rng), q: random_dist(rng) })
        .collect();
    TokenDistributionTrace::new(positions, rng.gen_range(0..=len), false).unwrap()
}

#[test]
fn kl_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let t = random_trace(&mut rng);
        assert!(t.per_position_kl().iter().all(|&k| k >= 0.0));
        let s = segment_divergence(&t);
        assert!(s.cot_mean_kl.unwrap_or(0.0) >= 0.0);
        assert!(s.answer_mean_kl.unwrap_or(0.0) >= 0.0);
    }
}

#[test]
fn identical_traces_have_zero_divergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let positions: Vec<TracePosition> = (0..10)
            .map(|_| {
                let d = random_dist(&mut rng);
                TracePosition { p: d.clone(), q: d }
            })
            .collect();
        let s = segment_divergence(&TokenDistributionTrace::new(positions, 6, false).unwrap());
        assert_eq!(s.cot_mean_kl, Some(0.0));
        assert_eq!(s.answer_mean_kl, Some(0.0));
    }
}

#[test]
fn duplicating_cot_positions_keeps_cot_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let t = random_trace(&mut rng);
        let split = t.split_index();
        let (cot, answer) = t.positions().split_at(split);
        let mut doubled: Vec<TracePosition> = cot.iter().flat_map(|p| [p.clone(), p.clone()]).collect();
        doubled.extend_from_slice(answer);
        let d = TokenDistributionTrace::new(doubled, 2 * split, false).unwrap();
        let (a, b) = (segment_divergence(&t), segment_divergence(&d));
        match (a.cot_mean_kl, b.cot_mean_kl) {
            (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-12 * x.max(1.0)),
            (None, None) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(a.answer_mean_kl, b.answer_mean_kl);
    }
}

#[test]
fn whole_mean_is_weighted_segment_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let t = random_trace(&mut rng);
        let kl = t.per_position_kl();
        let whole = kl.iter().sum::<f64>() / kl.len() as f64;
        let s = segment_divergence(&t);
        let weighted = (s.cot_mean_kl.unwrap_or(0.0) * s.cot_tokens as f64
            + s.answer_mean_kl.unwrap_or(0.0) * s.answer_tokens as f64)
            / (s.cot_tokens + s.answer_tokens) as f64;
        assert!((whole - weighted).abs() <= 1e-12, "{whole} vs {weighted}");
    }
}

#[test]
fn micro_mean_pools_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let traces: Vec<_> = (0..30).map(|_| random_trace(&mut rng)).collect();
    let results: Vec<_> = traces.iter().map(segment_divergence).collect();
    let agg = aggregate(&results);
    let pooled: Vec<f64> = traces.iter().flat_map(|t| t.per_position_kl()[..t.split_index()].to_vec()).collect();
    let micro = pooled.iter().sum::<f64>() / pooled.len() as f64;
    assert!((agg.cot_micro.unwrap() - micro).abs() < 1e-12);
}

#[test]
fn token_kl_against_direct_sum() {
    // disjoint-free supports: smoothing only shifts mass by ~1e-10
    let p = SparseDist::from([(0, 0.5), (1, 0.5)]);
    let q = SparseDist::from([(0, 0.25), (1, 0.75)]);
    let direct = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    assert!((token_kl(&p, &q).unwrap() - direct).abs() < 1e-8);
}
