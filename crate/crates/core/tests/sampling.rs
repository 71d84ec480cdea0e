//! Monte-Carlo check of weighted property sampling against exact
//! inclusion probabilities.

use std::collections::HashMap;

use moltailor::corpus::{sample_properties, MAX_PROPERTIES, MIN_PROPERTIES};
use moltailor::descriptors::{registry, DescriptorKind, DescriptorSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(name: String, w: f64) -> DescriptorSpec {
    DescriptorSpec {
        name,
        kind: DescriptorKind::Count,
        phrase_bank: vec!["x".into()],
        sampling_weight: w,
    }
}

/// Expected number of light items drawn when taking `k` items one at a
/// time without replacement, each draw proportional to weight. Items in a
/// class are exchangeable, so the state is (light drawn, heavy drawn).
fn expected_light(light: usize, heavy: usize, wl: f64, wh: f64, k: usize) -> f64 {
    let mut memo = HashMap::new();
    fn go(l: usize, h: usize, left: usize, c: (usize, usize, f64, f64), memo: &mut HashMap<(usize, usize, usize), f64>) -> f64 {
        if left == 0 {
            return 0.0;
        }
        if let Some(&v) = memo.get(&(l, h, left)) {
            return v;
        }
        let (tl, th) = ((c.0 - l) as f64 * c.2, (c.1 - h) as f64 * c.3);
        let mut v = 0.0;
        if c.0 > l {
            v += tl / (tl + th) * (1.0 + go(l + 1, h, left - 1, c, memo));
        }
        if c.1 > h {
            v += th / (tl + th) * go(l, h + 1, left - 1, c, memo);
        }
        memo.insert((l, h, left), v);
        v
    }
    go(0, 0, k, (light, heavy, wl, wh), &mut memo)
}

#[test]
fn downweighted_items_appear_at_the_exact_rate() {
    let (light, heavy) = (8, 16);
    let reg: Vec<DescriptorSpec> = (0..light)
        .map(|i| spec(format!("fr_{i}"), 0.2))
        .chain((0..heavy).map(|i| spec(format!("d{i}"), 1.0)))
        .collect();
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut hits_light, mut hits_heavy) = (0usize, 0usize);
    for _ in 0..draws {
        let names = sample_properties(&mut rng, &reg);
        assert!((MIN_PROPERTIES..=MAX_PROPERTIES).contains(&names.len()));
        let light_n = names.iter().filter(|n| n.starts_with("fr_")).count();
        hits_light += light_n;
        hits_heavy += names.len() - light_n;
    }
    let ks = MIN_PROPERTIES..=MAX_PROPERTIES;
    let n_k = ks.clone().count() as f64;
    let exp_light: f64 = ks.clone().map(|k| expected_light(light, heavy, 0.2, 1.0, k)).sum::<f64>() / n_k;
    let exp_heavy: f64 = ks.map(|k| k as f64).sum::<f64>() / n_k - exp_light;
    let rate_light = hits_light as f64 / (draws * light) as f64;
    let rate_heavy = hits_heavy as f64 / (draws * heavy) as f64;
    let oracle = (exp_light / light as f64) / (exp_heavy / heavy as f64);
    let observed = rate_light / rate_heavy;
    // Without replacement the ratio sits above the raw 0.2 weight ratio
    // because heavy items saturate; the exact value is about 0.244.
    assert!((observed / oracle - 1.0).abs() < 0.10, "observed {observed}, exact {oracle}");
    assert!((rate_light / (exp_light / light as f64) - 1.0).abs() < 0.02);
    assert!((oracle - 0.2439).abs() < 1e-3, "{oracle}");
}

#[test]
fn bundled_registry_downweights_fragment_counts() {
    let reg = registry();
    assert_eq!(reg.len(), 24);
    let max_fr = reg.iter().filter(|d| d.name.starts_with("fr_")).map(|d| d.sampling_weight).fold(0.0, f64::max);
    let min_other = reg
        .iter()
        .filter(|d| !d.name.starts_with("fr_"))
        .map(|d| d.sampling_weight)
        .fold(f64::INFINITY, f64::min);
    assert!(max_fr < 1.0 && max_fr < min_other);
}
