use desklm::stats::{rank_sum_test, signed_rank_test, Alternative, Method, RankOptions, Sample};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn midrank(all: &[f64], v: f64) -> f64 {
    let below = all.iter().filter(|&&a| a < v).count() as f64;
    let equal = all.iter().filter(|&&a| a == v).count() as f64;
    below + (equal + 1.0) / 2.0
}

/// Walks every size-n subset of the pooled positions.
fn rank_sum_oracle(x: &[f64], y: &[f64], alt: Alternative) -> (u128, u128) {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks: Vec<f64> = pooled.iter().map(|&v| midrank(&pooled, v)).collect();
    let observed: f64 = ranks[..x.len()].iter().sum();
    let (mut fav, mut total) = (0u128, 0u128);
    for mask in 0u32..(1 << pooled.len()) {
        if mask.count_ones() as usize != x.len() {
            continue;
        }
        total += 1;
        let s: f64 = (0..pooled.len()).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        let hit = match alt {
            Alternative::Greater => s >= observed - 1e-9,
            Alternative::Less => s <= observed + 1e-9,
        };
        fav += hit as u128;
    }
    (fav, total)
}

/// Walks every sign vector over the non-zero differences.
fn signed_rank_oracle(x: &[f64], y: &[f64], alt: Alternative) -> (u128, u128) {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|&v| v != 0.0).collect();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs.iter().map(|&v| midrank(&abs, v)).collect();
    let observed: f64 = ranks.iter().zip(&d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();
    let mut fav = 0u128;
    for mask in 0u32..(1 << d.len()) {
        let s: f64 = (0..d.len()).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        fav += match alt {
            Alternative::Greater => s >= observed - 1e-9,
            Alternative::Less => s <= observed + 1e-9,
        } as u128;
    }
    (fav, 1u128 << d.len())
}

fn sample(v: &[f64]) -> Sample {
    Sample::new("s", v.to_vec()).unwrap()
}

/// Small integer values so ties are common.
fn values(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0i32..6).prop_map(f64::from), 1..=max_len)
}

fn alt() -> impl Strategy<Value = Alternative> {
    prop_oneof![Just(Alternative::Less), Just(Alternative::Greater)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn rank_sum_matches_enumeration((x, y) in (1usize..=11).prop_flat_map(|n| (values(n), values(12 - n))), a in alt()) {
        let r = rank_sum_test(&sample(&x), &sample(&y), a, &RankOptions::default()).unwrap();
        prop_assert_eq!(r.method, Method::Exact);
        prop_assert_eq!(r.exact_fraction, Some(rank_sum_oracle(&x, &y, a)));
    }

    #[test]
    fn signed_rank_matches_enumeration(pairs in prop::collection::vec(((0i32..6), (0i32..6)), 1..=12), a in alt()) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        prop_assume!(x.iter().zip(&y).any(|(a, b)| a != b));
        let r = signed_rank_test(&sample(&x), &sample(&y), a, &RankOptions::default()).unwrap();
        prop_assert_eq!(r.exact_fraction, Some(signed_rank_oracle(&x, &y, a)));
    }

    #[test]
    fn one_sided_tails_overlap(x in values(6), y in values(6)) {
        let o = RankOptions::default();
        let less = rank_sum_test(&sample(&x), &sample(&y), Alternative::Less, &o).unwrap();
        let greater = rank_sum_test(&sample(&x), &sample(&y), Alternative::Greater, &o).unwrap();
        prop_assert!(less.p_value + greater.p_value >= 1.0 - 1e-12);
    }

    #[test]
    fn shifting_x_up_never_raises_greater_p(x in values(7), y in values(7), shift in 0.0f64..4.0) {
        let o = RankOptions::default();
        let before = rank_sum_test(&sample(&x), &sample(&y), Alternative::Greater, &o).unwrap();
        let moved: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let after = rank_sum_test(&sample(&moved), &sample(&y), Alternative::Greater, &o).unwrap();
        prop_assert!(after.p_value <= before.p_value + 1e-12);
    }

    #[test]
    fn order_of_observations_is_irrelevant(x in values(8), y in values(8), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut xs, mut ys) = (x.clone(), y.clone());
        xs.shuffle(&mut rng);
        ys.shuffle(&mut rng);
        let o = RankOptions::default();
        let a = rank_sum_test(&sample(&x), &sample(&y), Alternative::Less, &o).unwrap();
        let b = rank_sum_test(&sample(&xs), &sample(&ys), Alternative::Less, &o).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn forced_exact_agrees_with_approximation_at_thirty() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let x: Vec<f64> = (0..15).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..15).map(|_| rng.random::<f64>() + 0.2).collect();
        for a in [Alternative::Less, Alternative::Greater] {
            let exact = RankOptions {
                force: Some(Method::Exact),
                ..RankOptions::default()
            };
            let e = rank_sum_test(&sample(&x), &sample(&y), a, &exact).unwrap();
            let n = rank_sum_test(&sample(&x), &sample(&y), a, &RankOptions::default()).unwrap();
            assert_eq!(n.method, Method::NormalApprox);
            assert!((e.p_value - n.p_value).abs() < 0.02, "{} vs {}", e.p_value, n.p_value);
        }
    }
}

#[test]
fn swapping_samples_mirrors_the_signed_rank_tail() {
    let x = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0];
    let y = [2.0, 7.0, 1.0, 8.0, 2.0, 8.0];
    let o = RankOptions::default();
    let a = signed_rank_test(&sample(&x), &sample(&y), Alternative::Less, &o).unwrap();
    let b = signed_rank_test(&sample(&y), &sample(&x), Alternative::Greater, &o).unwrap();
    assert_eq!(a.p_value, b.p_value);
}
