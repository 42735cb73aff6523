use std::collections::BTreeMap;

use proptest::prelude::*;

use bulkdiff::conductance::CrowdingField;
use bulkdiff::config::RunConfig;
use bulkdiff::corrector_cache::CacheKey;
use bulkdiff::diff_calculus::{difference, difference_table, mobius, submasks, telescope, IndexedFamily};
use bulkdiff::lattice::{Lattice, Node};
use bulkdiff::point_process::{poisson_pmf, poisson_tail, BoxRegion, PointConfiguration};
use bulkdiff::sector_solver::GridSpec;

fn lattice(per_axis: usize, n: usize) -> Lattice {
    Lattice::index_only(1, per_axis, n).unwrap()
}

proptest! {
    #[test]
    fn rank_unrank_round_trip(per_axis in 2usize..9, n in 1usize..5, seed in any::<u64>()) {
        let l = lattice(per_axis, n);
        let r = (seed % l.count() as u64) as usize;
        let mut s = vec![0 as Node; n];
        l.unrank(r, &mut s);
        prop_assert!(s.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(s.iter().all(|&v| (v as usize) < per_axis));
        prop_assert_eq!(l.rank(&s), r);
    }

    #[test]
    fn advance_enumerates_in_rank_order(per_axis in 2usize..6, n in 1usize..4) {
        let l = lattice(per_axis, n);
        let mut s = vec![0 as Node; n];
        let mut r = 0;
        loop {
            prop_assert_eq!(l.rank(&s), r);
            r += 1;
            if !l.advance(&mut s) {
                break;
            }
        }
        prop_assert_eq!(r, l.count());
        prop_assert_eq!(r as u64, Lattice::state_count(per_axis, n));
    }

    #[test]
    fn state_weights_sum_to_one(per_axis in 2usize..7, n in 1usize..4) {
        let region = BoxRegion::centered(1.0, 1).unwrap();
        let l = Lattice::new(&region, per_axis, n).unwrap();
        let mut s = vec![0 as Node; n];
        let mut total = l.state_weight(&s);
        while l.advance(&mut s) {
            total += l.state_weight(&s);
        }
        prop_assert!((total - 1.0).abs() < 1e-12, "total {}", total);
    }

    #[test]
    fn telescope_inverts_difference(values in prop::collection::vec(-10.0f64..10.0, 16)) {
        let table = values.clone();
        let family = IndexedFamily::from_subsets(vec![0, 1, 2, 3], move |e: &[usize]| {
            table[e.iter().map(|&i| 1usize << i).sum::<usize>()]
        })
        .unwrap();
        let full = [0, 1, 2, 3];
        let diffs: BTreeMap<Vec<usize>, f64> = difference_table(&family, &full).unwrap();
        let back = telescope(&diffs, &full).unwrap();
        prop_assert!((back - values[15]).abs() <= 1e-12 * (1.0 + values[15].abs()));
        let d = difference(&family, &[1, 3]).unwrap();
        prop_assert!((d - mobius(&values, 0b1010)).abs() <= 1e-12);
    }

    #[test]
    fn submasks_are_exactly_the_subsets(mask in 0u32..256) {
        let subs: Vec<u32> = submasks(mask).collect();
        prop_assert_eq!(subs.len(), 1usize << mask.count_ones());
        prop_assert!(subs.iter().all(|&s| s & !mask == 0));
    }

    #[test]
    fn cache_key_ignores_exterior_order(raw in prop::collection::vec((any::<bool>(), 0.0f64..1.5), 1..5)) {
        // exterior points must lie outside the unit box
        let pts: Vec<f64> = raw.iter().map(|&(left, u)| if left { -0.5 - u } else { 0.5 + u }).collect();
        let field = CrowdingField::new(2.0, 0.25).unwrap();
        let grid = GridSpec::new(BoxRegion::cube(0, 1), 2, 0.25).unwrap();
        let fwd: Vec<Vec<f64>> = pts.iter().map(|&x| vec![x]).collect();
        let rev: Vec<Vec<f64>> = fwd.iter().rev().cloned().collect();
        let a = CacheKey::new(&field, &grid, &[1.0], &PointConfiguration::from_points(1, &fwd).unwrap()).unwrap();
        let b = CacheKey::new(&field, &grid, &[1.0], &PointConfiguration::from_points(1, &rev).unwrap()).unwrap();
        prop_assert_eq!(a.hex(), b.hex());
        let c = CacheKey::new(&field, &grid, &[0.5], &PointConfiguration::from_points(1, &fwd).unwrap()).unwrap();
        prop_assert_ne!(a.hex(), c.hex());
    }

    #[test]
    fn poisson_tail_matches_pmf_sum(mean in 0.05f64..20.0, n in 0u64..30) {
        let head: f64 = (0..n).map(|k| poisson_pmf(mean, k)).sum();
        let tail = poisson_tail(mean, n);
        prop_assert!((head + tail - 1.0).abs() < 1e-10);
        prop_assert!(poisson_tail(mean, n + 1) <= tail);
    }

    #[test]
    fn overrides_replace_config_leaves(h in 0.01f64..0.5, seed in any::<u32>(), n_outer in 1usize..100) {
        let base = "[field]\nname = \"crowding\"\n";
        let cfg = RunConfig::with_overrides(base, &[
            format!("mc.h={h}"),
            format!("mc.seed={seed}"),
            format!("mc.n_outer={n_outer}"),
        ])
        .unwrap();
        prop_assert_eq!(cfg.mc.h, h);
        prop_assert_eq!(cfg.mc.seed, seed as u64);
        prop_assert_eq!(cfg.mc.n_outer, n_outer);
    }
}

#[test]
fn unknown_override_keys_are_rejected() {
    let base = "[field]\nname = \"crowding\"\n";
    assert!(RunConfig::with_overrides(base, &["mc.no_such_leaf=1".into()]).is_err());
    assert!(RunConfig::with_overrides(base, &["missing_equals".into()]).is_err());
}
