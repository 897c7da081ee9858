//! Property-based invariants across the core pipeline.

use proptest::prelude::*;
use zeus_core::fusion::fuse_late;
use zeus_core::loss::{binarize, dsc, miou};
use zeus_core::optim::{lr_at, EarlyStopping};
use zeus_core::synth::{resize_nearest, split_subjects};
use zeus_core::{Graph, Tensor};

fn mask(side: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::bool::ANY, side * side)
        .prop_map(move |v| Tensor::new(&[side, side], v.into_iter().map(|b| f64::from(u8::from(b))).collect()).unwrap())
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_symmetric(a in mask(6), b in mask(6)) {
        let d = dsc(&a, &b).unwrap();
        let m = miou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&m));
        prop_assert_eq!(d, dsc(&b, &a).unwrap());
        prop_assert_eq!(m, miou(&b, &a).unwrap());
        prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn nearest_up_then_down_is_identity(side in 1usize..9, k in 1usize..5, seed in any::<u64>()) {
        let img = Tensor::from_fn(&[side, side], |i| ((i as u64).wrapping_mul(seed | 1) % 97) as f64);
        let up = resize_nearest(&img, side * k).unwrap();
        prop_assert_eq!(resize_nearest(&up, side).unwrap(), img.clone());
        prop_assert_eq!(resize_nearest(&img, side).unwrap(), img);
    }

    #[test]
    fn lr_is_strictly_decreasing(max in 2usize..400, lr0 in 1e-5f64..1.0, power in 0.1f64..3.0) {
        let mut prev = f64::INFINITY;
        for e in 0..=max {
            let lr = lr_at(e, max, lr0, power).unwrap();
            prop_assert!(lr < prev);
            prev = lr;
        }
        prop_assert_eq!(prev, 0.0);
        prop_assert!(lr_at(max + 1, max, lr0, power).is_err());
    }

    #[test]
    fn splits_partition_subjects(n in 3usize..120, seed in any::<u64>()) {
        let (tr, va, te) = split_subjects(n, seed);
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!va.is_empty() && !te.is_empty());
        prop_assert_eq!(split_subjects(n, seed), (tr, va, te));
    }

    #[test]
    fn late_fusion_of_identical_masks_is_binarization(p in prop::collection::vec(0.0f64..=1.0, 16), m in 1usize..5) {
        let t = Tensor::new(&[4, 4], p).unwrap();
        let fused = fuse_late(&vec![t.clone(); m]).unwrap();
        prop_assert_eq!(fused, binarize(&t, 0.5));
    }

    #[test]
    fn early_stopping_counts_stale_epochs(losses in prop::collection::vec(0.0f64..10.0, 1..40), patience in 1usize..6) {
        let mut s = EarlyStopping::new(patience);
        let mut best = f64::INFINITY;
        let mut stale = 0;
        for &l in &losses {
            if l < best { best = l; stale = 0 } else { stale += 1 }
            prop_assert_eq!(s.observe(l), stale >= patience);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 4], v).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
