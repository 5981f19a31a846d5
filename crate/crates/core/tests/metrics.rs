mod support;

use anomaly_recon::metrics::{auroc, connected_components, evaluate, pro, pro_curve, ScoredImage};
use anomaly_recon::Error;
use anomaly_tensor::Tensor;
use proptest::prelude::*;

fn labeled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..120).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..12, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn mask_and_map() -> impl Strategy<Value = (usize, usize, Vec<bool>, Vec<u8>)> {
    (2usize..10, 2usize..10).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            prop::collection::vec(prop::bool::weighted(0.3), h * w),
            prop::collection::vec(0u8..40, h * w),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auroc_counts_pairs((scores, labels) in labeled_scores()) {
        let both = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
        match auroc(&scores, &labels) {
            Ok(v) => {
                prop_assert!(both);
                prop_assert!((v - support::auroc_pairs(&scores, &labels)).abs() < 1e-12);
                let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
                prop_assert!((auroc(&flipped, &labels).unwrap() - (1.0 - v)).abs() < 1e-12);
            }
            Err(e) => {
                prop_assert!(!both);
                prop_assert!(matches!(e, Error::UndefinedMetric(_)));
            }
        }
    }

    #[test]
    fn components_match_label_propagation((h, w, mask, _) in mask_and_map()) {
        let lab = connected_components(&mask, h, w);
        let regions = support::regions(&mask, h, w);
        prop_assert_eq!(lab.count, regions.len());
        let mut ours = lab.sizes.clone();
        let mut theirs: Vec<usize> = regions.iter().map(|r| r.len()).collect();
        ours.sort_unstable();
        theirs.sort_unstable();
        prop_assert_eq!(ours, theirs);
        for r in &regions {
            let l = lab.labels[r[0]];
            prop_assert!(l > 0);
            prop_assert!(r.iter().all(|&p| lab.labels[p] == l));
        }
    }

    #[test]
    fn pro_matches_threshold_sweep((h, w, mut mask, scores) in mask_and_map(), limit in 0.05f64..=1.0) {
        mask[0] = true;
        mask[h * w - 1] = false;
        let map: Vec<f64> = scores.iter().map(|&s| s as f64 / 64.0).collect();
        let tm = Tensor::from_fn(&[h, w], |p| map[p] as f32);
        let tk = Tensor::from_fn(&[h, w], |p| mask[p] as u8 as f32);
        let ours = pro(&[tm.clone()], &[tk.clone()], limit).unwrap();
        let oracle = support::pro_sweep(&[map], &[mask], h, w, limit);
        prop_assert!((ours - oracle).abs() < 1e-9, "{} vs {}", ours, oracle);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ours));
        let curve = pro_curve(&[tm], &[tk]).unwrap();
        prop_assert!(curve.windows(2).all(|p| p[0].fpr <= p[1].fpr && p[0].overlap <= p[1].overlap));
    }
}

#[test]
fn pro_needs_both_pixel_classes() {
    let map = Tensor::from_fn(&[3, 3], |p| p as f32);
    let none = Tensor::zeros(&[3, 3]);
    let all = Tensor::ones(&[3, 3]);
    assert!(matches!(
        pro(&[map.clone()], &[none], 0.3),
        Err(Error::UndefinedMetric(_))
    ));
    assert!(matches!(
        pro(&[map], &[all], 0.3),
        Err(Error::UndefinedMetric(_))
    ));
}

#[test]
fn report_averages_categories() {
    let img = |cat: &str, score: f32, anomalous: bool| {
        let mut mask = Tensor::zeros(&[4, 4]);
        let mut pixels = Tensor::full(&[4, 4], 0.1f32);
        if anomalous {
            mask.data_mut()[5] = 1.0;
            pixels.data_mut()[5] = score;
        }
        ScoredImage {
            category: cat.into(),
            pixels,
            image_score: score,
            mask,
            anomalous,
        }
    };
    let images = vec![
        img("a", 0.2, false),
        img("a", 0.9, true),
        img("b", 0.6, false),
        img("b", 0.4, true),
    ];
    let r = evaluate(&images, 0.3, "digest").unwrap();
    assert_eq!(r.categories["a"].image_auroc, 1.0);
    assert_eq!(r.categories["b"].image_auroc, 0.0);
    assert_eq!(r.image_auroc, 0.5);
    assert_eq!((r.images, r.anomalous_images, r.normal_images), (4, 2, 2));
    let json = r.to_json().unwrap();
    assert_eq!(
        serde_json::from_str::<serde_json::Value>(&json).unwrap()["config_digest"],
        "digest"
    );
    assert!(r.to_table().contains("mean"));
}
