use proptest::prelude::*;
use tsfm_core::augment::transforms::circular_shift;
use tsfm_core::baselines::{dtw, euclidean};
use tsfm_core::dataset::{make_splits, split_counts, znormalize_values, Archive, SplitManifest, TimeSeries};
use tsfm_core::finetune_eval::{average_rank, select_model, Accuracy, EpochRecord, FineTuneLog, InitStrategy};
use tsfm_core::losses::{nt_xent, Denominator};
use tsfm_core::nn::Tensor;

fn series(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

fn pair_of_equal(len: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(-5.0f64..5.0, n)))
}

fn log(init: InitStrategy, accs: &[f64]) -> FineTuneLog {
    FineTuneLog {
        task: "t".into(),
        init,
        seed: 0,
        initial_val_acc: 0.0,
        initial_val_loss: 1.0,
        epochs: accs
            .iter()
            .enumerate()
            .map(|(i, &a)| EpochRecord {
                epoch: i + 1,
                train_loss: 1.0,
                val_acc: a,
                val_loss: 1.0,
            })
            .collect(),
    }
}

proptest! {
    #[test]
    fn dtw_is_symmetric_and_bounded_by_euclidean((x, y) in pair_of_equal(1..24)) {
        let d = dtw(&x, &y, None).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - dtw(&y, &x, None).unwrap()).abs() < 1e-9);
        prop_assert!(d <= euclidean(&x, &y).unwrap() + 1e-9);
        prop_assert_eq!(dtw(&x, &x, None).unwrap(), 0.0);
    }

    #[test]
    fn widening_the_band_never_increases_dtw(x in series(1..16), y in series(1..16)) {
        let lo = x.len().abs_diff(y.len());
        let mut prev = f64::INFINITY;
        for w in lo..=x.len().max(y.len()) {
            let d = dtw(&x, &y, Some(w)).unwrap();
            prop_assert!(d <= prev + 1e-12);
            prev = d;
        }
        prop_assert!((prev - dtw(&x, &y, None).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn euclidean_triangle_inequality(
        (a, b, c) in (1usize..20).prop_flat_map(|n| (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        )),
    ) {
        prop_assert!(euclidean(&a, &c).unwrap() <= euclidean(&a, &b).unwrap() + euclidean(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn split_counts_follow_the_rounding_rule(n in 10usize..=1000) {
        let (p, tr, v, te) = split_counts(n);
        prop_assert_eq!(p, n / 2);
        prop_assert_eq!(v, (n - n / 2) / 5);
        prop_assert_eq!(te, v);
        prop_assert_eq!(p + tr + v + te, n);
        prop_assert!(tr >= v && v >= 1);
    }

    #[test]
    fn manifests_partition_and_round_trip(n in 10usize..60, seed in any::<u64>()) {
        let pool: Vec<TimeSeries> = (0..n)
            .map(|i| TimeSeries {
                values: vec![i as f64, 0.0],
                label: Some(i % 2),
                dataset_id: "d".into(),
                sample_id: format!("s{i:03}"),
            })
            .collect();
        let mut archive = Archive::new();
        archive.insert("d".into(), pool);
        let m = make_splits(&archive, seed).unwrap();
        let s = &m.datasets["d"];
        let mut ids: Vec<&String> = s.pretrain.iter().chain(&s.train).chain(&s.val).chain(&s.test).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        prop_assert_eq!(SplitManifest::from_json(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn znormalize_removes_scale_and_offset(x in series(2..40), a in 0.1f64..10.0, b in -10.0f64..10.0) {
        let z = znormalize_values(&x);
        let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let zm = znormalize_values(&moved);
        for (p, q) in z.iter().zip(&zm) {
            prop_assert!((p - q).abs() < 1e-6);
        }
        let again = znormalize_values(&z);
        for (p, q) in z.iter().zip(&again) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn circular_shift_preserves_the_multiset(x in series(1..30), s in 0usize..100) {
        let mut a = circular_shift(&x, s).unwrap();
        let mut b = x.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn nt_xent_ignores_scale_and_row_order(
        rows in prop::collection::vec(prop::collection::vec(0.1f64..1.0, 4), 6),
        c in 0.1f64..10.0,
        rot in 1usize..3,
    ) {
        let (h0, h1) = rows.split_at(3);
        let base = nt_xent(&Tensor::from_rows(h0), &Tensor::from_rows(h1), 0.5, Denominator::ExcludePositive).unwrap();
        let scale = |m: &[Vec<f64>]| -> Vec<Vec<f64>> { m.iter().map(|r| r.iter().map(|v| v * c).collect()).collect() };
        let scaled = nt_xent(&Tensor::from_rows(&scale(h0)), &Tensor::from_rows(&scale(h1)), 0.5, Denominator::ExcludePositive).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9);
        let mut p0 = h0.to_vec();
        let mut p1 = h1.to_vec();
        p0.rotate_left(rot);
        p1.rotate_left(rot);
        let permuted = nt_xent(&Tensor::from_rows(&p0), &Tensor::from_rows(&p1), 0.5, Denominator::ExcludePositive).unwrap();
        prop_assert!((base - permuted).abs() < 1e-9);
    }

    #[test]
    fn ranks_depend_on_order_only(
        acc in prop::collection::vec(prop::collection::vec(0u8..5, 3), 1..6),
    ) {
        let m = acc.len();
        let methods: Vec<String> = (0..m).map(|i| format!("m{i}")).collect();
        let datasets: Vec<String> = (0..3).map(|i| format!("d{i}")).collect();
        let raw: Vec<Vec<Option<f64>>> = acc.iter().map(|r| r.iter().map(|&v| Some(v as f64 / 4.0)).collect()).collect();
        let warped: Vec<Vec<Option<f64>>> = raw.iter().map(|r| r.iter().map(|v| v.map(|a| a.exp() * 3.0 - 1.0)).collect()).collect();
        let t = average_rank(&methods, &datasets, &raw).unwrap();
        prop_assert_eq!(&t.ranks, &average_rank(&methods, &datasets, &warped).unwrap().ranks);
        let total: f64 = t.mean_ranks.iter().sum();
        prop_assert!((total - (m * (m + 1)) as f64 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn selection_is_invariant_under_monotone_transforms(
        pre in prop::collection::vec(0u8..6, 1..12),
        rnd in prop::collection::vec(0u8..6, 1..12),
    ) {
        let f = |v: &[u8], g: &dyn Fn(f64) -> f64| v.iter().map(|&a| g(a as f64 / 5.0)).collect::<Vec<f64>>();
        let id = |a: f64| a;
        let warp = |a: f64| (a * 3.0).tanh();
        let a = select_model(&[log(InitStrategy::Pretrained, &f(&pre, &id)), log(InitStrategy::Random, &f(&rnd, &id))]).unwrap();
        let b = select_model(&[log(InitStrategy::Pretrained, &f(&pre, &warp)), log(InitStrategy::Random, &f(&rnd, &warp))]).unwrap();
        prop_assert_eq!((a.epoch, a.init), (b.epoch, b.init));
    }

    #[test]
    fn accuracy_order_matches_its_value(a in 0usize..50, b in 1usize..50, c in 0usize..50, d in 1usize..50) {
        let x = Accuracy { correct: a.min(b), total: b };
        let y = Accuracy { correct: c.min(d), total: d };
        if x.value() != y.value() {
            prop_assert_eq!(x < y, x.value() < y.value());
        } else {
            prop_assert_eq!(x, y);
        }
    }
}
