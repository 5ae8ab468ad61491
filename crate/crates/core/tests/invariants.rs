use mcitrack::bbox::{iou, BBox};
use mcitrack::eval::{ao_sr, precision_metrics, success_auc, success_curve};
use mcitrack::ssm::{selective_scan, HiddenState, SsmParams};
use mcitrack::Tensor;
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = BBox> {
    (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64).prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
}

fn tensor(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Tensor::from_vec(rows, cols, v))
}

const T: usize = 6;
const CH: usize = 3;
const N: usize = 2;

fn scan_params() -> impl Strategy<Value = SsmParams> {
    (
        tensor(CH, N, -2.0, -0.05),
        prop::collection::vec(-1.0..1.0f64, CH),
        tensor(T, CH, 0.01, 1.0),
        tensor(T, N, -1.0, 1.0),
        tensor(T, N, -1.0, 1.0),
    )
        .prop_map(|(a, d, delta, b, c)| SsmParams::new(a, Some(d), delta, b, c).unwrap())
}

fn add(a: &Tensor, b: &Tensor, k: f64) -> Tensor {
    Tensor::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c) + k * b.get(r, c))
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    (0..a.rows())
        .flat_map(|r| (0..a.cols()).map(move |c| (r, c)))
        .map(|(r, c)| (a.get(r, c) - b.get(r, c)).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_scale_invariant(a in boxes(), b in boxes(), s in 0.1..10.0f64) {
        let v = iou(&a, &b);
        let w = iou(&a.scale(s, s), &b.scale(s, s));
        prop_assert!((v - w).abs() < 1e-9);
    }

    #[test]
    fn success_curve_is_monotone(ious in prop::collection::vec(0.0..=1.0f64, 1..60)) {
        let curve = success_curve(&ious);
        prop_assert_eq!(curve.len(), 21);
        for w in curve.windows(2) {
            prop_assert!(w[1].1 <= w[0].1);
        }
        let auc = success_auc(&ious);
        prop_assert!((0.0..=1.0).contains(&auc));
    }

    #[test]
    fn metrics_ignore_frame_order(ious in prop::collection::vec(0.0..=1.0f64, 1..40), rot in 0usize..40) {
        let mut shuffled = ious.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert!((success_auc(&ious) - success_auc(&shuffled)).abs() < 1e-12);
        let (a, b) = (ao_sr(&ious), ao_sr(&shuffled));
        prop_assert!((a.0 - b.0).abs() < 1e-12 && a.1 == b.1 && a.2 == b.2);
    }

    #[test]
    fn raising_ious_never_lowers_scores(ious in prop::collection::vec(0.0..=1.0f64, 1..40), bump in 0.0..0.5f64) {
        let better: Vec<f64> = ious.iter().map(|v| (v + bump).min(1.0)).collect();
        prop_assert!(success_auc(&better) >= success_auc(&ious));
        let (a, b) = (ao_sr(&ious), ao_sr(&better));
        prop_assert!(b.0 >= a.0 - 1e-12 && b.1 >= a.1 && b.2 >= a.2);
    }

    #[test]
    fn precision_is_bounded_and_exact_at_centers(gt in prop::collection::vec(boxes(), 1..20)) {
        let centers: Vec<(f64, f64)> = gt.iter().map(BBox::center).collect();
        prop_assert_eq!(precision_metrics(&centers, &gt, 20.0), (1.0, 1.0));
        let far: Vec<(f64, f64)> = centers.iter().map(|&(x, y)| (x + 1e4, y)).collect();
        prop_assert_eq!(precision_metrics(&far, &gt, 20.0), (0.0, 0.0));
    }

    #[test]
    fn scan_is_linear_in_input_and_state(
        p in scan_params(),
        x1 in tensor(T, CH, -1.0, 1.0),
        x2 in tensor(T, CH, -1.0, 1.0),
        h1 in tensor(CH, N, -1.0, 1.0),
        h2 in tensor(CH, N, -1.0, 1.0),
        k in -2.0..2.0f64,
    ) {
        let run = |x: &Tensor, h: &Tensor| {
            selective_scan(x, &p, &HiddenState { h: h.clone(), frame_index: 0 }).unwrap()
        };
        let (y1, s1) = run(&x1, &h1);
        let (y2, s2) = run(&x2, &h2);
        let (y, s) = run(&add(&x1, &x2, k), &add(&h1, &h2, k));
        prop_assert!(max_diff(&y, &add(&y1, &y2, k)) < 1e-10);
        prop_assert!(max_diff(&s.h, &add(&s1.h, &s2.h, k)) < 1e-10);
    }

    #[test]
    fn scan_state_decays_without_input(p in scan_params(), h in tensor(CH, N, -1.0, 1.0)) {
        let zero = Tensor::zeros(T, CH);
        let (_, s) = selective_scan(&zero, &p, &HiddenState { h: h.clone(), frame_index: 0 }).unwrap();
        for c in 0..CH {
            for n in 0..N {
                prop_assert!(s.h.get(c, n).abs() <= h.get(c, n).abs());
            }
        }
    }
}
