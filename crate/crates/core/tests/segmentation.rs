use proptest::prelude::*;
use scrapline::segmentation::{iou, segment_grabs, BBox, GrabThresholds};

fn trace() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..0.1, 0.0f64..1.0], 1..120)
}

fn thresholds() -> impl Strategy<Value = GrabThresholds> {
    (0.0f64..0.5, 0.01f64..0.5, 1usize..6).prop_map(|(lo, gap, min_len)| GrabThresholds {
        tau_lo: lo,
        tau_hi: (lo + gap).min(1.0),
        min_len,
    })
}

fn bbox() -> impl Strategy<Value = BBox> {
    (-50.0f64..50.0, -50.0f64..50.0, 0.0f64..80.0, 0.0f64..80.0).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

proptest! {
    #[test]
    fn segmentation_is_pure(t in trace(), th in thresholds()) {
        prop_assert_eq!(segment_grabs(&t, &th).unwrap(), segment_grabs(&t.clone(), &th.clone()).unwrap());
    }

    #[test]
    fn intervals_are_ordered_disjoint_and_peak_above_tau_hi(t in trace(), th in thresholds()) {
        let grabs = segment_grabs(&t, &th).unwrap();
        for g in &grabs {
            prop_assert!(g.start <= g.peak && g.peak <= g.end && g.end < t.len());
            prop_assert!(g.len() >= th.min_len);
            prop_assert!(g.peak_iou >= th.tau_hi);
            prop_assert!(t[g.start..=g.end].iter().all(|&v| v <= g.peak_iou));
            prop_assert_eq!(t[g.peak], g.peak_iou);
        }
        for w in grabs.windows(2) {
            prop_assert!(w[0].end < w[1].start);
        }
    }

    #[test]
    fn raising_tau_hi_never_adds_grabs(t in trace(), th in thresholds(), bump in 0.0f64..0.5) {
        let higher = GrabThresholds { tau_hi: (th.tau_hi + bump).min(1.0), ..th };
        let a = segment_grabs(&t, &th).unwrap().len();
        let b = segment_grabs(&t, &higher).unwrap().len();
        prop_assert!(b <= a, "{b} grabs at tau_hi {} vs {a} at {}", higher.tau_hi, th.tau_hi);
    }

    #[test]
    fn iou_is_symmetric(a in bbox(), b in bbox()) {
        let (ab, ba) = (iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn iou_with_itself_is_one(a in bbox()) {
        prop_assume!(a.w > 0.0 && a.h > 0.0);
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }
}
