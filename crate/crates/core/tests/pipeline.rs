//! Cross-module checks through the public API.

use fdrnet_core::eval::{evaluate, iou_grid, pr_curve};
use fdrnet_core::geometry::{polygon_gap, Polygon};
use fdrnet_core::labels::{gen_label_maps, LabelConfig, TextAnnotation};
use fdrnet_core::losses::{detector_loss_values, LossConfig};
use fdrnet_core::network::approx_binarize;
use fdrnet_core::postprocess::{detect, PostprocessConfig, Unclip};
use fdrnet_core::tensor::FeatureMap;
use fdrnet_core::train::checkpoint::Checkpoint;
use fdrnet_core::train::corpus::{gen_corpus, load_corpus};
use fdrnet_core::train::infer::{infer, InferConfig};
use fdrnet_core::train::synth::SynthSceneSpec;
use fdrnet_core::train::trainer::Trainer;
use fdrnet_core::train::TrainConfig;
use proptest::prelude::*;

fn tiny() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.image_size = 64;
    c.augment.enabled = false;
    c.model.backbone.stem = 4;
    c.model.backbone.widths = [4, 8, 8, 8];
    c.model.fused_channels = 16;
    c.model.low_level_channels = 4;
    c.model.cla_reduction = 2;
    c.infer.short_edge = 64;
    c
}

#[test]
fn corpus_survives_disk_and_ground_truth_is_detectable() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSceneSpec::default();
    gen_corpus(&spec, 4, 3, dir.path()).unwrap();
    let samples = load_corpus(dir.path()).unwrap();
    assert_eq!(samples.len(), 4);
    let labels = LabelConfig::default();
    let post = PostprocessConfig {
        unclip: Unclip::InverseShrink(labels.shrink_ratio),
        ..PostprocessConfig::default()
    };
    for s in &samples {
        assert_eq!(s.image.shape(), (3, spec.height, spec.width));
        assert!(s.annots.len() >= spec.min_instances);
        // a detector that reproduced prob_gt exactly would score perfectly
        let maps = gen_label_maps(&s.annots, spec.height, spec.width, &labels).unwrap();
        let dets: Vec<Polygon> = detect(&maps.prob_gt, &post).unwrap().into_iter().map(|d| d.polygon).collect();
        let rep = evaluate(&dets, &s.annots, 0.5);
        assert_eq!((rep.counts.fp, rep.counts.fn_), (0, 0), "{}", s.name);
    }
}

#[test]
fn ideal_maps_cost_less_than_flat_ones() {
    let annots = vec![
        TextAnnotation::new(Polygon::rect(8.0, 10.0, 56.0, 24.0), false),
        TextAnnotation::new(Polygon::rect(10.0, 36.0, 40.0, 52.0), false),
    ];
    let m = gen_label_maps(&annots, 64, 64, &LabelConfig::default()).unwrap();
    let cfg = LossConfig::default();
    let p = m.prob_gt.map(|v| v.clamp(0.01, 0.99));
    let t = m.thresh_gt.clone();
    let ideal = detector_loss_values(&p, &approx_binarize(&p, &t, 50.0).unwrap(), &t, &m, &cfg).unwrap();
    let flat = FeatureMap::filled(1, 64, 64, 0.5);
    let naive = detector_loss_values(&flat, &flat, &flat, &m, &cfg).unwrap();
    assert!(ideal.total < 0.1 * naive.total, "{ideal:?} vs {naive:?}");
    assert!(ideal.thresh == 0.0);
}

#[test]
fn checkpoint_restores_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    gen_corpus(&SynthSceneSpec::default(), 2, 1, dir.path()).unwrap();
    let samples = load_corpus(dir.path()).unwrap();
    let mut t = Trainer::new(tiny()).unwrap();
    for _ in 0..2 {
        t.step(&samples, None).unwrap();
    }
    let path = dir.path().join("x.ckpt");
    t.checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.iteration, 2);
    assert_eq!(ck.config, t.config);
    let (det, store) = ck.restore().unwrap();
    let img = &samples[0].image;
    assert_eq!(
        det.forward(&store, img).unwrap(),
        t.detector.forward(&t.store, img).unwrap()
    );
    let ic = InferConfig {
        short_edge: 64,
        ..InferConfig::default()
    };
    assert_eq!(
        infer(&det, &store, img, &ic).unwrap(),
        infer(&t.detector, &t.store, img, &ic).unwrap()
    );
}

#[test]
fn inference_reports_original_coordinates() {
    let cfg = tiny();
    let t = Trainer::new(cfg).unwrap();
    let img = FeatureMap::from_fn(3, 90, 150, |c, y, x| ((x * 7 + y * 3 + c) % 11) as f64 / 10.0);
    let ic = InferConfig {
        short_edge: 64,
        ..InferConfig::default()
    };
    let r = infer(&t.detector, &t.store, &img, &ic).unwrap();
    assert_eq!((r.height, r.width), (90, 150));
    assert_eq!((r.input_height % 32, r.input_width % 32), (0, 0));
    assert!((r.scale - 64.0 / 90.0).abs() < 1e-12);
    for d in &r.detections {
        let (x0, y0, x1, y1) = d.polygon.bbox().unwrap();
        assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 150.0 && y1 <= 90.0, "{:?}", d.polygon);
    }
}

fn rect_scene() -> impl Strategy<Value = Vec<Polygon>> {
    prop::collection::vec((0.0f64..200.0, 0.0f64..200.0, 20.0f64..60.0, 20.0f64..40.0), 1..6).prop_map(|v| {
        let mut out: Vec<Polygon> = Vec::new();
        for (x, y, w, h) in v {
            let r = Polygon::rect(x, y, x + w, y + h);
            if out.iter().all(|o| polygon_gap(o, &r) > 4.0) {
                out.push(r);
            }
        }
        out
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn label_round_trip_is_perfect_for_rectangles(rects in rect_scene()) {
        let annots: Vec<TextAnnotation> = rects.iter().cloned().map(|p| TextAnnotation::new(p, false)).collect();
        let labels = LabelConfig::default();
        let maps = gen_label_maps(&annots, 264, 264, &labels).unwrap();
        let post = PostprocessConfig { unclip: Unclip::InverseShrink(labels.shrink_ratio), ..PostprocessConfig::default() };
        let dets: Vec<Polygon> = detect(&maps.prob_gt, &post).unwrap().into_iter().map(|d| d.polygon).collect();
        let rep = evaluate(&dets, &annots, 0.5);
        prop_assert_eq!((rep.precision, rep.recall, rep.f_score), (1.0, 1.0, 1.0));
    }

    #[test]
    fn shifted_detections_lose_recall_monotonically(rects in rect_scene(), dx in 0.0f64..15.0) {
        let annots: Vec<TextAnnotation> = rects.iter().cloned().map(|p| TextAnnotation::new(p, false)).collect();
        let dets: Vec<Polygon> = rects.iter().map(|r| r.translate(dx, 0.0)).collect();
        let curve = pr_curve(&dets, &annots, &iou_grid(0.5, 0.95, 0.05));
        for w in curve.windows(2) {
            prop_assert!(w[1].recall <= w[0].recall && w[1].counts.tp <= w[0].counts.tp);
        }
    }
}
