use facercnn::anchors::{decode_delta, encode_delta, generate_anchors, AnchorConfig};
use facercnn::data::{
    parse_fddb_ellipses, parse_wider, serialize_fddb, serialize_wider, Annotation, Blur, Expression, FaceAttributes,
    Illumination, ImageRecord, Occlusion, Pose,
};
use facercnn::eval::{format_detections, parse_detections, roc_curve, DetectionFormat, EvalImage};
use facercnn::geometry::{iou_rect, nms, score_order, BBox, EllipseRegion, Region, ScoredRegion};
use facercnn::net::Tensor;
use facercnn::pipeline::PipelineConfig;
use facercnn::sampling::{
    append_hard_negatives, inject_hard_negatives, mine_hard_negatives, read_hard_negatives, sample_rois, HardNegative,
    SamplingParams,
};
use facercnn::scaling::{flip_region, hflip, scale_region};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..200.0f64, 0.0..200.0f64, 1.0..80.0f64, 1.0..80.0f64)
        .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h).unwrap())
}

fn ellipse() -> impl Strategy<Value = EllipseRegion> {
    (10.0..200.0f64, 10.0..200.0f64, 2.0..40.0f64, 2.0..40.0f64, -3.0..3.0f64)
        .prop_map(|(cx, cy, a, b, t)| EllipseRegion::new(cx, cy, a, b, t).unwrap())
}

fn scored() -> impl Strategy<Value = ScoredRegion<BBox>> {
    // coarse scores so ties occur
    (bbox(), 0u32..20).prop_map(|(b, s)| ScoredRegion::new(b, s as f64 / 20.0).unwrap())
}

fn attrs() -> impl Strategy<Value = FaceAttributes> {
    (0usize..3, any::<bool>(), any::<bool>(), 0usize..3, any::<bool>()).prop_map(|(b, e, i, o, p)| FaceAttributes {
        blur: [Blur::None, Blur::Normal, Blur::Heavy][b],
        expression: if e { Expression::Extreme } else { Expression::Typical },
        illumination: if i { Illumination::Extreme } else { Illumination::Normal },
        occlusion: [Occlusion::None, Occlusion::Partial, Occlusion::Heavy][o],
        pose: if p { Pose::Atypical } else { Pose::Typical },
        invalid: false,
    })
}

fn close(a: &BBox, b: &BBox, tol: f64) -> bool {
    [(a.x1, b.x1), (a.y1, b.y1), (a.x2, b.x2), (a.y2, b.y2)]
        .iter()
        .all(|(u, v)| (u - v).abs() <= tol * (1.0 + u.abs()))
}

fn region_close(a: &Region, b: &Region, tol: f64) -> bool {
    match (a, b) {
        (Region::Rect(x), Region::Rect(y)) => close(x, y, tol),
        (Region::Ellipse(x), Region::Ellipse(y)) => {
            let d = (x.angle - y.angle).abs();
            let turn = d.min((std::f64::consts::PI - d).abs());
            [
                (x.cx, y.cx),
                (x.cy, y.cy),
                (x.major_r, y.major_r),
                (x.minor_r, y.minor_r),
            ]
            .iter()
            .all(|(u, v)| (u - v).abs() <= tol * (1.0 + u.abs()))
                && (turn <= tol || (x.major_r - x.minor_r).abs() <= tol)
        }
        _ => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou_rect(&a, &b);
        prop_assert_eq!(v, iou_rect(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((iou_rect(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_a_maximal_non_overlapping_prefix(dets in prop::collection::vec(scored(), 0..60), thr in 0.1..0.9f64) {
        let kept = nms(&dets, thr);
        let order = score_order(&dets);
        let rank = |i: usize| order.iter().position(|&j| j == i).unwrap();
        prop_assert!(kept.windows(2).all(|w| rank(w[0]) < rank(w[1])));
        for (n, &i) in kept.iter().enumerate() {
            for &j in &kept[..n] {
                prop_assert!(iou_rect(&dets[i].region, &dets[j].region) <= thr);
            }
        }
        for i in (0..dets.len()).filter(|i| !kept.contains(i)) {
            prop_assert!(kept
                .iter()
                .any(|&k| rank(k) < rank(i) && iou_rect(&dets[i].region, &dets[k].region) > thr));
        }
    }

    #[test]
    fn box_deltas_round_trip(a in bbox(), g in bbox()) {
        let d = encode_delta(&a, &g).unwrap();
        prop_assert!(close(&decode_delta(&a, &d).unwrap(), &g, 1e-9));
    }

    #[test]
    fn anchors_tile_the_feature_map(fw in 1usize..12, fh in 1usize..12, drop_smallest in any::<bool>()) {
        let cfg = if drop_smallest { AnchorConfig::nine_anchor() } else { AnchorConfig::default() };
        let a = generate_anchors(&cfg, fw, fh);
        let k = cfg.anchors_per_location();
        prop_assert_eq!(a.len(), fw * fh * k);
        for (i, b) in a.iter().enumerate() {
            let loc = i / k;
            let (cx, cy) = b.center();
            prop_assert!((cx - ((loc % fw) as f64 + 0.5) * 16.0).abs() < 1e-9);
            prop_assert!((cy - ((loc / fw) as f64 + 0.5) * 16.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_rois_respect_labels_and_quota(
        props in prop::collection::vec(bbox(), 1..300),
        gts in prop::collection::vec(bbox(), 0..4),
        seed in any::<u64>(),
    ) {
        let params = SamplingParams { batch: 32, ..SamplingParams::default() };
        let b = sample_rois(&props, &gts, &params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let best = |r: &BBox| gts.iter().map(|g| iou_rect(r, g)).fold(0.0, f64::max);
        prop_assert!(b.samples.len() <= params.batch);
        let fg: Vec<_> = b.samples.iter().filter(|s| s.is_foreground()).collect();
        prop_assert_eq!(fg.len(), b.stats.foreground);
        for s in &b.samples {
            prop_assert_eq!(s.is_foreground(), best(&s.roi) > params.fg_iou);
        }
        let avail_fg = props.iter().filter(|p| best(p) > params.fg_iou).count();
        if avail_fg >= params.fg_quota() && props.len() - avail_fg >= params.batch - params.fg_quota() {
            prop_assert_eq!(fg.len(), params.fg_quota());
            prop_assert_eq!(b.samples.len(), params.batch);
        }
    }

    #[test]
    fn injected_hard_negatives_fill_background_slots_first(
        props in prop::collection::vec(bbox(), 1..200),
        gts in prop::collection::vec(bbox(), 1..3),
        scores in prop::collection::vec(0.8..1.0f64, 0..40),
        seed in any::<u64>(),
    ) {
        let params = SamplingParams { batch: 24, ..SamplingParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = sample_rois(&props, &gts, &params, &mut rng).unwrap();
        let hards: Vec<HardNegative> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| HardNegative { image_id: "a".into(), roi: props[i % props.len()], score: s })
            .collect();
        let fg = base.stats.foreground;
        let out = inject_hard_negatives(base, &hards, params.batch, &mut rng).unwrap();
        prop_assert!(out.samples.len() <= params.batch);
        prop_assert_eq!(out.stats.foreground, fg);
        prop_assert_eq!(out.stats.hard + out.stats.dropped_hard, hards.len());
        let kept_hard = out.samples.iter().filter(|s| s.is_hard).count();
        prop_assert_eq!(kept_hard, out.stats.hard);
        if out.stats.dropped_hard > 0 {
            prop_assert_eq!(out.stats.background, out.stats.hard);
        }
    }

    #[test]
    fn mined_entries_score_high_and_miss_faces(dets in prop::collection::vec(scored(), 0..40), gts in prop::collection::vec(bbox(), 0..4)) {
        let mined = mine_hard_negatives("x", &dets, &gts, 0.8, 0.5);
        let expected = dets
            .iter()
            .filter(|d| d.score > 0.8 && gts.iter().all(|g| iou_rect(&d.region, g) < 0.5))
            .count();
        prop_assert_eq!(mined.len(), expected);
    }

    #[test]
    fn roc_curve_is_monotone(
        faces in prop::collection::vec(prop::collection::vec(bbox(), 0..4), 1..6),
        dets in prop::collection::vec(prop::collection::vec(scored(), 0..8), 1..6),
    ) {
        let images: Vec<EvalImage> = faces
            .iter()
            .zip(dets.iter().chain(std::iter::repeat(&Vec::new())))
            .enumerate()
            .map(|(i, (f, d))| EvalImage {
                id: format!("{i}"),
                detections: d.iter().map(|s| s.map(Region::Rect)).collect(),
                faces: f.iter().map(|&b| Region::Rect(b)).collect(),
            })
            .collect();
        prop_assume!(images.iter().any(|im| !im.faces.is_empty()));
        let c = roc_curve(&images).unwrap();
        for w in c.points.windows(2) {
            prop_assert!(w[0].threshold > w[1].threshold);
            prop_assert!(w[0].false_positives <= w[1].false_positives);
            prop_assert!(w[0].y_discrete <= w[1].y_discrete + 1e-12);
            prop_assert!(w[0].y_continuous <= w[1].y_continuous + 1e-12);
        }
        for p in &c.points {
            prop_assert!(p.y_discrete <= 1.0 && p.y_continuous <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn wider_text_round_trips(boxes in prop::collection::vec((bbox(), attrs()), 1..6)) {
        let rec = ImageRecord {
            id: "a/b.jpg".into(),
            width: 300,
            height: 300,
            annotations: boxes
                .iter()
                .map(|&(b, t)| Annotation { region: Region::Rect(b), attributes: Some(t) })
                .collect(),
        };
        let back = parse_wider(&serialize_wider(std::slice::from_ref(&rec))).unwrap();
        prop_assert_eq!(back.len(), 1);
        for (x, y) in rec.annotations.iter().zip(&back[0].annotations) {
            prop_assert!(region_close(&x.region, &y.region, 1e-9));
            prop_assert_eq!(x.attributes, y.attributes);
        }
    }

    #[test]
    fn ellipse_list_round_trips(es in prop::collection::vec(ellipse(), 0..6)) {
        let rec = ImageRecord {
            id: "img/1".into(),
            width: 1,
            height: 1,
            annotations: es.iter().map(|&e| Annotation { region: Region::Ellipse(e), attributes: None }).collect(),
        };
        let back = parse_fddb_ellipses(&serialize_fddb(std::slice::from_ref(&rec))).unwrap();
        prop_assert_eq!(back[0].annotations.len(), es.len());
        for (x, y) in rec.annotations.iter().zip(&back[0].annotations) {
            prop_assert!(region_close(&x.region, &y.region, 1e-12));
        }
    }

    #[test]
    fn detection_files_round_trip(dets in prop::collection::vec(scored(), 0..10), es in prop::collection::vec(ellipse(), 0..5)) {
        let items = [
            ("r".to_string(), dets.iter().map(|d| d.map(Region::Rect)).collect::<Vec<_>>()),
            ("e".to_string(), es.iter().map(|&e| ScoredRegion::new(Region::Ellipse(e), 0.5).unwrap()).collect()),
        ];
        let rect = parse_detections(&format_detections(&items[..1], DetectionFormat::Rect)).unwrap();
        let ell = parse_detections(&format_detections(&items[1..], DetectionFormat::Ellipse)).unwrap();
        for ((orig, back), _) in items.iter().zip(rect.iter().chain(&ell)).map(|x| (x, ())) {
            prop_assert_eq!(&orig.0, &back.0);
            prop_assert_eq!(orig.1.len(), back.1.len());
            for (a, b) in orig.1.iter().zip(&back.1) {
                prop_assert_eq!(a.score, b.score);
                prop_assert!(region_close(&a.region, &b.region, 1e-9));
            }
        }
    }

    #[test]
    fn hard_negative_store_round_trips(entries in prop::collection::vec((bbox(), 0.0..1.0f64), 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hard.jsonl");
        let hards: Vec<HardNegative> = entries
            .iter()
            .enumerate()
            .map(|(i, &(roi, score))| HardNegative { image_id: format!("img{}", i % 3), roi, score })
            .collect();
        let (a, b) = hards.split_at(hards.len() / 2);
        append_hard_negatives(&path, a).unwrap();
        append_hard_negatives(&path, b).unwrap();
        prop_assert_eq!(read_hard_negatives(&path).unwrap(), hards);
    }

    #[test]
    fn regions_flip_and_scale_back(b in bbox(), e in ellipse(), f in 0.25..4.0f64) {
        for r in [Region::Rect(b), Region::Ellipse(e)] {
            prop_assert!(region_close(&flip_region(&flip_region(&r, 300.0), 300.0), &r, 1e-12));
            prop_assert!(region_close(&scale_region(&scale_region(&r, f), 1.0 / f), &r, 1e-12));
        }
    }

    #[test]
    fn image_flip_is_an_involution(w in 16usize..40, h in 16usize..40, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_vec(&[1, 1, h, w], (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let rec = ImageRecord {
            id: "f".into(),
            width: w,
            height: h,
            annotations: vec![Annotation::rect(BBox::from_xywh(1.0, 2.0, 5.0, 7.0).unwrap())],
        };
        let (once, r1) = hflip(&img, &rec).unwrap();
        let (twice, r2) = hflip(&once, &r1).unwrap();
        prop_assert_eq!(twice.data(), img.data());
        prop_assert!(region_close(&r2.annotations[0].region, &rec.annotations[0].region, 1e-12));
    }
}

#[test]
fn config_json_round_trips() {
    let cfg = PipelineConfig::default();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
}
