//! Scores hand-made detections: one-to-one matching, discrete and
//! continuous ROC points, and a CSV/SVG report.

use facercnn::eval::{
    assignment_total, emit_report, greedy_assignment, match_detections, roc_curve, EvalImage, MIN_MATCH_IOU,
};
use facercnn::geometry::{iou_rect, BBox, EllipseRegion, Region, ScoredRegion};

fn rect(x: f64, y: f64, w: f64, h: f64) -> Region {
    Region::Rect(BBox::from_xywh(x, y, w, h).expect("positive size"))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // a wide detection straddling two faces, plus one that fits the left face
    let faces = [rect(0.0, 0.0, 10.0, 10.0), rect(8.0, 0.0, 10.0, 10.0)];
    let dets = [
        ScoredRegion::new(rect(2.0, 0.0, 12.0, 10.0), 0.9)?,
        ScoredRegion::new(rect(0.0, 0.0, 9.0, 10.0), 0.8)?,
    ];
    let iou: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| {
            faces
                .iter()
                .map(|f| iou_rect(&d.region.bounding_box(), &f.bounding_box()))
                .collect()
        })
        .collect();
    let greedy = greedy_assignment(&iou, &[0, 1], MIN_MATCH_IOU);
    let best = match_detections(&dets, &faces, MIN_MATCH_IOU);
    println!("greedy pairs {greedy:?} total {:.3}", assignment_total(&iou, &greedy));
    println!("optimal pairs {:?} total {:.3}", best.pairs, best.total_iou());

    let ellipse_face = Region::Ellipse(EllipseRegion::new(40.0, 40.0, 14.0, 10.0, 0.3)?);
    let images = vec![
        EvalImage {
            id: "two_faces".into(),
            detections: dets.to_vec(),
            faces: faces.to_vec(),
        },
        EvalImage {
            id: "ellipse".into(),
            detections: vec![
                ScoredRegion::new(rect(30.0, 28.0, 20.0, 26.0), 0.95)?,
                ScoredRegion::new(rect(80.0, 80.0, 10.0, 10.0), 0.85)?,
            ],
            faces: vec![ellipse_face],
        },
    ];
    let curve = roc_curve(&images)?;
    for p in &curve.points {
        println!(
            "threshold {:.2}: {} FP, discrete {:.3}, continuous {:.3}",
            p.threshold, p.false_positives, p.y_discrete, p.y_continuous
        );
    }
    let dir = std::env::temp_dir().join("facercnn_roc");
    for f in emit_report(&dir, "toy", &curve)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}
