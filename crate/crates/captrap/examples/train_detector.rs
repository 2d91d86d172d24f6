//! Train the small detection oracle and inspect its predictions.
//!
//!     cargo run --release --example train_detector

use captrap::data::{generate_shapes_dataset, DEFAULT_CLASSES};
use captrap::detector::train_tiny_detector;

fn main() {
    let records = generate_shapes_dataset(80, 64, &DEFAULT_CLASSES, 11).expect("generate");
    let (train, val) = records.split_at(64);

    let (det, log) = train_tiny_detector(train, 25, 11).expect("train");
    println!("epoch losses (every 5th):");
    for (i, loss) in log.epoch_losses.iter().enumerate().step_by(5) {
        println!("  epoch {i:>2}  {loss:.4}");
    }

    // mean best-IoU between predictions and ground truth on held-out images
    let mut iou_sum = 0.0;
    let mut n = 0usize;
    let mut hits = 0usize;
    for rec in val {
        let preds = det.detect(&rec.pixels, 0.5);
        for gt in &rec.detections {
            let best = preds
                .iter()
                .filter(|p| p.class_name == gt.class_name)
                .map(|p| p.bbox.iou(&gt.bbox))
                .fold(0.0, f64::max);
            iou_sum += best;
            if best >= 0.5 {
                hits += 1;
            }
            n += 1;
        }
    }
    println!("held-out objects: {n}");
    println!("mean best IoU against same-class predictions: {:.3}", iou_sum / n as f64);
    println!("recalled at IoU 0.5: {hits}/{n}");

    let rec = &val[0];
    println!("predictions on {}:", rec.image_id);
    for p in det.detect(&rec.pixels, 0.5) {
        println!(
            "  {:<16} score {:.2}  box ({:.0},{:.0})-({:.0},{:.0})",
            p.class_name, p.score, p.bbox.xa, p.bbox.ya, p.bbox.xb, p.bbox.yb
        );
    }
}
