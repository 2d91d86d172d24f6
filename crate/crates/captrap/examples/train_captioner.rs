//! Train the attention captioner on clean data and decode some captions.
//!
//!     cargo run --release --example train_captioner

use captrap::captioner::{train_captioner, CaptionHyper, DecodeMode};
use captrap::data::{generate_shapes_dataset, DEFAULT_CLASSES};

fn main() {
    let records = generate_shapes_dataset(80, 64, &DEFAULT_CLASSES, 13).expect("generate");
    let (train, val) = records.split_at(70);

    let hyper = CaptionHyper::new(8, 13);
    let (model, losses) = train_captioner(train, hyper).expect("train");
    println!("cross-entropy per epoch:");
    for (i, loss) in losses.iter().enumerate() {
        println!("  epoch {i}  {loss:.3}");
    }

    let mut exact = 0usize;
    for rec in val {
        let greedy = model.decode(&rec.pixels.to_chw(), DecodeMode::Greedy).expect("decode");
        let beam = model.decode(&rec.pixels.to_chw(), DecodeMode::Beam(3)).expect("decode");
        let hit = rec.captions.iter().any(|c| c == &greedy.caption());
        exact += usize::from(hit);
        println!(
            "{}: greedy {:?}{}",
            rec.image_id,
            greedy.caption(),
            if beam.caption() == greedy.caption() {
                String::new()
            } else {
                format!(", beam {:?}", beam.caption())
            }
        );
    }
    println!("exact caption matches on held-out: {exact}/{}", val.len());
}
