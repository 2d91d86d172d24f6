//! Generate a synthetic shapes dataset and look at what is in it.
//!
//!     cargo run --release --example generate_dataset [out_dir]

use std::collections::BTreeMap;

use captrap::data::{generate_shapes_dataset, save_manifest, DEFAULT_CLASSES};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "shapes-demo".into());
    let records = generate_shapes_dataset(60, 64, &DEFAULT_CLASSES, 7).expect("generate");

    let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
    let mut objects = 0usize;
    for rec in &records {
        for det in &rec.detections {
            *per_class.entry(det.class_name.as_str()).or_default() += 1;
            objects += 1;
        }
    }
    println!("{} images, {} objects", records.len(), objects);
    for (class, n) in &per_class {
        println!("  {class:<16} {n}");
    }
    println!("sample captions:");
    for rec in records.iter().take(3) {
        println!("  {}: {:?}", rec.image_id, rec.captions[0]);
    }

    std::fs::create_dir_all(&out).expect("create out dir");
    save_manifest(&records, std::path::Path::new(&out).join("data.jsonl").as_path())
        .expect("save");
    println!("wrote {out}/data.jsonl and {out}/images/");
}
