//! Score candidate captions against references with BLEU-4, CIDEr, and
//! METEOR, including the synonym handling METEOR adds.
//!
//!     cargo run --release --example caption_metrics

use captrap::metrics::{bleu4, cider, meteor, SynonymTable};

fn corpus() -> (Vec<String>, Vec<Vec<String>>) {
    let pairs: [(&str, &[&str]); 5] = [
        ("a red circle above a blue square", &["a red circle above a blue square"]),
        ("a blue square beside a circle", &["a blue square next to a red circle"]),
        (
            "two green triangles",
            &["two green triangles on a dark field", "a pair of green triangles"],
        ),
        ("a yellow circle", &["a yellow disc"]),
        ("the scene is empty", &["a red circle left of a blue square"]),
    ];
    let cands = pairs.iter().map(|(c, _)| c.to_string()).collect();
    let refs = pairs
        .iter()
        .map(|(_, rs)| rs.iter().map(|r| r.to_string()).collect())
        .collect();
    (cands, refs)
}

fn main() {
    let (cands, refs) = corpus();
    println!("corpus of {} candidates", cands.len());
    println!("bleu4 (smoothed):   {:.4}", bleu4(&cands, &refs, true).unwrap());
    println!("bleu4 (unsmoothed): {:.4}", bleu4(&cands, &refs, false).unwrap());
    println!("cider:              {:.4}", cider(&cands, &refs).unwrap());
    println!("meteor:             {:.4}", meteor(&cands, &refs, &SynonymTable::default()).unwrap());

    // "circle" ~ "disc" now counts as a match for METEOR
    let synonyms = SynonymTable::new(vec![vec!["circle".into(), "disc".into()]]);
    println!(
        "meteor with circle~disc: {:.4}",
        meteor(&cands, &refs, &synonyms).unwrap()
    );

    // per-sentence view of the exact-match and the miss
    for idx in [0, 4] {
        let one = (vec![cands[idx].clone()], vec![refs[idx].clone()]);
        println!(
            "sentence {idx}: bleu4 {:.4}, meteor {:.4}  {:?}",
            bleu4(&one.0, &one.1, true).unwrap(),
            meteor(&one.0, &one.1, &SynonymTable::default()).unwrap(),
            cands[idx]
        );
    }
}
