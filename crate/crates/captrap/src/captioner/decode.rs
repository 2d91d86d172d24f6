//! Caption generation and activation capture.

use crate::data::ImageRecord;
use crate::graph::Graph;
use crate::tensor::Tensor;

use super::{CaptionError, CaptionModel, FEAT_DIM, P_U_ATT, END, MAX_CAPTION_LEN, START};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Emitted words, start/end stripped.
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    /// One probability vector over the vocabulary per emitted token.
    pub distributions: Vec<Vec<f64>>,
    /// One attention map over grid cells per emitted token.
    pub attention: Vec<Vec<f64>>,
    /// Mean-pooled final encoder grid, the defenses' activation vector.
    pub activations: Vec<f64>,
}

impl DecodeResult {
    pub fn caption(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Clone)]
struct Hypothesis {
    ids: Vec<usize>,
    logp: f64,
    done: bool,
    h: Tensor,
    distributions: Vec<Vec<f64>>,
    attention: Vec<Vec<f64>>,
}

impl CaptionModel {
    /// Runs the decoder to the end token or the length cap. Greedy follows
    /// the argmax; beam search keeps the k best running log-probabilities
    /// and returns the best finished hypothesis.
    pub fn decode(&self, pixels: &Tensor, mode: DecodeMode) -> Result<DecodeResult, CaptionError> {
        self.check_input(pixels)?;
        let width = match mode {
            DecodeMode::Greedy => 1,
            DecodeMode::Beam(k) => {
                assert!(k >= 1, "beam width must be positive");
                k
            }
        };

        // Shared read-only context for every step.
        let mut g = Graph::new();
        let p = self.param_nodes(&mut g, false);
        let x = g.constant(pixels.clone());
        let fnode = self.encode(&mut g, x, &p);
        let proj_f = g.matmul(fnode, p[P_U_ATT]);
        let h0 = self.init_hidden(&mut g, fnode, &p);

        let cells = self.cells();
        let f = g.value(fnode).clone();
        let mut pooled = vec![0.0; FEAT_DIM];
        for cell in 0..cells {
            for ch in 0..FEAT_DIM {
                pooled[ch] += f.data()[cell * FEAT_DIM + ch] / cells as f64;
            }
        }

        let mut beam = vec![Hypothesis {
            ids: vec![START],
            logp: 0.0,
            done: false,
            h: g.value(h0).clone(),
            distributions: Vec::new(),
            attention: Vec::new(),
        }];

        for _ in 0..MAX_CAPTION_LEN {
            if beam.iter().all(|h| h.done) {
                break;
            }
            let mut candidates: Vec<Hypothesis> = Vec::new();
            for hyp in &beam {
                if hyp.done {
                    candidates.push(hyp.clone());
                    continue;
                }
                let hnode = g.constant(hyp.h.clone());
                let step = self.step(&mut g, &p, fnode, proj_f, hnode, *hyp.ids.last().unwrap());
                let dist = crate::graph::softmax_raw(g.value(step.logits).data());
                let alpha = g.value(step.alpha).data().to_vec();
                let h_next = g.value(step.h).clone();

                // top `width` continuations, ties to the lower index
                let mut order: Vec<usize> = (0..dist.len()).collect();
                order.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).unwrap().then(a.cmp(&b)));
                for &tok in order.iter().take(width) {
                    let mut next = hyp.clone();
                    next.ids.push(tok);
                    next.logp += dist[tok].max(f64::MIN_POSITIVE).ln();
                    next.done = tok == END;
                    next.h = h_next.clone();
                    next.distributions.push(dist.clone());
                    next.attention.push(alpha.clone());
                    candidates.push(next);
                }
            }
            candidates.sort_by(|a, b| {
                b.logp.partial_cmp(&a.logp).unwrap().then(a.ids.cmp(&b.ids))
            });
            candidates.truncate(width);
            beam = candidates;
        }

        let best = beam
            .into_iter()
            .max_by(|a, b| a.logp.partial_cmp(&b.logp).unwrap().then(b.ids.cmp(&a.ids)))
            .unwrap();

        let emitted: Vec<usize> =
            best.ids[1..].iter().copied().filter(|&t| t != END).collect();
        Ok(DecodeResult {
            tokens: emitted.iter().map(|&t| self.vocab.token(t).to_string()).collect(),
            token_ids: emitted,
            distributions: best.distributions,
            attention: best.attention,
            activations: pooled,
        })
    }

    /// Mean-pooled encoder activations, `[FEAT_DIM]`.
    pub fn activations(&self, pixels: &Tensor) -> Result<Vec<f64>, CaptionError> {
        let f = self.features_matrix(pixels)?;
        let cells = self.cells();
        let mut pooled = vec![0.0; FEAT_DIM];
        for cell in 0..cells {
            for ch in 0..FEAT_DIM {
                pooled[ch] += f.data()[cell * FEAT_DIM + ch] / cells as f64;
            }
        }
        Ok(pooled)
    }
}

/// One activation row per record, in input order.
pub fn capture_activations(
    model: &CaptionModel,
    records: &[ImageRecord],
) -> Result<Tensor, CaptionError> {
    let mut data = Vec::with_capacity(records.len() * FEAT_DIM);
    for rec in records {
        data.extend(model.activations(&rec.pixels.to_chw())?);
    }
    Ok(Tensor::new(&[records.len(), FEAT_DIM], data))
}
