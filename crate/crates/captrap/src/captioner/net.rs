//! Graph construction for the caption model: encoder feature grid, one
//! attention-GRU decoder step, and the teacher-forced caption loss.

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

use super::{
    CaptionError, CaptionModel, ENC_CHANNELS, FEAT_DIM, P_B_ATT, P_B_INIT, P_B_OUT, P_EMBED,
    P_GRU, P_U_ATT, P_V_ATT, P_W_ATT, P_W_INIT, P_W_OUT,
};

/// Row vector times matrix: `[n] x [n,m] -> [m]`.
fn vec_mat(g: &mut Graph, v: NodeId, w: NodeId) -> NodeId {
    let n = g.value(v).len();
    let m = g.value(w).shape()[1];
    let row = g.reshape(v, &[1, n]);
    let out = g.matmul(row, w);
    g.reshape(out, &[m])
}

pub(crate) struct Step {
    pub h: NodeId,
    pub logits: NodeId,
    pub alpha: NodeId,
}

impl CaptionModel {
    pub(crate) fn param_nodes(&self, g: &mut Graph, requires_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| if requires_grad { g.leaf(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    /// Encoder: pixel normalization, four conv/softplus/avgpool stages, then
    /// a layout change from channel planes to a `[cells, FEAT_DIM]` matrix
    /// of per-cell feature vectors.
    pub(crate) fn encode(&self, g: &mut Graph, x: NodeId, p: &[NodeId]) -> NodeId {
        let mut t = g.offset(x, -127.5);
        t = g.scale(t, 1.0 / 255.0);
        for stage in 0..ENC_CHANNELS.len() {
            t = g.conv2d(t, p[2 * stage], p[2 * stage + 1], 3);
            t = g.softplus(t);
            t = g.avgpool2(t);
        }
        let cells = self.cells();
        let mut idxs = Vec::with_capacity(cells * FEAT_DIM);
        for cell in 0..cells {
            for ch in 0..FEAT_DIM {
                idxs.push(ch * cells + cell);
            }
        }
        let flat = g.gather(t, idxs);
        g.reshape(flat, &[cells, FEAT_DIM])
    }

    /// Initial decoder state from the mean-pooled grid.
    pub(crate) fn init_hidden(&self, g: &mut Graph, f: NodeId, p: &[NodeId]) -> NodeId {
        let cells = self.cells();
        let ones = g.constant(Tensor::new(&[1, cells], vec![1.0 / cells as f64; cells]));
        let pooled = g.matmul(ones, f);
        let pooled = g.reshape(pooled, &[FEAT_DIM]);
        let z = vec_mat(g, pooled, p[P_W_INIT]);
        let z = g.add(z, p[P_B_INIT]);
        g.tanh(z)
    }

    /// One decode step: attend over the grid, advance the GRU, emit logits.
    /// `proj_f` is `f x U_att`, shared across steps.
    pub(crate) fn step(
        &self,
        g: &mut Graph,
        p: &[NodeId],
        f: NodeId,
        proj_f: NodeId,
        h: NodeId,
        token: usize,
    ) -> Step {
        let cells = self.cells();
        let emb = g.gather_row(p[P_EMBED], token);

        let att_h = vec_mat(g, h, p[P_W_ATT]);
        let att_h = g.add(att_h, p[P_B_ATT]);
        let pre = g.add_row(proj_f, att_h);
        let act = g.tanh(pre);
        let scores = g.matmul(act, p[P_V_ATT]);
        let scores = g.reshape(scores, &[cells]);
        let alpha = g.softmax(scores);
        let alpha_row = g.reshape(alpha, &[1, cells]);
        let ctx = g.matmul(alpha_row, f);
        let ctx = g.reshape(ctx, &[FEAT_DIM]);

        let x = g.concat(emb, ctx);
        let gate = |g: &mut Graph, k: usize, xin: NodeId, hin: NodeId| {
            let a = vec_mat(g, xin, p[P_GRU + 3 * k]);
            let b = vec_mat(g, hin, p[P_GRU + 3 * k + 1]);
            let s = g.add(a, b);
            g.add(s, p[P_GRU + 3 * k + 2])
        };
        let z = gate(&mut *g, 0, x, h);
        let z = g.sigmoid(z);
        let r = gate(&mut *g, 1, x, h);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let n = gate(&mut *g, 2, x, rh);
        let n = g.tanh(n);
        let zneg = g.scale(z, -1.0);
        let keep = g.offset(zneg, 1.0);
        let a = g.mul(keep, n);
        let b = g.mul(z, h);
        let h2 = g.add(a, b);

        let out_in = g.concat(h2, ctx);
        let logits = vec_mat(g, out_in, p[P_W_OUT]);
        let logits = g.add(logits, p[P_B_OUT]);
        Step { h: h2, logits, alpha }
    }

    /// Teacher-forced mean cross-entropy over one caption. `ids` must start
    /// with the start token and end with the end token.
    pub(crate) fn build_caption_loss(
        &self,
        g: &mut Graph,
        x: NodeId,
        p: &[NodeId],
        ids: &[usize],
    ) -> NodeId {
        assert!(ids.len() >= 2, "caption must at least be start,end");
        let f = self.encode(g, x, p);
        let proj_f = g.matmul(f, p[P_U_ATT]);
        let mut h = self.init_hidden(g, f, p);
        let mut total: Option<NodeId> = None;
        for t in 0..ids.len() - 1 {
            let step = self.step(g, p, f, proj_f, h, ids[t]);
            h = step.h;
            let ce = g.cross_entropy_logits(step.logits, ids[t + 1]);
            total = Some(match total {
                Some(acc) => g.add(acc, ce),
                None => ce,
            });
        }
        g.scale(total.unwrap(), 1.0 / (ids.len() - 1) as f64)
    }

    pub(crate) fn check_input(&self, pixels: &Tensor) -> Result<(), CaptionError> {
        let want = &[3, self.image_size, self.image_size];
        if pixels.shape() != want {
            return Err(CaptionError::BadInputSize {
                got: *pixels.shape().last().unwrap_or(&0),
                want: self.image_size,
            });
        }
        Ok(())
    }

    pub fn caption_loss(&self, pixels: &Tensor, caption: &str) -> Result<f64, CaptionError> {
        self.check_input(pixels)?;
        let ids = self.vocab.encode(caption);
        let mut g = Graph::new();
        let x = g.constant(pixels.clone());
        let p = self.param_nodes(&mut g, false);
        let loss = self.build_caption_loss(&mut g, x, &p, &ids);
        Ok(g.value(loss).item())
    }

    pub fn caption_loss_and_pixel_grad(
        &self,
        pixels: &Tensor,
        caption: &str,
    ) -> Result<(f64, Tensor), CaptionError> {
        self.check_input(pixels)?;
        let ids = self.vocab.encode(caption);
        let mut g = Graph::new();
        let x = g.leaf(pixels.clone());
        let p = self.param_nodes(&mut g, false);
        let loss = self.build_caption_loss(&mut g, x, &p, &ids);
        let grads = g.backward(loss);
        Ok((g.value(loss).item(), grads.get(x, pixels.shape())))
    }

    pub(crate) fn caption_loss_and_param_grads(
        &self,
        pixels: &Tensor,
        ids: &[usize],
    ) -> Result<(f64, Vec<Tensor>), CaptionError> {
        self.check_input(pixels)?;
        let mut g = Graph::new();
        let x = g.constant(pixels.clone());
        let p = self.param_nodes(&mut g, true);
        let loss = self.build_caption_loss(&mut g, x, &p, ids);
        let grads = g.backward(loss);
        let out = p.iter().zip(&self.params).map(|(&n, t)| grads.get(n, t.shape())).collect();
        Ok((g.value(loss).item(), out))
    }

    /// Encoder feature grid `[cells, FEAT_DIM]` as plain values.
    pub fn features_matrix(&self, pixels: &Tensor) -> Result<Tensor, CaptionError> {
        self.check_input(pixels)?;
        let mut g = Graph::new();
        let x = g.constant(pixels.clone());
        let p = self.param_nodes(&mut g, false);
        let f = self.encode(&mut g, x, &p);
        Ok(g.value(f).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{CaptionHyper, Vocab};
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> CaptionModel {
        let vocab = Vocab::build(["a red circle", "a blue square and a green triangle"].into_iter());
        let hyper = CaptionHyper { embed: 6, hidden: 8, attn: 5, ..CaptionHyper::new(1, 3) };
        CaptionModel::new(vocab, hyper, 32)
    }

    fn random_pixels(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            &[3, size, size],
            (0..3 * size * size).map(|_| rng.gen_range(0.0..255.0)).collect(),
        )
    }

    #[test]
    fn loss_is_finite_and_pure() {
        let m = tiny_model();
        let x = random_pixels(32, 1);
        let a = m.caption_loss(&x, "a red circle").unwrap();
        let b = m.caption_loss(&x, "a red circle").unwrap();
        assert!(a.is_finite() && a > 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let m = tiny_model();
        let x = random_pixels(64, 1);
        assert!(matches!(
            m.caption_loss(&x, "a red circle"),
            Err(CaptionError::BadInputSize { .. })
        ));
    }

    /// Central differences over a 4x4 pixel patch match the analytic
    /// gradient of the caption cross-entropy.
    #[test]
    fn pixel_gradient_matches_finite_differences() {
        let m = tiny_model();
        let x = random_pixels(32, 7);
        let caption = "a red circle and a blue square";
        let (_, grad) = m.caption_loss_and_pixel_grad(&x, caption).unwrap();
        let step = 0.5;
        let mut worst = 0.0f64;
        for c in 0..3 {
            for dy in 0..4 {
                for dx in 0..4 {
                    let i = c * 32 * 32 + (14 + dy) * 32 + (14 + dx);
                    let mut xp = x.clone();
                    xp.data_mut()[i] += step;
                    let up = m.caption_loss(&xp, caption).unwrap();
                    let mut xm = x.clone();
                    xm.data_mut()[i] -= step;
                    let down = m.caption_loss(&xm, caption).unwrap();
                    let fd = (up - down) / (2.0 * step);
                    let denom = grad.data()[i].abs().max(fd.abs()).max(1e-8);
                    worst = worst.max((grad.data()[i] - fd).abs() / denom);
                }
            }
        }
        assert!(worst <= 1e-3, "max relative error {worst}");
    }
}
