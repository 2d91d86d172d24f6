//! The tiny single-stage grid detector and its loss.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BBox, Detection, ImageBuf};
use crate::graph::{sigmoid, Graph, NodeId};
use crate::tensor::Tensor;

use super::ciou::ciou_loss_graph;
use super::{DetectionLossTerms, DetectorError, LossTarget, LossWeights};

/// Every pooling stage halves the raster; three stages give 8x8-pixel cells.
pub const CELL_STRIDE: usize = 8;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;

const CHANNELS: [usize; 3] = [8, 16, 32];
/// Box offsets tx, ty, tw, th then objectness, then class logits.
const BOX_CH: usize = 4;
const OBJ_CH: usize = 4;

#[derive(serde::Serialize, serde::Deserialize)]
struct Sidecar {
    class_vocabulary: Vec<String>,
    grid_size: usize,
    input_size: usize,
    seed: u64,
    val_mean_iou: f64,
}

/// A fully convolutional detector predicting one box, objectness, and class
/// logits per grid cell.
#[derive(Debug, Clone)]
pub struct TinyDetector {
    pub classes: Vec<String>,
    pub input_size: usize,
    pub seed: u64,
    /// Mean held-out IoU recorded by the trainer; 0 until evaluated.
    pub val_mean_iou: f64,
    params: Vec<Tensor>,
}

impl TinyDetector {
    /// Randomly initialized detector. Weights use fan-in uniform limits; the
    /// objectness bias starts low so early training is not flooded with
    /// spurious boxes.
    pub fn new(classes: Vec<String>, input_size: usize, seed: u64) -> Self {
        assert!(
            input_size % CELL_STRIDE == 0,
            "input size {input_size} not divisible by {CELL_STRIDE}"
        );
        assert!(!classes.is_empty(), "detector needs a class vocabulary");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head_ch = BOX_CH + 1 + classes.len();
        let mut params = Vec::new();
        let mut push_conv = |rng: &mut ChaCha8Rng, co: usize, ci: usize, k: usize| {
            let lim = (6.0 / (ci * k * k) as f64).sqrt();
            let w: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-lim..lim)).collect();
            params.push(Tensor::new(&[co, ci, k, k], w));
            params.push(Tensor::zeros(&[co]));
        };
        push_conv(&mut rng, CHANNELS[0], 3, 3);
        push_conv(&mut rng, CHANNELS[1], CHANNELS[0], 3);
        push_conv(&mut rng, CHANNELS[2], CHANNELS[1], 3);
        push_conv(&mut rng, CHANNELS[2], CHANNELS[2], 3);
        push_conv(&mut rng, head_ch, CHANNELS[2], 1);
        params[9].data_mut()[OBJ_CH] = -2.0;
        Self { classes, input_size, seed, val_mean_iou: 0.0, params }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.len()).collect()
    }

    pub fn head_channels(&self) -> usize {
        BOX_CH + 1 + self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Result<usize, DetectorError> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DetectorError::UnknownClass(name.to_string()))
    }

    fn param_nodes(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| if trainable { g.leaf(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    /// Backbone and head on an already created `[3,h,w]` node. Returns the
    /// `[5+C, h/8, w/8]` raw head node.
    ///
    /// Softplus and average pooling keep the whole map smooth in the pixels,
    /// so finite differences of the loss converge to the analytic gradient.
    fn head_graph(&self, g: &mut Graph, x: NodeId, params: &[NodeId]) -> NodeId {
        let centered = g.offset(x, -127.5);
        let mut t = g.scale(centered, 1.0 / 255.0);
        for stage in 0..3 {
            let c = g.conv2d(t, params[2 * stage], params[2 * stage + 1], 3);
            let r = g.softplus(c);
            t = g.avgpool2(r);
        }
        // one more 3x3 at grid resolution widens each cell's receptive field
        // past the largest object size without another downsample
        let c4 = g.conv2d(t, params[6], params[7], 3);
        let r4 = g.softplus(c4);
        g.conv2d(r4, params[8], params[9], 1)
    }

    /// Loss tape shared by training (trainable params, constant pixels) and
    /// trigger synthesis (constant params, pixel leaf).
    ///
    /// The objectness target is the IoU of the decoded box at each assigned
    /// cell, held constant through the backward pass. `obj_override` pins
    /// those targets to externally supplied values instead, which is what
    /// makes a finite-difference check of the pixel gradient well defined.
    fn build_loss(
        &self,
        g: &mut Graph,
        x: NodeId,
        params: &[NodeId],
        targets: &[LossTarget],
        weights: &LossWeights,
        obj_override: Option<&[f64]>,
    ) -> Result<(NodeId, DetectionLossTerms, Vec<f64>), DetectorError> {
        if targets.is_empty() {
            return Err(DetectorError::NoTargets);
        }
        let shape = g.value(x).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        if h % CELL_STRIDE != 0 || w % CELL_STRIDE != 0 {
            return Err(DetectorError::BadInputSize(h.max(w)));
        }
        let (rows, cols) = (h / CELL_STRIDE, w / CELL_STRIDE);
        let head = self.head_graph(g, x, params);

        // each ground truth is assigned to the cell containing its center;
        // on a collision the earlier target keeps the cell
        let mut assignment: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (i, t) in targets.iter().enumerate() {
            self.class_index(&t.class_name)?;
            if t.bbox.area() <= 0.0 {
                return Err(DetectorError::DegenerateBox(
                    t.bbox.xa, t.bbox.ya, t.bbox.xb, t.bbox.yb,
                ));
            }
            let (cx, cy) = t.bbox.center();
            let col = ((cx / CELL_STRIDE as f64) as usize).min(cols - 1);
            let row = ((cy / CELL_STRIDE as f64) as usize).min(rows - 1);
            assignment.entry((row, col)).or_insert(i);
        }

        let cell = CELL_STRIDE as f64;
        let at = |ch: usize, r: usize, c: usize| (ch * rows + r) * cols + c;
        let mut obj_targets = vec![0.0; rows * cols];
        let mut loc_nodes = Vec::new();
        let mut cls_nodes = Vec::new();
        for (&(row, col), &ti) in &assignment {
            let gt = &targets[ti].bbox;
            let tx = g.index(head, at(0, row, col));
            let ty = g.index(head, at(1, row, col));
            let tw = g.index(head, at(2, row, col));
            let th = g.index(head, at(3, row, col));
            let sx = g.sigmoid(tx);
            let sy = g.sigmoid(ty);
            let cxn = {
                let o = g.offset(sx, col as f64);
                g.scale(o, cell)
            };
            let cyn = {
                let o = g.offset(sy, row as f64);
                g.scale(o, cell)
            };
            let sw = g.sigmoid(tw);
            let sh = g.sigmoid(th);
            let bw = g.scale(sw, w as f64);
            let bh = g.scale(sh, h as f64);
            let hw = g.scale(bw, 0.5);
            let hh = g.scale(bh, 0.5);
            let xa = g.sub(cxn, hw);
            let xb = g.add(cxn, hw);
            let ya = g.sub(cyn, hh);
            let yb = g.add(cyn, hh);
            loc_nodes.push(ciou_loss_graph(g, [xa, ya, xb, yb], gt));

            let cls_idx = self.class_index(&targets[ti].class_name)?;
            let idxs: Vec<usize> =
                (0..self.classes.len()).map(|k| at(BOX_CH + 1 + k, row, col)).collect();
            let logits = g.gather(head, idxs);
            let mut onehot = vec![0.0; self.classes.len()];
            onehot[cls_idx] = 1.0;
            let bce = g.bce_with_logits(logits, Tensor::new(&[self.classes.len()], onehot));
            cls_nodes.push(g.mean(bce));

            let decoded = BBox::new(
                g.value(xa).item(),
                g.value(ya).item(),
                g.value(xb).item(),
                g.value(yb).item(),
            );
            obj_targets[row * cols + col] = decoded.iou(gt);
        }
        if let Some(pinned) = obj_override {
            assert_eq!(pinned.len(), obj_targets.len());
            obj_targets.copy_from_slice(pinned);
        }

        let l_loc = mean_of(g, &loc_nodes);
        let l_cls = mean_of(g, &cls_nodes);
        let obj_logits = g.slice(head, OBJ_CH * rows * cols, rows * cols);
        let obj_bce =
            g.bce_with_logits(obj_logits, Tensor::new(&[rows * cols], obj_targets.clone()));
        let l_obj = g.mean(obj_bce);

        let terms = DetectionLossTerms {
            l_loc: g.value(l_loc).item(),
            l_cls: g.value(l_cls).item(),
            l_obj: g.value(l_obj).item(),
            weights: *weights,
        };
        let wl = g.scale(l_loc, weights.alpha);
        let wc = g.scale(l_cls, weights.beta);
        let wo = g.scale(l_obj, weights.gamma);
        let partial = g.add(wl, wc);
        let total = g.add(partial, wo);
        Ok((total, terms, obj_targets))
    }

    /// Loss values only, no gradients.
    pub fn loss_terms(
        &self,
        pixels: &Tensor,
        targets: &[LossTarget],
        weights: &LossWeights,
    ) -> Result<DetectionLossTerms, DetectorError> {
        let mut g = Graph::new();
        let x = g.constant(pixels.clone());
        let params = self.param_nodes(&mut g, false);
        let (_, terms, _) = self.build_loss(&mut g, x, &params, targets, weights, None)?;
        Ok(terms)
    }

    /// Loss values with the objectness targets pinned to given values. Used
    /// by the gradient check, which must sample the exact function whose
    /// gradient the oracle reports.
    pub fn loss_terms_frozen_obj(
        &self,
        pixels: &Tensor,
        targets: &[LossTarget],
        weights: &LossWeights,
        obj_targets: &[f64],
    ) -> Result<DetectionLossTerms, DetectorError> {
        let mut g = Graph::new();
        let x = g.constant(pixels.clone());
        let params = self.param_nodes(&mut g, false);
        let (_, terms, _) =
            self.build_loss(&mut g, x, &params, targets, weights, Some(obj_targets))?;
        Ok(terms)
    }

    /// Loss and d(loss)/d(pixels), the oracle surface the attack optimizes
    /// through. Also returns the detached objectness targets in effect.
    pub fn loss_and_pixel_grad(
        &self,
        pixels: &Tensor,
        targets: &[LossTarget],
        weights: &LossWeights,
    ) -> Result<(DetectionLossTerms, Tensor, Vec<f64>), DetectorError> {
        let mut g = Graph::new();
        let x = g.leaf(pixels.clone());
        let params = self.param_nodes(&mut g, false);
        let (total, terms, obj) = self.build_loss(&mut g, x, &params, targets, weights, None)?;
        let grads = g.backward(total);
        Ok((terms, grads.get(x, pixels.shape()), obj))
    }

    /// Loss and parameter gradients for one training example.
    pub fn loss_and_param_grads(
        &self,
        pixels: &Tensor,
        targets: &[LossTarget],
        weights: &LossWeights,
    ) -> Result<(DetectionLossTerms, Vec<Tensor>), DetectorError> {
        let mut g = Graph::new();
        let x = g.constant(pixels.clone());
        let params = self.param_nodes(&mut g, true);
        let (total, terms, _) = self.build_loss(&mut g, x, &params, targets, weights, None)?;
        let grads = g.backward(total);
        let out = params
            .iter()
            .zip(&self.params)
            .map(|(&n, p)| grads.get(n, p.shape()))
            .collect();
        Ok((terms, out))
    }

    /// Raw head values `[5+C, h/8, w/8]` for an image.
    pub fn forward_head(&self, pixels: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let x = g.constant(pixels.clone());
        let params = self.param_nodes(&mut g, false);
        let head = self.head_graph(&mut g, x, &params);
        g.value(head).clone()
    }

    /// Decoded detections with score strictly above `threshold`. Per-cell
    /// top-1 only; no further suppression. Boxes are clipped to the image.
    pub fn detect(&self, img: &ImageBuf, threshold: f64) -> Vec<Detection> {
        let (h, w) = (img.h(), img.w());
        let head = self.forward_head(&img.to_chw());
        let (rows, cols) = (h / CELL_STRIDE, w / CELL_STRIDE);
        let hv = head.data();
        let at = |ch: usize, r: usize, c: usize| (ch * rows + r) * cols + c;
        let mut out = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let (mut best_k, mut best_logit) = (0usize, f64::NEG_INFINITY);
                for k in 0..self.classes.len() {
                    let v = hv[at(BOX_CH + 1 + k, r, c)];
                    if v > best_logit {
                        best_logit = v;
                        best_k = k;
                    }
                }
                let score = sigmoid(hv[at(OBJ_CH, r, c)]) * sigmoid(best_logit);
                if score <= threshold {
                    continue;
                }
                let bbox = decode_box(
                    hv[at(0, r, c)],
                    hv[at(1, r, c)],
                    hv[at(2, r, c)],
                    hv[at(3, r, c)],
                    r,
                    c,
                    h,
                    w,
                );
                let (xa, ya) = (bbox.xa.max(0.0), bbox.ya.max(0.0));
                let (xb, yb) = (bbox.xb.min(w as f64), bbox.yb.min(h as f64));
                if xa < xb && ya < yb {
                    out.push(Detection {
                        class_name: self.classes[best_k].clone(),
                        bbox: BBox::new(xa, ya, xb, yb),
                        score,
                    });
                }
            }
        }
        out
    }

    /// Writes the weight blob at `path` and a JSON sidecar at `path.json`.
    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(b"CAPDET01")?;
        f.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            f.write_all(&(p.shape().len() as u32).to_le_bytes())?;
            for &d in p.shape() {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in p.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        let sidecar = Sidecar {
            class_vocabulary: self.classes.clone(),
            grid_size: self.input_size / CELL_STRIDE,
            input_size: self.input_size,
            seed: self.seed,
            val_mean_iou: self.val_mean_iou,
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let bad = |msg: String| DetectorError::Checkpoint { path: path.to_path_buf(), msg };
        let side = fs::read_to_string(sidecar_path(path))?;
        let side: Sidecar =
            serde_json::from_str(&side).map_err(|e| bad(format!("sidecar: {e}")))?;
        let mut det = TinyDetector::new(side.class_vocabulary, side.input_size, side.seed);
        det.val_mean_iou = side.val_mean_iou;

        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != b"CAPDET01" {
            return Err(bad("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)?;
        let n = u32::from_le_bytes(u32buf) as usize;
        if n != det.params.len() {
            return Err(bad(format!("expected {} tensors, found {n}", det.params.len())));
        }
        for p in &mut det.params {
            f.read_exact(&mut u32buf)?;
            let ndim = u32::from_le_bytes(u32buf) as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                f.read_exact(&mut u32buf)?;
                dims.push(u32::from_le_bytes(u32buf) as usize);
            }
            if dims != p.shape() {
                return Err(bad(format!("shape {dims:?} does not match {:?}", p.shape())));
            }
            let mut f64buf = [0u8; 8];
            for v in p.data_mut() {
                f.read_exact(&mut f64buf)?;
                *v = f64::from_le_bytes(f64buf);
            }
        }
        Ok(det)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

fn mean_of(g: &mut Graph, nodes: &[NodeId]) -> NodeId {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n);
    }
    g.scale(acc, 1.0 / nodes.len() as f64)
}

/// Mirrors the graph-space box decode on raw head values.
pub(crate) fn decode_box(
    tx: f64,
    ty: f64,
    tw: f64,
    th: f64,
    row: usize,
    col: usize,
    h: usize,
    w: usize,
) -> BBox {
    let cell = CELL_STRIDE as f64;
    let cx = (col as f64 + sigmoid(tx)) * cell;
    let cy = (row as f64 + sigmoid(ty)) * cell;
    let bw = w as f64 * sigmoid(tw);
    let bh = h as f64 * sigmoid(th);
    BBox::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0)
}
