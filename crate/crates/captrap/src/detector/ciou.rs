//! Complete-IoU location loss.
//!
//! L = 1 - IoU + rho^2 / c^2 + a*v, where rho is the center distance, c the
//! diagonal of the smallest enclosing box, v the squared scaled arctan aspect
//! difference, and a = v / (1 - IoU + v). For equal aspect ratios v is 0 and
//! the aspect term vanishes exactly; d(a*v)/dv is also 0 there, so the graph
//! form may drop the term without changing gradients.

use std::f64::consts::PI;

use crate::data::BBox;
use crate::graph::{Graph, NodeId};

use super::DetectorError;

pub fn ciou_loss(pred: &BBox, gt: &BBox) -> Result<f64, DetectorError> {
    for b in [pred, gt] {
        if b.area() <= 0.0 {
            return Err(DetectorError::DegenerateBox(b.xa, b.ya, b.xb, b.yb));
        }
    }
    let iou = pred.iou(gt);
    let (pcx, pcy) = pred.center();
    let (gcx, gcy) = gt.center();
    let rho2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
    let ex = pred.xb.max(gt.xb) - pred.xa.min(gt.xa);
    let ey = pred.yb.max(gt.yb) - pred.ya.min(gt.ya);
    let c2 = ex * ex + ey * ey;
    let v = (4.0 / (PI * PI))
        * ((gt.width() / gt.height()).atan() - (pred.width() / pred.height()).atan()).powi(2);
    let aspect = if v == 0.0 { 0.0 } else { v * v / (1.0 - iou + v) };
    Ok(1.0 - iou + rho2 / c2 + aspect)
}

/// Graph-space CIoU over four scalar coordinate nodes `[xa, ya, xb, yb]`.
///
/// The caller guarantees positive width and height (the detector decodes
/// boxes through sigmoids, so this always holds).
pub fn ciou_loss_graph(g: &mut Graph, pred: [NodeId; 4], gt: &BBox) -> NodeId {
    let [xa, ya, xb, yb] = pred;
    let (gxa, gya, gxb, gyb) = (g.scalar(gt.xa), g.scalar(gt.ya), g.scalar(gt.xb), g.scalar(gt.yb));
    let zero = g.scalar(0.0);

    let w = g.sub(xb, xa);
    let h = g.sub(yb, ya);
    let area_p = g.mul(w, h);
    let area_g = g.scalar(gt.area());

    let ix_hi = g.min_ew(xb, gxb);
    let ix_lo = g.max_ew(xa, gxa);
    let ix = g.sub(ix_hi, ix_lo);
    let ix = g.max_ew(ix, zero);
    let iy_hi = g.min_ew(yb, gyb);
    let iy_lo = g.max_ew(ya, gya);
    let iy = g.sub(iy_hi, iy_lo);
    let iy = g.max_ew(iy, zero);
    let inter = g.mul(ix, iy);

    let areas = g.add(area_p, area_g);
    let union = g.sub(areas, inter);
    let iou = g.div(inter, union);

    let pcx = {
        let s = g.add(xa, xb);
        g.scale(s, 0.5)
    };
    let pcy = {
        let s = g.add(ya, yb);
        g.scale(s, 0.5)
    };
    let (gcx, gcy) = gt.center();
    let dx = g.offset(pcx, -gcx);
    let dy = g.offset(pcy, -gcy);
    let dx2 = g.square(dx);
    let dy2 = g.square(dy);
    let rho2 = g.add(dx2, dy2);

    let ex_hi = g.max_ew(xb, gxb);
    let ex_lo = g.min_ew(xa, gxa);
    let ex = g.sub(ex_hi, ex_lo);
    let ey_hi = g.max_ew(yb, gyb);
    let ey_lo = g.min_ew(ya, gya);
    let ey = g.sub(ey_hi, ey_lo);
    let ex2 = g.square(ex);
    let ey2 = g.square(ey);
    let c2 = g.add(ex2, ey2);
    let dist = g.div(rho2, c2);

    let aspect_p = g.div(w, h);
    let at_p = g.atan(aspect_p);
    let at_diff = g.offset(at_p, -(gt.width() / gt.height()).atan());
    let at2 = g.square(at_diff);
    let v = g.scale(at2, 4.0 / (PI * PI));

    let neg_iou = g.scale(iou, -1.0);
    let one_minus_iou = g.offset(neg_iou, 1.0);
    let base = g.add(one_minus_iou, dist);
    if g.value(v).item() == 0.0 {
        return base;
    }
    let denom = g.add(one_minus_iou, v);
    let alpha = g.div(v, denom);
    let av = g.mul(alpha, v);
    g.add(base, av)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_boxes_give_exactly_zero() {
        let b = BBox::new(3.0, 4.0, 13.0, 24.0);
        assert_eq!(ciou_loss(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn translated_box_matches_hand_geometry() {
        // gt [0,0,10,10], pred shifted right by 5
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let pred = BBox::new(5.0, 0.0, 15.0, 10.0);
        // overlap 5x10 = 50, union 150, iou = 1/3
        let iou: f64 = 1.0 / 3.0;
        // centers (10,5) vs (5,5): rho2 = 25; enclosure [0,0,15,10]: c2 = 325
        let expect = 1.0 - iou + 25.0 / 325.0; // v = 0, same aspect
        let got = ciou_loss(&pred, &gt).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn disjoint_equal_aspect_is_one_plus_distance_term() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let pred = BBox::new(20.0, 0.0, 30.0, 10.0);
        // centers 20 apart, enclosure [0,0,30,10]: c2 = 1000
        let expect = 1.0 + 400.0 / 1000.0;
        let got = ciou_loss(&pred, &gt).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn aspect_term_matches_formula_when_aspects_differ() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let pred = BBox::new(0.0, 0.0, 20.0, 5.0);
        let iou = gt.iou(&pred); // overlap 10x5=50, union 150
        let v = (4.0 / (PI * PI)) * ((1.0f64).atan() - (4.0f64).atan()).powi(2);
        let alpha = v / (1.0 - iou + v);
        let rho2 = (10.0f64 - 5.0).powi(2) + (2.5f64 - 5.0).powi(2);
        let c2 = 20.0f64.powi(2) + 10.0f64.powi(2);
        let expect = 1.0 - iou + rho2 / c2 + alpha * v;
        let got = ciou_loss(&pred, &gt).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn zero_area_box_is_a_domain_error() {
        let gt = BBox { xa: 0.0, ya: 0.0, xb: 10.0, yb: 10.0 };
        let flat = BBox { xa: 0.0, ya: 5.0, xb: 10.0, yb: 5.0 };
        assert!(matches!(ciou_loss(&flat, &gt), Err(DetectorError::DegenerateBox(..))));
    }

    #[test]
    fn graph_form_matches_scalar_form() {
        let gt = BBox::new(2.0, 3.0, 12.0, 9.0);
        for pred in [
            BBox::new(1.0, 1.0, 9.0, 11.0),
            BBox::new(2.0, 3.0, 12.0, 9.0),
            BBox::new(20.0, 20.0, 30.0, 26.0),
        ] {
            let mut g = Graph::new();
            let ids = [
                g.leaf(crate::tensor::Tensor::scalar(pred.xa)),
                g.leaf(crate::tensor::Tensor::scalar(pred.ya)),
                g.leaf(crate::tensor::Tensor::scalar(pred.xb)),
                g.leaf(crate::tensor::Tensor::scalar(pred.yb)),
            ];
            let loss = ciou_loss_graph(&mut g, ids, &gt);
            let expect = ciou_loss(&pred, &gt).unwrap();
            assert!((g.value(loss).item() - expect).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Invariant under joint translation and joint uniform scaling.
        #[test]
        fn translation_and_scale_invariance(
            ax in 0.0f64..50.0, ay in 0.0f64..50.0, aw in 1.0f64..30.0, ah in 1.0f64..30.0,
            bx in 0.0f64..50.0, by in 0.0f64..50.0, bw in 1.0f64..30.0, bh in 1.0f64..30.0,
            tx in -20.0f64..20.0, ty in -20.0f64..20.0, s in 0.1f64..5.0,
        ) {
            let p = BBox::new(ax, ay, ax + aw, ay + ah);
            let q = BBox::new(bx, by, bx + bw, by + bh);
            let base = ciou_loss(&p, &q).unwrap();
            let shift = |b: &BBox| BBox::new(b.xa + tx, b.ya + ty, b.xb + tx, b.yb + ty);
            let scaled = |b: &BBox| BBox::new(b.xa * s, b.ya * s, b.xb * s, b.yb * s);
            let t = ciou_loss(&shift(&p), &shift(&q)).unwrap();
            let z = ciou_loss(&scaled(&p), &scaled(&q)).unwrap();
            prop_assert!((t - base).abs() < 1e-9, "translation changed loss: {base} -> {t}");
            prop_assert!((z - base).abs() < 1e-9, "scaling changed loss: {base} -> {z}");
        }
    }
}
