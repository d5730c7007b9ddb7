//! Training objectives. Every loss is built from differentiable graph
//! primitives, so gradients come from [`Graph::backward`].
//!
//! Dense maps are NCHW: scores `[N, 2, H, W]` (channel 1 is foreground),
//! centerness `[N, 1, H, W]`, regression `[N, 4, H, W]` as `l, t, r, b`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability clamp used before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Weights of the four-term training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub score: f64,
    pub centerness: f64,
    pub regression: f64,
    pub contrastive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { score: 1.0, centerness: 1.0, regression: 1.0, contrastive: 0.1 }
    }
}

/// The four loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub score: f64,
    pub centerness: f64,
    pub regression: f64,
    pub contrastive: f64,
}

/// `λ1·L_sco + λ2·L_cen + λ3·L_reg + λ4·L_contra`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    w.score * parts.score
        + w.centerness * parts.centerness
        + w.regression * parts.regression
        + w.contrastive * parts.contrastive
}

/// Graph form of [`total_loss`]. A missing contrastive term contributes nothing.
pub fn total_loss_var<'g, T: Scalar>(
    score: Var<'g, T>,
    centerness: Var<'g, T>,
    regression: Var<'g, T>,
    contrastive: Option<Var<'g, T>>,
    w: &LossWeights,
) -> Var<'g, T> {
    let base = score.mul_scalar(T::lit(w.score))
        + centerness.mul_scalar(T::lit(w.centerness))
        + regression.mul_scalar(T::lit(w.regression));
    match contrastive {
        Some(c) => base + c.mul_scalar(T::lit(w.contrastive)),
        None => base,
    }
}

/// Foreground probability `softmax(S)[1]` of a two-channel score map,
/// shape `[N, 1, H, W]`.
pub fn foreground_prob<'g, T: Scalar>(scores: Var<'g, T>) -> Var<'g, T> {
    let bg = scores.narrow(1, 0, 1);
    let fg = scores.narrow(1, 1, 1);
    (fg - bg).sigmoid()
}

/// Focal loss averaged over every location.
///
/// `labels` is `[N, 1, H, W]` with 1 for foreground. `α_t = α` on positives
/// and `1 − α` on negatives.
pub fn focal_loss<'g, T: Scalar>(scores: Var<'g, T>, labels: &Tensor<T>, alpha: T, gamma: T) -> Var<'g, T> {
    let g = scores.graph();
    let eps = T::lit(PROB_EPS);
    let p = foreground_prob(scores).clamp(eps, T::one() - eps);
    assert_eq!(p.shape(), labels.shape(), "focal_loss: labels shape");
    // p_t = y p + (1 - y)(1 - p) = p (2y - 1) + (1 - y)
    let slope = g.constant(labels.map(|y| y + y - T::one()));
    let shift = g.constant(labels.map(|y| T::one() - y));
    let alpha_t = g.constant(labels.map(|y| alpha * y + (T::one() - alpha) * (T::one() - y)));
    let pt = p * slope + shift;
    let modulator = (-pt).add_scalar(T::one()).powf(gamma);
    (-(alpha_t * modulator * pt.ln())).mean()
}

/// Binary cross-entropy between predicted probabilities and targets,
/// averaged over the locations where `mask` is nonzero; 0 for an empty mask.
pub fn centerness_bce<'g, T: Scalar>(pred: Var<'g, T>, target: &Tensor<T>, mask: &Tensor<T>) -> Var<'g, T> {
    let g = pred.graph();
    let count: T = mask.data().iter().copied().sum();
    if count <= T::zero() {
        return g.scalar(T::zero());
    }
    let eps = T::lit(PROB_EPS);
    let p = pred.clamp(eps, T::one() - eps);
    let t = g.constant(target.clone());
    let one_minus_t = g.constant(target.map(|v| T::one() - v));
    let m = g.constant(mask.clone());
    let ce = -(t * p.ln() + one_minus_t * (-p).add_scalar(T::one()).ln());
    (ce * m).sum().mul_scalar(T::one() / count)
}

/// `(1/Np) Σ −ln IoU(pred_i, target_i)` over masked locations, with the IoU
/// of two boxes sharing an anchor point computed from their side distances.
/// Predicted distances are clamped to at least ε and the IoU to at least ε.
pub fn iou_loss<'g, T: Scalar>(pred: Var<'g, T>, target: &Tensor<T>, mask: &Tensor<T>) -> Var<'g, T> {
    let g = pred.graph();
    let count: T = mask.data().iter().copied().sum();
    if count <= T::zero() {
        return g.scalar(T::zero());
    }
    let eps = T::lit(PROB_EPS);
    let p = pred.clamp(eps, T::max_value());
    let t = g.constant(target.clone());
    let side = |v: Var<'g, T>, k: usize| v.narrow(1, k, 1);
    let (pl, pt, pr, pb) = (side(p, 0), side(p, 1), side(p, 2), side(p, 3));
    let (tl, tt, tr, tb) = (side(t, 0), side(t, 1), side(t, 2), side(t, 3));
    let area_p = (pl + pr) * (pt + pb);
    let area_t = (tl + tr) * (tt + tb);
    let iw = pl.minimum(tl) + pr.minimum(tr);
    let ih = pt.minimum(tt) + pb.minimum(tb);
    let inter = iw * ih;
    let iou = (inter / (area_p + area_t - inter)).clamp(eps, T::one());
    let m = g.constant(mask.clone());
    (-(iou.ln()) * m).sum().mul_scalar(T::one() / count)
}

/// Contrastive loss over a batch of distances:
/// `(1/N) Σ [y d² + (1 − y) max(0, m − d)²]`.
pub fn contrastive_loss_var<'g, T: Scalar>(distances: Var<'g, T>, labels: &[T], margin: T) -> Var<'g, T> {
    let g = distances.graph();
    let shape = distances.shape();
    assert_eq!(shape.iter().product::<usize>(), labels.len(), "contrastive: one label per distance");
    let y = g.constant(Tensor::from_vec(&shape, labels.to_vec()).unwrap());
    let not_y = g.constant(Tensor::from_vec(&shape, labels.iter().map(|&v| T::one() - v).collect()).unwrap());
    let pos = y * distances.square();
    let neg = not_y * (-distances).add_scalar(margin).relu().square();
    (pos + neg).mean()
}

/// A batch of embedding distances with binary labels (1 = positive pair).
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch<T> {
    pub distances: Vec<T>,
    pub labels: Vec<T>,
    pub margin: T,
}

impl<T: Scalar> ContrastiveBatch<T> {
    pub const DEFAULT_MARGIN: f64 = 2.0;

    pub fn new(distances: Vec<T>, labels: Vec<T>) -> Self {
        Self { distances, labels, margin: T::lit(Self::DEFAULT_MARGIN) }
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }
}

/// Value of the contrastive loss on a fixed batch.
pub fn contrastive_loss<T: Scalar>(batch: &ContrastiveBatch<T>) -> T {
    assert!(!batch.is_empty(), "contrastive loss of an empty batch");
    let g = Graph::new();
    let d = g.constant(Tensor::from_vec(&[batch.len()], batch.distances.clone()).unwrap());
    contrastive_loss_var(d, &batch.labels, batch.margin).value().item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::max_rel_error;
    use crate::geometry::{decode_box, iou, Ltrb, Point};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn focal_examples() {
        let g = Graph::new();
        // logits (0, 0) -> p = 0.5
        let s = g.constant(map(&[1, 2, 1, 1], vec![0.0, 0.0]));
        let l = focal_loss(s, &map(&[1, 1, 1, 1], vec![1.0]), 0.25, 2.0).value().item();
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);

        let s = g.constant(map(&[1, 2, 1, 2], vec![-30.0, 30.0, 30.0, -30.0]));
        let l = focal_loss(s, &map(&[1, 1, 1, 2], vec![1.0, 0.0]), 0.25, 2.0).value().item();
        assert!(l.abs() < 1e-6);
    }

    #[test]
    fn focal_with_zero_gamma_is_weighted_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits: Vec<f64> = (0..2 * 9).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<f64> = (0..9).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let g = Graph::new();
        let s = g.constant(map(&[1, 2, 3, 3], logits.clone()));
        let focal = focal_loss(s, &map(&[1, 1, 3, 3], labels.clone()), 0.5, 0.0).value().item();
        let mut ce = 0.0;
        for i in 0..9 {
            let (b, f) = (logits[i], logits[9 + i]);
            let pf = f.exp() / (f.exp() + b.exp());
            let pt = if labels[i] > 0.0 { pf } else { 1.0 - pf };
            ce += -0.5 * pt.ln();
        }
        assert!((focal - ce / 9.0).abs() < 1e-12);
    }

    #[test]
    fn bce_examples() {
        let g = Graph::new();
        let ones = map(&[1, 1, 1, 2], vec![1.0, 1.0]);
        let p = g.constant(map(&[1, 1, 1, 2], vec![1.0, 0.0]));
        let l = centerness_bce(p, &map(&[1, 1, 1, 2], vec![1.0, 0.0]), &ones).value().item();
        assert!(l.abs() < 1e-6);
        let p = g.constant(map(&[1, 1, 1, 2], vec![0.5, 0.5]));
        let l = centerness_bce(p, &map(&[1, 1, 1, 2], vec![0.5, 0.5]), &ones).value().item();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let l = centerness_bce(p, &ones, &map(&[1, 1, 1, 2], vec![0.0, 0.0])).value().item();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn iou_loss_examples() {
        let g = Graph::new();
        let t = map(&[1, 4, 1, 1], vec![10.0, 20.0, 30.0, 40.0]);
        let mask = map(&[1, 1, 1, 1], vec![1.0]);
        let l = iou_loss(g.constant(t.clone()), &t, &mask).value().item();
        assert!(l.abs() < 1e-12);
        // boxes (0,0,10,10) and (5,0,15,10) seen from the point (7, 5)
        let a = map(&[1, 4, 1, 1], vec![7.0, 5.0, 3.0, 5.0]);
        let b = map(&[1, 4, 1, 1], vec![2.0, 5.0, 8.0, 5.0]);
        let l = iou_loss(g.constant(a), &b, &mask).value().item();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn iou_loss_matches_decoded_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 6;
        let p: Vec<f64> = (0..4 * n).map(|_| rng.gen_range(0.5..20.0)).collect();
        let t: Vec<f64> = (0..4 * n).map(|_| rng.gen_range(0.5..20.0)).collect();
        let mask: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let g = Graph::new();
        let l = iou_loss(g.constant(map(&[1, 4, 1, n], p.clone())), &map(&[1, 4, 1, n], t.clone()), &map(&[1, 1, 1, n], mask.clone()))
            .value()
            .item();
        let mut expect = 0.0;
        for i in (0..n).filter(|i| mask[*i] > 0.0) {
            let at = |v: &Vec<f64>| Ltrb::new(v[i], v[n + i], v[2 * n + i], v[3 * n + i]);
            let o = Point::new(0.0, 0.0);
            expect -= iou(&decode_box(o, &at(&p)).unwrap(), &decode_box(o, &at(&t)).unwrap()).ln();
        }
        assert!((l - expect / 3.0).abs() < 1e-9);
    }

    #[test]
    fn contrastive_examples() {
        let one = |d: f64, y: f64| contrastive_loss(&ContrastiveBatch::new(vec![d], vec![y]));
        assert_eq!(one(0.0, 1.0), 0.0);
        assert_eq!(one(3.0, 0.0), 0.0);
        assert_eq!(one(1.0, 0.0), 1.0);
        assert_eq!(one(2.0, 1.0), 4.0);
    }

    #[test]
    fn total_loss_examples() {
        let ones = LossParts { score: 1.0, centerness: 1.0, regression: 1.0, contrastive: 1.0 };
        assert!((total_loss(&ones, &LossWeights::default()) - 3.1).abs() < 1e-12);
        let ablated = LossWeights { contrastive: 0.0, ..Default::default() };
        assert_eq!(total_loss(&ones, &ablated), 3.0);
        assert_eq!(total_loss(&LossParts::default(), &LossWeights::default()), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shape = [1, 2, 2, 3];
        let labels = map(&[1, 1, 2, 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let s = map(&shape, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let err = max_rel_error(&[s], 1e-3, |_, v| focal_loss(v[0], &labels, 0.25, 2.0));
        assert!(err < 1e-4, "focal {err}");

        let target = map(&[1, 1, 2, 3], (0..6).map(|_| rng.gen_range(0.0..1.0)).collect());
        let p = map(&[1, 1, 2, 3], (0..6).map(|_| rng.gen_range(0.1..0.9)).collect());
        let err = max_rel_error(&[p], 1e-3, |_, v| centerness_bce(v[0], &target, &labels));
        assert!(err < 1e-4, "bce {err}");
    }
}
