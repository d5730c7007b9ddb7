//! Hard-negative emphasis: candidate regions are taken from the fused score
//! map, split into positives and hard negatives against the ground truth,
//! pooled from `Cat(φ3, φ4)` into embedding vectors, and pulled towards or
//! pushed away from the exemplar vector with a contrastive loss.

use std::cell::Cell;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::GridSpec;
use crate::autodiff::{SpatialTaps, Var};
use crate::error::{Error, Result};
use crate::geometry::{decode_box, descending_order, iou, nms, BBox, Ltrb};
use crate::losses::contrastive_loss_var;
use crate::model::{FeaturePyramid, HeadOutput, SiameseModel, FEATURE_OFFSET, STRIDE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

thread_local! {
    static CALLS: Cell<usize> = const { Cell::new(0) };
}

fn record() {
    CALLS.with(|c| c.set(c.get() + 1));
}

/// Number of hard-negative operations evaluated on this thread.
pub fn invocation_count() -> usize {
    CALLS.with(Cell::get)
}

pub fn reset_invocation_count() {
    CALLS.with(|c| c.set(0));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HneConfig {
    pub enabled: bool,
    /// Positives and hard negatives per pair; the ground truth adds one more.
    pub k: usize,
    #[serde(rename = "T_h")]
    pub t_h: f64,
    #[serde(rename = "T_l")]
    pub t_l: f64,
    pub nms_threshold: f64,
    pub margin: f64,
    pub embed_dim: usize,
    /// Score-map locations decoded before suppression.
    pub top_m: usize,
    /// Random-shift radius as a fraction of the largest radius that keeps
    /// every shifted box above `T_h`.
    pub shift_bound: f64,
}

impl Default for HneConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            k: 5,
            t_h: 0.8,
            t_l: 0.3,
            nms_threshold: 0.7,
            margin: 2.0,
            embed_dim: 128,
            top_m: 32,
            shift_bound: 0.95,
        }
    }
}

impl HneConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !(unit(self.t_l) && unit(self.t_h) && self.t_l < self.t_h) {
            return Err(Error::Config(format!("need 0 < T_l ({}) < T_h ({}) < 1", self.t_l, self.t_h)));
        }
        if !unit(self.nms_threshold) {
            return Err(Error::Config("hne.nms_threshold must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.shift_bound) || self.margin <= 0.0 || self.embed_dim == 0 {
            return Err(Error::Config("invalid hne shift_bound, margin or embed_dim".into()));
        }
        Ok(())
    }

    /// Regions per pair: `k` positives, `k` hard negatives, and the ground truth.
    pub fn roi_budget(&self) -> usize {
        2 * self.k + 1
    }
}

/// Regions of one training pair. Positives include the ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct RoISet<T> {
    pub positives: Vec<BBox<T>>,
    pub hard_negatives: Vec<BBox<T>>,
    pub exemplar_box: BBox<T>,
}

impl<T: Scalar> RoISet<T> {
    pub fn len(&self) -> usize {
        self.positives.len() + self.hard_negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Exemplar vectors `[P, D]`, region vectors `[N, D]`, the pair each region
/// belongs to, and labels (1 = positive).
#[derive(Debug, Clone)]
pub struct EmbeddingBatch<'g, T: Scalar> {
    pub exemplar: Var<'g, T>,
    pub vectors: Var<'g, T>,
    pub pair: Vec<usize>,
    pub labels: Vec<T>,
}

impl<'g, T: Scalar> EmbeddingBatch<'g, T> {
    /// `d_i = ||e_i - e_z||`, smoothed by a tiny constant so the gradient is
    /// finite at zero distance.
    pub fn distances(&self) -> Var<'g, T> {
        let ez = self.exemplar.index_select(&self.pair);
        (self.vectors - ez).square().sum_last().add_scalar(T::lit(1e-12)).sqrt()
    }
}

/// Decodes boxes at the `top_m` highest foreground scores and suppresses
/// overlaps above `nms_thr`, returning survivors in descending score order.
///
/// `score` is `[1, 2, H, W]` logits and `reg` `[1, 4, H, W]` side distances.
pub fn select_candidates<T: Scalar>(
    score: &Tensor<T>,
    reg: &Tensor<T>,
    spec: &GridSpec,
    top_m: usize,
    nms_thr: T,
) -> Result<Vec<BBox<T>>> {
    record();
    let (n, c, h, w) = score.dims4();
    let (rn, rc, rh, rw) = reg.dims4();
    if n != 1 || c != 2 || rn != 1 || rc != 4 || (h, w) != (rh, rw) || (h, w) != (spec.height, spec.width) {
        return Err(Error::Shape(format!("select_candidates: score {:?}, regression {:?}", score.shape(), reg.shape())));
    }
    let plane = h * w;
    let logits: Vec<T> = (0..plane).map(|i| score.data()[plane + i] - score.data()[i]).collect();
    let order = descending_order(&logits);
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for &i in order.iter().take(top_m.min(plane)) {
        let (y, x) = (i / w, i % w);
        let r = reg.data();
        let v = Ltrb::new(r[i], r[plane + i], r[2 * plane + i], r[3 * plane + i]);
        if let Ok(b) = decode_box(spec.grid_to_image(x, y), &v) {
            boxes.push(b);
            scores.push(logits[i]);
        }
    }
    let keep = nms(&boxes, &scores, nms_thr)?;
    Ok(keep.into_iter().map(|i| boxes[i]).collect())
}

/// Splits candidates by IoU with `gt`: above `t_h` positive, below `t_l`
/// hard negative, anything in between dropped. Order is preserved.
pub fn classify_candidates<T: Scalar>(cands: &[BBox<T>], gt: &BBox<T>, t_h: T, t_l: T) -> (Vec<BBox<T>>, Vec<BBox<T>>) {
    record();
    assert!(t_l < t_h, "classify_candidates: T_l must be below T_h");
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for b in cands {
        let o = iou(b, gt);
        if o > t_h {
            pos.push(*b);
        } else if o < t_l {
            neg.push(*b);
        }
    }
    (pos, neg)
}

/// Largest relative translation radius `ρ` such that shifting a box by
/// `(u·w·ρ, v·h·ρ)` with `u² + v² ≤ 1` keeps IoU with the original above
/// `t_h`. The worst case is the diagonal, where the kept fraction is
/// `(1 − ρ/√2)²` and the IoU is `q / (2 − q)`.
pub fn max_shift_radius(t_h: f64) -> f64 {
    let q = 2.0 * t_h / (1.0 + t_h);
    std::f64::consts::SQRT_2 * (1.0 - q.sqrt())
}

/// Translates `gt` by offsets drawn uniformly from a disc of relative radius
/// `bound · max_shift_radius(t_h)`, scaled by the box width and height.
pub fn random_shift_positives<T: Scalar, R: Rng + ?Sized>(gt: &BBox<T>, count: usize, bound: f64, t_h: f64, rng: &mut R) -> Vec<BBox<T>> {
    record();
    let rho = bound.clamp(0.0, 1.0) * max_shift_radius(t_h);
    (0..count)
        .map(|_| {
            let r = rho * rng.gen::<f64>().sqrt();
            let a = 2.0 * PI * rng.gen::<f64>();
            let dx = r * a.cos() * gt.width().to_f64_lossy();
            let dy = r * a.sin() * gt.height().to_f64_lossy();
            gt.translate(T::lit(dx), T::lit(dy))
        })
        .collect()
}

/// Bilinear region pooling taps: each region `(batch, box)` in image pixels
/// becomes an `out x out` grid, every bin averaging `sampling²` bilinear
/// samples of a `feat_h x feat_w` map whose cell `i` sits at pixel
/// `offset + stride·i`.
pub fn roi_align_taps<T: Scalar>(
    rois: &[(usize, BBox<T>)],
    feat_h: usize,
    feat_w: usize,
    out: usize,
    sampling: usize,
    stride: f64,
    offset: f64,
) -> SpatialTaps<T> {
    let mut bins = Vec::with_capacity(rois.len() * out * out);
    let mut taps = Vec::with_capacity(rois.len() * out * out * sampling * sampling * 4);
    let wt = 1.0 / (sampling * sampling) as f64;
    let lerp = |v: f64, size: usize| -> [(usize, f64); 2] {
        let v = v.clamp(0.0, (size - 1) as f64);
        let lo = v.floor() as usize;
        let hi = (lo + 1).min(size - 1);
        let f = v - lo as f64;
        [(lo, 1.0 - f), (hi, f)]
    };
    for (b, bx) in rois {
        assert!(bx.is_valid(), "roi pooling of a degenerate box {bx:?}");
        let f = |p: T| (p.to_f64_lossy() - offset) / stride;
        let (x0, y0, x1, y1) = (f(bx.x0), f(bx.y0), f(bx.x1), f(bx.y1));
        let (bw, bh) = ((x1 - x0) / out as f64, (y1 - y0) / out as f64);
        for i in 0..out {
            for j in 0..out {
                let start = taps.len();
                for sy in 0..sampling {
                    let y = y0 + (i as f64 + (sy as f64 + 0.5) / sampling as f64) * bh;
                    for sx in 0..sampling {
                        let x = x0 + (j as f64 + (sx as f64 + 0.5) / sampling as f64) * bw;
                        for (yi, wy) in lerp(y, feat_h) {
                            for (xi, wx) in lerp(x, feat_w) {
                                let w = wt * wy * wx;
                                if w != 0.0 {
                                    taps.push((yi * feat_w + xi, T::lit(w)));
                                }
                            }
                        }
                    }
                }
                bins.push((*b, start..taps.len()));
            }
        }
    }
    SpatialTaps { rois: rois.len(), bin_h: out, bin_w: out, bins, taps }
}

/// `Cat(φ3, φ4)` along channels.
pub fn roi_features<'g, T: Scalar>(f: &FeaturePyramid<'g, T>) -> Var<'g, T> {
    f.levels[1].graph().concat(&[f.levels[1], f.levels[2]], 1)
}

/// Pools each `(batch, box)` region of `features` (`[B, 2C, h, w]`, boxes in
/// the pixel frame of the image the features came from) and embeds it.
pub fn embed_rois<'g, T: Scalar>(model: &SiameseModel<T>, features: Var<'g, T>, rois: &[(usize, BBox<T>)]) -> Var<'g, T> {
    record();
    model.embed(pool_rois(model, features, rois))
}

fn pool_rois<'g, T: Scalar>(model: &SiameseModel<T>, features: Var<'g, T>, rois: &[(usize, BBox<T>)]) -> Var<'g, T> {
    let s = features.shape();
    let taps = roi_align_taps(rois, s[2], s[3], model.config.roi_size, 2, STRIDE as f64, FEATURE_OFFSET);
    features.graph().gather(features, Arc::new(taps))
}

/// Builds the region set of one pair from its fused outputs.
///
/// Positive candidates are used first and topped up with random shifts of
/// the ground truth to `k`; hard negatives are the `k` best-scoring
/// candidates below `T_l`, or fewer when fewer exist.
#[allow(clippy::too_many_arguments)]
pub fn build_roi_set<T: Scalar, R: Rng + ?Sized>(
    score: &Tensor<T>,
    reg: &Tensor<T>,
    spec: &GridSpec,
    gt: &BBox<T>,
    exemplar_box: &BBox<T>,
    cfg: &HneConfig,
    rng: &mut R,
) -> Result<RoISet<T>> {
    let size = T::lit(spec.instance_size as f64);
    let min_side = T::one();
    let cands: Vec<BBox<T>> = select_candidates(score, reg, spec, cfg.top_m, T::lit(cfg.nms_threshold))?
        .into_iter()
        .map(|b| b.clip(size, size))
        .filter(|b| b.width() >= min_side && b.height() >= min_side)
        .collect();
    let (mut pos, mut neg) = classify_candidates(&cands, gt, T::lit(cfg.t_h), T::lit(cfg.t_l));
    pos.truncate(cfg.k);
    neg.truncate(cfg.k);
    let extra = cfg.k - pos.len();
    pos.extend(random_shift_positives(gt, extra, cfg.shift_bound, cfg.t_h, rng));
    let mut positives = vec![*gt];
    positives.append(&mut pos);
    Ok(RoISet { positives, hard_negatives: neg, exemplar_box: *exemplar_box })
}

/// Embeds the regions of every pair. `sets[b]` belongs to batch item `b`.
pub fn embed_batch<'g, T: Scalar>(
    model: &SiameseModel<T>,
    z: &FeaturePyramid<'g, T>,
    x: &FeaturePyramid<'g, T>,
    sets: &[(usize, RoISet<T>)],
) -> EmbeddingBatch<'g, T> {
    record();
    let mut rois = Vec::new();
    let mut labels = Vec::new();
    let mut pair = Vec::new();
    for (p, (b, set)) in sets.iter().enumerate() {
        for r in &set.positives {
            rois.push((*b, *r));
            labels.push(T::one());
            pair.push(p);
        }
        for r in &set.hard_negatives {
            rois.push((*b, *r));
            labels.push(T::zero());
            pair.push(p);
        }
    }
    let ex_rois: Vec<(usize, BBox<T>)> = sets.iter().map(|(b, s)| (*b, s.exemplar_box)).collect();
    let pooled_x = pool_rois(model, roi_features(x), &rois);
    let pooled_z = pool_rois(model, roi_features(z), &ex_rois);
    let g = pooled_x.graph();
    let all = model.embed(g.concat(&[pooled_z, pooled_x], 0));
    let np = ex_rois.len();
    EmbeddingBatch { exemplar: all.narrow(0, 0, np), vectors: all.narrow(0, np, rois.len()), pair, labels }
}

/// Loss and bookkeeping of one hard-negative pass over a batch.
#[derive(Debug, Clone)]
pub struct HneOutcome<'g, T: Scalar> {
    pub loss: Var<'g, T>,
    pub sets: Vec<(usize, RoISet<T>)>,
    pub distances: Vec<T>,
    pub labels: Vec<T>,
}

/// Contrastive loss over the regions of every pair with `valid[b]` set,
/// averaged over all regions. `gts` are instance-crop boxes,
/// `exemplar_boxes` exemplar-crop boxes. Returns `None` when no pair is
/// usable.
#[allow(clippy::too_many_arguments)]
pub fn hne_loss<'g, T: Scalar, R: Rng + ?Sized>(
    model: &SiameseModel<T>,
    z: &FeaturePyramid<'g, T>,
    x: &FeaturePyramid<'g, T>,
    fused: &HeadOutput<'g, T>,
    gts: &[BBox<T>],
    exemplar_boxes: &[BBox<T>],
    valid: &[bool],
    cfg: &HneConfig,
    rng: &mut R,
) -> Result<Option<HneOutcome<'g, T>>> {
    record();
    let spec = model.grid_spec();
    let score = fused.score.value();
    let reg = fused.regression.value();
    let mut sets = Vec::new();
    for (b, gt) in gts.iter().enumerate() {
        if !valid[b] {
            continue;
        }
        let set = build_roi_set(&score.batch_item(b), &reg.batch_item(b), &spec, gt, &exemplar_boxes[b], cfg, rng)?;
        sets.push((b, set));
    }
    if sets.is_empty() {
        return Ok(None);
    }
    let batch = embed_batch(model, z, x, &sets);
    let d = batch.distances();
    let loss = contrastive_loss_var(d, &batch.labels, T::lit(cfg.margin));
    Ok(Some(HneOutcome { loss, sets, distances: d.value().data().to_vec(), labels: batch.labels }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec9() -> GridSpec {
        GridSpec::centered(8, 9, 9, 127).unwrap()
    }

    fn maps(logits: &[f64], side: f64) -> (Tensor<f64>, Tensor<f64>) {
        let n = logits.len();
        let mut s = vec![0.0; 2 * n];
        s[n..].copy_from_slice(logits);
        (Tensor::from_vec(&[1, 2, 9, 9], s).unwrap(), Tensor::full(&[1, 4, 9, 9], side))
    }

    #[test]
    fn single_peak() {
        let mut l = vec![0.0; 81];
        l[40] = 5.0;
        let (s, r) = maps(&l, 10.0);
        let out = select_candidates(&s, &r, &spec9(), 1, 0.7).unwrap();
        assert_eq!(out, vec![BBox::from_corners(53.0, 53.0, 73.0, 73.0)]);
    }

    #[test]
    fn equal_scores_disjoint_boxes_all_survive() {
        let (s, r) = maps(&[1.0; 81], 3.0);
        let out = select_candidates(&s, &r, &spec9(), 20, 0.7).unwrap();
        assert_eq!(out.len(), 20);
        // stable order: lowest indices first
        assert_eq!(out[1], BBox::from_corners(36.0, 28.0, 42.0, 34.0));
        let out = select_candidates(&s, &r, &spec9(), 500, 0.7).unwrap();
        assert_eq!(out.len(), 81);
    }

    #[test]
    fn matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = spec9();
        for _ in 0..200 {
            let s = Tensor::from_vec(&[1, 2, 9, 9], (0..162).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let r = Tensor::from_vec(&[1, 4, 9, 9], (0..324).map(|_| rng.gen_range(2.0..30.0)).collect()).unwrap();
            let top_m = rng.gen_range(1..40);
            let got = select_candidates(&s, &r, &spec, top_m, 0.7).unwrap();

            let mut idx: Vec<usize> = (0..81).collect();
            let logit = |i: usize| s.data()[81 + i] - s.data()[i];
            idx.sort_by(|&a, &b| logit(b).partial_cmp(&logit(a)).unwrap().then(a.cmp(&b)));
            idx.truncate(top_m);
            let decode = |i: usize| {
                let (y, x) = (i / 9, i % 9);
                let (px, py) = ((31 + 8 * x) as f64, (31 + 8 * y) as f64);
                let d = r.data();
                BBox::from_corners(px - d[i], py - d[81 + i], px + d[162 + i], py + d[243 + i])
            };
            let mut kept: Vec<BBox<f64>> = Vec::new();
            for i in idx {
                let b = decode(i);
                if kept.iter().all(|k| iou(k, &b) <= 0.7) {
                    kept.push(b);
                }
            }
            assert_eq!(got.len(), kept.len());
            for (a, b) in got.iter().zip(&kept) {
                assert!(iou(a, b) > 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn classification_examples() {
        let gt = BBox::from_corners(0.0, 0.0, 10.0, 10.0);
        let same = gt;
        let far = BBox::from_corners(20.0, 20.0, 30.0, 30.0);
        // IoU 0.5: (0,0,10,10) vs (0,0,10,20)
        let mid = BBox::from_corners(0.0, 0.0, 10.0, 20.0);
        let (p, n) = classify_candidates(&[same, far, mid], &gt, 0.8, 0.3);
        assert_eq!(p, vec![same]);
        assert_eq!(n, vec![far]);
    }

    #[test]
    fn random_shifts() {
        let gt = BBox::from_corners(10.0, 20.0, 50.0, 40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(random_shift_positives(&gt, 4, 0.0, 0.8, &mut rng).iter().all(|b| *b == gt));
        let boxes = random_shift_positives(&gt, 100, 0.95, 0.8, &mut rng);
        assert!(boxes.iter().all(|b| iou(b, &gt) > 0.8));
        // full radius still stays above the threshold
        let boxes = random_shift_positives(&gt, 1000, 1.0, 0.8, &mut rng);
        assert!(boxes.iter().all(|b| iou(b, &gt) > 0.8 - 1e-9));
        let a = random_shift_positives(&gt, 10, 1.0, 0.8, &mut ChaCha8Rng::seed_from_u64(1));
        let b = random_shift_positives(&gt, 10, 1.0, 0.8, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn diagonal_radius_is_tight() {
        let rho = max_shift_radius(0.8);
        let gt = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let d = rho / std::f64::consts::SQRT_2;
        assert!((iou(&gt, &gt.translate(d, d)) - 0.8).abs() < 1e-12);
        for k in 0..90 {
            let a = (k as f64).to_radians();
            assert!(iou(&gt, &gt.translate(rho * a.cos(), rho * a.sin())) >= 0.8 - 1e-12);
        }
    }

    #[test]
    fn pooling_a_constant_map_is_constant() {
        let g = Graph::<f64>::new();
        let f = g.constant(Tensor::full(&[2, 3, 7, 7], 1.25));
        let rois = [(1, BBox::from_corners(3.0, 10.0, 40.0, 33.0)), (0, BBox::from_corners(-5.0, 0.0, 70.0, 8.0))];
        let taps = roi_align_taps(&rois, 7, 7, 5, 2, 8.0, 7.0);
        let out = g.gather(f, Arc::new(taps)).value();
        assert_eq!(out.shape(), &[2, 3, 5, 5]);
        assert!(out.data().iter().all(|v| (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn pooling_samples_linear_maps_exactly() {
        // feature value = feature-x coordinate; a bin centre at pixel p reads (p - 7) / 8
        let g = Graph::<f64>::new();
        let data: Vec<f64> = (0..49).map(|i| (i % 7) as f64).collect();
        let f = g.constant(Tensor::from_vec(&[1, 1, 7, 7], data).unwrap());
        let taps = roi_align_taps(&[(0, BBox::from_corners(7.0, 7.0, 47.0, 47.0))], 7, 7, 5, 2, 8.0, 7.0);
        let out = g.gather(f, Arc::new(taps)).value();
        for j in 0..5 {
            let centre = 7.0 + 8.0 * (j as f64 + 0.5);
            assert!((out.data()[j] - (centre - 7.0) / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embeddings_are_deterministic_and_sized() {
        let model = SiameseModel::<f64>::new(ModelConfig { embed_dim: 16, ..ModelConfig::desk() }).unwrap();
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::from_vec(&[1, 3, 127, 127], (0..3 * 127 * 127).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let x = model.extract_features(g.constant(img));
        let b = BBox::from_corners(30.0, 40.0, 80.0, 70.0);
        let e = embed_rois(&model, roi_features(&x), &[(0, b), (0, b)]).value();
        assert_eq!(e.shape(), &[2, 16]);
        assert_eq!(e.data()[..16], e.data()[16..]);
    }

    #[test]
    fn roi_budget_and_partition() {
        let cfg = HneConfig::default();
        assert_eq!(cfg.roi_budget(), 11);
        let spec = spec9();
        // many strong, small candidates far from the target plus one on it
        let mut l = vec![0.0; 81];
        for (i, v) in l.iter_mut().enumerate() {
            *v = 1.0 + (i as f64) * 0.01;
        }
        let (s, r) = maps(&l, 5.0);
        let gt = BBox::from_corners(50.0, 50.0, 76.0, 76.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = build_roi_set(&s, &r, &spec, &gt, &gt, &cfg, &mut rng).unwrap();
        assert_eq!(set.positives.len(), 6);
        assert_eq!(set.hard_negatives.len(), 5);
        assert_eq!(set.len(), 11);
        assert!(set.positives.iter().all(|b| iou(b, &gt) > 0.8));
        assert!(set.hard_negatives.iter().all(|b| iou(b, &gt) < 0.3));
    }

    #[test]
    fn loss_vanishes_for_a_perfect_embedding() {
        let g = Graph::<f64>::new();
        let ez = g.constant(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let v = g.constant(Tensor::from_vec(&[3, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 9.0, 2.0, 3.0]).unwrap());
        let batch = EmbeddingBatch { exemplar: ez, vectors: v, pair: vec![0; 3], labels: vec![1.0, 1.0, 0.0] };
        let l = contrastive_loss_var(batch.distances(), &batch.labels, 2.0).value().item();
        assert!(l < 1e-11);
    }

    #[test]
    fn instrumentation_counts_calls() {
        reset_invocation_count();
        let gt = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        classify_candidates(&[gt], &gt, 0.8, 0.3);
        random_shift_positives(&gt, 1, 1.0, 0.8, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(invocation_count(), 2);
    }
}
