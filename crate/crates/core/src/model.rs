//! The Siamese network: a shared stride-8 backbone with three tap points,
//! per-level channel adjustment, three anchor-free heads built on depthwise
//! cross-correlation, trainable fusion weights, and the region-embedding
//! convolutions used by hard-negative emphasis.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::GridSpec;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, Group, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Total backbone stride.
pub const STRIDE: usize = 8;

/// Image-plane centre of feature cell 0: three valid 3x3 stride-2 layers put
/// cell `i` at pixel `8i + 7`.
pub const FEATURE_OFFSET: f64 = 7.0;

/// Number of pyramid levels.
pub const LEVELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub exemplar_size: usize,
    pub instance_size: usize,
    /// Output widths of the three stride-2 stem layers; the last one is also
    /// the width of the three tapped blocks.
    pub backbone_widths: [usize; 3],
    /// Common channel count after the 1x1 adjust layers.
    pub channels: usize,
    /// Exemplar features are centre-cropped to this size before correlation.
    pub exemplar_crop: usize,
    /// Side of the pooled region grid.
    pub roi_size: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            exemplar_size: 127,
            instance_size: 255,
            backbone_widths: [32, 64, 96],
            channels: 64,
            exemplar_crop: 7,
            roi_size: 5,
            embed_dim: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Reduced-resolution configuration used for CPU training.
    pub fn desk() -> Self {
        Self {
            exemplar_size: 63,
            instance_size: 127,
            backbone_widths: [16, 32, 48],
            channels: 32,
            ..Self::default()
        }
    }

    fn stem_out(size: usize) -> usize {
        (0..3).fold(size, |s, _| (s - 3) / 2 + 1)
    }

    /// Spatial size of a feature level for an input of `size` pixels.
    pub fn feature_size(&self, size: usize) -> usize {
        Self::stem_out(size)
    }

    pub fn exemplar_feature_size(&self) -> usize {
        self.feature_size(self.exemplar_size)
    }

    pub fn cropped_exemplar_size(&self) -> usize {
        self.exemplar_feature_size().min(self.exemplar_crop)
    }

    /// Side of the score map.
    pub fn score_size(&self) -> usize {
        self.feature_size(self.instance_size) - self.cropped_exemplar_size() + 1
    }

    /// Output grid of the heads over the instance crop.
    pub fn grid_spec(&self) -> Result<GridSpec> {
        let s = self.score_size();
        GridSpec::centered(STRIDE, s, s, self.instance_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.exemplar_size < 23 || self.instance_size <= self.exemplar_size {
            return Err(Error::Config(format!(
                "need 23 <= exemplar ({}) < instance ({})",
                self.exemplar_size, self.instance_size
            )));
        }
        if self.roi_size < 5 {
            return Err(Error::Config("roi_size must be at least 5".into()));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.backbone_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        self.grid_spec().map(|_| ())
    }
}

/// Adjusted multi-level features `φ2, φ3, φ4`, all `[N, C, h, w]`.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid<'g, T: Scalar> {
    pub levels: [Var<'g, T>; LEVELS],
}

/// Outputs of one head, or of the fused heads.
///
/// `score` holds two-class logits `[N, 2, h, w]`, `centerness` probabilities
/// `[N, 1, h, w]`, and `regression` strictly positive side distances in
/// instance pixels `[N, 4, h, w]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput<'g, T: Scalar> {
    pub score: Var<'g, T>,
    pub centerness: Var<'g, T>,
    pub regression: Var<'g, T>,
}

/// Convex fusion weights, one `[3]` vector per output type.
#[derive(Debug, Clone, Copy)]
pub struct FusionWeights<'g, T: Scalar> {
    pub score: Var<'g, T>,
    pub centerness: Var<'g, T>,
    pub regression: Var<'g, T>,
}

/// Weighted sum `Σ w_i · head_i` per output type.
pub fn fuse<'g, T: Scalar>(heads: &[HeadOutput<'g, T>; LEVELS], w: &FusionWeights<'g, T>) -> HeadOutput<'g, T> {
    let shape = heads[0].score.shape();
    for h in heads.iter() {
        assert_eq!(h.score.shape(), shape, "fuse: heads differ in size");
    }
    let combine = |weights: Var<'g, T>, pick: &dyn Fn(&HeadOutput<'g, T>) -> Var<'g, T>| {
        let mut acc = pick(&heads[0]) * weights.narrow(0, 0, 1);
        for (i, h) in heads.iter().enumerate().skip(1) {
            acc = acc + pick(h) * weights.narrow(0, i, 1);
        }
        acc
    };
    HeadOutput {
        score: combine(w.score, &|h| h.score),
        centerness: combine(w.centerness, &|h| h.centerness),
        regression: combine(w.regression, &|h| h.regression),
    }
}

/// Softmax of a `[k]` vector.
pub fn softmax_vec<'g, T: Scalar>(v: Var<'g, T>) -> Var<'g, T> {
    let m = v.value().data().iter().copied().fold(T::neg_infinity(), T::max);
    let e = v.add_scalar(-m).exp();
    e / e.sum()
}

#[derive(Debug, Clone)]
struct FcosHead {
    cls_z: Conv,
    cls_x: Conv,
    reg_z: Conv,
    reg_x: Conv,
    cls_tower: Vec<Conv>,
    reg_tower: Vec<Conv>,
    score_out: Conv,
    cen_out: Conv,
    reg_out: Conv,
}

/// Everything one forward pass of a training pair produces.
#[derive(Debug, Clone, Copy)]
pub struct Forward<'g, T: Scalar> {
    pub exemplar: FeaturePyramid<'g, T>,
    pub instance: FeaturePyramid<'g, T>,
    pub heads: [HeadOutput<'g, T>; LEVELS],
    pub fused: HeadOutput<'g, T>,
}

#[derive(Debug)]
pub struct SiameseModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    stem: [Conv; 3],
    blocks: [Conv; LEVELS],
    adjust: [Conv; LEVELS],
    heads: Vec<FcosHead>,
    fusion: [usize; 3],
    embed: [Conv; 2],
    extract_calls: AtomicUsize,
}

impl<T: Scalar> Clone for SiameseModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            stem: self.stem,
            blocks: self.blocks,
            adjust: self.adjust,
            heads: self.heads.clone(),
            fusion: self.fusion,
            embed: self.embed,
            extract_calls: AtomicUsize::new(0),
        }
    }
}

/// Tower depth before each output layer: with the output layer this gives
/// four 3x3 convolutions per branch.
const TOWER_HIDDEN: usize = 3;

/// Prior foreground probability the score output is initialised to.
const SCORE_PRIOR: f64 = 0.01;

impl<T: Scalar> SiameseModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let [w0, w1, w2] = config.backbone_widths;
        let c = config.channels;
        let bb = Group::Backbone;
        let stem = [
            Conv::new(&mut store, "stem.0", bb, 3, w0, 3, 2, 0, &mut rng),
            Conv::new(&mut store, "stem.1", bb, w0, w1, 3, 2, 0, &mut rng),
            Conv::new(&mut store, "stem.2", bb, w1, w2, 3, 2, 0, &mut rng),
        ];
        let blocks = [2, 3, 4].map(|b| Conv::new(&mut store, &format!("block{b}"), bb, w2, w2, 3, 1, 1, &mut rng));
        let adjust = [2, 3, 4].map(|b| Conv::new(&mut store, &format!("adjust{b}"), bb, w2, c, 1, 1, 0, &mut rng));

        let hd = Group::Head;
        let mut heads = Vec::with_capacity(LEVELS);
        for level in 2..2 + LEVELS {
            let name = |part: &str| format!("head{level}.{part}");
            let mut conv = |part: &str, cin, cout, k, pad| Conv::new(&mut store, &name(part), hd, cin, cout, k, 1, pad, &mut rng);
            let cls_z = conv("cls_z", c, c, 3, 1);
            let cls_x = conv("cls_x", c, c, 3, 1);
            let reg_z = conv("reg_z", c, c, 3, 1);
            let reg_x = conv("reg_x", c, c, 3, 1);
            let cls_tower = (0..TOWER_HIDDEN).map(|i| conv(&format!("cls_tower{i}"), c, c, 3, 1)).collect();
            let reg_tower = (0..TOWER_HIDDEN).map(|i| conv(&format!("reg_tower{i}"), c, c, 3, 1)).collect();
            let score_out = conv("score", c, 2, 3, 1);
            let cen_out = conv("centerness", c, 1, 1, 0);
            let reg_out = conv("regression", c, 4, 3, 1);
            score_out.reinit(&mut store, 0.05, 0.0);
            // bias only the foreground logit towards the prior
            let mut b = Tensor::zeros(&[2]);
            b.data_mut()[1] = T::lit(-((1.0 - SCORE_PRIOR) / SCORE_PRIOR).ln());
            store.set(score_out.bias, b);
            cen_out.reinit(&mut store, 0.05, 0.0);
            let typical = config.exemplar_size as f64 / 4.0 / STRIDE as f64;
            reg_out.reinit(&mut store, 0.05, typical.ln());
            heads.push(FcosHead { cls_z, cls_x, reg_z, reg_x, cls_tower, reg_tower, score_out, cen_out, reg_out });
        }

        let fusion = ["score", "centerness", "regression"]
            .map(|kind| store.add(format!("fusion.{kind}"), Group::Fusion, Tensor::zeros(&[LEVELS]), false));

        let em = Group::Embedding;
        let embed = [
            Conv::new(&mut store, "embed.0", em, 2 * c, 2 * c, 3, 1, 0, &mut rng),
            Conv::new(&mut store, "embed.1", em, 2 * c, config.embed_dim, config.roi_size - 2, 1, 0, &mut rng),
        ];

        Ok(Self { config, store, stem, blocks, adjust, heads, fusion, embed, extract_calls: AtomicUsize::new(0) })
    }

    /// How many times [`Self::extract_features`] has run.
    pub fn extract_calls(&self) -> usize {
        self.extract_calls.load(Ordering::Relaxed)
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.config.grid_spec().expect("validated at construction")
    }

    /// Backbone and adjust layers on an `[N, 3, S, S]` image batch, where `S`
    /// is the exemplar or instance size.
    pub fn extract_features<'g>(&self, image: Var<'g, T>) -> FeaturePyramid<'g, T> {
        let s = image.shape();
        assert!(
            s.len() == 4 && s[1] == 3 && s[2] == s[3] && (s[2] == self.config.exemplar_size || s[2] == self.config.instance_size),
            "extract_features: expected [N, 3, {0}, {0}] or [N, 3, {1}, {1}], got {s:?}",
            self.config.exemplar_size,
            self.config.instance_size
        );
        self.extract_calls.fetch_add(1, Ordering::Relaxed);
        let st = &self.store;
        let mut x = image;
        for conv in &self.stem {
            x = conv.forward(st, x).relu();
        }
        let mut taps = Vec::with_capacity(LEVELS);
        for (block, adjust) in self.blocks.iter().zip(&self.adjust) {
            x = block.forward(st, x).relu();
            taps.push(adjust.forward(st, x));
        }
        FeaturePyramid { levels: [taps[0], taps[1], taps[2]] }
    }

    /// One anchor-free head on a level's exemplar and instance features.
    pub fn head<'g>(&self, level: usize, zf: Var<'g, T>, xf: Var<'g, T>) -> HeadOutput<'g, T> {
        let st = &self.store;
        let h = &self.heads[level];
        let zf = zf.center_crop(self.config.exemplar_crop);
        let [_, _, kh, kw] = zf.shape()[..] else { unreachable!() };
        let norm = T::one() / T::lit((kh * kw) as f64);
        let corr = |kz: &Conv, kx: &Conv| {
            let z = kz.forward(st, zf).relu();
            let x = kx.forward(st, xf).relu();
            z.dw_xcorr(x).mul_scalar(norm)
        };
        let mut cls = corr(&h.cls_z, &h.cls_x);
        for conv in &h.cls_tower {
            cls = conv.forward(st, cls).relu();
        }
        let mut reg = corr(&h.reg_z, &h.reg_x);
        for conv in &h.reg_tower {
            reg = conv.forward(st, reg).relu();
        }
        HeadOutput {
            score: h.score_out.forward(st, cls),
            centerness: h.cen_out.forward(st, cls).sigmoid(),
            regression: h.reg_out.forward(st, reg).exp().mul_scalar(T::lit(STRIDE as f64)),
        }
    }

    pub fn heads<'g>(&self, z: &FeaturePyramid<'g, T>, x: &FeaturePyramid<'g, T>) -> [HeadOutput<'g, T>; LEVELS] {
        [0, 1, 2].map(|l| self.head(l, z.levels[l], x.levels[l]))
    }

    /// Softmax-normalised fusion weights.
    pub fn fusion_weights<'g>(&self, g: &'g Graph<T>) -> FusionWeights<'g, T> {
        let [s, c, r] = self.fusion.map(|id| softmax_vec(self.store.var(g, id)));
        FusionWeights { score: s, centerness: c, regression: r }
    }

    /// Current normalised fusion weights as plain numbers.
    pub fn fusion_values(&self) -> [[f64; LEVELS]; 3] {
        let g = Graph::new();
        let w = self.fusion_weights(&g);
        [w.score, w.centerness, w.regression].map(|v| {
            let d = v.value();
            [0, 1, 2].map(|i| d.data()[i].to_f64_lossy())
        })
    }

    /// Heads and fusion on precomputed exemplar features.
    pub fn track_heads<'g>(&self, z: &FeaturePyramid<'g, T>, x: &FeaturePyramid<'g, T>) -> HeadOutput<'g, T> {
        let heads = self.heads(z, x);
        fuse(&heads, &self.fusion_weights(x.levels[0].graph()))
    }

    pub fn forward<'g>(&self, exemplar: Var<'g, T>, instance: Var<'g, T>) -> Forward<'g, T> {
        let z = self.extract_features(exemplar);
        let x = self.extract_features(instance);
        let heads = self.heads(&z, &x);
        let fused = fuse(&heads, &self.fusion_weights(exemplar.graph()));
        Forward { exemplar: z, instance: x, heads, fused }
    }

    /// Two valid convolutions reducing pooled `[R, 2C, k, k]` regions to
    /// `[R, D]` vectors.
    pub fn embed<'g>(&self, pooled: Var<'g, T>) -> Var<'g, T> {
        let r = pooled.shape()[0];
        let h = self.embed[0].forward(&self.store, pooled).relu();
        let out = self.embed[1].forward(&self.store, h);
        out.reshape(&[r, self.config.embed_dim])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Tensor<f64> {
        Tensor::from_vec(&[n, 3, s, s], (0..n * 3 * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig { backbone_widths: [4, 4, 8], channels: 8, embed_dim: 16, ..ModelConfig::default() };
        let model = SiameseModel::<f32>::new(cfg).unwrap();
        assert_eq!(model.config.exemplar_feature_size(), 15);
        assert_eq!(model.config.feature_size(255), 31);
        assert_eq!(model.config.score_size(), 25);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Graph::new();
        let z = g.constant(random_image(&mut rng, 1, 127).cast());
        let x = g.constant(random_image(&mut rng, 1, 255).cast());
        let out = model.forward(z, x);
        for l in 0..3 {
            assert_eq!(out.exemplar.levels[l].shape(), vec![1, 8, 15, 15]);
            assert_eq!(out.exemplar.levels[l].center_crop(7).shape(), vec![1, 8, 7, 7]);
            assert_eq!(out.instance.levels[l].shape(), vec![1, 8, 31, 31]);
        }
        assert_eq!(out.fused.score.shape(), vec![1, 2, 25, 25]);
        assert_eq!(out.fused.centerness.shape(), vec![1, 1, 25, 25]);
        assert_eq!(out.fused.regression.shape(), vec![1, 4, 25, 25]);
        assert!(out.fused.regression.value().data().iter().all(|&v| v > 0.0));
    }

    #[test]
    #[should_panic(expected = "extract_features")]
    fn wrong_input_size_panics() {
        let model = SiameseModel::<f32>::new(ModelConfig::desk()).unwrap();
        let g = Graph::new();
        model.extract_features(g.constant(Tensor::zeros(&[1, 3, 100, 100])));
    }

    #[test]
    fn branches_share_weights() {
        let mut model = SiameseModel::<f64>::new(ModelConfig::desk()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 1, 63);
        let run = |m: &SiameseModel<f64>| {
            let g = Graph::new();
            let a = m.extract_features(g.constant(img.clone())).levels[2].value();
            let b = m.extract_features(g.constant(img.clone())).levels[2].value();
            assert_eq!(a, b);
            a
        };
        let before = run(&model);
        let id = model.store.find("block2.weight").unwrap();
        let w = model.store.get(id).value.map(|v| v * 1.5);
        model.store.set(id, w);
        assert_ne!(run(&model), before);
    }

    #[test]
    fn fuse_examples() {
        let g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mk = |rng: &mut ChaCha8Rng, c| g.constant(random_image(rng, 1, 2).reshape(&[1, 3, 2, 2]).unwrap().map(|v| v.abs()).reshape(&[1, 3, 2, 2]).unwrap()).narrow(1, 0, c);
        let heads: [HeadOutput<f64>; 3] = [0, 1, 2].map(|_| HeadOutput { score: mk(&mut rng, 2), centerness: mk(&mut rng, 1), regression: mk(&mut rng, 3) });
        let onehot = g.constant(Tensor::from_vec(&[3], vec![0.0, 1.0, 0.0]).unwrap());
        let w = FusionWeights { score: onehot, centerness: onehot, regression: onehot };
        let out = fuse(&heads, &w);
        assert_eq!(out.score.value(), heads[1].score.value());
        assert_eq!(out.regression.value(), heads[1].regression.value());

        let same = [heads[0]; 3];
        let mixed = g.constant(Tensor::from_vec(&[3], vec![0.25, 0.5, 0.25]).unwrap());
        let out = fuse(&same, &FusionWeights { score: mixed, centerness: mixed, regression: mixed });
        for (a, b) in out.score.value().data().iter().zip(heads[0].score.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
