//! Online tracking: exemplar features are computed once on the first frame;
//! every later frame is cropped around the previous position, scored, and
//! post-processed with centerness, a size-change penalty and a cosine window.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::geometry::{decode_box, BBox, Ltrb, Point};
use crate::image::Image;
use crate::model::{FeaturePyramid, SiameseModel, LEVELS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub penalty_k: f64,
    pub window_influence: f64,
    /// Size smoothing rate.
    pub lr: f64,
    /// Use `exp(k · max(r/r′, r′/r) · max(s/s′, s′/s))` exactly as printed
    /// instead of the decaying penalty.
    pub literal_penalty: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { penalty_k: 0.04, window_influence: 0.40, lr: 0.30, literal_penalty: false }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.window_influence) || !(0.0..=1.0).contains(&self.lr) || self.penalty_k < 0.0 {
            return Err(Error::Config("tracker needs window_influence, lr in [0, 1] and penalty_k >= 0".into()));
        }
        Ok(())
    }
}

/// Context-padded side `sqrt((w + p)(h + p))` with `p = (w + h) / 2`.
pub fn scale_size(w: f64, h: f64) -> f64 {
    let p = (w + h) / 2.0;
    ((w + p) * (h + p)).sqrt()
}

fn change(r: f64) -> f64 {
    r.max(1.0 / r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub center: Point<f64>,
    /// `(w, h)` in frame pixels.
    pub size: (f64, f64),
    pub penalty_k: f64,
    pub window_influence: f64,
    pub lr: f64,
    pub literal_penalty: bool,
    /// Aspect ratio `w/h` and scale `scale_size(w, h)` of the current target.
    pub prev_ratio: f64,
    pub prev_scale: f64,
}

impl TrackerState {
    pub fn new(gt: &BBox<f64>, cfg: &TrackerConfig) -> Self {
        let (w, h) = (gt.width(), gt.height());
        Self {
            center: gt.center(),
            size: (w, h),
            penalty_k: cfg.penalty_k,
            window_influence: cfg.window_influence,
            lr: cfg.lr,
            literal_penalty: cfg.literal_penalty,
            prev_ratio: w / h,
            prev_scale: scale_size(w, h),
        }
    }

    pub fn bbox(&self) -> BBox<f64> {
        BBox::from_center_size(self.center.x, self.center.y, self.size.0, self.size.1)
    }
}

/// `exp(−k · (max(r/r′, r′/r) · max(s/s′, s′/s) − 1))`, in `(0, 1]`.
pub fn scale_penalty(cand_ratio: f64, cand_scale: f64, state: &TrackerState) -> f64 {
    let prod = change(cand_ratio / state.prev_ratio) * change(cand_scale / state.prev_scale);
    if state.literal_penalty {
        (state.penalty_k * prod).exp()
    } else {
        (-state.penalty_k * (prod - 1.0)).exp()
    }
}

/// Outer product of two Hann vectors, row-major `n x n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    let v: Vec<f64> = if n == 1 {
        vec![1.0]
    } else {
        (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()).collect()
    };
    let mut out = Vec::with_capacity(n * n);
    for a in &v {
        for b in &v {
            out.push(a * b);
        }
    }
    out
}

/// `(1 − wi) · score + wi · window`.
pub fn blend_window(score: &[f64], window: &[f64], wi: f64) -> Vec<f64> {
    score.iter().zip(window).map(|(s, w)| (1.0 - wi) * s + wi * w).collect()
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-frame intermediate results, for visualisation.
#[derive(Debug, Clone)]
pub struct StepDetail {
    pub instance: Image,
    /// `p_fg · cen · penalty` before window blending.
    pub score: Vec<f64>,
    /// After window blending.
    pub final_score: Vec<f64>,
    pub side: usize,
    pub best: usize,
    /// Selected box in instance-crop pixels.
    pub instance_box: BBox<f64>,
}

/// A tracker bound to one model; the exemplar is set by [`Tracker::init`].
#[derive(Debug)]
pub struct Tracker<'m, T: Scalar> {
    model: &'m SiameseModel<T>,
    config: TrackerConfig,
    exemplar: Option<[Tensor<T>; LEVELS]>,
    window: Vec<f64>,
}

impl<'m, T: Scalar> Tracker<'m, T> {
    pub fn new(model: &'m SiameseModel<T>, config: TrackerConfig) -> Self {
        let window = hann_window(model.config.score_size());
        Self { model, config, exemplar: None, window }
    }

    /// Crops the exemplar around `gt` and caches its features.
    pub fn init(&mut self, frame: &Image, gt: &BBox<f64>) -> Result<TrackerState> {
        let c = gt.center();
        if !gt.is_valid() || c.x < 0.0 || c.y < 0.0 || c.x > frame.width() as f64 || c.y > frame.height() as f64 {
            return Err(Error::InvalidBox { x0: gt.x0, y0: gt.y0, x1: gt.x1, y1: gt.y1 });
        }
        let size = self.model.config.exemplar_size;
        let (crop, _) = crate::data::exemplar_crop(frame, gt, size);
        let g = Graph::new();
        let input = Image::batch::<T>(&[&crop]);
        let f = self.model.extract_features(g.constant(input));
        self.exemplar = Some(f.levels.map(|v| (*v.value()).clone()));
        Ok(TrackerState::new(gt, &self.config))
    }

    pub fn track_step(&self, state: &TrackerState, frame: &Image) -> (BBox<f64>, TrackerState) {
        let (b, s, _) = self.track_step_detailed(state, frame);
        (b, s)
    }

    pub fn track_step_detailed(&self, state: &TrackerState, frame: &Image) -> (BBox<f64>, TrackerState, StepDetail) {
        let cfg = &self.model.config;
        let exemplar = self.exemplar.as_ref().expect("track_step before init");
        let isz = cfg.instance_size as f64;
        let s_x = scale_size(state.size.0, state.size.1) * isz / cfg.exemplar_size as f64;
        let scale = isz / s_x;
        let instance = frame.crop_resize(state.center.x, state.center.y, s_x, cfg.instance_size);

        let g = Graph::new();
        let z = FeaturePyramid { levels: [0, 1, 2].map(|l| g.constant(exemplar[l].clone())) };
        let x = self.model.extract_features(g.constant(Image::batch::<T>(&[&instance])));
        let out = self.model.track_heads(&z, &x);
        let (sv, cv, rv) = (out.score.value(), out.centerness.value(), out.regression.value());
        let f = |v: T| v.to_f64_lossy();
        let spec = self.model.grid_spec();
        let (w, plane) = (spec.width, spec.width * spec.height);

        let mut boxes = Vec::with_capacity(plane);
        let mut score = Vec::with_capacity(plane);
        let mut penalty = Vec::with_capacity(plane);
        for i in 0..plane {
            let p_fg = 1.0 / (1.0 + (f(sv.data()[i]) - f(sv.data()[plane + i])).exp());
            let r = |k: usize| f(rv.data()[k * plane + i]);
            let pt: Point<f64> = spec.grid_to_image(i % w, i / w);
            let b = decode_box(pt, &Ltrb::new(r(0), r(1), r(2), r(3))).unwrap_or_else(|_| BBox::from_center_size(pt.x, pt.y, 1.0, 1.0));
            let (bw, bh) = (b.width() / scale, b.height() / scale);
            let pen = scale_penalty(bw / bh, scale_size(bw, bh), state);
            boxes.push(b);
            penalty.push(pen);
            score.push(p_fg * f(cv.data()[i]) * pen);
        }
        let final_score = blend_window(&score, &self.window, state.window_influence);
        let best = argmax(&final_score);
        let b = boxes[best];
        let bc = b.center();
        let (fw, fh) = (frame.width() as f64, frame.height() as f64);
        let cx = (state.center.x + (bc.x - isz / 2.0) / scale).clamp(0.0, fw);
        let cy = (state.center.y + (bc.y - isz / 2.0) / scale).clamp(0.0, fh);
        let rate = (state.lr * score[best]).clamp(0.0, 1.0);
        let nw = ((1.0 - rate) * state.size.0 + rate * b.width() / scale).clamp(4.0, fw);
        let nh = ((1.0 - rate) * state.size.1 + rate * b.height() / scale).clamp(4.0, fh);

        let mut next = state.clone();
        next.center = Point::new(cx, cy);
        next.size = (nw, nh);
        next.prev_ratio = nw / nh;
        next.prev_scale = scale_size(nw, nh);
        let detail = StepDetail { instance, score, final_score, side: w, best, instance_box: b };
        (next.bbox(), next, detail)
    }
}
