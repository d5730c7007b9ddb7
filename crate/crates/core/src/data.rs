//! Synthetic tracking sequences with same-class distractors, GOT-10k style
//! sequence directories, and exemplar/instance training pairs.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::{Image, Rgb};
use crate::tracker::scale_size;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rect,
    Ellipse,
    Triangle,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Rect, Self::Ellipse, Self::Triangle, Self::Diamond];

    /// Membership test in box-normalised coordinates `u, v ∈ [-1, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Self::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
            Self::Ellipse => u * u + v * v <= 1.0,
            Self::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
            Self::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Pattern {
    Solid,
    Stripes { period: f64, angle: f64 },
    Checker { period: f64 },
}

/// Scene parameters for [`generate_sequence`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Same-class objects with perturbed colours (hard negatives).
    pub distractors: usize,
    /// Objects of other shape classes (easy negatives).
    pub clutter: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub max_speed: f64,
    /// Per-frame standard deviation of velocity changes.
    pub acceleration: f64,
    /// Per-frame standard deviation of the log size.
    pub scale_drift: f64,
    /// Per-channel colour perturbation bound of distractors.
    pub distractor_color_jitter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 192,
            height: 192,
            frames: 60,
            distractors: 0,
            clutter: 2,
            min_size: 18.0,
            max_size: 40.0,
            max_speed: 3.0,
            acceleration: 0.6,
            scale_drift: 0.01,
            distractor_color_jitter: 0.12,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.min_size < 4.0 || self.max_size < self.min_size {
            return Err(Error::Config("scene needs frames > 0 and 4 <= min_size <= max_size".into()));
        }
        if self.max_size * 1.5 >= self.width.min(self.height) as f64 {
            return Err(Error::Config("objects do not fit the frame".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Object {
    kind: ShapeKind,
    color: Rgb,
    color2: Rgb,
    pattern: Pattern,
    /// `(cx, cy, w, h)` per frame.
    track: Vec<[f64; 4]>,
}

impl Object {
    fn bbox(&self, frame: usize) -> BBox<f64> {
        let [cx, cy, w, h] = self.track[frame];
        BBox::from_center_size(cx, cy, w, h)
    }

    fn paint(&self, img: &mut Image, frame: usize) {
        let [cx, cy, w, h] = self.track[frame];
        let b = self.bbox(frame);
        const SS: usize = 3;
        for py in b.y0.floor().max(0.0) as i64..b.y1.ceil() as i64 {
            for px in b.x0.floor().max(0.0) as i64..b.x1.ceil() as i64 {
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
                        let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
                        if self.kind.contains(2.0 * (x - cx) / w, 2.0 * (y - cy) / h) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let (lx, ly) = (px as f64 + 0.5 - b.x0, py as f64 + 0.5 - b.y0);
                let alt = match self.pattern {
                    Pattern::Solid => false,
                    Pattern::Stripes { period, angle } => ((lx * angle.cos() + ly * angle.sin()) / period).floor() as i64 % 2 == 0,
                    Pattern::Checker { period } => ((lx / period).floor() as i64 + (ly / period).floor() as i64) % 2 == 0,
                };
                let c = if alt { self.color2 } else { self.color };
                img.blend(px, py, c, hits as f32 / (SS * SS) as f32);
            }
        }
    }
}

/// A procedurally generated scene. Frames are rendered on demand.
#[derive(Debug, Clone)]
pub struct Scene {
    pub config: SceneConfig,
    pub seed: u64,
    background: Image,
    target: Object,
    distractors: Vec<Object>,
    clutter: Vec<Object>,
}

fn random_color<R: Rng>(rng: &mut R) -> Rgb {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

fn random_pattern<R: Rng>(rng: &mut R) -> Pattern {
    match rng.gen_range(0..3) {
        0 => Pattern::Solid,
        1 => Pattern::Stripes { period: rng.gen_range(3.0..7.0), angle: rng.gen_range(0.0..std::f64::consts::PI) },
        _ => Pattern::Checker { period: rng.gen_range(3.0..7.0) },
    }
}

fn trajectory<R: Rng>(cfg: &SceneConfig, w: f64, h: f64, rng: &mut R) -> Vec<[f64; 4]> {
    let (fw, fh) = (cfg.width as f64, cfg.height as f64);
    let mut size = (w, h);
    let mut p = (rng.gen_range(w..fw - w), rng.gen_range(h..fh - h));
    let mut v = (rng.gen_range(-cfg.max_speed..cfg.max_speed), rng.gen_range(-cfg.max_speed..cfg.max_speed));
    let acc = Normal::new(0.0, cfg.acceleration.max(1e-9)).unwrap();
    let drift = Normal::new(0.0, cfg.scale_drift.max(1e-9)).unwrap();
    let mut out = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        out.push([p.0, p.1, size.0, size.1]);
        v.0 = (v.0 + acc.sample(rng)).clamp(-cfg.max_speed, cfg.max_speed);
        v.1 = (v.1 + acc.sample(rng)).clamp(-cfg.max_speed, cfg.max_speed);
        let f: f64 = drift.sample(rng);
        let grow = f.exp();
        if size.0.max(size.1) * grow <= cfg.max_size * 1.2 && size.0.min(size.1) * grow >= cfg.min_size * 0.8 {
            size = (size.0 * grow, size.1 * grow);
        }
        p.0 += v.0;
        p.1 += v.1;
        let (hw, hh) = (size.0 / 2.0 + 1.0, size.1 / 2.0 + 1.0);
        if p.0 < hw || p.0 > fw - hw {
            v.0 = -v.0;
            p.0 = p.0.clamp(hw, fw - hw);
        }
        if p.1 < hh || p.1 > fh - hh {
            v.1 = -v.1;
            p.1 = p.1.clamp(hh, fh - hh);
        }
    }
    out
}

fn random_size<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> (f64, f64) {
    let side = rng.gen_range(cfg.min_size..=cfg.max_size);
    let aspect: f64 = rng.gen_range(0.6f64..1.6).sqrt();
    (side * aspect, side / aspect)
}

fn background<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Image {
    let base = random_color(rng);
    let waves: Vec<(f64, f64, f64, [f32; 3])> = (0..3)
        .map(|_| {
            let amp = [rng.gen_range(-0.12..0.12), rng.gen_range(-0.12..0.12), rng.gen_range(-0.12..0.12)];
            (rng.gen_range(0.01..0.08), rng.gen_range(0.01..0.08), rng.gen_range(0.0..6.3), amp)
        })
        .collect();
    let mut img = Image::filled(cfg.width, cfg.height, base);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let mut c = base;
            for (fx, fy, ph, amp) in &waves {
                let s = (fx * x as f64 + fy * y as f64 + ph).sin() as f32;
                for k in 0..3 {
                    c[k] += amp[k] * s;
                }
            }
            let n: f32 = rng.gen_range(-0.03..0.03);
            img.put(x, y, c.map(|v| (v + n).clamp(0.0, 1.0)));
        }
    }
    img
}

impl Scene {
    pub fn new(config: SceneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let background = background(&config, &mut rng);
        let kind = ShapeKind::ALL[rng.gen_range(0..4)];
        let color = random_color(&mut rng);
        let color2 = random_color(&mut rng);
        let pattern = random_pattern(&mut rng);
        let (w, h) = random_size(&config, &mut rng);
        let target = Object { kind, color, color2, pattern, track: trajectory(&config, w, h, &mut rng) };
        let distractors = (0..config.distractors)
            .map(|_| {
                let j = config.distractor_color_jitter as f32;
                let mut perturb = |c: Rgb| c.map(|v| (v + rng.gen_range(-j..=j)).clamp(0.0, 1.0));
                let (color, color2) = (perturb(color), perturb(color2));
                let s = rng.gen_range(0.8..1.2);
                Object { kind, color, color2, pattern, track: trajectory(&config, w * s, h * s, &mut rng) }
            })
            .collect();
        let others: Vec<ShapeKind> = ShapeKind::ALL.into_iter().filter(|k| *k != kind).collect();
        let clutter = (0..config.clutter)
            .map(|_| {
                let kind = others[rng.gen_range(0..others.len())];
                let (w, h) = random_size(&config, &mut rng);
                let (c1, c2, p) = (random_color(&mut rng), random_color(&mut rng), random_pattern(&mut rng));
                Object { kind, color: c1, color2: c2, pattern: p, track: trajectory(&config, w, h, &mut rng) }
            })
            .collect();
        Ok(Self { config, seed, background, target, distractors, clutter })
    }

    pub fn len(&self) -> usize {
        self.config.frames
    }

    pub fn is_empty(&self) -> bool {
        self.config.frames == 0
    }

    /// Target box in frame `i`.
    pub fn annotation(&self, i: usize) -> BBox<f64> {
        self.target.bbox(i)
    }

    pub fn distractor_boxes(&self, i: usize) -> Vec<BBox<f64>> {
        self.distractors.iter().map(|o| o.bbox(i)).collect()
    }

    /// Renders frame `i`: clutter, then distractors, then the target on top.
    pub fn render(&self, i: usize) -> Image {
        let mut img = self.background.clone();
        for o in self.clutter.iter().chain(&self.distractors) {
            o.paint(&mut img, i);
        }
        self.target.paint(&mut img, i);
        img
    }

    pub fn to_sequence(&self, name: impl Into<String>) -> Sequence {
        Sequence {
            name: name.into(),
            frames: (0..self.len()).map(|i| self.render(i)).collect(),
            annotations: (0..self.len()).map(|i| self.annotation(i)).collect(),
            distractors: (0..self.len()).map(|i| self.distractor_boxes(i)).collect(),
        }
    }
}

/// A tracking sequence: frames, one target box per frame, and (synthetic
/// only) distractor boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Image>,
    pub annotations: Vec<BBox<f64>>,
    pub distractors: Vec<Vec<BBox<f64>>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Renders a full synthetic sequence.
pub fn generate_sequence(config: &SceneConfig, seed: u64) -> Result<Sequence> {
    Ok(Scene::new(config.clone(), seed)?.to_sequence(format!("synthetic-{seed:08}")))
}

fn parse_box(line: &str) -> Option<BBox<f64>> {
    let v: Vec<f64> = line
        .split(|c: char| c == ',' || c == '\t' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().ok())
        .collect::<Option<_>>()?;
    (v.len() == 4).then(|| BBox::from_xywh(v[0], v[1], v[2], v[3]))
}

fn xywh(b: &BBox<f64>) -> String {
    format!("{:.4},{:.4},{:.4},{:.4}", b.x0, b.y0, b.width(), b.height())
}

/// Writes `DIR/00000001.png ...` and `DIR/groundtruth.txt`, plus
/// `distractors.txt` (boxes separated by `;`) when any exist.
pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save(&dir.join(format!("{:08}.png", i + 1)))?;
    }
    let gt: Vec<String> = seq.annotations.iter().map(xywh).collect();
    fs::write(dir.join("groundtruth.txt"), gt.join("\n") + "\n")?;
    if seq.distractors.iter().any(|d| !d.is_empty()) {
        let lines: Vec<String> = seq.distractors.iter().map(|d| d.iter().map(xywh).collect::<Vec<_>>().join(";")).collect();
        fs::write(dir.join("distractors.txt"), lines.join("\n") + "\n")?;
    }
    Ok(())
}

/// Reads a GOT-10k style directory: numbered image files in name order and
/// `groundtruth.txt` with one `x,y,w,h` line per frame.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let err = |detail: String| Error::Sequence { path: dir.to_path_buf(), detail };
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
            matches!(ext.as_str(), "png" | "jpg" | "jpeg" | "bmp")
        })
        .collect();
    files.sort();
    let text = fs::read_to_string(dir.join("groundtruth.txt")).map_err(|e| err(format!("groundtruth.txt: {e}")))?;
    let annotations: Vec<BBox<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| parse_box(l).ok_or_else(|| err(format!("line {}: expected x,y,w,h", i + 1))))
        .collect::<Result<_>>()?;
    if files.is_empty() || annotations.len() < files.len().min(1) {
        return Err(err("no frames".into()));
    }
    let n = files.len().min(annotations.len());
    let frames = files[..n].iter().map(|p| Image::load(p)).collect::<Result<Vec<_>>>()?;
    let distractors = match fs::read_to_string(dir.join("distractors.txt")) {
        Ok(t) => t.lines().take(n).map(|l| l.split(';').filter_map(parse_box).collect()).collect(),
        Err(_) => vec![Vec::new(); n],
    };
    let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("sequence").to_string();
    Ok(Sequence { name, frames, annotations: annotations[..n].to_vec(), distractors })
}

/// Cropping and augmentation parameters of training pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairConfig {
    pub exemplar_size: usize,
    pub instance_size: usize,
    /// Bound of the uniform target offset from the instance centre, in
    /// instance pixels, per axis.
    pub max_translation: f64,
    /// Instance crop side is scaled by `exp(U(-s, s))`.
    pub scale_jitter: f64,
    /// Per-channel multiplicative colour change `U(1-c, 1+c)`.
    pub color_jitter: f64,
    pub max_interval: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { exemplar_size: 127, instance_size: 255, max_translation: 64.0, scale_jitter: 0.05, color_jitter: 0.1, max_interval: 100 }
    }
}

/// Exemplar and instance crops with their target boxes in crop pixels.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub exemplar: Image,
    pub instance: Image,
    pub gt: BBox<f64>,
    pub exemplar_gt: BBox<f64>,
}

fn to_crop(b: &BBox<f64>, cx: f64, cy: f64, side: f64, out: usize) -> BBox<f64> {
    let s = out as f64 / side;
    let (ox, oy) = (cx - side / 2.0, cy - side / 2.0);
    BBox::from_corners((b.x0 - ox) * s, (b.y0 - oy) * s, (b.x1 - ox) * s, (b.y1 - oy) * s)
}

/// Exemplar crop of side `scale_size(w, h)` around `gt`, resized to `size`.
pub fn exemplar_crop(frame: &Image, gt: &BBox<f64>, size: usize) -> (Image, BBox<f64>) {
    let c = gt.center();
    let side = scale_size(gt.width(), gt.height());
    (frame.crop_resize(c.x, c.y, side, size), to_crop(gt, c.x, c.y, side, size))
}

/// Builds a pair from the exemplar frame `zi` and search frame `xi`.
pub fn pair_from_frames<R: Rng + ?Sized>(
    zf: &Image,
    zbox: &BBox<f64>,
    xf: &Image,
    xbox: &BBox<f64>,
    cfg: &PairConfig,
    rng: &mut R,
) -> TrainingPair {
    let (exemplar, exemplar_gt) = exemplar_crop(zf, zbox, cfg.exemplar_size);
    let mut side = scale_size(xbox.width(), xbox.height()) * cfg.instance_size as f64 / cfg.exemplar_size as f64;
    if cfg.scale_jitter > 0.0 {
        side *= rng.gen_range(-cfg.scale_jitter..=cfg.scale_jitter).exp();
    }
    let (tx, ty) = if cfg.max_translation > 0.0 {
        let t = cfg.max_translation;
        (rng.gen_range(-t..=t), rng.gen_range(-t..=t))
    } else {
        (0.0, 0.0)
    };
    let c = xbox.center();
    let k = side / cfg.instance_size as f64;
    let (cx, cy) = (c.x - tx * k, c.y - ty * k);
    let mut instance = xf.crop_resize(cx, cy, side, cfg.instance_size);
    if cfg.color_jitter > 0.0 {
        let m: [f32; 3] = std::array::from_fn(|_| rng.gen_range(1.0 - cfg.color_jitter..=1.0 + cfg.color_jitter) as f32);
        instance = instance.map(|ch, v| (v * m[ch]).clamp(0.0, 1.0));
    }
    let s = cfg.instance_size as f64;
    let gt = to_crop(xbox, cx, cy, side, cfg.instance_size).clip(s, s);
    TrainingPair { exemplar, instance, gt, exemplar_gt: exemplar_gt.clip(cfg.exemplar_size as f64, cfg.exemplar_size as f64) }
}

/// Training pair from frames `i` (exemplar) and `j` (instance) of `seq`.
pub fn make_training_pair<R: Rng + ?Sized>(seq: &Sequence, i: usize, j: usize, cfg: &PairConfig, rng: &mut R) -> Result<TrainingPair> {
    if i >= seq.len() || j >= seq.len() || i.abs_diff(j) >= cfg.max_interval.max(1) {
        return Err(Error::Config(format!("frames {i}, {j} of {} with interval limit {}", seq.len(), cfg.max_interval)));
    }
    Ok(pair_from_frames(&seq.frames[i], &seq.annotations[i], &seq.frames[j], &seq.annotations[j], cfg, rng))
}
