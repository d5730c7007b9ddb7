//! Training loop: synthetic pair sampling, the four-term objective, SGD with
//! a frozen-then-unfrozen backbone and warmup-then-decay learning rate.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::assign_labels;
use crate::autodiff::{Graph, Var};
use crate::checkpoint;
use crate::config::Config;
use crate::data::{pair_from_frames, Scene, SceneConfig, TrainingPair};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::hne::hne_loss;
use crate::image::Image;
use crate::losses::{centerness_bce, focal_loss, iou_loss, total_loss_var, LossParts};
use crate::model::SiameseModel;
use crate::nn::{Group, Sgd};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Seed of training scene `idx`. The training pool is the same for every run.
pub fn train_scene_seed(idx: usize) -> u64 {
    1_000_000 + idx as u64
}

/// Scene parameters of training scene `idx`, with its distractor count drawn
/// from the configured range.
pub fn train_scene_config(cfg: &Config, idx: usize) -> SceneConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(train_scene_seed(idx) ^ 0xD157);
    let t = &cfg.train;
    SceneConfig { frames: t.train_frames, distractors: rng.gen_range(t.min_distractors..=t.max_distractors), ..cfg.scene.clone() }
}

/// Lazily built pool of training scenes.
#[derive(Debug, Default)]
pub struct ScenePool {
    scenes: HashMap<usize, Scene>,
}

impl ScenePool {
    pub fn scene(&mut self, cfg: &Config, idx: usize) -> Result<&Scene> {
        if let std::collections::hash_map::Entry::Vacant(e) = self.scenes.entry(idx) {
            let s = Scene::new(train_scene_config(cfg, idx), train_scene_seed(idx))?;
            e.insert(s);
        }
        Ok(&self.scenes[&idx])
    }

    /// Draws one pair: a random scene, an exemplar frame, and a search frame
    /// less than `max_interval` frames away.
    pub fn sample_pair<R: Rng + ?Sized>(&mut self, cfg: &Config, rng: &mut R) -> Result<TrainingPair> {
        let idx = rng.gen_range(0..cfg.train.train_scenes);
        let scene = self.scene(cfg, idx)?;
        let n = scene.len();
        let gap = cfg.pairs.max_interval.max(1) - 1;
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(i.saturating_sub(gap)..=(i + gap).min(n - 1));
        let (zi, xi) = (scene.render(i), scene.render(j));
        let (zb, xb) = (scene.annotation(i), scene.annotation(j));
        Ok(pair_from_frames(&zi, &zb, &xi, &xb, &cfg.pairs, rng))
    }
}

/// Stacked inputs and dense targets of a batch.
#[derive(Debug, Clone)]
pub struct BatchTargets<T> {
    pub exemplar: Tensor<T>,
    pub instance: Tensor<T>,
    pub cls: Tensor<T>,
    pub cen: Tensor<T>,
    pub reg: Tensor<T>,
    pub gts: Vec<BBox<T>>,
    pub exemplar_boxes: Vec<BBox<T>>,
    /// False for pairs without any positive location.
    pub valid: Vec<bool>,
}

pub fn batch_targets<T: Scalar>(model: &SiameseModel<T>, pairs: &[TrainingPair]) -> BatchTargets<T> {
    let spec = model.grid_spec();
    let (s, n) = (spec.width * spec.height, pairs.len());
    let mut cls = vec![T::zero(); n * s];
    let mut cen = vec![T::zero(); n * s];
    let mut reg = vec![T::one(); n * 4 * s];
    let mut valid = Vec::with_capacity(n);
    for (b, p) in pairs.iter().enumerate() {
        match assign_labels(&p.gt.cast::<T>(), &spec) {
            Ok(m) => {
                cls[b * s..(b + 1) * s].copy_from_slice(&m.cls);
                cen[b * s..(b + 1) * s].copy_from_slice(&m.cen);
                reg[b * 4 * s..(b + 1) * 4 * s].copy_from_slice(&m.reg);
                valid.push(true);
            }
            Err(_) => valid.push(false),
        }
    }
    let (h, w) = (spec.height, spec.width);
    BatchTargets {
        exemplar: Image::batch(&pairs.iter().map(|p| &p.exemplar).collect::<Vec<_>>()),
        instance: Image::batch(&pairs.iter().map(|p| &p.instance).collect::<Vec<_>>()),
        cls: Tensor::from_vec(&[n, 1, h, w], cls).unwrap(),
        cen: Tensor::from_vec(&[n, 1, h, w], cen).unwrap(),
        reg: Tensor::from_vec(&[n, 4, h, w], reg).unwrap(),
        gts: pairs.iter().map(|p| p.gt.cast()).collect(),
        exemplar_boxes: pairs.iter().map(|p| p.exemplar_gt.cast()).collect(),
        valid,
    }
}

/// Objective of one batch.
#[derive(Debug, Clone)]
pub struct StepLoss<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub parts: LossParts,
    pub hne_positives: usize,
    pub hne_negatives: usize,
}

/// Builds the training objective on `g`. The contrastive term is computed
/// when HNE is enabled with a nonzero weight, or always with `force_hne`.
pub fn compute_loss<'g, T: Scalar, R: Rng + ?Sized>(
    model: &SiameseModel<T>,
    g: &'g Graph<T>,
    batch: &BatchTargets<T>,
    cfg: &Config,
    hne_rng: &mut R,
    force_hne: bool,
) -> Result<StepLoss<'g, T>> {
    let out = model.forward(g.constant(batch.exemplar.clone()), g.constant(batch.instance.clone()));
    let f = &out.fused;
    let t = &cfg.train;
    let l_sco = focal_loss(f.score, &batch.cls, T::lit(t.focal_alpha), T::lit(t.focal_gamma));
    let l_cen = centerness_bce(f.centerness, &batch.cen, &batch.cls);
    let l_reg = iou_loss(f.regression, &batch.reg, &batch.cls);
    let run_hne = force_hne || (cfg.hne.enabled && cfg.loss.contrastive != 0.0);
    let mut hne_positives = 0;
    let mut hne_negatives = 0;
    let l_con = if run_hne {
        let o = hne_loss(model, &out.exemplar, &out.instance, f, &batch.gts, &batch.exemplar_boxes, &batch.valid, &cfg.hne, hne_rng)?;
        o.map(|o| {
            hne_positives = o.sets.iter().map(|(_, s)| s.positives.len()).sum();
            hne_negatives = o.sets.iter().map(|(_, s)| s.hard_negatives.len()).sum();
            o.loss
        })
    } else {
        None
    };
    let v = |x: Var<'g, T>| x.value().item().to_f64_lossy();
    let parts = LossParts { score: v(l_sco), centerness: v(l_cen), regression: v(l_reg), contrastive: l_con.map(v).unwrap_or(0.0) };
    let total = total_loss_var(l_sco, l_cen, l_reg, l_con, &cfg.loss);
    Ok(StepLoss { total, parts, hne_positives, hne_negatives })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub score: f64,
    pub centerness: f64,
    pub regression: f64,
    pub contrastive: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub hne_positives: usize,
    pub hne_negatives: usize,
}

pub const LOG_HEADER: &str = "step,lr,score,centerness,regression,contrastive,total,grad_norm,hne_positives,hne_negatives";

impl StepLog {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{},{}",
            self.step,
            self.lr,
            self.score,
            self.centerness,
            self.regression,
            self.contrastive,
            self.total,
            self.grad_norm,
            self.hne_positives,
            self.hne_negatives
        )
    }
}

/// Training state. Data sampling and hard-negative sampling use separate
/// random streams so that runs differing only in HNE settings see the same
/// pairs.
#[derive(Debug)]
pub struct Trainer<T: Scalar> {
    pub model: SiameseModel<T>,
    pub config: Config,
    pub step: usize,
    pub log: Vec<StepLog>,
    opt: Sgd<T>,
    pool: ScenePool,
    data_rng: ChaCha8Rng,
    hne_rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut config: Config) -> Result<Self> {
        config.sync();
        config.validate()?;
        let model = SiameseModel::new(config.model.clone())?;
        Ok(Self::with_model(model, config, 0))
    }

    fn with_model(model: SiameseModel<T>, config: Config, step: usize) -> Self {
        let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
        data_rng.set_stream(1);
        let mut hne_rng = ChaCha8Rng::seed_from_u64(config.seed);
        hne_rng.set_stream(2);
        let opt = Sgd::new(T::lit(config.train.momentum), T::lit(config.train.weight_decay));
        Self { model, config, step, log: Vec::new(), opt, pool: ScenePool::default(), data_rng, hne_rng }
    }

    /// Continues from a checkpoint. Momentum buffers are not stored and
    /// restart at zero; the random streams are advanced past the saved step.
    pub fn resume(dir: &Path) -> Result<Self> {
        let (model, config, manifest) = checkpoint::load(dir)?;
        let mut t = Self::with_model(model, config, manifest.step);
        t.data_rng.set_word_pos(manifest.step as u128 * 1_000_000);
        t.hne_rng.set_word_pos(manifest.step as u128 * 1_000_000);
        Ok(t)
    }

    pub fn sample_batch(&mut self) -> Result<Vec<TrainingPair>> {
        (0..self.config.train.batch_size).map(|_| self.pool.sample_pair(&self.config, &mut self.data_rng)).collect()
    }

    /// One optimisation step on a freshly sampled batch.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let pairs = self.sample_batch()?;
        self.train_on(&pairs)
    }

    /// One optimisation step on the given pairs.
    pub fn train_on(&mut self, pairs: &[TrainingPair]) -> Result<StepLog> {
        let t = self.step;
        let frozen = t < self.config.train.frozen_steps();
        self.model.store.set_frozen(Group::Backbone, frozen);
        let batch = batch_targets(&self.model, pairs);
        let g = Graph::new();
        let loss = compute_loss(&self.model, &g, &batch, &self.config, &mut self.hne_rng, false)?;
        let total = loss.total.value().item().to_f64_lossy();
        if !total.is_finite() {
            return Err(Error::Diverged { step: t, detail: format!("loss {total} ({:?})", loss.parts) });
        }
        let grads = g.backward(loss.total);
        let grad_norm = Sgd::grad_norm(&self.model.store, &grads).to_f64_lossy();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step: t, detail: "non-finite gradient".into() });
        }
        let lr = self.config.train.lr_at(t);
        let clip = (self.config.train.grad_clip > 0.0).then(|| T::lit(self.config.train.grad_clip));
        self.opt.step(&mut self.model.store, &grads, T::lit(lr), clip);
        self.step += 1;
        let p = loss.parts;
        let entry = StepLog {
            step: t,
            lr,
            score: p.score,
            centerness: p.centerness,
            regression: p.regression,
            contrastive: p.contrastive,
            total,
            grad_norm,
            hne_positives: loss.hne_positives,
            hne_negatives: loss.hne_negatives,
        };
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Runs until `config.train.steps`, calling `on_step` after each step.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        while self.step < self.config.train.steps {
            let e = self.train_step()?;
            on_step(&e);
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.model, &self.config, self.step)?;
        let mut f = fs::File::create(dir.join("train_log.csv"))?;
        writeln!(f, "{LOG_HEADER}")?;
        for e in &self.log {
            writeln!(f, "{}", e.csv())?;
        }
        Ok(())
    }
}

/// Trains a model from scratch; writes a checkpoint to `out` when given.
pub fn train<T: Scalar>(config: Config, out: Option<&Path>, on_step: impl FnMut(&StepLog)) -> Result<Trainer<T>> {
    let mut t = Trainer::new(config)?;
    t.run(on_step)?;
    if let Some(dir) = out {
        t.save(dir)?;
    }
    Ok(t)
}
