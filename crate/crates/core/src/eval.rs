//! Evaluation on sequence sets and the ablation runner.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{generate_sequence, SceneConfig, Sequence};
use crate::error::Result;
use crate::metrics::{EvalReport, SequenceResult};
use crate::model::SiameseModel;
use crate::scalar::Scalar;
use crate::tracker::{Tracker, TrackerConfig};
use crate::train::{train, StepLog};

/// Which held-out synthetic set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestSet {
    /// No same-class distractors.
    Easy,
    /// `eval.hard_distractors` same-class distractors per sequence.
    Hard,
}

pub fn test_scene_config(cfg: &Config, set: TestSet) -> SceneConfig {
    let distractors = match set {
        TestSet::Easy => 0,
        TestSet::Hard => cfg.eval.hard_distractors,
    };
    SceneConfig { frames: cfg.eval.frames, distractors, ..cfg.scene.clone() }
}

/// The held-out sequences; seeds are disjoint from the training pool.
pub fn test_sequences(cfg: &Config, set: TestSet) -> Result<Vec<Sequence>> {
    let sc = test_scene_config(cfg, set);
    let base = cfg.eval.seed + if set == TestSet::Hard { 500_000 } else { 0 };
    (0..cfg.eval.sequences).map(|i| generate_sequence(&sc, base + i as u64)).collect()
}

/// Tracks one sequence from its first-frame annotation. The result covers
/// frames 2 onwards.
pub fn track_sequence<T: Scalar>(model: &SiameseModel<T>, tc: &TrackerConfig, seq: &Sequence) -> Result<Vec<crate::geometry::BBox<f64>>> {
    let mut tracker = Tracker::new(model, tc.clone());
    let mut state = tracker.init(&seq.frames[0], &seq.annotations[0])?;
    let mut out = Vec::with_capacity(seq.len().saturating_sub(1));
    for f in &seq.frames[1..] {
        let (b, s) = tracker.track_step(&state, f);
        state = s;
        out.push(b);
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(model: &SiameseModel<T>, tc: &TrackerConfig, sequences: &[Sequence]) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let pred = track_sequence(model, tc, seq)?;
        results.push(SequenceResult::new(seq.name.clone(), &pred, &seq.annotations[1..]));
    }
    Ok(EvalReport::from_sequences(results))
}

/// One trained-and-evaluated variant/seed combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub easy: Metrics,
    pub hard: Metrics,
    pub final_loss: f64,
    /// Wall-clock training time.
    #[serde(default)]
    pub train_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
}

impl From<&EvalReport> for Metrics {
    fn from(r: &EvalReport) -> Self {
        Self { ao: r.ao, sr50: r.sr50, sr75: r.sr75 }
    }
}

/// Seed-averaged row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: usize,
    pub easy: Metrics,
    pub hard: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl AblationReport {
    pub fn from_runs(runs: Vec<AblationRun>) -> Self {
        let mut names: Vec<String> = Vec::new();
        for r in &runs {
            if !names.contains(&r.variant) {
                names.push(r.variant.clone());
            }
        }
        let rows = names
            .into_iter()
            .map(|name| {
                let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == name).collect();
                let avg = |f: &dyn Fn(&AblationRun) -> Metrics| Metrics {
                    ao: mean(rs.iter().map(|r| f(r).ao)),
                    sr50: mean(rs.iter().map(|r| f(r).sr50)),
                    sr75: mean(rs.iter().map(|r| f(r).sr75)),
                };
                AblationRow { variant: name, seeds: rs.len(), easy: avg(&|r| r.easy), hard: avg(&|r| r.hard) }
            })
            .collect();
        Self { runs, rows }
    }

    /// Table with one row per variant: `variant,seeds,AO,SR0.5,SR0.75` on
    /// the hard set followed by the same three on the easy set.
    pub fn csv(&self) -> String {
        let mut s = String::from("variant,seeds,hard_AO,hard_SR0.5,hard_SR0.75,easy_AO,easy_SR0.5,easy_SR0.75\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                r.variant, r.seeds, r.hard.ao, r.hard.sr50, r.hard.sr75, r.easy.ao, r.easy.sr50, r.easy.sr75
            );
        }
        s
    }

    /// Per-seed hard-set AO differences `a − b` for seeds both variants ran.
    pub fn paired_differences(&self, a: &str, b: &str) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.variant == a)
            .filter_map(|ra| self.runs.iter().find(|rb| rb.variant == b && rb.seed == ra.seed).map(|rb| ra.hard.ao - rb.hard.ao))
            .collect()
    }
}

/// One-sample t statistic of `d` against zero; `None` with fewer than two
/// values or zero spread.
pub fn paired_t(d: &[f64]) -> Option<f64> {
    if d.len() < 2 {
        return None;
    }
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (var > 0.0).then(|| m / (var / n).sqrt())
}

/// Trains every `(variant, seed)` combination and evaluates it on the shared
/// easy and hard test sets. Models are saved under `out/<variant>/seed<N>`
/// when `out` is given.
pub fn ablate<T: Scalar>(
    variants: &[(String, Config)],
    seeds: &[u64],
    out: Option<&Path>,
    mut progress: impl FnMut(&str, u64, &StepLog),
) -> Result<AblationReport> {
    let base = &variants.first().expect("at least one variant").1;
    let easy = test_sequences(base, TestSet::Easy)?;
    let hard = test_sequences(base, TestSet::Hard)?;
    let mut runs = Vec::new();
    for (name, cfg) in variants {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            c.sync();
            let dir = out.map(|o| run_dir(o, name, seed));
            let start = std::time::Instant::now();
            let t = train::<T>(c.clone(), dir.as_deref(), |e| progress(name, seed, e))?;
            let train_seconds = start.elapsed().as_secs_f64();
            let e = evaluate(&t.model, &c.tracker, &easy)?;
            let h = evaluate(&t.model, &c.tracker, &hard)?;
            let final_loss = mean(t.log.iter().rev().take(50).map(|l| l.total));
            runs.push(AblationRun { variant: name.clone(), seed, easy: (&e).into(), hard: (&h).into(), final_loss, train_seconds });
        }
    }
    Ok(AblationReport::from_runs(runs))
}

/// Checkpoint directory of one ablation run under `out`.
pub fn run_dir(out: &Path, variant: &str, seed: u64) -> PathBuf {
    let name: String = variant.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect();
    out.join(name).join(format!("seed{seed}"))
}
