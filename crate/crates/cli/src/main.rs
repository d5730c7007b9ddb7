use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use hnetrack_core::checkpoint;
use hnetrack_core::config::{parse_sweep, Config};
use hnetrack_core::data::{generate_sequence, load_sequence, save_sequence, SceneConfig, Sequence};
use hnetrack_core::eval::{ablate, evaluate, paired_t, test_sequences, TestSet};
use hnetrack_core::image::Image;
use hnetrack_core::metrics::EvalReport;
use hnetrack_core::tracker::Tracker;
use hnetrack_core::train::{Trainer, LOG_HEADER};
use hnetrack_core::Model32;

#[derive(Parser)]
#[command(name = "hnetrack", version, about = "Anchor-free Siamese tracker with hard-negative emphasis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write a checkpoint directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on sequence directories or a synthetic test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A sequence directory, a directory of them, or `synthetic:easy` / `synthetic:hard`.
        #[arg(long)]
        data: String,
        /// Report path; a `.json` twin is written next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Track one sequence and write an `x,y,w,h` line per frame.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        viz: Option<PathBuf>,
    },
    /// Train and compare config variants over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `KEY=V1,V2,...`; defaults to `hne.enabled=true,false`.
        #[arg(long)]
        sweep: Option<String>,
        /// Comma-separated seeds; defaults to the config's `seeds`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Write overlay and score-heatmap images for every frame.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic sequences in GOT-10k layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        distractors: usize,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn load_sequences(data: &str, cfg: &Config) -> Result<Vec<Sequence>> {
    match data {
        "synthetic:easy" => return Ok(test_sequences(cfg, TestSet::Easy)?),
        "synthetic:hard" => return Ok(test_sequences(cfg, TestSet::Hard)?),
        _ => {}
    }
    let dir = Path::new(data);
    if dir.join("groundtruth.txt").exists() {
        return Ok(vec![load_sequence(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth.txt").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        bail!("no sequences under {}", dir.display());
    }
    subdirs.iter().map(|d| load_sequence(d).map_err(Into::into)).collect()
}

fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let mut csv = String::from("sequence,frames,AO,SR0.5,SR0.75\n");
    for s in &report.sequences {
        let one = EvalReport::from_sequences(vec![s.clone()]);
        csv += &format!("{},{},{:.4},{:.4},{:.4}\n", s.name, s.ious.len(), one.ao, one.sr50, one.sr75);
    }
    csv += &format!("ALL,{},{:.4},{:.4},{:.4}\n", report.num_frames(), report.ao, report.sr50, report.sr75);
    fs::write(path, csv)?;
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

fn progress_line(tag: &str, e: &hnetrack_core::train::StepLog, every: usize, start: &Instant) {
    if every > 0 && e.step.is_multiple_of(every) {
        eprintln!(
            "{tag} step {:5} lr {:.2e} total {:.4} sco {:.4} cen {:.4} reg {:.4} con {:.4} |g| {:.2} ({:.0}s)",
            e.step,
            e.lr,
            e.total,
            e.score,
            e.centerness,
            e.regression,
            e.contrastive,
            e.grad_norm,
            start.elapsed().as_secs_f64()
        );
    }
}

fn viz_sequence(model: &Model32, cfg: &Config, seq: &Sequence, out: &Path) -> Result<Vec<[f64; 4]>> {
    fs::create_dir_all(out)?;
    let mut tracker = Tracker::new(model, cfg.tracker.clone());
    let mut state = tracker.init(&seq.frames[0], &seq.annotations[0])?;
    let b0 = seq.annotations[0];
    let mut boxes = vec![[b0.x0, b0.y0, b0.width(), b0.height()]];
    for (i, frame) in seq.frames.iter().enumerate().skip(1) {
        let (b, s, d) = tracker.track_step_detailed(&state, frame);
        state = s;
        boxes.push([b.x0, b.y0, b.width(), b.height()]);
        let mut overlay = frame.clone();
        if let Some(gt) = seq.annotations.get(i) {
            overlay.draw_box(gt, [0.0, 1.0, 0.0], 1);
        }
        overlay.draw_box(&b, [1.0, 0.0, 0.0], 2);
        let side = overlay.height();
        let heat = Image::heatmap(&d.final_score, d.side, d.side).resize_nearest(side, side);
        let mut panel = Image::filled(overlay.width() + side, side, [0.0; 3]);
        panel.paste(&overlay, 0, 0);
        panel.paste(&heat, overlay.width(), 0);
        panel.save(&out.join(format!("{:08}.png", i + 1)))?;
    }
    Ok(boxes)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train { config, seed, out, resume } => {
            let mut trainer = match resume {
                Some(dir) => Trainer::<f32>::resume(&dir)?,
                None => {
                    let mut cfg = load_config(config.as_deref())?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    cfg.sync();
                    Trainer::new(cfg)?
                }
            };
            let start = Instant::now();
            let every = trainer.config.train.log_every;
            eprintln!("{LOG_HEADER}");
            trainer.run(|e| progress_line("train", e, every, &start))?;
            trainer.save(&out)?;
            eprintln!("saved {} after {} steps", out.display(), trainer.step);
        }
        Cmd::Eval { checkpoint, data, report } => {
            let (model, cfg, _) = checkpoint::load::<f32>(&checkpoint)?;
            let seqs = load_sequences(&data, &cfg)?;
            let r = evaluate(&model, &cfg.tracker, &seqs)?;
            write_report(&r, &report)?;
            println!("AO {:.4}  SR0.5 {:.4}  SR0.75 {:.4}  ({} sequences, {} frames)", r.ao, r.sr50, r.sr75, r.sequences.len(), r.num_frames());
        }
        Cmd::Track { checkpoint, sequence, output, viz } => {
            let (model, cfg, _) = checkpoint::load::<f32>(&checkpoint)?;
            let seq = load_sequence(&sequence)?;
            let boxes = match viz {
                Some(dir) => viz_sequence(&model, &cfg, &seq, &dir)?,
                None => {
                    let mut b0 = vec![seq.annotations[0]];
                    b0.extend(hnetrack_core::eval::track_sequence(&model, &cfg.tracker, &seq)?);
                    b0.iter().map(|b| [b.x0, b.y0, b.width(), b.height()]).collect()
                }
            };
            let lines: Vec<String> = boxes.iter().map(|b| format!("{:.2},{:.2},{:.2},{:.2}", b[0], b[1], b[2], b[3])).collect();
            fs::write(&output, lines.join("\n") + "\n")?;
        }
        Cmd::Viz { checkpoint, sequence, out } => {
            let (model, cfg, _) = checkpoint::load::<f32>(&checkpoint)?;
            let seq = load_sequence(&sequence)?;
            viz_sequence(&model, &cfg, &seq, &out)?;
        }
        Cmd::Ablate { config, sweep, seeds, out } => {
            let base = load_config(config.as_deref())?;
            let (key, values) = parse_sweep(sweep.as_deref().unwrap_or("hne.enabled=true,false"))?;
            let variants = values
                .iter()
                .map(|v| Ok((format!("{key}={v}"), base.with_override(&key, v)?)))
                .collect::<Result<Vec<_>>>()?;
            let seeds: Vec<u64> = match seeds {
                Some(s) => s.split(',').map(|v| v.trim().parse()).collect::<Result<_, _>>().context("--seeds")?,
                None => base.seeds.clone(),
            };
            let start = Instant::now();
            let every = base.train.log_every * 4;
            let report = ablate::<f32>(&variants, &seeds, Some(&out), |name, seed, e| {
                progress_line(&format!("{name} seed {seed}"), e, every, &start)
            })?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("ablation.csv"), report.csv())?;
            fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
            print!("{}", report.csv());
            if variants.len() == 2 {
                let d = report.paired_differences(&variants[0].0, &variants[1].0);
                println!("paired hard-set AO differences {:?}, t = {:?}", d, paired_t(&d));
            }
        }
        Cmd::Synth { out, count, distractors, frames, seed } => {
            let sc = SceneConfig { distractors, frames, ..SceneConfig::default() };
            for i in 0..count {
                let seq = generate_sequence(&sc, seed + i as u64)?;
                save_sequence(&seq, &out.join(format!("seq{:03}", i + 1)))?;
            }
        }
    }
    Ok(())
}
