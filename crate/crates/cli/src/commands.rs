use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use romgait::biped_env::BipedEnv;
use romgait::env::EpisodeConfig;
use romgait::evalkit::{export_comparison, mse_report, rollout_features, MseReport, CHANNELS};
use romgait::gaitdata::{dataset_statistics, record_reference, GaitFeature, RecordingInfo, ReferenceDataset};
use romgait::neural::Checkpoint;
use romgait::ppo::{self, episode_seed, evaluate_policy, TeacherConfig, TeacherPolicy};
use romgait::rom_env::RomEnv;
use romgait::student::{self, StudentPolicy};

use crate::config::{write_resolved, RunConfig};
use crate::manifest::{file_hash, ManifestBuilder};
use crate::Common;

pub const TEACHER_EVAL_EPISODES: usize = 10;

fn resolve(common: &Common) -> Result<RunConfig> {
    RunConfig::resolve(common.config.as_deref(), &common.sets)
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Remove append-mode logs left by an earlier run so a rerun starts clean.
fn clear(dir: &Path, names: &[&str]) -> Result<()> {
    for name in names {
        let p = dir.join(name);
        if p.exists() {
            log::warn!("replacing existing {}", p.display());
            fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
        }
    }
    Ok(())
}

fn existing(paths: impl IntoIterator<Item = PathBuf>) -> Vec<PathBuf> {
    paths.into_iter().filter(|p| p.exists()).collect()
}

fn periodic_checkpoints(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix) && n.ends_with(".ckpt")))
        .collect();
    found.sort();
    Ok(found)
}

pub fn validate_teacher(cfg: &TeacherConfig) -> Result<()> {
    cfg.ppo.validate().context("config [teacher.ppo]")?;
    cfg.rom.validate().context("config [teacher.rom]")?;
    cfg.episode.validate().context("config [teacher.episode]")?;
    Ok(())
}

pub fn train_teacher(common: &Common, target_speed: Option<f64>) -> Result<()> {
    let mut run = resolve(common)?;
    let cfg = &mut run.teacher;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.steps {
        cfg.ppo.total_steps = n;
    }
    if let Some(v) = target_speed {
        cfg.episode.target_speed = v;
    }
    validate_teacher(cfg)?;
    let out = out_dir(common, "runs/teacher")?;
    clear(&out, &["metrics.csv"])?;
    write_resolved(&run, &out)?;
    let cfg = &run.teacher;
    let mut manifest = ManifestBuilder::start("train-teacher", cfg.seed, cfg)?;

    let outcome = ppo::train_teacher(cfg, Some(&out), None)?;
    let policy = TeacherPolicy { policy: outcome.state.policy.clone(), normalizer: outcome.state.normalizer.clone() };
    let mut env = RomEnv::new(cfg.rom.clone(), cfg.episode.clone())?;
    let eval = evaluate_policy(&mut |o: &[f64]| policy.act(o), &mut env, TEACHER_EVAL_EPISODES, episode_seed(cfg.seed, u64::MAX))?;
    let mean_speed = eval.iter().map(|e| e.mean_speed).sum::<f64>() / eval.len() as f64;
    let falls = eval.iter().filter(|e| e.fell).count();
    println!("teacher: {} steps, eval mean speed {mean_speed:.3} m/s (target {}), {falls} falls", outcome.state.step, cfg.episode.target_speed);
    manifest.extra("evaluation", &eval)?.extra("mean_eval_speed", mean_speed)?;

    let mut outputs = existing([out.join("teacher.ckpt"), out.join("metrics.csv"), out.join("config.toml")]);
    outputs.extend(periodic_checkpoints(&out, "teacher_step_")?);
    manifest.finish(&out, &outputs)?;
    Ok(())
}

pub fn record(common: &Common, checkpoint: &Path, export_csv: bool) -> Result<()> {
    let mut run = resolve(common)?;
    let rc = &mut run.record;
    if let Some(s) = common.seed {
        rc.seed = s;
    }
    if let Some(n) = common.steps {
        rc.steps = n;
    }
    rc.export_csv |= export_csv;
    if rc.steps == 0 {
        bail!("config [record]: steps must be >= 1");
    }
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading teacher {}", checkpoint.display()))?;
    let policy = TeacherPolicy::from_checkpoint(&ck)?;
    let tcfg: TeacherConfig = serde_json::from_value(ck.metadata["config"].clone()).context("teacher checkpoint config")?;
    let episode = EpisodeConfig { max_steps: tcfg.episode.max_steps.max(run.record.steps), ..tcfg.episode.clone() };
    let mut env = RomEnv::new(tcfg.rom.clone(), episode)?;
    let info = RecordingInfo {
        teacher_checkpoint: file_hash(checkpoint)?,
        dt: tcfg.rom.world.dt,
        normalization_height: env.standing_height(),
    };
    let out = out_dir(common, "runs/reference")?;
    let mut manifest = ManifestBuilder::start("record", run.record.seed, &run.record)?;
    manifest.input(checkpoint)?;
    let dataset = record_reference(&mut env, |o: &[f64]| policy.act(o), run.record.steps, run.record.seed, info)?;
    let path = out.join("reference.gait");
    dataset.save(&path)?;
    let mut outputs = vec![path.clone()];
    if run.record.export_csv {
        let csv = out.join("reference.csv");
        dataset.export_csv(&csv)?;
        outputs.push(csv);
    }
    let stats = dataset_statistics(&dataset);
    println!("recorded {} frames to {}", dataset.len(), path.display());
    manifest.extra("statistics", &stats)?.extra("metadata", dataset.metadata())?;
    manifest.finish(&out, &outputs)?;
    Ok(())
}

fn load_reference(path: &Path) -> Result<ReferenceDataset> {
    ReferenceDataset::load(path).with_context(|| format!("loading reference {}", path.display()))
}

pub fn train_student(common: &Common, reference: &Path, eta: Option<f64>, target_speed: Option<f64>) -> Result<()> {
    let data = load_reference(reference)?;
    let mut run = resolve(common)?;
    let cfg = &mut run.student;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.steps {
        cfg.total_steps = n;
    }
    if let Some(e) = eta {
        cfg.blend.eta = e;
    }
    cfg.episode.target_speed = target_speed.unwrap_or(data.metadata().target_speed);
    cfg.validate().context("config [student]")?;
    let out = out_dir(common, "runs/student")?;
    clear(&out, &["metrics.csv", "discriminator.csv"])?;
    write_resolved(&run, &out)?;
    let cfg = &run.student;
    let mut manifest = ManifestBuilder::start("train-student", cfg.seed, cfg)?;
    manifest.input(reference)?;
    if !cfg.blend.uses_imitation() {
        log::info!("eta = 1: pure environment reward, discriminator disabled");
    }

    let outcome = student::train_student(cfg, &data, Some(&out))?;
    let frozen = outcome.discriminator.as_ref().is_some_and(|d| d.frozen);
    println!(
        "student: {} steps, {} learner updates, {} discriminator updates{}",
        outcome.steps,
        outcome.agent.updates,
        outcome.disc_events.len(),
        if frozen { " (frozen)" } else { "" }
    );
    manifest
        .extra("split_seed", cfg.split_seed())?
        .extra("learner_updates", outcome.agent.updates)?
        .extra("discriminator_updates", outcome.disc_events.len())?
        .extra("discriminator_frozen", frozen)?;
    let mut outputs = existing([out.join("student.ckpt"), out.join("metrics.csv"), out.join("discriminator.csv"), out.join("config.toml")]);
    outputs.extend(periodic_checkpoints(&out, "student_step_")?);
    manifest.finish(&out, &outputs)?;
    Ok(())
}

fn rollouts(checkpoint: &Path, episodes: usize, max_steps: usize, seed: u64) -> Result<Vec<Vec<GaitFeature>>> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading student {}", checkpoint.display()))?;
    let policy = StudentPolicy::from_checkpoint(&ck)?;
    let episode = EpisodeConfig { max_steps, ..policy.config.episode.clone() };
    let mut env = BipedEnv::new(policy.config.biped.clone(), episode)?;
    (0..episodes)
        .map(|k| Ok(rollout_features(&mut env, &mut |o: &[f64]| policy.act(o), max_steps, episode_seed(seed, k as u64))?))
        .collect()
}

fn print_report(r: &MseReport) {
    println!("{:<10} {:>12} {:>12} {:>10}", "channel", "baseline", "student", "reduction");
    for c in 0..CHANNELS.len() {
        let red = r.reduction[c].map_or("n/a".to_string(), |v| format!("{v:.1}%"));
        println!("{:<10} {:>12.5} {:>12.5} {:>10}", CHANNELS[c], r.baseline_mse[c], r.ours_mse[c], red);
    }
    let avg = r.average_reduction.map_or("n/a".to_string(), |v| format!("{v:.1}%"));
    println!("{:<10} {:>12} {:>12} {:>10}", "average", "", "", avg);
}

pub fn evaluate(common: &Common, reference: &Path, student: Option<&Path>, baseline: Option<&Path>, episodes: Option<usize>) -> Result<()> {
    let data = load_reference(reference)?;
    let mut run = resolve(common)?;
    let ec = &mut run.evaluate;
    if let Some(s) = common.seed {
        ec.seed = s;
    }
    if let Some(n) = common.steps {
        ec.max_steps = n;
    }
    if let Some(e) = episodes {
        ec.episodes = e;
    }
    if ec.episodes == 0 {
        bail!("config [evaluate]: episodes must be >= 1");
    }
    let ec = run.evaluate.clone();
    let max_steps = if ec.max_steps == 0 { data.len() } else { ec.max_steps };
    let out = out_dir(common, "runs/evaluate")?;
    let mut manifest = ManifestBuilder::start("evaluate", ec.seed, &ec)?;
    manifest.input(reference)?;

    let mut named = Vec::new();
    let mut sets = Vec::new();
    for (name, path) in [("student", student), ("baseline", baseline)] {
        if let Some(p) = path {
            let r = rollouts(p, ec.episodes, max_steps, ec.seed)?;
            manifest.input(p)?;
            log::info!("{name}: episode lengths {:?}", r.iter().map(Vec::len).collect::<Vec<_>>());
            named.push((name.to_string(), r[0].clone()));
            sets.push(r);
        }
    }
    let report = match (student, baseline) {
        (Some(_), Some(_)) => Some(mse_report(data.frames(), &sets[0], &sets[1], ec.alignment)?),
        _ => {
            log::warn!("need both --student and --baseline for an MSE report; exporting trajectories only");
            None
        }
    };
    if let Some(r) = &report {
        print_report(r);
    }
    let outputs = export_comparison(data.frames(), &named, report.as_ref(), &out)?;
    manifest.finish(&out, &outputs)?;
    Ok(())
}

pub fn show_config(common: &Common, defaults: bool) -> Result<()> {
    let run = if defaults { RunConfig::default() } else { resolve(common)? };
    print!("{}", run.to_toml()?);
    Ok(())
}
