//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs every criterion in order by default. Pass criterion numbers as
//! arguments to run a subset: `cargo test -p romgait-cli --test acceptance -- 1 2 5`.
//! Criteria 6, 7 and 9 share one trained teacher and its 2000-frame recording.

use std::f64::consts::{LN_2, PI};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use romgait::env::{exponential_reward, EpisodeConfig};
use romgait::evalkit::{mse_report, rollout_features, Alignment, MseReport};
use romgait::gail::{
    accuracy, bce_with_logits, blend_reward, discriminator_loss, gradient_gap, imitation_bonus, synthetic_pair,
    Discriminator, DiscriminatorConfig,
};
use romgait::gaitdata::{record_reference, GaitFeature, RecordingInfo, ReferenceDataset};
use romgait::neural::{Activation, Init, Mlp, MlpSpec, Mode};
use romgait::physics2d::{mechanical_energy, Body, LegMount, SpringLegParams, Vec2, World, WorldConfig};
use romgait::ppo::{self, episode_seed, evaluate_policy, tracking_config, TeacherConfig, TeacherPolicy};
use romgait::rom_env::{build_world, RomConfig, RomEnv};
use romgait::student::{self, student_checkpoint, StudentConfig, StudentPolicy};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- criterion 1

fn oscillator_period() -> f64 {
    // 2 kg on a 50 N/m spring hanging from a fixed anchor, no gravity
    let (m, k) = (2.0, 50.0);
    let cfg = WorldConfig { gravity: Vec2::ZERO, dt: 1e-3, substeps: 1, ..WorldConfig::default() };
    let mut w = World::new(cfg).unwrap();
    let anchor = w.add_body(Body::anchor("anchor", Vec2::new(0.0, 2.0)));
    let mass = w.add_body(Body::point_mass("mass", m, Vec2::new(0.0, 0.9)));
    w.add_leg(LegMount {
        name: "spring".into(),
        hip_body: anchor,
        hip_anchor: Vec2::ZERO,
        foot_body: mass,
        params: SpringLegParams {
            rest_length: 1.0,
            stiffness: k,
            damping: 0.0,
            hip_torque_limit: 1.0,
            hip_damping: 0.0,
            hip_limits: None,
        },
    });
    let mut crossings = Vec::new();
    let mut prev = w.leg_state(0).current_length - 1.0;
    for step in 1..=8000 {
        w.step(&[]).unwrap();
        let x = w.leg_state(0).current_length - 1.0;
        if prev < 0.0 && x >= 0.0 {
            crossings.push((step as f64 - 1.0 - prev / (x - prev)) * 1e-3);
        }
        prev = x;
    }
    (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64
}

fn flight_energy_drift() -> f64 {
    let cfg = RomConfig {
        damping: 0.0,
        hip_damping: 0.0,
        world: WorldConfig { dt: 1e-3, substeps: 1, ..WorldConfig::default() },
        ..RomConfig::default()
    };
    let mut world = build_world(&cfg, [0.3, -0.2]).unwrap();
    for (i, b) in world.bodies.iter_mut().enumerate() {
        b.state.position.y += 30.0;
        b.state.linear_velocity = Vec2::new(0.8, 3.0 + 0.1 * i as f64);
    }
    let e0 = mechanical_energy(&world);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        world.step(&[0.0, 0.0]).unwrap();
        worst = worst.max(((mechanical_energy(&world) - e0) / e0).abs());
    }
    assert!(world.contacts().iter().all(|c| !c.in_contact), "flight touched the ground");
    worst
}

fn criterion_1() -> Outcome {
    let period = oscillator_period();
    let analytic = 2.0 * PI * (2.0f64 / 50.0).sqrt();
    let period_err = ((period - analytic) / analytic).abs();
    let drift = flight_energy_drift();
    check(
        period_err < 0.01 && drift < 0.01,
        format!("period {period:.5} s vs {analytic:.5} s ({:.3}%), flight energy drift {:.4}%", 100.0 * period_err, 100.0 * drift),
    )
}

// ---------------------------------------------------------------- criterion 2

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

fn central_difference(net: &Mlp, loss: &dyn Fn(&Mlp) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut probe = net.clone();
    (0..net.num_params())
        .map(|i| {
            let p = net.params()[i];
            probe.params_mut()[i] = p + h;
            let up = loss(&probe);
            probe.params_mut()[i] = p - h;
            let down = loss(&probe);
            probe.params_mut()[i] = p;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Policy head: tanh-squashed outputs weighted by random coefficients.
fn policy_case(rng: &mut ChaCha8Rng) -> f64 {
    let net = Mlp::new(MlpSpec::new(6, &[10, 10], Activation::Relu, 4), Init::UniformFanIn, rng).unwrap();
    let x = random_batch(rng, 4, 6);
    let w = random_batch(rng, 4, 4);
    let loss = |n: &Mlp| (n.forward(x.view()).unwrap().mapv(f64::tanh) * &w).sum();
    let (y, trace) = net.forward_trace(x.view(), Mode::Eval, rng).unwrap();
    let g_out = y.mapv(|v| 1.0 - v.tanh().powi(2)) * &w;
    let analytic = net.backward(&trace, g_out.view()).unwrap().params;
    rel_err(&analytic, &central_difference(&net, &loss))
}

/// Critic: mean squared error against random targets.
fn critic_case(rng: &mut ChaCha8Rng) -> f64 {
    let net = Mlp::new(MlpSpec::new(8, &[10, 10], Activation::Relu, 1), Init::UniformFanIn, rng).unwrap();
    let x = random_batch(rng, 6, 8);
    let t = random_batch(rng, 6, 1);
    let n = x.nrows() as f64;
    let loss = |m: &Mlp| (m.forward(x.view()).unwrap() - &t).mapv(|d| d * d).sum() / n;
    let (q, trace) = net.forward_trace(x.view(), Mode::Eval, rng).unwrap();
    let g_out = (q - &t) * (2.0 / n);
    let analytic = net.backward(&trace, g_out.view()).unwrap().params;
    rel_err(&analytic, &central_difference(&net, &loss))
}

/// Discriminator: the full training loss with input noise, dropout, label
/// smoothing and gradient penalty, all randomness fixed by one seed.
fn discriminator_case(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = DiscriminatorConfig { hidden: vec![12, 8], ..DiscriminatorConfig::default() };
    let net = Mlp::new(cfg.spec(), Init::UniformFanIn, rng).unwrap();
    let (real, fake) = synthetic_pair(5, 1.0, 1.0, rng);
    let noise_seed: u64 = rng.random();
    let loss_at = |n: &Mlp| discriminator_loss(n, real.view(), fake.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(noise_seed)).unwrap();
    let analytic = loss_at(&net).grads;
    rel_err(&analytic, &central_difference(&net, &|n| loss_at(n).loss))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases: [(&str, fn(&mut ChaCha8Rng) -> f64); 3] =
        [("policy", policy_case), ("critic", critic_case), ("discriminator", discriminator_case)];
    let mut worst = [0.0f64; 3];
    let mut failures = 0;
    for i in 0..100 {
        let e = cases[i % 3].1(&mut rng);
        worst[i % 3] = worst[i % 3].max(e);
        if !(e < 1e-4) {
            failures += 1;
        }
    }
    let detail = cases.iter().zip(worst).map(|((name, _), w)| format!("{name} worst {w:.2e}")).collect::<Vec<_>>().join(", ");
    check(failures == 0, format!("100 cases, {failures} above 1e-4; {detail}"))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let reward = exponential_reward(1.0, 1.0, 2.0);
    let bonus = imitation_bonus(0.5);
    let blend = blend_reward(1.0, LN_2, 0.5);
    // constant D = 0.5 means logit 0 for every real and fake row
    let bce = bce_with_logits(0.0, 1.0) + bce_with_logits(0.0, 0.0);
    let ok = reward == 1.0 && (bonus - LN_2).abs() < 1e-15 && (blend - 0.8466).abs() <= 1e-4 && (bce - 2.0 * LN_2).abs() <= 1e-9;
    check(ok, format!("exp(0) = {reward}, r_im(0.5) = {bonus:.12}, blend = {blend:.6}, BCE = {bce:.12}"))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let baseline = [0.01407, 0.25035, 0.01750, 0.18821, 0.02543];
    let ours = [0.00408, 0.18992, 0.01708, 0.07136, 0.00962];
    let expected = [71.0, 24.1, 2.4, 62.1, 62.2];
    let r = MseReport::from_mse(baseline, ours);
    let got: Vec<f64> = r.reduction.iter().map(|v| v.unwrap()).collect();
    let avg = r.average_reduction.unwrap();
    let ok = got.iter().zip(expected).all(|(g, e)| (g - e).abs() <= 0.05) && (avg - 44.4).abs() <= 0.05;
    let shown = got.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(", ");
    check(ok, format!("reductions [{shown}]%, average {avg:.2}%"))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (real, fake) = synthetic_pair(4000, 4.0, 0.5, &mut rng);
    let (real_test, fake_test) = synthetic_pair(1000, 4.0, 0.5, &mut rng);
    // patience is a schedule property checked by criterion 8; here the
    // network trains on until the gradient gap has settled
    let cfg = DiscriminatorConfig { batch_size: 128, patience: usize::MAX, ..DiscriminatorConfig::default() };
    let mut d = Discriminator::new(cfg, real.view(), 5, &mut rng).unwrap();
    let fake_rows = |rng: &mut ChaCha8Rng, n: usize| -> Array2<f64> {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..fake.nrows())).collect();
        romgait::neural::gather_rows(&fake, &idx)
    };
    let fake_holdout = fake_rows(&mut rng, 128);
    let gap_at = |net: &Mlp| gradient_gap(net, real_test.view(), fake_test.view(), &mut ChaCha8Rng::seed_from_u64(55)).unwrap();
    let acc_at = |net: &Mlp| accuracy(net, real_test.view(), fake_test.view()).unwrap();
    let (mut reached, mut gap_100) = (None, f64::NAN);
    for update in 1..=10_000 {
        let batch = fake_rows(&mut rng, 128);
        d.train_step(batch.view(), fake_holdout.view(), &mut rng).unwrap();
        if update == 100 {
            gap_100 = gap_at(&d.net);
        }
        if reached.is_none() && update % 10 == 0 && acc_at(&d.net) >= 0.95 {
            reached = Some(update);
        }
    }
    let gap_end = gap_at(&d.net);
    let drop = 1.0 - gap_end / gap_100;
    let ok = reached.is_some_and(|u| u <= 2000) && drop >= 0.5;
    check(
        ok,
        format!(
            "95% holdout accuracy at update {}, final accuracy {:.3}; gradient gap {gap_100:.3} -> {gap_end:.3} ({:.0}% drop)",
            reached.map_or("never".into(), |u| u.to_string()),
            acc_at(&d.net),
            100.0 * drop
        ),
    )
}

// ---------------------------------------------------------- shared teacher

struct Teacher {
    config: TeacherConfig,
    policy: TeacherPolicy,
    decile_rewards: (f64, f64),
}

fn train_reference_teacher() -> Teacher {
    let base = tracking_config(1.0);
    let config = TeacherConfig { ppo: ppo::PpoConfig { total_steps: 200_000, ..base.ppo.clone() }, ..base };
    let out = ppo::train_teacher(&config, None, None).unwrap();
    let rewards: Vec<f64> = out.metrics.iter().map(|m| m.mean_reward).collect();
    let tenth = (rewards.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let decile_rewards = (mean(&rewards[..tenth]), mean(&rewards[rewards.len() - tenth..]));
    let policy = TeacherPolicy { policy: out.state.policy, normalizer: out.state.normalizer };
    Teacher { config, policy, decile_rewards }
}

fn record(teacher: &Teacher, frames: usize) -> ReferenceDataset {
    let cfg = &teacher.config;
    let mut env = RomEnv::new(cfg.rom.clone(), EpisodeConfig { max_steps: frames, ..cfg.episode.clone() }).unwrap();
    let info = RecordingInfo { teacher_checkpoint: "acceptance".into(), dt: cfg.rom.world.dt, normalization_height: env.standing_height() };
    record_reference(&mut env, |o: &[f64]| teacher.policy.act(o), frames, 7, info).unwrap()
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6(teacher: &Teacher) -> Outcome {
    let cfg = &teacher.config;
    let mut env = RomEnv::new(cfg.rom.clone(), cfg.episode.clone()).unwrap();
    let eval = evaluate_policy(&mut |o: &[f64]| teacher.policy.act(o), &mut env, 10, episode_seed(cfg.seed, u64::MAX)).unwrap();
    let speed = eval.iter().map(|e| e.mean_speed).sum::<f64>() / eval.len() as f64;
    let err = (speed - 1.0).abs();
    let (first, last) = teacher.decile_rewards;
    check(
        err <= 0.3 && last > first,
        format!("mean eval speed {speed:.3} m/s over 10 episodes ({:.0}% off), reward first decile {first:.4} -> last {last:.4}", 100.0 * err),
    )
}

// ---------------------------------------------------------------- criterion 7

const STUDENT_SEEDS: [u64; 3] = [1, 2, 3];
const EVAL_EPISODES: u64 = 5;

fn student_rollouts(reference: &ReferenceDataset, eta: f64, seed: u64) -> Vec<Vec<GaitFeature>> {
    let mut cfg = StudentConfig { seed, total_steps: 300_000, log_interval: 25_000, ..StudentConfig::default() };
    cfg.blend.eta = eta;
    cfg.sac.hidden_sizes = vec![64, 64];
    cfg.sac.batch_size = 128;
    cfg.sac.updates_per_env_step = 0.25;
    cfg.episode.target_speed = reference.metadata().target_speed;
    let out = student::train_student(&cfg, reference, None).unwrap();
    let ck = student_checkpoint(&out.agent, out.discriminator.as_ref(), &cfg, out.steps);
    let policy = StudentPolicy::from_checkpoint(&ck).unwrap();
    let max_steps = reference.len();
    let mut env = romgait::biped_env::BipedEnv::new(cfg.biped.clone(), EpisodeConfig { max_steps, ..cfg.episode.clone() }).unwrap();
    (0..EVAL_EPISODES).map(|k| rollout_features(&mut env, &mut |o: &[f64]| policy.act(o), max_steps, episode_seed(seed, k)).unwrap()).collect()
}

fn criterion_7(reference: &ReferenceDataset) -> Outcome {
    let (mut ours, mut base) = (Vec::new(), Vec::new());
    for seed in STUDENT_SEEDS {
        ours.extend(student_rollouts(reference, 0.5, seed));
        base.extend(student_rollouts(reference, 1.0, seed));
    }
    // pooled over seeds and episodes: the per-channel mean of per-seed means
    let r = mse_report(reference.frames(), &ours, &base, Alignment::None).unwrap();
    let fmt = |v: &[f64; 5]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    check(
        r.channels_improved() >= 4,
        format!(
            "eta 0.5 better on {}/5 channels; MSE eta 0.5 [{}] vs eta 1 [{}], average reduction {:.1}%",
            r.channels_improved(),
            fmt(&r.ours_mse),
            fmt(&r.baseline_mse),
            r.average_reduction.unwrap_or(f64::NAN)
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn schedule_reference() -> ReferenceDataset {
    let frames: Vec<GaitFeature> = (0..400)
        .map(|t| {
            let p = 0.2 * t as f64;
            GaitFeature::new([1.0 + 0.02 * p.sin(), 0.3 * p.sin(), -0.95 + 0.05 * p.cos(), -0.3 * p.sin(), -0.95 - 0.05 * p.cos()]).unwrap()
        })
        .collect();
    let meta = romgait::gaitdata::DatasetMetadata {
        teacher_checkpoint: "synthetic".into(),
        target_speed: 1.0,
        frames: frames.len() as u64,
        dt: 1.0 / 60.0,
        normalization_height: 1.0,
        seed: 0,
        format_version: romgait::gaitdata::FORMAT_VERSION,
    };
    ReferenceDataset::new(frames, meta).unwrap()
}

fn schedule_run(learning_rate: f64) -> student::StudentOutcome {
    let mut cfg = StudentConfig { seed: 8, total_steps: 9000, log_interval: 1000, ..StudentConfig::default() };
    cfg.sac.hidden_sizes = vec![16, 16];
    cfg.sac.batch_size = 32;
    cfg.sac.warmup_steps = 1000;
    cfg.discriminator.hidden = vec![16, 8];
    cfg.discriminator.batch_size = 32;
    cfg.discriminator.learning_rate = learning_rate;
    student::train_student(&cfg, &schedule_reference(), None).unwrap()
}

fn criterion_8() -> Outcome {
    let mut problems = Vec::new();
    let run = schedule_run(1e-5);
    let ev = &run.disc_events;
    if run.schedule_calls != run.agent.updates {
        problems.push(format!("{} schedule calls for {} learner updates", run.schedule_calls, run.agent.updates));
    }
    if ev.is_empty() || ev.iter().any(|e| e.global_step < 5000) {
        problems.push("update before step 5000 or none at all".into());
    }
    if ev.iter().any(|e| e.learner_updates % 5 != 0) || ev.windows(2).any(|w| w[1].learner_updates != w[0].learner_updates + 5) {
        problems.push("updates not exactly once per 5 learner updates".into());
    }
    // the first eligible multiple of 5 must not be skipped
    if ev.first().is_some_and(|e| e.global_step >= 5005) {
        problems.push(format!("first update only at step {}", ev[0].global_step));
    }
    // replay the holdout losses to find where patience must trigger
    let mut best = f64::INFINITY;
    let mut streak = 0;
    let mut expected_freeze = None;
    for (i, e) in ev.iter().enumerate() {
        if e.holdout_loss < best {
            best = e.holdout_loss;
            streak = 0;
        } else {
            streak += 1;
        }
        if streak >= 10 && expected_freeze.is_none() {
            expected_freeze = Some(i);
        }
        if e.frozen != expected_freeze.is_some() {
            problems.push(format!("frozen flag wrong at update {}", i + 1));
            break;
        }
    }
    if let Some(i) = expected_freeze {
        if ev.len() != i + 1 {
            problems.push("updates continued after freezing".into());
        }
    }
    // a negligible learning rate leaves the holdout loss flat: the first
    // evaluation sets the best, the next 10 fail to improve, then nothing more
    let flat = schedule_run(1e-300);
    let fe = &flat.disc_events;
    let frozen_disc = flat.discriminator.as_ref().unwrap();
    if fe.len() != 11 || !fe[10].frozen || fe[..10].iter().any(|e| e.frozen) || !frozen_disc.frozen || frozen_disc.updates != 11 {
        problems.push(format!("flat holdout run made {} updates", fe.len()));
    }
    let eligible_after = flat.agent.updates.saturating_sub(fe.last().map_or(0, |e| e.learner_updates)) / 5;
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{} updates from step {} at 5-update spacing, patience replay {}; flat run froze after 11 updates and skipped {eligible_after} later slots",
                ev.len(),
                ev[0].global_step,
                expected_freeze.map_or("never triggered".into(), |i| format!("froze at update {}", i + 1))
            )
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9(reference: &ReferenceDataset, dir: &Path) -> Outcome {
    let path = dir.join("reference.gait");
    reference.save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let loaded = ReferenceDataset::load(&path).unwrap();
    let bit_exact = loaded.frames().iter().zip(reference.frames()).all(|(a, b)| a.0.map(f64::to_bits) == b.0.map(f64::to_bits))
        && loaded.len() == reference.len()
        && loaded.metadata() == reference.metadata()
        && loaded.to_bytes().unwrap() == bytes;
    // flip one bit at many positions, truncate, and extend
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut accepted = 0;
    let mut tried = 0;
    for _ in 0..200 {
        let mut b = bytes.clone();
        let i = rng.random_range(0..b.len());
        b[i] ^= 1 << rng.random_range(0..8);
        tried += 1;
        accepted += ReferenceDataset::from_bytes(&b).is_ok() as usize;
    }
    for cut in [0, 1, 8, bytes.len() / 2, bytes.len() - 1] {
        tried += 1;
        accepted += ReferenceDataset::from_bytes(&bytes[..cut]).is_ok() as usize;
    }
    let mut longer = bytes.clone();
    longer.push(0);
    tried += 1;
    accepted += ReferenceDataset::from_bytes(&longer).is_ok() as usize;
    let frames = reference.len();
    check(
        bit_exact && accepted == 0 && frames == 2000 && reference.metadata().frames == 2000,
        format!("round trip bit-exact: {bit_exact}; {accepted}/{tried} corrupted files accepted; recorded {frames} frames"),
    )
}

// --------------------------------------------------------------- criterion 10

const TINY: &str = r#"
[teacher]
checkpoint_interval = 256
[teacher.ppo]
num_actors = 2
rollout_length = 64
minibatch_size = 64
hidden_sizes = [16, 16]
[student]
log_interval = 100
checkpoint_interval = 400
[student.sac]
batch_size = 32
warmup_steps = 100
hidden_sizes = [16, 16]
replay_capacity = 10000
[student.discriminator]
start_step = 200
batch_size = 32
hidden = [8, 8]
"#;

fn romgait(dir: &Path, args: &[String]) {
    let out = Command::new(env!("CARGO_BIN_EXE_romgait")).current_dir(dir).env("ROMGAIT_LOG", "warn").args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn manifest(dir: &Path, stage: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join(stage).join("manifest.json")).unwrap()).unwrap()
}

fn criterion_10(dir: &Path) -> Outcome {
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    let argv = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let stages = [
        ("t", "train-teacher --config tiny.toml --steps 768 --seed 4 --out t"),
        ("r", "record --config tiny.toml --checkpoint t/teacher.ckpt --steps 40 --out r --export-csv"),
        ("s", "train-student --config tiny.toml --reference r/reference.gait --steps 800 --eta 0.5 --seed 2 --out s"),
        ("b", "train-student --config tiny.toml --reference r/reference.gait --steps 800 --eta 1 --seed 2 --out b"),
        ("e", "evaluate --reference r/reference.gait --student s/student.ckpt --baseline b/student.ckpt --episodes 2 --out e"),
    ];
    for (_, cmd) in stages {
        romgait(dir, &argv(cmd));
    }
    let before: Vec<_> = stages.iter().map(|(s, _)| manifest(dir, s)).collect();
    let mut problems = Vec::new();
    let mut files = 0;
    for (m0, (stage, _)) in before.iter().zip(stages) {
        // rerun exactly the recorded command line
        let recorded: Vec<String> = m0["argv"].as_array().unwrap()[1..].iter().map(|a| a.as_str().unwrap().to_string()).collect();
        romgait(dir, &recorded);
        let m1 = manifest(dir, stage);
        files += m1["outputs"].as_array().unwrap().len();
        if m0["outputs"] != m1["outputs"] {
            problems.push(format!("{stage}: outputs differ"));
        }
        if m0["run_id"] != m1["run_id"] {
            problems.push(format!("{stage}: run id differs"));
        }
    }
    let metrics = ["t/metrics.csv", "s/metrics.csv", "s/discriminator.csv", "b/metrics.csv", "e/report.json"];
    let missing: Vec<_> = metrics.iter().filter(|f| !dir.join(f).exists()).collect();
    if !missing.is_empty() {
        problems.push(format!("missing {missing:?}"));
    }
    check(
        problems.is_empty(),
        if problems.is_empty() { format!("5 stages rerun from their manifests, {files} output files byte-identical") } else { problems.join("; ") },
    )
}

// ---------------------------------------------------------------------- main

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {tag} {name} ({secs:.1} s): {detail}");
    result.is_ok()
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let tmp = tempfile::tempdir().unwrap();
    let mut results = Vec::new();

    if on(1) {
        results.push(run(1, "physics fidelity", criterion_1));
    }
    if on(2) {
        results.push(run(2, "gradient correctness", criterion_2));
    }
    if on(3) {
        results.push(run(3, "formula exactness", criterion_3));
    }
    if on(4) {
        results.push(run(4, "reduction arithmetic", criterion_4));
    }
    if on(5) {
        results.push(run(5, "discriminator capability", criterion_5));
    }
    if on(6) || on(7) || on(9) {
        let start = Instant::now();
        let teacher = panic::catch_unwind(train_reference_teacher);
        println!("trained the reference teacher in {:.1} s", start.elapsed().as_secs_f64());
        match teacher {
            Ok(teacher) => {
                if on(6) {
                    results.push(run(6, "teacher learning", || criterion_6(&teacher)));
                }
                let reference = panic::catch_unwind(AssertUnwindSafe(|| record(&teacher, 2000)));
                match reference {
                    Ok(reference) => {
                        if on(7) {
                            results.push(run(7, "imitation beats the baseline", || criterion_7(&reference)));
                        }
                        if on(9) {
                            results.push(run(9, "data integrity", || criterion_9(&reference, tmp.path())));
                        }
                    }
                    Err(_) => {
                        for n in [7, 9].into_iter().filter(|&n| on(n)) {
                            println!("criterion {n:>2} FAIL: the teacher could not record a 2000-frame reference");
                            results.push(false);
                        }
                    }
                }
            }
            Err(_) => {
                for n in [6, 7, 9].into_iter().filter(|&n| on(n)) {
                    println!("criterion {n:>2} FAIL: teacher training failed");
                    results.push(false);
                }
            }
        }
    }
    if on(8) {
        results.push(run(8, "schedule conformance", criterion_8));
    }
    if on(10) {
        let dir = tmp.path().join("pipeline");
        fs::create_dir_all(&dir).unwrap();
        results.push(run(10, "determinism", || criterion_10(&dir)));
    }

    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
