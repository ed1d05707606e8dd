//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criterion 9 is judged from the stored desk-experiment artifacts in
//! `results/desk` (created by `arpo experiment --out results/desk`). The
//! stored arpo checkpoint is re-raced from one start to confirm the stored
//! race rows. With `ARPO_FULL_ACCEPTANCE=1` the experiment is rerun from
//! scratch in a temporary directory instead (about 1.5 h on one core).

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use arpo_core::controllers::StanleyConfig;
use arpo_core::env::{preprocess_lidar, run_race, EnvConfig, Policy, PolicyInput, RaceConfig, RacingEnv, StanleyPolicy};
use arpo_core::geometry::{Segment, Vec2};
use arpo_core::sensors::{raycast, raycast_exhaustive};
use arpo_core::track::{generate_track, Track, TrackGenSpec};
use arpo_core::vehicle::{
    integrate_with_input, lateral_tire_force, normal_loads, Axle, ModelInput, TireParams, VehicleParams, VehicleState,
};
use arpo_harness::experiment::{run_desk, summarize, DeskPaths, DeskSpec};
use arpo_harness::results::{read_rows, RaceRow};
use arpo_harness::load_track;
use arpo_learn::agent::NeuralPolicy;
use arpo_learn::distribution::{
    fuse_mean, tg_log_prob_1d, tg_mean_1d, tg_sample_1d, tg_variance_1d, FusionConfig, FusionMode, TruncatedGaussian,
};
use arpo_learn::network::{Batch, Checkpoint, Network, NetworkConfig, OutputGrad};
use arpo_learn::trainer::{gae, minibatch_loss, read_csv, IterationMetrics, RunFiles, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn track(seed: u64) -> Track {
    generate_track(&TrackGenSpec::with_seed(seed)).expect("generator")
}

fn criterion_1() -> Check {
    let expected = [416, 6208, 12352, 24704, 49280, 65664, 2176, 16512, 512, 32896, 66048, 513, 33024, 514, 33024, 514];
    let net = Network::<f32>::new(NetworkConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
    let counts: Vec<usize> = net.layers().iter().map(|l| l.count()).collect();
    ensure(counts == expected, format!("per-layer counts {counts:?}"))?;
    ensure(net.param_count() == 344_357, format!("total {}", net.param_count()))?;
    Ok(format!("344357 parameters in {} layers", counts.len()))
}

fn criterion_2() -> Check {
    const B: usize = 3;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut net = Network::<f64>::new(NetworkConfig::default(), &mut rng).map_err(|e| e.to_string())?;
        for p in net.params.iter_mut() {
            *p += rng.random_range(-0.05..0.05);
        }
        let input = Batch::new(
            (0..B * 2048).map(|_| rng.random_range(0.0..1.0)).collect(),
            (0..B * 16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .map_err(|e| e.to_string())?;
        let mut w = OutputGrad::zeros(B);
        for v in w.residual_mu.iter_mut().chain(w.log_sigma.iter_mut()).chain(w.value.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
        let objective = |net: &Network<f64>| {
            let out = net.forward(&input).out;
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            dot(&out.residual_mu, &w.residual_mu) + dot(&out.log_sigma, &w.log_sigma) + dot(&out.value, &w.value)
        };
        let fwd = net.forward(&input);
        let mut grad = vec![0.0; net.param_count()];
        net.backward(&fwd, &w, &mut grad).map_err(|e| e.to_string())?;
        for spec in net.layers().to_vec() {
            let mut idx: Vec<usize> = (0..3).map(|_| rng.random_range(spec.weight_range())).collect();
            idx.push(rng.random_range(spec.bias_range()));
            for i in idx {
                let orig = net.params[i];
                let h = 1e-5 * orig.abs().max(1.0);
                net.params[i] = orig + h;
                let up = objective(&net);
                net.params[i] = orig - h;
                let down = objective(&net);
                net.params[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                ensure(err <= 1e-4, format!("seed {seed} {} index {i}: rel err {err:e}", spec.name))?;
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    Ok(format!("10 seeds, {checked} entries, worst rel err {worst:.2e}"))
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + f(b) + inner) * h / 3.0
}

fn criterion_3() -> Check {
    let mut worst_mass = 0.0f64;
    for &(mu, sigma) in &[(0.0, 1.0), (0.7, 0.2), (-1.5, 0.5), (3.0, 0.4), (0.2, 5.0), (-0.9, 0.05)] {
        let mass = simpson(|x| tg_log_prob_1d(mu, sigma, x).exp(), -1.0, 1.0, 20_000);
        ensure((mass - 1.0).abs() <= 1e-6, format!("density mass {mass} at mu {mu} sigma {sigma}"))?;
        worst_mass = worst_mass.max((mass - 1.0).abs());
    }
    let lp = tg_log_prob_1d(0.0, 1.0, 0.0);
    let z = simpson(|x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(), -1.0, 1.0, 20_000);
    let quad = -0.5 * (2.0 * std::f64::consts::PI).ln() - z.ln();
    ensure((lp - -0.53724).abs() <= 1e-4 && (lp - quad).abs() <= 1e-4, format!("log-prob {lp}, quadrature {quad}"))?;
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(mu, sigma) in &[(0.0, 1.0), (0.8, 0.3), (-2.0, 1.0)] {
        let xs: Vec<f64> = (0..n).map(|_| tg_sample_1d(mu, sigma, &mut rng)).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n as f64;
        let (em, ev) = (tg_mean_1d(mu, sigma), tg_variance_1d(mu, sigma));
        let se_m = (ev / n as f64).sqrt();
        let se_v = ((m4 - v * v) / n as f64).sqrt();
        ensure((m - em).abs() <= 3.0 * se_m, format!("mean {m} vs {em} (SE {se_m:e}) at mu {mu}"))?;
        ensure((v - ev).abs() <= 3.0 * se_v, format!("variance {v} vs {ev} (SE {se_v:e}) at mu {mu}"))?;
    }
    Ok(format!("mass err {worst_mass:.1e}, log-prob {lp:.6}, moments within 3 SE"))
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..60);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let end: Vec<bool> = (0..n).map(|i| i == n - 1 || rng.random_bool(0.1)).collect();
        let next: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 0.0 } else { rng.random_range(-1.0..1.0) }).collect();
        let (g, l) = (0.99, 0.95);
        let (adv, _) = gae(&r, &v, &next, &end, g, l);
        for t in 0..n {
            let mut sum = 0.0;
            for k in t..n {
                sum += (g * l).powi((k - t) as i32) * (r[k] + g * next[k] - v[k]);
                if end[k] {
                    break;
                }
            }
            worst = worst.max((adv[t] - sum).abs());
        }
    }
    ensure(worst <= 1e-10, format!("max deviation {worst:e}"))?;
    Ok(format!("100 episodes, max deviation {worst:.1e}"))
}

fn small(mode: FusionMode) -> TrainConfig {
    TrainConfig { total_steps: 20 * 48, n_envs: 3, traj_len: 16, minibatch: 16, epochs: 2, mode, seed: 4, ..Default::default() }
}

fn criterion_5() -> Check {
    let cfg = small(FusionMode::Arpo);
    let t = Arc::new(track(2));
    let mut tr = Trainer::<f64>::new(cfg.clone(), &[t]).map_err(|e| e.to_string())?;
    let mut eps = Vec::new();
    let alpha_k = 0.3;
    let buf = tr.collector.collect(&tr.net, &cfg.fusion(alpha_k), &cfg, 0, &mut eps).map_err(|e| e.to_string())?;
    let idx: Vec<usize> = (0..buf.len()).collect();
    let out = tr.net.forward(&buf.batch::<f64>(&idx)).out;
    let (same, _) = minibatch_loss(&out, &buf, &idx, &cfg.fusion(alpha_k), &cfg, 0.0).map_err(|e| e.to_string())?;
    let dev_same = same.ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    ensure(dev_same <= 1e-12, format!("unchanged alpha: max |rho - 1| {dev_same:e}"))?;
    let alpha_next = 0.55;
    let (stepped, _) = minibatch_loss(&out, &buf, &idx, &cfg.fusion(alpha_next), &cfg, 0.0).map_err(|e| e.to_string())?;
    let n = idx.len();
    let mut worst = 0.0f64;
    for (j, &i) in idx.iter().enumerate() {
        let lp = |alpha: f64| -> f64 {
            (0..2)
                .map(|k| {
                    let mu = (1.0 - alpha) * buf.base_actions[i][k] + alpha.max(cfg.alpha_init) * out.residual_mu[k * n + j];
                    tg_log_prob_1d(mu, out.log_sigma[k * n + j].exp(), buf.actions[i][k])
                })
                .sum()
        };
        let expected = (lp(alpha_next) - lp(alpha_k)).exp();
        worst = worst.max((stepped.ratios[j] - expected).abs() / expected.max(1.0));
    }
    ensure(worst <= 1e-10, format!("stepped alpha: max ratio deviation {worst:e}"))?;
    Ok(format!("{n} samples, |rho - 1| {dev_same:.1e}, stepped deviation {worst:.1e}"))
}

fn criterion_6() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let t = track(seed);
        let (lo, hi) = t.bounding_box();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1000 {
            let p = Vec2::new(rng.random_range(lo.x - 2.0..hi.x + 2.0), rng.random_range(lo.y - 2.0..hi.y + 2.0));
            let a = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let d = (raycast(p, a, &t, 30.0) - raycast_exhaustive(p, a, &t, 30.0)).abs();
            ensure(d <= 1e-9, format!("track {seed}: deviation {d:e}"))?;
            worst = worst.max(d);
        }
    }
    Ok(format!("3 tracks x 1000 rays, max deviation {worst:.1e} m"))
}

/// Steers hard left until its first reset after the start, then follows
/// the centerline with Stanley.
struct CrashOnce {
    stanley: StanleyPolicy,
    resets: u32,
}

impl Policy for CrashOnce {
    fn act(&mut self, input: &PolicyInput<'_>) -> [f64; 2] {
        if self.resets <= 1 {
            [1.0, 0.6]
        } else {
            self.stanley.action(input.vehicle)
        }
    }
    fn reset(&mut self) {
        self.resets += 1;
    }
}

fn nearest_centerline_point(t: &Track, p: Vec2) -> (Vec2, f64) {
    let mut best = (p, f64::INFINITY);
    for i in 0..t.n_segments() {
        let seg = Segment::new(t.centerline[i], t.centerline[i + 1]);
        let (u, _) = seg.closest(p);
        let q = t.centerline[i] + (t.centerline[i + 1] - t.centerline[i]) * u;
        let d = (q - p).norm();
        if d < best.1 {
            best = (q, d);
        }
    }
    best
}

fn criterion_7() -> Check {
    // One lap of progress.
    let t = Arc::new(track(2));
    let cfg = EnvConfig::default().noiseless();
    let mut env = RacingEnv::new(t.clone(), cfg, 0);
    let stanley = StanleyPolicy::new(&t, StanleyConfig::default(), cfg.vehicle);
    env.reset(0, 10);
    let mut total = 0.0;
    let mut steps = 0;
    while total < t.total_length - 0.5 {
        let r = env.step(stanley.action(env.vehicle())).map_err(|e| e.to_string())?;
        ensure(!r.terminated, "Stanley crashed during the lap")?;
        total += r.info.progress_m;
        steps += 1;
        ensure(steps < 20_000, "lap did not close")?;
    }
    let start = t.start_state(0.0);
    let start_s = t.project(Vec2::new(start.x, start.y)).s;
    let s_now = t.project(Vec2::new(env.vehicle().x, env.vehicle().y)).s;
    let lap_err = (total + t.progress_delta(s_now, start_s) - t.total_length).abs();
    ensure(lap_err < 1e-6 * t.total_length, format!("lap progress error {lap_err:e}"))?;

    // Crash penalty inside a race.
    let race = RaceConfig { n_laps: 1, n_starts: 1, ..Default::default() };
    let mut env = RacingEnv::new(t.clone(), cfg, 0);
    let mut policy = CrashOnce { stanley: StanleyPolicy::new(&t, StanleyConfig::default(), cfg.vehicle), resets: 0 };
    let o = run_race(&mut env, &mut policy, 0, &race).map_err(|e| e.to_string())?;
    ensure(o.collisions == 1 && !o.aborted, format!("{} collisions, aborted {}", o.collisions, o.aborted))?;
    let penalty = o.total_race_time - o.driving_time;
    ensure((penalty - 5.0).abs() < 1e-9, format!("penalty {penalty}"))?;

    // Relocation onto the nearest centerline point.
    let mut env = RacingEnv::new(t.clone(), cfg, 0);
    env.reset(3, 10);
    let mut crashed = false;
    for _ in 0..2000 {
        if env.step([-1.0, 0.6]).map_err(|e| e.to_string())?.terminated {
            crashed = true;
            break;
        }
    }
    ensure(crashed, "could not provoke a crash")?;
    let at = Vec2::new(env.vehicle().x, env.vehicle().y);
    env.relocate();
    let (q, _) = nearest_centerline_point(&t, at);
    let moved = Vec2::new(env.vehicle().x, env.vehicle().y);
    let reloc_err = (moved - q).norm();
    ensure(reloc_err < 1e-9 && env.vehicle().v == 0.0, format!("relocation off by {reloc_err:e}"))?;

    // Observation pipeline.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let raw: Vec<f64> = (0..1081).map(|_| rng.random_range(0.0..45.0)).collect();
    let p = preprocess_lidar(&raw, 30.0).map_err(|e| e.to_string())?;
    ensure(p.len() == 512 && p.iter().all(|v| (0.0..=1.0).contains(v)), "preprocessed scan shape or range")?;
    let oracle: Vec<f64> = (0..512).map(|i| 0.5 * ((raw[28 + 2 * i] / 30.0).min(1.0) + (raw[29 + 2 * i] / 30.0).min(1.0))).collect();
    let dev = p.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(dev < 1e-15, format!("preprocessing deviates by {dev:e}"))?;
    ensure(preprocess_lidar(&raw[..1080], 30.0).is_err(), "short scan accepted")?;
    Ok(format!("lap err {lap_err:.1e} m, penalty {penalty:.3} s, relocation err {reloc_err:.1e} m, 1081 -> 512 in [0,1]"))
}

fn criterion_8() -> Check {
    let tires = TireParams::default();
    let params = VehicleParams::default();
    let (fzf, _) = normal_loads(&params, 0.0);
    let peak = tires.mu * tires.d_f * fzf;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let a = rng.random_range(-1.5..1.5);
        for axle in [Axle::Front, Axle::Rear] {
            let (f, g) = (lateral_tire_force(a, fzf, &tires, axle), lateral_tire_force(-a, fzf, &tires, axle));
            ensure(f == -g, format!("not odd at {a}: {f} vs {g}"))?;
            ensure(f.abs() <= peak * (1.0 + 1e-12), format!("|F| {f} above mu D Fz {peak}"))?;
        }
    }
    let max = (0..20_000).map(|i| lateral_tire_force(i as f64 * 1e-4, fzf, &tires, Axle::Front)).fold(0.0, f64::max);
    ensure((max - peak).abs() < 1e-6 * peak, format!("peak {max} vs {peak}"))?;
    let slide = lateral_tire_force(1.5, fzf, &tires, Axle::Front);
    ensure(slide < max && slide > 0.0, "no decay past the peak")?;

    let mut orders = Vec::new();
    for _ in 0..100 {
        let y0 = VehicleState {
            x: rng.random_range(-5.0..5.0),
            y: rng.random_range(-5.0..5.0),
            delta: rng.random_range(-0.2..0.2),
            v: rng.random_range(2.0..6.0),
            psi: rng.random_range(-1.0..1.0),
            psi_dot: rng.random_range(-1.0..1.0),
            beta: rng.random_range(-0.05..0.05),
        };
        let input = ModelInput { sv: rng.random_range(-0.5..0.5), accel: rng.random_range(-2.0..2.0) };
        let run = |n| integrate_with_input(&y0, input, &params, &tires, 0.1, n).map(|s| s.to_array());
        let reference = run(4096).map_err(|e| e.to_string())?;
        let err = |n| -> std::result::Result<f64, String> {
            let y = run(n).map_err(|e| e.to_string())?;
            Ok(y.iter().zip(reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        };
        let (e1, e2) = (err(4)?, err(8)?);
        if e2 > 1e-13 {
            orders.push((e1 / e2).log2());
        }
    }
    orders.sort_by(f64::total_cmp);
    let median = orders[orders.len() / 2];
    ensure((3.5..=4.6).contains(&median), format!("median observed order {median}"))?;

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (v, psi) = (rng.random_range(0.5..7.0), rng.random_range(-3.0..3.0));
        let y0 = VehicleState { v, ..VehicleState::at_pose(1.0, -2.0, psi) };
        let y = integrate_with_input(&y0, ModelInput { sv: 0.0, accel: 0.0 }, &params, &tires, 0.5, 20).map_err(|e| e.to_string())?;
        let d = ((y.x - 1.0 - v * 0.5 * psi.cos()).abs()).max((y.y + 2.0 - v * 0.5 * psi.sin()).abs());
        worst = worst.max(d);
    }
    ensure(worst <= 1e-9, format!("coasting displacement error {worst:e}"))?;
    Ok(format!("odd and saturating tire force, RK4 median order {median:.2}, coasting err {worst:.1e} m"))
}

fn criterion_10() -> Check {
    let tracks = [Arc::new(track(2))];
    let mut drl = Trainer::<f64>::new(small(FusionMode::Drl), &tracks).map_err(|e| e.to_string())?;
    let mut arpo = Trainer::<f64>::new(TrainConfig { fixed_alpha: Some(1.0), ..small(FusionMode::Arpo) }, &tracks)
        .map_err(|e| e.to_string())?;
    for k in 0..2 {
        let (a, _) = drl.iterate().map_err(|e| e.to_string())?;
        let (b, _) = arpo.iterate().map_err(|e| e.to_string())?;
        ensure(a == b, format!("metrics differ at iteration {k}"))?;
    }
    ensure(drl.net.params == arpo.net.params, "parameters differ")?;
    let cfg = TrainConfig { omega: 1.0, ..small(FusionMode::Rpl) };
    let fusion = cfg.fusion(cfg.alphas(5).1);
    ensure(fusion == FusionConfig::rpl(1.0), "rpl fusion")?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let b = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let r = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let d = TruncatedGaussian::new(fuse_mean(b, r, &fusion), [0.3, 0.3]);
        ensure(d.mode() == [(b[0] + r[0]).clamp(-1.0, 1.0), (b[1] + r[1]).clamp(-1.0, 1.0)], "rpl mode is not clamp(base + residual)")?;
    }
    Ok("arpo at alpha 1 equals drl for 2 updates; rpl mode = clamp(base + residual)".into())
}

fn check_schedule(metrics: &[IterationMetrics], total: u64, batch: u64) -> Check {
    ensure(!metrics.is_empty(), "empty metrics log")?;
    ensure(metrics[0].iteration == 0 && metrics[0].alpha == 0.0, format!("alpha at iteration 0 is {}", metrics[0].alpha))?;
    for w in metrics.windows(2) {
        ensure(w[1].alpha >= w[0].alpha, format!("alpha decreases at iteration {}", w[1].iteration))?;
    }
    let mut first_one = None;
    for m in metrics {
        let before = m.step - batch;
        let past = before as f64 >= 0.25 * total as f64;
        ensure((m.alpha == 1.0) == past, format!("iteration {}: alpha {} with {before} prior steps", m.iteration, m.alpha))?;
        if past && first_one.is_none() {
            first_one = Some(m.iteration);
        }
    }
    Ok(format!("alpha 0 at iteration 0, first 1.0 at iteration {}", first_one.map_or("-".into(), |k| k.to_string())))
}

fn criterion_11(desk: &Path) -> Check {
    let cfg = TrainConfig { total_steps: 30 * 48, ..small(FusionMode::Arpo) };
    let mut tr = Trainer::<f32>::new(cfg.clone(), &[Arc::new(track(2))]).map_err(|e| e.to_string())?;
    while !tr.done() {
        tr.iterate().map_err(|e| e.to_string())?;
    }
    let short = check_schedule(&tr.metrics, cfg.total_steps, cfg.batch_size() as u64)?;
    let Ok(spec) = load_spec(desk) else {
        return Ok(format!("short run: {short}; no desk experiment in {}", desk.display()));
    };
    let desk_cfg = spec.train_config(FusionMode::Arpo, spec.seeds[0]);
    let log = RunFiles { dir: DeskPaths { dir: desk.to_path_buf() }.run("arpo", spec.seeds[0], &spec) }.metrics();
    let m: Vec<IterationMetrics> = read_csv(&log).map_err(|e| e.to_string())?;
    let d = check_schedule(&m, desk_cfg.total_steps, desk_cfg.batch_size() as u64)?;
    Ok(format!("short run: {short}; desk log: {d}"))
}

fn load_spec(dir: &Path) -> std::result::Result<DeskSpec, String> {
    let path = DeskPaths { dir: dir.to_path_buf() }.spec();
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn judge_desk(dir: &Path, spec: &DeskSpec) -> Check {
    let s = summarize(dir, spec).map_err(|e| e.to_string())?;
    let detail = format!(
        "crashes arpo {} vs drl {}; race time arpo {:.2} s, stanley {:.2} s, ftg {:.2} s, drl {:.2} s; early progress arpo {:.2} vs drl {:.2}",
        s.arpo_crashes,
        s.drl_crashes,
        s.race_time_arpo,
        s.race_time_stanley,
        s.race_time_ftg,
        s.race_time_drl,
        s.early_progress_arpo,
        s.early_progress_drl
    );
    let verdict = format!("(a) {} (b) {} (c) {}", s.crashes_ok, s.race_ok, s.early_ok);
    if s.crashes_ok && s.race_ok && s.early_ok {
        Ok(format!("{verdict}; {detail}"))
    } else {
        Err(format!("{verdict}; {detail}"))
    }
}

fn criterion_9(desk: &Path) -> Check {
    if std::env::var("ARPO_FULL_ACCEPTANCE").is_ok_and(|v| v == "1") {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let spec = DeskSpec::default();
        run_desk(tmp.path(), &spec, |l| eprintln!("{l}")).map_err(|e| e.to_string())?;
        return judge_desk(tmp.path(), &spec).map(|s| format!("full rerun: {s}"));
    }
    let paths = DeskPaths { dir: desk.to_path_buf() };
    ensure(paths.races().exists(), format!("no desk artifacts in {}; run `arpo experiment --out results/desk`", desk.display()))?;
    let spec = load_spec(desk)?;
    let rows: Vec<RaceRow> = read_rows(&paths.races()).map_err(|e| e.to_string())?;
    let seed = spec.seeds[0];
    let test = Arc::new(load_track(&paths.test_track(spec.test_tracks[0])).map_err(|e| e.to_string())?);
    let stored = rows
        .iter()
        .find(|r| r.method == "arpo" && r.start_index == 0 && r.seed == seed && r.track == test.name)
        .ok_or("no stored arpo race from start 0")?;
    let ck = Checkpoint::<f32>::load(&RunFiles { dir: paths.run("arpo", seed, &spec) }.checkpoint()).map_err(|e| e.to_string())?;
    let mut policy = NeuralPolicy::standalone(ck.network);
    let mut env = RacingEnv::new(test, spec.train.env, seed);
    let race: RaceConfig = spec.race.into();
    let o = run_race(&mut env, &mut policy, 0, &race).map_err(|e| e.to_string())?;
    ensure(
        o.total_race_time == stored.total_race_time_s,
        format!("re-raced checkpoint gives {} s, stored {} s", o.total_race_time, stored.total_race_time_s),
    )?;
    judge_desk(desk, &spec).map(|s| format!("{s}; re-race of start 0 matches ({:.2} s)", o.total_race_time))
}

fn main() {
    let desk: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../results/desk");
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Check>)> = vec![
        (1, "network parameter counts", Box::new(criterion_1)),
        (2, "gradient vs finite differences", Box::new(criterion_2)),
        (3, "truncated Gaussian", Box::new(criterion_3)),
        (4, "GAE vs double loop", Box::new(criterion_4)),
        (5, "synchronization trick", Box::new(criterion_5)),
        (6, "raycast vs exhaustive", Box::new(criterion_6)),
        (7, "geometry and race protocol", Box::new(criterion_7)),
        (8, "vehicle dynamics", Box::new(criterion_8)),
        (9, "desk-scale learning", Box::new(|| criterion_9(&desk))),
        (10, "mode reductions", Box::new(criterion_10)),
        (11, "alpha schedule", Box::new(|| criterion_11(&desk))),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in &criteria {
        if !filter.is_empty() && !filter.contains(n) {
            continue;
        }
        let start = Instant::now();
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(msg) => println!("criterion {n:>2} PASS  {name} ({secs:.1} s): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1} s): {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
