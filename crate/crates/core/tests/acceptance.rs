//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! The expensive ones (training and rollouts) hold a shared lock so their
//! wall-clock budgets are measured without competing for the CPU.

use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::autodiff::{Graph, Tensor};
use teleop_core::config::RunConfig;
use teleop_core::demos::{
    demo_seeds, generate_dataset, load_dataset, record_expert, GenConfig, Trajectory,
};
use teleop_core::geometry::{
    corner_distance, corners, positional_tokens, BoxExtents, Pose, Quat, TokenScale,
};
use teleop_core::model::{
    AttentionMode, ModelConfig, ModelOutput, TrajectoryModel, Window, ACTION_GRIPPER_COL,
    STATE_GRIPPER_COL,
};
use teleop_core::rollout::{
    benchmark, eval_seeds, run_episode, BenchmarkSpec, EvalMode, RolloutConfig,
};
use teleop_core::sim::TaskId;
use teleop_core::training::{
    batch_loss, gripper_bce_loss, sample_batch, slice_at, train_loop, Batch, BatchTargets,
    LossWeights, TrainConfig, TrainOutputs,
};

fn report(name: &str, ok: bool, detail: impl AsRef<str>) {
    println!(
        "{} {name}: {}",
        if ok { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    assert!(ok, "{name}: {}", detail.as_ref());
}

fn heavy() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let q = Quat([
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ]);
    Pose::new(
        [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ],
        q.normalized(),
    )
    .unwrap()
}

fn a_stack_demos(n: usize) -> (GenConfig, Vec<u64>, Vec<Trajectory>) {
    let gen = GenConfig::default();
    let spec = gen.tasks.get(TaskId::AStack).unwrap().clone();
    let seeds = demo_seeds(TaskId::AStack, 0, n);
    let demos = seeds
        .iter()
        .map(|s| record_expert(&spec, *s, &gen).unwrap())
        .collect();
    (gen, seeds, demos)
}

// ---------------------------------------------------------------- gradients

#[test]
fn gradient_oracle() {
    let t0 = Instant::now();
    let mc = ModelConfig {
        layers: 2,
        heads: 4,
        d_model: 64,
        d_emb: 32,
        seq_len: 40,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = TrajectoryModel::new(mc.clone(), 5).unwrap();
    let (_, _, demos) = a_stack_demos(2);
    let tc = TrainConfig {
        batch_size: 2,
        t_p_max: 20,
        min_future: 10,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = sample_batch(&demos, &model, &tc, &mut rng).unwrap();
    let loss_of = |m: &TrajectoryModel| -> f64 {
        let mut g = Graph::new();
        let out = m.forward(&mut g, &batch.windows, None).unwrap();
        let lv = batch_loss(
            &mut g,
            &out,
            &batch.targets(),
            mc.j_max,
            &tc.extents(),
            &tc.loss,
        )
        .unwrap();
        g.value(lv.total).item()
    };
    let analytic = {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.windows, None).unwrap();
        let lv = batch_loss(
            &mut g,
            &out,
            &batch.targets(),
            mc.j_max,
            &tc.extents(),
            &tc.loss,
        )
        .unwrap();
        let grads = g.backward(lv.total).unwrap();
        let mut acc = model.params().zero_grads();
        grads.accumulate_params(&g, &mut acc);
        acc
    };

    // Coordinates: pick a tensor, then an entry; position-table entries come
    // from rows the batch actually looks up.
    let used_rows: Vec<usize> = batch
        .windows
        .iter()
        .flat_map(|w| w.tokens()[..w.t_p()].to_vec())
        .collect();
    let ids: Vec<_> = model.params().ids().collect();
    let mut worst: f64 = 0.0;
    let mut worst_at = (0.0, 0.0);
    // Central differences; 1e-5 sits between truncation error (visible at
    // 1e-4 on the largest gradients) and roundoff (visible at 1e-6).
    let h = 1e-5;
    for _ in 0..200 {
        let id = ids[rng.random_range(0..ids.len())];
        let t = model.params().get(id);
        let idx = if model.params().name(id) == "embed.position" {
            let row = used_rows[rng.random_range(0..used_rows.len())];
            row * t.cols() + rng.random_range(0..t.cols())
        } else {
            rng.random_range(0..t.len())
        };
        let mut plus = model.clone();
        plus.params_mut().get_mut(id).data_mut()[idx] += h;
        let mut minus = model.clone();
        minus.params_mut().get_mut(id).data_mut()[idx] -= h;
        let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        let a = analytic[id.index()][idx];
        // Differences below the finite-difference noise floor count as agreement.
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        if err > worst {
            worst = err;
            worst_at = (a, numeric);
        }
    }
    let dt = t0.elapsed();
    report(
        "gradient oracle",
        worst < 1e-4 && dt < Duration::from_secs(60),
        format!(
            "worst relative error {worst:.2e} (analytic {:.6e}, numeric {:.6e}) over 200 coordinates in {:.1} s",
            worst_at.0,
            worst_at.1,
            dt.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- geometry

fn brute_rotation(q: &Quat) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q.0;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

fn brute_corners(p: &Pose, h: [f64; 3]) -> Vec<[f64; 3]> {
    let r = brute_rotation(&p.q);
    let mut out = vec![];
    for sz in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sx in [-1.0, 1.0] {
                let l = [sx * h[0], sy * h[1], sz * h[2]];
                let mut c = p.p;
                for (i, ci) in c.iter_mut().enumerate() {
                    *ci += r[i][0] * l[0] + r[i][1] * l[1] + r[i][2] * l[2];
                }
                out.push(c);
            }
        }
    }
    out
}

fn brute_distance(a: &Pose, b: &Pose, h: [f64; 3]) -> f64 {
    brute_corners(a, h)
        .iter()
        .zip(brute_corners(b, h))
        .map(|(x, y)| {
            ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt()
        })
        .sum()
}

#[test]
fn geometry_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let scale = TokenScale::default();
    let (mut corner_err, mut dist_err, mut token_mismatch): (f64, f64, usize) = (0.0, 0.0, 0);
    for _ in 0..1000 {
        let h = [
            rng.random_range(0.01..0.2),
            rng.random_range(0.01..0.2),
            rng.random_range(0.01..0.2),
        ];
        let e = BoxExtents::new(h).unwrap();
        let a = random_pose(&mut rng);
        let b = random_pose(&mut rng);
        for (c, bc) in corners(&a, &e).iter().zip(brute_corners(&a, h)) {
            for i in 0..3 {
                corner_err = corner_err.max((c[i] - bc[i]).abs());
            }
        }
        dist_err = dist_err.max((corner_distance(&a, &b, &e) - brute_distance(&a, &b, h)).abs());

        // A random walk long enough to cross many bins.
        let n = rng.random_range(1..40);
        let mut path = vec![a];
        for _ in 1..n {
            let last = *path.last().unwrap();
            let step = Pose::new(
                [
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                ],
                Quat::from_axis_angle([0.0, 0.0, 1.0], rng.random_range(-0.2..0.2)),
            )
            .unwrap();
            path.push(last.compose(&step));
        }
        let tokens = positional_tokens(&path, &e, &scale).unwrap();
        let mut cum = 0.0;
        for t in 0..path.len() {
            if t > 0 {
                cum += brute_distance(&path[t], &path[t - 1], h);
            }
            let expect = ((cum / 0.01).floor() as usize).min(4095);
            token_mismatch += (tokens[t] != expect) as usize;
        }
    }
    report(
        "geometry oracles",
        corner_err <= 1e-10 && dist_err <= 1e-10 && token_mismatch == 0,
        format!("1000 cases: corner err {corner_err:.1e}, distance err {dist_err:.1e}, token mismatches {token_mismatch}"),
    );
}

// ---------------------------------------------------------------- causality

fn random_window(mc: &ModelConfig, t_p: usize, rng: &mut ChaCha8Rng) -> Window {
    let sd = mc.state_dim();
    let states: Vec<Vec<f64>> = (0..t_p)
        .map(|_| (0..sd).map(|_| rng.random_range(-0.3..0.3)).collect())
        .collect();
    let actions: Vec<Vec<f64>> = (0..t_p)
        .map(|_| (0..8).map(|_| rng.random_range(-0.3..0.3)).collect())
        .collect();
    let mut tokens: Vec<usize> = (0..t_p).map(|_| rng.random_range(0..50)).collect();
    tokens.sort();
    Window::from_rows(mc.seq_len, t_p, &states, &actions, &tokens).unwrap()
}

#[test]
fn causality_and_masking() {
    let mc = ModelConfig {
        layers: 2,
        heads: 4,
        d_model: 32,
        d_emb: 16,
        seq_len: 24,
        dropout: 0.0,
        attention_mode: AttentionMode::Causal,
        ..ModelConfig::default()
    };
    let model = TrajectoryModel::new(mc.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let base = random_window(&mc, mc.seq_len, &mut rng);
        let t = rng.random_range(0..mc.seq_len - 1);
        let mut w = base.clone();
        let r = rng.random_range(t + 1..mc.seq_len);
        let c = rng.random_range(0..mc.state_dim());
        w.state_row_mut(r)[c] += rng.random_range(-1.0..1.0);
        let ca = rng.random_range(0..8);
        w.action_row_mut(r)[ca] += rng.random_range(-1.0..1.0);
        if rng.random_bool(0.5) {
            w.tokens_mut()[r] = (w.tokens()[r] + 3).min(4095);
        }
        let p0 = model.predict(&base).unwrap();
        let p1 = model.predict(&w).unwrap();
        for row in 0..=t {
            for (x, y) in p0
                .raw_states
                .row(row)
                .iter()
                .chain(p0.raw_actions.row(row))
                .zip(p1.raw_states.row(row).iter().chain(p1.raw_actions.row(row)))
            {
                worst = worst.max((x - y).abs());
            }
        }
    }

    // Loss ignores predictions at visible rows.
    let (_, _, demos) = a_stack_demos(1);
    let tc = TrainConfig::default();
    let slice = slice_at(
        &demos[0],
        0,
        mc.seq_len,
        &tc.extents(),
        &tc.token_scale(mc.vocab_max),
    )
    .unwrap();
    let t_p = 10;
    let batch = Batch {
        windows: vec![slice.window(t_p).unwrap()],
        slices: vec![slice],
    };
    let loss_with = |perturb: bool| -> f64 {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.windows, None).unwrap();
        let out = if perturb {
            let mut s = g.value(out.states).clone();
            let mut a = g.value(out.actions).clone();
            let (sc, ac) = (s.cols(), a.cols());
            for r in 0..t_p {
                s.data_mut()[r * sc..(r + 1) * sc]
                    .iter_mut()
                    .for_each(|v| *v += 7.0);
                a.data_mut()[r * ac..(r + 1) * ac]
                    .iter_mut()
                    .for_each(|v| *v -= 3.0);
            }
            ModelOutput {
                states: g.constant(s),
                actions: g.constant(a),
            }
        } else {
            out
        };
        let lv = batch_loss(
            &mut g,
            &out,
            &batch.targets(),
            mc.j_max,
            &tc.extents(),
            &tc.loss,
        )
        .unwrap();
        g.value(lv.total).item()
    };
    let (l0, l1) = (loss_with(false), loss_with(true));
    report(
        "causality and masking",
        worst <= 1e-12 && l0 == l1,
        format!("50 pairs: max change before t {worst:.1e}; loss with perturbed visible predictions {l1} vs {l0}"),
    );
}

// ---------------------------------------------------------------- loss calibration

#[test]
fn loss_calibration() {
    let (_, _, demos) = a_stack_demos(1);
    let tc = TrainConfig::default();
    let seq = 40;
    let t_p = 12;
    let j_max = demos[0].j_max;
    let slice = slice_at(&demos[0], 0, seq, &tc.extents(), &TokenScale::default()).unwrap();
    assert!(slice.valid.iter().all(|v| *v));
    let sd = slice.states[0].len();
    let saturate = |y: f64| if y >= 0.5 { 40.0 } else { -40.0 };
    let run = |offset: f64| {
        let w = slice.window(t_p).unwrap();
        let mut states: Vec<f64> = slice.states.iter().flatten().copied().collect();
        let mut actions: Vec<f64> = slice.actions.iter().flatten().copied().collect();
        for r in 0..seq {
            states[r * sd + STATE_GRIPPER_COL] = saturate(states[r * sd + STATE_GRIPPER_COL]);
            actions[r * 8 + ACTION_GRIPPER_COL] = saturate(actions[r * 8 + ACTION_GRIPPER_COL]);
            states[r * sd] += offset;
            actions[r * 8] += offset;
        }
        let mut g = Graph::new();
        let out = ModelOutput {
            states: g.constant(Tensor::new(vec![seq, sd], states).unwrap()),
            actions: g.constant(Tensor::new(vec![seq, 8], actions).unwrap()),
        };
        let targets = BatchTargets {
            slices: std::slice::from_ref(&slice),
            windows: std::slice::from_ref(&w),
        };
        batch_loss(
            &mut g,
            &out,
            &targets,
            j_max,
            &tc.extents(),
            &LossWeights::default(),
        )
        .unwrap()
        .values(&g)
    };
    let exact = run(0.0);
    // The state gripper is an opening fraction; rows caught mid-stroke have no
    // saturated-logit match, so the state term is checked on 0/1 rows.
    let (logits, ys): (Vec<f64>, Vec<f64>) = (t_p..seq)
        .map(|r| slice.states[r][STATE_GRIPPER_COL])
        .filter(|y| *y == 0.0 || *y == 1.0)
        .map(|y| (saturate(y), y))
        .unzip();
    let binary_rows = ys.len();
    let s_g = gripper_bce_loss(&logits, &ys, 0..binary_rows).unwrap();
    let k = seq - t_p;
    let shifted = run(0.1);
    let target = 0.8 * k as f64;
    let ok = exact.s_r == 0.0
        && exact.a_r == 0.0
        && exact.s_obj == 0.0
        && s_g < 1e-6
        && exact.a_g < 1e-6
        && (shifted.s_r - target).abs() < 1e-9
        && (shifted.a_r - target).abs() < 1e-9;
    report(
        "loss calibration",
        ok,
        format!(
            "truth: corner {:.1e}/{:.1e}/{:.1e}, action bce {:.1e}, state bce {s_g:.1e} on {binary_rows}/{k} 0-1 rows; \
             0.1 m offset over {k} steps: {:.12}/{:.12} (expect {target})",
            exact.s_r, exact.a_r, exact.s_obj, exact.a_g, shifted.s_r, shifted.a_r
        ),
    );
}

// ---------------------------------------------------------------- ablation

#[test]
fn object_loss_ablation_hook() {
    let (_, _, demos) = a_stack_demos(3);
    let mut cfg = RunConfig::toy();
    cfg.model.seq_len = 40;
    cfg.train.t_p_max = 20;
    cfg.train.min_future = 10;
    cfg.train.steps = 2;
    let run = |on: bool| {
        let mut tc = cfg.train.clone();
        tc.loss.object_loss_enabled = on;
        let mut m = TrajectoryModel::new(cfg.model.clone(), tc.seed).unwrap();
        train_loop(&demos, &mut m, &tc, &TrainOutputs::default())
            .unwrap()
            .all
    };
    let (on, off) = (run(true), run(false));
    let (a, b) = (on[0].parts, off[0].parts);
    let same = a.s_r.to_bits() == b.s_r.to_bits()
        && a.a_r.to_bits() == b.a_r.to_bits()
        && a.s_g.to_bits() == b.s_g.to_bits()
        && a.a_g.to_bits() == b.a_g.to_bits()
        && a.s_obj.to_bits() == b.s_obj.to_bits();
    let totals = (a.total - (b.total + a.s_obj)).abs() < 1e-9 * a.total.abs().max(1.0);
    // The flag has to matter once the update differs.
    let diverges = on[1].parts.s_r != off[1].parts.s_r;
    report(
        "object-loss ablation hook",
        same && totals && diverges,
        format!(
            "step 0 s_r/a_r/s_g/a_g bit-identical: {same}; total on {:.6} = off {:.6} + s_obj {:.6}; step 1 differs: {diverges}",
            a.total, b.total, a.s_obj
        ),
    );
}

// ---------------------------------------------------------------- determinism

fn pipeline(dir: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let gen = GenConfig::default();
    let data_dir = dir.join("data");
    generate_dataset(&data_dir, &[(TaskId::BPeg, 3)], 11, &gen).unwrap();
    let data = load_dataset(&data_dir).unwrap();
    let mut cfg = RunConfig::toy();
    cfg.model.seq_len = 40;
    cfg.model.d_model = 32;
    cfg.model.d_emb = 16;
    cfg.train.t_p_max = 20;
    cfg.train.min_future = 10;
    cfg.train.steps = 30;
    cfg.train.batch_size = 4;
    cfg.rollout.t_p_eval = 24;
    cfg.rollout.t_f = 12;
    cfg.rollout.t_e = 6;
    cfg.validate().unwrap();
    let ckpt = dir.join("m.ckpt");
    let mut m = TrajectoryModel::new(cfg.model.clone(), 3).unwrap();
    train_loop(
        &data.trajectories,
        &mut m,
        &cfg.train,
        &TrainOutputs {
            checkpoint: Some(&ckpt),
            curve: None,
            meta: cfg.to_value(),
        },
    )
    .unwrap();
    let (m, _) = TrajectoryModel::load(&ckpt).unwrap();
    let spec = BenchmarkSpec {
        tasks: vec![TaskId::BPeg],
        modes: EvalMode::ALL.to_vec(),
        episodes: 3,
        seed: 5,
    };
    let r = benchmark(
        &Arc::new(m),
        &spec,
        &data.manifest.config,
        &cfg.rollout,
        serde_json::json!({}),
    )
    .unwrap();
    (
        std::fs::read(&ckpt).unwrap(),
        r.csv().into_bytes(),
        r.json().into_bytes(),
    )
}

#[test]
fn determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (pipeline(a.path()), pipeline(b.path()));
    report(
        "determinism",
        ra == rb,
        format!(
            "checkpoint identical: {}, CSV identical: {}, JSON identical: {}",
            ra.0 == rb.0,
            ra.1 == rb.1,
            ra.2 == rb.2
        ),
    );
}

// ---------------------------------------------------------------- closed loop

struct Overfit {
    model: Arc<TrajectoryModel>,
    train_time: Duration,
}

/// Toy-profile model trained from scratch on 20 A_stack demos; shared by the
/// closed-loop checks so it is trained once per run.
fn overfit_model() -> &'static Overfit {
    static MODEL: OnceLock<Overfit> = OnceLock::new();
    MODEL.get_or_init(|| {
        let t0 = Instant::now();
        let (_, _, demos) = a_stack_demos(20);
        let cfg = RunConfig::toy();
        let mut m = TrajectoryModel::new(cfg.model.clone(), cfg.train.seed).unwrap();
        train_loop(&demos, &mut m, &cfg.train, &TrainOutputs::default()).unwrap();
        Overfit {
            model: Arc::new(m),
            train_time: t0.elapsed(),
        }
    })
}

fn success_rate(
    model: &Arc<TrajectoryModel>,
    task: TaskId,
    seeds: &[u64],
    gen: &GenConfig,
    rc: &RolloutConfig,
) -> usize {
    let spec = gen.tasks.get(task).unwrap();
    seeds
        .iter()
        .filter(|s| {
            run_episode(model, spec, **s, EvalMode::Auto, gen, rc)
                .unwrap()
                .success
        })
        .count()
}

#[test]
fn overfit_and_execute() {
    let _g = heavy();
    let o = overfit_model();
    let t0 = Instant::now();
    let (gen, train_seeds, _) = a_stack_demos(20);
    let rc = RunConfig::toy().rollout;
    let held = eval_seeds(TaskId::AStack, 0, 20);
    let on_train = success_rate(&o.model, TaskId::AStack, &train_seeds, &gen, &rc);
    let on_held = success_rate(&o.model, TaskId::AStack, &held, &gen, &rc);
    let total = o.train_time + t0.elapsed();
    report(
        "overfit and execute",
        on_train >= 16 && on_held >= 10 && total < Duration::from_secs(15 * 60),
        format!(
            "training scenes {on_train}/20, held-out scenes {on_held}/20, {:.0} s (training {:.0} s)",
            total.as_secs_f64(),
            o.train_time.as_secs_f64()
        ),
    );
}

#[test]
fn intervention_monotonicity() {
    let _g = heavy();
    let o = overfit_model();
    let gen = GenConfig::default();
    let spec = gen.tasks.get(TaskId::AStack).unwrap();
    let rc = RunConfig::toy().rollout;
    let seeds = eval_seeds(TaskId::AStack, 7, 40);
    let (mut auto_ok, mut assist_ok) = (0, 0);
    let (mut assist_manual, mut manual_total, mut auto_failed) = (0, 0, 0);
    for s in &seeds {
        let auto = run_episode(&o.model, spec, *s, EvalMode::Auto, &gen, &rc).unwrap();
        let assist = run_episode(&o.model, spec, *s, EvalMode::Assistive, &gen, &rc).unwrap();
        auto_ok += auto.success as usize;
        assist_ok += assist.success as usize;
        if !auto.success {
            let manual = run_episode(&o.model, spec, *s, EvalMode::Manual, &gen, &rc).unwrap();
            auto_failed += 1;
            assist_manual += assist.manual_steps;
            manual_total += manual.steps;
        }
    }
    let ok = assist_ok >= auto_ok && 3 * assist_manual <= manual_total;
    report(
        "intervention monotonicity",
        ok,
        format!(
            "40 episodes: auto {auto_ok}, assistive {assist_ok}; on the {auto_failed} auto failures assistive used \
             {assist_manual} manual steps vs {manual_total} for manual control"
        ),
    );
}

#[test]
fn pretrain_benefit() {
    let _g = heavy();
    let t0 = Instant::now();
    let gen = GenConfig::default();
    let demos_for = |task: TaskId, n: usize| -> Vec<Trajectory> {
        let spec = gen.tasks.get(task).unwrap();
        demo_seeds(task, 100, n)
            .iter()
            .map(|s| record_expert(spec, *s, &gen).unwrap())
            .collect()
    };
    let cfg = RunConfig::toy();
    let pretrain_data: Vec<Trajectory> = [TaskId::AStack, TaskId::BPeg, TaskId::EBowlInDrawer]
        .iter()
        .flat_map(|t| demos_for(*t, 10))
        .collect();
    let mut pre = TrajectoryModel::new(cfg.model.clone(), 1).unwrap();
    let pre_cfg = TrainConfig {
        steps: PRETRAIN_STEPS,
        seed: 1,
        ..cfg.train.clone()
    };
    train_loop(&pretrain_data, &mut pre, &pre_cfg, &TrainOutputs::default()).unwrap();

    let drawer = demos_for(TaskId::DDrawer, 10);
    let held = eval_seeds(TaskId::DDrawer, 0, 20);
    let mut rows = vec![];
    let mut ok = true;
    for seed in [11u64, 12, 13] {
        let ft = TrainConfig {
            steps: FINETUNE_STEPS,
            seed,
            ..cfg.train.clone()
        };
        let mut from_pre = pre.clone();
        train_loop(&drawer, &mut from_pre, &ft, &TrainOutputs::default()).unwrap();
        let mut scratch = TrajectoryModel::new(cfg.model.clone(), seed).unwrap();
        train_loop(&drawer, &mut scratch, &ft, &TrainOutputs::default()).unwrap();
        let a = success_rate(
            &Arc::new(from_pre),
            TaskId::DDrawer,
            &held,
            &gen,
            &cfg.rollout,
        );
        let b = success_rate(
            &Arc::new(scratch),
            TaskId::DDrawer,
            &held,
            &gen,
            &cfg.rollout,
        );
        ok &= a >= b;
        rows.push(format!("seed {seed}: pretrained {a}/20 vs scratch {b}/20"));
    }
    report(
        "pretrain benefit",
        ok,
        format!(
            "{} ({PRETRAIN_STEPS} pretrain + {FINETUNE_STEPS} finetune steps, {:.0} s)",
            rows.join("; "),
            t0.elapsed().as_secs_f64()
        ),
    );
}

const PRETRAIN_STEPS: usize = 1000;
const FINETUNE_STEPS: usize = 500;
