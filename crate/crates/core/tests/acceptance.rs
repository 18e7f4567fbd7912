//! Acceptance suite: prints one PASS/FAIL line per criterion, then asserts all of them.

#![allow(clippy::field_reassign_with_default)]

use std::io::Write;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mlct_core::clustering::ClusterDictionary;
use mlct_core::codec::{quantize, Codec, CodecConfig, LatentMode};
use mlct_core::config::RunConfig;
use mlct_core::netcore::backbone::{
    consistency_apply, consistency_forward, init_params, BackboneConfig, ConditionEmbedding,
};
use mlct_core::netcore::{ModelParams, Tape, Var};
use mlct_core::pipeline::{self, Metrics, Prepared, Reference, Requests};
use mlct_core::rng::sub_seed;
use mlct_core::sampler::{ConsistencyModel, SampleOptions};
use mlct_core::schedule::{dpmpp_step, NoiseSchedule, TimeGrid};
use mlct_core::Result;

fn report(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

impl Outcome {
    fn line(&self) -> String {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        format!("criterion {} ({}): {verdict}  {}", self.id, self.name, self.detail)
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
}

// ---------------------------------------------------------------- 1

fn schedule_suite() -> Outcome {
    let start = Instant::now();
    let mut worst_unit = 0.0f64;
    let mut worst_g2 = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for sched in [NoiseSchedule::standard(), NoiseSchedule::low_rate()] {
        for k in 0..=10_000 {
            let t = if k == 0 { rng.gen_range(1e-6..1.0) } else { k as f64 / 10_000.0 };
            let (a, s) = sched.alpha_sigma(t).unwrap();
            worst_unit = worst_unit.max((a * a + s * s - 1.0).abs());
            let (_, g2) = sched.drift_diffusion(t).unwrap();
            worst_g2 = worst_g2.max((g2 - sched.beta(t)).abs());
        }
    }
    let grid = TimeGrid::karras(0.002, 1.0, 50, 7.0).unwrap();
    let ts = grid.times();
    let endpoints = ts[0] == 0.002 && ts[ts.len() - 1] == 1.0 && ts.len() == 50;
    let monotone = ts.windows(2).all(|w| w[0] < w[1]);
    let elapsed = start.elapsed();
    Outcome {
        id: 1,
        name: "schedule suite",
        pass: worst_unit <= 1e-12 && worst_g2 <= 1e-8 && endpoints && monotone && elapsed < Duration::from_secs(1),
        detail: format!(
            "max|a^2+s^2-1| = {worst_unit:.1e}, max|g^2-beta| = {worst_g2:.1e}, endpoints {endpoints}, monotone {monotone}, {:.3}s",
            elapsed.as_secs_f64()
        ),
    }
}

// ---------------------------------------------------------------- 2

fn solver_exactness() -> Outcome {
    let start = Instant::now();
    let sched = NoiseSchedule::standard();
    let grid = TimeGrid::karras(0.002, 1.0, 50, 7.0).unwrap();
    let ts = grid.times();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut chained = 0.0f64;
    for _ in 0..20 {
        let x_star: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x_t: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (a_big, s_big) = sched.alpha_sigma(ts[ts.len() - 1]).unwrap();
        let closed = |t: f64| -> Vec<f64> {
            let (a, s) = sched.alpha_sigma(t).unwrap();
            x_star
                .iter()
                .zip(&x_t)
                .map(|(xs, x0)| a * xs + s / s_big * (x0 - a_big * xs))
                .collect()
        };
        let mut state = x_t.clone();
        for i in (1..ts.len()).rev() {
            state = dpmpp_step(&state, ts[i], ts[i - 1], &x_star, &sched).unwrap();
            for (p, q) in state.iter().zip(closed(ts[i - 1])) {
                chained = chained.max((p - q).abs());
            }
        }
        for i in (1..ts.len()).rev() {
            // one step from the exact state at t_i
            let from = closed(ts[i]);
            let next = dpmpp_step(&from, ts[i], ts[i - 1], &x_star, &sched).unwrap();
            let want = closed(ts[i - 1]);
            for (p, q) in next.iter().zip(&want) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        id: 2,
        name: "solver exactness",
        pass: worst <= 1e-10 && chained <= 1e-10 && elapsed < Duration::from_secs(1),
        detail: format!(
            "max per-step error {worst:.1e}, chained from T {chained:.1e}, 49 steps x 20 draws, {:.3}s",
            elapsed.as_secs_f64()
        ),
    }
}

// ---------------------------------------------------------------- 3

const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely at `1e-4 * FLOOR`.
const FD_FLOOR: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;
type ParamLoss<'a> = dyn Fn(&ModelParams) -> (f64, Vec<Array2<f64>>) + 'a;
type OpCase = (&'static str, Vec<Array2<f64>>, Box<Build>);

/// Loss `sum(w * out)` with fixed random `w`; returns value and input gradients.
fn weighted_loss(inputs: &[Array2<f64>], build: &Build, seed: u64) -> (f64, Vec<Array2<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let shape = tape.value(out).dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random_matrix(&mut rng, shape.0, shape.1, 1.0));
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(prod);
    let grads = tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads[v.index()].clone().map_or_else(|| Array2::zeros(x.dim()), |g| g.as_standard_layout().into_owned()))
        .collect();
    (tape.scalar(loss), g)
}

fn check_op(inputs: Vec<Array2<f64>>, build: &Build) -> f64 {
    let (_, grads) = weighted_loss(&inputs, build, 99);
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        for idx in 0..x.len() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            plus[k].as_slice_mut().unwrap()[idx] += FD_STEP;
            minus[k].as_slice_mut().unwrap()[idx] -= FD_STEP;
            let fd = (weighted_loss(&plus, build, 99).0 - weighted_loss(&minus, build, 99).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[k].as_slice().unwrap()[idx], fd));
        }
    }
    worst
}

fn check_params(params: &ModelParams, loss: &ParamLoss<'_>, per_tensor: usize) -> f64 {
    let (_, grads) = loss(params);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for (k, value) in params.values().iter().enumerate() {
        for _ in 0..per_tensor.min(value.len()) {
            let idx = rng.gen_range(0..value.len());
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.values_mut()[k].as_slice_mut().unwrap()[idx] += FD_STEP;
            minus.values_mut()[k].as_slice_mut().unwrap()[idx] -= FD_STEP;
            let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[k].as_slice().unwrap()[idx], fd));
        }
    }
    worst
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        time_dim: 8,
        query_dim: 4,
        ..BackboneConfig::new(6, 10, 4, 5).with_clustering(6)
    }
}

fn randomized(params: &ModelParams, seed: u64, scale: f64) -> ModelParams {
    let mut p = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in p.values_mut() {
        v.mapv_inplace(|_| rng.gen_range(-scale..scale));
    }
    p
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = |r: usize, c: usize| random_matrix(&mut rng, r, c, 1.0);
    let mut results: Vec<(&str, f64)> = Vec::new();
    let ops: Vec<OpCase> = vec![
        ("matmul", vec![m(3, 4), m(4, 2)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add_row", vec![m(3, 4), m(1, 4)], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("affine", vec![m(3, 4), m(4, 2), m(1, 2)], Box::new(|t, v| t.affine(v[0], v[1], v[2]))),
        ("add", vec![m(3, 4), m(3, 4)], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![m(3, 4), m(3, 4)], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![m(3, 4), m(3, 4)], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![m(3, 4)], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("scale_rows", vec![m(3, 4)], Box::new(|t, v| t.scale_rows(v[0], vec![0.5, -2.0, 3.0]))),
        ("silu", vec![m(3, 4)], Box::new(|t, v| Ok(t.silu(v[0])))),
        ("tanh", vec![m(3, 4)], Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("transpose", vec![m(3, 4)], Box::new(|t, v| Ok(t.transpose(v[0])))),
        ("concat_cols", vec![m(3, 4), m(3, 2)], Box::new(|t, v| t.concat_cols(v[0], v[1]))),
        ("segment_mean", vec![m(6, 3)], Box::new(|t, v| t.segment_mean(v[0], vec![2, 3, 1]))),
        ("repeat_segments", vec![m(3, 3)], Box::new(|t, v| t.repeat_segments(v[0], vec![2, 3, 1]))),
        ("cumsum_segments", vec![m(6, 3)], Box::new(|t, v| t.cumsum_segments(v[0], vec![2, 3, 1]))),
        ("softmax_rows", vec![m(3, 5)], Box::new(|t, v| Ok(t.softmax_rows(v[0])))),
        ("sum_all", vec![m(3, 4)], Box::new(|t, v| Ok(t.sum_all(v[0])))),
        ("mean_all", vec![m(3, 4)], Box::new(|t, v| Ok(t.mean_all(v[0])))),
        ("smooth_l1_mean", vec![m(3, 4), m(3, 4)], Box::new(|t, v| t.smooth_l1_mean(v[0], v[1]))),
        ("pseudo_huber_rows", vec![m(3, 4), m(3, 4)], Box::new(|t, v| t.pseudo_huber_rows(v[0], v[1], 0.3))),
    ];
    for (name, inputs, build) in &ops {
        results.push((name, check_op(inputs.clone(), build.as_ref())));
    }

    // full consistency function with a dictionary query
    let cfg = small_backbone();
    let params = randomized(&init_params(&cfg, 7), 8, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dict = ClusterDictionary::from_parts(random_matrix(&mut rng, 4, 5, 1.0), random_matrix(&mut rng, 4, 6, 0.8), 2).unwrap();
    let x = random_matrix(&mut rng, 3, 6, 1.0);
    let queries = random_matrix(&mut rng, 3, 5, 1.0);
    let times = [0.05, 0.4, 0.9];
    let conds = vec![
        ConditionEmbedding::Text(queries.row(0).to_vec()),
        ConditionEmbedding::Null,
        ConditionEmbedding::Text(queries.row(2).to_vec()),
    ];
    let w = random_matrix(&mut rng, 3, 6, 1.0);
    let model_loss = |p: &ModelParams| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let q = tape.constant(queries.clone());
        let (rep, _) = mlct_core::clustering::query_on_tape(&mut tape, p, q, &dict).unwrap();
        let out = consistency_forward(&mut tape, p, &cfg, xv, &times, &conds, Some(rep), 0.5).unwrap();
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum_all(prod);
        let g = tape.gradients(loss, p).unwrap();
        (tape.scalar(loss), g.values().iter().map(|a| a.as_standard_layout().into_owned()).collect())
    };
    results.push(("consistency model", check_params(&params, &model_loss, 12)));

    // codec encode -> decode in raw mode
    let codec_cfg = CodecConfig {
        channels: 3,
        tokens: 2,
        token_dim: 3,
        width: 8,
        pos_dim: 4,
        mode: LatentMode::Raw,
        frames_min: 4,
        frames_max: 8,
        ..CodecConfig::default()
    };
    let mut codec = Codec::init(codec_cfg, 11);
    codec.params = randomized(&codec.params, 12, 0.4);
    let seqs = [random_matrix(&mut rng, 5, 3, 1.0), random_matrix(&mut rng, 7, 3, 1.0)];
    let cw = random_matrix(&mut rng, 12, 3, 1.0);
    let codec_loss = |p: &ModelParams| {
        let c = Codec { config: codec_cfg, params: p.clone() };
        let mut tape = Tape::new();
        let refs: Vec<&Array2<f64>> = seqs.iter().collect();
        let z = c.encode_on_tape(&mut tape, &refs).unwrap();
        let z = tape.tanh(z);
        let out = c.decode_on_tape(&mut tape, z, &[5, 7]).unwrap();
        let wv = tape.constant(cw.clone());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum_all(prod);
        let g = tape.gradients(loss, p).unwrap();
        (tape.scalar(loss), g.values().iter().map(|a| a.as_standard_layout().into_owned()).collect())
    };
    results.push(("codec", check_params(&codec.params, &codec_loss, 12)));

    // straight-through estimator against the analytic tanh derivative
    let z = random_matrix(&mut rng, 16, 8, 2.0);
    let (_, g) = weighted_loss(
        std::slice::from_ref(&z),
        &|t: &mut Tape, v: &[Var]| {
            let b = t.tanh(v[0]);
            Ok(t.ste_round(b, 256))
        },
        99,
    );
    let (_, wg) = weighted_loss(&[Array2::zeros(z.dim())], &|_: &mut Tape, v: &[Var]| Ok(v[0]), 99);
    let ste_worst = z
        .iter()
        .zip(g[0].iter())
        .zip(wg[0].iter())
        .map(|((&z, &g), &w)| (g - w * (1.0 - z.tanh().powi(2))).abs() / (w * (1.0 - z.tanh().powi(2))).abs())
        .fold(0.0f64, f64::max);

    let elapsed = start.elapsed();
    let (worst_name, worst) = results
        .iter()
        .copied()
        .fold(("", 0.0f64), |acc, r| if r.1 > acc.1 { r } else { acc });
    Outcome {
        id: 3,
        name: "gradient suite",
        pass: worst <= 1e-4 && ste_worst <= 1e-6 && elapsed < Duration::from_secs(30),
        detail: format!(
            "{} checks, worst rel {worst:.1e} ({worst_name}), STE rel {ste_worst:.1e}, {:.2}s",
            results.len(),
            elapsed.as_secs_f64()
        ),
    }
}

// ---------------------------------------------------------------- 4

fn boundary_and_clamp() -> Outcome {
    let cfg = small_backbone();
    let mut identity = true;
    for seed in 0..20 {
        let params = randomized(&init_params(&cfg, seed), seed + 50, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, 4, 6, 3.0);
        let reference = random_matrix(&mut rng, 4, 6, 1.0);
        let conds: Vec<_> = (0..4)
            .map(|_| ConditionEmbedding::Text((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let out = consistency_apply(&params, &cfg, &x, &[0.0; 4], &conds, Some(&reference), 0.5).unwrap();
        identity &= out == x;
    }

    let mut inside = true;
    let mut count = 0usize;
    for seed in 0..5 {
        let plain = BackboneConfig { time_dim: 8, ..BackboneConfig::new(6, 16, 2, 5) };
        let params = randomized(&init_params(&plain, seed), seed + 70, 2.0);
        let model = ConsistencyModel::new(
            plain,
            params,
            NoiseSchedule::standard(),
            TimeGrid::default_grid(),
            None,
            0.5,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conds: Vec<_> = (0..64)
            .map(|_| ConditionEmbedding::Text((0..5).map(|_| rng.gen_range(-3.0..3.0)).collect()))
            .collect();
        for nfe in [1, 2, 4] {
            let out = model.sample(&conds, SampleOptions { nfe, seed, reuse_noise: false }).unwrap();
            count += out.latents.len();
            inside &= out.latents.iter().all(|v| (-1.0..=1.0).contains(v));
        }
    }
    Outcome {
        id: 4,
        name: "boundary and clamp",
        pass: identity && inside,
        detail: format!("S(x, 0) == x for 20 random nets: {identity}; {count} sampled latents in [-1, 1]: {inside}"),
    }
}

// ---------------------------------------------------------------- 5

fn quantizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut on_grid = true;
    let mut bounded = true;
    for level in [256u32, 100, 7] {
        let z = Array2::from_shape_fn((1000, 1000), |_| rng.gen_range(-8.0..8.0));
        let q = quantize(&z, level).unwrap();
        let l = level as f64;
        on_grid &= q.iter().all(|&v| (v * l).round() / l == v);
        bounded &= q.iter().all(|&v| (-1.0..=1.0).contains(&v));
    }
    Outcome {
        id: 5,
        name: "quantizer",
        pass: on_grid && bounded,
        detail: format!("10^6 inputs at levels 256/100/7: on grid {on_grid}, bounded {bounded}"),
    }
}

// ---------------------------------------------------------------- 6, 7

const SEEDS: u64 = 5;

/// CPU time of the calling thread; wall time where the kernel does not expose it.
struct CpuClock {
    wall: Instant,
    cpu: Option<u64>,
}

fn thread_cpu_ns() -> Option<u64> {
    std::fs::read_to_string("/proc/thread-self/schedstat")
        .ok()?
        .split_whitespace()
        .next()?
        .parse()
        .ok()
}

impl CpuClock {
    fn start() -> Self {
        Self { wall: Instant::now(), cpu: thread_cpu_ns() }
    }

    fn elapsed(&self) -> Duration {
        match (self.cpu, thread_cpu_ns()) {
            (Some(a), Some(b)) => Duration::from_nanos(b.saturating_sub(a)),
            _ => self.wall.elapsed(),
        }
    }
}

fn desk_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.classes = 4;
    cfg.items_per_class = 200;
    cfg.omega = 1.0;
    cfg.seed = seed;
    cfg
}

struct Bench {
    prepared: Prepared,
    reference: Reference,
    requests: Requests,
}

impl Bench {
    fn new(cfg: &RunConfig) -> Self {
        let prepared = pipeline::prepare(cfg).unwrap();
        let reference = Reference::new(&prepared.held_out).unwrap();
        let requests = Requests::from_items(&prepared.vocab, &prepared.held_out, cfg.sample_repeats).unwrap();
        Self { prepared, reference, requests }
    }

    fn consistency(&self, cfg: &RunConfig, nfes: &[usize]) -> Vec<Metrics> {
        let dict = pipeline::fit_dictionary(cfg, &self.prepared.data).unwrap();
        let (trainer, _) = pipeline::fit_consistency(cfg, &self.prepared.data, dict).unwrap();
        let model = ConsistencyModel::from_trainer(&trainer).unwrap();
        nfes.iter()
            .map(|&nfe| {
                let options = SampleOptions { nfe, seed: sub_seed(cfg.seed, "sampling"), reuse_noise: false };
                let g = pipeline::generate_consistency(&model, &self.prepared.codec, &self.requests, options).unwrap();
                pipeline::evaluate(&g, &self.reference, cfg.seed).unwrap()
            })
            .collect()
    }

    fn baseline(&self, cfg: &RunConfig) -> Metrics {
        let (b, _) = pipeline::fit_baseline(cfg, &self.prepared.data).unwrap();
        let g = pipeline::generate_baseline(&b, &self.prepared.codec, &self.requests, cfg.oracle_steps, sub_seed(cfg.seed, "sampling"))
            .unwrap();
        pipeline::evaluate(&g, &self.reference, cfg.seed).unwrap()
    }
}

#[derive(Default)]
struct SeedRow {
    cm4: f64,
    cm1: f64,
    acc4: f64,
    base: f64,
    base_acc: f64,
    acc_w4: f64,
    fd_w4: f64,
    acc_w0: f64,
    fd_no_cluster: f64,
    fd_raw: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(" "))
}

fn end_to_end() -> (Outcome, Outcome) {
    let mut rows = Vec::new();
    let mut e2e_time = Duration::ZERO;
    for seed in 0..SEEDS {
        let cfg = desk_config(seed);
        let mut r = SeedRow::default();

        let t = CpuClock::start();
        let bench = Bench::new(&cfg);
        let m = bench.consistency(&cfg, &[4, 1]);
        (r.cm4, r.acc4, r.cm1) = (m[0].frechet, m[0].accuracy, m[1].frechet);
        let b = bench.baseline(&cfg);
        (r.base, r.base_acc) = (b.frechet, b.accuracy);
        e2e_time += t.elapsed();

        let mut w4 = cfg.clone();
        w4.omega = 4.0;
        let m = bench.consistency(&w4, &[4]);
        (r.acc_w4, r.fd_w4) = (m[0].accuracy, m[0].frechet);
        let mut w0 = cfg.clone();
        w0.omega = 0.0;
        r.acc_w0 = bench.consistency(&w0, &[4])[0].accuracy;
        let mut nc = cfg.clone();
        nc.use_clustering = false;
        r.fd_no_cluster = bench.consistency(&nc, &[4])[0].frechet;
        drop(bench);

        let mut raw = cfg.clone();
        raw.latent_mode = LatentMode::Raw;
        r.fd_raw = Bench::new(&raw).consistency(&raw, &[4])[0].frechet;

        report(&format!(
            "  seed {seed}: fd nfe4 {:.4} nfe1 {:.4} baseline {:.4} | acc nfe4 {:.3} baseline {:.3} | omega4 acc {:.3} fd {:.4} | omega0 acc {:.3} | no-cluster fd {:.4} | raw fd {:.4}",
            r.cm4, r.cm1, r.base, r.acc4, r.base_acc, r.acc_w4, r.fd_w4, r.acc_w0, r.fd_no_cluster, r.fd_raw
        ));
        rows.push(r);
    }
    let col = |f: fn(&SeedRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let (cm4, cm1, acc4, base) = (col(|r| r.cm4), col(|r| r.cm1), col(|r| r.acc4), col(|r| r.base));
    let ratio = mean(&cm4) / mean(&base);
    let trend = cm4.iter().zip(&cm1).filter(|(a, b)| a <= b).count();
    let a = ratio <= 1.5;
    let b = mean(&acc4) >= 0.90;
    let c = trend >= 4;
    let budget = e2e_time < Duration::from_secs(15 * 60);
    let six = Outcome {
        id: 6,
        name: "end-to-end toy reproduction",
        pass: a && b && c && budget,
        detail: format!(
            "(a) mean fd nfe4 {:.4} / baseline {:.4} = {ratio:.2} <= 1.5: {a}; (b) mean acc nfe4 {:.3} >= 0.90: {b}; (c) nfe4 <= nfe1 in {trend}/5 seeds: {c}; cpu {:.0}s < 900s: {budget}; omega=4 mean fd {:.4}",
            mean(&cm4),
            mean(&base),
            mean(&acc4),
            e2e_time.as_secs_f64(),
            mean(&col(|r| r.fd_w4)),
        ),
    };

    let (acc_w4, acc_w0) = (col(|r| r.acc_w4), col(|r| r.acc_w0));
    let (fd_nc, fd_raw) = (col(|r| r.fd_no_cluster), col(|r| r.fd_raw));
    let g = mean(&acc_w4) > mean(&acc_w0);
    let k = median(&cm4) <= median(&fd_nc);
    let q = median(&fd_raw) > median(&cm4);
    let seven = Outcome {
        id: 7,
        name: "ablation trends",
        pass: g && k && q,
        detail: format!(
            "guidance: mean acc omega4 {:.3} {} vs omega0 {:.3} {}: {g}; clustering: median fd {:.4} vs off {:.4}: {k}; quantization: median fd {:.4} vs raw {:.4} {}: {q}",
            mean(&acc_w4),
            fmt(&acc_w4),
            mean(&acc_w0),
            fmt(&acc_w0),
            median(&cm4),
            median(&fd_nc),
            median(&cm4),
            median(&fd_raw),
            fmt(&fd_raw),
        ),
    };
    (six, seven)
}

// ---------------------------------------------------------------- 8

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.classes = 2;
    cfg.items_per_class = 40;
    cfg.codec_steps = 60;
    cfg.steps = 60;
    cfg.baseline_steps = 60;
    cfg.oracle_steps = 20;
    cfg.seed = 17;
    cfg
}

fn pipeline_bytes(cfg: &RunConfig) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let bench = Bench::new(cfg);
    out.push(("corpus".into(), bench.prepared.corpus.to_bytes().unwrap()));
    let mut codec_ckpt = mlct_core::netcore::Checkpoint::new();
    bench.prepared.codec.write_into(&mut codec_ckpt);
    out.push(("codec".into(), codec_ckpt.to_bytes().unwrap()));
    let dict = pipeline::fit_dictionary(cfg, &bench.prepared.data).unwrap();
    let (trainer, _) = pipeline::fit_consistency(cfg, &bench.prepared.data, dict).unwrap();
    out.push(("consistency".into(), trainer.to_checkpoint().to_bytes().unwrap()));
    let (baseline, _) = pipeline::fit_baseline(cfg, &bench.prepared.data).unwrap();
    out.push(("baseline".into(), baseline.to_checkpoint().to_bytes().unwrap()));
    let model = ConsistencyModel::from_trainer(&trainer).unwrap();
    let options = SampleOptions { nfe: 4, seed: sub_seed(cfg.seed, "sampling"), reuse_noise: false };
    let g = pipeline::generate_consistency(&model, &bench.prepared.codec, &bench.requests, options).unwrap();
    out.push(("samples".into(), g.to_corpus().unwrap().to_bytes().unwrap()));
    let metrics = pipeline::evaluate(&g, &bench.reference, cfg.seed).unwrap();
    let lines: String = metrics.records(cfg.seed, &cfg.hash()).iter().map(|r| r.to_line() + "\n").collect();
    out.push(("metrics".into(), lines.into_bytes()));
    out
}

fn determinism() -> Outcome {
    let cfg = tiny_config();
    let a = pipeline_bytes(&cfg);
    let b = pipeline_bytes(&cfg);
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    Outcome {
        id: 8,
        name: "determinism",
        pass: differing.is_empty(),
        detail: format!(
            "{} artifacts ({}) compared byte for byte; differing: {:?}",
            a.len(),
            a.iter().map(|x| x.0.as_str()).collect::<Vec<_>>().join(", "),
            differing
        ),
    }
}

#[test]
fn acceptance_criteria() {
    let mut outcomes = vec![schedule_suite(), solver_exactness(), gradient_suite(), boundary_and_clamp(), quantizer()];
    for o in &outcomes {
        report(&o.line());
    }
    let (six, seven) = end_to_end();
    let eight = determinism();
    for o in [&six, &seven, &eight] {
        report(&o.line());
    }
    outcomes.extend([six, seven, eight]);
    report("acceptance summary:");
    for o in &outcomes {
        report(&format!("  {} {}", o.id, if o.pass { "PASS" } else { "FAIL" }));
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
