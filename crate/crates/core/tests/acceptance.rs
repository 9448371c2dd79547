//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary under `cargo test`. A failing criterion is
//! reported but only turns into a nonzero exit status when
//! `PCMP_ACCEPTANCE_STRICT=1` is set.

use std::time::{Duration, Instant};

use pcmp_core::codec::{
    arith_encode, decode_cloud, decode_cloud_instrumented, encode_cloud, truncate_stream,
    CodecConfig, ContextId, ContextModel, COUNT_INCREMENT, COUNT_LIMIT,
};
use pcmp_core::eval::{
    default_sweep, evaluate_on_table, increases, oracle_indices, plan_partition, EvalReport,
    Policy, LAMBDA_SCALE,
};
use pcmp_core::fsutil::Fnv1a;
use pcmp_core::metrics::{d1_psnr, default_peak, directed_mse_brute, nearest_brute, NeighborGrid};
use pcmp_core::nn::PointNet;
use pcmp_core::octree::{build_octree, CandidateLevels, DepthLevel};
use pcmp_core::pointcloud::{
    generate_dataset, generate_shape, normalize, DatasetConfig, Point3, PointCloud, ShapeKind,
};
use pcmp_core::predictor::{
    gradient_check, gumbel_noise, gumbel_select, open_uniforms, train_predictor, GradCheckBatch,
    PredictorModel, PredictorTrainConfig, PREDICTOR_HIDDEN, PREDICTOR_POINT_WIDTHS,
};
use pcmp_core::tasks::{build_rate_loss_table, RateLossTable, TaskKind, TaskModel, TaskTrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const CODER_REL_SLACK: f64 = 0.02;
const CODER_ABS_SLACK_BYTES: f64 = 64.0;
const GRAD_REL_ERROR: f64 = 1e-3;
const GUMBEL_MEAN_TOL: f64 = 0.01;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const SHARP_TAU: f64 = 0.001;
const SHARP_MAX: f64 = 0.99;
/// Top-two gap below which two noisy scores count as tied.
const DISTINCT_GAP: f64 = 0.01;
const LEARNED_FRACTION: f64 = 0.80;
const ORACLE_FACTOR: f64 = 1.10;
const ACCURACY_MATCH: f64 = 0.01;
const RATE_FRACTION: f64 = 0.85;
const MONOTONE_FRACTION: f64 = 0.99;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Suite {
    results: Vec<(String, bool)>,
}

impl Suite {
    fn report(&mut self, id: &str, ok: bool, detail: String, elapsed: Duration) {
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("[{tag}] {id}: {detail} ({:.1}s)", elapsed.as_secs_f64());
        self.results.push((id.to_string(), ok));
    }
}

/// Randomized cloud corpus shared by criteria 1 and 2.
fn codec_corpus() -> Vec<(PointCloud, u32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..1000)
        .map(|i| {
            let kind = ShapeKind::ALL[i % 6];
            let size = (64.0 * 64f64.powf(rng.random::<f64>())).round() as usize;
            let depth = rng.random_range(2..=8);
            let noise = rng.random_range(0.0..0.03);
            (generate_shape(kind, size, rng.random(), noise).cloud, depth)
        })
        .collect()
}

fn criteria_1_2(suite: &mut Suite) {
    let t = Instant::now();
    let corpus = codec_corpus();
    let mut lossless_failures = 0;
    let mut prefix_failures = 0;
    let mut checks = 0;
    let mut t_prefix = Duration::ZERO;
    for (cloud, n) in &corpus {
        let stream = encode_cloud(cloud, *n).unwrap();
        let normalized = normalize(cloud).0;
        for k in 1..=*n {
            let d = DepthLevel::new(k).unwrap();
            checks += 1;
            let (tree, decoded) = decode_cloud(&stream, d).unwrap();
            if tree != build_octree(&normalized, k).unwrap() {
                lossless_failures += 1;
            }
            let tp = Instant::now();
            let prefix = truncate_stream(&stream, d).unwrap();
            let report = decode_cloud_instrumented(&prefix, d).unwrap();
            let expected: usize = stream.segments()[..k as usize].iter().map(|s| s.payload.len()).sum();
            if report.octree != tree || report.cloud != decoded || report.bytes_consumed() != expected {
                prefix_failures += 1;
            }
            t_prefix += tp.elapsed();
        }
    }
    let elapsed = t.elapsed() - t_prefix;
    suite.report(
        "C1 codec losslessness",
        lossless_failures == 0 && elapsed < Duration::from_secs(120),
        format!("{lossless_failures} failures over {} clouds / {checks} prefix depths", corpus.len()),
        elapsed,
    );
    suite.report(
        "C2 prefix-decode equivalence",
        prefix_failures == 0,
        format!("{prefix_failures} failures over {checks} truncations"),
        t_prefix,
    );
}

/// Bits an ideal coder spends under the same adaptive counts.
fn replay_bits(symbols: &[u8]) -> f64 {
    let mut counts = [1u64; 256];
    let mut total: u64 = 256;
    let mut bits = 0.0;
    for &s in symbols {
        bits -= (counts[s as usize] as f64 / total as f64).log2();
        counts[s as usize] += u64::from(COUNT_INCREMENT);
        total += u64::from(COUNT_INCREMENT);
        if total > u64::from(COUNT_LIMIT) {
            for c in counts.iter_mut() {
                *c = (*c / 2).max(1);
            }
            total = counts.iter().sum();
        }
    }
    bits
}

fn criterion_3(suite: &mut Suite) {
    let t = Instant::now();
    // Geometric-like distribution over 256 symbols.
    let weights: Vec<f64> = (0..256).map(|i| 0.93f64.powi(i)).collect();
    let dist = rand::distr::weighted::WeightedIndex::new(&weights).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let symbols: Vec<u8> = (0..100_000).map(|_| rng.sample(&dist) as u8).collect();
    let contexts = vec![ContextId::new(1, 0); symbols.len()];
    let coded = arith_encode(&symbols, &contexts, &mut ContextModel::new()).len() as f64;
    let ideal = replay_bits(&symbols) / 8.0;
    let ok = (coded - ideal).abs() <= CODER_REL_SLACK * ideal + CODER_ABS_SLACK_BYTES;
    suite.report(
        "C3 entropy-coder bound",
        ok,
        format!("coded {coded} B, adaptive cross-entropy {ideal:.1} B, excess {:.3}%", 100.0 * (coded - ideal) / ideal),
        t.elapsed(),
    );
}

fn criterion_4(suite: &mut Suite) {
    let t = Instant::now();
    let levels = CandidateLevels::default();
    let mut worst = 0.0f64;
    let mut skipped = 0;
    let mut checked = 0;
    for draw in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + draw);
        let net = PointNet::new(
            &PREDICTOR_POINT_WIDTHS,
            &[PREDICTOR_POINT_WIDTHS[3], PREDICTOR_HIDDEN, levels.len()],
            &mut rng,
        );
        let model = PredictorModel::from_pointnet(net, levels).unwrap();
        let tau = rng.random_range(0.5..3.0);
        let batch = GradCheckBatch::random(&mut rng, 2, 8, levels.len(), tau);
        let r = gradient_check(&model, &batch, rng.random_range(0.0..2.0));
        worst = worst.max(r.max_rel_error);
        skipped += r.skipped;
        checked += r.checked;
    }
    let a = worst < GRAD_REL_ERROR;

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let n = 1_000_000;
    let mean = (0..n)
        .map(|_| gumbel_noise(open_uniforms(&mut rng, 1)[0]).unwrap())
        .sum::<f64>()
        / n as f64;
    let b = (mean - EULER_GAMMA).abs() < GUMBEL_MEAN_TOL;

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut trials, mut ties, mut sharp) = (0, 0, 0);
    while trials < 1000 {
        let logits: Vec<f64> = (0..levels.len()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = pcmp_core::nn::softmax(&logits);
        let sel = gumbel_select(&p, SHARP_TAU, &open_uniforms(&mut rng, levels.len())).unwrap();
        let mut sorted = sel.noisy.clone();
        sorted.sort_by(|x, y| y.total_cmp(x));
        if sorted[0] - sorted[1] < DISTINCT_GAP {
            ties += 1;
            continue;
        }
        trials += 1;
        if sel.relaxed.iter().copied().fold(0.0, f64::max) > SHARP_MAX {
            sharp += 1;
        }
    }
    let c = sharp == trials;
    suite.report(
        "C4 Gumbel-Softmax correctness",
        a && b && c,
        format!(
            "(a) max rel err {worst:.2e} over 20 draws, {checked} weights checked, {skipped} kink-skipped; \
             (b) mean {mean:.5}; (c) {sharp}/{trials} sharp, {ties} near-ties redrawn"
        ),
        t.elapsed(),
    );
}

struct Pipeline {
    dataset: Vec<pcmp_core::pointcloud::LabeledCloud>,
    table: RateLossTable,
    lambdas: Vec<f64>,
    /// `learned[seed][lambda]`
    learned: Vec<Vec<PredictorModel>>,
    train_time: Duration,
    stream_hash_before: u64,
}

fn stream_hash(dataset: &[pcmp_core::pointcloud::LabeledCloud], codec: &CodecConfig) -> u64 {
    let mut h = Fnv1a::new();
    for s in dataset.iter().take(60) {
        h.write(&codec.encode(&s.cloud).unwrap().to_bytes());
    }
    h.finish()
}

fn build_pipeline() -> Pipeline {
    let t = Instant::now();
    let train = generate_dataset(&DatasetConfig {
        seed: 2,
        ..DatasetConfig::default()
    })
    .unwrap();
    let dataset = generate_dataset(&DatasetConfig::default()).unwrap();
    let codec = CodecConfig::new(8).unwrap();
    let stream_hash_before = stream_hash(&dataset, &codec);
    let task = TaskModel::train(TaskKind::Classification, &train, &TaskTrainConfig::default()).unwrap();
    let held_out = dataset.iter().map(|s| task.evaluate_raw(s).score).sum::<f64>() / dataset.len() as f64;
    let table = build_rate_loss_table(&dataset, &codec, &task, CandidateLevels::default()).unwrap();
    println!(
        "       setup: classifier held-out accuracy {:.4}, table {} x {} built in {:.1}s",
        held_out,
        table.len(),
        table.k(),
        t.elapsed().as_secs_f64()
    );
    let lambdas = default_sweep();
    let t = Instant::now();
    let learned = SEEDS
        .iter()
        .map(|&seed| {
            lambdas
                .iter()
                .map(|&lambda| {
                    let cfg = PredictorTrainConfig {
                        lambda,
                        seed,
                        ..PredictorTrainConfig::default()
                    };
                    train_predictor(&dataset, &table, &cfg).unwrap().0
                })
                .collect()
        })
        .collect();
    Pipeline {
        dataset,
        table,
        lambdas,
        learned,
        train_time: t.elapsed(),
        stream_hash_before,
    }
}

struct SweepPoint {
    learned: EvalReport,
    oracle: EvalReport,
    fixed: Vec<EvalReport>,
}

fn sweep(p: &Pipeline) -> Vec<Vec<SweepPoint>> {
    p.learned
        .iter()
        .map(|models| {
            p.lambdas
                .iter()
                .zip(models)
                .map(|(&lambda, model)| {
                    let ev = |policy: Policy<'_>| evaluate_on_table(&policy, &p.dataset, &p.table, lambda).unwrap();
                    SweepPoint {
                        learned: ev(Policy::Learned(model)),
                        oracle: ev(Policy::Oracle(lambda)),
                        fixed: p.table.levels().iter().map(|d| ev(Policy::Fixed(d))).collect(),
                    }
                })
                .collect()
        })
        .collect()
}

fn criterion_5(suite: &mut Suite, points: &[Vec<SweepPoint>]) {
    let t = Instant::now();
    let mut violations = 0;
    let mut comparisons = 0;
    for pt in points.iter().flatten() {
        for other in pt.fixed.iter().chain([&pt.learned]) {
            comparisons += 1;
            if pt.oracle.mean_objective > other.mean_objective {
                violations += 1;
            }
        }
    }
    suite.report(
        "C5 oracle dominance",
        violations == 0,
        format!("{violations} violations in {comparisons} comparisons"),
        t.elapsed(),
    );
}

fn criterion_6(suite: &mut Suite, p: &Pipeline, points: &[Vec<SweepPoint>]) {
    let mut good = 0;
    let mut total = 0;
    let mut lines = Vec::new();
    for (seed, row) in SEEDS.iter().zip(points) {
        for (lambda, pt) in p.lambdas.iter().zip(row) {
            let best_fixed = pt.fixed.iter().map(|r| r.mean_objective).fold(f64::INFINITY, f64::min);
            let l = pt.learned.mean_objective;
            let ok = l <= best_fixed && l <= ORACLE_FACTOR * pt.oracle.mean_objective;
            total += 1;
            good += ok as usize;
            lines.push(format!(
                "         seed {seed} lambda {:>4} ({lambda:.3}): learned {l:.4} best-fixed {best_fixed:.4} oracle {:.4} ratio {:.3} {}",
                lambda / LAMBDA_SCALE,
                pt.oracle.mean_objective,
                l / pt.oracle.mean_objective,
                if ok { "ok" } else { "miss" }
            ));
        }
    }
    let frac = good as f64 / total as f64;
    suite.report(
        "C6 learned-policy quality",
        frac >= LEARNED_FRACTION && p.train_time < Duration::from_secs(1800),
        format!("{good}/{total} (seed, lambda) points within best-fixed and {ORACLE_FACTOR} x oracle"),
        p.train_time,
    );
    for l in lines {
        println!("{l}");
    }
}

fn criterion_7(suite: &mut Suite, p: &Pipeline, points: &[Vec<SweepPoint>]) {
    let t = Instant::now();
    let mut passing = 0;
    let mut notes = Vec::new();
    for (seed, row) in SEEDS.iter().zip(points) {
        let full = row[0].fixed.last().unwrap();
        // Largest lambda whose learned accuracy matches the full-depth one.
        let hit = row
            .iter()
            .zip(&p.lambdas)
            .filter(|(pt, _)| (pt.learned.metric - full.metric).abs() <= ACCURACY_MATCH)
            .last();
        match hit {
            Some((pt, lambda)) => {
                let ratio = pt.learned.mean_bpp / full.mean_bpp;
                passing += (ratio <= RATE_FRACTION) as usize;
                notes.push(format!(
                    "seed {seed}: lambda {lambda:.3} acc {:.4} vs {:.4}, bpp {:.3} vs {:.3} ({:.1}%)",
                    pt.learned.metric,
                    full.metric,
                    pt.learned.mean_bpp,
                    full.mean_bpp,
                    100.0 * ratio
                ));
            }
            None => notes.push(format!("seed {seed}: no lambda matches full-depth accuracy")),
        }
    }
    suite.report("C7 rate saving", passing >= 2, notes.join("; "), t.elapsed());
}

fn criterion_8(suite: &mut Suite, p: &Pipeline, points: &[Vec<SweepPoint>]) {
    let t = Instant::now();
    let oracle_depth: Vec<f64> = p
        .lambdas
        .iter()
        .map(|&l| {
            let idx = oracle_indices(&p.table, l);
            idx.iter().map(|&k| p.table.levels().level(k).get() as f64).sum::<f64>() / idx.len() as f64
        })
        .collect();
    let oracle_ok = increases(&oracle_depth) == 0;
    let learned: Vec<Vec<f64>> = points
        .iter()
        .map(|row| row.iter().map(|pt| pt.learned.mean_depth).collect())
        .collect();
    let learned_ok = learned.iter().all(|d| increases(d) <= 1);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    suite.report(
        "C8 selection-shift trend",
        oracle_ok && learned_ok,
        format!(
            "oracle depth [{}]; learned [{}]",
            fmt(&oracle_depth),
            learned.iter().map(|d| fmt(d)).collect::<Vec<_>>().join("] [")
        ),
        t.elapsed(),
    );
}

fn criterion_9(suite: &mut Suite, p: &Pipeline) {
    let t = Instant::now();
    let codec = CodecConfig::new(8).unwrap();
    let after = stream_hash(&p.dataset, &codec);
    let hashes_equal = after == p.stream_hash_before;
    // Predictors trained at different lambdas act as distinct consumers.
    let models = &p.learned[0];
    let tasks: Vec<(&PredictorModel, &str)> =
        vec![(&models[0], "low-rate"), (&models[2], "mid-rate"), (&models[5], "high-rate")];
    let mut mismatches = 0;
    for s in p.dataset.iter().step_by(15) {
        let stream = codec.encode(&s.cloud).unwrap();
        let plan = plan_partition(&tasks, &s.cloud, 8).unwrap();
        if plan.split(&stream).unwrap().concat() != stream.to_bytes() {
            mismatches += 1;
        }
    }
    suite.report(
        "C9 human-vision invariance",
        hashes_equal && mismatches == 0,
        format!(
            "stream hash {:016x} before and {after:016x} after training; {mismatches} partition mismatches",
            p.stream_hash_before
        ),
        t.elapsed(),
    );
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| Point3::new(rng.random(), rng.random(), rng.random())).collect()).unwrap()
}

fn criterion_10(suite: &mut Suite) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut exact = true;
    for _ in 0..50 {
        let a = random_cloud(&mut rng, 200);
        let b = random_cloud(&mut rng, 200);
        let grid = NeighborGrid::new(b.points());
        exact &= a.points().iter().all(|q| grid.nearest_squared(q) == nearest_brute(q, b.points()));
        let mse = directed_mse_brute(a.points(), b.points()).max(directed_mse_brute(b.points(), a.points()));
        exact &= d1_psnr(&a, &b, 1.0).unwrap().mse == mse;
    }

    let mut monotone = 0;
    let clouds = 1000;
    for i in 0..clouds {
        let kind = ShapeKind::ALL[i % 6];
        let size = rng.random_range(64..=4096);
        let cloud = generate_shape(kind, size, rng.random(), rng.random_range(0.0..0.03)).cloud;
        let n = rng.random_range(2..=8);
        let stream = encode_cloud(&cloud, n).unwrap();
        let peak = default_peak(&cloud);
        let psnr: Vec<f64> = (1..=n)
            .map(|k| {
                let (_, rec) = decode_cloud(&stream, DepthLevel::new(k).unwrap()).unwrap();
                d1_psnr(&cloud, &rec, peak).unwrap().d1_psnr
            })
            .collect();
        monotone += psnr.windows(2).all(|w| w[1] >= w[0]) as usize;
    }
    let frac = monotone as f64 / clouds as f64;

    let one = |x: f64| PointCloud::new(vec![Point3::new(x, 0.0, 0.0)]).unwrap();
    let twenty = d1_psnr(&one(0.0), &one(0.1), 1.0).unwrap().d1_psnr;
    suite.report(
        "C10 D1 PSNR",
        exact && frac >= MONOTONE_FRACTION && twenty == 20.0,
        format!(
            "grid exact: {exact}; depth-monotone clouds {monotone}/{clouds}; single-offset example {twenty} dB"
        ),
        t.elapsed(),
    );
}

fn main() {
    let start = Instant::now();
    let mut suite = Suite { results: Vec::new() };
    criteria_1_2(&mut suite);
    criterion_3(&mut suite);
    criterion_4(&mut suite);
    let pipeline = build_pipeline();
    let points = sweep(&pipeline);
    criterion_5(&mut suite, &points);
    criterion_6(&mut suite, &pipeline, &points);
    criterion_7(&mut suite, &pipeline, &points);
    criterion_8(&mut suite, &pipeline, &points);
    criterion_9(&mut suite, &pipeline);
    criterion_10(&mut suite);
    let passed = suite.results.iter().filter(|r| r.1).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s",
        suite.results.len(),
        start.elapsed().as_secs_f64()
    );
    let failed: Vec<&str> = suite.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    if !failed.is_empty() {
        println!("acceptance: failing: {}", failed.join(", "));
        if std::env::var("PCMP_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
            std::process::exit(1);
        }
    }
}
