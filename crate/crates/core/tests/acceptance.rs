//! Acceptance criteria 1-8. Each test prints one PASS/FAIL line and then
//! asserts it. Tests take a shared lock so wall-clock budgets are measured
//! one criterion at a time.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use qsformer::config::{List, RunConfig};
use qsformer::data::synth::nearest_centroid_accuracy;
use qsformer::data::{sample_episode, Dataset, EpisodeSpec, MetaSplit, SampleId};
use qsformer::emd::selftest::{run_selftest, OracleKind};
use qsformer::metric::{MetricKind, MetricMatrix};
use qsformer::model::Model;
use qsformer::numeric::{softmax_rows, DenseMatrix, ParamStore};
use qsformer::objective::{
    classify, contrastive_loss, fuse_metric, mean_ci, ContrastiveMode, FusionConfig, KShotAgg,
};
use qsformer::par::Execution;
use qsformer::patch_former::{patch_transform, PatchFormer, PatchTokens};
use qsformer::sample_former::{
    decode_query_self, encode_support, sample_former_forward, MetricLayers, Origin, SampleFormer,
    SampleFormerConfig, TokenSequence,
};
use qsformer::seed::derive_seed;
use qsformer::trainer::{
    evaluate, init_model, load_checkpoint, prepare_data, run_grad_check, save_checkpoint,
    tiny_gradcheck_config, train, Checkpoint, TrainConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INVARIANT_INSTANCES: usize = 1000;
const INVARIANT_BUDGET: Duration = Duration::from_secs(120);
const SOFTMAX_TOL: f64 = 1e-12;
const MG_ROW_SUM_TOL: f64 = 1e-6;
const EQUIVARIANCE_TOL: f64 = 1e-10;

const EMD_INSTANCES: usize = 500;
const EMD_OBJECTIVE_TOL: f64 = 1e-9;
const EMD_RESIDUAL_TOL: f64 = 1e-8;
const EMD_BUDGET: Duration = Duration::from_secs(60);

const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(300);

const ORACLE_MIN: f64 = 0.99;
const ORACLE_TRIALS: usize = 50;
const TRAINED_MIN: f64 = 0.90;
const TRAINED_EPISODES: usize = 200;
const MAX_EPOCHS: usize = 50;
const UNTRAINED_EPISODES: usize = 500;
const CHANCE: f64 = 0.20;
const CHANCE_BAND: f64 = 0.05;
const TRAINING_BUDGET: Duration = Duration::from_secs(20 * 60);

const REPORT_EPISODES: usize = 10;
const REPORT_PAIRS: usize = 750;
const REPORT_MIN_GAP: f64 = 0.1;

const SWEEP_LAMBDAS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
const SWEEP_LAYERS: [usize; 4] = [1, 2, 3, 4];

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    println!(
        "acceptance criterion {n} ({name}): {} | {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} failed: {detail}");
}

fn desk_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    RunConfig::load(&path).expect("configs/desk.cfg parses")
}

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_qsformer")
}

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(binary())
        .args(args)
        .env("QSF_THREADS", "1")
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

fn ids(n: usize, base: u64) -> Vec<SampleId> {
    (0..n as u64).map(|i| SampleId(base + i)).collect()
}

fn max_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn sample_former(width: usize, layers: usize, seed: u64) -> (SampleFormer, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = SampleFormerConfig {
        layers,
        heads: 2,
        cross_scale: false,
        encoder_dropout: 0.0,
        decoder_dropout: 0.0,
        metric_layers: MetricLayers::Last,
    };
    let sf =
        SampleFormer::init(&mut store, width, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (sf, store)
}

#[test]
fn criterion_1_invariants() {
    let _lock = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut failures: Vec<String> = Vec::new();
    let n = INVARIANT_INSTANCES;

    // softmax rows are nonnegative and sum to one
    let mut bad = 0;
    for _ in 0..n {
        let (r, c) = (rng.random_range(1..6), rng.random_range(1..9));
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let s = softmax_rows(&random_matrix(&mut rng, r, c, scale)).unwrap();
        let ok = (0..r).all(|i| {
            let row = s.row(i);
            row.iter().all(|v| *v >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < SOFTMAX_TOL
        });
        bad += usize::from(!ok);
    }
    if bad > 0 {
        failures.push(format!("softmax {bad}"));
    }

    let width = 8;
    let (sf, sf_store) = sample_former(width, 2, 7);

    // m_g rows sum to one
    let mut bad = 0;
    for _ in 0..n {
        let (ns, nq) = (rng.random_range(1..7), rng.random_range(1..7));
        let s = TokenSequence::new(
            random_matrix(&mut rng, ns, width, 2.0),
            Origin::Support,
            ids(ns, 0),
        )
        .unwrap();
        let q = TokenSequence::new(
            random_matrix(&mut rng, nq, width, 2.0),
            Origin::Query,
            ids(nq, 100),
        )
        .unwrap();
        let (_, _, m_g) = sample_former_forward(&s, &q, &sf_store, &sf).unwrap();
        let ok = (0..nq).all(|j| {
            let row = m_g.values.row(j);
            row.iter().all(|v| *v >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < MG_ROW_SUM_TOL
        });
        bad += usize::from(!ok);
    }
    if bad > 0 {
        failures.push(format!("m_g row sums {bad}"));
    }

    // permutation equivariance of encoder, decoder self-attention, the full
    // stack's metric, and patchFormer
    let mut pf_store = ParamStore::new();
    let pf = PatchFormer::init(
        &mut pf_store,
        width,
        2,
        0.0,
        &mut ChaCha8Rng::seed_from_u64(8),
    )
    .unwrap();
    let (mut bad_enc, mut bad_dec, mut bad_full, mut bad_pf) = (0, 0, 0, 0);
    for _ in 0..n {
        let len = rng.random_range(2..7);
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(&mut rng);
        let x = random_matrix(&mut rng, len, width, 2.0);
        let xp = x.select_rows(&perm);

        let enc = |m: &DenseMatrix| {
            encode_support(
                &TokenSequence::new(m.clone(), Origin::Support, ids(len, 0)).unwrap(),
                &sf_store,
                &sf,
                0,
            )
            .unwrap()
            .tokens
        };
        bad_enc += usize::from(max_diff(&enc(&x).select_rows(&perm), &enc(&xp)) > EQUIVARIANCE_TOL);

        let dec = |m: &DenseMatrix| {
            decode_query_self(
                &TokenSequence::new(m.clone(), Origin::Query, ids(len, 0)).unwrap(),
                &sf_store,
                &sf,
                0,
            )
            .unwrap()
            .tokens
        };
        bad_dec += usize::from(max_diff(&dec(&x).select_rows(&perm), &dec(&xp)) > EQUIVARIANCE_TOL);

        let nq = rng.random_range(1..5);
        let q = random_matrix(&mut rng, nq, width, 2.0);
        let full = |s: &DenseMatrix| {
            let s = TokenSequence::new(s.clone(), Origin::Support, ids(len, 0)).unwrap();
            let q = TokenSequence::new(q.clone(), Origin::Query, ids(nq, 100)).unwrap();
            sample_former_forward(&s, &q, &sf_store, &sf).unwrap()
        };
        let (a, b) = (full(&x), full(&xp));
        let cols_permuted = DenseMatrix::from_fn(nq, len, |j, i| a.2.values[(j, perm[i])]);
        let ok = max_diff(&cols_permuted, &b.2.values) <= EQUIVARIANCE_TOL
            && max_diff(&a.1.tokens, &b.1.tokens) <= EQUIVARIANCE_TOL;
        bad_full += usize::from(!ok);

        let pt = |m: &DenseMatrix| {
            patch_transform(&PatchTokens::new(m.clone(), SampleId(0)), &pf_store, &pf)
                .unwrap()
                .tokens
        };
        bad_pf += usize::from(max_diff(&pt(&x).select_rows(&perm), &pt(&xp)) > EQUIVARIANCE_TOL);
    }
    for (name, b) in [
        ("encoder", bad_enc),
        ("decoder", bad_dec),
        ("support order", bad_full),
        ("patchformer", bad_pf),
    ] {
        if b > 0 {
            failures.push(format!("{name} equivariance {b}"));
        }
    }

    // fusion endpoints, classify invariance, contrastive monotonicity
    let (mut bad_fuse, mut bad_cls, mut bad_cl) = (0, 0, 0);
    for _ in 0..n {
        let ways = rng.random_range(2..6);
        let shots = rng.random_range(1..4);
        let nq = rng.random_range(1..6);
        let ns = ways * shots;
        let s_labels: Vec<usize> = (0..ns).map(|i| i % ways).collect();
        let q_labels: Vec<usize> = (0..nq).map(|_| rng.random_range(0..ways)).collect();
        let metric = |values: DenseMatrix, kind| {
            MetricMatrix::new(values, ids(nq, 100), ids(ns, 0), kind).unwrap()
        };
        let g = metric(
            softmax_rows(&random_matrix(&mut rng, nq, ns, 3.0)).unwrap(),
            MetricKind::Global,
        );
        let l = metric(random_matrix(&mut rng, nq, ns, 1.0), MetricKind::Local);
        let at = |lambda| {
            fuse_metric(
                &g,
                &l,
                &FusionConfig {
                    lambda,
                    global_normalize: false,
                },
            )
            .unwrap()
            .values
        };
        bad_fuse += usize::from(at(1.0) != g.values || at(0.0) != l.values);

        let agg = if rng.random_bool(0.5) {
            KShotAgg::Max
        } else {
            KShotAgg::Mean
        };
        let a = rng.random_range(0.1..10.0);
        let b = rng.random_range(-5.0..5.0);
        let shifted = metric(l.values.map(|v| a * v + b), MetricKind::Local);
        let classes = |m: &MetricMatrix| -> Vec<usize> {
            classify(m, &s_labels, ways, agg)
                .unwrap()
                .iter()
                .map(|p| p.class)
                .collect()
        };
        bad_cls += usize::from(classes(&l) != classes(&shifted));

        let mode = if rng.random_bool(0.5) {
            ContrastiveMode::Global
        } else {
            ContrastiveMode::PerQuery
        };
        let base = contrastive_loss(&g, &s_labels, &q_labels, mode).unwrap();
        let j = rng.random_range(0..nq);
        let i = rng.random_range(0..ns);
        let mut bumped = g.values.clone();
        bumped[(j, i)] += rng.random_range(0.05..1.0);
        let moved = contrastive_loss(
            &metric(bumped, MetricKind::Global),
            &s_labels,
            &q_labels,
            mode,
        )
        .unwrap();
        let positive = s_labels[i] == q_labels[j];
        bad_cl += usize::from(if positive {
            moved >= base
        } else {
            moved <= base
        });
    }
    for (name, b) in [
        ("fusion endpoints", bad_fuse),
        ("classify invariance", bad_cls),
        ("contrastive monotonicity", bad_cl),
    ] {
        if b > 0 {
            failures.push(format!("{name} {b}"));
        }
    }

    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < INVARIANT_BUDGET;
    verdict(
        1,
        "invariant suite",
        pass,
        format!(
            "{n} instances per property, failures: [{}], {:.1}s (budget {}s)",
            failures.join(", "),
            elapsed.as_secs_f64(),
            INVARIANT_BUDGET.as_secs()
        ),
    );
}

#[test]
fn criterion_2_transport_oracles() {
    let _lock = serial();
    let start = Instant::now();
    let report = run_selftest(EMD_INSTANCES, 2024, Execution::Parallel).unwrap();
    let elapsed = start.elapsed();
    let sizes_ok = report
        .cases
        .iter()
        .all(|c| (2..=8).contains(&c.n) && (c.oracle == OracleKind::BruteForce) == (c.n <= 6));
    let covers_all = (2..=8).all(|n| report.cases.iter().any(|c| c.n == n));
    let obj = report.max_objective_error();
    let res = report.max_residual();
    let pass = report.cases.len() == EMD_INSTANCES
        && sizes_ok
        && covers_all
        && obj <= EMD_OBJECTIVE_TOL
        && res < EMD_RESIDUAL_TOL
        && elapsed < EMD_BUDGET;
    verdict(
        2,
        "transport oracle equivalence",
        pass,
        format!(
            "{} instances, max objective error {obj:.2e} (tol {EMD_OBJECTIVE_TOL:.0e}), max residual {res:.2e} (tol {EMD_RESIDUAL_TOL:.0e}), {:.1}s",
            report.cases.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_3_gradient_check() {
    let _lock = serial();
    let start = Instant::now();
    let cfg = tiny_gradcheck_config();
    let shape_ok = (
        cfg.ways,
        cfg.shots,
        cfg.queries,
        cfg.cife_channels,
        cfg.synth_height,
        cfg.synth_width,
        cfg.sf_layers,
        cfg.sf_heads,
    ) == (3, 1, 2, 8, 2, 2, 1, 2)
        && cfg.alpha == 0.5
        && cfg.lambda == 0.5;
    let report = run_grad_check(&cfg, Execution::Parallel).unwrap();
    let elapsed = start.elapsed();
    let worst = report
        .worst
        .as_ref()
        .map(|w| w.param.clone())
        .unwrap_or_default();
    let pass = shape_ok && report.passed(GRADCHECK_TOL) && elapsed < GRADCHECK_BUDGET;
    verdict(
        3,
        "end-to-end gradient check",
        pass,
        format!(
            "{} entries, max rel error {:.2e} at {worst} (tol {GRADCHECK_TOL:.0e}), {:.1}s",
            report.entries_checked,
            report.max_rel_error,
            elapsed.as_secs_f64()
        ),
    );
}

struct Trained {
    cfg: RunConfig,
    data: Dataset,
    split: MetaSplit,
    model: Model,
    initial: ParamStore,
    store: ParamStore,
    train_time: Duration,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = desk_config();
        let (data, split) = prepare_data(&cfg).unwrap();
        let (model, initial) = init_model(&cfg, &data).unwrap();
        let mut store = initial.clone();
        let start = Instant::now();
        train(
            &model,
            &mut store,
            &data.view(&split.train).unwrap(),
            &TrainConfig::from_run(&cfg).unwrap(),
            Execution::Parallel,
            &mut std::io::sink(),
        )
        .unwrap();
        Trained {
            cfg,
            data,
            split,
            model,
            initial,
            store,
            train_time: start.elapsed(),
        }
    })
}

#[test]
fn criterion_4_training_sanity() {
    let _lock = serial();
    let start = Instant::now();
    let cfg = desk_config();
    let (data, split) = prepare_data(&cfg).unwrap();
    let oracle = nearest_centroid_accuracy(&data.full_view(), 5, ORACLE_TRIALS, 4);

    let spec = EpisodeSpec::new(5, 1, 15).unwrap();
    let test_view = data.view(&split.test).unwrap();
    let (model, initial) = init_model(&cfg, &data).unwrap();
    let untrained = evaluate(
        &model,
        &initial,
        &test_view,
        spec,
        UNTRAINED_EPISODES,
        41,
        Execution::Parallel,
    )
    .unwrap();

    let t = trained();
    assert_eq!(t.initial, initial);
    let result = evaluate(
        &t.model,
        &t.store,
        &t.data.view(&t.split.test).unwrap(),
        spec,
        TRAINED_EPISODES,
        42,
        Execution::Parallel,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let protocol = (cfg.ways, cfg.shots, cfg.queries) == (5, 1, 15) && cfg.epochs <= MAX_EPOCHS;
    let pass = protocol
        && oracle > ORACLE_MIN
        && result.mean >= TRAINED_MIN
        && (untrained.mean - CHANCE).abs() <= CHANCE_BAND
        && elapsed < TRAINING_BUDGET;
    verdict(
        4,
        "training sanity",
        pass,
        format!(
            "nearest-centroid oracle {oracle:.4} (> {ORACLE_MIN}), trained {:.4} +- {:.4} over {TRAINED_EPISODES} episodes after {} epochs (>= {TRAINED_MIN}), untrained {:.4} +- {:.4} over {UNTRAINED_EPISODES} (target {CHANCE} +- {CHANCE_BAND}), training {:.0}s, total {:.0}s",
            result.mean,
            result.ci95,
            cfg.epochs,
            untrained.mean,
            untrained.ci95,
            t.train_time.as_secs_f64(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_5_similarity_separation() {
    let _lock = serial();
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("trained.qsfc");
    let ckpt = Checkpoint::capture(
        &t.store,
        t.cfg.to_text(),
        t.cfg.epochs as u64,
        t.cfg.seed,
        0,
    );
    save_checkpoint(&ckpt_path, &ckpt).unwrap();
    let episodes = REPORT_EPISODES.to_string();
    let (code, stdout, stderr) = run_cli(&[
        "metric-report",
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
        "--episodes",
        &episodes,
    ]);

    let mut pos_count = 0;
    let mut neg_count = 0;
    let (mut mean_pos, mut mean_neg) = (f64::NAN, f64::NAN);
    for line in stdout.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        match fields.as_slice() {
            ["mean_positive", v] => mean_pos = v.parse().unwrap(),
            ["mean_negative", v] => mean_neg = v.parse().unwrap(),
            [_, _, p, n] => {
                pos_count += p.parse::<usize>().unwrap();
                neg_count += n.parse::<usize>().unwrap();
            }
            _ => {}
        }
    }
    let gap = mean_pos - mean_neg;
    let pass = code == 0
        && pos_count == REPORT_PAIRS
        && neg_count == REPORT_PAIRS
        && gap >= REPORT_MIN_GAP;
    verdict(
        5,
        "positive/negative separation",
        pass,
        format!(
            "exit {code}, {pos_count} positive and {neg_count} negative values, mean positive {mean_pos:.4}, mean negative {mean_neg:.4}, gap {gap:.4} (>= {REPORT_MIN_GAP}){}",
            if stderr.is_empty() { String::new() } else { format!(", stderr: {}", stderr.trim()) }
        ),
    );
}

/// The desk task with a schedule short enough to run many times.
fn short_config(dir: &Path) -> PathBuf {
    let mut cfg = desk_config();
    cfg.epochs = 2;
    cfg.episodes_per_epoch = 5;
    cfg.val_episodes = 20;
    cfg.sweep_lambdas = List(SWEEP_LAMBDAS.to_vec());
    cfg.sweep_layers = List(SWEEP_LAYERS.to_vec());
    cfg.sweep_epochs = 1;
    cfg.sweep_eval_episodes = 10;
    cfg.episodes_per_epoch = 5;
    let path = dir.join("short.cfg");
    std::fs::write(&path, cfg.to_text()).unwrap();
    path
}

#[test]
fn criterion_6_sensitivity_sweep() {
    let _lock = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = short_config(dir.path());
    let csv_path = dir.path().join("sweep.csv");
    let (code, _, stderr) = run_cli(&[
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(&csv_path).unwrap_or_default();
    let mut lines = csv.lines();
    let header_ok = lines.next() == Some("lambda,layers,accuracy,ci95");
    let rows: Vec<(f64, usize, f64)> = lines
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Some((
                f.first()?.parse().ok()?,
                f.get(1)?.parse().ok()?,
                f.get(2)?.parse().ok()?,
            ))
        })
        .collect();
    let expected: Vec<(f64, usize)> = SWEEP_LAMBDAS
        .iter()
        .flat_map(|&l| SWEEP_LAYERS.iter().map(move |&n| (l, n)))
        .collect();
    let grid_ok = rows.iter().map(|r| (r.0, r.1)).collect::<Vec<_>>() == expected;
    let acc_ok = rows.iter().all(|r| (0.0..=1.0).contains(&r.2));
    let pass = code == 0 && header_ok && grid_ok && acc_ok;
    verdict(
        6,
        "sensitivity sweep",
        pass,
        format!(
            "exit {code}, {} rows for a {}x{} grid, {:.0}s{}",
            rows.len(),
            SWEEP_LAMBDAS.len(),
            SWEEP_LAYERS.len(),
            start.elapsed().as_secs_f64(),
            if stderr.is_empty() {
                String::new()
            } else {
                format!(", stderr: {}", stderr.trim())
            }
        ),
    );
}

#[test]
fn criterion_7_determinism() {
    let _lock = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = short_config(dir.path());
    let mut outputs = Vec::new();
    // both runs share one output directory since it is echoed in the config
    let out = dir.path().join("run");
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&out);
        let (code, stdout, _) = run_cli(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        let read = |name: &str| std::fs::read(out.join(name)).unwrap_or_default();
        outputs.push((
            code,
            stdout,
            read("metrics.jsonl"),
            read("checkpoint.qsfc"),
            read("result.txt"),
        ));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    let logs_equal = a.0 == 0 && b.0 == 0 && !a.2.is_empty() && a.2 == b.2;
    let artifacts_equal = a.1 == b.1 && a.3 == b.3 && a.4 == b.4;

    // checkpoint round trip in-process
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let (data, split) = prepare_data(&cfg).unwrap();
    let (model, mut store) = init_model(&cfg, &data).unwrap();
    let summary = train(
        &model,
        &mut store,
        &data.view(&split.train).unwrap(),
        &TrainConfig::from_run(&cfg).unwrap(),
        Execution::Parallel,
        &mut std::io::sink(),
    )
    .unwrap();
    let spec = EpisodeSpec::new(cfg.ways, cfg.shots, cfg.queries).unwrap();
    let view = data.view(&split.test).unwrap();
    let before = evaluate(&model, &store, &view, spec, 50, 77, Execution::Parallel).unwrap();
    let path = dir.path().join("round.qsfc");
    save_checkpoint(
        &path,
        &Checkpoint::capture(
            &store,
            cfg.to_text(),
            cfg.epochs as u64,
            cfg.seed,
            summary.episodes_seen,
        ),
    )
    .unwrap();
    let (_, mut fresh) = init_model(&cfg, &data).unwrap();
    load_checkpoint(&path)
        .unwrap()
        .restore_into(&mut fresh)
        .unwrap();
    let after = evaluate(&model, &fresh, &view, spec, 50, 77, Execution::Parallel).unwrap();
    let round_trip =
        before.mean.to_bits() == after.mean.to_bits() && before.accuracies == after.accuracies;

    verdict(
        7,
        "determinism",
        logs_equal && artifacts_equal && round_trip,
        format!(
            "metrics logs identical: {logs_equal} ({} bytes), checkpoints and results identical: {artifacts_equal}, reloaded accuracy {:.6} vs {:.6} bit-exact: {round_trip}",
            a.2.len(),
            after.mean,
            before.mean
        ),
    );
}

#[test]
fn criterion_8_protocol_fidelity() {
    let _lock = serial();
    let mut notes = Vec::new();

    // episode counts and disjointness across many draws
    let cfg = desk_config();
    let (data, split) = prepare_data(&cfg).unwrap();
    let split_disjoint = split
        .train
        .iter()
        .all(|c| !split.val.contains(c) && !split.test.contains(c))
        && split.val.iter().all(|c| !split.test.contains(c));
    let view = data.view(&split.train).unwrap();
    let mut sampler_ok = true;
    for (k, (ways, shots, queries)) in [(5, 1, 15), (5, 5, 15), (3, 2, 4)]
        .into_iter()
        .cycle()
        .take(300)
        .enumerate()
    {
        let spec = EpisodeSpec::new(ways, shots, queries).unwrap();
        let ep = sample_episode(&view, spec, derive_seed(5, "protocol", k as u64)).unwrap();
        let s_ids = ep.support_ids();
        let q_ids = ep.query_ids();
        let mut all: Vec<_> = s_ids.iter().chain(&q_ids).collect();
        all.sort();
        all.dedup();
        let counts = s_ids.len() == ways * shots && q_ids.len() == ways * queries;
        let per_class = (0..ways).all(|c| {
            ep.support_labels().iter().filter(|&&l| l == c).count() == shots
                && ep.query_labels().iter().filter(|&&l| l == c).count() == queries
        });
        let in_split = ep
            .support
            .iter()
            .chain(&ep.query)
            .all(|s| split.train.contains(&s.class));
        sampler_ok &= counts
            && per_class
            && in_split
            && all.len() == s_ids.len() + q_ids.len()
            && ep.validate().is_ok();
    }
    notes.push(format!(
        "sampler {sampler_ok}, split disjoint {split_disjoint}"
    ));

    // hand-computed interval: values 0.6, 0.8, 0.8, 1.0
    // mean 0.8, sample variance 0.08 / 3, s = 0.163299..., 1.96 s / 2 = 0.160033...
    let (mean, ci) = mean_ci(&[0.6, 0.8, 0.8, 1.0]).unwrap();
    let ci_ok = (mean - 0.8).abs() < 1e-12 && (ci - 0.160_033_329_169_2).abs() < 1e-9;
    notes.push(format!("ci {mean:.4} +- {ci:.6}"));

    // evaluation protocol sizes on a tiny model
    let defaults = RunConfig::default();
    let sizes_ok = defaults.val_episodes == 1000 && defaults.test_episodes == 5000;
    let mut tiny = tiny_gradcheck_config();
    tiny.synth_classes = 20;
    tiny.synth_samples_per_class = 16;
    tiny.split_ratios = List(vec![10, 5, 5]);
    let (tdata, tsplit) = prepare_data(&tiny).unwrap();
    let (tmodel, tstore) = init_model(&tiny, &tdata).unwrap();
    let spec = EpisodeSpec::new(5, 1, 15).unwrap();
    let mut eval_ok = sizes_ok;
    for (n, classes) in [
        (defaults.val_episodes, &tsplit.val),
        (defaults.test_episodes, &tsplit.test),
    ] {
        let res = evaluate(
            &tmodel,
            &tstore,
            &tdata.view(classes).unwrap(),
            spec,
            n,
            9,
            Execution::Parallel,
        )
        .unwrap();
        let m = res.accuracies.iter().sum::<f64>() / n as f64;
        let var = res
            .accuracies
            .iter()
            .map(|a| (a - m) * (a - m))
            .sum::<f64>()
            / (n - 1) as f64;
        let expected = 1.96 * var.sqrt() / (n as f64).sqrt();
        eval_ok &= res.accuracies.len() == n
            && (res.mean - m).abs() < 1e-12
            && (res.ci95 - expected).abs() < 1e-12;
        notes.push(format!("{n} episodes {:.4} +- {:.4}", res.mean, res.ci95));
    }

    verdict(
        8,
        "protocol fidelity",
        sampler_ok && split_disjoint && ci_ok && eval_ok,
        notes.join(", "),
    );
}
