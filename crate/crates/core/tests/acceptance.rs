//! Acceptance criteria, one PASS/FAIL/BLOCKED line each.
//!
//! Run with `cargo test -p cpmr-core --test acceptance`.
//! Criterion 1 needs the public Garden log (amazon_csv format) at the path
//! in `CPMR_GARDEN_RAW`, and optionally a Video log in `CPMR_VIDEO_RAW`;
//! without them it reports BLOCKED.

mod common;

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use nalgebra::SymmetricEigen;
use rand::Rng;

use common::*;
use cpmr::data::{preprocess, Format, DEFAULT_K_CORE};
use cpmr::evaluation::{
    ablation_run, incremental_eval, mrr, synthetic_trend_dataset, window_sweep, EvalOptions, TrendSpec,
};
use cpmr::gradcheck::run_suite;
use cpmr::graph::{normalize_adjacency, BiAdjacency, EdgeStore, ALPHA0};
use cpmr::series::{evolve, GainAxis, Propagator};
use cpmr::tape::{sigmoid, softmax_rows};
use cpmr::training::{infonce_loss, train, TrainConfig};
use cpmr::{Checkpoint, Cpmr, Dataset, ModelConfig, Split, Tensor, Variant};

#[derive(Debug, PartialEq)]
enum Outcome {
    Pass,
    Fail,
    Blocked,
}

struct Line {
    id: u8,
    name: &'static str,
    outcome: Outcome,
    detail: String,
}

impl Line {
    fn check(id: u8, name: &'static str, ok: bool, detail: String) -> Self {
        Line {
            id,
            name,
            outcome: if ok { Outcome::Pass } else { Outcome::Fail },
            detail,
        }
    }

    fn print(&self) {
        let tag = match self.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Blocked => "BLOCKED",
        };
        println!("[{tag}] {}. {}: {}", self.id, self.name, self.detail);
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// 1. Garden end-to-end reproduction
// ---------------------------------------------------------------------------

fn garden() -> Line {
    const NAME: &str = "Garden end-to-end reproduction";
    let Some(path) = std::env::var_os("CPMR_GARDEN_RAW").map(PathBuf::from) else {
        return Line {
            id: 1,
            name: NAME,
            outcome: Outcome::Blocked,
            detail: "dataset unavailable (set CPMR_GARDEN_RAW to the raw Garden log)".into(),
        };
    };
    let load = |p: &PathBuf| -> Dataset {
        preprocess(BufReader::new(File::open(p).expect("raw log opens")), Format::AmazonCsv, DEFAULT_K_CORE)
            .expect("raw log preprocesses")
    };
    let ds = load(&path);
    let env_f64 = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let model = ModelConfig {
        d: 128,
        s_days: 5,
        ..ModelConfig::default()
    };
    let (mut mrrs, mut recalls) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let cfg = TrainConfig {
            lr: env_f64("CPMR_GARDEN_LR", 1e-3),
            weight_decay: env_f64("CPMR_GARDEN_WD", 1e-4),
            seed,
            ..TrainConfig::default()
        };
        let report = ablation_run(&ds, Variant::Full, &model, &cfg).expect("Garden run completes");
        mrrs.push(report.mrr);
        recalls.push(report.recall_at_10);
    }
    let (m, r) = (mean(&mrrs), mean(&recalls));
    let mut detail = format!("{}; mean test MRR {m:.4} (≥ 0.072), Recall@10 {r:.4} (≥ 0.17)", ds.summary());
    if let Some(video) = std::env::var_os("CPMR_VIDEO_RAW").map(PathBuf::from) {
        let vds = load(&video);
        let one_epoch = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let cpmr = Cpmr::new(model.clone(), vds.n_users, vds.n_items).unwrap();
        let ok = train(&vds, &cpmr, &one_epoch).is_ok();
        detail.push_str(&format!("; Video one epoch: {}", if ok { "ok" } else { "error" }));
    }
    Line::check(1, NAME, m >= 0.072 && r >= 0.17, detail)
}

// ---------------------------------------------------------------------------
// 2. Evolution against the dense eigendecomposition
// ---------------------------------------------------------------------------

fn evolution_oracle() -> Line {
    let (mut worst_short, mut worst_long) = (0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let adj = random_normalized(&mut r, 50);
        let n = adj.rows();
        let d = r.random_range(1..=6);
        let gain: Vec<f64> = (0..n).map(|_| sigmoid(r.random_range(-3.0..3.0))).collect();
        let axis = if r.random_bool(0.5) { GainAxis::Columns } else { GainAxis::Rows };
        let x = random_tensor(&mut r, n, d);
        let e = random_tensor(&mut r, n, d);
        let op = Propagator {
            adj: &adj,
            gain: &gain,
            axis,
        };
        for (dt, worst) in [
            (r.random_range(0.0..=1.0), &mut worst_short),
            (r.random_range(1.0..=50.0), &mut worst_long),
        ] {
            let out = evolve(&x, &e, &op, dt, 6, ALPHA0).unwrap();
            let oracle = evolve_oracle(&sparse_dense(&adj), &gain, axis, &to_dense(&x), &to_dense(&e), dt);
            *worst = worst.max(rel_err(&to_dense(&out), &oracle));
        }
    }
    Line::check(
        2,
        "Evolution oracle equivalence",
        worst_short < 1e-6 && worst_long < 1e-3,
        format!("100 draws; max rel err {worst_short:.2e} (dt ≤ 1, < 1e-6), {worst_long:.2e} (dt ≤ 50, < 1e-3)"),
    )
}

// ---------------------------------------------------------------------------
// 3. Gradient suite
// ---------------------------------------------------------------------------

fn gradient_suite() -> Line {
    let report = run_suite(0).unwrap();
    let worst = report.checks.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    Line::check(
        3,
        "Gradient suite",
        report.passed(),
        format!(
            "{} checks incl. 4×4 step loss; max rel err {:.2e} ({}) < 1e-4",
            report.checks.len(),
            worst.max_rel_err,
            worst.name
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Analytic anchors
// ---------------------------------------------------------------------------

fn analytic_anchors() -> Line {
    // Eight negative users plus eight negative items, all scores equal.
    let infonce = (infonce_loss(0.0, &[0.0; 16]) - 17f64.ln()).abs();

    let single = sparse_dense(&normalize_adjacency(&BiAdjacency::from_pairs(1, 1, [(0, 0)])).matrix);
    let single_err = single.iter().map(|v| (v - 0.49).abs()).fold(0.0, f64::max);

    let mut r = rng(4);
    let adj = random_normalized(&mut r, 30);
    let gain = vec![0.5; adj.rows()];
    let x = random_tensor(&mut r, adj.rows(), 3);
    let e = random_tensor(&mut r, adj.rows(), 3);
    let op = Propagator {
        adj: &adj,
        gain: &gain,
        axis: GainAxis::Columns,
    };
    let identity = evolve(&x, &e, &op, 0.0, 6, ALPHA0).unwrap() == x;

    let logits = Tensor::from_fn(64, 4, |_, _| r.random_range(-30.0..30.0));
    let gates = softmax_rows(&logits);
    let gate_err = gates.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);

    let mut rho_max = 0.0f64;
    for seed in 0..50 {
        let mut g = rng(100 + seed);
        let (nu, ni, density) = (g.random_range(1..40), g.random_range(1..40), g.random_range(0.02..0.5));
        let b = random_biadjacency(&mut g, nu, ni, density);
        let dense = sparse_dense(&normalize_adjacency(&b).matrix);
        rho_max = rho_max.max(SymmetricEigen::new(dense).eigenvalues.amax());
    }
    let ok = infonce < 1e-12 && single_err < 1e-15 && identity && gate_err < 1e-12 && rho_max <= ALPHA0 + 1e-6;
    Line::check(
        4,
        "Analytic anchors",
        ok,
        format!(
            "|InfoNCE − ln 17| {infonce:.1e}; single-edge max |ã − 0.49| {single_err:.1e}; dt=0 identity {identity}; \
             gate row-sum err {gate_err:.1e}; max ρ(ã) {rho_max:.6} over 50 graphs"
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Graph-view oracles
// ---------------------------------------------------------------------------

fn graph_views() -> Line {
    const NU: usize = 300;
    const NI: usize = 200;
    const DAYS: u32 = 400;
    let log = random_log(&mut rng(11), NU, NI, DAYS, 5_000);
    let store = EdgeStore::new(&log, NU, NI).unwrap();
    let mut r = rng(12);
    let mut mismatches = 0;
    for _ in 0..1_000 {
        let day = r.random_range(0..DAYS + 5);
        let ok = match r.random_range(0..3) {
            0 => store.instant_biadjacency(day) == rescan(&log, NU, NI, |d| d == day),
            1 => store.history_biadjacency(day) == rescan(&log, NU, NI, |d| d < day),
            _ => {
                let s = r.random_range(1..=60);
                store.context_biadjacency(day, s) == rescan(&log, NU, NI, |d| d + s >= day && d < day)
            }
        };
        mismatches += usize::from(!ok);
    }
    let mut fifo_violations = 0;
    for s in [1, 5, 30] {
        let mut cursor = store.cursor(s);
        for day in store.days().collect::<Vec<_>>() {
            cursor.advance_to(day).unwrap();
            let ok = cursor.context() == rescan(&log, NU, NI, |d| d + s >= day && d < day)
                && cursor.history() == rescan(&log, NU, NI, |d| d < day);
            fifo_violations += usize::from(!ok);
        }
    }
    Line::check(
        5,
        "Graph-view oracles",
        mismatches == 0 && fifo_violations == 0,
        format!(
            "{} edges; 1000 random queries, {mismatches} mismatches; day-by-day context FIFO, {fifo_violations} violations",
            log.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Planted-structure behaviour
// ---------------------------------------------------------------------------

/// Settings of the planted-trend experiment.
fn trend_spec() -> TrendSpec {
    TrendSpec {
        n_days: 400,
        trend_window: 10,
        mix: 0.5,
        ..TrendSpec::default()
    }
}

fn trend_model() -> ModelConfig {
    ModelConfig {
        d: 16,
        s_days: 10,
        ..ModelConfig::default()
    }
}

fn trend_train(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        seed,
        ..TrainConfig::default()
    }
}

const S_GRID: [u64; 6] = [5, 10, 15, 20, 25, 30];

fn planted_structure() -> Line {
    let ds = synthetic_trend_dataset(&trend_spec()).unwrap();
    let seeds = [0u64, 1, 2];
    let run = |variant: Variant| -> Vec<f64> {
        seeds
            .iter()
            .map(|&seed| ablation_run(&ds, variant, &trend_model(), &trend_train(seed)).unwrap().mrr)
            .collect()
    };
    let full = run(Variant::Full);
    let wo_ctx = run(Variant::WoCtx);

    let mut sweep_means = vec![0.0; S_GRID.len()];
    for &seed in &seeds {
        let rows = window_sweep(&ds, &S_GRID, &trend_model(), &trend_train(seed)).unwrap();
        for (acc, row) in sweep_means.iter_mut().zip(&rows) {
            *acc += row.mrr / seeds.len() as f64;
        }
    }
    let best = (0..S_GRID.len()).max_by(|&a, &b| sweep_means[a].total_cmp(&sweep_means[b])).unwrap();
    let best_s = S_GRID[best];
    let planted = S_GRID.iter().position(|&s| s == 10).unwrap();
    let near = best.abs_diff(planted) <= 1;
    let beats = mean(&full) > mean(&wo_ctx);
    let sweep: Vec<String> = S_GRID
        .iter()
        .zip(&sweep_means)
        .map(|(s, m)| format!("{s}:{m:.4}"))
        .collect();
    Line::check(
        6,
        "Planted-structure behaviour",
        beats && near,
        format!(
            "full MRR {:.4} vs wo_ctx {:.4} (3 seeds); s sweep [{}] best s = {best_s} (planted 10)",
            mean(&full),
            mean(&wo_ctx),
            sweep.join(" ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Determinism and persistence
// ---------------------------------------------------------------------------

fn determinism() -> Line {
    let ds = synthetic_trend_dataset(&TrendSpec {
        n_users: 24,
        n_items: 16,
        n_days: 30,
        events_per_day: 10,
        seed: 4,
        ..TrendSpec::default()
    })
    .unwrap();
    let model = Cpmr::new(
        ModelConfig {
            d: 6,
            ..ModelConfig::default()
        },
        ds.n_users,
        ds.n_items,
    )
    .unwrap();
    let cfg = TrainConfig {
        lr: 5e-3,
        max_epochs: 3,
        n_tbptt: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(&ds, &model, &cfg).unwrap();
    let b = train(&ds, &model, &cfg).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let same_trajectory = bits(a.loss_trajectory()) == bits(b.loss_trajectory());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    let ckpt = Checkpoint {
        meta: Default::default(),
        params: a.params.clone(),
    };
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let round_trip = loaded == ckpt && loaded.params.digest() == a.params.digest();

    let options = EvalOptions::default();
    let before = incremental_eval(&ds, &model, &a.params, Split::Validation, &options).unwrap();
    let after = incremental_eval(&ds, &model, &loaded.params, Split::Validation, &options).unwrap();
    let replay = before == after && mrr(&before).unwrap().to_bits() == mrr(&after).unwrap().to_bits();
    Line::check(
        7,
        "Determinism & persistence",
        same_trajectory && round_trip && replay,
        format!(
            "{} segment losses bit-identical: {same_trajectory}; checkpoint round trip bit-exact: {round_trip}; \
             replayed validation MRR identical: {replay}",
            a.loss_trajectory().len()
        ),
    )
}

fn main() {
    let lines = [
        garden(),
        evolution_oracle(),
        gradient_suite(),
        analytic_anchors(),
        graph_views(),
        planted_structure(),
        determinism(),
    ];
    println!();
    for line in &lines {
        line.print();
    }
    let failed: Vec<u8> = lines.iter().filter(|l| l.outcome == Outcome::Fail).map(|l| l.id).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
