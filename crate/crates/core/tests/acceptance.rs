//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion and exits nonzero if any fails.
//!
//! Runs without the libtest harness so the allocation counter below only
//! sees one computation at a time.

use std::alloc::{GlobalAlloc, Layout, System};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use dnode_core::adjoint::{self, Frozen};
use dnode_core::cli::{self, EmbeddingsArgs, EvaluateArgs, ForecastArgs, SolverArgs, SynthArgs, TrainArgs};
use dnode_core::data::{self, reference, TimeScale, INDICATORS};
use dnode_core::model::PovertyModel;
use dnode_core::odeint::{self, SolverConfig};
use dnode_core::params::{Init, ParamLayout};
use dnode_core::selfcheck::{self, MlpDynamics};
use dnode_core::train::{adam_step, cosine_lr, moving_average, AdamState, TrainConfig};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Peak live bytes above the starting level while `f` runs.
fn peak_bytes<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    (out, PEAK.load(Ordering::Relaxed) - base)
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn solver_accuracy() -> Outcome {
    let cfg = SolverConfig::with_tolerances(1e-3, 1e-4);
    let decay = |_: f64, z: &[f64]| z.iter().map(|x| -x).collect::<Vec<_>>();
    let mut best = Duration::MAX;
    let mut z1 = 0.0;
    for _ in 0..5 {
        let start = Instant::now();
        let sol = odeint::integrate(&decay, &[1.0], 0.0, 1.0, &cfg).expect("solve");
        best = best.min(start.elapsed());
        z1 = sol.last()[0];
    }
    let err = rel(z1, (-1f64).exp());
    outcome(
        err < 1e-3 && best < Duration::from_millis(10),
        format!("rel error {err:.3e} (< 1e-3), runtime {best:?} (< 10 ms)"),
    )
}

fn solver_order() -> Outcome {
    let growth = |_: f64, z: &[f64]| z.to_vec();
    let h = 0.1;
    let big = odeint::dopri5_step(&growth, 0.0, &[1.0], h).expect("step");
    let half = odeint::dopri5_step(&growth, 0.0, &[1.0], h / 2.0).expect("step");
    let ratio = big.error[0] / half.error[0];
    let global = |h: f64| {
        let mut z = vec![1.0];
        let n = (1.0 / h).round() as usize;
        for k in 0..n {
            z = odeint::dopri5_step(&growth, k as f64 * h, &z, h).expect("step").z_next;
        }
        z[0] - 1f64.exp()
    };
    let fixed = global(h) / global(h / 2.0);
    outcome(
        (24.0..=40.0).contains(&ratio),
        format!("step error estimate ratio {ratio:.3} in [24, 40]; fixed-step global ratio {fixed:.3}"),
    )
}

fn adjoint_closed_form() -> Outcome {
    let row = selfcheck::closed_form(0.5, false).expect("closed form");
    // same problem at the default tolerances, for information
    let f = selfcheck::ScalarLinear::new(0.5);
    let cfg = SolverConfig::default();
    let z1 = odeint::integrate(&Frozen(&f), &[1.0], 0.0, 1.0, &cfg).expect("solve").into_last();
    let g = adjoint::adjoint_backward(&f, &z1, &[1.0], 1.0, 0.0, &cfg).expect("adjoint");
    outcome(
        row.error < 1e-4,
        format!(
            "dL/dθ = {:.8} vs e^0.5 = {:.8}, rel {:.3e} (< 1e-4); default tolerances give rel {:.3e}",
            row.value,
            0.5f64.exp(),
            row.error,
            rel(g.dtheta[0], 0.5f64.exp())
        ),
    )
}

const PARITY_STEPS: usize = 200_000;

fn adjoint_oracles() -> Outcome {
    let start = Instant::now();
    let fd = selfcheck::adjoint_vs_fd(0, false).expect("fd check");
    let bptt = selfcheck::adjoint_vs_bptt(0, PARITY_STEPS, 1e-6, false).expect("bptt check");
    let elapsed = start.elapsed();
    outcome(
        fd.passed() && bptt.passed() && elapsed < Duration::from_secs(5),
        format!(
            "vs finite differences {:.3e} (< 1e-3), vs BPTT at {PARITY_STEPS} Euler steps {:.3e} (< 1e-6), runtime {elapsed:.2?} (< 5 s)",
            fd.error, bptt.error
        ),
    )
}

fn memory_contract() -> Outcome {
    let f = MlpDynamics::random(3, 8, 0);
    let z0 = [0.3, -0.2, 0.5];
    let cot = [1.0, -0.5, 0.25];
    let adjoint_peak = |n: usize| {
        let cfg = SolverConfig::euler(n);
        let z1 = odeint::integrate(&Frozen(&f), &z0, 0.0, 1.0, &cfg).expect("solve").into_last();
        peak_bytes(|| adjoint::adjoint_backward(&f, &z1, &cot, 1.0, 0.0, &cfg).expect("adjoint")).1
    };
    let bptt_peak = |n: usize| {
        peak_bytes(|| adjoint::bptt_gradients(&f, &z0, 0.0, 1.0, n, &cot, n).expect("bptt")).1
    };
    let (a10, a1000) = (adjoint_peak(10), adjoint_peak(1000));
    let (b10, b1000) = (bptt_peak(10), bptt_peak(1000));
    let ratio = a1000 as f64 / a10 as f64;
    outcome(
        ratio <= 2.0,
        format!(
            "adjoint peak {a10} B at 10 steps, {a1000} B at 1000 (ratio {ratio:.2}, <= 2); BPTT {b10} B -> {b1000} B"
        ),
    )
}

fn end_to_end_gradcheck() -> Outcome {
    let rows = selfcheck::model_gradcheck(0, false).expect("gradcheck");
    let detail: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {:.2e}", r.name.trim_start_matches("model_"), r.error))
        .collect();
    outcome(
        rows.iter().all(|r| r.passed()),
        format!("{} (each < 1e-3)", detail.join(", ")),
    )
}

fn read_losses(path: &Path) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).expect("train log");
    r.records()
        .map(|rec| rec.expect("record")[1].parse().expect("loss"))
        .collect()
}

struct Run {
    dir: tempfile::TempDir,
    train_time: Duration,
}

fn full_run(panel: &Path) -> Run {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().to_path_buf();
    let start = Instant::now();
    cli::cmd_train(
        &TrainArgs {
            data: panel.to_path_buf(),
            checkpoint: None,
            out: out.clone(),
            seed: 0,
            epochs: 1000,
            lr: 1e-3,
            solver: SolverArgs { rtol: None, atol: None },
            reverse_encoder: false,
            decoupled_wd: false,
        },
        &mut std::io::sink(),
    )
    .expect("train");
    let train_time = start.elapsed();
    let checkpoint = out.join("model.ckpt");
    cli::cmd_forecast(&ForecastArgs {
        data: panel.to_path_buf(),
        checkpoint: checkpoint.clone(),
        years: vec![2020, 2026, 2030],
        out: out.clone(),
        solver: SolverArgs { rtol: None, atol: None },
    })
    .expect("forecast");
    cli::cmd_evaluate(&EvaluateArgs {
        data: panel.to_path_buf(),
        checkpoint: checkpoint.clone(),
        out: out.clone(),
        solver: SolverArgs { rtol: None, atol: None },
    })
    .expect("evaluate");
    cli::cmd_embeddings(&EmbeddingsArgs {
        checkpoint,
        out,
    })
    .expect("embeddings");
    Run { dir, train_time }
}

fn training_convergence(run: &Run) -> Outcome {
    let losses = read_losses(&run.dir.path().join("train_log.csv"));
    let last = *losses.last().expect("nonempty log");
    let ma = moving_average(&losses[100..], 50);
    let rises = ma.windows(2).filter(|w| w[1] > w[0]).count();
    outcome(
        losses.len() == 1000
            && last < 1e-3
            && rises == 0
            && run.train_time < Duration::from_secs(600),
        format!(
            "epoch-1000 loss {last:.3e} (< 1e-3), moving-average rises after epoch 100: {rises}, train time {:.1?} (< 10 min)",
            run.train_time
        ),
    )
}

fn output_conformance(run: &Run, panel_path: &Path) -> Outcome {
    let dir = run.dir.path();
    let header = format!("district,{}", INDICATORS.join(","));
    let mut problems = Vec::new();
    for year in [2026, 2030] {
        let text = std::fs::read_to_string(dir.join(format!("forecast_{year}.csv"))).expect("forecast");
        let lines: Vec<&str> = text.lines().collect();
        if lines[0] != header {
            problems.push(format!("{year}: header `{}`", lines[0]));
        }
        if lines.len() != 1 + reference::DISTRICTS.len() {
            problems.push(format!("{year}: {} data rows", lines.len() - 1));
        }
        for (line, name) in lines[1..].iter().zip(reference::DISTRICTS) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells[0] != name || cells.len() != 7 {
                problems.push(format!("{year}: row `{line}`"));
            }
            for c in &cells[1..] {
                let v: f64 = c.parse().unwrap_or(f64::NAN);
                let three_decimals = c.split('.').nth(1).map(str::len) == Some(3);
                if !(0.0..=1.0).contains(&v) || !three_decimals {
                    problems.push(format!("{year}: value `{c}`"));
                }
            }
        }
    }

    // 2020 forecast against the fitted reconstruction at t = 1
    let panel = data::load_panel(panel_path).expect("panel");
    let (model, meta) = PovertyModel::load(&dir.join("model.ckpt")).expect("checkpoint");
    let report = model.batch_loss(&panel, &meta.time_scale, &meta.solver).expect("loss");
    let full = std::fs::read_to_string(dir.join("forecast_2020_full.csv")).expect("sidecar");
    let (nt, ni) = (panel.n_times(), panel.n_indicators());
    let mut mismatches = 0;
    for (d, line) in full.lines().skip(1).enumerate() {
        for (k, cell) in line.split(',').skip(1).enumerate() {
            let forecast: f64 = cell.parse().expect("value");
            let fitted = report.predictions[(d * nt + (nt - 1)) * ni + k];
            if forecast.to_bits() != fitted.to_bits() {
                mismatches += 1;
            }
        }
    }
    let t_last = TimeScale::default().normalize(2020.0);
    outcome(
        problems.is_empty() && mismatches == 0 && t_last == 1.0,
        format!(
            "2026/2030 tables: 30 rows x 7 columns, 3-decimal values in [0, 1]{}; 2020 vs t=1 reconstruction: {mismatches} bit mismatches",
            if problems.is_empty() {
                String::new()
            } else {
                format!(" VIOLATIONS {problems:?}")
            }
        ),
    )
}

fn schedule_and_optimizer() -> Outcome {
    let cfg = TrainConfig::default();
    let ends = (cosine_lr(&cfg, 0), cosine_lr(&cfg, cfg.epochs), cosine_lr(&cfg, cfg.epochs / 2));
    let exact = ends == (1e-3, 0.0, 5e-4);

    let mut layout = ParamLayout::new();
    layout.push("theta", &[4], Init::Zeros);
    let grads = [10.0, -0.3, 2.5, 0.07];
    let step = |scale: f64| {
        let mut state = AdamState::new(4, &cfg);
        let mut p = vec![0.5, -1.0, 0.0, 2.0];
        let start = p.clone();
        let g: Vec<f64> = grads.iter().map(|g| g * scale).collect();
        adam_step(&mut state, &layout, &mut p, &g, 1e-3, 0.0).expect("adam");
        p.iter().zip(&start).map(|(a, b)| a - b).collect::<Vec<_>>()
    };
    let (small, large) = (step(1.0), step(1000.0));
    let worst = small
        .iter()
        .zip(&large)
        .map(|(a, b)| rel(*b, *a))
        .fold(0.0, f64::max);
    outcome(
        exact && worst < 1e-6,
        format!("lr(0), lr(T), lr(T/2) = {ends:?}; first Adam step change under 1000x gradients {worst:.3e} (< 1e-6)"),
    )
}

fn determinism(a: &Run, b: &Run) -> Outcome {
    let files = [
        "model.ckpt",
        "model.config.json",
        "forecast_2020.csv",
        "forecast_2020_full.csv",
        "forecast_2026.csv",
        "forecast_2026_full.csv",
        "forecast_2030.csv",
        "forecast_2030_full.csv",
        "rmse.csv",
        "embeddings_pca.csv",
    ];
    let mut differing: Vec<String> = files
        .iter()
        .filter(|f| {
            std::fs::read(a.dir.path().join(f)).expect("artifact")
                != std::fs::read(b.dir.path().join(f)).expect("artifact")
        })
        .map(|f| f.to_string())
        .collect();
    // wall_ms is a timing column; everything else in the log must match
    let strip = |dir: &Path| -> Vec<String> {
        std::fs::read_to_string(dir.join("train_log.csv"))
            .expect("log")
            .lines()
            .map(|l| l.rsplit_once(',').expect("four columns").0.to_string())
            .collect()
    };
    if strip(a.dir.path()) != strip(b.dir.path()) {
        differing.push("train_log.csv".into());
    }
    outcome(
        differing.is_empty(),
        format!(
            "{} artifacts plus train_log.csv (epoch,loss,lr) compared byte for byte; differing: {differing:?}",
            files.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!(
            "criterion {n:>2} {name}: {} | {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };

    report(1, "solver accuracy", solver_accuracy());
    report(2, "solver order", solver_order());
    report(3, "adjoint closed form", adjoint_closed_form());
    report(4, "adjoint oracles", adjoint_oracles());
    report(5, "memory contract", memory_contract());
    report(6, "end-to-end gradcheck", end_to_end_gradcheck());

    let workdir = tempfile::tempdir().expect("tempdir");
    let panel = cli::cmd_synth(&SynthArgs {
        out: workdir.path().to_path_buf(),
        seed: 0,
        districts: 30,
    })
    .expect("synthetic panel");
    let first = full_run(&panel);
    report(7, "training convergence", training_convergence(&first));
    report(8, "output conformance", output_conformance(&first, &panel));
    report(9, "schedule and optimizer", schedule_and_optimizer());
    let second = full_run(&panel);
    report(10, "determinism", determinism(&first, &second));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria pass",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
