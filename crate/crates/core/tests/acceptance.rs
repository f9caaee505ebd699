//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! `cargo test -p uanet --test acceptance -- 2 3 7` runs a subset.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uanet::gradcheck::suite::{run_suite, SuiteOptions};
use uanet::io::encode_archive;
use uanet::metrics::{confusion, Confusion};
use uanet::model::{
    pigm_forward, rank_maps, ura, EncoderConfig, FusionCase, FusionLevel, NetConfig, PigmMode, UaNet, UraFormula,
};
use uanet::params::ParamStore;
use uanet::synth::{generate_dataset, split_even_odd, Scene, SceneSpec};
use uanet::train::{evaluate, format_log, train, Control, LevelEval, OptimConfig, TrainOptions};
use uanet::{seed, Exec, Graph, Result, Tensor};

const SEEDS: [u64; 3] = [1, 2, 3];

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

// ---------------------------------------------------------------- 1

fn gradient_oracle() -> Result<Outcome> {
    let start = Instant::now();
    let results = run_suite(&SuiteOptions::default())?;
    let elapsed = start.elapsed();
    let tol = 1e-4;
    let failing: Vec<String> = results
        .iter()
        .filter(|r| !r.report.passes(tol))
        .map(|r| format!("{}: {}", r.case, r.report))
        .collect();
    let worst = results
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .expect("suite is non-empty");
    let checked: usize = results.iter().map(|r| r.report.checked).sum();
    let skipped: usize = results.iter().map(|r| r.report.skipped).sum();
    for r in &results {
        println!("    {:<18} seeds {:>2}  {}", r.case.to_string(), r.seeds, r.report);
    }
    let fast = elapsed < Duration::from_secs(120);
    let detail = format!(
        "{} cases, {checked} coords ({skipped} at kinks), worst {} {:.2e} <= {tol:.0e}, {:.1}s < 120s{}",
        results.len(),
        worst.case,
        worst.report.max_rel_error,
        elapsed.as_secs_f64(),
        if failing.is_empty() {
            String::new()
        } else {
            format!("; failing: {}", failing.join(" | "))
        }
    );
    Ok(outcome(failing.is_empty() && fast, detail))
}

// ---------------------------------------------------------------- 2

/// Bucket table `[lo, hi)` (last row closed) -> rank.
const URA_TABLE: [(f64, f64, bool, u8); 6] = [
    (-0.5, 0.0, false, 0),
    (0.0, 0.1, false, 5),
    (0.1, 0.2, false, 4),
    (0.2, 0.3, false, 3),
    (0.3, 0.4, false, 2),
    (0.4, 0.5, true, 1),
];

fn table_rank(u: f64) -> u8 {
    URA_TABLE
        .iter()
        .find(|&&(lo, hi, closed, _)| lo <= u && (u < hi || (closed && u <= hi)))
        .map(|e| e.3)
        .expect("u in [-0.5, 0.5]")
}

fn ura_equivalence() -> Result<Outcome> {
    let n = 100_001;
    let logits: Vec<f64> = (0..n).map(|i| -12.0 + 24.0 * i as f64 / (n - 1) as f64).collect();
    let m = Tensor::<f64>::from_f64(&[1, 1, n], &logits)?;
    let ranks = rank_maps(&m, UraFormula::Prose)?;
    let mut mismatches = 0;
    for (i, &x) in logits.iter().enumerate() {
        let s = 1.0 / (1.0 + (-x).exp());
        if ranks.foreground[i] != table_rank(s - 0.5) || ranks.background[i] != table_rank(0.5 - s) {
            mismatches += 1;
        }
    }
    let floor_differs = [0.05, 0.45]
        .iter()
        .map(|&u| Ok((u, ura(u, UraFormula::Floor)?, ura(u, UraFormula::Prose)?)))
        .collect::<Result<Vec<_>>>()?;
    let diverges = floor_differs == vec![(0.05, 4, 5), (0.45, 0, 1)];
    Ok(outcome(
        mismatches == 0 && diverges,
        format!(
            "{mismatches} mismatches over {} rank pairs; floor vs prose at U=0.05: {} vs {}, at U=0.45: {} vs {}",
            2 * n,
            floor_differs[0].1,
            floor_differs[0].2,
            floor_differs[1].1,
            floor_differs[1].2
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn identity_degeneracies() -> Result<Outcome> {
    let mut pigm_ok = 0;
    let mut pigm_total = 0;
    for s in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (c, h) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let f = Tensor::from_fn(&[c, h, h], |_| rng.gen_range(-3.0..3.0));
        let m = Tensor::from_fn(&[1, h, h], |_| rng.gen_range(-8.0..8.0));
        for mode in PigmMode::ALL {
            let g = Graph::<f64>::new();
            let (fv, mv) = (g.constant(f.clone()), g.constant(m.clone()));
            let zero = g.constant(Tensor::scalar(0.0));
            let out = pigm_forward(&g, fv, mv, zero, zero, mode)?;
            pigm_total += 1;
            if bits(&g.value(out)) == bits(&f) {
                pigm_ok += 1;
            }
        }
    }

    let mut store = ParamStore::<f64>::new();
    let level = FusionLevel::new(
        "u",
        FusionCase::Concat,
        3,
        3,
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(7),
    )?;
    let run = |m: Tensor<f64>| -> Result<(Vec<u64>, Vec<u64>)> {
        let g = Graph::new();
        let p = store.bind(&g);
        let gi = g.constant(Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.37).sin()));
        let fi = g.constant(Tensor::from_fn(&[3, 8, 8], |i| (i as f64 * 0.11).cos()));
        let mi = g.constant(m);
        let (gn, mn) = level.fuse(&g, &p, gi, fi, mi, UraFormula::Prose)?;
        let out = (bits(&g.value(gn)), bits(&g.value(mn)));
        Ok(out)
    };
    let reference = run(Tensor::zeros(&[1, 4, 4]))?;
    let mut case1_ok = 0;
    for s in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
        let scale = 10f64.powi(rng.gen_range(-3..4));
        let m = Tensor::from_fn(&[1, 4, 4], |_| scale * rng.gen_range(-1.0..1.0));
        if run(m)? == reference {
            case1_ok += 1;
        }
    }
    Ok(outcome(
        pigm_ok == pigm_total && case1_ok == 20,
        format!("alpha=beta=0 identity {pigm_ok}/{pigm_total} bit-exact; case 1 invariant to M in {case1_ok}/20 perturbations"),
    ))
}

// ---------------------------------------------------------------- training helpers

fn toy_encoder() -> EncoderConfig {
    EncoderConfig::default()
}

fn net_for(uafm: Option<FusionCase>, pigm: PigmMode) -> NetConfig {
    NetConfig {
        encoder: toy_encoder(),
        pigm,
        uafm,
        ura: UraFormula::Prose,
    }
}

fn init(cfg: &NetConfig, run_seed: u64) -> Result<(UaNet, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let net = UaNet::new(cfg, &mut store, &mut seed::rng(run_seed, "init"))?;
    Ok((net, store))
}

fn final_level(evals: &[LevelEval], level: usize) -> &LevelEval {
    evals.iter().find(|e| e.level == level).expect("level evaluated")
}

// ---------------------------------------------------------------- 4

fn overfit() -> Result<Outcome> {
    let spec = SceneSpec::default();
    let budget = Duration::from_secs(600);
    let mut lines = Vec::new();
    let mut ok = 0;
    for s in SEEDS {
        let scenes: Vec<Scene<f32>> = generate_dataset(&spec, seed::derive(s, "data"), 8, Exec::default())?;
        let (net, mut store) = init(&NetConfig::default(), s)?;
        let mut opts = TrainOptions::new(
            OptimConfig {
                steps: 500,
                batch_size: 4,
                weight_decay: 0.0,
                ..OptimConfig::default()
            },
            s,
        );
        opts.augment = false;
        let start = Instant::now();
        let mut reached = None;
        let mut best = 0.0f64;
        train(&net, &mut store, &scenes, &opts, |step, st| {
            if (step + 1) % 10 != 0 {
                return Control::Continue;
            }
            let iou = evaluate(&net, st, &scenes, Exec::default())
                .map(|e| final_level(&e, 1).confusion.iou())
                .unwrap_or(0.0);
            best = best.max(iou);
            if iou >= 0.95 {
                reached = Some(step + 1);
                Control::Stop
            } else {
                Control::Continue
            }
        })?;
        let elapsed = start.elapsed();
        let pass = reached.is_some() && elapsed < budget;
        ok += pass as usize;
        lines.push(match reached {
            Some(n) => format!("seed {s}: IoU(M1) >= 0.95 at step {n} in {:.0}s", elapsed.as_secs_f64()),
            None => format!(
                "seed {s}: best IoU(M1) {best:.4} after 500 steps, {:.0}s",
                elapsed.as_secs_f64()
            ),
        });
    }
    Ok(outcome(ok >= 2, format!("{ok}/3 seeds; {}", lines.join("; "))))
}

// ---------------------------------------------------------------- 5 and 6

const HELD_OUT_STEPS: usize = 400;

struct HeldOut {
    seed: u64,
    baseline: Vec<LevelEval>,
    uafm: Vec<LevelEval>,
    full: Vec<LevelEval>,
}

fn held_out_runs() -> Result<Vec<HeldOut>> {
    let spec = SceneSpec::default();
    let mut out = Vec::new();
    for s in SEEDS {
        let all: Vec<Scene<f32>> = generate_dataset(&spec, seed::derive(s, "data"), 128, Exec::default())?;
        let (train_set, mut val) = split_even_odd(all);
        val.truncate(32);
        let mut evals = Vec::new();
        for cfg in [
            NetConfig::baseline(toy_encoder()),
            net_for(Some(FusionCase::Full), PigmMode::Off),
            net_for(Some(FusionCase::Full), PigmMode::SpatialChannel),
        ] {
            let start = Instant::now();
            let (net, mut store) = init(&cfg, s)?;
            let opts = TrainOptions::new(
                OptimConfig {
                    steps: HELD_OUT_STEPS,
                    batch_size: 4,
                    ..OptimConfig::default()
                },
                s,
            );
            train(&net, &mut store, &train_set, &opts, |_, _| Control::Continue)?;
            let e = evaluate(&net, &store, &val, Exec::default())?;
            println!(
                "    seed {s} {:<22} val IoU(M1) {:.4}  IoU(M5) {:.4}  ({:.0}s)",
                cfg.label(),
                final_level(&e, 1).confusion.iou(),
                final_level(&e, 5).confusion.iou(),
                start.elapsed().as_secs_f64()
            );
            evals.push(e);
        }
        let full = evals.pop().unwrap();
        let uafm = evals.pop().unwrap();
        let baseline = evals.pop().unwrap();
        out.push(HeldOut {
            seed: s,
            baseline,
            uafm,
            full,
        });
    }
    Ok(out)
}

fn cascade_improvement(runs: &[HeldOut]) -> Outcome {
    let mut ok = 0;
    let mut lines = Vec::new();
    for r in runs {
        let (m1, m5) = (final_level(&r.full, 1), final_level(&r.full, 5));
        let pass = m1.confusion.iou() >= m5.confusion.iou() && m1.mean_uncertainty <= m5.mean_uncertainty;
        ok += pass as usize;
        lines.push(format!(
            "seed {}: IoU M5 {:.4} -> M1 {:.4}, uncertainty M5 {:.4} -> M1 {:.4}",
            r.seed,
            m5.confusion.iou(),
            m1.confusion.iou(),
            m5.mean_uncertainty,
            m1.mean_uncertainty
        ));
    }
    outcome(ok >= 2, format!("{ok}/3 seeds; {}", lines.join("; ")))
}

fn ablation_direction(runs: &[HeldOut]) -> Outcome {
    let mut ok = 0;
    let mut lines = Vec::new();
    for r in runs {
        let iou = |e: &[LevelEval]| final_level(e, 1).confusion.iou();
        let (b, u, f) = (iou(&r.baseline), iou(&r.uafm), iou(&r.full));
        let pass = b <= u && u <= f;
        ok += pass as usize;
        lines.push(format!(
            "seed {}: baseline {b:.4}, +uafm {u:.4}, +uafm+pigm {f:.4}",
            r.seed
        ));
    }
    outcome(ok >= 2, format!("{ok}/3 seeds; {}", lines.join("; ")))
}

// ---------------------------------------------------------------- 7

fn metrics_exactness() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut exact = 0;
    let mut identity_worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let density = rng.gen_range(0.0..1.0);
        let logits = Tensor::<f64>::from_fn(&[1, h, w], |_| match rng.gen_range(0..10) {
            0 => 0.0,
            _ => rng.gen_range(0.001..6.0) * if rng.gen_bool(density) { 1.0 } else { -1.0 },
        });
        let gt = Tensor::<f64>::from_fn(&[1, h, w], |_| rng.gen_bool(density) as u8 as f64);

        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let prob = 1.0 / (1.0 + (-logits.data()[i]).exp());
                let pred = prob >= 0.5;
                let truth = gt.data()[i] == 1.0;
                match (pred, truth) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
        }
        let c = confusion(&logits, &gt)?;
        let frac = |n: u64, d: u64, both_empty: bool| {
            if d > 0 {
                n as f64 / d as f64
            } else if both_empty {
                1.0
            } else {
                0.0
            }
        };
        let empty = tp + fp + fn_ == 0;
        let oracle = [
            frac(tp, tp + fp + fn_, empty),
            frac(2 * tp, 2 * tp + fp + fn_, empty),
            frac(tp, tp + fp, empty),
            frac(tp, tp + fn_, empty),
        ];
        let s = c.scores();
        if c == (Confusion { tp, fp, fn_, tn }) && [s.iou, s.f1, s.precision, s.recall] == oracle {
            exact += 1;
        }
        if tp + fp + fn_ > 0 {
            identity_worst = identity_worst.max((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs());
        }
    }
    Ok(outcome(
        exact == 100 && identity_worst <= 1e-12,
        format!("{exact}/100 cases exact; max |F1 - 2 IoU/(1+IoU)| = {identity_worst:.1e}"),
    ))
}

// ---------------------------------------------------------------- 8

fn determinism() -> Result<Outcome> {
    let spec = SceneSpec::default();
    let scenes: Vec<Scene<f32>> = generate_dataset(&spec, 5, 8, Exec::Sequential)?;
    let run = |exec: Exec| -> Result<(String, Vec<u8>)> {
        let (net, mut store) = init(&NetConfig::default(), 11)?;
        let mut opts = TrainOptions::new(
            OptimConfig {
                steps: 10,
                batch_size: 4,
                ..OptimConfig::default()
            },
            11,
        );
        opts.exec = exec;
        let log = train(&net, &mut store, &scenes, &opts, |_, _| Control::Continue)?;
        Ok((format_log(&log), encode_archive(&store.to_named())?))
    };
    let a = run(Exec::Sequential)?;
    let b = run(Exec::Sequential)?;
    let p = run(Exec::Parallel)?;
    let same = a == b;
    Ok(outcome(
        same,
        format!(
            "single-threaded logs {} and checkpoints {} ({} log bytes, {} checkpoint bytes); parallel run {}",
            if a.0 == b.0 { "identical" } else { "DIFFER" },
            if a.1 == b.1 { "identical" } else { "DIFFER" },
            a.0.len(),
            a.1.len(),
            if a == p { "also identical" } else { "differs" }
        ),
    ))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    uanet::parallel::init_from_env();
    let selected: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u8| selected.is_empty() || selected.contains(&n);

    let mut results: Vec<(u8, &str, Result<Outcome>)> = Vec::new();
    let mut report = |n: u8, name: &'static str, r: Result<Outcome>| {
        match &r {
            Ok(o) => println!(
                "criterion {n} {name}: {} ({})",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            ),
            Err(e) => println!("criterion {n} {name}: FAIL (error: {e})"),
        }
        results.push((n, name, r));
    };

    if want(1) {
        report(1, "gradient oracle suite", gradient_oracle());
    }
    if want(2) {
        report(2, "URA equivalence", ura_equivalence());
    }
    if want(3) {
        report(3, "identity degeneracies", identity_degeneracies());
    }
    if want(7) {
        report(7, "metrics exactness", metrics_exactness());
    }
    if want(8) {
        report(8, "determinism", determinism());
    }
    if want(4) {
        report(4, "overfit 8 scenes", overfit());
    }
    if want(5) || want(6) {
        match held_out_runs() {
            Ok(runs) => {
                if want(5) {
                    report(5, "cascade improvement", Ok(cascade_improvement(&runs)));
                }
                if want(6) {
                    report(6, "ablation direction", Ok(ablation_direction(&runs)));
                }
            }
            Err(e) => {
                let msg = e.to_string();
                for (n, name) in [(5, "cascade improvement"), (6, "ablation direction")] {
                    if want(n) {
                        report(n, name, Err(uanet::TensorError::Contract(msg.clone())));
                    }
                }
            }
        }
    }

    let failed: Vec<u8> = results
        .iter()
        .filter(|(_, _, r)| !matches!(r, Ok(o) if o.pass))
        .map(|(n, _, _)| *n)
        .collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failed {failed:?}")
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
