//! Acceptance run: one PASS/FAIL line per headline criterion.
//!
//! Everything runs inside a single test so the wall-time measurements are
//! not disturbed by other tests running in parallel.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use csca_cli::bench::{parse_grid, parse_list, run_bench, BenchOptions, GridPoint};
use csca_cli::commands::{self, EvalSplit, TrainArgs};
use csca_core::attention::{Linear1x1, NonLocalBlock, ProjectionSet, ScaBlock, ScaConfig};
use csca_core::cfa::CfaBlock;
use csca_core::metrics::{game, mae};
use csca_core::rng::{substream, StreamRng};
use csca_core::{Module, Tape, Tensor};
use csca_pipeline::train::{eval_csv, find_row};
use csca_pipeline::{DatasetSpec, FusionMode, StageConfig, TrainOptions};

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

fn check(name: &'static str, budget_s: u64, f: impl FnOnce() -> Result<String, String>) -> Outcome {
    let t0 = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let elapsed = t0.elapsed();
    let budget = Duration::from_secs(budget_s);
    Outcome {
        name,
        passed: passed && elapsed <= budget,
        detail,
        elapsed,
        budget,
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// FLOP ratio and wall-time

fn flop_ratio() -> Result<String, String> {
    let opts = BenchOptions {
        repeats: 0,
        ..BenchOptions::default()
    };
    let rep = run_bench(&opts).map_err(err)?;
    let mut checked = 0;
    for r in rep.rows.iter().filter(|r| r.kind == "sca" && r.skipped.is_none()) {
        let base = rep
            .rows
            .iter()
            .find(|b| b.kind == "nonlocal" && b.point == r.point)
            .and_then(|b| b.ledger)
            .ok_or("missing baseline row")?;
        let sca = r.ledger.ok_or("missing SCA ledger")?;
        ensure(base.attention_mults == sca.attention_mults * r.groups as u64, || {
            format!("{:?} G={}: {} vs {}", r.point, r.groups, base.attention_mults, sca.attention_mults)
        })?;
        checked += 1;
    }
    ensure(checked >= 15, || format!("only {checked} grid rows checked"))?;
    Ok(format!("exact ratio on {checked} grid rows"))
}

fn wall_time() -> Result<String, String> {
    let opts = BenchOptions {
        grid: parse_grid("32x64x64").map_err(err)?,
        groups: parse_list("1,2,4,8,16").map_err(err)?,
        repeats: 5,
        threads: 1,
        seed: 0,
    };
    let rep = run_bench(&opts).map_err(err)?;
    let rows = rep.sca_rows(GridPoint { c: 32, h: 64, w: 64 });
    let times: Vec<f64> = rows.iter().map(|r| r.wall_ms.unwrap_or(f64::NAN)).collect();
    let g8 = rows.iter().find(|r| r.groups == 8).and_then(|r| r.speedup).unwrap_or(0.0);
    let summary = format!(
        "medians ms G=1..16 {:?}, speedup at G=8 {g8:.2}x",
        times.iter().map(|t| (t * 10.0).round() / 10.0).collect::<Vec<_>>()
    );
    ensure(g8 >= 2.0, || format!("speedup below 2x; {summary}"))?;
    ensure(times.windows(2).all(|w| w[1] <= w[0]), || format!("not non-increasing; {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Equivalence oracles

fn randomize_biases<M: Module<f64>>(m: &mut M, rng: &mut StreamRng) {
    m.visit_params_mut("", &mut |name, p| {
        if name.ends_with("bias") {
            p.value = Tensor::uniform(p.value.shape(), -0.5, 0.5, rng);
        }
    });
}

fn channels(x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let n = x.shape()[1] * x.shape()[2];
    x.data().chunks(n).map(|c| c.to_vec()).collect()
}

fn linear_oracle(lin: &Linear1x1<f64>, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = &lin.weight.value;
    let b = lin.bias.value.data();
    (0..lin.out_channels())
        .map(|o| {
            (0..x[0].len())
                .map(|p| b[o] + (0..lin.in_channels()).map(|i| w.get(&[o, i]) * x[i][p]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// For every query i: softmax over j of scale·q_i·k_j, then the weighted sum of v_j.
fn attention_oracle(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    let (n, ce) = (q[0].len(), q.len());
    let mut z = vec![vec![0.0; n]; ce];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| scale * (0..ce).map(|c| q[c][i] * k[c][j]).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for c in 0..ce {
            z[c][i] = (0..n).map(|j| exps[j] / total * v[c][j]).sum();
        }
    }
    z
}

fn dense(q_proj: &ProjectionSet<f64>, q_in: &[Vec<f64>], kv: &ProjectionSet<f64>, kv_in: &[Vec<f64>], scale: f64) -> Vec<f64> {
    let q = linear_oracle(&q_proj.query, q_in);
    let k = linear_oracle(&kv.key, kv_in);
    let v = linear_oracle(&kv.value, kv_in);
    let out = linear_oracle(&kv.out, &attention_oracle(&q, &k, &v, scale));
    out.iter()
        .zip(kv_in)
        .flat_map(|(o, r)| o.iter().zip(r).map(|(a, b)| a + b).collect::<Vec<_>>())
        .collect()
}

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    // NaN must not disappear into f64::max
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, |m, d| if d.is_nan() { f64::INFINITY } else { m.max(d) })
}

fn equivalence() -> Result<String, String> {
    let mut rng = substream(0, "acceptance.equivalence");
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let mut nl = NonLocalBlock::<f64>::new(4, true, &mut rng).map_err(err)?;
        randomize_biases(&mut nl, &mut rng);
        let x = Tensor::uniform(&[4, 4, 4], -1.0, 1.0, &mut rng);
        let (z, _) = nl.forward_tensor(&x).map_err(err)?;
        let xc = channels(&x);
        worst = worst.max(max_err(z.data(), &dense(&nl.proj, &xc, &nl.proj, &xc, 1.0)));

        let mut sca = ScaBlock::<f64>::new(4, ScaConfig::with_groups(1), &mut rng).map_err(err)?;
        randomize_biases(&mut sca, &mut rng);
        let xa = Tensor::uniform(&[4, 4, 4], -1.0, 1.0, &mut rng);
        let xb = Tensor::uniform(&[4, 4, 4], -1.0, 1.0, &mut rng);
        let (za, zb, _) = sca.forward_tensors(&xa, &xb).map_err(err)?;
        let (ac, bc) = (channels(&xa), channels(&xb));
        let scale = 1.0 / 2f64.sqrt();
        worst = worst.max(max_err(za.data(), &dense(&sca.proj_b, &bc, &sca.proj_a, &ac, scale)));
        worst = worst.max(max_err(zb.data(), &dense(&sca.proj_a, &ac, &sca.proj_b, &bc, scale)));
    }
    ensure(worst < 1e-5, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("max deviation {worst:.2e} (tol 1e-5)"))
}

// ---------------------------------------------------------------------------
// Gradients

fn gradients() -> Result<String, String> {
    let cases = commands::gradcheck(0, None).map_err(err)?;
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} ({:.2e})", c.name, c.report.max_rel_error))
        .collect();
    ensure(failed.is_empty(), || format!("failing: {}", failed.join(", ")))?;
    let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    // the checker must notice a broken adjoint
    let faulty = commands::gradcheck(0, Some(csca_core::OpKind::Softmax)).map_err(err)?;
    ensure(faulty.iter().any(|c| !c.passed()), || "corrupted softmax adjoint went unnoticed".into())?;
    Ok(format!("{} cases, worst relative error {worst:.2e}", cases.len()))
}

// ---------------------------------------------------------------------------
// CFA

fn cfa_invariants() -> Result<String, String> {
    let mut rng = substream(0, "acceptance.cfa");
    let mut worst_sum: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    for i in 0..100 {
        let c = 1 + i % 4;
        let (h, w) = (1 + i % 3, 1 + (i / 3) % 4);
        let mut cfa = CfaBlock::<f64>::new(c, 2, &mut rng).map_err(err)?;
        randomize_biases(&mut cfa, &mut rng);
        let za = Tensor::uniform(&[c, h, w], -2.0, 2.0, &mut rng);
        let zb = Tensor::uniform(&[c, h, w], -2.0, 2.0, &mut rng);
        let mut tape = Tape::inference();
        let (a, b) = (tape.constant(za.clone()), tape.constant(zb.clone()));
        let o = cfa.forward(&mut tape, a, b).map_err(err)?;
        let (wa, wb, f) = (tape.value(o.w_a), tape.value(o.w_b), tape.value(o.f_agg));
        for k in 0..wa.numel() {
            worst_sum = worst_sum.max((wa.data()[k] + wb.data()[k] - 1.0).abs());
        }
        // per-pixel loop oracle
        let n = h * w;
        let (w1, b1) = (&cfa.squeeze.weight.value, cfa.squeeze.bias.value.data());
        let (w2, b2) = (&cfa.expand.weight.value, cfa.expand.bias.value.data());
        let hidden = w1.shape()[0];
        for p in 0..n {
            let fc: Vec<f64> = (0..2 * c)
                .map(|i| if i < c { za.data()[i * n + p] } else { zb.data()[(i - c) * n + p] })
                .collect();
            let hv: Vec<f64> = (0..hidden)
                .map(|j| (b1[j] + (0..2 * c).map(|i| w1.get(&[j, i]) * fc[i]).sum::<f64>()).max(0.0))
                .collect();
            for ch in 0..c {
                let la = b2[ch] + (0..hidden).map(|j| w2.get(&[ch, j]) * hv[j]).sum::<f64>();
                let lb = b2[c + ch] + (0..hidden).map(|j| w2.get(&[c + ch, j]) * hv[j]).sum::<f64>();
                let m = la.max(lb);
                let (ea, eb) = ((la - m).exp(), (lb - m).exp());
                let expected = (ea * fc[ch] + eb * fc[c + ch]) / (ea + eb);
                worst_oracle = worst_oracle.max((f.data()[ch * n + p] - expected).abs());
            }
        }
        // equal inputs give back the input exactly
        let mut tape = Tape::inference();
        let a = tape.constant(za.clone());
        let o = cfa.forward(&mut tape, a, a).map_err(err)?;
        ensure(tape.value(o.f_agg) == &za, || format!("instance {i}: f_agg != z_a for equal inputs"))?;
    }
    ensure(worst_sum < 1e-6, || format!("w_a + w_b off by {worst_sum:.3e}"))?;
    ensure(worst_oracle < 1e-6, || format!("loop oracle off by {worst_oracle:.3e}"))?;
    Ok(format!(
        "100 instances: |w_a+w_b-1| <= {worst_sum:.1e}, oracle <= {worst_oracle:.1e}, equal-input identity exact"
    ))
}

// ---------------------------------------------------------------------------
// Metrics

fn metrics() -> Result<String, String> {
    let p = vec![Tensor::new(vec![2, 2], vec![2.0f64, 3.0, 1.0, 4.0]).map_err(err)?];
    let g = vec![Tensor::new(vec![2, 2], vec![1.0f64, 3.0, 2.0, 4.0]).map_err(err)?];
    let hand = game(&p, &g, 1).map_err(err)?;
    ensure(hand == 2.0, || format!("hand example gave {hand}"))?;
    let mut rng = substream(0, "acceptance.metrics");
    for i in 0..50 {
        let (h, w) = (1 + i % 9, 1 + (i * 7) % 11);
        let preds: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::uniform(&[h, w], 0.0, 1.0, &mut rng)).collect();
        let gts: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::uniform(&[h, w], 0.0, 1.0, &mut rng)).collect();
        let g0 = game(&preds, &gts, 0).map_err(err)?;
        ensure(g0.to_bits() == mae(&preds, &gts).map_err(err)?.to_bits(), || format!("case {i}: GAME(0) != MAE bitwise"))?;
        let mut prev = g0;
        for level in 1..5 {
            let next = game(&preds, &gts, level).map_err(err)?;
            ensure(next >= prev - 1e-9, || format!("case {i}: GAME({level}) < GAME({})", level - 1))?;
            prev = next;
        }
    }
    Ok("GAME(1) hand example = 2.0; GAME(0) = MAE bitwise and GAME monotone on 50 random cases".into())
}

// ---------------------------------------------------------------------------
// Fusion ordering

fn fusion_ordering(work: &Path) -> Result<String, String> {
    let mut csca_wins = 0;
    let mut aux_wins = 0;
    let mut worst_ratio: f64 = 0.0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let data = work.join(format!("data{seed}"));
        commands::gen_data(&DatasetSpec { seed, ..DatasetSpec::default() }, &data).map_err(err)?;
        let mut mae_all = BTreeMap::new();
        let mut mae_dark = BTreeMap::new();
        for mode in FusionMode::ALL {
            let args = TrainArgs {
                dataset: data.clone(),
                out: work.join(format!("ck{seed}_{mode}")),
                mode,
                cfg: StageConfig::default(),
                opts: TrainOptions { seed, ..TrainOptions::default() },
            };
            let s = commands::train(&args).map_err(err)?;
            worst_ratio = worst_ratio.max(s.log.final_loss / s.log.initial_loss);
            mae_all.insert(mode.name(), find_row(&s.eval, "all", "mae").ok_or("no MAE row")?.value);
            mae_dark.insert(mode.name(), find_row(&s.eval, "dark", "mae").ok_or("no dark MAE row")?.value);
        }
        if mae_all["csca"] <= mae_all["early"] {
            csca_wins += 1;
        }
        if mae_dark["aux_only"] < mae_dark["rgb_only"] {
            aux_wins += 1;
        }
        lines.push(format!(
            "seed {seed}: csca {:.2} early {:.2} | dark aux {:.2} rgb {:.2}",
            mae_all["csca"], mae_all["early"], mae_dark["aux_only"], mae_dark["rgb_only"]
        ));
    }
    for l in &lines {
        let _ = writeln!(std::io::stderr(), "    {l}");
    }
    let summary = format!(
        "(a) csca <= early in {csca_wins}/5, (b) aux < rgb on dark in {aux_wins}/5, (c) worst final/initial loss {worst_ratio:.3}"
    );
    ensure(csca_wins >= 4 && aux_wins >= 4 && worst_ratio <= 0.5, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Determinism

fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(err)? {
        let e = e.map_err(err)?;
        out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).map_err(err)?);
    }
    Ok(out)
}

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_csca")).args(args).output().map_err(err)?;
    ensure(out.status.success(), || {
        format!("csca {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(out.stdout)
}

fn determinism(work: &Path) -> Result<String, String> {
    let p = |name: &str| work.join(name).to_string_lossy().into_owned();
    for run in ["1", "2"] {
        run_cli(&["gen-data", "--samples", "16", "--seed", "7", "--out", &p(&format!("data{run}"))])?;
        run_cli(&[
            "train", "--dataset", &p("data1"), "--mode", "csca", "--epochs", "5", "--seed", "7",
            "--out", &p(&format!("ck{run}")),
        ])?;
    }
    ensure(dir_bytes(&work.join("data1"))? == dir_bytes(&work.join("data2"))?, || "datasets differ".into())?;
    ensure(dir_bytes(&work.join("ck1"))? == dir_bytes(&work.join("ck2"))?, || "checkpoints differ".into())?;
    let e1 = run_cli(&["eval", "--checkpoint", &p("ck1"), "--dataset", &p("data2"), "--split", "all"])?;
    let e2 = run_cli(&["eval", "--checkpoint", &p("ck2"), "--dataset", &p("data1"), "--split", "all"])?;
    ensure(e1 == e2, || "metric CSVs differ".into())?;
    // the library path writes the same CSV as the binary
    let rows = commands::eval(&work.join("ck1"), &work.join("data1"), 3, EvalSplit::All).map_err(err)?;
    ensure(eval_csv(&rows).into_bytes() == e1, || "library and binary CSVs differ".into())?;
    Ok("datasets, checkpoints and metric CSVs bitwise identical across runs".into())
}

#[test]
fn acceptance() {
    let work = tempfile::tempdir().unwrap();
    let outcomes = vec![
        check("flop_ratio_exact", 10, flop_ratio),
        check("wall_time_speedup", 120, wall_time),
        check("equivalence_oracles", 10, equivalence),
        check("gradient_suite", 120, gradients),
        check("cfa_invariants", 10, cfa_invariants),
        check("metric_correctness", 10, metrics),
        check("fusion_ordering", 900, || fusion_ordering(&work.path().join("fusion"))),
        check("determinism", 300, || determinism(&work.path().join("determinism"))),
    ];
    // straight to the stderr handle so the verdicts survive output capture
    let mut err_out = std::io::stderr().lock();
    let _ = writeln!(err_out);
    for o in &outcomes {
        let _ = writeln!(
            err_out,
            "[{}] {:<22} {:>7.1}s (budget {}s)  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.elapsed.as_secs_f64(),
            o.budget.as_secs(),
            o.detail
        );
    }
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
