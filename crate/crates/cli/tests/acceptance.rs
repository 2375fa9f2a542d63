//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#[path = "../../core/tests/common/mod.rs"]
mod oracles;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use eviscreen::benchmark::{
    contamination_study, generate_synthetic, run_experiment, scaling_study, ExperimentConfig, Method,
};
use eviscreen::feature_store::{FeatureMap, Label};
use eviscreen::knowledge_bank::{coreset_subsample, greedy_farthest_order, FeatureSet};
use eviscreen::metrics::{auroc, average_precision, csr, spe_at_recall};
use eviscreen::reasoning::model::NamedTensor;
use eviscreen::reasoning::{
    cross_attention, forward, loss_and_grad, CrossAttentionWeights, EvidenceSet, Matrix, ReasoningConfig,
    ReasoningParams, TrainingExample,
};
use eviscreen::util::seeded_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Random labelled scores with both classes; half the instances draw from a
/// small grid so ties are common.
fn random_instance(rng: &mut impl Rng, discrete: bool) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=50);
    let scores: Vec<f64> = (0..n)
        .map(|_| if discrete { rng.random_range(-40i32..=40) as f64 / 8.0 } else { rng.random_range(-1.0..1.0) })
        .collect();
    let mut positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    positive[0] = true;
    positive[1] = false;
    (scores, positive)
}

fn metric_oracles() -> Outcome {
    let mut rng = seeded_rng(100);
    for i in 0..1000 {
        let (scores, positive) = random_instance(&mut rng, i % 2 == 0);
        let cases = oracles::scored(&scores, &positive);
        check(auroc(&cases).unwrap() == oracles::auroc(&cases), format!("AUROC differs on instance {i}"))?;
        check(average_precision(&cases).unwrap() == oracles::average_precision(&cases), format!("AP differs on instance {i}"))?;
        check(csr(&cases).unwrap() == oracles::csr(&cases), format!("CSR differs on instance {i}"))?;
        let extra = rng.random_range(1..=100u32);
        for x in [95, 99, 100, extra] {
            check(
                spe_at_recall(&cases, x as f64).unwrap() == oracles::spe_at_recall(&cases, x),
                format!("Spe@{x}%R differs on instance {i}"),
            )?;
        }
    }
    Ok("1000 instances, exact".into())
}

fn metric_ordering() -> Outcome {
    let mut rng = seeded_rng(101);
    for i in 0..1000 {
        let (scores, positive) = random_instance(&mut rng, i % 2 == 0);
        let cases = oracles::scored(&scores, &positive);
        let s = |x: f64| spe_at_recall(&cases, x).unwrap();
        check(s(100.0) <= s(99.0) && s(99.0) <= s(95.0), format!("ordering broken on instance {i}"))?;
    }
    for i in 0..100 {
        let (scores, positive) = random_instance(&mut rng, true);
        let a = oracles::scored(&scores, &positive);
        // Exact on multiples of 1/8.
        let moved: Vec<f64> = scores.iter().map(|s| s * s * s + 2.0 * s + 1.0).collect();
        let b = oracles::scored(&moved, &positive);
        let same = auroc(&a).unwrap() == auroc(&b).unwrap()
            && average_precision(&a).unwrap() == average_precision(&b).unwrap()
            && csr(&a).unwrap() == csr(&b).unwrap()
            && [95.0, 99.0, 100.0].iter().all(|&x| spe_at_recall(&a, x).unwrap() == spe_at_recall(&b, x).unwrap());
        check(same, format!("rescaling changed a metric on instance {i}"))?;
    }
    Ok("1000 ordering instances, 100 rescaling instances".into())
}

fn knn_exactness() -> Outcome {
    let mut rng = seeded_rng(102);
    let mut queries = 0;
    for b in 0..200 {
        let dim = rng.random_range(1..=64);
        let n = rng.random_range(1..=1000);
        let grid = b % 2 == 0;
        let mut vectors: Vec<f32> = (0..n * dim)
            .map(|_| if grid { rng.random_range(-2i32..=2) as f32 } else { rng.random_range(-1.0f32..1.0) })
            .collect();
        // Exact duplicates of earlier vectors force equal distances.
        for _ in 0..n / 10 {
            let (src, dst) = (rng.random_range(0..n), rng.random_range(0..n));
            let v = vectors[src * dim..(src + 1) * dim].to_vec();
            vectors[dst * dim..(dst + 1) * dim].copy_from_slice(&v);
        }
        let bank = oracles::raw_bank(dim, vectors.clone());
        for _ in 0..5 {
            let query: Vec<f32> = if rng.random_bool(0.5) {
                let i = rng.random_range(0..n);
                vectors[i * dim..(i + 1) * dim].to_vec()
            } else {
                (0..dim).map(|_| if grid { rng.random_range(-2i32..=2) as f32 } else { rng.random_range(-1.0f32..1.0) }).collect()
            };
            let k = rng.random_range(1..=n.min(10));
            let want = oracles::knn(&vectors, dim, &query, k);
            let got = bank.knn_query(&query, k).unwrap();
            check(got.indices == want.iter().map(|w| w.0).collect::<Vec<_>>(), format!("indices differ on bank {b}"))?;
            check(got.distances == want.iter().map(|w| w.1).collect::<Vec<_>>(), format!("distances differ on bank {b}"))?;
            let mean = want.iter().map(|w| w.1).sum::<f64>() / k as f64;
            check(bank.knn_avg_distance(&query, k).unwrap() == mean, format!("average differs on bank {b}"))?;
            queries += 1;
        }
    }
    Ok(format!("200 banks, {queries} queries"))
}

fn coreset_two_approx() -> Outcome {
    let mut rng = seeded_rng(103);
    let mut worst: f64 = 0.0;
    for s in 0..200 {
        let n = rng.random_range(1..=10);
        let dim = rng.random_range(1..=3);
        let target = rng.random_range(1..=4usize.min(n));
        let flat: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-5.0f32..5.0)).collect();
        let points: Vec<Vec<f64>> = flat.chunks(dim).map(|p| p.iter().map(|&x| x as f64).collect()).collect();
        let order = greedy_farthest_order(&flat, dim, target, rng.random_range(0..n));
        let greedy = oracles::radius(&points, &order);
        let best = oracles::optimal_radius(&points, target);
        check(greedy <= 2.0 * best + 1e-9, format!("set {s}: greedy {greedy} > 2 x {best}"))?;
        if best > 0.0 {
            worst = worst.max(greedy / best);
        }
        let set = FeatureSet::new(dim, flat.clone(), Label::Normal).unwrap();
        let full = coreset_subsample(&set, 1.0, s as u64, false).unwrap();
        let mut got: Vec<Vec<u32>> = full.iter().map(|v| v.iter().map(|x| x.to_bits()).collect()).collect();
        let mut want: Vec<Vec<u32>> = flat.chunks(dim).map(|v| v.iter().map(|x| x.to_bits()).collect()).collect();
        got.sort();
        want.sort();
        check(got == want, format!("set {s}: ratio 1.0 did not return the full set"))?;
    }
    Ok(format!("200 sets, worst ratio {worst:.3}"))
}

fn tiny_example(rng: &mut impl Rng, label: Label) -> TrainingExample {
    let (h, w, d, k) = (2, 2, 3, 2);
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
    let ev = |v: Vec<f32>| EvidenceSet { height: h, width: w, k, dim: d, vectors: v, distances: vec![0.0; h * w * k] };
    TrainingExample {
        features: FeatureMap::new("x", h, w, d, draw(h * w * d)).unwrap(),
        evidence_normal: ev(draw(h * w * k * d)),
        evidence_pathological: ev(draw(h * w * k * d)),
        label,
    }
}

fn gradient_check() -> Outcome {
    let rc = ReasoningConfig { depth: 2, d_model: 8, heads: 2, k: 2, mlp_hidden: 8, seed: 0 };
    let params = ReasoningParams::init(&rc, 3).unwrap();
    let mut rng = seeded_rng(104);
    let a = tiny_example(&mut rng, Label::Normal);
    let b = tiny_example(&mut rng, Label::Pathological);
    let batch = [&a, &b];
    let (_, grad) = loss_and_grad(&batch, &params).unwrap();
    let loss = |p: &ReasoningParams| loss_and_grad(&batch, p).unwrap().0;
    let step = 1e-4;
    let (mut worst, mut count) = (0.0f64, 0);
    for (t, g) in params.tensors().iter().zip(grad.tensors()) {
        let NamedTensor { name, value, .. } = t;
        for i in 0..value.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data[i] += step;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data[i] -= step;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
            let analytic = g.value.data[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            check(err < 1e-4, format!("{name}[{i}]: analytic {analytic} vs numeric {numeric}"))?;
            worst = worst.max(err);
            count += 1;
        }
    }
    Ok(format!("{count} scalars, max relative error {worst:.2e}"))
}

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn attention_invariants() -> Outcome {
    let mut rng = seeded_rng(105);
    let (p, k, dm, d) = (4, 5, 8, 6);
    let w = CrossAttentionWeights {
        norm_gain: random_matrix(&mut rng, 1, dm),
        norm_bias: random_matrix(&mut rng, 1, dm),
        query: random_matrix(&mut rng, dm, dm),
        key: random_matrix(&mut rng, d, dm),
        value: random_matrix(&mut rng, d, dm),
        output: random_matrix(&mut rng, dm, dm),
    };
    let state = random_matrix(&mut rng, p, dm);
    let ev = random_matrix(&mut rng, p * k, d);
    let base = cross_attention(&state, &ev, k, &w, 2).unwrap();

    let rc = ReasoningConfig { depth: 2, d_model: 8, heads: 2, k, mlp_hidden: 8, seed: 3 };
    let params = ReasoningParams::init(&rc, d).unwrap();
    let fm = FeatureMap::new("q", 2, 2, d, (0..p * d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    let evidence = |rng: &mut ChaCha8Rng| EvidenceSet {
        height: 2,
        width: 2,
        k,
        dim: d,
        vectors: (0..p * k * d).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        distances: vec![0.0; p * k],
    };
    let (ev_n, ev_p) = (evidence(&mut rng), evidence(&mut rng));
    let logit = forward(&fm, &ev_n, &ev_p, &params).unwrap();

    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let perms: Vec<Vec<usize>> = (0..p)
            .map(|_| {
                let mut v: Vec<usize> = (0..k).collect();
                v.shuffle(&mut rng);
                v
            })
            .collect();
        let mut shuffled = ev.clone();
        for (patch, perm) in perms.iter().enumerate() {
            for (slot, &src) in perm.iter().enumerate() {
                shuffled.row_mut(patch * k + slot).copy_from_slice(ev.row(patch * k + src));
            }
        }
        let out = cross_attention(&state, &shuffled, k, &w, 2).unwrap();
        for (a, b) in out.data.iter().zip(&base.data) {
            worst = worst.max((a - b).abs());
        }
        let permute = |e: &EvidenceSet| {
            let mut e2 = e.clone();
            for (patch, perm) in perms.iter().enumerate() {
                for (slot, &src) in perm.iter().enumerate() {
                    let (to, from) = ((patch * k + slot) * d, (patch * k + src) * d);
                    e2.vectors[to..to + d].copy_from_slice(&e.vectors[from..from + d]);
                }
            }
            e2
        };
        let l2 = forward(&fm, &permute(&ev_n), &permute(&ev_p), &params).unwrap();
        worst = worst.max((l2 - logit).abs());
    }
    check(worst <= 1e-12, format!("permutation changed outputs by {worst:e}"))?;

    let ev1 = random_matrix(&mut rng, p, d);
    let out = cross_attention(&state, &ev1, 1, &w, 2).unwrap();
    let mut expected = ev1.matmul(&w.value).matmul(&w.output);
    expected.add_assign(&state);
    let err = out.data.iter().zip(&expected.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(err <= 1e-12, format!("k=1 identity off by {err:e}"))?;
    Ok(format!("20 permutations, max deviation {worst:.1e}; k=1 identity within {err:.1e}"))
}

fn easy_preset() -> Outcome {
    let cfg = ExperimentConfig::easy();
    let data = generate_synthetic(&cfg.synth).unwrap();
    let r = run_experiment(&data, Method::ContrastiveDual, &cfg).unwrap();
    check(r.report.auroc == 1.0 && r.report.csr == 1.0, format!("AUROC {} CSR {}", r.report.auroc, r.report.csr))?;
    Ok(format!("AUROC {} CSR {}", r.report.auroc, r.report.csr))
}

fn hard_auroc(method: Method) -> f64 {
    let cfg = ExperimentConfig::hard();
    let data = generate_synthetic(&cfg.synth).unwrap();
    run_experiment(&data, method, &cfg).unwrap().report.auroc
}

fn dual_advantage() -> Outcome {
    let dual = hard_auroc(Method::ContrastiveDual);
    let normal = hard_auroc(Method::ContrastiveNormalOnly);
    let msg = format!("dual {dual:.4} vs normal-only {normal:.4}");
    check(dual - normal >= 0.05, msg.clone())?;
    Ok(msg)
}

fn reasoning_advantage() -> Outcome {
    let steps = ExperimentConfig::hard().train.total_steps;
    check(steps <= 2000, format!("{steps} training steps"))?;
    let reasoning = hard_auroc(Method::Reasoning);
    let no_retrieval = hard_auroc(Method::ReasoningNoRetrieval);
    let dual = hard_auroc(Method::ContrastiveDual);
    let normal = hard_auroc(Method::ContrastiveNormalOnly);
    let msg = format!(
        "reasoning {reasoning:.4}, dual {dual:.4}, no-retrieval {no_retrieval:.4}, normal-only {normal:.4}, {steps} steps"
    );
    check(
        reasoning >= dual - 0.01 && reasoning > dual && reasoning > no_retrieval && reasoning > normal,
        msg.clone(),
    )?;
    Ok(msg)
}

fn scaling_trend() -> Outcome {
    let cfg = ExperimentConfig::default();
    let data = generate_synthetic(&cfg.synth).unwrap();
    let results = scaling_study(&data, &cfg, &[50, 200, 1000]).unwrap();
    let au: Vec<f64> = results.iter().map(|r| r.report.auroc).collect();
    let spe: Vec<f64> = results.iter().map(|r| r.report.spe(95.0).unwrap()).collect();
    let msg = format!("AUROC {au:.4?}, Spe@95%R {spe:.4?}");
    for i in 1..3 {
        check(au[i] >= au[i - 1] - 0.01 && spe[i] >= spe[i - 1] - 0.01, msg.clone())?;
    }
    Ok(msg)
}

fn contamination_robustness() -> Outcome {
    let cfg = ExperimentConfig::default();
    let data = generate_synthetic(&cfg.synth).unwrap();
    let (clean, dirty) = contamination_study(&data, &cfg, 0.2).unwrap();
    let denoised_cfg = ExperimentConfig { contamination: 0.2, denoise_q: Some(0.2), ..cfg };
    let denoised = run_experiment(&data, Method::ContrastiveDual, &denoised_cfg).unwrap();
    let (c, x, dn) = (clean.report.auroc, dirty.report.auroc, denoised.report.auroc);
    let msg = format!("clean {c:.4}, contaminated {x:.4} ({} injected), denoised {dn:.4}", dirty.injected);
    check(c - x <= 0.05 && (dn - c).abs() <= 0.02, msg.clone())?;
    Ok(msg)
}

const PIPELINE_CONFIG: &str = r#"{
  "experiment": {
    "synth": {"d": 4, "h": 4, "w": 4, "n_normal_clusters": 2, "n_anomaly_clusters": 2,
      "cluster_spread": 0.2, "anomaly_offset": 3.0, "lesion_patch_fraction": 0.25,
      "n_normal_cases": 8, "n_path_cases": 8, "seed": 5},
    "reasoning": {"depth": 1, "d_model": 8, "heads": 2, "k": 3, "mlp_hidden": 8},
    "train": {"total_steps": 10, "warmup_steps": 2, "batch_size": 4}
  },
  "reasoning": {"depth": 1, "d_model": 8, "heads": 2, "mlp_hidden": 8},
  "train": {"total_steps": 10, "warmup_steps": 2, "batch_size": 4},
  "study": {"bank_sizes": [4, 16]}
}"#;

fn pipeline(root: &Path) -> Result<(), String> {
    let sh = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_eviscreen"))
            .current_dir(root)
            .args(["--config", "../cfg.json"])
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        check(out.status.success(), format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    };
    fs::create_dir_all(root).map_err(|e| e.to_string())?;
    sh(&["synth", "--out", "data"])?;
    sh(&["build-bank", "--manifest", "data/manifest.txt", "--out", "run"])?;
    sh(&["screen", "--manifest", "data/manifest.txt", "--out", "run", "--emit-maps"])?;
    sh(&["eval", "--scores", "run/scores.csv", "--out", "run/eval"])?;
    sh(&["train", "--manifest", "data/manifest.txt", "--out", "run"])?;
    sh(&["screen", "--manifest", "data/manifest.txt", "--out", "run", "--checkpoint", "run/model.evrp"])?;
    sh(&["eval", "--scores", "run/scores.csv", "--out", "run/eval_reasoning"])?;
    for which in ["scaling", "contamination", "ablation"] {
        sh(&["study", which, "--out", "study"])?;
    }
    Ok(())
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    fs::write(tmp.path().join("cfg.json"), PIPELINE_CONFIG).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a)?;
    pipeline(&b)?;
    let (ta, tb) = (tree(&a), tree(&b));
    check(ta.len() == tb.len(), "different file sets")?;
    for ((na, ca), (nb, cb)) in ta.iter().zip(&tb) {
        check(na == nb && ca == cb, format!("{na} differs between reruns"))?;
    }
    Ok(format!("{} output files byte-identical across reruns of every command", ta.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Option<u64>); 12] = [
        ("Metric oracle equivalence", metric_oracles, Some(10)),
        ("Metric ordering and rescaling invariance", metric_ordering, None),
        ("k-NN exactness", knn_exactness, Some(30)),
        ("Coreset 2-approximation", coreset_two_approx, Some(30)),
        ("Gradient correctness", gradient_check, Some(60)),
        ("Attention invariants", attention_invariants, None),
        ("End-to-end easy preset", easy_preset, Some(60)),
        ("Dual-bank advantage, hard preset", dual_advantage, Some(120)),
        ("Reasoning advantage, hard preset", reasoning_advantage, Some(600)),
        ("Scaling trend", scaling_trend, Some(180)),
        ("Contamination robustness", contamination_robustness, Some(180)),
        ("Determinism", determinism, None),
    ];
    let mut failed = 0;
    for (name, f, limit) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        let elapsed = started.elapsed();
        let over = limit.is_some_and(|l| elapsed > Duration::from_secs(l));
        let budget = limit.map(|l| format!(" / {l} s")).unwrap_or_default();
        let (status, detail) = match outcome {
            Ok(d) if !over => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the time limit")),
            Err(e) => ("FAIL", e),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} {name}: {detail} ({:.1} s{budget})", elapsed.as_secs_f64());
    }
    println!("{} of 12 criteria passed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
