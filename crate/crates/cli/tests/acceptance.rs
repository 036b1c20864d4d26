//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines print in order.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use kfatt::attention::{freq_weight, kfatt_base, kfatt_freq, vanilla_attention, DedupGroup, Measurement, QueryPrior};
use kfatt::autodiff::SUPPORTED_OPS;
use kfatt::config::RunConfig;
use kfatt::datagen::generate;
use kfatt::eval::{bench_latency, evaluate, Subset};
use kfatt::gradcheck::{check_expr, check_model_loss, op_instance};
use kfatt::model::{
    train, CtrInstance, DecodeKernel, DecodeOverrides, Event, KernelMode, Model, ModelConfig, SubsetTags, Vocab,
};
use kfatt::oracle::certify;
use kfatt::Rng;

const DIMS: [usize; 4] = [1, 2, 4, 8];
const VOCAB: Vocab = Vocab { queries: 7, items: 9 };

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn random_history(rng: &mut Rng, len: usize) -> Vec<Event> {
    let mut t = 0;
    (0..len)
        .map(|_| {
            t += if rng.bernoulli(0.3) { 45 } else { 1 + rng.below(10) as u64 };
            Event {
                timestamp: t,
                query: 1 + rng.below(VOCAB.queries - 1),
                item: 1 + rng.below(VOCAB.items - 1),
            }
        })
        .collect()
}

fn instance(history: Vec<Event>, query: usize, item: usize, label: f64) -> CtrInstance {
    CtrInstance {
        user: 0,
        timestamp: history.last().map_or(0, |e| e.timestamp) + 100,
        query,
        item,
        label,
        history: Arc::new(history),
        tags: SubsetTags::default(),
    }
}

fn small_model(kernel: KernelMode, seed: u64) -> Model {
    Model::new(ModelConfig { kernel, ..ModelConfig::default() }, VOCAB, &mut Rng::new(seed)).unwrap()
}

fn oracle_certification() -> Outcome {
    let start = Instant::now();
    let report = certify(2024, 200);
    let secs = start.elapsed().as_secs_f64();
    print!("{}", report.render());
    outcome(
        report.failures() == 0 && secs < 120.0,
        format!("{} failures over 200 instances per mode, {secs:.1}s (limit 120s)", report.failures()),
    )
}

fn degeneration_identities() -> Outcome {
    let mut rng = Rng::new(31);
    let mut worst_vanilla: f64 = 0.0;
    let mut worst_freq: f64 = 0.0;
    for i in 0..100 {
        let d = DIMS[i % 4];
        let t = 1 + rng.below(12);
        let q = rng.normal_vec(d, 1.0);
        let keys: Vec<Vec<f64>> = (0..t).map(|_| rng.normal_vec(d, 1.0)).collect();
        let values: Vec<Vec<f64>> = (0..t).map(|_| rng.normal_vec(d, 1.0)).collect();
        let prior = QueryPrior { mean: rng.normal_vec(d, 1.0), precision: 0.0 };
        let ms: Vec<Measurement> = keys
            .iter()
            .zip(&values)
            .map(|(k, v)| Measurement { value: v.clone(), precision: kfatt::numerics::dot(&q, k).exp() })
            .collect();
        let va = vanilla_attention(&q, &keys, &values).unwrap();
        worst_vanilla = worst_vanilla.max(max_diff(&kfatt_base(&prior, &ms).unwrap().value, &va.value));

        let prior = QueryPrior { mean: rng.normal_vec(d, 1.0), precision: rng.log_uniform(0.01, 10.0) };
        let ms: Vec<Measurement> =
            (0..t).map(|_| Measurement { value: rng.normal_vec(d, 1.0), precision: rng.log_uniform(0.01, 10.0) }).collect();
        let groups: Vec<DedupGroup> = ms
            .iter()
            .map(|m| DedupGroup {
                key: rng.normal_vec(d, 1.0),
                values: vec![m.value.clone()],
                system_sigma: 1.0 / m.precision.sqrt(),
                random_sigma: 0.0,
            })
            .collect();
        let base = kfatt_base(&prior, &ms).unwrap();
        worst_freq = worst_freq.max(max_diff(&kfatt_freq(&prior, &groups).unwrap().value, &base.value));
    }

    // The same identities through the trained-model decoder.
    let mut model_vanilla: f64 = 0.0;
    let mut model_freq: f64 = 0.0;
    for i in 0..100 {
        let len = 1 + rng.below(30);
        let inst = instance(random_history(&mut rng, len), 1 + rng.below(6), 1, 1.0);
        let m = small_model(KernelMode::KfattBase, 500 + i);
        let zero_prior = DecodeOverrides { prior_precision: Some(0.0), random_sigma: None };
        let kf = m.interest(&inst, DecodeKernel::KfattBase, zero_prior).unwrap();
        let va = m.interest(&inst, DecodeKernel::Vanilla, DecodeOverrides::default()).unwrap();
        model_vanilla = model_vanilla.max(max_diff(kf.data(), va.data()));

        let mut queries: Vec<usize> = (1..VOCAB.queries).collect();
        rng.shuffle(&mut queries);
        let len = 1 + rng.below(VOCAB.queries - 1);
        let hist: Vec<Event> =
            (0..len).map(|t| Event { timestamp: t as u64 * 5, query: queries[t], item: 1 + rng.below(8) }).collect();
        let inst = instance(hist, 1 + rng.below(6), 2, 0.0);
        let m = small_model(KernelMode::KfattFreq, 700 + i);
        let no_random = DecodeOverrides { prior_precision: None, random_sigma: Some(0.0) };
        let freq = m.interest(&inst, DecodeKernel::KfattFreq, no_random).unwrap();
        let base = m.interest(&inst, DecodeKernel::KfattBase, DecodeOverrides::default()).unwrap();
        model_freq = model_freq.max(max_diff(freq.data(), base.data()));
    }
    let worst = worst_vanilla.max(worst_freq).max(model_vanilla).max(model_freq);
    outcome(
        worst <= 1e-12,
        format!(
            "kernel: base→vanilla {worst_vanilla:.1e}, freq→base {worst_freq:.1e}; decoder: {model_vanilla:.1e}, {model_freq:.1e} (tol 1e-12)"
        ),
    )
}

fn frequency_capping() -> Outcome {
    let mut rng = Rng::new(41);
    let mut ok = true;
    let mut worst_gap: f64 = 0.0;
    for _ in 0..100 {
        let s = rng.log_uniform(0.05, 5.0);
        let r = rng.log_uniform(0.05, 5.0);
        let cap = 1.0 / (s * s);
        let w: Vec<f64> = [1, 10, 1000].iter().map(|&n| freq_weight(s, r, n)).collect();
        ok &= w[0] <= w[1] + 1e-9 * cap && w[1] <= w[2] + 1e-9 * cap && w[2] <= cap * (1.0 + 1e-9);
        // The remaining gap to the cap vanishes like 1/n.
        for (&n, &wn) in [1usize, 10, 1000].iter().zip(&w) {
            let gap = r * r / (s * s * (n as f64 * s * s + r * r));
            worst_gap = worst_gap.max(((cap - wn) - gap).abs() / cap);
        }
    }
    ok &= worst_gap <= 1e-9;

    let mut worst_shift: f64 = 0.0;
    let mut doubled = true;
    for i in 0..100 {
        let d = DIMS[i % 4];
        let m = 2 + rng.below(4);
        let prior = QueryPrior { mean: rng.normal_vec(d, 1.0), precision: rng.log_uniform(0.1, 5.0) };
        let groups: Vec<DedupGroup> = (0..m)
            .map(|_| {
                let n = 1 + rng.below(4);
                DedupGroup {
                    key: rng.normal_vec(d, 1.0),
                    values: (0..n).map(|_| rng.normal_vec(d, 1.0)).collect(),
                    system_sigma: rng.log_uniform(0.3, 3.0),
                    random_sigma: 0.0,
                }
            })
            .collect();
        let mut dup = groups.clone();
        let extra = dup[0].values.clone();
        dup[0].values.extend(extra);
        worst_shift = worst_shift.max(max_diff(
            &kfatt_freq(&prior, &groups).unwrap().value,
            &kfatt_freq(&prior, &dup).unwrap().value,
        ));

        // Per-click fusion of the same clicks: group 0's share doubles
        // relative to every other group.
        let clicks = |gs: &[DedupGroup]| -> Vec<Measurement> {
            gs.iter()
                .flat_map(|g| g.values.iter().map(move |v| Measurement { value: v.clone(), precision: 1.0 / (g.system_sigma * g.system_sigma) }))
                .collect()
        };
        let share = |gs: &[DedupGroup]| -> (f64, f64) {
            let w = kfatt_base(&prior, &clicks(gs)).unwrap().weights.behavior_weights;
            let n0 = gs[0].values.len();
            (w[..n0].iter().sum(), w[n0..].iter().sum())
        };
        let (a0, a_rest) = share(&groups);
        let (b0, b_rest) = share(&dup);
        doubled &= ((b0 / b_rest) / (a0 / a_rest) - 2.0).abs() <= 1e-9;
    }
    ok &= worst_shift <= 1e-9 && doubled;
    outcome(
        ok,
        format!("weights monotone and capped at n∈{{1,10,1000}} (gap err {worst_gap:.1e}); duplicated group moves freq by {worst_shift:.1e}, base share doubled: {doubled}"),
    )
}

fn gradient_suite() -> Outcome {
    let root = Rng::new(2024);
    let mut worst_op: f64 = 0.0;
    let mut worst_name = "";
    for (i, tag) in SUPPORTED_OPS.iter().enumerate() {
        let mut rng = root.split(i as u64);
        for _ in 0..50 {
            let (expr, inputs) = op_instance(tag, &mut rng);
            let e = check_expr(&expr, &inputs).unwrap_or(f64::INFINITY);
            if e > worst_op {
                worst_op = e;
                worst_name = tag;
            }
        }
    }
    let mut rng = Rng::new(77);
    let mut worst_model: f64 = 0.0;
    for i in 0..50 {
        let mut m = small_model(KernelMode::KfattFreq, 900 + i);
        let len = 1 + rng.below(30);
        let inst = instance(random_history(&mut rng, len), 1 + rng.below(6), 1 + rng.below(8), rng.below(2) as f64);
        worst_model = worst_model.max(check_model_loss(&mut m, &inst, 12, &mut rng).unwrap_or(f64::INFINITY));
    }
    outcome(
        worst_op <= 1e-4 && worst_model <= 1e-4,
        format!(
            "{} ops × 50: worst {worst_op:.1e} ({worst_name}); end-to-end kfatt_freq × 50: worst {worst_model:.1e} (tol 1e-4)",
            SUPPORTED_OPS.len()
        ),
    )
}

struct SeedResult {
    seed: u64,
    /// (all, new, infreq) per kernel in [vanilla, kfatt_base, kfatt_freq] order.
    auc: [[f64; 3]; 3],
}

const COMPARED: [KernelMode; 3] = [KernelMode::Vanilla, KernelMode::KfattBase, KernelMode::KfattFreq];

fn run_comparison() -> (Vec<SeedResult>, Duration) {
    let start = Instant::now();
    let path = workspace_root().join("configs/acceptance.toml");
    let mut out = Vec::new();
    for seed in 1..=5u64 {
        let sets = [format!("seed={seed}"), format!("datagen.seed={seed}")];
        let cfg = RunConfig::load(&path, &sets, std::iter::empty()).expect("acceptance config loads");
        let ds = generate(&cfg.datagen).expect("dataset generates");
        let mut auc = [[0.0; 3]; 3];
        for (k, kernel) in COMPARED.iter().enumerate() {
            let root = Rng::new(cfg.seed);
            let model_cfg = ModelConfig { kernel: *kernel, ..cfg.model.clone() };
            let mut model = Model::new(model_cfg, ds.vocab, &mut root.split(1)).unwrap();
            train(&mut model, &ds.train, &cfg.train, &mut root.split(2), |_, _| {}).unwrap();
            let rows = evaluate(kernel.name(), &model, &ds.test, cfg.eval.ties).unwrap();
            for (j, subset) in Subset::ALL.iter().enumerate() {
                auc[k][j] = rows.iter().find(|r| r.subset == *subset).and_then(|r| r.auc).unwrap_or(f64::NAN);
            }
        }
        println!(
            "    seed {seed}: new   vanilla {:.4}  kfatt_base {:.4}  kfatt_freq {:.4} | infreq  vanilla {:.4}  kfatt_base {:.4}  kfatt_freq {:.4}",
            auc[0][1], auc[1][1], auc[2][1], auc[0][2], auc[1][2], auc[2][2]
        );
        out.push(SeedResult { seed, auc });
    }
    (out, start.elapsed())
}

fn new_subset_ordering(results: &[SeedResult], elapsed: Duration) -> Outcome {
    let mean = |k: usize| results.iter().map(|r| r.auc[k][1]).sum::<f64>() / results.len() as f64;
    let (v, b, f) = (mean(0), mean(1), mean(2));
    let mins = elapsed.as_secs_f64() / 60.0;
    outcome(
        b > v && f >= b && b - v >= 0.03 && mins < 15.0,
        format!("mean New AUC vanilla {v:.4}, kfatt_base {b:.4} (+{:.4}, need ≥ 0.03), kfatt_freq {f:.4}; {mins:.1} min (limit 15)", b - v),
    )
}

fn infreq_ordering(results: &[SeedResult]) -> Outcome {
    let wins: Vec<u64> = results.iter().filter(|r| r.auc[2][2] >= r.auc[1][2]).map(|r| r.seed).collect();
    outcome(wins.len() >= 4, format!("kfatt_freq ≥ kfatt_base on Infreq in {} of 5 seeds {wins:?} (need 4)", wins.len()))
}

fn cost_law() -> Outcome {
    let split = small_model(KernelMode::KfattFreq, 1);
    let full = Model::new(ModelConfig { max_per_session: 250, ..ModelConfig::default() }, VOCAB, &mut Rng::new(1)).unwrap();
    let a = split.encoder_macs(&[25; 10]).unwrap();
    let b = full.encoder_macs(&[250]).unwrap();
    let ratio = a["encoder.attn"] as f64 / b["encoder.attn"] as f64;
    let total = |m: &std::collections::BTreeMap<&str, u64>| m.values().sum::<u64>() as f64;
    let whole = total(&a) / total(&b);

    let kernels = vec!["transformer".to_string(), "transformer_full".to_string(), "kfatt_freq".to_string()];
    let rows = bench_latency(&ModelConfig::default(), &kernels, &[25, 50, 100, 250], 200, 3).unwrap();
    let ordered = rows.iter().all(|r| r.p99_us >= r.p50_us);
    outcome(
        ratio < 0.15 && ordered,
        format!(
            "self-attention MACs 10×25 vs 250: {ratio:.4} (limit 0.15; whole encoder incl. projections {whole:.4}); p99 ≥ p50 in {}/{} bench rows",
            rows.iter().filter(|r| r.p99_us >= r.p50_us).count(),
            rows.len()
        ),
    )
}

fn pipeline_once(dir: &Path) -> Result<Vec<u8>, String> {
    let root = dir.display();
    let config = format!(
        "seed = 9\n[datagen]\nseed = 9\nusers = 300\n[model]\nkernel = \"kfatt_freq\"\n[train]\nepochs = 2\n\
         [paths]\ndata_dir = \"{root}/data\"\ncheckpoint = \"{root}/model.ckpt\"\nloss_log = \"{root}/loss.log\"\n\
         metrics = \"{root}/metrics.txt\"\nbench_report = \"{root}/bench.txt\"\n"
    );
    let cfg_path = dir.join("run.toml");
    std::fs::write(&cfg_path, config).map_err(|e| e.to_string())?;
    for sub in ["generate", "train", "evaluate"] {
        let out = Command::new(env!("CARGO_BIN_EXE_kfatt"))
            .arg(sub)
            .arg("--config")
            .arg(&cfg_path)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{sub} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    std::fs::read(dir.join("metrics.txt")).map_err(|e| e.to_string())
}

fn reproducibility() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    match (pipeline_once(a.path()), pipeline_once(b.path())) {
        (Ok(x), Ok(y)) => outcome(x == y && !x.is_empty(), format!("metrics files identical: {} ({} bytes)", x == y, x.len())),
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn main() -> ExitCode {
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("KFATT__")) {
        std::env::remove_var(k);
    }
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("{} [{n}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    report(1, "oracle certification", oracle_certification());
    report(2, "degeneration identities", degeneration_identities());
    report(3, "frequency capping", frequency_capping());
    report(4, "gradient suite", gradient_suite());
    let (results, elapsed) = run_comparison();
    report(5, "New subset ordering", new_subset_ordering(&results, elapsed));
    report(6, "Infreq ordering", infreq_ordering(&results));
    report(7, "cost law", cost_law());
    report(8, "protocol reproducibility", reproducibility());
    if failed == 0 {
        println!("acceptance: all 8 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 8 criteria failed");
        ExitCode::FAILURE
    }
}
