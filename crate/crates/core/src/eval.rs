//! AUC, per-subset evaluation and the latency / op-count benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_all, CtrInstance, Event, KernelMode, Model, ModelConfig, SubsetTags, Vocab};
use crate::numerics::Rng;

/// How equal scores across classes are counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieMode {
    /// A tied pair counts one half (Mann-Whitney).
    #[default]
    Half,
    /// Only strictly ordered pairs count.
    Strict,
}

fn split_classes(scores: &[f64], labels: &[f64]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::AucUndefined("no positive examples"));
    }
    if n_neg == 0 {
        return Err(Error::AucUndefined("no negative examples"));
    }
    Ok((n_pos, n_neg))
}

/// Sorted-rank AUC in `O(n log n)`.
pub fn auc_with(scores: &[f64], labels: &[f64], ties: TieMode) -> Result<f64> {
    let (n_pos, n_neg) = split_classes(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            index: scores.iter().position(|s| s.is_nan()).unwrap_or(0),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Walk tie blocks: each positive beats every negative below the block
    // and ties the negatives inside it.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let block = &idx[i..j];
        let pos = block.iter().filter(|&&k| labels[k] > 0.5).count();
        let neg = block.len() - pos;
        wins += pos as f64 * neg_below as f64;
        if ties == TieMode::Half {
            wins += 0.5 * pos as f64 * neg as f64;
        }
        neg_below += neg;
        i = j;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    auc_with(scores, labels, TieMode::Half)
}

/// Pairwise double loop; reference for [`auc_with`].
pub fn auc_brute_force(scores: &[f64], labels: &[f64], ties: TieMode) -> Result<f64> {
    let (n_pos, n_neg) = split_classes(scores, labels)?;
    let mut wins = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] > 0.5 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] <= 0.5 {
                continue;
            }
            if si < sj {
                wins += 1.0;
            } else if si == sj && ties == TieMode::Half {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    New,
    Infreq,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::All, Subset::New, Subset::Infreq];

    pub fn name(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::New => "new",
            Subset::Infreq => "infreq",
        }
    }

    pub fn contains(self, tags: SubsetTags) -> bool {
        match self {
            Subset::All => true,
            Subset::New => tags.new,
            Subset::Infreq => tags.infreq,
        }
    }
}

/// One `(model, subset)` record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub subset: Subset,
    /// `None` when the subset lacks one of the classes.
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl MetricRow {
    pub fn render(&self) -> String {
        let auc = self.auc.map_or_else(|| "n/a".to_string(), |a| format!("{a:.6}"));
        format!(
            "name={} subset={} auc={auc} n_pos={} n_neg={}",
            self.name,
            self.subset.name(),
            self.n_pos,
            self.n_neg
        )
    }
}

/// AUC per subset for precomputed scores.
pub fn evaluate_scores(name: &str, scores: &[f64], test: &[CtrInstance], ties: TieMode) -> Result<Vec<MetricRow>> {
    if scores.len() != test.len() {
        return Err(Error::Shape(format!("{} scores for {} instances", scores.len(), test.len())));
    }
    let mut rows = Vec::with_capacity(3);
    for subset in Subset::ALL {
        let (s, y): (Vec<f64>, Vec<f64>) = test
            .iter()
            .zip(scores)
            .filter(|(i, _)| subset.contains(i.tags))
            .map(|(i, &s)| (s, i.label))
            .unzip();
        let n_pos = y.iter().filter(|&&l| l > 0.5).count();
        let n_neg = y.len() - n_pos;
        let auc = match auc_with(&s, &y, ties) {
            Ok(a) => Some(a),
            Err(Error::AucUndefined(_)) => None,
            Err(e) => return Err(e),
        };
        rows.push(MetricRow {
            name: name.to_string(),
            subset,
            auc,
            n_pos,
            n_neg,
        });
    }
    Ok(rows)
}

/// Scores `test` with a frozen model (in parallel, order preserved) and
/// reports AUC on All, New and Infreq.
pub fn evaluate(name: &str, model: &Model, test: &[CtrInstance], ties: TieMode) -> Result<Vec<MetricRow>> {
    let scores = predict_all(model, test)?;
    evaluate_scores(name, &scores, test, ties)
}

pub fn render_metrics(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    for r in rows {
        writeln!(out, "{}", r.render()).expect("write to string");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kernel: String,
    pub length: usize,
    pub sessions: usize,
    pub p50_us: f64,
    pub p99_us: f64,
    /// Multiply-accumulates of one forward pass.
    pub macs: u64,
    /// Of which inside encoder self-attention.
    pub attn_macs: u64,
}

impl BenchRow {
    pub fn render(&self) -> String {
        format!(
            "name=bench kernel={} length={} sessions={} p50_us={:.3} p99_us={:.3} macs={} attn_macs={}",
            self.kernel, self.length, self.sessions, self.p50_us, self.p99_us, self.macs, self.attn_macs
        )
    }
}

pub const MIN_BENCH_REPS: usize = 200;
pub const BENCH_SESSION_LEN: usize = 25;

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of nothing");
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// History of `length` clicks in `ceil(length / 25)` sessions.
pub fn synthetic_history(length: usize, vocab: Vocab, rng: &mut Rng) -> Vec<Event> {
    let mut t = 0;
    (0..length)
        .map(|i| {
            t += if i > 0 && i % BENCH_SESSION_LEN == 0 { 120 } else { 1 };
            Event {
                timestamp: t,
                query: 1 + rng.below(vocab.queries - 1),
                item: 1 + rng.below(vocab.items - 1),
            }
        })
        .collect()
}

/// Times forward passes at each history length. `transformer_full` runs the
/// transformer over the whole history as one session. Runs on the calling
/// thread only.
pub fn bench_latency(base: &ModelConfig, kernels: &[String], lengths: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if reps < MIN_BENCH_REPS {
        return Err(Error::Config(vec![format!("bench reps must be at least {MIN_BENCH_REPS}")]));
    }
    if lengths.contains(&0) {
        return Err(Error::Config(vec!["bench lengths must be positive".into()]));
    }
    let vocab = Vocab { queries: 64, items: 256 };
    let max_len = lengths.iter().copied().max().unwrap_or(1);
    let mut rows = Vec::new();
    for kernel in kernels {
        let (mode, full) = if kernel == "transformer_full" {
            (KernelMode::Transformer, true)
        } else {
            (kernel.parse::<KernelMode>()?, false)
        };
        let sessions_cap = max_len.div_ceil(BENCH_SESSION_LEN);
        let cfg = ModelConfig {
            kernel: mode,
            single_session: full,
            max_sessions: if full { 1 } else { sessions_cap.max(base.max_sessions) },
            max_per_session: if full { max_len } else { BENCH_SESSION_LEN },
            ..base.clone()
        };
        let mut rng = Rng::new(seed);
        let model = Model::new(cfg, vocab, &mut rng)?;
        for &len in lengths {
            let history = synthetic_history(len, vocab, &mut rng);
            let inst = CtrInstance {
                user: 0,
                timestamp: history.last().map_or(0, |e| e.timestamp) + 60,
                query: 1,
                item: 1,
                label: 1.0,
                history: std::sync::Arc::new(history),
                tags: SubsetTags::default(),
            };
            let trace = model.trace(&inst)?;
            let macs = trace.tape.total_macs();
            let attn_macs = trace.tape.macs().get("encoder.attn").copied().unwrap_or(0);
            let sessions = model.config.sessions(&inst.history).len();
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let start = Instant::now();
                let p = model.ctr_forward(&inst)?;
                times.push(start.elapsed().as_secs_f64() * 1e6);
                std::hint::black_box(p);
            }
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                kernel: kernel.clone(),
                length: len,
                sessions,
                p50_us: percentile(&times, 50.0),
                p99_us: percentile(&times, 99.0),
                macs,
                attn_macs,
            });
        }
    }
    Ok(rows)
}
