//! Synthetic search-and-click logs with a known interest process.
//!
//! Categories carry latent centroids in a small Euclidean space; each query
//! sits near its category centroid and each item is scattered around it. A
//! user's interest under query `q` of category `c` is `c_q + δ_{u,c}`, with an
//! independent offset per category, so history in one category says nothing
//! about another. A click picks the item nearest to the (noisy) interest.
//!
//! Category popularity follows a power law, so head categories dominate
//! histories through repeated queries while tail categories appear rarely.
//! A fraction of targets use a category the user never touched.
//!
//! Real logs map onto the same records: a review or search-click log gives
//! `(user, minutes since epoch, query or category id, item id)` per event,
//! with the last event per user held out as the test target.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CtrInstance, Event, SubsetTags, Vocab};
use crate::numerics::{squared_distance, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub users: usize,
    pub categories: usize,
    pub queries_per_category: usize,
    pub items_per_category: usize,
    pub latent_dim: usize,
    /// Spread of category centroids.
    pub category_scale: f64,
    /// Spread of query centroids around their category.
    pub query_scale: f64,
    /// Spread of items around their category.
    pub item_scale: f64,
    /// Scale of the per-user, per-category interest offset.
    pub user_offset: f64,
    /// Noise added to the interest before picking the clicked item.
    pub click_noise: f64,
    pub history_min: usize,
    pub history_max: usize,
    /// Upper bound on the number of categories a user browses.
    pub max_user_categories: usize,
    pub new_query_prob: f64,
    /// Power-law exponent of category popularity; 0 is uniform.
    pub skew: f64,
    /// Probability that the next click stays in the current session.
    pub session_continue_prob: f64,
    pub within_gap_max: u64,
    pub between_gap_min: u64,
    pub between_gap_max: u64,
    pub train_targets: usize,
    /// Negatives per positive in the train split.
    pub negatives: usize,
    /// Negatives per positive in the test split.
    pub test_negatives: usize,
    /// Per-user query preference within a category is `u^exponent`, `u`
    /// uniform; larger values concentrate clicks on fewer queries.
    pub query_habit_exponent: f64,
    /// Quantile of training category counts below which a category is infrequent.
    pub infreq_quantile: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 7,
            users: 5000,
            categories: 40,
            queries_per_category: 3,
            items_per_category: 30,
            latent_dim: 8,
            category_scale: 3.0,
            query_scale: 0.7,
            item_scale: 1.0,
            user_offset: 0.6,
            click_noise: 0.1,
            history_min: 10,
            history_max: 40,
            max_user_categories: 5,
            new_query_prob: 0.3,
            skew: 1.2,
            session_continue_prob: 0.75,
            within_gap_max: 20,
            between_gap_min: 60,
            between_gap_max: 2000,
            train_targets: 2,
            negatives: 1,
            test_negatives: 1,
            query_habit_exponent: 3.0,
            infreq_quantile: 0.25,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("users", self.users),
            ("categories", self.categories),
            ("queries_per_category", self.queries_per_category),
            ("latent_dim", self.latent_dim),
            ("history_min", self.history_min),
            ("max_user_categories", self.max_user_categories),
            ("negatives", self.negatives),
            ("test_negatives", self.test_negatives),
        ] {
            if v == 0 {
                errs.push(format!("datagen.{name} must be positive"));
            }
        }
        if self.items_per_category <= self.negatives.max(self.test_negatives) {
            errs.push("datagen.items_per_category must exceed datagen.negatives and datagen.test_negatives".into());
        }
        if self.history_max < self.history_min {
            errs.push("datagen.history_max must be at least datagen.history_min".into());
        }
        for (name, p) in [
            ("new_query_prob", self.new_query_prob),
            ("session_continue_prob", self.session_continue_prob),
            ("infreq_quantile", self.infreq_quantile),
        ] {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("datagen.{name} must lie in [0, 1]"));
            }
        }
        for (name, x) in [
            ("category_scale", self.category_scale),
            ("query_scale", self.query_scale),
            ("item_scale", self.item_scale),
            ("user_offset", self.user_offset),
            ("click_noise", self.click_noise),
            ("skew", self.skew),
            ("query_habit_exponent", self.query_habit_exponent),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                errs.push(format!("datagen.{name} must be finite and non-negative"));
            }
        }
        if self.within_gap_max >= self.between_gap_min {
            errs.push("datagen.within_gap_max must be below datagen.between_gap_min".into());
        }
        if self.between_gap_max < self.between_gap_min {
            errs.push("datagen.between_gap_max must be at least datagen.between_gap_min".into());
        }
        errs
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            queries: 1 + self.categories * self.queries_per_category,
            items: 1 + self.categories * self.items_per_category,
        }
    }
}

/// Latent geometry shared by all users.
#[derive(Clone, Debug)]
pub struct World {
    pub category_centroids: Vec<Vec<f64>>,
    /// Indexed by query id; row 0 is unused.
    pub query_centroids: Vec<Vec<f64>>,
    pub query_category: Vec<usize>,
    /// Indexed by item id; row 0 is unused.
    pub item_vectors: Vec<Vec<f64>>,
    pub item_category: Vec<usize>,
    /// Normalized popularity per category.
    pub frequency: Vec<f64>,
}

impl World {
    pub fn new(cfg: &GenConfig, rng: &mut Rng) -> Self {
        let d = cfg.latent_dim;
        let category_centroids: Vec<Vec<f64>> = (0..cfg.categories).map(|_| rng.normal_vec(d, cfg.category_scale)).collect();
        let mut query_centroids = vec![vec![0.0; d]];
        let mut query_category = vec![usize::MAX];
        let mut item_vectors = vec![vec![0.0; d]];
        let mut item_category = vec![usize::MAX];
        for (c, centroid) in category_centroids.iter().enumerate() {
            for _ in 0..cfg.queries_per_category {
                let off = rng.normal_vec(d, cfg.query_scale);
                query_centroids.push(centroid.iter().zip(off).map(|(a, b)| a + b).collect());
                query_category.push(c);
            }
            for _ in 0..cfg.items_per_category {
                let off = rng.normal_vec(d, cfg.item_scale);
                item_vectors.push(centroid.iter().zip(off).map(|(a, b)| a + b).collect());
                item_category.push(c);
            }
        }
        // Popularity rank is a random permutation so it is unrelated to geometry.
        let mut ranks: Vec<usize> = (0..cfg.categories).collect();
        rng.shuffle(&mut ranks);
        let raw: Vec<f64> = ranks.iter().map(|&r| ((r + 1) as f64).powf(-cfg.skew)).collect();
        let total: f64 = raw.iter().sum();
        World {
            category_centroids,
            query_centroids,
            query_category,
            item_vectors,
            item_category,
            frequency: raw.iter().map(|w| w / total).collect(),
        }
    }

    pub fn sample_category(&self, rng: &mut Rng) -> usize {
        rng.weighted(&self.frequency)
    }

    pub fn queries_of(&self, category: usize, per_category: usize) -> std::ops::Range<usize> {
        1 + category * per_category..1 + (category + 1) * per_category
    }

    pub fn items_of(&self, category: usize, per_category: usize) -> std::ops::Range<usize> {
        1 + category * per_category..1 + (category + 1) * per_category
    }

    /// Item of `category` nearest to `point`; lowest id wins ties.
    pub fn nearest_item(&self, category: usize, per_category: usize, point: &[f64]) -> usize {
        self.items_of(category, per_category)
            .map(|i| (squared_distance(&self.item_vectors[i], point), i))
            .fold((f64::INFINITY, 0), |best, cur| if cur.0 < best.0 { cur } else { best })
            .1
    }
}

/// Generator-side facts the model never sees.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub world: World,
    /// `offsets[user][category]`.
    pub offsets: Vec<Vec<Vec<f64>>>,
}

impl GroundTruth {
    /// Noise-free interest of `user` under `query`.
    pub fn interest(&self, user: usize, query: usize) -> Vec<f64> {
        let c = self.world.query_category[query];
        self.world.query_centroids[query]
            .iter()
            .zip(&self.offsets[user][c])
            .map(|(a, b)| a + b)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    History,
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::History => "history",
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub digest: String,
    pub histories: Vec<Arc<Vec<Event>>>,
    pub train: Vec<CtrInstance>,
    pub test: Vec<CtrInstance>,
    /// Category of each query id (index 0 unused).
    pub query_category: Vec<usize>,
    pub infreq_threshold: f64,
    /// Present only for freshly generated data.
    pub truth: Option<GroundTruth>,
}

struct UserData {
    history: Vec<Event>,
    targets: Vec<(Split, Event, Vec<usize>)>,
    offsets: Vec<Vec<f64>>,
}

fn gen_user(cfg: &GenConfig, world: &World, rng: &mut Rng) -> UserData {
    let d = cfg.latent_dim;
    let offsets: Vec<Vec<f64>> = (0..cfg.categories).map(|_| rng.normal_vec(d, cfg.user_offset)).collect();
    let interest = |q: usize| -> Vec<f64> {
        let c = world.query_category[q];
        world.query_centroids[q].iter().zip(&offsets[c]).map(|(a, b)| a + b).collect()
    };

    // Browsed categories by popularity, without replacement.
    let n_cat = 1 + rng.below(cfg.max_user_categories.min(cfg.categories));
    let mut weights = world.frequency.clone();
    let mut cats = Vec::with_capacity(n_cat);
    for _ in 0..n_cat {
        let c = rng.weighted(&weights);
        weights[c] = 0.0;
        cats.push(c);
    }
    // Per-category query habits: a few queries dominate each category.
    let habits: BTreeMap<usize, Vec<f64>> = (0..cfg.categories)
        .map(|c| (c, (0..cfg.queries_per_category).map(|_| rng.uniform().powf(cfg.query_habit_exponent) + 1e-3).collect()))
        .collect();
    let pick_query = |c: usize, rng: &mut Rng| world.queries_of(c, cfg.queries_per_category).start + rng.weighted(&habits[&c]);
    let click = |q: usize, rng: &mut Rng| {
        let point: Vec<f64> = interest(q).into_iter().map(|x| x + cfg.click_noise * rng.normal()).collect();
        world.nearest_item(world.query_category[q], cfg.items_per_category, &point)
    };

    let len = cfg.history_min + rng.below(cfg.history_max - cfg.history_min + 1);
    let cat_weights: Vec<f64> = cats.iter().map(|&c| world.frequency[c]).collect();
    let mut t = rng.below(10_000) as u64;
    let mut history = Vec::with_capacity(len);
    for i in 0..len {
        if i > 0 {
            t += if rng.bernoulli(cfg.session_continue_prob) {
                1 + rng.below(cfg.within_gap_max as usize) as u64
            } else {
                cfg.between_gap_min + rng.below((cfg.between_gap_max - cfg.between_gap_min + 1) as usize) as u64
            };
        }
        let c = cats[rng.weighted(&cat_weights)];
        let q = pick_query(c, rng);
        history.push(Event {
            timestamp: t,
            query: q,
            item: click(q, rng),
        });
    }

    let seen: BTreeSet<usize> = history.iter().map(|e| world.query_category[e.query]).collect();
    let unseen: Vec<f64> = (0..cfg.categories)
        .map(|c| if seen.contains(&c) { 0.0 } else { world.frequency[c] })
        .collect();
    let seen_list: Vec<usize> = seen.iter().copied().collect();
    let mut targets = Vec::with_capacity(cfg.train_targets + 1);
    for k in 0..=cfg.train_targets {
        let split = if k == cfg.train_targets { Split::Test } else { Split::Train };
        t += cfg.between_gap_min + rng.below((cfg.between_gap_max - cfg.between_gap_min + 1) as usize) as u64;
        let new = rng.bernoulli(cfg.new_query_prob) && unseen.iter().any(|&w| w > 0.0);
        let c = if new {
            rng.weighted(&unseen)
        } else {
            seen_list[rng.below(seen_list.len())]
        };
        let q = pick_query(c, rng);
        let pos = click(q, rng);
        let mut pool: Vec<usize> = world.items_of(c, cfg.items_per_category).filter(|&i| i != pos).collect();
        rng.shuffle(&mut pool);
        pool.truncate(if split == Split::Test { cfg.test_negatives } else { cfg.negatives });
        targets.push((split, Event { timestamp: t, query: q, item: pos }, pool));
    }
    UserData {
        history,
        targets,
        offsets,
    }
}

/// Generates the world and all users; per-user substreams make the result
/// independent of scheduling.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let root = Rng::new(cfg.seed);
    let world = World::new(cfg, &mut root.split(0));
    let users: Vec<UserData> = (0..cfg.users)
        .into_par_iter()
        .map(|u| gen_user(cfg, &world, &mut root.split(1 + u as u64)))
        .collect();

    let mut histories = Vec::with_capacity(users.len());
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut offsets = Vec::with_capacity(users.len());
    for (u, data) in users.into_iter().enumerate() {
        let hist = Arc::new(data.history);
        for (split, ev, negs) in data.targets {
            let out = if split == Split::Train { &mut train } else { &mut test };
            for (item, label) in std::iter::once((ev.item, 1.0)).chain(negs.into_iter().map(|i| (i, 0.0))) {
                out.push(CtrInstance {
                    user: u,
                    timestamp: ev.timestamp,
                    query: ev.query,
                    item,
                    label,
                    history: Arc::clone(&hist),
                    tags: SubsetTags::default(),
                });
            }
        }
        histories.push(hist);
        offsets.push(data.offsets);
    }
    let mut ds = Dataset {
        vocab: cfg.vocab(),
        digest: cfg.digest(),
        histories,
        train,
        test,
        query_category: world.query_category.clone(),
        infreq_threshold: 0.0,
        truth: Some(GroundTruth { world, offsets }),
    };
    let counts = ds.train_category_counts(cfg.categories);
    ds.infreq_threshold = quantile_threshold(&counts, cfg.infreq_quantile);
    tag_subsets(&mut ds.test, &counts, ds.infreq_threshold, &ds.query_category);
    Ok(ds)
}

impl Dataset {
    /// Clicks per category over history events and positive train targets.
    pub fn train_category_counts(&self, categories: usize) -> Vec<usize> {
        let mut counts = vec![0; categories];
        for h in &self.histories {
            for e in h.iter() {
                counts[self.query_category[e.query]] += 1;
            }
        }
        for inst in self.train.iter().filter(|i| i.label > 0.5) {
            counts[self.query_category[inst.query]] += 1;
        }
        counts
    }

    pub fn categories(&self) -> usize {
        self.query_category.iter().filter(|&&c| c != usize::MAX).max().map_or(0, |c| c + 1)
    }
}

/// Count at the given quantile (linear interpolation); categories strictly
/// below it are infrequent.
pub fn quantile_threshold(counts: &[usize], q: f64) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    let mut sorted: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Marks New (category absent from the user's history) and Infreq (train
/// count of the category below `threshold`).
pub fn tag_subsets(test: &mut [CtrInstance], train_counts: &[usize], threshold: f64, query_category: &[usize]) {
    for inst in test {
        let c = query_category[inst.query];
        inst.tags = SubsetTags {
            new: inst.history.iter().all(|e| query_category[e.query] != c),
            infreq: (train_counts[c] as f64) < threshold,
        };
    }
}

fn tag_token(t: SubsetTags) -> &'static str {
    match (t.new, t.infreq) {
        (false, false) => "all",
        (true, false) => "new",
        (false, true) => "infreq",
        (true, true) => "new+infreq",
    }
}

fn parse_tag(s: &str) -> Result<SubsetTags> {
    Ok(match s {
        "all" | "-" => SubsetTags::default(),
        "new" => SubsetTags { new: true, infreq: false },
        "infreq" => SubsetTags { new: false, infreq: true },
        "new+infreq" => SubsetTags { new: true, infreq: true },
        other => return Err(Error::Format(format!("unknown subset tag `{other}`"))),
    })
}

/// Contents of the sidecar header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub query_vocab: usize,
    pub item_vocab: usize,
    pub datagen_digest: String,
    pub infreq_threshold: f64,
    /// Category per query id, index 0 unused.
    pub query_category: Vec<Option<usize>>,
}

pub const DATA_FILE: &str = "data.tsv";
pub const HEADER_FILE: &str = "data.header.json";
const FORMAT: &str = "kfatt-dataset-1";

impl Dataset {
    pub fn data_path(dir: &Path) -> PathBuf {
        dir.join(DATA_FILE)
    }

    pub fn header_path(dir: &Path) -> PathBuf {
        dir.join(HEADER_FILE)
    }

    /// Writes `data.tsv` and `data.header.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let header = DatasetHeader {
            format: FORMAT.into(),
            query_vocab: self.vocab.queries,
            item_vocab: self.vocab.items,
            datagen_digest: self.digest.clone(),
            infreq_threshold: self.infreq_threshold,
            query_category: self.query_category.iter().map(|&c| (c != usize::MAX).then_some(c)).collect(),
        };
        let json = serde_json::to_string_pretty(&header).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(Self::header_path(dir), json + "\n")?;

        let mut out = BufWriter::new(fs::File::create(Self::data_path(dir))?);
        writeln!(out, "# datagen_digest={}", self.digest)?;
        writeln!(out, "user_id\ttimestamp_minutes\tquery_id\titem_id\tlabel\tsplit\tsubset_tag")?;
        let mut by_user: BTreeMap<usize, (Vec<&CtrInstance>, Vec<&CtrInstance>)> = BTreeMap::new();
        for inst in &self.train {
            by_user.entry(inst.user).or_default().0.push(inst);
        }
        for inst in &self.test {
            by_user.entry(inst.user).or_default().1.push(inst);
        }
        for (u, hist) in self.histories.iter().enumerate() {
            for e in hist.iter() {
                writeln!(out, "{u}\t{}\t{}\t{}\t1\thistory\t-", e.timestamp, e.query, e.item)?;
            }
            if let Some((tr, te)) = by_user.get(&u) {
                for (split, insts) in [(Split::Train, tr), (Split::Test, te)] {
                    for i in insts {
                        let tag = if split == Split::Test { tag_token(i.tags) } else { "-" };
                        writeln!(
                            out,
                            "{u}\t{}\t{}\t{}\t{}\t{}\t{tag}",
                            i.timestamp,
                            i.query,
                            i.item,
                            i.label as u8,
                            split.name()
                        )?;
                    }
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Dataset> {
        let header: DatasetHeader = serde_json::from_str(&fs::read_to_string(Self::header_path(dir))?)
            .map_err(|e| Error::Format(format!("{}: {e}", HEADER_FILE)))?;
        if header.format != FORMAT {
            return Err(Error::Format(format!("unsupported dataset format `{}`", header.format)));
        }
        let file = BufReader::new(fs::File::open(Self::data_path(dir))?);
        let mut hist: BTreeMap<usize, Vec<Event>> = BTreeMap::new();
        let mut rows: Vec<(usize, Event, f64, Split, SubsetTags)> = Vec::new();
        for (n, line) in file.lines().enumerate() {
            let line = line?;
            if line.starts_with('#') || line.starts_with("user_id") || line.is_empty() {
                if let Some(d) = line.strip_prefix("# datagen_digest=") {
                    if d != header.datagen_digest {
                        return Err(Error::DigestMismatch(format!(
                            "data file digest {d} does not match header {}",
                            header.datagen_digest
                        )));
                    }
                }
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Format(format!("{}:{}: malformed record", DATA_FILE, n + 1));
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad());
            let user = num(f[0])? as usize;
            let ev = Event {
                timestamp: num(f[1])?,
                query: num(f[2])? as usize,
                item: num(f[3])? as usize,
            };
            let label = match f[4] {
                "0" => 0.0,
                "1" => 1.0,
                _ => return Err(bad()),
            };
            match f[5] {
                "history" => hist.entry(user).or_default().push(ev),
                "train" => rows.push((user, ev, label, Split::Train, SubsetTags::default())),
                "test" => rows.push((user, ev, label, Split::Test, parse_tag(f[6])?)),
                _ => return Err(bad()),
            }
        }
        let n_users = hist.keys().chain(rows.iter().map(|r| &r.0)).max().map_or(0, |u| u + 1);
        let histories: Vec<Arc<Vec<Event>>> = (0..n_users).map(|u| Arc::new(hist.remove(&u).unwrap_or_default())).collect();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (user, ev, label, split, tags) in rows {
            let inst = CtrInstance {
                user,
                timestamp: ev.timestamp,
                query: ev.query,
                item: ev.item,
                label,
                history: Arc::clone(&histories[user]),
                tags,
            };
            if split == Split::Train {
                train.push(inst);
            } else {
                test.push(inst);
            }
        }
        Ok(Dataset {
            vocab: Vocab {
                queries: header.query_vocab,
                items: header.item_vocab,
            },
            digest: header.datagen_digest,
            histories,
            train,
            test,
            query_category: header.query_category.iter().map(|c| c.unwrap_or(usize::MAX)).collect(),
            infreq_threshold: header.infreq_threshold,
            truth: None,
        })
    }
}
