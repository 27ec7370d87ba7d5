//! Corpus ingestion, leave-one-out splits, and candidate-set construction.
//!
//! File formats:
//! - interactions: UTF-8 lines, tab-separated
//!   `user_id, item_id, timestamp, rating?, explanation?, hint_word?`
//!   with empty strings for absent optionals;
//! - features: header `d_v=<int>`, then `item_id` followed by d_v
//!   space-separated decimal reals per line.

mod synth;

pub use synth::{synthesize, SynthSpec};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One catalog item with its precomputed image feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemRecord {
    pub item_id: String,
    pub title: String,
    pub image_feature: Vec<f64>,
    pub has_image: bool,
}

/// One timestamped user-item event, optionally with review metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub rating: Option<u8>,
    pub explanation: Option<String>,
    pub hint_word: Option<String>,
}

/// Immutable interaction corpus. Interactions are stored grouped by user in
/// first-appearance order, each user's block sorted by timestamp with ties
/// broken by input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub users: Vec<String>,
    pub items: BTreeMap<String, ItemRecord>,
    pub interactions: Vec<Interaction>,
    pub d_v: usize,
    user_index: HashMap<String, Vec<usize>>,
}

/// Counts reported alongside ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestSummary {
    pub users_kept: usize,
    pub users_dropped: usize,
    pub interactions_dropped: usize,
    pub items_without_image: usize,
}

/// Per-user leave-one-out split: training prefix, validation target,
/// test target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub train: Vec<String>,
    pub val: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequentialSplits {
    pub per_user: BTreeMap<String, UserSplit>,
}

/// Indices into `Corpus::interactions` for explanation records, partitioned
/// 8:1:1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplanationSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Val,
    Test,
}

/// A ranked-evaluation candidate list: the ground truth plus sampled
/// negatives, in a fixed shuffled order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub user_id: String,
    pub candidates: Vec<String>,
    pub ground_truth: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSets {
    pub val: Vec<CandidateSet>,
    pub test: Vec<CandidateSet>,
}

impl Corpus {
    /// Assemble and validate a corpus from parts. Interactions are regrouped
    /// per user and stably sorted by timestamp.
    pub fn new(
        users: Vec<String>,
        items: BTreeMap<String, ItemRecord>,
        interactions: Vec<Interaction>,
        d_v: usize,
    ) -> Result<Self> {
        let mut by_user: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, it) in interactions.iter().enumerate() {
            by_user.entry(&it.user_id).or_default().push(i);
        }
        let mut ordered = Vec::with_capacity(interactions.len());
        let mut user_index = HashMap::new();
        for user in &users {
            let mut idx = by_user.remove(user.as_str()).unwrap_or_default();
            if idx.len() < 3 {
                return Err(Error::Config(format!(
                    "user '{}' has {} interactions, leave-one-out needs at least 3",
                    user,
                    idx.len()
                )));
            }
            idx.sort_by_key(|&i| interactions[i].timestamp); // stable: ties keep input order
            let start = ordered.len();
            for i in idx {
                ordered.push(interactions[i].clone());
            }
            user_index.insert(user.clone(), (start..ordered.len()).collect());
        }
        if !by_user.is_empty() {
            let mut stray: Vec<&str> = by_user.keys().copied().collect();
            stray.sort();
            return Err(Error::Config(format!(
                "interactions reference users missing from the user list: {}",
                stray.join(", ")
            )));
        }
        for it in &ordered {
            if !items.contains_key(&it.item_id) {
                return Err(Error::Config(format!(
                    "interaction references unknown item '{}'",
                    it.item_id
                )));
            }
        }
        for rec in items.values() {
            if rec.has_image && rec.image_feature.len() != d_v {
                return Err(Error::Dimension {
                    what: format!("image feature of item '{}'", rec.item_id),
                    expected: d_v.to_string(),
                    got: rec.image_feature.len().to_string(),
                });
            }
        }
        Ok(Corpus {
            users,
            items,
            interactions: ordered,
            d_v,
            user_index,
        })
    }

    /// Chronological interaction sequence for one user.
    pub fn user_sequence(&self, user: &str) -> Vec<&Interaction> {
        self.user_index
            .get(user)
            .map(|idx| idx.iter().map(|&i| &self.interactions[i]).collect())
            .unwrap_or_default()
    }

    /// Interaction indices for one user, in chronological order.
    pub fn user_interaction_indices(&self, user: &str) -> &[usize] {
        self.user_index
            .get(user)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn feature_of(&self, item_id: &str) -> Option<&[f64]> {
        self.items.get(item_id).map(|r| r.image_feature.as_slice())
    }

    /// Write the corpus back to the ingestion formats. Items without images
    /// are omitted from the feature file so ingestion is a fixed point.
    pub fn save(&self, interactions_path: &Path, features_path: &Path) -> Result<()> {
        let mut out = String::new();
        for it in &self.interactions {
            let rating = it.rating.map(|r| r.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                it.user_id,
                it.item_id,
                it.timestamp,
                rating,
                it.explanation.as_deref().unwrap_or(""),
                it.hint_word.as_deref().unwrap_or("")
            ));
        }
        std::fs::write(interactions_path, out)?;

        let mut feats = format!("d_v={}\n", self.d_v);
        for rec in self.items.values() {
            if !rec.has_image {
                continue;
            }
            feats.push_str(&rec.item_id);
            for x in &rec.image_feature {
                feats.push(' ');
                feats.push_str(&format!("{x:.9}"));
            }
            feats.push('\n');
        }
        std::fs::write(features_path, feats)?;
        Ok(())
    }
}

fn parse_interaction_line(path: &str, lineno: usize, line: &str) -> Result<Interaction> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(Error::Parse {
            path: path.to_string(),
            line: lineno,
            msg: format!("expected 6 tab-separated fields, got {}", fields.len()),
        });
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err(Error::Parse {
            path: path.to_string(),
            line: lineno,
            msg: "user_id and item_id must be non-empty".into(),
        });
    }
    let timestamp: i64 = fields[2].parse().map_err(|_| Error::Parse {
        path: path.to_string(),
        line: lineno,
        msg: format!("bad timestamp '{}'", fields[2]),
    })?;
    let rating = if fields[3].is_empty() {
        None
    } else {
        let r: u8 = fields[3].parse().map_err(|_| Error::Parse {
            path: path.to_string(),
            line: lineno,
            msg: format!("bad rating '{}'", fields[3]),
        })?;
        if !(1..=5).contains(&r) {
            return Err(Error::Parse {
                path: path.to_string(),
                line: lineno,
                msg: format!("rating {r} outside 1..=5"),
            });
        }
        Some(r)
    };
    let opt = |s: &str| {
        if s.is_empty() {
            None
        } else {
            Some(s.to_string())
        }
    };
    Ok(Interaction {
        user_id: fields[0].to_string(),
        item_id: fields[1].to_string(),
        timestamp,
        rating,
        explanation: opt(fields[4]),
        hint_word: opt(fields[5]),
    })
}

fn parse_feature_file(path: &Path) -> Result<(usize, BTreeMap<String, Vec<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let pathstr = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: pathstr.clone(),
        line: 1,
        msg: "missing d_v header".into(),
    })?;
    let d_v: usize = header
        .strip_prefix("d_v=")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Parse {
            path: pathstr.clone(),
            line: 1,
            msg: format!("expected 'd_v=<int>' header, got '{header}'"),
        })?;
    if d_v == 0 {
        return Err(Error::Parse {
            path: pathstr,
            line: 1,
            msg: "d_v must be positive".into(),
        });
    }
    let mut features = BTreeMap::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let item_id = parts.next().unwrap().to_string();
        let vals: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| Error::Parse {
                    path: pathstr.clone(),
                    line: i + 1,
                    msg: format!("bad feature value '{p}'"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != d_v {
            return Err(Error::Dimension {
                what: format!("feature vector of item '{item_id}'"),
                expected: d_v.to_string(),
                got: vals.len().to_string(),
            });
        }
        features.insert(item_id, vals);
    }
    Ok((d_v, features))
}

/// Read interaction and feature files into a validated corpus. Users with
/// fewer than 3 interactions are dropped and counted in the summary.
pub fn ingest(interactions_path: &Path, features_path: &Path) -> Result<(Corpus, IngestSummary)> {
    let text = std::fs::read_to_string(interactions_path)?;
    let pathstr = interactions_path.display().to_string();
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        raw.push(parse_interaction_line(&pathstr, i + 1, line)?);
    }
    let (d_v, features) = parse_feature_file(features_path)?;

    let mut counts: HashMap<String, usize> = HashMap::new();
    for it in &raw {
        *counts.entry(it.user_id.clone()).or_insert(0) += 1;
    }
    let mut users = Vec::new();
    let mut seen = HashSet::new();
    let mut summary = IngestSummary::default();
    for it in &raw {
        if !seen.insert(it.user_id.clone()) {
            continue;
        }
        if counts[it.user_id.as_str()] >= 3 {
            users.push(it.user_id.clone());
        } else {
            summary.users_dropped += 1;
            summary.interactions_dropped += counts[it.user_id.as_str()];
        }
    }
    summary.users_kept = users.len();
    let kept: Vec<Interaction> = raw
        .into_iter()
        .filter(|it| counts[it.user_id.as_str()] >= 3)
        .collect();

    // Item catalog: union of feature-file items and interacted items.
    let mut items = BTreeMap::new();
    for (item_id, feat) in features {
        items.insert(
            item_id.clone(),
            ItemRecord {
                item_id: item_id.clone(),
                title: item_id,
                image_feature: feat,
                has_image: true,
            },
        );
    }
    for it in &kept {
        if !items.contains_key(&it.item_id) {
            summary.items_without_image += 1;
            items.insert(
                it.item_id.clone(),
                ItemRecord {
                    item_id: it.item_id.clone(),
                    title: it.item_id.clone(),
                    image_feature: vec![0.0; d_v],
                    has_image: false,
                },
            );
        }
    }

    let corpus = Corpus::new(users, items, kept, d_v)?;
    Ok((corpus, summary))
}

/// Leave-one-out: per user with chronological sequence `[i1..in]`, training
/// sequence is `[i1..i(n-2)]`, validation target `i(n-1)`, test target `in`.
pub fn build_sequential_splits(corpus: &Corpus) -> SequentialSplits {
    let mut per_user = BTreeMap::new();
    for user in &corpus.users {
        let seq: Vec<String> = corpus
            .user_sequence(user)
            .iter()
            .map(|it| it.item_id.clone())
            .collect();
        let n = seq.len();
        debug_assert!(n >= 3);
        per_user.insert(
            user.clone(),
            UserSplit {
                train: seq[..n - 2].to_vec(),
                val: seq[n - 2].clone(),
                test: seq[n - 1].clone(),
            },
        );
    }
    SequentialSplits { per_user }
}

/// Sample a candidate list for one (user, ground truth) pair: `size - 1`
/// uniform negatives the user never interacted with, plus the truth, in a
/// shuffled order.
pub fn sample_candidates(
    corpus: &Corpus,
    user: &str,
    ground_truth: &str,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CandidateSet> {
    let interacted: HashSet<&str> = corpus
        .user_sequence(user)
        .iter()
        .map(|it| it.item_id.as_str())
        .collect();
    let mut eligible: Vec<&str> = corpus
        .items
        .keys()
        .map(|s| s.as_str())
        .filter(|id| !interacted.contains(id))
        .collect();
    if eligible.len() + 1 < size {
        return Err(Error::Config(format!(
            "user '{}' has only {} eligible negatives for candidate size {}; \
             use a smaller candidate size (eval.candidates)",
            user,
            eligible.len(),
            size
        )));
    }
    eligible.shuffle(rng);
    let mut candidates: Vec<String> = eligible[..size - 1]
        .iter()
        .map(|s| s.to_string())
        .collect();
    candidates.push(ground_truth.to_string());
    candidates.shuffle(rng);
    Ok(CandidateSet {
        user_id: user.to_string(),
        candidates,
        ground_truth: ground_truth.to_string(),
    })
}

/// Build one candidate set per user per eval split. Negatives are sampled
/// uniformly without replacement from items the user never interacted with;
/// deterministic for a given seed.
pub fn build_candidate_sets(
    corpus: &Corpus,
    splits: &SequentialSplits,
    seed: u64,
    size: usize,
) -> Result<CandidateSets> {
    if size < 2 {
        return Err(Error::Config(format!(
            "candidate size {size} must be at least 2"
        )));
    }
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (user, split) in &splits.per_user {
        // Independent per-user streams so one user's sets do not shift
        // another's when the user list changes.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fingerprint64(user.as_bytes()));
        val.push(sample_candidates(corpus, user, &split.val, size, &mut rng)?);
        test.push(sample_candidates(corpus, user, &split.test, size, &mut rng)?);
    }
    Ok(CandidateSets { val, test })
}

/// Deterministic 8:1:1 partition of explanation-bearing interactions.
pub fn build_explanation_splits(corpus: &Corpus, seed: u64) -> Result<ExplanationSplits> {
    let mut idx: Vec<usize> = corpus
        .interactions
        .iter()
        .enumerate()
        .filter(|(_, it)| it.explanation.is_some())
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::EmptyTask(
            "no interactions carry explanation text".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n = idx.len();
    let n_val = ((n as f64) / 10.0).round() as usize;
    let n_test = n_val.min(n.saturating_sub(n_val));
    let n_train = n - n_val - n_test;
    Ok(ExplanationSplits {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    })
}

/// Stable FNV-1a 64-bit hash, used for content fingerprints and per-name
/// RNG stream derivation.
pub fn fingerprint64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
