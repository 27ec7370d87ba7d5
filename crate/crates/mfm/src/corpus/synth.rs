//! Deterministic synthetic corpus generator.
//!
//! Two planted regimes:
//! - cyclic: each user walks a private cyclic item pattern, following it at
//!   each step with probability `pattern_prob` and otherwise drawing an item
//!   uniformly from the catalog;
//! - visual clusters: items carry cluster-centroid image features and each
//!   user's whole sequence is drawn from one cluster, with item ids assigned
//!   by a global shuffle so that the id text carries no cluster signal.
//!   With two or more users per cluster, users pair up and each user's last
//!   two interactions — the future held-out items under leave-one-out
//!   splitting — come from the partner's training prefix. Held-out item ids
//!   are then ids the corpus also trains on (for the partner), so a model
//!   cannot separate them from negatives by id familiarity alone; only the
//!   image features tie them to the user's own history.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fingerprint64, Corpus, Interaction, ItemRecord};
use crate::error::{Error, Result};

const HINT_LEXICON: [&str; 8] = [
    "comfortable",
    "durable",
    "stylish",
    "affordable",
    "colorful",
    "compact",
    "reliable",
    "lightweight",
];

const ASPECTS: [&str; 6] = ["fit", "design", "material", "finish", "battery", "strap"];

/// Generator parameters. `candidate_size` is not used for generation itself;
/// it bounds the catalog so candidate sampling stays feasible downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub users: usize,
    pub items: usize,
    pub d_v: usize,
    pub min_seq: usize,
    pub max_seq: usize,
    /// Probability that each step follows the user's cyclic pattern.
    pub pattern_prob: f64,
    pub pattern_period: usize,
    pub candidate_size: usize,
    /// Fraction of interactions carrying an explanation sentence and hint.
    pub explanation_rate: f64,
    /// Fraction of items with a real image feature vector.
    pub image_coverage: f64,
    /// When > 0, switch to the visual-cluster regime with this many clusters.
    pub visual_clusters: usize,
    /// Stddev of the perturbation added to a cluster centroid per item.
    pub cluster_noise: f64,
}

impl SynthSpec {
    /// Small corpus suitable for unit tests and quick experiments.
    pub fn desk_default(users: usize, items: usize) -> Self {
        SynthSpec {
            users,
            items,
            d_v: 16,
            min_seq: 4,
            max_seq: 5,
            pattern_prob: 0.9,
            pattern_period: 3,
            candidate_size: 5,
            explanation_rate: 0.5,
            image_coverage: 1.0,
            visual_clusters: 0,
            cluster_noise: 0.08,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.d_v == 0 {
            return Err(Error::Config(
                "users, items, and d_v must all be positive".into(),
            ));
        }
        if self.min_seq < 3 {
            return Err(Error::Config(format!(
                "min_seq {} too small: leave-one-out needs at least 3 interactions per user",
                self.min_seq
            )));
        }
        if self.max_seq < self.min_seq {
            return Err(Error::Config(format!(
                "max_seq {} is below min_seq {}",
                self.max_seq, self.min_seq
            )));
        }
        if !(0.0..=1.0).contains(&self.pattern_prob) {
            return Err(Error::Config(format!(
                "pattern_prob {} outside [0, 1]",
                self.pattern_prob
            )));
        }
        for (name, v) in [
            ("explanation_rate", self.explanation_rate),
            ("image_coverage", self.image_coverage),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.pattern_period == 0 || self.pattern_period > self.items {
            return Err(Error::Config(format!(
                "pattern_period {} must be in 1..={}",
                self.pattern_period, self.items
            )));
        }
        if self.items < self.candidate_size + self.max_seq {
            return Err(Error::Config(format!(
                "item count {} is below candidate size {} + max sequence length {}",
                self.items, self.candidate_size, self.max_seq
            )));
        }
        if self.cluster_noise < 0.0 {
            return Err(Error::Config(format!(
                "cluster_noise {} must be non-negative",
                self.cluster_noise
            )));
        }
        if self.visual_clusters > 0 {
            let per_cluster = self.items / self.visual_clusters;
            let users_per_cluster = self.users.div_ceil(self.visual_clusters);
            let quota = per_cluster / users_per_cluster.max(1);
            if users_per_cluster >= 2 {
                if self.users % self.visual_clusters != 0 || users_per_cluster % 2 != 0 {
                    return Err(Error::Config(format!(
                        "paired visual clusters need an even, equal number of users per \
                         cluster; {} users do not split over {} clusters that way",
                        self.users, self.visual_clusters
                    )));
                }
                if self.min_seq < 5 {
                    return Err(Error::Config(format!(
                        "paired visual clusters need min_seq >= 5 so a partner's training \
                         prefix can donate two held-out items, got {}",
                        self.min_seq
                    )));
                }
                if quota < self.max_seq - 2 {
                    return Err(Error::Config(format!(
                        "paired visual-cluster regime needs at least max_seq-2={} items per \
                         user per cluster, but {} items over {} clusters and {} users leave \
                         only {}",
                        self.max_seq - 2,
                        self.items,
                        self.visual_clusters,
                        self.users,
                        quota
                    )));
                }
            } else if quota < self.max_seq {
                return Err(Error::Config(format!(
                    "visual-cluster regime needs at least max_seq={} items per user per \
                     cluster, but {} items over {} clusters and {} users leave only {}",
                    self.max_seq, self.items, self.visual_clusters, self.users, quota
                )));
            }
        }
        Ok(())
    }
}

fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fingerprint64(label.as_bytes()))
}

fn unit_norm(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Box-Muller; two uniforms per normal keeps the stream layout simple.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

fn explanation_sentence(rng: &mut ChaCha8Rng) -> (String, String) {
    let hint = *HINT_LEXICON.choose(rng).unwrap();
    let aspect = *ASPECTS.choose(rng).unwrap();
    let text = match rng.gen_range(0..3u8) {
        0 => format!("the {aspect} feels really {hint}"),
        1 => format!("such a {hint} {aspect} for daily use"),
        _ => format!("i love how {hint} the {aspect} is"),
    };
    (text, hint.to_string())
}

/// Generate a corpus. Same spec and seed always produce byte-identical
/// output, including the iteration order of the item catalog.
pub fn synthesize(spec: &SynthSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let item_ids: Vec<String> = (0..spec.items).map(|i| format!("item_{i:04}")).collect();
    let users: Vec<String> = (0..spec.users).map(|u| format!("user_{u:03}")).collect();

    // Item features, and in the visual regime the cluster assignment.
    let mut feature_rng = stream(seed, "features");
    let mut cluster_of: Vec<usize> = vec![0; spec.items];
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(spec.items);
    let mut cluster_members: Vec<Vec<usize>> = Vec::new();
    if spec.visual_clusters > 0 {
        let centroids: Vec<Vec<f64>> = (0..spec.visual_clusters)
            .map(|_| {
                let mut c = gaussian_vec(&mut feature_rng, spec.d_v);
                unit_norm(&mut c);
                c
            })
            .collect();
        // Shuffle item indices before assigning clusters so that the numeric
        // id says nothing about the cluster.
        let mut order: Vec<usize> = (0..spec.items).collect();
        order.shuffle(&mut stream(seed, "cluster-assignment"));
        cluster_members = vec![Vec::new(); spec.visual_clusters];
        for (rank, &item) in order.iter().enumerate() {
            let c = rank % spec.visual_clusters;
            cluster_of[item] = c;
            cluster_members[c].push(item);
        }
        for i in 0..spec.items {
            let noise = gaussian_vec(&mut feature_rng, spec.d_v);
            let mut f: Vec<f64> = centroids[cluster_of[i]]
                .iter()
                .zip(&noise)
                .map(|(c, n)| c + spec.cluster_noise * n)
                .collect();
            unit_norm(&mut f);
            features.push(f);
        }
    } else {
        for _ in 0..spec.items {
            let mut f = gaussian_vec(&mut feature_rng, spec.d_v);
            unit_norm(&mut f);
            features.push(f);
        }
    }

    let mut coverage_rng = stream(seed, "coverage");
    let mut items = BTreeMap::new();
    for (i, id) in item_ids.iter().enumerate() {
        let has_image = coverage_rng.gen_bool(spec.image_coverage);
        items.insert(
            id.clone(),
            ItemRecord {
                item_id: id.clone(),
                title: id.clone(),
                image_feature: if has_image {
                    features[i].clone()
                } else {
                    vec![0.0; spec.d_v]
                },
                has_image,
            },
        );
    }

    // Per-user disjoint item quotas in the visual regime.
    let mut pools: Vec<Vec<usize>> = Vec::new();
    if spec.visual_clusters > 0 {
        let users_per_cluster = spec.users.div_ceil(spec.visual_clusters);
        let quota = (spec.items / spec.visual_clusters) / users_per_cluster.max(1);
        for u in 0..spec.users {
            let c = u % spec.visual_clusters;
            let slot = u / spec.visual_clusters;
            let members = &cluster_members[c];
            pools.push(members[slot * quota..(slot + 1) * quota].to_vec());
        }
    }

    let paired = spec.visual_clusters > 0 && spec.users / spec.visual_clusters >= 2;
    let len_dist = Uniform::new_inclusive(spec.min_seq, spec.max_seq);

    // First pass: every user's own drawn sequence (in the paired visual
    // regime, only the training prefix — the held-out tail is grafted from
    // the partner below). The per-user stream is kept for the second pass so
    // rating/explanation draws stay on the same stream as before.
    let mut rngs: Vec<ChaCha8Rng> = Vec::with_capacity(spec.users);
    let mut base: Vec<Vec<usize>> = Vec::with_capacity(spec.users);
    for (u, user) in users.iter().enumerate() {
        let mut rng = stream(seed, user);
        let seq_len = len_dist.sample(&mut rng);
        let own: Vec<usize> = if spec.visual_clusters > 0 {
            let mut pool = pools[u].clone();
            pool.shuffle(&mut rng);
            pool.truncate(if paired { seq_len - 2 } else { seq_len });
            pool
        } else {
            let mut pattern: Vec<usize> = (0..spec.items).collect();
            pattern.shuffle(&mut rng);
            pattern.truncate(spec.pattern_period);
            (0..seq_len)
                .map(|j| {
                    if rng.gen_bool(spec.pattern_prob) {
                        pattern[j % spec.pattern_period]
                    } else {
                        rng.gen_range(0..spec.items)
                    }
                })
                .collect()
        };
        rngs.push(rng);
        base.push(own);
    }

    // Paired visual regime: the last two interactions come from the cluster
    // partner's training prefix (positions 1 and 2, which split-point
    // sampling reaches), so every held-out id is a trained id for someone.
    let sequences: Vec<Vec<usize>> = if paired {
        (0..spec.users)
            .map(|u| {
                let c = u % spec.visual_clusters;
                let slot = u / spec.visual_clusters;
                let partner = (slot ^ 1) * spec.visual_clusters + c;
                let mut seq = base[u].clone();
                seq.push(base[partner][1]);
                seq.push(base[partner][2]);
                seq
            })
            .collect()
    } else {
        base
    };

    let mut interactions = Vec::new();
    for (u, user) in users.iter().enumerate() {
        let rng = &mut rngs[u];
        for (t, &item) in sequences[u].iter().enumerate() {
            let (explanation, hint_word) = if rng.gen_bool(spec.explanation_rate) {
                let (text, hint) = explanation_sentence(rng);
                (Some(text), Some(hint))
            } else {
                (None, None)
            };
            interactions.push(Interaction {
                user_id: user.clone(),
                item_id: item_ids[item].clone(),
                timestamp: t as i64,
                rating: Some(rng.gen_range(1..=5)),
                explanation,
                hint_word,
            });
        }
    }

    Corpus::new(users, items, interactions, spec.d_v)
}
