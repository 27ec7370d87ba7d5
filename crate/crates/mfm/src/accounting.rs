//! Parameter accounting: how many scalars the model holds, how many train
//! under a given tuning mode, and the trainable percentage. Counts come from
//! the tensor catalog, so arbitrarily large reference shapes cost nothing to
//! account for.

use crate::error::{Error, Result};
use crate::model::{tensor_catalog, ModelConfig, ParameterStore, TuningMode};

/// Exact integer parameter counts for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCounts {
    pub total: u64,
    pub trainable: u64,
}

impl ParameterCounts {
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64 * 100.0
        }
    }
}

/// Count parameters from the shape catalog alone.
pub fn count_parameters(cfg: &ModelConfig) -> Result<ParameterCounts> {
    cfg.validate()?;
    let mut counts = ParameterCounts {
        total: 0,
        trainable: 0,
    };
    for spec in tensor_catalog(cfg) {
        counts.total += spec.count();
        if spec.trainable(cfg.tuning_mode) {
            counts.trainable += spec.count();
        }
    }
    Ok(counts)
}

/// Count parameters from a materialized store's freeze flags; agrees with
/// [`count_parameters`] whenever the store was built from the same config.
pub fn count_store_parameters(store: &ParameterStore) -> ParameterCounts {
    let mut counts = ParameterCounts {
        total: 0,
        trainable: 0,
    };
    for (_, tensor) in store.iter() {
        let n = tensor.data.len() as u64;
        counts.total += n;
        if !tensor.frozen {
            counts.trainable += n;
        }
    }
    counts
}

/// One accounting row: the configuration axes a sweep varies plus counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountingRecord {
    pub mode: TuningMode,
    pub r: usize,
    pub k: usize,
    pub counts: ParameterCounts,
    pub config_fingerprint: String,
}

impl AccountingRecord {
    pub fn from_config(cfg: &ModelConfig, config_fingerprint: &str) -> Result<Self> {
        Ok(AccountingRecord {
            mode: cfg.tuning_mode,
            r: cfg.r,
            k: cfg.k,
            counts: count_parameters(cfg)?,
            config_fingerprint: config_fingerprint.to_string(),
        })
    }

    /// One tab-separated line, mirrored by [`AccountingRecord::parse_records`].
    pub fn to_record(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\n",
            self.mode.as_str(),
            self.r,
            self.k,
            self.counts.total,
            self.counts.trainable,
            self.counts.percent(),
            self.config_fingerprint
        )
    }

    pub fn parse_records(text: &str) -> Result<Vec<AccountingRecord>> {
        let mut out = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse {
                path: "accounting records".into(),
                line: lineno + 1,
                msg,
            };
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 7 {
                return Err(bad(format!(
                    "expected 7 tab-separated fields, found {}",
                    parts.len()
                )));
            }
            let mode = TuningMode::parse(parts[0])
                .ok_or_else(|| bad(format!("unknown tuning mode '{}'", parts[0])))?;
            let r = parts[1]
                .parse()
                .map_err(|_| bad(format!("bad reduction rate '{}'", parts[1])))?;
            let k = parts[2]
                .parse()
                .map_err(|_| bad(format!("bad image token count '{}'", parts[2])))?;
            let total = parts[3]
                .parse()
                .map_err(|_| bad(format!("bad total '{}'", parts[3])))?;
            let trainable = parts[4]
                .parse()
                .map_err(|_| bad(format!("bad trainable count '{}'", parts[4])))?;
            out.push(AccountingRecord {
                mode,
                r,
                k,
                counts: ParameterCounts { total, trainable },
                config_fingerprint: parts[6].to_string(),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_mode(mut cfg: ModelConfig, mode: TuningMode) -> ModelConfig {
        cfg.tuning_mode = mode;
        cfg
    }

    #[test]
    fn full_mode_trains_everything() {
        let cfg = with_mode(ModelConfig::desk_default(), TuningMode::Full);
        let c = count_parameters(&cfg).unwrap();
        assert_eq!(c.total, c.trainable);
        assert!((c.percent() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn full_mode_has_no_adapter_parameters() {
        let base = ModelConfig::desk_default();
        let full = count_parameters(&with_mode(base.clone(), TuningMode::Full)).unwrap();
        let self_attn =
            count_parameters(&with_mode(base.clone(), TuningMode::SelfAttnAdapters)).unwrap();
        let all_attn =
            count_parameters(&with_mode(base, TuningMode::AllAttnAdapters)).unwrap();
        assert!(full.total < self_attn.total);
        assert!(self_attn.total < all_attn.total);
    }

    #[test]
    fn zero_image_tokens_still_train_category_embedding() {
        // With the mapping network disabled, the trainable set in an adapter
        // mode is adapters plus the category table.
        let mut cfg = ModelConfig::desk_default();
        cfg.k = 0;
        let with_adapters = count_parameters(&cfg).unwrap();
        let mut bare = cfg.clone();
        bare.tuning_mode = TuningMode::Full;
        let backbone = count_parameters(&bare).unwrap();
        // category table = 2 rows × d; adapters make up the rest.
        let adapters_only = with_adapters.trainable - 2 * cfg.d as u64;
        assert!(adapters_only > 0);
        assert_eq!(with_adapters.total - adapters_only, backbone.total);
    }

    #[test]
    fn desk_counts_match_hand_arithmetic() {
        // Shapes at L=2, d=64, h=4, d_ff=128, V=512, max_len=256, k=2:
        //   embeddings: token 512·64 + pos 256·64 + word 256·64 (+ category 2·64)
        //   per attention block: 4·(64·64), bias-free
        //   per ffn: 64·128 + 128 + 128·64 + 64
        //   per layer norm: 2·64, one after each sublayer
        //   mapping network: 16·64 + 64 + 64·128 + 128
        let d = 64u64;
        let attn = 4 * d * d;
        let ffn = d * 128 + 128 + 128 * d + d;
        let norm = 2 * d;
        let enc_layer = attn + ffn + 2 * norm;
        let dec_layer = 2 * attn + ffn + 3 * norm;
        let backbone = 512 * d + 256 * d + 256 * d + 2 * (enc_layer + dec_layer);
        let mapnet = (16 * d + d) + (d * 2 * d + 2 * d);
        let category = 2 * d;
        let full = count_parameters(&with_mode(ModelConfig::desk_default(), TuningMode::Full))
            .unwrap();
        assert_eq!(full.total, backbone + mapnet + category);

        // Adapter site at r=8 (bottleneck 8): 64·8 + 8 + 8·64 + 64 = 1096.
        let site = d * 8 + 8 + 8 * d + d;
        // Self-attn mode: 2 sites per encoder layer, 2 per decoder layer.
        let self_attn = count_parameters(&ModelConfig::desk_default()).unwrap();
        assert_eq!(self_attn.trainable, 8 * site + mapnet + category);
        assert_eq!(
            self_attn.total,
            backbone + 8 * site + mapnet + category
        );

        // All-attn mode adds one site per decoder layer.
        let all_attn = count_parameters(&with_mode(
            ModelConfig::desk_default(),
            TuningMode::AllAttnAdapters,
        ))
        .unwrap();
        assert_eq!(all_attn.trainable, 10 * site + mapnet + category);
    }

    #[test]
    fn reference_scale_ordering_and_bounds() {
        let base = ModelConfig::accounting_reference();
        let self_attn = count_parameters(&base).unwrap();
        let all_attn =
            count_parameters(&with_mode(base.clone(), TuningMode::AllAttnAdapters)).unwrap();
        let full = count_parameters(&with_mode(base, TuningMode::Full)).unwrap();
        assert!(self_attn.percent() > 0.0);
        assert!(self_attn.percent() < all_attn.percent());
        assert!(all_attn.percent() < 100.0);
        assert!(self_attn.percent() < 6.0, "{}", self_attn.percent());
        assert!(all_attn.percent() < 6.0, "{}", all_attn.percent());
        assert!((full.percent() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn catalog_counts_agree_with_a_materialized_store() {
        for mode in [
            TuningMode::SelfAttnAdapters,
            TuningMode::AllAttnAdapters,
            TuningMode::Full,
        ] {
            let cfg = with_mode(ModelConfig::desk_default(), mode);
            let store = ParameterStore::init(&cfg, 7).unwrap();
            assert_eq!(count_parameters(&cfg).unwrap(), count_store_parameters(&store));
        }
    }

    #[test]
    fn record_round_trip() {
        let cfg = ModelConfig::desk_default();
        let rec = AccountingRecord::from_config(&cfg, "cfgdead").unwrap();
        let text = rec.to_record();
        let parsed = AccountingRecord::parse_records(&text).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].mode, rec.mode);
        assert_eq!(parsed[0].counts, rec.counts);
        assert_eq!(parsed[0].config_fingerprint, "cfgdead");
        assert!(AccountingRecord::parse_records("not\ta\trecord").is_err());
    }
}
