//! Run configuration: a flat key-value table of every hyperparameter, the
//! ablation switches and the baseline mode.

use serde::{Deserialize, Serialize};

use crate::adb::AdbMode;
use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::AdamW;
use crate::pool::{PoolConfig, Tiers};
use crate::query::QueryEncoder;
use crate::taskgen::StreamSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// The complete method.
    Full,
    /// One shared prompt, no keys, no memory, tasks learned in sequence.
    Finetune,
    /// All seen tasks learned jointly in a single stage.
    Multitask,
}

/// Names accepted by [`RunConfig::set_ablation`].
pub const ABLATIONS: [&str; 12] = [
    "no_memory",
    "no_adb",
    "no_meta",
    "no_task_prompt",
    "no_format_prompt",
    "no_general_prompt",
    "no_sched_sampling",
    "no_gt_identity",
    "no_neg_samples",
    "no_sample_div",
    "no_memory_div",
    "no_cluster",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Stream source: a file, or the synthetic generator.
    pub stream_path: Option<String>,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub samples_per_split: usize,
    pub vocab_size: usize,
    pub stream_seed: u64,

    // Backbone.
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub max_answer_len: usize,

    // Query encoder.
    pub query_dim: usize,
    pub encoder_seed: u64,

    // Prompt pool.
    pub general_len: usize,
    pub format_len: usize,
    pub task_len: usize,
    pub meta_len: usize,
    pub num_meta: usize,
    pub select_meta: usize,

    // Optimization.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,

    // Key learning.
    pub eta: f64,
    pub gamma: f64,
    pub cluster_factor: usize,
    pub memory_per_task: usize,

    // Scheduled sampling and unseen prompts.
    pub alpha: f64,
    pub beta: f64,
    pub omega: f64,

    // Detection.
    pub adb_mode: AdbMode,
    pub adb_lr: f64,
    pub adb_steps: usize,
    pub fixed_boundary: f64,

    // Seeds.
    pub seed: u64,
    pub order_seed: Option<u64>,
    pub sampling_seed: Option<u64>,

    // Ablations.
    pub no_memory: bool,
    pub no_adb: bool,
    pub no_meta: bool,
    pub no_task_prompt: bool,
    pub no_format_prompt: bool,
    pub no_general_prompt: bool,
    pub no_sched_sampling: bool,
    pub no_gt_identity: bool,
    pub no_neg_samples: bool,
    pub no_sample_div: bool,
    pub no_memory_div: bool,
    pub no_cluster: bool,

    pub baseline: Baseline,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = StreamSpec::default();
        Self {
            stream_path: None,
            n_seen: spec.n_seen,
            n_unseen: spec.n_unseen,
            samples_per_split: spec.samples_per_split,
            vocab_size: spec.vocab_size,
            stream_seed: spec.seed,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            max_positions: 512,
            max_answer_len: 8,
            query_dim: 64,
            encoder_seed: 0,
            general_len: 20,
            format_len: 40,
            task_len: 40,
            meta_len: 20,
            num_meta: 30,
            select_meta: 5,
            epochs: 5,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 0.01,
            eta: 0.15,
            gamma: 0.3,
            cluster_factor: 5,
            memory_per_task: 50,
            alpha: 0.9,
            beta: 3e-4,
            omega: 0.05,
            adb_mode: AdbMode::Learned,
            adb_lr: 0.02,
            adb_steps: 200,
            fixed_boundary: 0.35,
            seed: 42,
            order_seed: None,
            sampling_seed: None,
            no_memory: false,
            no_adb: false,
            no_meta: false,
            no_task_prompt: false,
            no_format_prompt: false,
            no_general_prompt: false,
            no_sched_sampling: false,
            no_gt_identity: false,
            no_neg_samples: false,
            no_sample_div: false,
            no_memory_div: false,
            no_cluster: false,
            baseline: Baseline::Full,
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::field(field, "must be positive"));
    }
    Ok(())
}

fn in_range(field: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if !(v.is_finite() && v >= lo && v <= hi) {
        return Err(Error::field(field, format!("must lie in [{lo}, {hi}]")));
    }
    Ok(())
}

impl RunConfig {
    /// Settings that learn the default synthetic stream in about a minute
    /// on one core: shorter prompts, a narrower model, smaller batches, a
    /// larger step and more epochs.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            d_ff: 64,
            general_len: 2,
            format_len: 4,
            task_len: 4,
            meta_len: 2,
            epochs: 10,
            batch_size: 8,
            lr: 3e-3,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn set_ablation(&mut self, name: &str) -> Result<()> {
        let flag = match name {
            "no_memory" => &mut self.no_memory,
            "no_adb" => &mut self.no_adb,
            "no_meta" => &mut self.no_meta,
            "no_task_prompt" => &mut self.no_task_prompt,
            "no_format_prompt" => &mut self.no_format_prompt,
            "no_general_prompt" => &mut self.no_general_prompt,
            "no_sched_sampling" => &mut self.no_sched_sampling,
            "no_gt_identity" => &mut self.no_gt_identity,
            "no_neg_samples" => &mut self.no_neg_samples,
            "no_sample_div" => &mut self.no_sample_div,
            "no_memory_div" => &mut self.no_memory_div,
            "no_cluster" => &mut self.no_cluster,
            other => {
                return Err(Error::field(
                    "ablate",
                    format!("unknown switch `{other}`; expected one of {}", ABLATIONS.join(", ")),
                ))
            }
        };
        *flag = true;
        Ok(())
    }

    pub fn active_ablations(&self) -> Vec<&'static str> {
        let flags = [
            self.no_memory,
            self.no_adb,
            self.no_meta,
            self.no_task_prompt,
            self.no_format_prompt,
            self.no_general_prompt,
            self.no_sched_sampling,
            self.no_gt_identity,
            self.no_neg_samples,
            self.no_sample_div,
            self.no_memory_div,
            self.no_cluster,
        ];
        ABLATIONS
            .iter()
            .zip(flags)
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }

    /// Short label for reports: the baseline, or the ablations, or `full`.
    pub fn variant_name(&self) -> String {
        match self.baseline {
            Baseline::Finetune => "finetune".into(),
            Baseline::Multitask => "multitask".into(),
            Baseline::Full => {
                let a = self.active_ablations();
                if a.is_empty() {
                    "full".into()
                } else {
                    a.join("+")
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("d_model", self.d_model)?;
        positive("heads", self.heads)?;
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::field("heads", "must divide d_model"));
        }
        positive("d_ff", self.d_ff)?;
        positive("max_positions", self.max_positions)?;
        positive("max_answer_len", self.max_answer_len)?;
        positive("query_dim", self.query_dim)?;
        positive("num_meta", self.num_meta)?;
        positive("select_meta", self.select_meta)?;
        if self.select_meta > self.num_meta {
            return Err(Error::field("select_meta", "must not exceed num_meta"));
        }
        positive("epochs", self.epochs)?;
        positive("batch_size", self.batch_size)?;
        positive("cluster_factor", self.cluster_factor)?;
        positive("adb_steps", self.adb_steps)?;
        in_range("lr", self.lr, 0.0, 1.0)?;
        in_range("weight_decay", self.weight_decay, 0.0, 1.0)?;
        in_range("eta", self.eta, f64::MIN_POSITIVE, 1.0 - f64::EPSILON)?;
        in_range("gamma", self.gamma, f64::MIN_POSITIVE, 1.0 - f64::EPSILON)?;
        in_range("alpha", self.alpha, 0.0, 1.0)?;
        in_range("beta", self.beta, 0.0, 1.0)?;
        in_range("omega", self.omega, 0.0, 1.0)?;
        in_range("adb_lr", self.adb_lr, 0.0, 10.0)?;
        in_range("fixed_boundary", self.fixed_boundary, 0.0, 2.0)?;
        if self.baseline == Baseline::Full && self.composed_len() == 0 {
            return Err(Error::field("ablate", "every prompt tier is disabled"));
        }
        if self.stream_path.is_none() {
            self.stream_spec().validate()?;
        }
        let longest_answer = self.max_answer_len + 1;
        if longest_answer > self.max_positions {
            return Err(Error::field("max_answer_len", "exceeds max_positions"));
        }
        Ok(())
    }

    pub fn stream_spec(&self) -> StreamSpec {
        StreamSpec {
            n_seen: self.n_seen,
            n_unseen: self.n_unseen,
            samples_per_split: self.samples_per_split,
            vocab_size: self.vocab_size,
            seed: self.stream_seed,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
        }
    }

    pub fn encoder(&self) -> QueryEncoder {
        QueryEncoder {
            dim: self.query_dim,
            seed: self.encoder_seed,
        }
    }

    fn tiers(&self) -> Tiers {
        Tiers {
            general: !self.no_general_prompt,
            format: !self.no_format_prompt,
            task: !self.no_task_prompt,
            meta: !self.no_meta,
        }
    }

    fn full_pool_config(&self) -> PoolConfig {
        PoolConfig {
            general_len: self.general_len,
            format_len: self.format_len,
            task_len: self.task_len,
            meta_len: self.meta_len,
            num_meta: self.num_meta,
            select_meta: self.select_meta,
            d_model: self.d_model,
            query_dim: self.query_dim,
            tiers: self.tiers(),
        }
    }

    /// Rows in every composed prompt.
    pub fn composed_len(&self) -> usize {
        self.full_pool_config().composed_len()
    }

    /// The finetune baseline uses a single shared prompt as long as the
    /// complete composed prompt, so both see the same number of rows.
    pub fn pool_config(&self) -> PoolConfig {
        let full = self.full_pool_config();
        match self.baseline {
            Baseline::Finetune => PoolConfig {
                general_len: PoolConfig {
                    tiers: Tiers::default(),
                    ..full
                }
                .composed_len(),
                tiers: Tiers {
                    general: true,
                    format: false,
                    task: false,
                    meta: false,
                },
                ..full
            },
            _ => full,
        }
    }

    pub fn uses_keys(&self) -> bool {
        self.baseline != Baseline::Finetune
    }

    pub fn uses_memory(&self) -> bool {
        self.baseline != Baseline::Finetune && !self.no_memory
    }

    /// Learned boundaries need memory; otherwise the fixed boundary applies.
    pub fn uses_adb(&self) -> bool {
        self.uses_memory() && !self.no_adb
    }

    /// `(alpha, beta)` after the scheduled-sampling switches.
    pub fn schedule(&self) -> (f64, f64) {
        if self.no_gt_identity {
            (0.0, self.beta)
        } else if self.no_sched_sampling {
            (1.0, 0.0)
        } else {
            (self.alpha, self.beta)
        }
    }

    pub fn model_optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    pub fn key_optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: 0.0,
            ..AdamW::default()
        }
    }

    pub fn sampling_seed(&self) -> u64 {
        self.sampling_seed.unwrap_or(self.seed)
    }

    pub fn order_seed(&self) -> u64 {
        self.order_seed.unwrap_or(self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_values() {
        let c = RunConfig::default();
        assert_eq!((c.general_len, c.format_len, c.task_len, c.meta_len), (20, 40, 40, 20));
        assert_eq!((c.num_meta, c.select_meta, c.memory_per_task), (30, 5, 50));
        assert_eq!((c.eta, c.gamma, c.alpha, c.beta, c.omega), (0.15, 0.3, 0.9, 3e-4, 0.05));
        assert_eq!((c.lr, c.epochs, c.batch_size), (1e-4, 5, 16));
        assert_eq!((c.adb_lr, c.fixed_boundary), (0.02, 0.35));
        assert_eq!(c.composed_len(), 200);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_field() {
        let mut c = RunConfig::desk();
        c.no_meta = true;
        c.order_seed = Some(3);
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        let err = RunConfig::from_toml_str("bogus = 1").unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = RunConfig::from_toml_str("epochs = 2\nno_adb = true\n").unwrap();
        assert_eq!(c.epochs, 2);
        assert!(c.no_adb);
        assert_eq!(c.lr, 1e-4);
    }

    #[test]
    fn ablations_and_variants() {
        let mut c = RunConfig::default();
        c.set_ablation("no_meta").unwrap();
        assert_eq!(c.composed_len(), 100);
        assert_eq!(c.variant_name(), "no_meta");
        assert!(c.set_ablation("no_such").is_err());
        let mut s = RunConfig::default();
        s.no_sched_sampling = true;
        assert_eq!(s.schedule(), (1.0, 0.0));
        s.no_gt_identity = true;
        assert_eq!(s.schedule().0, 0.0);
    }

    #[test]
    fn finetune_prompt_matches_full_length() {
        let c = RunConfig {
            baseline: Baseline::Finetune,
            ..RunConfig::default()
        };
        let p = c.pool_config();
        assert_eq!(p.composed_len(), 200);
        assert!(!p.tiers.task && !p.tiers.meta);
        assert!(!c.uses_memory() && !c.uses_keys());
    }

    #[test]
    fn invalid_values_name_their_field() {
        let c = RunConfig {
            select_meta: 31,
            ..RunConfig::default()
        };
        match c.validate() {
            Err(Error::InvalidField { field, .. }) => assert_eq!(field, "select_meta"),
            other => panic!("unexpected {other:?}"),
        }
        let c = RunConfig {
            omega: 1.5,
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::InvalidField { field, .. }) if field == "omega"));
    }
}
