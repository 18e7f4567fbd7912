//! Plain-text `key = value` run configuration.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codec::{CodecConfig, CodecTrainConfig, LatentMode};
use crate::corpus::ToyCorpusConfig;
use crate::error::{Error, Result};
use crate::netcore::backbone::BackboneConfig;
use crate::oracle::BaselineConfig;
use crate::rng::sub_seed;
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::trainer::{default_huber_c, TrainConfig};

/// Engine version recorded in every artifact.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

macro_rules! run_config {
    ($( $doc:literal $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every tunable of a run. Unknown keys are rejected on parse.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( #[doc = $doc] pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            /// `(key, description)` for every key.
            pub fn documentation() -> Vec<(&'static str, &'static str)> {
                vec![$( (stringify!($field), $doc) ),*]
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $( stringify!($field) => {
                        self.$field = value.parse().map_err(|_| {
                            Error::Config(format!("invalid value `{value}` for `{key}`"))
                        })?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($field) => Some(self.$field.to_string()), )*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    "root seed; every random stream derives from it" seed: u64 = 0,

    "number of motion classes" classes: usize = 4,
    "sequences per class" items_per_class: usize = 100,
    "shortest sequence length" frames_min: usize = 32,
    "longest sequence length" frames_max: usize = 64,
    "channels per frame" channels: usize = 4,
    "per-frame noise standard deviation" noise: f64 = 0.05,

    "latent tokens per sequence" tokens: usize = 4,
    "entries per latent token" token_dim: usize = 8,
    "codec hidden width" codec_width: usize = 64,
    "codec positional feature size" pos_dim: usize = 16,
    "quantization level" level: u32 = 256,
    "weight of the cumulative-trajectory loss" lambda_j: f64 = 1e-3,
    "latent constraint: quantized or raw" latent_mode: LatentMode = LatentMode::Quantized,
    "codec optimizer steps" codec_steps: usize = 1500,
    "codec batch size" codec_batch: usize = 32,
    "codec learning rate" codec_lr: f64 = 3e-3,

    "condition embedding size" cond_dim: usize = 32,
    "weight of the per-item style term in condition embeddings" style_weight: f64 = 0.1,

    "enable the clustering dictionary" use_clustering: bool = true,
    "dictionary size; 0 picks min(32, 4 * classes)" clusters: usize = 0,
    "width of the dictionary query projection" query_dim: usize = 32,

    "denoiser hidden width" width: usize = 128,
    "denoiser residual blocks" blocks: usize = 4,
    "time embedding size" time_dim: usize = 32,

    "schedule beta at t = 0" beta0: f64 = 0.1,
    "schedule beta at t = 1" beta1: f64 = 20.0,
    "discretization points" grid_points: usize = 50,
    "smallest time" epsilon: f64 = 0.002,
    "largest time" t_max: f64 = 1.0,
    "grid warp exponent" rho: f64 = 7.0,
    "skip-connection scale" eta: f64 = 0.5,

    "guidance scale" omega: f64 = 4.0,
    "target EMA rate" gamma: f64 = 0.995,
    "consistency learning rate" lr: f64 = 1e-3,
    "consistency optimizer steps" steps: usize = 3000,
    "consistency batch size" batch: usize = 64,
    "pseudo-Huber constant; 0 picks 0.00054 * sqrt(latent size)" huber_c: f64 = 0.0,

    "baseline optimizer steps" baseline_steps: usize = 3000,
    "baseline learning rate" baseline_lr: f64 = 1e-3,
    "baseline batch size" baseline_batch: usize = 64,
    "baseline condition dropout" cond_dropout: f64 = 0.1,
    "baseline probability-flow Euler steps" oracle_steps: usize = 200,

    "network evaluations per consistency sample" nfe: usize = 4,
    "re-noise with the initial draw instead of fresh noise" reuse_noise: bool = false,
    "generated samples per held-out condition" sample_repeats: usize = 2,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its value, one per line, in declaration order.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("declared key")))
            .collect()
    }

    /// Commented listing of all keys and their current values.
    pub fn to_documented_text(&self) -> String {
        Self::documentation()
            .into_iter()
            .map(|(k, doc)| format!("# {doc}\n{k} = {}\n", self.get(k).expect("declared key")))
            .collect()
    }

    /// Hex SHA-256 of every key except `seed`.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for k in Self::KEYS.iter().filter(|k| **k != "seed") {
            h.update(format!("{k}={}\n", self.get(k).expect("declared key")));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.classes == 0 || self.classes > u16::MAX as usize {
            return fail("classes must lie in 1..=65535");
        }
        if self.items_per_class == 0 {
            return fail("items_per_class must be positive");
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return fail("need 0 < frames_min <= frames_max");
        }
        if self.channels == 0 || self.tokens == 0 || self.token_dim == 0 || self.cond_dim == 0 {
            return fail("channels, tokens, token_dim and cond_dim must be positive");
        }
        if self.level == 0 {
            return fail("level must be positive");
        }
        if self.width == 0 || self.codec_width == 0 || self.time_dim == 0 || self.query_dim == 0 {
            return fail("widths must be positive");
        }
        if self.grid_points < 2 {
            return fail("grid_points must be at least 2");
        }
        if self.nfe == 0 || self.nfe > self.grid_points {
            return fail("nfe must lie in 1..=grid_points");
        }
        if self.sample_repeats == 0 {
            return fail("sample_repeats must be positive");
        }
        if self.oracle_steps < 10 {
            return fail("oracle_steps must be at least 10");
        }
        if self.huber_c < 0.0 {
            return fail("huber_c must be >= 0");
        }
        if self.batch == 0 || self.codec_batch == 0 || self.baseline_batch == 0 {
            return fail("batch sizes must be positive");
        }
        self.train_config().validate()?;
        NoiseSchedule::new(self.beta0, self.beta1)?;
        self.grid()?;
        Ok(())
    }

    pub fn corpus_config(&self) -> ToyCorpusConfig {
        ToyCorpusConfig {
            classes: self.classes,
            items_per_class: self.items_per_class,
            frames_min: self.frames_min,
            frames_max: self.frames_max,
            channels: self.channels,
            noise: self.noise,
            seed: sub_seed(self.seed, "data"),
        }
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            channels: self.channels,
            tokens: self.tokens,
            token_dim: self.token_dim,
            width: self.codec_width,
            pos_dim: self.pos_dim,
            level: self.level,
            lambda_j: self.lambda_j,
            frames_min: self.frames_min,
            frames_max: self.frames_max,
            mode: self.latent_mode,
        }
    }

    pub fn codec_train_config(&self) -> CodecTrainConfig {
        CodecTrainConfig {
            steps: self.codec_steps,
            batch: self.codec_batch,
            lr: self.codec_lr,
            seed: sub_seed(self.seed, "codec"),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.tokens * self.token_dim
    }

    /// Dictionary size actually used.
    pub fn cluster_count(&self) -> usize {
        if self.clusters == 0 {
            32.min(4 * self.classes)
        } else {
            self.clusters
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let b = BackboneConfig {
            time_dim: self.time_dim,
            query_dim: self.query_dim,
            ..BackboneConfig::new(self.latent_dim(), self.width, self.blocks, self.cond_dim)
        };
        if self.use_clustering {
            b.with_clustering(self.latent_dim())
        } else {
            b
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.beta0, self.beta1)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::karras(self.epsilon, self.t_max, self.grid_points, self.rho)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            omega: self.omega,
            gamma: self.gamma,
            lr: self.lr,
            steps: self.steps,
            batch: self.batch,
            huber_c: if self.huber_c > 0.0 {
                self.huber_c
            } else {
                default_huber_c(self.latent_dim())
            },
            seed: sub_seed(self.seed, "training"),
            eta: self.eta,
            use_clustering: self.use_clustering,
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            steps: self.baseline_steps,
            batch: self.baseline_batch,
            lr: self.baseline_lr,
            seed: sub_seed(self.seed, "baseline"),
            eta: self.eta,
            cond_dropout: self.cond_dropout,
        }
    }

    /// Baseline network: same backbone without fusion maps.
    pub fn baseline_backbone(&self) -> BackboneConfig {
        BackboneConfig {
            cluster_dim: None,
            ..self.backbone_config()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_text_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&cfg.to_documented_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
        assert_eq!(RunConfig::documentation().len(), RunConfig::KEYS.len());
    }

    #[test]
    fn parses_overrides_and_comments() {
        let cfg = RunConfig::parse("# run\nomega = 2.5  # guidance\nlatent_mode=raw\n\nuse_clustering = false\n").unwrap();
        assert_eq!(cfg.omega, 2.5);
        assert_eq!(cfg.latent_mode, LatentMode::Raw);
        assert!(!cfg.use_clustering);
        assert_eq!(cfg.backbone_config().cluster_dim, None);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("omgea = 1").is_err());
        assert!(RunConfig::parse("omega = x").is_err());
        assert!(RunConfig::parse("omega").is_err());
        assert!(RunConfig::parse("omega = 1\nomega = 2").is_err());
        assert!(RunConfig::parse("omega = -1").is_err());
        assert!(RunConfig::parse("gamma = 2").is_err());
        assert!(RunConfig::parse("nfe = 51").is_err());
        assert!(RunConfig::parse("frames_min = 70").is_err());
        assert!(RunConfig::parse("latent_mode = fuzzy").is_err());
        assert!(RunConfig::read("/nonexistent/run.cfg").is_err());
    }

    #[test]
    fn hash_tracks_everything_but_seed() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 9, ..a.clone() };
        let c = RunConfig { omega: 3.0, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn derived_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.cluster_count(), 16);
        assert_eq!(RunConfig { classes: 10, ..cfg.clone() }.cluster_count(), 32);
        assert_eq!(cfg.train_config().huber_c, default_huber_c(32));
        assert_eq!(cfg.backbone_config().cluster_dim, Some(32));
        assert_ne!(cfg.train_config().seed, cfg.baseline_config().seed);
    }
}
