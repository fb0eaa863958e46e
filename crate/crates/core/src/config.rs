//! Layered run configuration: built-in defaults, then an optional TOML
//! file, then `key.path=value` command-line overrides. The resulting
//! effective config drives every command and is digested into reports and
//! checkpoints so runs can be told apart.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PixelNorm, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Architecture dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Cascade stages.
    pub stages: usize,
    /// Learnable proposals.
    pub num_proposals: usize,
    /// Feature-map channels.
    pub channels: usize,
    /// Proposal feature width.
    pub proposal_dim: usize,
    /// Dynamic conv hidden width.
    pub dyn_hidden: usize,
    /// Re-id feature width (each of the two branches).
    pub reid_dim: usize,
    /// RoI grid side.
    pub roi_bins: usize,
    /// FFN hidden width in the detection head.
    pub ffn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 6,
            num_proposals: 100,
            channels: 64,
            proposal_dim: 64,
            dyn_hidden: 16,
            reid_dim: 64,
            roi_bins: 7,
            ffn_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.stages,
            self.num_proposals,
            self.channels,
            self.proposal_dim,
            self.dyn_hidden,
            self.reid_dim,
            self.roi_bins,
            self.ffn_hidden,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.stages < 2 {
            return Err(Error::Config(
                "re-id needs the last two stages: set model.stages >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// How re-id labels are assigned during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReidMatching {
    /// One-to-many IoU matching with weights (the default).
    Drsm,
    /// Bipartite pairs only, unit weights (ablation baseline).
    OneToOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub queue: usize,
    pub momentum: f64,
    pub temperature: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig { queue: 256, momentum: 0.5, temperature: 1.0 / 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 = epochs decide.
    pub max_iters: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub loss: LossWeights,
    /// IoU threshold of the one-to-many re-id matching.
    pub theta: f64,
    pub reid_matching: ReidMatching,
    /// Apply the IoU-proportional weights (off = unit weights).
    pub reid_weighting: bool,
    pub memory: MemoryConfig,
    pub horizontal_flip: bool,
    /// Checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            batch_size: 2,
            epochs: 36,
            max_iters: 0,
            lr_decay_epochs: vec![24, 33],
            lr_decay_factor: 0.1,
            loss: LossWeights::default(),
            theta: 0.7,
            reid_matching: ReidMatching::Drsm,
            reid_weighting: true,
            memory: MemoryConfig::default(),
            horizontal_flip: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("train: lr, batch_size and epochs must be positive".into()));
        }
        if !(0.0 < self.theta && self.theta < 1.0) {
            return Err(Error::Config("train: theta must lie in (0, 1)".into()));
        }
        if self.memory.temperature <= 0.0 {
            return Err(Error::Config("train: memory temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Detection score threshold for gallery candidates.
    pub score_thresh: f64,
    /// IoU at which a ranked candidate counts as the right person.
    pub tp_iou: f64,
    /// IoU for the detection recall measurement.
    pub recall_iou: f64,
    /// Gallery sizes for the sweep (empty = no sweep).
    pub gallery_sizes: Vec<usize>,
    /// Restrict each query's gallery to other cameras.
    pub cross_view: bool,
    /// Seed of the deterministic per-query gallery subsets.
    pub subset_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_thresh: 0.5,
            tp_iou: 0.5,
            recall_iou: 0.5,
            gallery_sizes: vec![],
            cross_view: false,
            subset_seed: 0,
        }
    }
}

/// The complete effective configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub pixel_norm: PixelNorm,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// defaults < file < overrides (`key.path=value`).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Config> {
        let mut value = toml::Value::try_from(Config::default())
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("reading {}: {e}", path.display()))
            })?;
            let file_value: toml::Value = text.parse()?;
            merge_toml(&mut value, &file_value)?;
        }
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: Config = value
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form, hex-encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge_toml(base: &mut toml::Value, overlay: &toml::Value) -> Result<()> {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_toml(slot, v)?,
                    None => {
                        return Err(Error::Config(format!("unknown configuration key `{k}`")));
                    }
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o.clone();
            Ok(())
        }
    }
}

/// Apply one `key.path=value` override to an already-serialized config tree.
pub fn apply_override_public(value: &mut toml::Value, spec: &str) -> Result<()> {
    apply_override(value, spec)
}

/// Apply one `key.path=value` override; the value parses as TOML.
fn apply_override(value: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parsed: toml::Value = format!("v = {raw}")
        .parse::<toml::Value>()
        .ok()
        .and_then(|t| t.get("v").cloned())
        .or_else(|| {
            // bare strings may come unquoted
            format!("v = \"{raw}\"")
                .parse::<toml::Value>()
                .ok()
                .and_then(|t| t.get("v").cloned())
        })
        .ok_or_else(|| Error::Config(format!("cannot parse override value `{raw}`")))?;
    let mut cur = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path `{path}` hits a leaf early")))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*part) {
                return Err(Error::Config(format!("unknown configuration key `{path}`")));
            }
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown configuration key `{path}`")))?;
    }
    Ok(())
}

/// The toy-scale configuration exercised by the end-to-end acceptance run:
/// 8 identities over 40/20/8 images of 96x96, a 3-stage cascade with 20
/// proposals and compact widths.
pub fn desk_scale_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.model = ModelConfig {
        stages: 3,
        num_proposals: 20,
        channels: 32,
        proposal_dim: 64,
        dyn_hidden: 16,
        reid_dim: 32,
        roi_bins: 7,
        ffn_hidden: 128,
    };
    cfg.synth = SynthConfig {
        n_identities: 8,
        n_train_images: 40,
        n_gallery_images: 20,
        n_query_images: 8,
        image_size: (96, 96),
        persons_per_image: (1, 3),
        unlabeled_fraction: 0.15,
        seed,
    };
    cfg.train.seed = seed;
    cfg.train.lr = 2e-3;
    cfg.train.batch_size = 2;
    cfg.train.epochs = 60;
    cfg.train.max_iters = 1200;
    cfg.train.lr_decay_epochs = vec![40, 52];
    cfg.train.memory.queue = 32;
    cfg.eval.score_thresh = 0.5;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
        desk_scale_config(0).validate().unwrap();
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = Config::default();
        let b = Config::default();
        assert_eq!(a.digest(), b.digest());
        let mut c = Config::default();
        c.train.lr = 9.0;
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn file_and_overrides_layer_in_order() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("cfg.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "[train]\nlr = 0.5\nbatch_size = 4").unwrap();
        drop(f);
        let cfg = Config::load(Some(&path), &["train.lr=0.25".into()]).unwrap();
        assert_eq!(cfg.train.lr, 0.25); // override beats file
        assert_eq!(cfg.train.batch_size, 4); // file beats default
        assert_eq!(cfg.train.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[train]\nlearning_rate = 0.5\n").unwrap();
        assert!(Config::load(Some(&path), &[]).is_err());
        assert!(Config::load(None, &["nope.lr=1".into()]).is_err());
        assert!(Config::load(None, &["train.lr".into()]).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::load(None, &["train.theta=1.5".into()]).is_err());
        assert!(Config::load(None, &["model.stages=1".into()]).is_err());
        assert!(Config::load(None, &["train.lr=0.0".into()]).is_err());
    }

    #[test]
    fn enum_and_bool_overrides_parse() {
        let cfg = Config::load(
            None,
            &[
                "train.reid_matching=one_to_one".into(),
                "train.reid_weighting=false".into(),
                "eval.gallery_sizes=[5, 10]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.reid_matching, ReidMatching::OneToOne);
        assert!(!cfg.train.reid_weighting);
        assert_eq!(cfg.eval.gallery_sizes, vec![5, 10]);
    }
}
