//! Run configuration: one flat JSON object, every field overridable on the
//! command line as `--field-name value`.

use std::path::Path;

use mvr_core::backbone::{middle_taps, EncoderConfig};
use mvr_core::fusion::FusionMode;
use mvr_core::io::read_file;
use mvr_core::pipeline::ViewConfig;
use mvr_core::pointcloud::{Anomaly, AnomalyKind, ShapeKind};
use mvr_core::projection::DEFAULT_CAMERA_RADIUS;
use mvr_core::reconstruction::DecoderConfig;
use mvr_core::training::{LossConfig, LossScope, OptimizerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub categories: Vec<ShapeKind>,
    pub n_points: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub anomaly_kind: AnomalyKind,
    pub anomaly_radius: f64,
    pub anomaly_depth: f64,

    pub render_resolution: usize,
    pub input_resolution: usize,
    pub n_views: usize,
    pub camera_radius: f64,

    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Encoder blocks to tap; the middle half of the encoder when absent.
    pub tap_layers: Option<Vec<usize>>,

    pub k_pct: f64,
    pub shrink_factor: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_rms: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub fusion: FusionMode,
    pub loss_scope: LossScope,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        let loss = LossConfig::default();
        Self {
            seed: 0,
            categories: vec![ShapeKind::Sphere, ShapeKind::Box],
            n_points: 50_000,
            n_train: 20,
            n_test_normal: 10,
            n_test_anomalous: 10,
            anomaly_kind: AnomalyKind::Dent,
            anomaly_radius: 0.2,
            anomaly_depth: 0.1,
            render_resolution: 672,
            input_resolution: 224,
            n_views: 27,
            camera_radius: DEFAULT_CAMERA_RADIUS,
            patch_size: 14,
            embed_dim: 128,
            depth: 6,
            heads: 4,
            mlp_ratio: 2,
            tap_layers: None,
            k_pct: loss.k_pct,
            shrink_factor: loss.shrink_factor,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            clip_rms: opt.clip_rms,
            iterations: 300,
            batch_size: 2,
            checkpoint_every: 100,
            fusion: FusionMode::VisibleOnly,
            loss_scope: LossScope::Fused,
        }
    }
}

/// Converts `--field-name` to `field_name`.
pub fn flag_to_field(flag: &str) -> String {
    flag.trim_start_matches("--").replace('-', "_")
}

pub fn field_names() -> Vec<String> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// A flag value: JSON when it parses (numbers, lists, null), else a string.
/// Comma-separated values become a list.
fn parse_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if raw.contains(',') {
        return Value::Array(raw.split(',').map(|p| parse_value(p.trim())).collect());
    }
    Value::String(raw.to_string())
}

impl RunConfig {
    /// Loads the optional JSON file, then applies `(field, raw value)` overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut obj = match path {
            Some(p) => {
                let bytes = read_file(p)?;
                match serde_json::from_slice::<Value>(&bytes) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => {
                        return Err(CliError::Usage(format!(
                            "{}: config must be a JSON object",
                            p.display()
                        )))
                    }
                    Err(e) => return Err(CliError::Usage(format!("{}: {e}", p.display()))),
                }
            }
            None => Map::new(),
        };
        let defaults = serde_json::to_value(RunConfig::default()).unwrap_or_default();
        for (k, v) in overrides {
            let mut value = parse_value(v);
            if defaults.get(k).is_some_and(Value::is_array) && !value.is_array() && !value.is_null() {
                value = Value::Array(vec![value]);
            }
            obj.insert(k.clone(), value);
        }
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(obj)).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.categories.is_empty() {
            return usage("at least one category is required".into());
        }
        if self.render_resolution == 0
            || self.input_resolution == 0
            || !self.render_resolution.is_multiple_of(self.input_resolution)
        {
            return usage(format!(
                "render_resolution {} must be a positive multiple of input_resolution {}",
                self.render_resolution, self.input_resolution
            ));
        }
        self.view_config().validate()?;
        self.encoder_config().validate()?;
        self.loss_config().validate()?;
        if self.batch_size == 0 {
            return usage("batch_size must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn view_config(&self) -> ViewConfig {
        ViewConfig {
            render_resolution: self.render_resolution,
            input_resolution: self.input_resolution,
            n_views: self.n_views,
            camera_radius: self.camera_radius,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.input_resolution,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            tap_layers: self.tap_layers.clone().unwrap_or_else(|| middle_taps(self.depth)),
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig::for_encoder(&self.encoder_config())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            k_pct: self.k_pct,
            shrink_factor: self.shrink_factor,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            seed: self.seed,
            loss: self.loss_config(),
            optimizer: OptimizerConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                clip_rms: self.clip_rms,
            },
            loss_scope: self.loss_scope,
        }
    }

    pub fn anomaly(&self) -> Anomaly {
        Anomaly {
            kind: self.anomaly_kind,
            radius: self.anomaly_radius,
            depth: self.anomaly_depth,
        }
    }

    pub fn teacher_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x7EAC
    }

    pub fn student_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x57D0
    }

    /// Seed of one synthetic sample.
    pub fn sample_seed(&self, category: ShapeKind, split: &str, index: usize) -> u64 {
        let cat = category as u64;
        let split = if split == "train" { 0 } else { 1 };
        self.seed
            .wrapping_mul(1_000_003)
            .wrapping_add(cat * 100_000 + split * 10_000 + index as u64)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).unwrap_or_default();
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let cfg = RunConfig::load(None, &[("categories".into(), "sphere".into())]).unwrap();
        assert_eq!(cfg.categories, vec![ShapeKind::Sphere]);
        let cfg = RunConfig::load(
            None,
            &[
                ("n_views".into(), "3".into()),
                ("categories".into(), "sphere,box".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.n_views, 3);
        assert_eq!(cfg.categories, vec![ShapeKind::Sphere, ShapeKind::Box]);
        assert!(RunConfig::load(None, &[("bogus".into(), "1".into())]).is_err());
    }

    #[test]
    fn defaults_are_consistent() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.encoder_config().tap_layers, vec![1, 2, 3, 4]);
        assert_eq!(cfg.decoder_config().depth, 4);
        assert!(field_names().contains(&"anomaly_depth".to_string()));
        assert_eq!(flag_to_field("--anomaly-depth"), "anomaly_depth");
    }

    #[test]
    fn resolution_must_be_multiple() {
        let err = RunConfig::load(None, &[("render_resolution".into(), "500".into())]).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }
}
