//! TOML run configuration. Every key is optional; missing keys take the
//! value from the selected preset (`desk` unless `preset = "full"`).

use std::path::Path;

use degs_core::densify::DensifyConfig;
use degs_core::field::{EncoderConfig, FieldConfig};
use degs_core::loss::LossWeights;
use degs_core::optim::CloudLearningRates;
use degs_core::scene::ColorModel;
use degs_core::synth::synth_bounds;
use degs_core::train::TrainConfig;
use degs_core::Bounds;
use serde::{Deserialize, Serialize};

use crate::error::{DegsError, Result};
use crate::fsutil::read_to_string;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub loss: LossSection,
    pub stages: StageSection,
    pub cloud: CloudSection,
    pub learning_rates: RateSection,
    pub densify: DensifySection,
    pub encoder: EncoderSection,
    pub mlp: MlpSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub static_iterations: u64,
    pub motion_iterations: u64,
    pub finetune_iterations: u64,
    pub metrics_interval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSection {
    pub face_splats: usize,
    pub mouth_splats: usize,
    pub embedding_dim: usize,
    pub color_dim: usize,
    pub dilation_radius: usize,
    /// Scene box used for initialization and encoder normalization.
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSection {
    pub position: f64,
    pub position_final_ratio: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub embedding: f64,
    pub embedding_weight_decay: f64,
    pub field: f64,
    pub field_weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensifySection {
    pub enabled: bool,
    pub interval: u64,
    pub start: u64,
    pub end: u64,
    pub grad_threshold: f64,
    pub min_opacity: f64,
    pub percent_dense: f64,
    pub max_world_size: f64,
    pub split_factor: f64,
    pub max_splats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub levels: usize,
    pub table_size: usize,
    pub features: usize,
    pub min_resolution: usize,
    pub max_resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSection {
    pub hidden: Vec<usize>,
}

pub const DEFAULT_SEED: u64 = 0;

impl RunConfig {
    pub fn from_train(preset: &str, seed: u64, c: &TrainConfig) -> Self {
        let r = &c.rates;
        let d = &c.densify;
        let e = &c.field.encoder;
        RunConfig {
            preset: preset.into(),
            seed,
            loss: LossSection { lambda: c.weights.lambda, beta: c.weights.beta, gamma: c.weights.gamma },
            stages: StageSection {
                static_iterations: c.static_iterations,
                motion_iterations: c.motion_iterations,
                finetune_iterations: c.finetune_iterations,
                metrics_interval: c.metrics_interval,
            },
            cloud: CloudSection {
                face_splats: c.face_splats,
                mouth_splats: c.mouth_splats,
                embedding_dim: c.embedding_dim,
                color_dim: c.color_model.dim(),
                dilation_radius: c.dilation_radius,
                bounds_min: synth_bounds().min,
                bounds_max: synth_bounds().max,
            },
            learning_rates: RateSection {
                position: r.position,
                position_final_ratio: r.position_final_ratio,
                scale: r.scale,
                rotation: r.rotation,
                opacity: r.opacity,
                color: r.color,
                embedding: r.embedding,
                embedding_weight_decay: r.embedding_weight_decay,
                field: c.field_lr,
                field_weight_decay: c.field_weight_decay,
            },
            densify: DensifySection {
                enabled: c.densify_static,
                interval: d.interval,
                start: d.start,
                end: d.end,
                grad_threshold: d.grad_threshold,
                min_opacity: d.min_opacity,
                percent_dense: d.percent_dense,
                max_world_size: d.max_world_size,
                split_factor: d.split_factor,
                max_splats: d.max_splats,
            },
            encoder: EncoderSection {
                levels: e.levels,
                table_size: e.table_size,
                features: e.features,
                min_resolution: e.min_resolution,
                max_resolution: e.max_resolution,
            },
            mlp: MlpSection { hidden: c.field.hidden.clone() },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let c = match name {
            "desk" => TrainConfig::default(),
            "full" => TrainConfig::full_preset(),
            other => return Err(DegsError::Config(format!("unknown preset `{other}` (expected desk or full)"))),
        };
        Ok(Self::from_train(name, DEFAULT_SEED, &c))
    }

    /// Parses TOML text, filling absent keys from the chosen preset.
    pub fn parse(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| DegsError::Config(e.to_string()))?;
        let preset = match user.get("preset") {
            None => "desk",
            Some(toml::Value::String(s)) => s.as_str(),
            Some(_) => return Err(DegsError::Config("`preset` must be a string".into())),
        };
        let base = Self::preset(preset)?;
        let mut merged = toml::Table::try_from(&base).expect("config serializes");
        merge(&mut merged, user);
        toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| DegsError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?).map_err(|e| match e {
            DegsError::Config(m) => DegsError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn bounds(&self) -> Result<Bounds> {
        Ok(Bounds::new(self.cloud.bounds_min, self.cloud.bounds_max)?)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let r = &self.learning_rates;
        let d = &self.densify;
        let e = &self.encoder;
        let config = TrainConfig {
            weights: LossWeights { lambda: self.loss.lambda, beta: self.loss.beta, gamma: self.loss.gamma },
            rates: CloudLearningRates {
                position: r.position,
                position_final_ratio: r.position_final_ratio,
                scale: r.scale,
                rotation: r.rotation,
                opacity: r.opacity,
                color: r.color,
                embedding: r.embedding,
                embedding_weight_decay: r.embedding_weight_decay,
            },
            field_lr: r.field,
            field_weight_decay: r.field_weight_decay,
            field: FieldConfig {
                encoder: EncoderConfig {
                    levels: e.levels,
                    table_size: e.table_size,
                    features: e.features,
                    min_resolution: e.min_resolution,
                    max_resolution: e.max_resolution,
                },
                hidden: self.mlp.hidden.clone(),
            },
            densify: DensifyConfig {
                interval: d.interval,
                start: d.start,
                end: d.end,
                grad_threshold: d.grad_threshold,
                min_opacity: d.min_opacity,
                percent_dense: d.percent_dense,
                max_world_size: d.max_world_size,
                split_factor: d.split_factor,
                max_splats: d.max_splats,
            },
            densify_static: d.enabled,
            dilation_radius: self.cloud.dilation_radius,
            face_splats: self.cloud.face_splats,
            mouth_splats: self.cloud.mouth_splats,
            embedding_dim: self.cloud.embedding_dim,
            color_model: ColorModel::from_dim(self.cloud.color_dim)?,
            metrics_interval: self.stages.metrics_interval,
            static_iterations: self.stages.static_iterations,
            motion_iterations: self.stages.motion_iterations,
            finetune_iterations: self.stages.finetune_iterations,
        };
        config.validate()?;
        Ok(config)
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
