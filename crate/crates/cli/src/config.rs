//! Run configuration: TOML file + command-line overrides + preset defaults,
//! resolved with precedence flags > file > preset.
//!
//! Every field is optional; unknown keys are rejected. The resolved
//! configuration is echoed verbatim into every output artifact.

use std::path::Path;

use serde::Deserialize;

use depthcl_core::error::{Error, Result};
use depthcl_core::model::{ConvStage, ModelConfig, ProjectionHeadConfig};
use depthcl_core::pipeline::{TrainConfig, TrainMode};
use depthcl_core::scalar::NumericWidth;
use depthcl_core::synth::GeneratorConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!(
                "unknown preset {other}; valid presets: desk, paper"
            ))),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub width: Option<u32>,
    pub preset: Option<String>,
    pub train: Option<TrainSection>,
    pub encoder: Option<EncoderSection>,
    pub projector: Option<ProjectorSection>,
    pub classifier: Option<ClassifierSection>,
    pub generator: Option<GeneratorSection>,
    pub protocol: Option<ProtocolSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub crop_size: Option<usize>,
    pub seed: Option<u64>,
    pub temperature: Option<f64>,
    pub dropout_rate: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub input_channels: Option<usize>,
    /// Stages as [out_channels, kernel_size, stride] triples.
    pub stages: Option<Vec<[usize; 3]>>,
    pub embedding_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorSection {
    pub hidden_sizes: Option<Vec<usize>>,
    pub output_dim: Option<usize>,
    pub relu: Option<Vec<bool>>,
    pub batch_norm: Option<Vec<bool>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    pub hidden: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub num_classes: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub image_size: Option<usize>,
    pub scale: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub fold_seed: Option<u64>,
    pub downstream_epochs: Option<usize>,
    pub downstream_learning_rate: Option<f64>,
    pub downstream_batch_size: Option<usize>,
}

/// Command-line overrides; highest precedence.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub width: Option<u32>,
    pub preset: Option<&'static str>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub crop_size: Option<usize>,
    pub scale: Option<f64>,
    pub image_size: Option<usize>,
}

/// Fully resolved run settings.
#[derive(Clone, Debug)]
pub struct ResolvedRun {
    pub width: NumericWidth,
    pub preset: Preset,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub generator: GeneratorConfig,
    pub fold_seed: u64,
    pub downstream_epochs: usize,
    pub downstream_learning_rate: f64,
    pub downstream_batch_size: usize,
}

impl ResolvedRun {
    /// The resolved-configuration echo embedded in artifacts.
    pub fn echo(&self) -> String {
        let stages: Vec<String> = self
            .model
            .encoder
            .stages
            .iter()
            .map(|s| format!("[{},{},{}]", s.out_channels, s.kernel_size, s.stride))
            .collect();
        format!(
            "width = {}\npreset = {}\n{}\
             encoder.stages = {}\n\
             generator.image_size = {}\ngenerator.scale = {:?}\n\
             protocol.fold_seed = {}\nprotocol.downstream_epochs = {}\n\
             protocol.downstream_learning_rate = {:?}\nprotocol.downstream_batch_size = {}\n",
            self.width.bits(),
            match self.preset {
                Preset::Desk => "desk",
                Preset::Paper => "paper",
            },
            self.train.to_text(),
            stages.join(","),
            self.generator.image_height,
            self.generator.scale,
            self.fold_seed,
            self.downstream_epochs,
            self.downstream_learning_rate,
            self.downstream_batch_size,
        )
    }
}

pub fn load_config_file(path: &Path) -> Result<RunConfigFile> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| {
        // toml reports line/column in its message.
        Error::Config(format!("{}: {e}", path.display()))
    })
}

/// Resolves the run: preset defaults, overlaid by the file, overlaid by
/// flags. `mode` decides which preset hyperparameter block applies.
pub fn resolve(
    file: Option<&RunConfigFile>,
    overrides: &Overrides,
    mode: TrainMode,
) -> Result<ResolvedRun> {
    let empty = RunConfigFile::default();
    let file = file.unwrap_or(&empty);

    let preset = match overrides.preset {
        Some(name) => Preset::parse(name)?,
        None => match &file.preset {
            Some(name) => Preset::parse(name)?,
            None => Preset::Desk,
        },
    };

    let width_bits = overrides.width.or(file.width).unwrap_or(64);
    let width = NumericWidth::from_bits(width_bits)
        .ok_or_else(|| Error::Config(format!("width {width_bits} unsupported; use 32 or 64")))?;

    let seed_default = 42u64;
    let mut train = match (preset, mode) {
        (Preset::Desk, TrainMode::Pretrain) => TrainConfig::desk_pretrain(seed_default),
        (Preset::Desk, m) => TrainConfig::desk_downstream(m, seed_default),
        (Preset::Paper, TrainMode::Pretrain) => TrainConfig::paper_pretrain(seed_default),
        (Preset::Paper, m) => TrainConfig::paper_downstream(m, seed_default),
    };
    if let Some(t) = &file.train {
        if let Some(v) = t.learning_rate {
            train.learning_rate = v;
        }
        if let Some(v) = t.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = t.epochs {
            train.epochs = v;
        }
        if let Some(v) = t.crop_size {
            train.crop_size = v;
        }
        if let Some(v) = t.seed {
            train.seed = v;
        }
        if let Some(v) = t.temperature {
            train.temperature = v;
        }
        if let Some(v) = t.dropout_rate {
            train.dropout_rate = v;
        }
    }
    if let Some(v) = overrides.learning_rate {
        train.learning_rate = v;
    }
    if let Some(v) = overrides.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = overrides.epochs {
        train.epochs = v;
    }
    if let Some(v) = overrides.crop_size {
        train.crop_size = v;
    }
    if let Some(v) = overrides.seed {
        train.seed = v;
    }

    let mut model = ModelConfig::default();
    if preset == Preset::Paper {
        model.projector = ProjectionHeadConfig::paper_scale();
    }
    if let Some(e) = &file.encoder {
        if let Some(v) = e.input_channels {
            model.encoder.input_channels = v;
        }
        if let Some(stages) = &e.stages {
            model.encoder.stages = stages
                .iter()
                .map(|s| ConvStage {
                    out_channels: s[0],
                    kernel_size: s[1],
                    stride: s[2],
                })
                .collect();
            // Embedding width follows the final stage unless pinned.
            if e.embedding_dim.is_none() {
                if let Some(last) = model.encoder.stages.last() {
                    model.encoder.embedding_dim = last.out_channels;
                }
            }
        }
        if let Some(v) = e.embedding_dim {
            model.encoder.embedding_dim = v;
        }
    }
    if let Some(p) = &file.projector {
        if let Some(v) = &p.hidden_sizes {
            model.projector.hidden_sizes = v.clone();
            model.projector.relu = vec![true; v.len()];
            model.projector.batch_norm = vec![true; v.len()];
        }
        if let Some(v) = p.output_dim {
            model.projector.output_dim = v;
        }
        if let Some(v) = &p.relu {
            model.projector.relu = v.clone();
        }
        if let Some(v) = &p.batch_norm {
            model.projector.batch_norm = v.clone();
        }
    }
    if let Some(c) = &file.classifier {
        if let Some(v) = c.hidden {
            model.classifier.hidden = v;
        }
        if let Some(v) = c.dropout_rate {
            model.classifier.dropout_rate = v;
        }
        if let Some(v) = c.num_classes {
            model.classifier.num_classes = v;
        }
    }
    // Single source of truth for classifier dropout.
    model.classifier.dropout_rate = train.dropout_rate;
    model.validate()?;

    let mut generator = GeneratorConfig::default();
    if let Some(g) = &file.generator {
        if let Some(v) = g.image_size {
            generator.image_height = v;
            generator.image_width = v;
        }
        if let Some(v) = g.scale {
            generator.scale = v;
        }
    }
    if let Some(v) = overrides.image_size {
        generator.image_height = v;
        generator.image_width = v;
    }
    if let Some(v) = overrides.scale {
        generator.scale = v;
    }

    let protocol = file.protocol.as_ref();
    let fold_seed = protocol
        .and_then(|p| p.fold_seed)
        .unwrap_or_else(|| depthcl_core::pipeline::sub_seed(train.seed, "folds", 0));
    let downstream_epochs = protocol.and_then(|p| p.downstream_epochs).unwrap_or(50);
    let downstream_learning_rate = protocol
        .and_then(|p| p.downstream_learning_rate)
        .unwrap_or(match preset {
            Preset::Desk => 1e-3,
            Preset::Paper => 1e-5,
        });
    let downstream_batch_size = protocol.and_then(|p| p.downstream_batch_size).unwrap_or(16);

    Ok(ResolvedRun {
        width,
        preset,
        train,
        model,
        generator,
        fold_seed,
        downstream_epochs,
        downstream_learning_rate,
        downstream_batch_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_to_desk_preset() {
        let run = resolve(None, &Overrides::default(), TrainMode::Pretrain).unwrap();
        assert_eq!(run.width, NumericWidth::Bits64);
        assert_eq!(run.train.batch_size, 32);
        assert_eq!(run.train.crop_size, 32);
        assert_eq!(run.model.encoder.embedding_dim, 128);
    }

    #[test]
    fn paper_preset_pins_the_stated_hyperparameters() {
        let file: RunConfigFile = toml::from_str("preset = \"paper\"").unwrap();
        let run = resolve(Some(&file), &Overrides::default(), TrainMode::Pretrain).unwrap();
        assert_eq!(run.train.temperature, 0.1);
        assert_eq!(run.train.learning_rate, 5e-5);
        assert_eq!(run.train.batch_size, 256);
        assert_eq!(run.train.crop_size, 224);
        assert_eq!(run.model.projector.hidden_sizes, vec![2048, 2048, 512]);
        assert_eq!(run.model.projector.output_dim, 128);

        let down = resolve(Some(&file), &Overrides::default(), TrainMode::Finetune).unwrap();
        assert_eq!(down.train.learning_rate, 1e-5);
        assert_eq!(down.train.batch_size, 16);
        assert_eq!(down.train.dropout_rate, 0.3);
    }

    #[test]
    fn flags_override_file_which_overrides_preset() {
        let file: RunConfigFile = toml::from_str("[train]\nepochs = 7\nseed = 9").unwrap();
        let overrides = Overrides {
            epochs: Some(3),
            ..Overrides::default()
        };
        let run = resolve(Some(&file), &overrides, TrainMode::Pretrain).unwrap();
        assert_eq!(run.train.epochs, 3, "flag beats file");
        assert_eq!(run.train.seed, 9, "file beats preset");
    }

    #[test]
    fn unknown_keys_rejected() {
        let parsed: std::result::Result<RunConfigFile, _> = toml::from_str("bogus = 1");
        assert!(parsed.is_err());
        let parsed: std::result::Result<RunConfigFile, _> =
            toml::from_str("[train]\nbogus = 1");
        assert!(parsed.is_err());
    }

    #[test]
    fn stages_imply_embedding_dim() {
        let file: RunConfigFile =
            toml::from_str("[encoder]\nstages = [[8,3,2],[24,3,2]]").unwrap();
        let run = resolve(Some(&file), &Overrides::default(), TrainMode::Pretrain).unwrap();
        assert_eq!(run.model.encoder.embedding_dim, 24);
    }

    #[test]
    fn echo_contains_resolved_values() {
        let run = resolve(None, &Overrides::default(), TrainMode::Pretrain).unwrap();
        let echo = run.echo();
        assert!(echo.contains("width = 64"));
        assert!(echo.contains("batch_size = 32"));
        assert!(echo.contains("preset = desk"));
    }
}
