//! `key = value` run configuration covering the network, the optimizer and
//! the validation split.

use std::path::Path;

use thiserror::Error;

use crate::siamese::{ArchitectureConfig, ConvLayer, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("unknown key `{key}` on line {line}")]
    UnknownKey { line: usize, key: String },
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub architecture: ArchitectureConfig,
    pub train: TrainConfig,
    /// Hold out whole cliques rather than individual cover pairs.
    pub split_by_clique: bool,
    /// Cliques (or pairs) held out for validation; a default fraction when unset.
    pub val_size: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            architecture: ArchitectureConfig::default(),
            train: TrainConfig::default(),
            split_by_clique: false,
            val_size: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "batch_size",
    "epochs",
    "dropout_rate",
    "l2_lambda",
    "lr",
    "seed",
    "conv_filters",
    "conv_kernels",
    "fc_widths",
    "input_bins",
    "input_frames",
    "alpha_init",
    "alpha_flip_every",
    "split_by_clique",
    "val_size",
];

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

fn parse_kernel(v: &str) -> Option<(usize, usize)> {
    let (h, w) = v.trim().split_once(['x', 'X'])?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

impl PipelineConfig {
    /// Applies one setting. Filter and kernel lists keep the other list's
    /// length in step: setting three filters with two kernels reuses the last
    /// kernel.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse `{v}`"))
        }
        let arch = &mut self.architecture;
        match key {
            "batch_size" => self.train.batch_size = num(value)?,
            "epochs" => self.train.epochs = num(value)?,
            "dropout_rate" => self.train.dropout_rate = num(value)?,
            "l2_lambda" => self.train.l2_lambda = num(value)?,
            "lr" => self.train.lr = num(value)?,
            "seed" => self.train.seed = num(value)?,
            "alpha_init" => arch.alpha_init = num(value)?,
            "alpha_flip_every" => arch.alpha_flip_every = num(value)?,
            "input_bins" => arch.input_shape.0 = num(value)?,
            "input_frames" => arch.input_shape.1 = num(value)?,
            "split_by_clique" => self.split_by_clique = num(value)?,
            "val_size" => self.val_size = Some(num(value)?),
            "fc_widths" => {
                arch.fc_widths =
                    parse_list(value).ok_or_else(|| format!("bad width list `{value}`"))?
            }
            "conv_filters" => {
                let filters: Vec<usize> =
                    parse_list(value).ok_or_else(|| format!("bad filter list `{value}`"))?;
                let fallback = arch.conv_layers.last().map(|l| l.kernel).unwrap_or((3, 3));
                arch.conv_layers = filters
                    .iter()
                    .enumerate()
                    .map(|(i, &f)| ConvLayer {
                        filters: f,
                        kernel: arch
                            .conv_layers
                            .get(i)
                            .map(|l| l.kernel)
                            .unwrap_or(fallback),
                    })
                    .collect();
            }
            "conv_kernels" => {
                let kernels: Vec<(usize, usize)> = value
                    .split(',')
                    .map(parse_kernel)
                    .collect::<Option<_>>()
                    .ok_or_else(|| format!("bad kernel list `{value}`, expected e.g. 5x5,3x3"))?;
                let fallback = arch.conv_layers.last().map(|l| l.filters).unwrap_or(16);
                arch.conv_layers = kernels
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| ConvLayer {
                        filters: arch
                            .conv_layers
                            .get(i)
                            .map(|l| l.filters)
                            .unwrap_or(fallback),
                        kernel: k,
                    })
                    .collect();
            }
            _ => return Err(String::new()),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                detail: format!("expected key = value, got `{content}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: k.to_string(),
                });
            }
            cfg.set(k, v)
                .map_err(|detail| ConfigError::Syntax { line, detail })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::parse_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            PipelineConfig::parse_str("# nothing\n\n").unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn keys_override_fields() {
        let cfg = PipelineConfig::parse_str(
            "epochs = 2\nlr=0.01 # faster\nconv_filters = 8,4\nconv_kernels = 3x3, 2x2\nfc_widths = 16,8\n\
             input_frames = 40\nsplit_by_clique = true\nalpha_init = 0.5\nalpha_flip_every = 0\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(
            cfg.architecture.conv_layers,
            vec![
                ConvLayer {
                    filters: 8,
                    kernel: (3, 3)
                },
                ConvLayer {
                    filters: 4,
                    kernel: (2, 2)
                }
            ]
        );
        assert_eq!(cfg.architecture.fc_widths, vec![16, 8]);
        assert_eq!(cfg.architecture.input_shape, (84, 40));
        assert_eq!(cfg.architecture.alpha_init, 0.5);
        assert_eq!(cfg.architecture.alpha_flip_every, 0);
        assert!(cfg.split_by_clique);
    }

    #[test]
    fn errors_name_the_line() {
        assert_eq!(
            PipelineConfig::parse_str("epochs = 2\nwarmup = 3\n"),
            Err(ConfigError::UnknownKey {
                line: 2,
                key: "warmup".into()
            })
        );
        assert!(matches!(
            PipelineConfig::parse_str("epochs\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            PipelineConfig::parse_str("\nconv_kernels = 3by3\n"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
    }
}
