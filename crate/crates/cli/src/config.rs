//! Run configuration: a flat `key = value` file.
//!
//! The format is deliberately strict. Blank lines and `#` comments are
//! skipped; everything else must be `key = value` with a known key, and a
//! key may appear at most once. Unknown keys are errors rather than
//! warnings so a typo cannot silently fall back to a default.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use duogan_core::training::GeneratorLoss;
use duogan_core::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("config is missing required key `{0}`")]
    Missing(&'static str),
    #[error("config: {0}")]
    Invalid(String),
}

/// Everything a training run needs beyond the CLI arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Composed dataset size; `None` means one pair per exemplar.
    pub n_samples: Option<usize>,
    pub data_images: PathBuf,
    pub data_labels: PathBuf,
    /// Class schema file; `None` means the ten MNIST digits.
    pub schema: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Steps between checkpoints; 0 checkpoints at epoch boundaries.
    pub checkpoint_interval: u64,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut train = TrainConfig::default();
        let mut lr: Option<f32> = None;
        let mut lr_d: Option<f32> = None;
        let mut lr_g: Option<f32> = None;
        let mut n_samples = None;
        let mut data_images = None;
        let mut data_labels = None;
        let mut schema = None;
        let mut out_dir = None;
        let mut checkpoint_interval = 0u64;
        let mut grid_rows = 6usize;
        let mut grid_cols = 6usize;

        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Line {
                    line: lineno,
                    msg: format!("expected `key = value`, got {raw:?}"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Line {
                    line: lineno,
                    msg: format!("duplicate key `{key}`"),
                });
            }

            fn parsed<T: std::str::FromStr>(
                key: &str,
                value: &str,
                line: usize,
            ) -> Result<T, ConfigError> {
                value.parse().map_err(|_| ConfigError::Line {
                    line,
                    msg: format!("bad value for `{key}`: {value:?}"),
                })
            }

            match key {
                "lr" => lr = Some(parsed(key, value, lineno)?),
                "lr_d" => lr_d = Some(parsed(key, value, lineno)?),
                "lr_g" => lr_g = Some(parsed(key, value, lineno)?),
                "beta1" => train.beta1 = parsed(key, value, lineno)?,
                "beta2" => train.beta2 = parsed(key, value, lineno)?,
                "batch_size" => train.batch_size = parsed(key, value, lineno)?,
                "epochs" => train.epochs = parsed(key, value, lineno)?,
                "noise_dim" => train.noise_dim = parsed(key, value, lineno)?,
                "seed" => train.seed = parsed(key, value, lineno)?,
                "d2_enabled" => train.d2_enabled = parsed(key, value, lineno)?,
                "d_steps_per_g_step" => train.d_steps_per_g_step = parsed(key, value, lineno)?,
                "generator_loss" => {
                    train.generator_loss =
                        value.parse::<GeneratorLoss>().map_err(|e| ConfigError::Line {
                            line: lineno,
                            msg: e,
                        })?
                }
                "n_samples" => n_samples = Some(parsed(key, value, lineno)?),
                "data.images" => data_images = Some(PathBuf::from(value)),
                "data.labels" => data_labels = Some(PathBuf::from(value)),
                "schema" => schema = Some(PathBuf::from(value)),
                "out_dir" => out_dir = Some(PathBuf::from(value)),
                "checkpoint_interval" => checkpoint_interval = parsed(key, value, lineno)?,
                "grid.rows" => grid_rows = parsed(key, value, lineno)?,
                "grid.cols" => grid_cols = parsed(key, value, lineno)?,
                _ => {
                    return Err(ConfigError::Line {
                        line: lineno,
                        msg: format!("unknown key `{key}`"),
                    })
                }
            }
        }

        // `lr` is a convenience that sets both rates; the specific keys win
        // regardless of their order in the file.
        if let Some(lr) = lr {
            train.lr_d = lr;
            train.lr_g = lr;
        }
        if let Some(lr_d) = lr_d {
            train.lr_d = lr_d;
        }
        if let Some(lr_g) = lr_g {
            train.lr_g = lr_g;
        }

        let config = RunConfig {
            train,
            n_samples,
            data_images: data_images.ok_or(ConfigError::Missing("data.images"))?,
            data_labels: data_labels.ok_or(ConfigError::Missing("data.labels"))?,
            schema,
            out_dir: out_dir.ok_or(ConfigError::Missing("out_dir"))?,
            checkpoint_interval,
            grid_rows,
            grid_cols,
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(ConfigError::Invalid(format!(
                "grid must be at least 1x1, got {}x{}",
                self.grid_rows, self.grid_cols
            )));
        }
        if self.n_samples == Some(0) {
            return Err(ConfigError::Invalid("n_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Verifies that every input file the run will read actually exists.
    pub fn check_inputs(&self) -> Result<(), ConfigError> {
        let mut required = vec![&self.data_images, &self.data_labels];
        if let Some(schema) = &self.schema {
            required.push(schema);
        }
        for path in required {
            if !path.is_file() {
                return Err(ConfigError::Invalid(format!(
                    "input file {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "data.images = imgs\ndata.labels = lbls\nout_dir = out\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.n_samples, None);
        assert_eq!(c.schema, None);
        assert_eq!(c.checkpoint_interval, 0);
        assert_eq!((c.grid_rows, c.grid_cols), (6, 6));
        assert_eq!(c.data_images, PathBuf::from("imgs"));
        assert_eq!(c.out_dir, PathBuf::from("out"));
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let text = format!("# a comment\n\n  \n{MINIMAL}# trailing\n");
        assert!(RunConfig::parse(&text).is_ok());
    }

    #[test]
    fn lr_sets_both_rates() {
        let c = RunConfig::parse(&format!("{MINIMAL}lr = 0.001\n")).unwrap();
        assert_eq!(c.train.lr_d, 1e-3);
        assert_eq!(c.train.lr_g, 1e-3);
    }

    #[test]
    fn specific_rates_beat_lr_in_either_order() {
        let a = RunConfig::parse(&format!("{MINIMAL}lr = 0.001\nlr_d = 0.004\n")).unwrap();
        let b = RunConfig::parse(&format!("{MINIMAL}lr_d = 0.004\nlr = 0.001\n")).unwrap();
        for c in [a, b] {
            assert_eq!(c.train.lr_d, 4e-3);
            assert_eq!(c.train.lr_g, 1e-3);
        }
    }

    #[test]
    fn every_training_key_is_applied() {
        let text = format!(
            "{MINIMAL}lr_d = 0.0001\nlr_g = 0.0002\nbeta1 = 0.4\nbeta2 = 0.99\n\
             batch_size = 16\nepochs = 3\nnoise_dim = 50\nseed = 9\n\
             d2_enabled = false\nd_steps_per_g_step = 2\ngenerator_loss = minimax\n\
             n_samples = 1234\nschema = s.cfg\ncheckpoint_interval = 40\n\
             grid.rows = 2\ngrid.cols = 3\n"
        );
        let c = RunConfig::parse(&text).unwrap();
        assert_eq!(c.train.lr_d, 1e-4);
        assert_eq!(c.train.lr_g, 2e-4);
        assert_eq!(c.train.beta1, 0.4);
        assert_eq!(c.train.beta2, 0.99);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.noise_dim, 50);
        assert_eq!(c.train.seed, 9);
        assert!(!c.train.d2_enabled);
        assert_eq!(c.train.d_steps_per_g_step, 2);
        assert_eq!(c.train.generator_loss, GeneratorLoss::Minimax);
        assert_eq!(c.n_samples, Some(1234));
        assert_eq!(c.schema, Some(PathBuf::from("s.cfg")));
        assert_eq!(c.checkpoint_interval, 40);
        assert_eq!((c.grid_rows, c.grid_cols), (2, 3));
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = format!("{MINIMAL}\nbatch_sizes = 64\n");
        let err = RunConfig::parse(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 5"), "{msg}");
        assert!(msg.contains("unknown key `batch_sizes`"), "{msg}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let text = format!("{MINIMAL}seed = 1\nseed = 2\n");
        let msg = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(msg.contains("line 5"), "{msg}");
        assert!(msg.contains("duplicate key `seed`"), "{msg}");
    }

    #[test]
    fn bad_value_names_key_and_line() {
        let msg = RunConfig::parse(&format!("{MINIMAL}epochs = soon\n"))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 4"), "{msg}");
        assert!(msg.contains("`epochs`"), "{msg}");
        assert!(msg.contains("soon"), "{msg}");
    }

    #[test]
    fn bad_generator_loss_is_explained() {
        let msg = RunConfig::parse(&format!("{MINIMAL}generator_loss = hinge\n"))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("hinge"), "{msg}");
        assert!(msg.contains("non_saturating"), "{msg}");
    }

    #[test]
    fn missing_required_keys_are_named() {
        let msg = RunConfig::parse("data.images = x\nout_dir = y\n")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("data.labels"), "{msg}");
    }

    #[test]
    fn line_without_equals_is_rejected() {
        let msg = RunConfig::parse(&format!("{MINIMAL}epochs\n"))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 4"), "{msg}");
        assert!(msg.contains("key = value"), "{msg}");
    }

    #[test]
    fn invalid_training_values_fail_validation() {
        let msg = RunConfig::parse(&format!("{MINIMAL}batch_size = 1\n"))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("batch_size"), "{msg}");
        assert!(RunConfig::parse(&format!("{MINIMAL}grid.rows = 0\n")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}n_samples = 0\n")).is_err());
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = RunConfig::from_file(Path::new("/no/such/config.cfg")).unwrap_err();
        assert!(err.to_string().contains("/no/such/config.cfg"));
    }

    #[test]
    fn check_inputs_reports_missing_data() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        let msg = c.check_inputs().unwrap_err().to_string();
        assert!(msg.contains("imgs"), "{msg}");
    }
}
