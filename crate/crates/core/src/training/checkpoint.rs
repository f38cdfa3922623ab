//! Versioned checkpoint container: a text manifest (version, config, tensor
//! directory) followed by one raw little-endian f32 payload.
//!
//! The writer is fully deterministic, so save -> load -> save is
//! byte-identical; the resume test leans on that. Tensors cover parameter
//! values, both Adam moments, and BatchNorm running statistics, and the
//! manifest carries the training RNG position, so a resumed run replays the
//! uninterrupted one exactly.

use super::{stream_rng, TrainConfig, TrainError, Trainer, STREAM_TRAIN};
use ndarray::ArrayD;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const FORMAT_HEADER: &str = "duogan-checkpoint v1";

/// Container-format errors. The oracle artifact shares the same manifest
/// plus payload layout, so these cover both file kinds.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot {action} {path}: {source}")]
    Io {
        action: &'static str,
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unsupported format: expected `{expected}`, found `{found}`")]
    Version {
        expected: &'static str,
        found: String,
    },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("payload integrity: {0}")]
    Integrity(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}`")]
    UnknownTensor(String),
    #[error("tensor `{name}`: stored shape {got:?}, model expects {want:?}")]
    ShapeMismatch {
        name: String,
        want: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A full training-state snapshot, decoupled from the live networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub num_classes: usize,
    pub step: u64,
    pub adam_d_t: u64,
    pub adam_g_t: u64,
    pub rng_word_pos: u128,
    pub max_identity_gap: f64,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes a manifest-plus-payload container deterministically; equal
/// inputs yield equal bytes.
pub(crate) fn container_bytes(
    header: &str,
    fields: &[(&str, String)],
    tensors: &[TensorEntry],
) -> Vec<u8> {
    let mut manifest = String::new();
    writeln!(manifest, "{header}").unwrap();
    for (key, value) in fields {
        writeln!(manifest, "{key} = {value}").unwrap();
    }
    let mut offset = 0usize;
    for t in tensors {
        let shape = t
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        writeln!(manifest, "tensor {} {} @ {}", t.name, shape, offset).unwrap();
        offset += t.data.len() * 4;
    }
    writeln!(manifest, "payload {offset}").unwrap();

    let mut out = manifest.into_bytes();
    out.reserve(offset);
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let c = &ckpt.config;
    let fields = [
        ("step", ckpt.step.to_string()),
        ("num_classes", ckpt.num_classes.to_string()),
        ("adam_d.t", ckpt.adam_d_t.to_string()),
        ("adam_g.t", ckpt.adam_g_t.to_string()),
        ("rng.word_pos", ckpt.rng_word_pos.to_string()),
        ("max_identity_gap", ckpt.max_identity_gap.to_string()),
        ("config.lr_d", c.lr_d.to_string()),
        ("config.lr_g", c.lr_g.to_string()),
        ("config.beta1", c.beta1.to_string()),
        ("config.beta2", c.beta2.to_string()),
        ("config.batch_size", c.batch_size.to_string()),
        ("config.epochs", c.epochs.to_string()),
        ("config.noise_dim", c.noise_dim.to_string()),
        ("config.seed", c.seed.to_string()),
        ("config.d2_enabled", c.d2_enabled.to_string()),
        ("config.d_steps_per_g_step", c.d_steps_per_g_step.to_string()),
        ("config.generator_loss", c.generator_loss.to_string()),
    ];
    container_bytes(FORMAT_HEADER, &fields, &ckpt.tensors)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_bytes(ckpt)).map_err(|source| CheckpointError::Io {
        action: "write",
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let data = std::fs::read(path).map_err(|source| CheckpointError::Io {
        action: "read",
        path: path.to_path_buf(),
        source,
    })?;
    parse_checkpoint(&data)
}

fn read_line<'a>(
    data: &'a [u8],
    pos: &mut usize,
    line_no: &mut usize,
) -> Result<&'a str, CheckpointError> {
    if *pos >= data.len() {
        return Err(CheckpointError::Integrity(
            "manifest ended before a payload line".into(),
        ));
    }
    let len = data[*pos..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Integrity("unterminated manifest line".into()))?;
    *line_no += 1;
    let line = std::str::from_utf8(&data[*pos..*pos + len]).map_err(|_| {
        CheckpointError::Manifest {
            line: *line_no,
            msg: "not valid UTF-8".into(),
        }
    })?;
    *pos += len + 1;
    Ok(line)
}

/// The manifest and tensors of a container, before field interpretation.
pub(crate) struct RawContainer {
    pub fields: HashMap<String, String>,
    pub tensors: Vec<TensorEntry>,
    pub line_no: usize,
}

pub(crate) fn parse_container(
    data: &[u8],
    expected_header: &'static str,
) -> Result<RawContainer, CheckpointError> {
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let first = read_line(data, &mut pos, &mut line_no)?;
    if first != expected_header {
        return Err(CheckpointError::Version {
            expected: expected_header,
            found: first.to_string(),
        });
    }

    let mut fields: HashMap<String, String> = HashMap::new();
    let mut directory: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let payload_len;
    loop {
        let line = read_line(data, &mut pos, &mut line_no)?;
        let bad = |msg: String| CheckpointError::Manifest { line: line_no, msg };
        if let Some(rest) = line.strip_prefix("payload ") {
            payload_len = rest
                .parse::<usize>()
                .map_err(|_| bad(format!("bad payload length `{rest}`")))?;
            break;
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 4 || parts[2] != "@" {
                return Err(bad("expected `tensor <name> <shape> @ <offset>`".into()));
            }
            let shape = parts[1]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad shape `{}`", parts[1])))?;
            let offset = parts[3]
                .parse::<usize>()
                .map_err(|_| bad(format!("bad offset `{}`", parts[3])))?;
            directory.push((parts[0].to_string(), shape, offset));
        } else if let Some((key, value)) = line.split_once(" = ") {
            if fields.insert(key.to_string(), value.to_string()).is_some() {
                return Err(bad(format!("duplicate key `{key}`")));
            }
        } else {
            return Err(bad(format!("unrecognized line `{line}`")));
        }
    }

    let payload = &data[pos..];
    if payload.len() < payload_len {
        return Err(CheckpointError::Integrity(format!(
            "payload truncated: manifest promises {payload_len} bytes, file has {}",
            payload.len()
        )));
    }
    if payload.len() > payload_len {
        return Err(CheckpointError::Integrity(format!(
            "{} trailing bytes after the payload",
            payload.len() - payload_len
        )));
    }

    let mut tensors = Vec::with_capacity(directory.len());
    for (name, shape, offset) in directory {
        let len: usize = shape.iter().product();
        let end = offset
            .checked_add(len * 4)
            .filter(|&e| e <= payload_len)
            .ok_or_else(|| {
                CheckpointError::Integrity(format!(
                    "tensor `{name}` extends past the payload ({offset} + {} > {payload_len})",
                    len * 4
                ))
            })?;
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(TensorEntry { name, shape, data });
    }

    Ok(RawContainer {
        fields,
        tensors,
        line_no,
    })
}

pub fn parse_checkpoint(data: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let RawContainer {
        mut fields,
        tensors,
        line_no,
    } = parse_container(data, FORMAT_HEADER)?;

    let mut take = |key: &str| -> Result<String, CheckpointError> {
        fields.remove(key).ok_or_else(|| CheckpointError::Manifest {
            line: line_no,
            msg: format!("missing key `{key}`"),
        })
    };
    macro_rules! parse_field {
        ($key:expr, $ty:ty) => {
            take($key)?.parse::<$ty>().map_err(|e| CheckpointError::Manifest {
                line: line_no,
                msg: format!("bad value for `{}`: {e}", $key),
            })?
        };
    }
    let checkpoint = Checkpoint {
        step: parse_field!("step", u64),
        num_classes: parse_field!("num_classes", usize),
        adam_d_t: parse_field!("adam_d.t", u64),
        adam_g_t: parse_field!("adam_g.t", u64),
        rng_word_pos: parse_field!("rng.word_pos", u128),
        max_identity_gap: parse_field!("max_identity_gap", f64),
        config: TrainConfig {
            lr_d: parse_field!("config.lr_d", f32),
            lr_g: parse_field!("config.lr_g", f32),
            beta1: parse_field!("config.beta1", f32),
            beta2: parse_field!("config.beta2", f32),
            batch_size: parse_field!("config.batch_size", usize),
            epochs: parse_field!("config.epochs", usize),
            noise_dim: parse_field!("config.noise_dim", usize),
            seed: parse_field!("config.seed", u64),
            d2_enabled: parse_field!("config.d2_enabled", bool),
            d_steps_per_g_step: parse_field!("config.d_steps_per_g_step", usize),
            generator_loss: parse_field!("config.generator_loss", super::GeneratorLoss),
        },
        tensors,
    };
    if let Some(key) = fields.keys().next() {
        return Err(CheckpointError::Manifest {
            line: line_no,
            msg: format!("unknown key `{key}`"),
        });
    }
    Ok(checkpoint)
}

impl Trainer {
    /// Snapshots the complete training state.
    pub fn checkpoint(&mut self) -> Checkpoint {
        let mut tensors = Vec::new();
        fn push(tensors: &mut Vec<TensorEntry>, name: String, value: &ArrayD<f32>) {
            tensors.push(TensorEntry {
                name,
                shape: value.shape().to_vec(),
                data: value.iter().copied().collect(),
            });
        }
        for (name, p) in self.generator.named_params_mut() {
            push(&mut tensors, format!("g.{name}.value"), &p.value);
            push(&mut tensors, format!("g.{name}.m"), &p.m);
            push(&mut tensors, format!("g.{name}.v"), &p.v);
        }
        for (name, buf) in self.generator.named_buffers_mut() {
            push(&mut tensors, format!("g.{name}"), buf);
        }
        for (name, p) in self.discriminator.named_params_mut(false) {
            push(&mut tensors, format!("d.{name}.value"), &p.value);
            push(&mut tensors, format!("d.{name}.m"), &p.m);
            push(&mut tensors, format!("d.{name}.v"), &p.v);
        }
        for (name, buf) in self.discriminator.named_buffers_mut() {
            push(&mut tensors, format!("d.{name}"), buf);
        }
        Checkpoint {
            config: self.config.clone(),
            num_classes: self.num_classes,
            step: self.step,
            adam_d_t: self.adam_d.t,
            adam_g_t: self.adam_g.t,
            rng_word_pos: self.train_rng.get_word_pos(),
            max_identity_gap: self.max_identity_gap,
            tensors,
        }
    }

    /// Rebuilds a trainer purely from a snapshot.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let mut trainer = Trainer::new(ckpt.config.clone(), ckpt.num_classes)?;
        trainer.load_from(ckpt)?;
        Ok(trainer)
    }

    /// Resumes under an explicitly supplied config, which must agree with
    /// the snapshot field for field; a d2_enabled=true checkpoint cannot
    /// continue a d2_enabled=false run, and vice versa.
    pub fn resume(
        config: TrainConfig,
        num_classes: usize,
        ckpt: &Checkpoint,
    ) -> Result<Self, TrainError> {
        macro_rules! matches_field {
            ($field:ident) => {
                if config.$field != ckpt.config.$field {
                    return Err(TrainError::ConfigMismatch {
                        field: stringify!($field),
                        checkpoint: ckpt.config.$field.to_string(),
                        config: config.$field.to_string(),
                    });
                }
            };
        }
        matches_field!(lr_d);
        matches_field!(lr_g);
        matches_field!(beta1);
        matches_field!(beta2);
        matches_field!(batch_size);
        matches_field!(epochs);
        matches_field!(noise_dim);
        matches_field!(seed);
        matches_field!(d2_enabled);
        matches_field!(d_steps_per_g_step);
        matches_field!(generator_loss);
        if num_classes != ckpt.num_classes {
            return Err(TrainError::ConfigMismatch {
                field: "num_classes",
                checkpoint: ckpt.num_classes.to_string(),
                config: num_classes.to_string(),
            });
        }
        Self::from_checkpoint(ckpt)
    }

    fn load_from(&mut self, ckpt: &Checkpoint) -> Result<(), TrainError> {
        let mut entries: HashMap<&str, &TensorEntry> =
            ckpt.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        fn fill(
            entries: &mut HashMap<&str, &TensorEntry>,
            name: String,
            target: &mut ArrayD<f32>,
        ) -> Result<(), CheckpointError> {
            let entry = entries
                .remove(name.as_str())
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if entry.shape != target.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    want: target.shape().to_vec(),
                    got: entry.shape.clone(),
                });
            }
            for (t, &s) in target.iter_mut().zip(&entry.data) {
                *t = s;
            }
            Ok(())
        }
        for (name, p) in self.generator.named_params_mut() {
            fill(&mut entries, format!("g.{name}.value"), &mut p.value)?;
            fill(&mut entries, format!("g.{name}.m"), &mut p.m)?;
            fill(&mut entries, format!("g.{name}.v"), &mut p.v)?;
        }
        for (name, buf) in self.generator.named_buffers_mut() {
            fill(&mut entries, format!("g.{name}"), buf)?;
        }
        for (name, p) in self.discriminator.named_params_mut(false) {
            fill(&mut entries, format!("d.{name}.value"), &mut p.value)?;
            fill(&mut entries, format!("d.{name}.m"), &mut p.m)?;
            fill(&mut entries, format!("d.{name}.v"), &mut p.v)?;
        }
        for (name, buf) in self.discriminator.named_buffers_mut() {
            fill(&mut entries, format!("d.{name}"), buf)?;
        }
        if let Some(name) = entries.keys().next() {
            return Err(CheckpointError::UnknownTensor(name.to_string()).into());
        }
        self.adam_d.t = ckpt.adam_d_t;
        self.adam_g.t = ckpt.adam_g_t;
        self.train_rng = stream_rng(ckpt.config.seed, STREAM_TRAIN);
        self.train_rng.set_word_pos(ckpt.rng_word_pos);
        self.step = ckpt.step;
        self.max_identity_gap = ckpt.max_identity_gap;
        self.epoch_order = None;
        Ok(())
    }
}
