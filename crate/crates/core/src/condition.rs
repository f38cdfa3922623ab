//! Multi-hot condition vectors and class schemas.
//!
//! A condition names the set of classes a generated image must contain. It is
//! the sum of the one-hot vectors of those classes, clamped to {0, 1}, so the
//! condition stays a fixed-length binary vector no matter how many classes are
//! requested. Schemas map human-readable class names to indices.

use ndarray::{Array2, Array3};
use std::collections::HashSet;
use std::fmt;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("schema needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("class {0} has an empty name")]
    EmptyName(usize),
    #[error("class name {0:?} appears more than once")]
    DuplicateName(String),
    #[error("class index {index} out of range for {num_classes} classes")]
    OutOfRange { index: usize, num_classes: usize },
    #[error("condition length {got} does not match schema of {expected} classes")]
    LengthMismatch { got: usize, expected: usize },
    #[error("spatial extent must be at least 1x1, got {height}x{width}")]
    BadExtent { height: usize, width: usize },
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("failed to read schema file: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Maps class indices to names. Immutable once constructed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionSchema {
    names: Vec<String>,
}

impl ConditionSchema {
    pub fn new(names: Vec<String>) -> Result<Self, SchemaError> {
        if names.len() < 2 {
            return Err(SchemaError::TooFewClasses(names.len()));
        }
        let mut seen = HashSet::new();
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(SchemaError::EmptyName(i));
            }
            if !seen.insert(name.clone()) {
                return Err(SchemaError::DuplicateName(name.clone()));
            }
        }
        Ok(Self { names })
    }

    /// The ten MNIST digit classes.
    pub fn digits() -> Self {
        Self::new((0..10).map(|d| d.to_string()).collect()).expect("digit schema is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(|s| s.as_str())
    }

    /// Resolves a class given as a name or a decimal index.
    pub fn resolve(&self, class: &str) -> Result<usize, SchemaError> {
        if let Some(i) = self.names.iter().position(|n| n == class) {
            return Ok(i);
        }
        if let Ok(i) = class.parse::<usize>() {
            if i < self.num_classes() {
                return Ok(i);
            }
        }
        Err(SchemaError::UnknownClass(class.to_string()))
    }

    /// Parses a schema file: `num_classes = C` plus one `class.<index>.name`
    /// entry per class. Unknown keys and gaps are errors.
    pub fn from_file(path: &Path) -> Result<Self, SchemaError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, SchemaError> {
        let mut num_classes: Option<usize> = None;
        let mut names: Vec<Option<String>> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = lineno + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| SchemaError::Parse {
                line: lineno,
                msg: format!("expected `key = value`, got {raw:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "num_classes" {
                let c: usize = value.parse().map_err(|_| SchemaError::Parse {
                    line: lineno,
                    msg: format!("num_classes must be a positive integer, got {value:?}"),
                })?;
                num_classes = Some(c);
                names.resize(c, None);
            } else if let Some(rest) = key.strip_prefix("class.") {
                let idx_str = rest.strip_suffix(".name").ok_or_else(|| SchemaError::Parse {
                    line: lineno,
                    msg: format!("unknown key {key:?}"),
                })?;
                let idx: usize = idx_str.parse().map_err(|_| SchemaError::Parse {
                    line: lineno,
                    msg: format!("bad class index {idx_str:?}"),
                })?;
                let c = num_classes.ok_or_else(|| SchemaError::Parse {
                    line: lineno,
                    msg: "num_classes must come before class entries".into(),
                })?;
                if idx >= c {
                    return Err(SchemaError::Parse {
                        line: lineno,
                        msg: format!("class index {idx} out of range for {c} classes"),
                    });
                }
                if names[idx].is_some() {
                    return Err(SchemaError::Parse {
                        line: lineno,
                        msg: format!("class {idx} named twice"),
                    });
                }
                names[idx] = Some(value.to_string());
            } else {
                return Err(SchemaError::Parse {
                    line: lineno,
                    msg: format!("unknown key {key:?}"),
                });
            }
        }
        let c = num_classes.ok_or_else(|| SchemaError::Parse {
            line: 0,
            msg: "missing num_classes".into(),
        })?;
        let mut out = Vec::with_capacity(c);
        for (i, name) in names.into_iter().enumerate() {
            out.push(name.ok_or_else(|| SchemaError::Parse {
                line: 0,
                msg: format!("class {i} has no name entry"),
            })?);
        }
        Self::new(out)
    }
}

/// Binary multi-hot class indicator of fixed length. Entries are stored as
/// the smallest integer type and cast to reals only at the network boundary.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConditionVector {
    bits: Vec<u8>,
}

impl ConditionVector {
    /// Builds the condition for a set of class indices: 1 at each listed
    /// index, 0 elsewhere. Duplicate indices clamp to a single 1.
    pub fn from_classes(
        classes: impl IntoIterator<Item = usize>,
        schema: &ConditionSchema,
    ) -> Result<Self, SchemaError> {
        let c = schema.num_classes();
        let mut bits = vec![0u8; c];
        for index in classes {
            if index >= c {
                return Err(SchemaError::OutOfRange {
                    index,
                    num_classes: c,
                });
            }
            bits[index] = 1;
        }
        Ok(Self { bits })
    }

    /// Wraps raw bits, validating that every entry is 0 or 1.
    pub fn from_bits(bits: Vec<u8>) -> Result<Self, SchemaError> {
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(SchemaError::OutOfRange {
                index: pos,
                num_classes: bits.len(),
            });
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// The set of class indices present in this condition.
    pub fn classes(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (b == 1).then_some(i))
            .collect()
    }

    /// The condition as real-valued generator input (0.0/1.0).
    pub fn to_generator_input(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    /// Broadcasts the condition to image resolution: channel k is a constant
    /// plane holding bit k. This is how the condition enters the
    /// discriminator's first layer.
    pub fn to_spatial(&self, height: usize, width: usize) -> Result<Array3<f32>, SchemaError> {
        if height == 0 || width == 0 {
            return Err(SchemaError::BadExtent { height, width });
        }
        let c = self.bits.len();
        let mut out = Array3::zeros((c, height, width));
        for (k, &b) in self.bits.iter().enumerate() {
            if b == 1 {
                out.index_axis_mut(ndarray::Axis(0), k).fill(1.0);
            }
        }
        Ok(out)
    }
}

/// Stacks conditions into a (batch, classes) matrix of 0.0/1.0.
pub fn condition_matrix(conditions: &[ConditionVector]) -> Array2<f32> {
    assert!(!conditions.is_empty());
    let c = conditions[0].len();
    let mut m = Array2::zeros((conditions.len(), c));
    for (i, cond) in conditions.iter().enumerate() {
        assert_eq!(cond.len(), c, "conditions must share a schema");
        for (j, &b) in cond.bits().iter().enumerate() {
            m[[i, j]] = b as f32;
        }
    }
    m
}

impl fmt::Display for ConditionVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, b) in self.bits.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{b}")?;
        }
        write!(f, "]")
    }
}
