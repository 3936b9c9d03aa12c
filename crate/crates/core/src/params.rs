//! Flat parameter storage. Every learnable tensor lives in one contiguous
//! vector; modules hold [`Slot`]s into it. Enumeration order is the order in
//! which tensors are registered, which the model fixes as module declaration
//! order followed by field order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A contiguous range inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn of<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a>(&self, v: &'a mut [f64]) -> &'a mut [f64] {
        &mut v[self.offset..self.offset + self.len]
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// How a tensor is filled at initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slot(&self) -> Slot {
        Slot {
            offset: self.offset,
            len: self.len(),
        }
    }
}

/// Names, shapes and offsets of every learnable tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Slot {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let entry = ParamEntry {
            name,
            shape: shape.to_vec(),
            offset: self.total,
            init,
        };
        let slot = entry.slot();
        self.total += slot.len;
        self.entries.push(entry);
        slot
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a ParamEntry> + 'a {
        self.entries.iter().filter(move |e| e.name.starts_with(prefix))
    }

    /// Draws initial values for every entry.
    pub fn initialize(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        let mut v = vec![0.0; self.total];
        for e in &self.entries {
            let s = e.slot().of_mut(&mut v);
            match e.init {
                Init::Zeros => {}
                Init::Constant(c) => s.fill(c),
                Init::FanIn(fan) => {
                    let bound = 1.0 / (fan.max(1) as f64).sqrt();
                    for x in s {
                        *x = rng.gen_range(-bound..bound);
                    }
                }
            }
        }
        v
    }

    /// Errors unless `other` describes exactly the same tensors.
    pub fn ensure_matches(&self, other: &ParamLayout) -> Result<()> {
        if self.total != other.total || self.entries.len() != other.entries.len() {
            return Err(Error::Format(format!(
                "parameter layout mismatch: {} tensors / {} values vs {} tensors / {} values",
                self.entries.len(),
                self.total,
                other.entries.len(),
                other.total
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.shape != b.shape || a.offset != b.offset {
                return Err(Error::Format(format!(
                    "parameter layout mismatch at {} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }
}
