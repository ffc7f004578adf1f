use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{FbaBlockParams, XaParams};
use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

/// Training partition of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Base,
    Fba,
    Xa,
}

impl Partition {
    pub fn code(self) -> u8 {
        match self {
            Partition::Base => 0,
            Partition::Fba => 1,
            Partition::Xa => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Partition::Base),
            1 => Ok(Partition::Fba),
            2 => Ok(Partition::Xa),
            _ => Err(Error::Format(format!("unknown partition code {code}"))),
        }
    }
}

/// Resolution levels that can carry an FBA block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// Full image resolution.
    Level1,
    /// Half resolution.
    Level2,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Level1 => "level1",
            Level::Level2 => "level2",
        }
    }
}

/// Half-resolution layers that can carry prompt cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XaLayer {
    Down2,
    Mid,
}

impl XaLayer {
    pub fn name(self) -> &'static str {
        match self {
            XaLayer::Down2 => "down2",
            XaLayer::Mid => "mid",
        }
    }
}

/// Shape-determining hyperparameters of the denoiser.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Square image side; must be even.
    pub image_size: usize,
    pub widths: [usize; 2],
    pub time_dim: usize,
    pub fba_levels: Vec<Level>,
    pub pe_bands: usize,
    pub xa_layers: Vec<XaLayer>,
    /// Number of prompt attribute ids.
    pub vocab: usize,
    pub token_dim: usize,
    pub key_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            image_size: 16,
            widths: [16, 32],
            time_dim: 32,
            fba_levels: vec![Level::Level1, Level::Level2],
            pe_bands: 2,
            xa_layers: vec![XaLayer::Mid],
            vocab: 16,
            token_dim: 16,
            key_dim: 16,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || self.image_size % 2 != 0 {
            return Err(Error::config(format!("image_size {} must be even and >= 4", self.image_size)));
        }
        if self.widths.iter().any(|&w| w == 0) || self.time_dim < 2 || self.pe_bands == 0 {
            return Err(Error::config("widths, time_dim and pe_bands must be positive"));
        }
        for &w in &self.widths {
            if w % groups(w) != 0 {
                return Err(Error::config(format!("width {w} is not divisible by its group count")));
            }
        }
        if !self.xa_layers.is_empty() && (self.vocab == 0 || self.token_dim == 0 || self.key_dim == 0) {
            return Err(Error::config("cross-attention needs vocab, token_dim and key_dim"));
        }
        Ok(())
    }

    pub fn level_size(&self, level: Level) -> usize {
        match level {
            Level::Level1 => self.image_size,
            Level::Level2 => self.image_size / 2,
        }
    }

    pub fn level_width(&self, level: Level) -> usize {
        match level {
            Level::Level1 => self.widths[0],
            Level::Level2 => self.widths[1],
        }
    }

    pub fn has_fba(&self, level: Level) -> bool {
        self.fba_levels.contains(&level)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&self.hash_bytes())
    }

    pub fn hash_bytes(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("architecture serializes");
        Sha256::digest(&json).into()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Group-norm group count for a channel width.
pub fn groups(channels: usize) -> usize {
    let mut g = channels.min(4);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor,
}

/// Every weight of the denoiser, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub arch: Architecture,
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

struct Builder {
    seed: u64,
    entries: Vec<ParamEntry>,
}

impl Builder {
    fn push(&mut self, name: String, partition: Partition, value: Tensor) {
        self.entries.push(ParamEntry { name, partition, value });
    }

    fn randn(&mut self, shape: &[usize], std: f64) -> Tensor {
        let k = self.entries.len() as u64;
        rng::randn(shape, &mut rng::stream(self.seed, domain::PARAM_INIT, k, 0)).scale(std)
    }

    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize, gain: f64) {
        let std = gain / ((ci * k * k) as f64).sqrt();
        let w = self.randn(&[co, ci, k, k], std);
        self.push(format!("{name}.w"), Partition::Base, w);
        self.push(format!("{name}.b"), Partition::Base, Tensor::zeros(&[co]));
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) {
        let w = self.randn(&[out, inp], 1.0 / (inp as f64).sqrt());
        self.push(format!("{name}.w"), Partition::Base, w);
        self.push(format!("{name}.b"), Partition::Base, Tensor::zeros(&[out]));
    }

    fn resblock(&mut self, name: &str, ci: usize, co: usize, tdim: usize) {
        self.conv(&format!("{name}.conv1"), co, ci, 3, 1.0);
        self.linear(&format!("{name}.temb"), co, tdim);
        self.conv(&format!("{name}.conv2"), co, co, 3, 0.5);
        if ci != co {
            let w = self.randn(&[co, ci, 1, 1], 1.0 / (ci as f64).sqrt());
            self.push(format!("{name}.skip.w"), Partition::Base, w);
        }
    }
}

impl DenoiserParams {
    /// Seeded initialization. FBA residual convolutions and the
    /// cross-attention output projections start at zero.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let [c1, c2] = arch.widths;
        let td = arch.time_dim;
        let mut b = Builder {
            seed,
            entries: Vec::new(),
        };
        b.linear("time.l1", td, td);
        b.linear("time.l2", td, td);
        b.conv("in", c1, 3, 3, 1.0);
        b.resblock("rb1", c1, c1, td);
        b.conv("down", c2, c1, 3, 1.0);
        b.resblock("rb2", c2, c2, td);
        b.resblock("mid", c2, c2, td);
        b.conv("up", c1, c2 + c1, 3, 1.0);
        b.resblock("rb_up", c1, c1, td);
        b.conv("out", 3, c1, 3, 0.1);
        for &level in &arch.fba_levels {
            let k = b.entries.len() as u64;
            let p = FbaBlockParams::new(
                arch.level_width(level),
                arch.pe_bands,
                &mut rng::stream(seed, domain::PARAM_INIT, k, 1),
            );
            let n = level.name();
            b.push(format!("fba.{n}.wq"), Partition::Fba, p.wq);
            b.push(format!("fba.{n}.wk"), Partition::Fba, p.wk);
            b.push(format!("fba.{n}.wv"), Partition::Fba, p.wv);
            b.push(format!("fba.{n}.pe_proj"), Partition::Fba, p.pe_proj);
            b.push(format!("fba.{n}.resid_w"), Partition::Fba, p.resid_w);
            b.push(format!("fba.{n}.resid_b"), Partition::Fba, p.resid_b);
        }
        if !arch.xa_layers.is_empty() {
            let tokens = b.randn(&[arch.token_dim, arch.vocab], 1.0);
            b.push("xa.tokens".into(), Partition::Xa, tokens);
        }
        for &layer in &arch.xa_layers {
            let k = b.entries.len() as u64;
            let p = XaParams::new(
                c2,
                arch.token_dim,
                arch.key_dim,
                &mut rng::stream(seed, domain::PARAM_INIT, k, 2),
            );
            let n = layer.name();
            b.push(format!("xa.{n}.wq"), Partition::Xa, p.wq);
            b.push(format!("xa.{n}.wk"), Partition::Xa, p.wk);
            b.push(format!("xa.{n}.wv"), Partition::Xa, p.wv);
            b.push(format!("xa.{n}.out_w"), Partition::Xa, p.out_w);
            b.push(format!("xa.{n}.out_b"), Partition::Xa, p.out_b);
        }
        Self::from_entries(arch.clone(), b.entries)
    }

    pub fn from_entries(arch: Architecture, entries: Vec<ParamEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (k, e) in entries.iter().enumerate() {
            if index.insert(e.name.clone(), k).is_some() {
                return Err(Error::Format(format!("duplicate parameter {}", e.name)));
            }
        }
        Ok(DenoiserParams { arch, entries, index })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count, optionally restricted to one partition.
    pub fn count(&self, partition: Option<Partition>) -> usize {
        self.entries
            .iter()
            .filter(|e| partition.is_none_or(|p| e.partition == p))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name)
            .map(|k| &self.entries[k].value)
            .ok_or_else(|| Error::Index(format!("no parameter named {name}")))
    }

    pub fn value_mut(&mut self, k: usize) -> &mut Tensor {
        &mut self.entries[k].value
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let k = self
            .position(name)
            .ok_or_else(|| Error::Index(format!("no parameter named {name}")))?;
        value.ensure_same_shape(&self.entries[k].value, name)?;
        self.entries[k].value = value;
        Ok(())
    }

    /// Concatenated values of one partition, for bitwise comparisons.
    pub fn partition_values(&self, partition: Partition) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.partition == partition)
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }

    /// Resets every FBA and cross-attention weight to a fresh seeded
    /// initialization, leaving the base partition untouched.
    pub fn reset_added_blocks(&mut self, seed: u64) -> Result<()> {
        let fresh = Self::init(&self.arch, seed)?;
        for (e, f) in self.entries.iter_mut().zip(fresh.entries) {
            if e.partition != Partition::Base {
                e.value = f.value;
            }
        }
        Ok(())
    }

    /// FBA block weights at `level` as a standalone record.
    pub fn fba_block(&self, level: Level) -> Result<FbaBlockParams> {
        let n = level.name();
        Ok(FbaBlockParams {
            wq: self.get(&format!("fba.{n}.wq"))?.clone(),
            wk: self.get(&format!("fba.{n}.wk"))?.clone(),
            wv: self.get(&format!("fba.{n}.wv"))?.clone(),
            pe_proj: self.get(&format!("fba.{n}.pe_proj"))?.clone(),
            pe_bands: self.arch.pe_bands,
            resid_w: self.get(&format!("fba.{n}.resid_w"))?.clone(),
            resid_b: self.get(&format!("fba.{n}.resid_b"))?.clone(),
            trainable: true,
        })
    }
}
