//! Versioned binary model files.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | content |
//! |---|---|---|
//! | 0 | 4 | magic `DDNN` |
//! | 4 | 2 | format version (`u16`) |
//! | 6 | 4 | header length `h` (`u32`) |
//! | 10 | h | JSON header ([`ModelHeader`]) |
//! | 10 + h | ... | matrix blocks in header order |
//!
//! A matrix block is `rows: u64`, `cols: u64`, then `rows·cols` `f64` values in
//! row-major order. The header lists every block with its expected shape.

use std::fs;
use std::path::{Path, PathBuf};

use dictnet_core::deep_net::NetworkLayer;
use dictnet_core::numerics::RNG_ALGORITHM;
use dictnet_core::supervised::BlockLayout;
use dictnet_core::{
    ActivationKind, AtomAllocation, FinalLayerModel, InversionGuard, Matrix, NetworkSpec,
    TrainedNetwork, Variant,
};
use serde::{Deserialize, Serialize};

use crate::data_io::Normalization;

pub const MAGIC: [u8; 4] = *b"DDNN";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file: bad magic {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported model format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("model file truncated in {section} at offset {offset}")]
    Truncated { section: String, offset: usize },
    #[error("malformed model header: {0}")]
    Header(String),
    #[error("block {block}: header declares {declared:?}, block holds {found:?}")]
    BlockShape {
        block: String,
        declared: (usize, usize),
        found: (usize, usize),
    },
    #[error("block {block}: {source}")]
    BlockData {
        block: String,
        #[source]
        source: dictnet_core::Error,
    },
    #[error("dimension chain broken at {at}: expected {expected} rows, found {found}")]
    DimensionChain {
        at: String,
        expected: usize,
        found: usize,
    },
    #[error("model file has {0} trailing bytes")]
    TrailingBytes(usize),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub loss_trace: Vec<f64>,
    pub layout: Option<BlockLayout>,
}

/// Everything except the matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub variant: Variant,
    pub activation: ActivationKind,
    pub guard: InversionGuard,
    pub rng_algorithm: String,
    pub class_labels: Vec<i64>,
    pub layers: Vec<LayerEntry>,
    pub final_mu: f64,
    pub final_allocation: Option<AtomAllocation>,
    pub final_loss_trace: Vec<f64>,
    pub spec: NetworkSpec,
    pub normalization: Normalization,
    pub blocks: Vec<BlockEntry>,
}

impl ModelHeader {
    /// `(rows, cols)` of every dictionary, input side first, final layer last.
    pub fn dictionary_shapes(&self) -> Vec<(usize, usize)> {
        self.blocks
            .iter()
            .filter(|b| b.name.ends_with(".dictionary"))
            .map(|b| (b.rows, b.cols))
            .collect()
    }
}

fn block_names(net: &TrainedNetwork) -> Vec<(String, &Matrix)> {
    let mut out: Vec<(String, &Matrix)> = net
        .layers
        .iter()
        .enumerate()
        .map(|(k, l)| (format!("layer{k}.dictionary"), &l.dictionary))
        .collect();
    out.push(("final.dictionary".into(), &net.final_layer.dictionary));
    out.push(("final.classifier".into(), &net.final_layer.classifier));
    if let Some(w) = &net.final_layer.consistency {
        out.push(("final.consistency".into(), w));
    }
    out
}

/// Serializes a network and its input normalization.
pub fn encode_model(net: &TrainedNetwork, normalization: &Normalization) -> Vec<u8> {
    let blocks = block_names(net);
    let header = ModelHeader {
        variant: net.spec.variant,
        activation: net.activation,
        guard: net.guard,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        class_labels: net.class_labels.clone(),
        layers: net
            .layers
            .iter()
            .map(|l| LayerEntry {
                loss_trace: l.loss_trace.clone(),
                layout: l.layout,
            })
            .collect(),
        final_mu: net.final_layer.mu,
        final_allocation: net.final_layer.allocation.clone(),
        final_loss_trace: net.final_loss_trace.clone(),
        spec: net.spec.clone(),
        normalization: normalization.clone(),
        blocks: blocks
            .iter()
            .map(|(name, m)| BlockEntry {
                name: name.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("model header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in blocks {
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelError::Truncated {
                section: section.to_string(),
                offset: self.pos,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        let b = self.take(8, section)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Reads magic, version and header only.
pub fn decode_header(bytes: &[u8]) -> Result<(ModelHeader, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| ModelError::BadMagic {
        found: bytes.iter().take(4).copied().collect(),
    })?;
    if magic != MAGIC {
        return Err(ModelError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let v = r.take(2, "version")?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let len = r.take(4, "header length")?;
    let len = u32::from_le_bytes([len[0], len[1], len[2], len[3]]) as usize;
    let json = r.take(len, "header")?;
    let header: ModelHeader = serde_json::from_slice(json).map_err(|e| ModelError::Header(e.to_string()))?;
    Ok((header, r.pos))
}

/// Inverse of [`encode_model`].
pub fn decode_model(bytes: &[u8]) -> Result<(TrainedNetwork, Normalization)> {
    let (header, start) = decode_header(bytes)?;
    let mut r = Reader { bytes, pos: start };
    let mut matrices = Vec::with_capacity(header.blocks.len());
    for entry in &header.blocks {
        let rows = r.u64(&entry.name)? as usize;
        let cols = r.u64(&entry.name)? as usize;
        if (rows, cols) != (entry.rows, entry.cols) {
            return Err(ModelError::BlockShape {
                block: entry.name.clone(),
                declared: (entry.rows, entry.cols),
                found: (rows, cols),
            });
        }
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| ModelError::Header(format!("block {} is too large", entry.name)))?;
        let raw = r.take(n, &entry.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Matrix::new(rows, cols, data).map_err(|source| ModelError::BlockData {
            block: entry.name.clone(),
            source,
        })?;
        matrices.push((entry.name.clone(), m));
    }
    if r.pos != bytes.len() {
        return Err(ModelError::TrailingBytes(bytes.len() - r.pos));
    }
    let net = assemble(header.clone(), matrices)?;
    Ok((net, header.normalization))
}

fn assemble(header: ModelHeader, matrices: Vec<(String, Matrix)>) -> Result<TrainedNetwork> {
    let take = |name: &str| -> Option<Matrix> {
        matrices.iter().position(|(n, _)| n == name).map(|i| matrices[i].1.clone())
    };
    let missing = |name: &str| ModelError::Header(format!("missing block {name}"));
    let mut layers = Vec::with_capacity(header.layers.len());
    for (k, entry) in header.layers.iter().enumerate() {
        let name = format!("layer{k}.dictionary");
        let dictionary = take(&name).ok_or_else(|| missing(&name))?;
        layers.push(NetworkLayer {
            dictionary,
            loss_trace: entry.loss_trace.clone(),
            layout: entry.layout,
        });
    }
    let final_layer = FinalLayerModel {
        dictionary: take("final.dictionary").ok_or_else(|| missing("final.dictionary"))?,
        classifier: take("final.classifier").ok_or_else(|| missing("final.classifier"))?,
        consistency: take("final.consistency"),
        mu: header.final_mu,
        allocation: header.final_allocation,
    };
    let net = TrainedNetwork {
        layers,
        final_layer,
        final_loss_trace: header.final_loss_trace,
        activation: header.activation,
        guard: header.guard,
        class_labels: header.class_labels,
        spec: header.spec,
    };
    check_chain(&net)?;
    Ok(net)
}

fn check_chain(net: &TrainedNetwork) -> Result<()> {
    let chain = |at: String, expected: usize, found: usize| {
        if expected == found {
            Ok(())
        } else {
            Err(ModelError::DimensionChain { at, expected, found })
        }
    };
    for (k, pair) in net.layers.windows(2).enumerate() {
        chain(format!("layer{}", k + 1), pair[0].dictionary.cols(), pair[1].dictionary.rows())?;
    }
    if let Some(last) = net.layers.last() {
        chain("final".into(), last.dictionary.cols(), net.final_layer.dictionary.rows())?;
    }
    let fl = &net.final_layer;
    chain("final.classifier".into(), net.class_labels.len(), fl.classifier.rows())?;
    chain("final.classifier columns".into(), fl.dictionary.cols(), fl.classifier.cols())?;
    if let Some(w) = &fl.consistency {
        chain("final.consistency".into(), fl.dictionary.cols(), w.rows())?;
    }
    if net.spec.layers.len() != net.layers.len() + 1 {
        return Err(ModelError::Header(format!(
            "spec lists {} layers, file holds {}",
            net.spec.layers.len(),
            net.layers.len() + 1
        )));
    }
    Ok(())
}

pub fn save_model(net: &TrainedNetwork, normalization: &Normalization, path: &Path) -> Result<()> {
    fs::write(path, encode_model(net, normalization)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<(TrainedNetwork, Normalization)> {
    decode_model(&read(path)?)
}

pub fn read_header(path: &Path) -> Result<ModelHeader> {
    Ok(decode_header(&read(path)?)?.0)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}
