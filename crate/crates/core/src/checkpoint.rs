//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "VISMEMCK"
//! version      u32      1
//! header_len   u32
//! header       JSON (dims, vocabulary, vocabulary hash, training metadata)
//! block_count  u32
//! per block:   u16 name_len, name (UTF-8), u64 rows, u64 cols, rows*cols f64
//! ```
//!
//! Blocks appear in [`Block::ALL`] order; absent blocks are stored as 0×0.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ClassedVocabulary;
use crate::error::{Error, Result};
use crate::model::{Block, ModelDims, ModelParams};
use crate::numkit::DenseMatrix;

pub const MAGIC: &[u8; 8] = b"VISMEMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub lambda_recon: f64,
    /// Seeds of every random stream that produced the model, by name.
    pub seeds: BTreeMap<String, u64>,
    /// Training caption lengths, for generation.
    pub length_counts: Vec<(usize, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: ClassedVocabulary,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: ModelDims,
    tokens: Vec<String>,
    counts: Vec<u64>,
    classes: Vec<usize>,
    vocab_sha256: String,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(
        params: ModelParams,
        vocab: ClassedVocabulary,
        meta: CheckpointMeta,
    ) -> Result<Self> {
        if params.dims().vocab_size != vocab.len() || params.classes() != vocab.classes() {
            return Err(Error::Checkpoint(
                "vocabulary does not match the model".into(),
            ));
        }
        Ok(Self {
            params,
            vocab,
            meta,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            dims: self.params.dims().clone(),
            tokens: self.vocab.tokens().to_vec(),
            counts: self.vocab.counts().to_vec(),
            classes: self.vocab.classes().assignment().to_vec(),
            vocab_sha256: self.vocab.hash_hex(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(
            &u32::try_from(json.len())
                .map_err(|_| Error::Checkpoint("header too large".into()))?
                .to_le_bytes(),
        )?;
        w.write_all(&json)?;
        w.write_all(&(Block::ALL.len() as u32).to_le_bytes())?;
        for b in Block::ALL {
            let m = self.params.block(b);
            let name = b.name().as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(m.as_slice().len() * 8);
            for x in m.as_slice() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = read_u32(&mut r)? as usize;
        let mut json = vec![0u8; len];
        read_exact(&mut r, &mut json)?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let vocab = ClassedVocabulary::from_parts(header.tokens, header.counts, header.classes)?;
        if vocab.hash_hex() != header.vocab_sha256 {
            return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
        }
        header.dims.validate()?;
        if header.dims.vocab_size != vocab.len()
            || header.dims.class_count != vocab.classes().class_count()
        {
            return Err(Error::Checkpoint(
                "dims do not match the stored vocabulary".into(),
            ));
        }
        let mut params = ModelParams::zeros(header.dims, vocab.classes())?;

        let count = read_u32(&mut r)? as usize;
        if count != Block::ALL.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} blocks, found {count}",
                Block::ALL.len()
            )));
        }
        for b in Block::ALL {
            let mut nlen = [0u8; 2];
            read_exact(&mut r, &mut nlen)?;
            let mut name = vec![0u8; u16::from_le_bytes(nlen) as usize];
            read_exact(&mut r, &mut name)?;
            if name != b.name().as_bytes() {
                return Err(Error::Checkpoint(format!(
                    "expected block {}, found {}",
                    b.name(),
                    String::from_utf8_lossy(&name)
                )));
            }
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            if (rows, cols) != params.block(b).shape() {
                return Err(Error::Checkpoint(format!(
                    "block {} has shape {rows}x{cols}",
                    b.name()
                )));
            }
            let mut raw = vec![0u8; rows * cols * 8];
            read_exact(&mut r, &mut raw)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let m = DenseMatrix::from_vec(rows, cols, data)
                .map_err(|e| Error::Checkpoint(format!("block {}: {e}", b.name())))?;
            params.set_block(b, m)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last block".into()));
        }
        Ok(Self {
            params,
            vocab,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
