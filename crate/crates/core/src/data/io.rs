//! Dataset file: `LLDS`, u32 version, u64 record count, then per record a
//! u32 header length, the JSON header, a u64 double count and the raw
//! little-endian doubles (query image rows first, then latent targets).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::example::{Accuracy, ExampleMetadata, SupervisionMode, TrainingExample};
use super::format::{LatentSpan, ResponseSegments};
use super::tokens::TokenId;
use crate::error::{Error, Result};
use crate::pca::read_f64s;

const MAGIC: &[u8; 4] = b"LLDS";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    query_tokens: Vec<TokenId>,
    think_prefix: Vec<TokenId>,
    budget: usize,
    parser_text: Vec<TokenId>,
    think_suffix: Vec<TokenId>,
    answer: Vec<TokenId>,
    accuracy: Accuracy,
    mode: SupervisionMode,
    metadata: ExampleMetadata,
    /// Embedding width of image rows and targets.
    dim: usize,
    image_rows: usize,
    target_rows: usize,
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn rows(flat: &[f64], n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| flat[i * dim..(i + 1) * dim].to_vec()).collect()
}

pub fn write_dataset(mut w: impl Write, examples: &[TrainingExample]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(examples.len() as u64).to_le_bytes())?;
    for ex in examples {
        ex.segments.validate()?;
        let targets = ex.latent_targets().unwrap_or(&[]);
        let dim = ex
            .query_image
            .first()
            .or(targets.first())
            .map_or(0, Vec::len);
        if ex.query_image.iter().chain(targets).any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument(format!(
                "example {} has ragged embedding rows",
                ex.metadata.source_id
            )));
        }
        let s = &ex.segments;
        let header = Header {
            query_tokens: ex.query_tokens.clone(),
            think_prefix: s.think_prefix.clone(),
            budget: s.budget(),
            parser_text: s.parser_text.clone(),
            think_suffix: s.think_suffix.clone(),
            answer: s.answer.clone(),
            accuracy: ex.accuracy,
            mode: ex.mode,
            metadata: ex.metadata.clone(),
            dim,
            image_rows: ex.query_image.len(),
            target_rows: ex.latent_targets().map_or(0, <[_]>::len),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let n = (header.image_rows + header.target_rows) * dim;
        w.write_all(&(n as u64).to_le_bytes())?;
        for v in ex.query_image.iter().chain(targets).flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset(mut r: impl Read) -> Result<Vec<TrainingExample>> {
    if &read_array::<4>(&mut r)? != MAGIC {
        return Err(Error::FileFormat("not a dataset file".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::FileFormat(format!("unsupported dataset version {version}")));
    }
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let h: Header = serde_json::from_slice(&json)?;
        let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
        if n != (h.image_rows + h.target_rows) * h.dim {
            return Err(Error::FileFormat(format!(
                "record {} declares {n} doubles, header implies {}",
                h.metadata.source_id,
                (h.image_rows + h.target_rows) * h.dim
            )));
        }
        let flat = read_f64s(&mut r, n)?;
        let (img, tgt) = flat.split_at(h.image_rows * h.dim);
        let latent = (h.budget > 0).then(|| LatentSpan {
            budget: h.budget,
            targets: (h.target_rows > 0).then(|| rows(tgt, h.target_rows, h.dim)),
        });
        let segments = ResponseSegments {
            think_prefix: h.think_prefix,
            latent,
            parser_text: h.parser_text,
            think_suffix: h.think_suffix,
            answer: h.answer,
        };
        segments.validate()?;
        out.push(TrainingExample {
            query_image: rows(img, h.image_rows, h.dim),
            query_tokens: h.query_tokens,
            segments,
            accuracy: h.accuracy,
            mode: h.mode,
            metadata: h.metadata,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::FileFormat("trailing bytes after last record".into()));
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[TrainingExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, examples)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>> {
    read_dataset(BufReader::new(File::open(path)?))
}
