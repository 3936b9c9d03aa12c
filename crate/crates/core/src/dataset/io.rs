//! Dataset file: magic `SRD1`, a little-endian `u32` header length, a UTF-8
//! JSON header, then little-endian `f32` arrays in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, PromptPair, SynthWorldConfig};
use crate::encoders::LatentShape;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SRD1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dtype: String,
    seed: u64,
    config: SynthWorldConfig,
    items: usize,
    pairs: Vec<PairMeta>,
    arrays: Vec<ArrayMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairMeta {
    group: usize,
    adversarial: bool,
    tokens: Vec<usize>,
    planted: Vec<usize>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
#[serde(deny_unknown_fields)]
struct ArrayMeta {
    name: String,
    len: usize,
}

fn concat<'a>(parts: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    parts.flat_map(|p| p.iter().copied()).collect()
}

fn arrays(d: &Dataset) -> Vec<(&'static str, Vec<f64>)> {
    vec![
        ("unsafe_direction", d.unsafe_direction.clone()),
        ("latent_pattern", d.latent_pattern.clone()),
        ("vocab", d.vocab.clone()),
        ("angles_deg", d.pairs.iter().map(|p| p.angle_deg).collect()),
        ("emb_safe", concat(d.pairs.iter().map(|p| &p.emb_safe[..]))),
        ("emb_unsafe", concat(d.pairs.iter().map(|p| &p.emb_unsafe[..]))),
        ("m_star", concat(d.pairs.iter().map(|p| &p.m_star[..]))),
        ("backgrounds", d.backgrounds.clone()),
        ("noises", d.noises.clone()),
    ]
}

/// Array names and lengths implied by a header's config and pair metadata.
fn expected_arrays(config: &SynthWorldConfig, pairs: &[PairMeta]) -> Vec<ArrayMeta> {
    let d = config.d_model;
    let tokens: usize = pairs.iter().map(|p| p.tokens.len()).sum();
    let latents = pairs.len() * config.seeds_per_prompt * config.latent.len();
    [
        ("unsafe_direction", d),
        ("latent_pattern", config.latent.len()),
        ("vocab", config.vocab_size * d),
        ("angles_deg", pairs.len()),
        ("emb_safe", tokens * d),
        ("emb_unsafe", tokens * d),
        ("m_star", tokens),
        ("backgrounds", latents),
        ("noises", latents),
    ]
    .into_iter()
    .map(|(n, len)| ArrayMeta { name: n.into(), len })
    .collect()
}

pub(crate) fn to_bytes(d: &Dataset) -> Vec<u8> {
    let arrays = arrays(d);
    let header = Header {
        version: VERSION,
        dtype: "f32le".into(),
        seed: d.seed,
        config: d.config.clone(),
        items: d.len(),
        pairs: d
            .pairs
            .iter()
            .map(|p| PairMeta {
                group: p.group,
                adversarial: p.adversarial,
                tokens: p.tokens.clone(),
                planted: p.planted.clone(),
            })
            .collect(),
        arrays: arrays.iter().map(|(n, a)| ArrayMeta { name: (*n).into(), len: a.len() }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let total: usize = arrays.iter().map(|(_, a)| a.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 4 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, a) in &arrays {
        for &v in a {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn format(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(format("not a dataset file (missing SRD1 magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| format("file ends inside the header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| format(format!("bad header: {e}")))?;
    if header.version != VERSION || header.dtype != "f32le" {
        return Err(format(format!(
            "unsupported dataset version {} / dtype {} (expected {VERSION} / f32le)",
            header.version, header.dtype
        )));
    }
    let config = header.config;
    config.validate().map_err(|e| format(format!("header config invalid: {e}")))?;
    if header.pairs.len() != config.prompt_pairs() {
        return Err(format(format!("header lists {} pairs, config implies {}", header.pairs.len(), config.prompt_pairs())));
    }
    let expect = expected_arrays(&config, &header.pairs);
    if header.arrays != expect {
        return Err(format("array table does not match the header config"));
    }
    let total: usize = expect.iter().map(|a| a.len).sum();
    let data = &bytes[8 + hlen..];
    if data.len() != 4 * total {
        return Err(format(format!(
            "payload has {} bytes, header requires {} (truncated or padded file)",
            data.len(),
            4 * total
        )));
    }
    let mut values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let mut arr: Vec<Vec<f64>> = expect.iter().map(|a| take(a.len)).collect();
    if arr.iter().flatten().any(|v| !v.is_finite()) {
        return Err(format("non-finite value in payload"));
    }
    let noises = arr.pop().expect("noises");
    let backgrounds = arr.pop().expect("backgrounds");
    let m_star = arr.pop().expect("m_star");
    let emb_unsafe = arr.pop().expect("emb_unsafe");
    let emb_safe = arr.pop().expect("emb_safe");
    let angles = arr.pop().expect("angles");
    let vocab = arr.pop().expect("vocab");
    let pattern = arr.pop().expect("pattern");
    let u = arr.pop().expect("direction");

    let d = config.d_model;
    let mut pairs = Vec::with_capacity(header.pairs.len());
    let mut off = 0;
    for (id, (meta, angle)) in header.pairs.into_iter().zip(angles).enumerate() {
        let l = meta.tokens.len();
        if meta.tokens.iter().any(|&t| t >= config.vocab_size) || meta.planted.iter().any(|&p| p >= l) {
            return Err(format(format!("pair {id} references tokens outside its prompt or the vocabulary")));
        }
        pairs.push(PromptPair {
            id,
            group: meta.group,
            adversarial: meta.adversarial,
            tokens: meta.tokens,
            planted: meta.planted,
            angle_deg: angle,
            emb_safe: emb_safe[off * d..(off + l) * d].to_vec(),
            emb_unsafe: emb_unsafe[off * d..(off + l) * d].to_vec(),
            m_star: m_star[off..off + l].to_vec(),
        });
        off += l;
    }
    let ds = Dataset::assemble(config, header.seed, u, pattern, vocab, pairs, backgrounds, noises);
    if ds.len() != header.items {
        return Err(format(format!("header claims {} items, layout yields {}", header.items, ds.len())));
    }
    Ok(ds)
}

/// Writes atomically through a temporary sibling file.
pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    crate::atomic_write(path.as_ref(), &to_bytes(d))
}

/// Reads and validates a dataset file; nothing is returned unless every check passes.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Like [`load_dataset`], additionally requiring the embedding width and
/// latent shape a model expects.
pub fn load_dataset_checked(path: impl AsRef<Path>, d_model: usize, latent: LatentShape) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    if ds.config.d_model != d_model {
        return Err(format(format!(
            "dataset embedding width D = {} does not match the expected D = {d_model}",
            ds.config.d_model
        )));
    }
    if ds.config.latent != latent {
        return Err(format(format!(
            "dataset latent shape {:?} does not match the expected {:?}",
            ds.config.latent, latent
        )));
    }
    Ok(ds)
}
