//! Binary checkpoints of a [`TrainState`].
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, the little-endian tensor payload, and a SHA-256 digest of
//! everything before it.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex_digest, TrainConfig};
use crate::error::{Error, Result};
use crate::networks::{Discriminator, Generator};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{Adam, TrainState};

pub const MAGIC: &[u8; 8] = b"LRI2ICKP";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngRecord {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    step: u64,
    config_hash: String,
    config: TrainConfig,
    rng: RngRecord,
    opt_g_steps: u64,
    opt_d_steps: u64,
    tensors: Vec<TensorRecord>,
}

/// Metadata readable without materializing the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub dtype: String,
    pub step: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    /// SHA-256 of the whole file, hex encoded.
    pub file_hash: String,
}

/// Every tensor of a network and its optimizer, in a fixed order.
fn network_tensors<'a, T: Scalar>(
    prefix: &str,
    store: &'a ParamStore<T>,
    opt: &'a Adam<T>,
) -> Vec<(String, &'a Tensor<T>)> {
    let mut out = Vec::new();
    for (i, e) in store.entries().iter().enumerate() {
        out.push((format!("{prefix}/{}", e.name), &e.value));
        if let Some(sn) = &e.spectral {
            out.push((format!("{prefix}/{}#u", e.name), &sn.u));
            out.push((format!("{prefix}/{}#v", e.name), &sn.v));
        }
        out.push((format!("{prefix}/{}#adam_m", e.name), &opt.m[i]));
        out.push((format!("{prefix}/{}#adam_v", e.name), &opt.v[i]));
    }
    out
}

fn network_tensors_mut<'a, T: Scalar>(
    prefix: &str,
    store: &'a mut ParamStore<T>,
    opt: &'a mut Adam<T>,
) -> Vec<(String, &'a mut Tensor<T>)> {
    let mut out = Vec::new();
    let moments = opt.m.iter_mut().zip(opt.v.iter_mut());
    for (e, (m, v)) in store.entries_mut().iter_mut().zip(moments) {
        out.push((format!("{prefix}/{}", e.name), &mut e.value));
        if let Some(sn) = &mut e.spectral {
            out.push((format!("{prefix}/{}#u", e.name), &mut sn.u));
            out.push((format!("{prefix}/{}#v", e.name), &mut sn.v));
        }
        out.push((format!("{prefix}/{}#adam_m", e.name), m));
        out.push((format!("{prefix}/{}#adam_v", e.name), v));
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(Error::Checkpoint("odd-length hex string".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| Error::Checkpoint(e.to_string())))
        .collect()
}

/// Serializes `state` to bytes.
pub fn to_bytes<T: Scalar>(state: &TrainState<T>) -> Result<Vec<u8>> {
    let mut tensors = network_tensors("g", &state.generator.params, &state.opt_g);
    tensors.extend(network_tensors("d", &state.discriminator.params, &state.opt_d));
    let header = Header {
        dtype: T::DTYPE.to_string(),
        step: state.step,
        config_hash: state.config.hash(),
        config: state.config.clone(),
        rng: RngRecord {
            seed: hex(&state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        opt_g_steps: state.opt_g.steps,
        opt_d_steps: state.opt_d.steps,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorRecord {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Checks framing and digest; returns the header and payload slices.
fn parse_frame(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let fixed = MAGIC.len() + 4 + 8;
    if bytes.len() < fixed + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("digest mismatch (file is corrupted or truncated)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if fixed + header_len > body.len() {
        return Err(Error::Checkpoint("header length out of range".into()));
    }
    let header: Header = serde_json::from_slice(&body[fixed..fixed + header_len])?;
    Ok((header, &body[fixed + header_len..]))
}

/// Reads metadata and validates framing without building the networks.
pub fn info_from_bytes(bytes: &[u8]) -> Result<CheckpointInfo> {
    let (header, _) = parse_frame(bytes)?;
    Ok(CheckpointInfo {
        dtype: header.dtype,
        step: header.step,
        config: header.config,
        config_hash: header.config_hash,
        file_hash: hex_digest(bytes),
    })
}

pub fn info(path: &Path) -> Result<CheckpointInfo> {
    info_from_bytes(&fs::read(path)?)
}

/// Rebuilds a [`TrainState`]. Nothing is returned unless every tensor loads.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>> {
    let (header, payload) = parse_frame(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} values, expected {}",
            header.dtype,
            T::DTYPE
        )));
    }
    if header.config.hash() != header.config_hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    let mut state = TrainState::<T>::new(header.config.clone())?;
    let mut slots = network_tensors_mut("g", &mut state.generator.params, &mut state.opt_g);
    slots.extend(network_tensors_mut("d", &mut state.discriminator.params, &mut state.opt_d));
    if slots.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, architecture has {}",
            header.tensors.len(),
            slots.len()
        )));
    }
    let mut offset = 0;
    for ((name, slot), record) in slots.into_iter().zip(&header.tensors) {
        if name != record.name || slot.shape() != record.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match {} {:?}",
                record.name,
                record.shape,
                name,
                slot.shape()
            )));
        }
        let len = slot.numel() * T::BYTES;
        let chunk = payload
            .get(offset..offset + len)
            .ok_or_else(|| Error::Checkpoint("payload truncated".into()))?;
        let data = chunk.chunks_exact(T::BYTES).map(T::read_le).collect();
        *slot = Tensor::from_vec(&record.shape, data)?;
        offset += len;
    }
    if offset != payload.len() {
        return Err(Error::Checkpoint("trailing payload bytes".into()));
    }
    let seed: [u8; 32] = unhex(&header.rng.seed)?
        .try_into()
        .map_err(|_| Error::Checkpoint("bad RNG seed".into()))?;
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::Checkpoint("bad RNG position".into()))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    state.step = header.step;
    state.opt_g.steps = header.opt_g_steps;
    state.opt_d.steps = header.opt_d_steps;
    Ok(state)
}

/// Writes atomically (temporary file, then rename).
pub fn save<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    from_bytes(&fs::read(path)?)
}

/// Generator only, for inference.
pub fn load_generator<T: Scalar>(path: &Path) -> Result<(Generator<T>, CheckpointInfo)> {
    let bytes = fs::read(path)?;
    let info = info_from_bytes(&bytes)?;
    let state = from_bytes::<T>(&bytes)?;
    Ok((state.generator, info))
}

/// Discriminator only.
pub fn load_discriminator<T: Scalar>(path: &Path) -> Result<Discriminator<T>> {
    Ok(load::<T>(path)?.discriminator)
}
