//! Checkpoint files: a text manifest followed by a little-endian f64 blob.
//!
//! ```text
//! mlf-checkpoint 1
//! epoch = 12
//! rng.seed = <64 hex chars>
//! rng.stream = 0
//! rng.word_pos = 1234
//! net.* / neuron.* = network spec
//! tensor.<name> = <offset>:<dims>
//! checksum = <sha256 of blob>
//! end
//! <blob>
//! ```
//!
//! Tensors are parameters (`<param>`), momentum buffers (`momentum.<param>`)
//! and tdBN running statistics. Offsets count f64 values into the blob.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{join_list, KeyValues};
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::training::{Sgd, TrainState};

pub const CHECKPOINT_MAGIC: &str = "mlf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn collect(net: &mut Network, state: &TrainState) -> Vec<Entry> {
    let mut out: Vec<Entry> = net
        .params()
        .into_iter()
        .map(|(info, p)| Entry {
            name: info.name,
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect();
    let momentum: Vec<Entry> = out
        .iter()
        .zip(&state.sgd.velocity)
        .map(|(e, v)| Entry {
            name: format!("momentum.{}", e.name),
            shape: e.shape.clone(),
            data: v.clone(),
        })
        .collect();
    out.extend(momentum);
    for (name, buf) in net.buffers_mut() {
        out.push(Entry {
            name,
            shape: vec![buf.len()],
            data: buf.clone(),
        });
    }
    out
}

pub fn encode_checkpoint(net: &mut Network, state: &TrainState) -> Vec<u8> {
    let entries = collect(net, state);
    let mut blob = Vec::new();
    let mut header = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
    header += &format!("epoch = {}\n", state.epoch);
    header += &format!("rng.seed = {}\n", hex::encode(state.rng.get_seed()));
    header += &format!("rng.stream = {}\n", state.rng.get_stream());
    header += &format!("rng.word_pos = {}\n", state.rng.get_word_pos());
    header += &net.spec().to_key_values().render();
    let mut offset = 0;
    for e in &entries {
        header += &format!("tensor.{} = {offset}:{}\n", e.name, join_list(&e.shape));
        offset += e.data.len();
        for v in &e.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    header += &format!("checksum = {}\nend\n", hex::encode(Sha256::digest(&blob)));
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(&blob);
    bytes
}

pub fn save_checkpoint(path: &Path, net: &mut Network, state: &TrainState) -> Result<()> {
    write_atomic(path, &encode_checkpoint(net, state))
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

/// Rebuilds the network and training state; every stored tensor must match
/// the rebuilt network by name and shape.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, TrainState)> {
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| format_err(0, "checkpoint header is not terminated"))?;
    let header_len = end + 5;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|e| format_err(e.valid_up_to(), "checkpoint header is not UTF-8"))?;
    let (first, rest) = header.split_once('\n').unwrap_or((header, ""));
    let version = first
        .strip_prefix(CHECKPOINT_MAGIC)
        .map(str::trim)
        .ok_or_else(|| format_err(0, "not a checkpoint file"))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(Error::Version(format!(
            "checkpoint format {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let mut kv = KeyValues::parse(rest).map_err(|e| format_err(first.len() + 1, e.to_string()))?;
    let bad = |e: Error| format_err(0, e.to_string());
    let epoch: usize = kv.require("epoch").map_err(bad)?;
    let seed_hex: String = kv.require("rng.seed").map_err(bad)?;
    let stream: u64 = kv.require("rng.stream").map_err(bad)?;
    let word_pos: u128 = kv.require("rng.word_pos").map_err(bad)?;
    let checksum: String = kv.require("checksum").map_err(bad)?;
    let spec = NetworkSpec::from_key_values(&mut kv).map_err(bad)?;
    let tensors = kv.split_section("tensor");
    kv.finish().map_err(bad)?;

    let blob = &bytes[header_len..];
    if blob.len() % 8 != 0 {
        return Err(format_err(bytes.len(), "blob length is not a multiple of 8"));
    }
    if hex::encode(Sha256::digest(blob)) != checksum {
        return Err(format_err(header_len, "blob checksum mismatch"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut table = std::collections::HashMap::new();
    for line in tensors.render().lines() {
        let (key, val) = line.split_once(" = ").expect("rendered entries");
        let (off, dims) = val
            .split_once(':')
            .ok_or_else(|| format_err(0, format!("bad tensor entry `{line}`")))?;
        let off: usize = off.parse().map_err(|_| format_err(0, format!("bad offset in `{line}`")))?;
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| d.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format_err(0, format!("bad dims in `{line}`")))?;
        let len: usize = shape.iter().product();
        if off + len > values.len() {
            return Err(format_err(header_len + 8 * off, format!("tensor `{key}` runs past the blob")));
        }
        table.insert(key.trim_start_matches("tensor.").to_string(), (shape, &values[off..off + len]));
    }

    let mut net = Network::build(&spec, 0)?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let (s, data) = table
            .remove(name)
            .ok_or_else(|| format_err(0, format!("checkpoint lacks tensor `{name}`")))?;
        if s != shape {
            return Err(format_err(0, format!("tensor `{name}` has shape {s:?}, network wants {shape:?}")));
        }
        Ok(data.to_vec())
    };
    let infos: Vec<(String, Vec<usize>)> = net
        .params()
        .into_iter()
        .map(|(i, p)| (i.name, p.value.shape().to_vec()))
        .collect();
    let mut velocity = Vec::with_capacity(infos.len());
    for ((name, shape), p) in infos.iter().zip(net.params_mut()) {
        p.value = crate::Tensor::new(shape.clone(), take(name, shape)?)?;
        p.zero_grad();
        velocity.push(take(&format!("momentum.{name}"), shape)?);
    }
    for (name, buf) in net.buffers_mut() {
        *buf = take(&name, &[buf.len()])?;
    }
    if let Some(extra) = table.keys().next() {
        return Err(format_err(0, format!("unexpected tensor `{extra}`")));
    }
    let seed: [u8; 32] = hex::decode(&seed_hex)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| format_err(0, "bad rng seed"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    net.touch();
    Ok((
        net,
        TrainState {
            epoch,
            rng,
            sgd: Sgd { velocity },
        },
    ))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, TrainState)> {
    decode_checkpoint(&std::fs::read(path)?)
}
