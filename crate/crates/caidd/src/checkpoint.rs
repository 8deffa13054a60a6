//! Binary checkpoint files.
//!
//! Layout: the magic `CAIDDCKP`, a little-endian `u64` manifest length, the
//! UTF-8 manifest, the raw little-endian `f64` arrays it lists, and a SHA-256
//! digest of everything before it. The manifest carries the full training
//! configuration together with its digest, which is checked on load.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use caidd_core::optim::{Adam, AdamConfig};
use caidd_core::params::ParamSet;
use caidd_core::trainer::{Checkpoint, TrainConfig, FORMAT_VERSION};
use caidd_core::Tensor;
use sha2::{Digest, Sha256};

use crate::config::{self, hex};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CAIDDCKP";
const GROUPS: [&str; 3] = ["params", "adam_m", "adam_v"];

fn groups(ckpt: &Checkpoint) -> [&ParamSet; 3] {
    [&ckpt.params, &ckpt.optimizer.m, &ckpt.optimizer.v]
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut manifest = String::new();
    let mut line = |k: &str, v: &str| writeln!(manifest, "{} = {}", k, v).expect("writing to a String");
    line("format_version", &ckpt.format_version.to_string());
    line("step", &ckpt.step.to_string());
    line("config_digest", &config::digest(&ckpt.config));
    line("rng_state", &hex(&ckpt.rng_state));
    let a = &ckpt.optimizer;
    line("adam.beta1", &a.config.beta1.to_string());
    line("adam.beta2", &a.config.beta2.to_string());
    line("adam.eps", &a.config.eps.to_string());
    line("adam.t", &a.t.to_string());
    for key in config::KEYS {
        line(&format!("config.{}", key), &config::get(&ckpt.config, key).expect("known key"));
    }
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (group, set) in GROUPS.iter().zip(groups(ckpt)) {
        for (name, t) in set.iter() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(manifest, "array {} {} {} {} {}", group, name, dims.join(","), offset, t.len()).expect("String");
            offset += t.len();
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut out = Vec::with_capacity(16 + manifest.len() + data.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&data);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

/// Decodes bytes produced by [`encode`]. `path` is only used in messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fmt = |reason: &str| Error::format(path, reason.to_string());
    if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(fmt("not a checkpoint file"));
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != stored {
        return Err(Error::Integrity(format!("{}: content digest mismatch", path.display())));
    }
    let len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let manifest = body
        .get(16..16 + len)
        .ok_or_else(|| fmt("manifest length exceeds file size"))?;
    let manifest = std::str::from_utf8(manifest).map_err(|_| fmt("manifest is not UTF-8"))?;
    let data = &body[16 + len..];

    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    let mut arrays: Vec<Vec<&str>> = Vec::new();
    for l in manifest.lines() {
        if let Some(rest) = l.strip_prefix("array ") {
            arrays.push(rest.split(' ').collect());
        } else if let Some((k, v)) = l.split_once(" = ") {
            fields.insert(k, v);
        } else {
            return Err(fmt(&format!("bad manifest line `{}`", l)));
        }
    }
    let field = |k: &str| fields.get(k).copied().ok_or_else(|| fmt(&format!("manifest lacks `{}`", k)));
    let version: u32 = field("format_version")?.parse().map_err(|_| fmt("bad format_version"))?;
    if version != FORMAT_VERSION {
        return Err(caidd_core::Error::contract(format!(
            "checkpoint format version {} but this build reads version {}",
            version, FORMAT_VERSION
        ))
        .into());
    }
    let num = |k: &str| -> Result<f64> { field(k)?.parse().map_err(|_| fmt(&format!("bad `{}`", k))) };

    let mut cfg = TrainConfig::default();
    for key in config::KEYS {
        config::set(&mut cfg, key, field(&format!("config.{}", key))?)?;
    }
    if config::digest(&cfg) != field("config_digest")? {
        return Err(Error::Integrity(format!("{}: configuration digest mismatch", path.display())));
    }

    let mut sets = [ParamSet::new(), ParamSet::new(), ParamSet::new()];
    let mut expected = 0usize;
    for a in &arrays {
        let [group, name, dims, offset, n] = a[..] else {
            return Err(fmt("bad array entry"));
        };
        let gi = GROUPS
            .iter()
            .position(|g| *g == group)
            .ok_or_else(|| fmt(&format!("unknown array group `{}`", group)))?;
        let shape: Vec<usize> = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',')
                .map(|d| d.parse().map_err(|_| fmt("bad array shape")))
                .collect::<Result<_>>()?
        };
        let offset: usize = offset.parse().map_err(|_| fmt("bad array offset"))?;
        let n: usize = n.parse().map_err(|_| fmt("bad array length"))?;
        if offset != expected {
            return Err(fmt("arrays are not contiguous"));
        }
        expected += n;
        let raw = data
            .get(offset * 8..(offset + n) * 8)
            .ok_or_else(|| fmt(&format!("array `{}` runs past the end of the file", name)))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        sets[gi].insert(name, Tensor::new(&shape, values)?)?;
    }
    if expected * 8 != data.len() {
        return Err(fmt("trailing bytes after the last array"));
    }
    let [params, m, v] = sets;
    let rng_state = unhex(field("rng_state")?).ok_or_else(|| fmt("bad rng_state"))?;
    Ok(Checkpoint {
        format_version: version,
        step: field("step")?.parse().map_err(|_| fmt("bad step"))?,
        config: cfg,
        params,
        optimizer: Adam {
            config: AdamConfig {
                beta1: num("adam.beta1")?,
                beta2: num("adam.beta2")?,
                eps: num("adam.eps")?,
            },
            m,
            v,
            t: field("adam.t")?.parse().map_err(|_| fmt("bad adam.t"))?,
        },
        rng_state,
    })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Hex SHA-256 of the encoded checkpoint.
pub fn digest(ckpt: &Checkpoint) -> String {
    hex(&Sha256::digest(encode(ckpt)))
}
