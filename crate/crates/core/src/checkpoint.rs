//! Versioned checkpoint files.
//!
//! Layout, line oriented:
//!
//! ```text
//! CTREC-CHECKPOINT 1 f64
//! {"config": ..., "config_hash": ..., "params": ..., "optimizer": ...}
//! MEMORY
//! <node_id,last_update,s_0,...,s_{d-1} rows>
//! ```
//!
//! The JSON line holds every parameter tensor, the Adam moments and the
//! configuration; the memory block is the committed short-term state.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::memory::MemoryState;
use crate::model::ModelParams;
use crate::params::Adam;
use crate::scalar::Scalar;

pub const MAGIC: &str = "CTREC-CHECKPOINT";
pub const VERSION: u32 = 1;
const MEMORY_MARKER: &str = "MEMORY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub config_hash: String,
    pub params: ModelParams<T>,
    pub optimizer: Option<Adam<T>>,
    #[serde(skip)]
    pub memory: Option<MemoryState<T>>,
}

fn precision_tag<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

impl<T: Scalar + Serialize> Checkpoint<T> {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("<checkpoint>", e);
        writeln!(out, "{MAGIC} {VERSION} {}", precision_tag::<T>()).map_err(io)?;
        serde_json::to_writer(&mut out, self)?;
        writeln!(out).map_err(io)?;
        writeln!(out, "{MEMORY_MARKER}").map_err(io)?;
        match &self.memory {
            Some(mem) => {
                if mem.has_pending() {
                    return Err(Error::Checkpoint("memory has uncommitted messages".into()));
                }
                mem.write_snapshot(&mut out)?
            }
            None => self.params.new_memory().write_snapshot(&mut out)?,
        }
        Ok(())
    }
}

/// Read only the header, returning `(version, precision tag)`.
pub fn read_header<R: BufRead>(input: &mut R) -> Result<(u32, String)> {
    let mut line = String::new();
    input
        .read_line(&mut line)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "missing '{MAGIC} <version> <precision>' header"
        )));
    }
    let version: u32 = parts[1]
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad version '{}'", parts[1])))?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    Ok((version, parts[2].to_string()))
}

impl<T: Scalar + for<'de> Deserialize<'de>> Checkpoint<T> {
    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut input = BufReader::new(input);
        let (_, tag) = read_header(&mut input)?;
        if tag != precision_tag::<T>() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {tag} parameters, requested {}",
                precision_tag::<T>()
            )));
        }
        let mut body = String::new();
        input
            .read_line(&mut body)
            .map_err(|e| Error::Checkpoint(format!("unreadable body: {e}")))?;
        let mut ckpt: Checkpoint<T> =
            serde_json::from_str(&body).map_err(|e| Error::Checkpoint(format!("corrupt body: {e}")))?;
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let mut marker = String::new();
        input
            .read_line(&mut marker)
            .map_err(|e| Error::Checkpoint(format!("unreadable memory marker: {e}")))?;
        if marker.trim_end() != MEMORY_MARKER {
            return Err(Error::Checkpoint("missing memory block".into()));
        }
        let mem = MemoryState::read_snapshot(input, ckpt.params.dims.n_nodes(), ckpt.params.d)
            .map_err(|e| Error::Checkpoint(format!("corrupt memory block: {e}")))?;
        ckpt.memory = Some(mem);
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctdg::{GraphDims, Interaction};

    fn sample() -> Checkpoint<f64> {
        let config = TrainConfig {
            d: 4,
            d_t: 4,
            heads: 1,
            epsilon: 2,
            ..TrainConfig::default()
        };
        let dims = GraphDims { n_users: 2, n_items: 3, d_e: 0 };
        let params = ModelParams::<f64>::init(dims, &config).unwrap();
        let mut memory = params.new_memory();
        params
            .advance(&mut memory, &[Interaction::new(0, 1, 0.5, 0), Interaction::new(1, 2, 1.25, 1)])
            .unwrap();
        Checkpoint {
            config_hash: config.hash(),
            config,
            optimizer: Some(Adam::new(&params.store, 1e-3)),
            params,
            memory: Some(memory),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let ckpt = sample();
        let mut buf = Vec::new();
        ckpt.write(&mut buf).unwrap();
        let back = Checkpoint::<f64>::read(&buf[..]).unwrap();
        assert_eq!(back.params, ckpt.params);
        assert_eq!(back.optimizer, ckpt.optimizer);
        assert_eq!(back.config, ckpt.config);
        let (a, b) = (back.memory.unwrap(), ckpt.memory.unwrap());
        assert_eq!(a.states(), b.states());
        assert!((0..a.n_nodes()).all(|n| a.last_update(n).to_bits() == b.last_update(n).to_bits()));
    }

    #[test]
    fn corrupt_files_fail_on_header() {
        for bad in ["", "garbage\n", "CTREC-CHECKPOINT 9 f64\n{}\n", "CTREC-CHECKPOINT x f64\n"] {
            assert!(matches!(Checkpoint::<f64>::read(bad.as_bytes()), Err(Error::Checkpoint(_))));
        }
        let mut buf = Vec::new();
        sample().write(&mut buf).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(matches!(Checkpoint::<f64>::read(&buf[..]), Err(Error::Checkpoint(_))));
        let mut buf = Vec::new();
        sample().write(&mut buf).unwrap();
        assert!(matches!(Checkpoint::<f32>::read(&buf[..]), Err(Error::Checkpoint(_))));
    }
}
