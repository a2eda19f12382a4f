//! Checkpoint file layout:
//!
//! ```text
//! u64 LE   header length H
//! H bytes  JSON header (format, shapes, u_max, seed, step, tensor table)
//! f64 LE   parameter data, tensors in table order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IcbfNet, NetShape, PolicyNet, Tensor};
use crate::error::{Error, Result};

const FORMAT: &str = "icbf-swarm-weights/1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub icbf: IcbfNet,
    pub policy: PolicyNet,
    /// Training steps completed.
    pub step: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    icbf_shape: NetShape,
    policy_shape: NetShape,
    u_max: Vec<f64>,
    seed: u64,
    step: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

fn names(prefix: &str, layers: usize) -> Vec<String> {
    let mut v = vec![format!("{prefix}.encoder.w")];
    for l in 0..layers {
        v.push(format!("{prefix}.trunk.{l}.w"));
        v.push(format!("{prefix}.trunk.{l}.b"));
    }
    v
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        let groups: [(Vec<String>, Vec<&Tensor>); 2] = [
            (names("icbf", self.icbf.trunk.layers.len()), self.icbf.params()),
            (names("policy", self.policy.trunk.layers.len()), self.policy.params()),
        ];
        for (labels, tensors) in &groups {
            for (name, t) in labels.iter().zip(tensors) {
                entries.push(TensorEntry {
                    name: name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                });
                data.extend_from_slice(&t.data);
            }
        }
        let header = Header {
            format: FORMAT.into(),
            icbf_shape: self.icbf.shape,
            policy_shape: self.policy.shape,
            u_max: self.policy.u_max.clone(),
            seed: self.seed,
            step: self.step,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 8 * data.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("file too short for header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", header.format)));
        }
        let payload = &bytes[8 + hlen..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        // Template nets fix the expected tensor shapes; data overwrites them.
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut icbf = IcbfNet::new(header.icbf_shape, &mut rng);
        let mut policy = PolicyNet::new(header.policy_shape, header.u_max.clone(), &mut rng);
        let mut targets: Vec<&mut Tensor> = icbf.params_mut();
        targets.extend(policy.params_mut());
        if targets.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, header lists {}",
                targets.len(),
                header.tensors.len()
            )));
        }
        let mut offset = 0;
        for (t, entry) in targets.into_iter().zip(&header.tensors) {
            if (t.rows, t.cols) != (entry.rows, entry.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {} is {}x{}, shape implies {}x{}",
                    entry.name, entry.rows, entry.cols, t.rows, t.cols
                )));
            }
            let len = t.data.len();
            let chunk = values
                .get(offset..offset + len)
                .ok_or_else(|| bad("payload shorter than the tensor table"))?;
            t.data.copy_from_slice(chunk);
            offset += len;
        }
        if offset != values.len() {
            return Err(bad("trailing data after the last tensor"));
        }
        Ok(Checkpoint {
            icbf,
            policy,
            step: header.step,
            seed: header.seed,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
