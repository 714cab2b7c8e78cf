//! Binary checkpoint container and checkpoint averaging.
//!
//! Layout (little-endian): magic `LRPT`, u32 version=1, u64 metadata byte
//! length, UTF-8 JSON metadata (config snapshot + step), then one record per
//! tensor sorted by name: u32 name length, name bytes, u32 rank, u64 dims[],
//! f32 data[].

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{ModelConfig, Parameters};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"LRPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    step: u64,
}

/// Versioned container of named parameter tensors plus training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_params(params: &Parameters, step: u64) -> Self {
        Checkpoint {
            version: VERSION,
            step,
            config: params.config.clone(),
            tensors: params
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), (**v).clone()))
                .collect(),
        }
    }

    pub fn to_params(&self) -> Parameters {
        Parameters {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.clone())))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let io_err = |source: std::io::Error| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&Metadata {
            config: self.config.clone(),
            step: self.step,
        })
        .map_err(|e| TrainError::Format(e.to_string()))?;
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        for (name, tensor) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(tensor.dims().len() as u32).to_le_bytes());
            for &d in tensor.dims() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(io_err)?;
        f.write_all(&buf).map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let io_err = |source: std::io::Error| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::open(path).map_err(io_err)?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(io_err)?;
        let mut cur = Cursor { buf: &buf, pos: 0 };

        if cur.bytes(4)? != MAGIC {
            return Err(TrainError::Format("bad magic, expected LRPT".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(TrainError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let meta_len = cur.u64()? as usize;
        let meta: Metadata = serde_json::from_slice(cur.bytes(meta_len)?)
            .map_err(|e| TrainError::Format(format!("metadata: {e}")))?;

        let mut tensors = BTreeMap::new();
        while cur.pos < buf.len() {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.bytes(name_len)?.to_vec())
                .map_err(|e| TrainError::Format(format!("tensor name: {e}")))?;
            let rank = cur.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.u64()? as usize);
            }
            let numel: usize = dims.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f32::from_le_bytes(cur.bytes(4)?.try_into().unwrap()));
            }
            let tensor = Tensor::new(dims, data)
                .map_err(|e| TrainError::Format(format!("tensor {name}: {e}")))?;
            tensors.insert(name, tensor);
        }
        Ok(Checkpoint {
            version,
            step: meta.step,
            config: meta.config,
            tensors,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

/// Names the first differing config field between two checkpoints.
fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Option<String> {
    let (va, vb) = (
        serde_json::to_value(a).expect("serializable"),
        serde_json::to_value(b).expect("serializable"),
    );
    let (ma, mb) = (va.as_object()?, vb.as_object()?);
    for (k, v) in ma {
        if mb.get(k) != Some(v) {
            return Some(k.clone());
        }
    }
    None
}

/// Arithmetic mean per named tensor over the last `k` checkpoints (by step).
/// Selection sorts by step, so the result is invariant to input order.
pub fn average_checkpoints(checkpoints: &[Checkpoint], k: usize) -> Result<Checkpoint, TrainError> {
    if checkpoints.len() < k || k == 0 {
        return Err(TrainError::NotEnoughCheckpoints {
            k,
            got: checkpoints.len(),
        });
    }
    let mut by_step: Vec<&Checkpoint> = checkpoints.iter().collect();
    by_step.sort_by_key(|c| c.step);
    let chosen = &by_step[by_step.len() - k..];
    let base = chosen[chosen.len() - 1];
    for c in chosen.iter() {
        if let Some(field) = config_diff(&base.config, &c.config) {
            return Err(TrainError::ConfigMismatch { field });
        }
    }
    let mut tensors = BTreeMap::new();
    for (name, t) in &base.tensors {
        let mut acc = vec![0.0f64; t.numel()];
        for c in chosen.iter() {
            let ct = c.tensors.get(name).ok_or_else(|| TrainError::Format(
                format!("checkpoint at step {} missing tensor {name}", c.step),
            ))?;
            for (a, &v) in acc.iter_mut().zip(ct.data()) {
                *a += f64::from(v);
            }
        }
        let data: Vec<f32> = acc.iter().map(|v| (v / k as f64) as f32).collect();
        tensors.insert(
            name.clone(),
            Tensor::new(t.dims().to_vec(), data)
                .map_err(|e| TrainError::Format(e.to_string()))?,
        );
    }
    Ok(Checkpoint {
        version: VERSION,
        step: base.step,
        config: base.config.clone(),
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_checkpoint(step: u64, value: f32) -> Checkpoint {
        let config = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 2,
            d_ff: 4,
            src_vocab: 8,
            tgt_vocab: 8,
            max_len: 8,
            dropout_rate: 0.0,
        };
        Checkpoint {
            version: VERSION,
            step,
            config,
            tensors: BTreeMap::from([(
                "w".to_string(),
                Tensor::new(vec![2], vec![value, -value]).unwrap(),
            )]),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("relprop-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.lrpt");
        let ck = toy_checkpoint(42, 0.123456789);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, back);
        // Saving again produces identical bytes.
        let bytes1 = std::fs::read(&path).unwrap();
        back.save(&path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn magic_is_validated() {
        let dir = std::env::temp_dir().join(format!("relprop-ckpt-magic-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.lrpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(TrainError::Format(_))
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn average_of_one_is_identity() {
        let c = toy_checkpoint(10, 3.0);
        let avg = average_checkpoints(&[c.clone()], 1).unwrap();
        assert_eq!(avg.tensors, c.tensors);
    }

    #[test]
    fn opposite_parameters_average_to_zero() {
        let a = toy_checkpoint(1, 2.5);
        let mut b = toy_checkpoint(2, 0.0);
        b.tensors.insert(
            "w".to_string(),
            Tensor::new(vec![2], vec![-2.5, 2.5]).unwrap(),
        );
        let avg = average_checkpoints(&[a, b], 2).unwrap();
        assert_eq!(avg.tensors["w"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn three_scalars_average_to_middle() {
        let cs: Vec<Checkpoint> = [1.0f32, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut c = toy_checkpoint(i as u64 + 1, 0.0);
                c.tensors
                    .insert("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap());
                c
            })
            .collect();
        let avg = average_checkpoints(&cs, 3).unwrap();
        assert_eq!(avg.tensors["w"].data(), &[2.0]);
    }

    #[test]
    fn averaging_is_permutation_invariant() {
        let cs: Vec<Checkpoint> = (1..=4u64).map(|s| toy_checkpoint(s, s as f32)).collect();
        let a = average_checkpoints(&cs, 3).unwrap();
        let mut shuffled = cs.clone();
        shuffled.reverse();
        let b = average_checkpoints(&shuffled, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_mismatch_names_field() {
        let a = toy_checkpoint(1, 1.0);
        let mut b = toy_checkpoint(2, 1.0);
        b.config.d_model = 4;
        let err = average_checkpoints(&[a, b], 2).unwrap_err();
        match err {
            TrainError::ConfigMismatch { field } => assert_eq!(field, "d_model"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
