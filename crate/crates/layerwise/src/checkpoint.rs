//! Self-describing binary checkpoints.
//!
//! Layout: magic `GLWC`, format version (u32 LE), header length (u64 LE),
//! a JSON header (configuration, network spec, per-layer results,
//! normalization constants, the downsampling channel-order tag and the
//! tensor manifest), the raw tensor data (f32 little-endian, manifest
//! order), and a trailing SHA-256 of everything before it. Round-trips are
//! bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::NetworkSpec;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{AuxParams, BatchNormParams, BlockParams, ConvParams, LinearParams};
use crate::trainer::{GreedyNet, LayerTrainResult};

const MAGIC: &[u8; 4] = b"GLWC";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    channel_order: String,
    trained_layers: usize,
    config: TrainConfig,
    spec: NetworkSpec,
    results: Vec<LayerTrainResult>,
    norm: crate::data::ChannelStats,
    tensors: Vec<TensorEntry>,
}

fn push4(out: &mut Vec<(String, Vec<usize>, Vec<f32>)>, name: String, t: &Array4<f32>) {
    out.push((name, t.shape().to_vec(), t.iter().copied().collect()));
}
fn push2(out: &mut Vec<(String, Vec<usize>, Vec<f32>)>, name: String, t: &Array2<f32>) {
    out.push((name, t.shape().to_vec(), t.iter().copied().collect()));
}
fn push1(out: &mut Vec<(String, Vec<usize>, Vec<f32>)>, name: String, t: &Array1<f32>) {
    out.push((name, t.shape().to_vec(), t.iter().copied().collect()));
}

fn enumerate_tensors(net: &GreedyNet) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for (j, b) in net.blocks.iter().enumerate() {
        push4(&mut out, format!("block{j}.conv.kernel"), &b.conv.kernel);
        push1(&mut out, format!("block{j}.conv.bias"), &b.conv.bias);
        if let Some(bn) = &b.bn {
            push1(&mut out, format!("block{j}.bn.scale"), &bn.scale);
            push1(&mut out, format!("block{j}.bn.shift"), &bn.shift);
            push1(&mut out, format!("block{j}.bn.running_mean"), &bn.running_mean);
            push1(&mut out, format!("block{j}.bn.running_var"), &bn.running_var);
        }
    }
    for (j, a) in net.aux.iter().enumerate() {
        for (i, conv) in a.convs.iter().enumerate() {
            push4(&mut out, format!("aux{j}.conv{i}.kernel"), &conv.kernel);
            push1(&mut out, format!("aux{j}.conv{i}.bias"), &conv.bias);
            if let Some(bn) = &a.bns[i] {
                push1(&mut out, format!("aux{j}.bn{i}.scale"), &bn.scale);
                push1(&mut out, format!("aux{j}.bn{i}.shift"), &bn.shift);
                push1(&mut out, format!("aux{j}.bn{i}.running_mean"), &bn.running_mean);
                push1(&mut out, format!("aux{j}.bn{i}.running_var"), &bn.running_var);
            }
        }
        push2(&mut out, format!("aux{j}.head.weight"), &a.head.weight);
        push1(&mut out, format!("aux{j}.head.bias"), &a.head.bias);
    }
    out
}

pub fn save(net: &GreedyNet, path: &Path) -> Result<()> {
    let tensors = enumerate_tensors(net);
    let header = Header {
        channel_order: kernels::invertible_downsample_channel_order().to_string(),
        trained_layers: net.trained_layers(),
        config: net.config.clone(),
        spec: net.spec.clone(),
        results: net.results.clone(),
        norm: net.norm.clone(),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;

    let mut bytes = Vec::with_capacity(header_json.len() + 64);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, _, data) in &tensors {
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<GreedyNet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 4 + 8 + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Checkpoint("checksum failure".into()));
    }
    if &body[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file v{version}, supported v{VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if body.len() < 16 + header_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;
    if header.channel_order != kernels::invertible_downsample_channel_order() {
        return Err(Error::Checkpoint(format!(
            "unsupported downsampling channel order '{}'",
            header.channel_order
        )));
    }

    let mut cursor = 16 + header_len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let end = cursor + count * 4;
        if end > body.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' extends past end of file",
                entry.name
            )));
        }
        let data: Vec<f32> = body[cursor..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(data);
        cursor = end;
    }
    if cursor != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }

    // Reassemble parameters in the canonical enumeration order.
    let mut iter = header.tensors.iter().zip(tensors);
    let mut take = |want_name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
        let (entry, data) = iter.next().ok_or_else(|| {
            Error::Checkpoint(format!("missing tensor '{want_name}'"))
        })?;
        if entry.name != want_name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: expected '{want_name}', found '{}'",
                entry.name
            )));
        }
        Ok((entry.shape.clone(), data))
    };

    let trained = header.trained_layers;
    let spec = header.spec.clone();
    let mut blocks = Vec::with_capacity(trained);
    for j in 0..trained {
        let (kshape, kdata) = take(&format!("block{j}.conv.kernel"))?;
        let kernel = Array4::from_shape_vec(
            (kshape[0], kshape[1], kshape[2], kshape[3]),
            kdata,
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (_, bdata) = take(&format!("block{j}.conv.bias"))?;
        let bias = Array1::from_vec(bdata);
        let bn = if spec.blocks[j].batchnorm {
            let (_, s) = take(&format!("block{j}.bn.scale"))?;
            let (_, sh) = take(&format!("block{j}.bn.shift"))?;
            let (_, rm) = take(&format!("block{j}.bn.running_mean"))?;
            let (_, rv) = take(&format!("block{j}.bn.running_var"))?;
            let mut bn = BatchNormParams::new(s.len());
            bn.scale = Array1::from_vec(s);
            bn.shift = Array1::from_vec(sh);
            bn.running_mean = Array1::from_vec(rm);
            bn.running_var = Array1::from_vec(rv);
            Some(bn)
        } else {
            None
        };
        blocks.push(BlockParams {
            conv: ConvParams { kernel, bias },
            bn,
        });
    }
    let mut aux = Vec::with_capacity(trained);
    for j in 0..trained {
        let aspec = &spec.aux[j];
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for i in 0..aspec.conv_count() {
            let (kshape, kdata) = take(&format!("aux{j}.conv{i}.kernel"))?;
            let kernel = Array4::from_shape_vec(
                (kshape[0], kshape[1], kshape[2], kshape[3]),
                kdata,
            )
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let (_, bdata) = take(&format!("aux{j}.conv{i}.bias"))?;
            convs.push(ConvParams {
                kernel,
                bias: Array1::from_vec(bdata),
            });
            if aspec.batchnorm {
                let (_, s) = take(&format!("aux{j}.bn{i}.scale"))?;
                let (_, sh) = take(&format!("aux{j}.bn{i}.shift"))?;
                let (_, rm) = take(&format!("aux{j}.bn{i}.running_mean"))?;
                let (_, rv) = take(&format!("aux{j}.bn{i}.running_var"))?;
                let mut bn = BatchNormParams::new(s.len());
                bn.scale = Array1::from_vec(s);
                bn.shift = Array1::from_vec(sh);
                bn.running_mean = Array1::from_vec(rm);
                bn.running_var = Array1::from_vec(rv);
                bns.push(Some(bn));
            } else {
                bns.push(None);
            }
        }
        let (wshape, wdata) = take(&format!("aux{j}.head.weight"))?;
        let weight = Array2::from_shape_vec((wshape[0], wshape[1]), wdata)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (_, bdata) = take(&format!("aux{j}.head.bias"))?;
        aux.push(AuxParams {
            convs,
            bns,
            head: LinearParams {
                weight,
                bias: Array1::from_vec(bdata),
            },
        });
    }

    Ok(GreedyNet {
        spec: header.spec,
        blocks,
        aux,
        results: header.results,
        config: header.config,
        norm: header.norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricsWriter;
    use crate::trainer::train_greedy;

    fn trained_toy_net(k: usize) -> GreedyNet {
        let train = crate::trainer::tests::toy_dataset(96, 4, 41);
        let test = crate::trainer::tests::toy_dataset(32, 4, 42);
        let cfg = crate::trainer::tests::toy_config(2, k, 2);
        let mut metrics = MetricsWriter::sink();
        train_greedy(&cfg, &train, &test, &mut metrics, None).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let net = trained_toy_net(1);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.glwc");
        let p2 = dir.path().join("b.glwc");
        save(&net, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(net.blocks[0], loaded.blocks[0]);
        assert_eq!(net.aux[1], loaded.aux[1]);
        assert_eq!(net.results, loaded.results);
    }

    #[test]
    fn roundtrip_with_batchnorm_heads() {
        let net = trained_toy_net(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bn.glwc");
        save(&net, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(net.aux[0], loaded.aux[0]);
    }

    #[test]
    fn corrupted_byte_fails_the_checksum() {
        let net = trained_toy_net(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.glwc");
        save(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("checksum")), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let net = trained_toy_net(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.glwc");
        save(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // bump version field
        // re-stamp the checksum so only the version differs
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        std::fs::write(&path, bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("version")), "{err}");
    }
}
