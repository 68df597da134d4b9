//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `TSFLOWCK`, a little-endian `u32` header length,
//! a JSON header, then the concatenated little-endian `f32` arrays the header
//! indexes. The header carries `format_version`, the segment (`deploy` or
//! `train`), `d`, `m`, `steps`, `n`, `clamp`, the iteration counter, the
//! architecture and training-config echo, and a SHA-256 of the data block.
//!
//! `train` checkpoints also hold the encoder and the Adam moments so a run
//! can resume; `deploy` checkpoints hold only what inference needs.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Adam, ParamSet};

pub const MAGIC: &[u8; 8] = b"TSFLOWCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Deploy,
    Train,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    step_count: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    segment: Segment,
    d: usize,
    m: usize,
    steps: usize,
    n: usize,
    clamp: f64,
    iteration: u64,
    flow_initialized: bool,
    model: ModelConfig,
    config: Option<TrainConfig>,
    optimizer: Option<OptimizerHeader>,
    arrays: Vec<ArrayEntry>,
    data_sha256: String,
}

/// Everything a checkpoint file holds.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub iteration: u64,
    pub train_config: Option<TrainConfig>,
    pub optimizer: Option<Adam<f32>>,
}

impl Checkpoint {
    pub fn segment(&self) -> Segment {
        if self.model.encoder.is_some() {
            Segment::Train
        } else {
            Segment::Deploy
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Serializes a checkpoint. The segment follows from whether the model has
/// an encoder; pass `model.deploy()` to write an inference-only file.
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut arrays = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut push = |name: String, values: &[f32]| {
        arrays.push(ArrayEntry {
            name,
            offset: (data.len() / 4) as u64,
            len: values.len() as u64,
        });
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    };
    let named = ck.model.named();
    for (name, t) in &named {
        push(name.clone(), t);
    }
    let mut optimizer = None;
    if let Some(adam) = &ck.optimizer {
        for (i, (name, _)) in named.iter().enumerate() {
            push(format!("adam.m.{name}"), &adam.first[i]);
            push(format!("adam.v.{name}"), &adam.second[i]);
        }
        optimizer = Some(OptimizerHeader {
            step_count: adam.step_count,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        });
    }
    let cfg = &ck.model.config;
    let header = Header {
        format_version: FORMAT_VERSION,
        segment: ck.segment(),
        d: cfg.style_dim,
        m: cfg.condition_dim(),
        steps: cfg.flow_steps,
        n: cfg.encoder_steps,
        clamp: cfg.logscale_clamp,
        iteration: ck.iteration,
        flow_initialized: ck.model.flow.initialized,
        model: cfg.clone(),
        config: ck.train_config.clone(),
        optimizer,
        arrays,
        data_sha256: sha256_hex(&data),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

/// Writes via a temporary file and rename so readers never see a partial
/// checkpoint.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck);
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |section: &str, offset: u64, reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        section: section.to_string(),
        offset,
        reason,
    };
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(fail("magic", 0, "not a checkpoint file".into()));
    }
    if bytes.len() < 12 {
        return Err(fail("header length", 8, "file truncated".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let data_start = 12 + hlen;
    if bytes.len() < data_start {
        return Err(fail(
            "header",
            12,
            format!("header of {hlen} bytes runs past end of file ({} bytes)", bytes.len()),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[12..data_start])
        .map_err(|e| fail("header", 12, format!("invalid header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(fail(
            "header",
            12,
            format!("unsupported format_version {}", header.format_version),
        ));
    }
    let data = &bytes[data_start..];
    if !data.len().is_multiple_of(4) {
        return Err(fail("data", data_start as u64, "data block is not a whole number of f32".into()));
    }
    let digest = sha256_hex(data);
    if digest != header.data_sha256 {
        return Err(fail(
            "data",
            data_start as u64,
            format!("checksum mismatch (expected {}, found {digest})", header.data_sha256),
        ));
    }
    header
        .model
        .validate()
        .map_err(|e| fail("header", 12, e.to_string()))?;
    let cfg = &header.model;
    if (cfg.style_dim, cfg.condition_dim(), cfg.flow_steps) != (header.d, header.m, header.steps) {
        return Err(fail("header", 12, "d/m/steps disagree with the architecture".into()));
    }

    let float_count = (data.len() / 4) as u64;
    let mut index = std::collections::HashMap::new();
    for a in &header.arrays {
        if a.offset + a.len > float_count {
            return Err(fail(
                &format!("array {}", a.name),
                data_start as u64 + 4 * a.offset,
                format!("extends past the data block ({} floats)", float_count),
            ));
        }
        index.insert(a.name.as_str(), a);
    }
    let read = |name: &str, out: &mut Vec<f32>| -> Result<()> {
        let a = index
            .get(name)
            .ok_or_else(|| fail("array index", 12, format!("missing array {name}")))?;
        if a.len as usize != out.len() {
            return Err(fail(
                &format!("array {name}"),
                data_start as u64 + 4 * a.offset,
                format!("length {} where {} is expected", a.len, out.len()),
            ));
        }
        let start = 4 * a.offset as usize;
        for (k, v) in out.iter_mut().enumerate() {
            let b = &data[start + 4 * k..start + 4 * k + 4];
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
        Ok(())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model: Model<f32> =
        Model::random(cfg, &mut rng).map_err(|e| fail("header", 12, e.to_string()))?;
    if header.segment == Segment::Deploy {
        model.encoder = None;
    }
    model.flow.initialized = header.flow_initialized;
    for (name, t) in model.named_mut() {
        read(&name, t)?;
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(o) => {
            let mut adam = Adam::new(&model, o.lr, o.beta1, o.beta2);
            adam.eps = o.eps;
            adam.step_count = o.step_count;
            let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
            for (i, name) in names.iter().enumerate() {
                read(&format!("adam.m.{name}"), &mut adam.first[i])?;
                read(&format!("adam.v.{name}"), &mut adam.second[i])?;
            }
            Some(adam)
        }
    };
    for (name, t) in model.named() {
        if !t.iter().all(|v| v.is_finite()) {
            let a = index[name.as_str()];
            return Err(fail(
                &format!("array {name}"),
                data_start as u64 + 4 * a.offset,
                "non-finite weight".into(),
            ));
        }
    }
    Ok(Checkpoint {
        model,
        iteration: header.iteration,
        train_config: header.config,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model: Model<f32> = Model::random(&ModelConfig::tiny(4, 2), &mut rng).unwrap();
        let mut adam = Adam::new(&model, 1e-3, 0.9, 0.999);
        adam.step_count = 7;
        adam.first[0][0] = 0.25;
        Checkpoint {
            model,
            iteration: 42,
            train_config: Some(TrainConfig::default()),
            optimizer: Some(adam),
        }
    }

    #[test]
    fn roundtrip_train_and_deploy() {
        let ck = sample();
        let p = Path::new("mem.ckpt");
        let back = decode_checkpoint(&encode_checkpoint(&ck), p).unwrap();
        assert_eq!(back.model, ck.model);
        assert_eq!(back.iteration, 42);
        let adam = back.optimizer.unwrap();
        assert_eq!(adam.step_count, 7);
        assert_eq!(adam.first[0][0], 0.25);

        let deploy = Checkpoint {
            model: ck.model.deploy(),
            iteration: 42,
            train_config: None,
            optimizer: None,
        };
        let back = decode_checkpoint(&encode_checkpoint(&deploy), p).unwrap();
        assert_eq!(back.segment(), Segment::Deploy);
        assert_eq!(back.model, ck.model.deploy());
    }

    #[test]
    fn corruption_names_section_and_offset() {
        let bytes = encode_checkpoint(&sample());
        let p = Path::new("bad.ckpt");
        let err = decode_checkpoint(b"PNG.....", p).unwrap_err();
        assert!(err.to_string().contains("magic"));

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        let err = decode_checkpoint(&flipped, p).unwrap_err();
        match err {
            Error::Checkpoint { section, offset, .. } => {
                assert_eq!(section, "data");
                assert!(offset > 12);
            }
            other => panic!("unexpected {other}"),
        }

        let err = decode_checkpoint(&bytes[..bytes.len() / 2], p).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }), "{err}");

        let mut header_broken = bytes.clone();
        header_broken[14] = b'!';
        let err = decode_checkpoint(&header_broken, p).unwrap_err();
        assert!(err.to_string().contains("header"));
    }
}
