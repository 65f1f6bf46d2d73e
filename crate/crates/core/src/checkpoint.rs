//! Checkpoint container.
//!
//! ```text
//! P3D2D-CKPT-v1
//! config {"patch_size":33,...}
//! tensor conversion.FLAIR.w1 shape=3,7 offset=0
//! ...
//! adadelta lr=1 rho=0.95 eps=0.000001 steps=120
//! tensor adadelta.sq_grad/conversion.FLAIR.w1 shape=3,7 offset=...
//! end
//! <raw little-endian f32 data; offsets are relative to the byte after `end\n`>
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::classifier::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::optimizer::{AdadeltaConfig, AdadeltaState};
use crate::tensor::Tensor;

pub const MAGIC: &str = "P3D2D-CKPT-v1";
const END: &str = "end";
const SQ_GRAD: &str = "adadelta.sq_grad/";
const SQ_UPDATE: &str = "adadelta.sq_update/";

struct Entry {
    shape: Vec<usize>,
    offset: usize,
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

pub fn encode(params: &ModelParams<f32>, optimizer: Option<&AdadeltaState<f32>>) -> Vec<u8> {
    let mut manifest = format!("{MAGIC}\n");
    manifest += &format!(
        "config {}\n",
        serde_json::to_string(&params.config).expect("config serialises")
    );
    let mut data: Vec<u8> = Vec::new();
    let mut push = |manifest: &mut String, name: &str, shape: &[usize], values: &[f32]| {
        manifest.push_str(&format!("tensor {name} shape={} offset={}\n", shape_str(shape), data.len()));
        data.extend(values.iter().flat_map(|v| v.to_le_bytes()));
    };
    let named = params.named_tensors();
    for (name, t) in &named {
        push(&mut manifest, name, t.shape(), t.data());
    }
    if let Some(opt) = optimizer {
        let c = opt.config;
        manifest += &format!(
            "adadelta lr={:?} rho={:?} eps={:?} steps={}\n",
            c.learning_rate, c.rho, c.epsilon, opt.steps
        );
        for ((name, t), acc) in named.iter().zip(&opt.sq_grad) {
            push(&mut manifest, &format!("{SQ_GRAD}{name}"), t.shape(), acc);
        }
        for ((name, t), acc) in named.iter().zip(&opt.sq_update) {
            push(&mut manifest, &format!("{SQ_UPDATE}{name}"), t.shape(), acc);
        }
    }
    manifest += END;
    manifest.push('\n');
    let mut out = manifest.into_bytes();
    out.extend(data);
    out
}

fn kv<'a>(fields: &[&'a str], key: &str, line: &str) -> Result<&'a str> {
    fields
        .iter()
        .find_map(|f| f.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::format(key, format!("missing in manifest line `{line}`")))
}

fn parse_num<T: std::str::FromStr>(field: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format(field, format!("cannot parse `{s}`")))
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams<f32>, Option<AdadeltaState<f32>>)> {
    let head = format!("{MAGIC}\n");
    if !bytes.starts_with(head.as_bytes()) {
        return Err(Error::format("magic", format!("file does not start with {MAGIC}")));
    }
    let mut pos = head.len();
    let mut config: Option<ModelConfig> = None;
    let mut adadelta: Option<(AdadeltaConfig, u64)> = None;
    let mut entries: HashMap<String, Entry> = HashMap::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("manifest", "truncated before `end`"))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::format("manifest", "manifest is not UTF-8"))?;
        pos += nl + 1;
        if line == END {
            break;
        }
        let (kind, body) = line.split_once(' ').unwrap_or((line, ""));
        match kind {
            "config" => {
                config = Some(
                    serde_json::from_str(body).map_err(|e| Error::format("config", e.to_string()))?,
                );
            }
            "tensor" => {
                let fields: Vec<&str> = body.split_whitespace().collect();
                let name = fields
                    .first()
                    .ok_or_else(|| Error::format("tensor", "unnamed tensor entry"))?
                    .to_string();
                let shape = kv(&fields, "shape", line)?
                    .split(',')
                    .map(|d| parse_num::<usize>(&name, d))
                    .collect::<Result<Vec<_>>>()?;
                let offset = parse_num(&name, kv(&fields, "offset", line)?)?;
                entries.insert(name, Entry { shape, offset });
            }
            "adadelta" => {
                let fields: Vec<&str> = body.split_whitespace().collect();
                let cfg = AdadeltaConfig {
                    learning_rate: parse_num("adadelta.lr", kv(&fields, "lr", line)?)?,
                    rho: parse_num("adadelta.rho", kv(&fields, "rho", line)?)?,
                    epsilon: parse_num("adadelta.eps", kv(&fields, "eps", line)?)?,
                };
                let steps = parse_num("adadelta.steps", kv(&fields, "steps", line)?)?;
                adadelta = Some((cfg, steps));
            }
            other => return Err(Error::format("manifest", format!("unknown entry `{other}`"))),
        }
    }
    let data = &bytes[pos..];
    let config = config.ok_or_else(|| Error::format("config", "missing"))?;
    let mut params = ModelParams::<f32>::zeros(&config).map_err(|e| Error::format("config", e.to_string()))?;

    let read = |name: &str, expect: &[usize]| -> Result<Vec<f32>> {
        let e = entries
            .get(name)
            .ok_or_else(|| Error::format(name, "tensor missing from manifest"))?;
        if e.shape != expect {
            return Err(Error::format(name, format!("shape {:?}, expected {expect:?}", e.shape)));
        }
        let n: usize = expect.iter().product();
        let end = e.offset.checked_add(n * 4).filter(|&end| end <= data.len());
        let end = end.ok_or_else(|| Error::format(name, "data section truncated"))?;
        Ok(data[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };

    let names = params.names();
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    for ((name, shape), t) in names.iter().zip(&shapes).zip(params.tensors_mut()) {
        let mut fresh = Tensor::new(shape, read(name, shape)?)?;
        fresh.requires_grad = t.requires_grad;
        *t = fresh;
    }
    let optimizer = match adadelta {
        None => None,
        Some((cfg, steps)) => {
            let mut st = AdadeltaState::<f32>::new(cfg, &[]);
            st.steps = steps;
            for (name, shape) in names.iter().zip(&shapes) {
                st.sq_grad.push(read(&format!("{SQ_GRAD}{name}"), shape)?);
                st.sq_update.push(read(&format!("{SQ_UPDATE}{name}"), shape)?);
            }
            Some(st)
        }
    };
    Ok((params, optimizer))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>, optimizer: Option<&AdadeltaState<f32>>) -> Result<()> {
    fs::write(path, encode(params, optimizer)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, Option<AdadeltaState<f32>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_params(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    save_checkpoint(path, params, None)
}

pub fn load_params(path: &Path) -> Result<ModelParams<f32>> {
    load_checkpoint(path).map(|(p, _)| p)
}
