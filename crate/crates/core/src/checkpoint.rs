//! Versioned checkpoint container.
//!
//! ```text
//! adavae-checkpoint
//! format_version 1
//! manifest_bytes <n>
//! payload_bytes <n>
//! <manifest: n bytes of text>
//! <payload: little-endian f64 values>
//! ```
//!
//! The manifest has `[config]`, `[meta]` and `[vocab]` sections of text,
//! then `[arrays]` with one line per array:
//! `name<TAB>kind<TAB>d0,d1,..<TAB>byte_offset<TAB>byte_len<TAB>crc32`.
//! `kind` is a parameter group, `adam.m`, `adam.v`, `prior.mean` or
//! `prior.var`. The same layout serves as a generic weight-import format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::config::{ModelConfig, ParamGroup};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::latent::ClassConditionalPrior;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &str = "adavae-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab: Vocab,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Free-form resolved run settings (`key = value`).
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
    pub prior: Option<ClassConditionalPrior>,
}

struct Array<'a> {
    name: String,
    kind: String,
    shape: Vec<usize>,
    data: &'a [f64],
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::CheckpointFormat(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays: Vec<Array> = Vec::new();
        for (_, p) in self.params.iter() {
            arrays.push(Array {
                name: p.name.clone(),
                kind: p.group.to_string(),
                shape: p.value().shape().to_vec(),
                data: p.value().data(),
            });
        }
        if let Some(opt) = &self.optimizer {
            for (kind, bufs) in [("adam.m", &opt.m), ("adam.v", &opt.v)] {
                for ((_, p), buf) in self.params.iter().zip(bufs) {
                    arrays.push(Array {
                        name: p.name.clone(),
                        kind: kind.into(),
                        shape: p.value().shape().to_vec(),
                        data: buf,
                    });
                }
            }
        }
        if let Some(prior) = &self.prior {
            for (label, (mean, var)) in &prior.classes {
                for (kind, v) in [("prior.mean", mean), ("prior.var", var)] {
                    arrays.push(Array {
                        name: label.to_string(),
                        kind: kind.into(),
                        shape: vec![v.len()],
                        data: v,
                    });
                }
            }
        }

        let mut m = String::from("[config]\n");
        for (k, v) in self.model.to_pairs() {
            let _ = writeln!(m, "{k} = {v}");
        }
        m.push_str("[meta]\n");
        let _ = writeln!(m, "step = {}", self.step);
        if let Some(opt) = &self.optimizer {
            let c = &opt.config;
            let _ = writeln!(m, "adam.step = {}", opt.step);
            let _ = writeln!(m, "adam.beta1 = {}", c.beta1);
            let _ = writeln!(m, "adam.beta2 = {}", c.beta2);
            let _ = writeln!(m, "adam.eps = {}", c.eps);
            let clip = c.clip_norm.map_or("none".to_string(), |x| x.to_string());
            let _ = writeln!(m, "adam.clip_norm = {clip}");
        }
        for (k, v) in &self.meta {
            let _ = writeln!(m, "run.{k} = {v}");
        }
        m.push_str("[vocab]\n");
        for w in self.vocab.words() {
            m.push_str(w);
            m.push('\n');
        }
        m.push_str("[arrays]\n");
        let mut payload = Vec::new();
        for a in &arrays {
            let start = payload.len();
            for x in a.data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            let crc = crc32fast::hash(&payload[start..]);
            let shape: Vec<String> = a.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(
                m,
                "{}\t{}\t{}\t{}\t{}\t{:08x}",
                a.name,
                a.kind,
                shape.join(","),
                start,
                payload.len() - start,
                crc
            );
        }
        let mut out = format!(
            "{MAGIC}\nformat_version {FORMAT_VERSION}\nmanifest_bytes {}\npayload_bytes {}\n",
            m.len(),
            payload.len()
        )
        .into_bytes();
        out.extend_from_slice(m.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut header_line = |what: &str| -> Result<String> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| fmt_err(format!("missing {what}")))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| fmt_err("header is not text"))?;
            pos += nl + 1;
            Ok(line.to_string())
        };
        if header_line("magic")? != MAGIC {
            return Err(fmt_err("not a checkpoint file"));
        }
        let field = |line: String, key: &str| -> Result<u64> {
            line.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| fmt_err(format!("bad `{key}` header")))
        };
        let version = field(header_line("version")?, "format_version")? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mlen = field(header_line("manifest size")?, "manifest_bytes")? as usize;
        let plen = field(header_line("payload size")?, "payload_bytes")? as usize;
        let needed = pos + mlen + plen;
        if bytes.len() < needed {
            return Err(Error::CheckpointTruncated {
                needed,
                found: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(Error::CheckpointIntegrity(format!(
                "{} trailing bytes after payload",
                bytes.len() - needed
            )));
        }
        let manifest = std::str::from_utf8(&bytes[pos..pos + mlen]).map_err(|_| fmt_err("manifest is not text"))?;
        let payload = &bytes[pos + mlen..];

        let mut section = "";
        let mut config = Vec::new();
        let mut meta = BTreeMap::new();
        let mut words = Vec::new();
        let mut lines = Vec::new();
        for line in manifest.lines() {
            if line.starts_with('[') && line.ends_with(']') {
                section = &line[1..line.len() - 1];
                continue;
            }
            match section {
                "config" | "meta" => {
                    let (k, v) = line
                        .split_once(" = ")
                        .ok_or_else(|| fmt_err(format!("bad line `{line}`")))?;
                    if section == "config" {
                        config.push((k, v));
                    } else {
                        meta.insert(k.to_string(), v.to_string());
                    }
                }
                "vocab" => words.push(line.to_string()),
                "arrays" => lines.push(line),
                other => return Err(fmt_err(format!("unknown section `{other}`"))),
            }
        }
        let model = ModelConfig::from_pairs(config)?;
        let vocab = Vocab::from_tokens(words)?;

        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut prior: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for line in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(fmt_err(format!("bad array line `{line}`")));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| fmt_err(format!("bad number `{s}`")));
            let shape: Vec<usize> = f[2].split(',').map(num).collect::<Result<_>>()?;
            let (off, len) = (num(f[3])?, num(f[4])?);
            let crc = u32::from_str_radix(f[5], 16).map_err(|_| fmt_err("bad checksum field"))?;
            let count: usize = shape.iter().product();
            if len != count * 8 {
                return Err(Error::CheckpointShape {
                    name: f[0].to_string(),
                    found: vec![len / 8],
                    expected: shape,
                });
            }
            let end = off
                .checked_add(len)
                .filter(|&e| e <= payload.len())
                .ok_or(Error::CheckpointTruncated {
                    needed: off + len,
                    found: payload.len(),
                })?;
            let raw = &payload[off..end];
            if crc32fast::hash(raw) != crc {
                return Err(Error::CheckpointIntegrity(format!(
                    "checksum mismatch in `{}` ({})",
                    f[0], f[1]
                )));
            }
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            match f[1] {
                "adam.m" => m.push((f[0].to_string(), data)),
                "adam.v" => v.push((f[0].to_string(), data)),
                "prior.mean" | "prior.var" => {
                    let label = num(f[0])?;
                    let e = prior.entry(label).or_default();
                    if f[1] == "prior.mean" {
                        e.0 = data;
                    } else {
                        e.1 = data;
                    }
                }
                kind => {
                    let group: ParamGroup = kind.parse()?;
                    params.add(f[0], group, Tensor::new(shape, data)?);
                }
            }
        }

        let step = meta
            .remove("step")
            .ok_or_else(|| fmt_err("missing step"))?
            .parse()
            .map_err(|_| fmt_err("bad step"))?;
        let optimizer = match meta.remove("adam.step") {
            None => None,
            Some(s) => {
                let get = |meta: &mut BTreeMap<String, String>, k: &str| -> Result<String> {
                    meta.remove(k).ok_or_else(|| fmt_err(format!("missing `{k}`")))
                };
                let float = |s: String| s.parse::<f64>().map_err(|_| fmt_err(format!("bad float `{s}`")));
                let clip = get(&mut meta, "adam.clip_norm")?;
                let config = AdamConfig {
                    beta1: float(get(&mut meta, "adam.beta1")?)?,
                    beta2: float(get(&mut meta, "adam.beta2")?)?,
                    eps: float(get(&mut meta, "adam.eps")?)?,
                    clip_norm: if clip == "none" { None } else { Some(float(clip)?) },
                };
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(fmt_err("optimizer moments do not cover every parameter"));
                }
                let mut opt = Adam::new(config, &params);
                opt.step = s.parse().map_err(|_| fmt_err("bad adam.step"))?;
                for (i, ((_, p), ((mn, md), (vn, vd)))) in params.iter().zip(m.into_iter().zip(v)).enumerate() {
                    if mn != p.name || vn != p.name || md.len() != p.value().len() || vd.len() != p.value().len() {
                        return Err(fmt_err(format!("optimizer moment mismatch at `{}`", p.name)));
                    }
                    opt.m[i] = md;
                    opt.v[i] = vd;
                }
                Some(opt)
            }
        };
        let meta = meta
            .into_iter()
            .map(|(k, v)| (k.strip_prefix("run.").map(str::to_string).unwrap_or(k), v))
            .collect();
        Ok(Self {
            model,
            vocab,
            step,
            meta,
            params,
            optimizer,
            prior: (!prior.is_empty()).then_some(ClassConditionalPrior { classes: prior }),
        })
    }

    /// Fails unless the stored model configuration equals `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model != expected {
            let diff: Vec<String> = self
                .model
                .to_pairs()
                .into_iter()
                .zip(expected.to_pairs())
                .filter(|(a, b)| a != b)
                .map(|((k, a), (_, b))| format!("{k}: checkpoint {a}, expected {b}"))
                .collect();
            return Err(Error::Config(format!(
                "checkpoint config mismatch ({})",
                diff.join("; ")
            )));
        }
        Ok(())
    }
}
