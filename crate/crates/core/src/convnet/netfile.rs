//! Network weight files.
//!
//! Binary container (`MPPN`), all integers u32 LE, payloads f32 LE:
//!
//! ```text
//! "MPPN" version standard_size input_channels target layer_count
//! per layer: tag:u8 then
//!   0 conv    out in kh kw stride pad weights[out*in*kh*kw] bias[out]
//!   1 relu
//!   2 maxpool kernel stride pad
//!   3 lrn     size alpha:f32 beta:f32 k:f32
//!   4 fc      out in weights[out*in] bias[out]
//! ```
//!
//! The text manifest lists one layer per line and draws weights from a
//! seeded generator:
//!
//! ```text
//! input channels=1 size=32
//! seed 7
//! conv out=8 k=5 stride=1 pad=0
//! relu
//! maxpool k=2 stride=2
//! fc out=64
//! relu
//! target 6
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ConvLayer, FcLayer, LayerSpec, LrnParams, NetworkSpec, PoolGeometry};
use crate::binio::{Reader, Writer};
use crate::error::{config, Error, Result};

const MAGIC: &[u8; 4] = b"MPPN";

/// Desk-scale stand-in network: 32×32 grayscale input, two conv/pool stages
/// and one fully-connected layer of 32 units followed by ReLU (the target).
/// Total stride 4, receptive field 32, no padding.
pub const TOY_MANIFEST: &str = "\
input channels=1 size=32
conv out=8 k=5 stride=1 pad=0
relu
maxpool k=2 stride=2
conv out=16 k=3 stride=1 pad=0
relu
maxpool k=2 stride=2
fc out=32
relu
";

pub fn toy_network(seed: u64) -> NetworkSpec {
    parse_manifest(&format!("{TOY_MANIFEST}seed {seed}\n")).expect("built-in manifest is valid")
}

pub fn write_network(net: &NetworkSpec, w: impl Write) -> Result<()> {
    let mut w = Writer::new(w);
    w.magic(MAGIC)?;
    w.usize(net.standard_size())?;
    w.usize(net.input_channels())?;
    w.usize(net.target())?;
    w.usize(net.layers().len())?;
    for layer in net.layers() {
        match layer {
            LayerSpec::Conv(c) => {
                w.u8(0)?;
                for v in [
                    c.out_channels,
                    c.in_channels,
                    c.kernel_h,
                    c.kernel_w,
                    c.stride,
                    c.pad,
                ] {
                    w.usize(v)?;
                }
                w.f32s(&c.weights)?;
                w.f32s(&c.bias)?;
            }
            LayerSpec::Relu => w.u8(1)?,
            LayerSpec::MaxPool(p) => {
                w.u8(2)?;
                w.usize(p.kernel)?;
                w.usize(p.stride)?;
                w.usize(p.pad)?;
            }
            LayerSpec::Lrn(p) => {
                w.u8(3)?;
                w.usize(p.size)?;
                w.f32(p.alpha)?;
                w.f32(p.beta)?;
                w.f32(p.k)?;
            }
            LayerSpec::FullyConnected(f) => {
                w.u8(4)?;
                w.usize(f.out_features)?;
                w.usize(f.in_features)?;
                w.f32s(&f.weights)?;
                w.f32s(&f.bias)?;
            }
        }
    }
    w.finish()?;
    Ok(())
}

pub fn read_network_from(r: impl Read) -> Result<NetworkSpec> {
    let mut r = Reader::new(r, "network");
    r.magic(MAGIC)?;
    let standard = r.usize()?;
    let channels = r.usize()?;
    let target = r.usize()?;
    let n = r.usize()?;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let layer = match r.u8()? {
            0 => {
                let mut g = [0usize; 6];
                for v in &mut g {
                    *v = r.usize()?;
                }
                let [o, i, kh, kw, s, p] = g;
                let weights = r.f32s(o * i * kh * kw)?;
                let bias = r.f32s(o)?;
                LayerSpec::Conv(ConvLayer::new(o, i, kh, kw, s, p, weights, bias)?)
            }
            1 => LayerSpec::Relu,
            2 => LayerSpec::MaxPool(PoolGeometry {
                kernel: r.usize()?,
                stride: r.usize()?,
                pad: r.usize()?,
            }),
            3 => LayerSpec::Lrn(LrnParams {
                size: r.usize()?,
                alpha: r.f32()?,
                beta: r.f32()?,
                k: r.f32()?,
            }),
            4 => {
                let o = r.usize()?;
                let i = r.usize()?;
                let weights = r.f32s(o * i)?;
                let bias = r.f32s(o)?;
                LayerSpec::FullyConnected(FcLayer::new(o, i, weights, bias)?)
            }
            t => return r.err(format!("unknown layer tag {t}")),
        };
        layers.push(layer);
    }
    r.end()?;
    NetworkSpec::new(channels, standard, layers, target)
}

/// Loads a binary `MPPN` file, or a text manifest when the file does not
/// start with the magic.
pub fn read_network(path: &Path) -> Result<NetworkSpec> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(MAGIC) {
        read_network_from(BufReader::new(bytes.as_slice()))
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Format {
            what: "network",
            msg: "neither MPPN nor utf-8 manifest".into(),
        })?;
        parse_manifest(&text)
    }
}

pub fn save_network(net: &NetworkSpec, path: &Path) -> Result<()> {
    write_network(net, BufWriter::new(File::create(path)?))
}

fn parse_kv<'a>(
    line_no: usize,
    parts: impl Iterator<Item = &'a str>,
) -> Result<HashMap<&'a str, &'a str>> {
    parts
        .map(|p| {
            p.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected key=value, got `{p}`"))
            })
        })
        .collect()
}

fn get<T: std::str::FromStr>(
    kv: &HashMap<&str, &str>,
    key: &str,
    line: usize,
) -> Result<Option<T>> {
    kv.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Config(format!("line {line}: bad value for `{key}`: {v}")))
        })
        .transpose()
}

fn need<T: std::str::FromStr>(kv: &HashMap<&str, &str>, key: &str, line: usize) -> Result<T> {
    get(kv, key, line)?.ok_or_else(|| Error::Config(format!("line {line}: missing `{key}`")))
}

enum Pending {
    Conv {
        out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Fc {
        out: usize,
    },
    Ready(LayerSpec),
}

/// Parses the text manifest; weights are He-normal draws from a ChaCha8
/// stream seeded by the `seed` line (default 0), biases N(0, 0.01).
pub fn parse_manifest(text: &str) -> Result<NetworkSpec> {
    let mut channels = None;
    let mut size = None;
    let mut seed = 0u64;
    let mut target = None;
    let mut pending = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let head = parts.next().unwrap_or_default();
        match head {
            "input" => {
                let kv = parse_kv(line_no, parts)?;
                channels = Some(need::<usize>(&kv, "channels", line_no)?);
                size = Some(need::<usize>(&kv, "size", line_no)?);
            }
            "seed" | "target" => {
                let v = parts.next().ok_or_else(|| {
                    Error::Config(format!("line {line_no}: `{head}` needs a value"))
                })?;
                let n: u64 = v
                    .parse()
                    .map_err(|_| Error::Config(format!("line {line_no}: bad {head} `{v}`")))?;
                if head == "seed" {
                    seed = n;
                } else {
                    target = Some(n as usize);
                }
            }
            "conv" => {
                let kv = parse_kv(line_no, parts)?;
                let k: Option<usize> = get(&kv, "k", line_no)?;
                let kh = get(&kv, "kh", line_no)?.or(k);
                let kw = get(&kv, "kw", line_no)?.or(k);
                let (Some(kh), Some(kw)) = (kh, kw) else {
                    return config(format!("line {line_no}: conv needs k or kh/kw"));
                };
                pending.push(Pending::Conv {
                    out: need(&kv, "out", line_no)?,
                    kh,
                    kw,
                    stride: get(&kv, "stride", line_no)?.unwrap_or(1),
                    pad: get(&kv, "pad", line_no)?.unwrap_or(0),
                });
            }
            "fc" => {
                let kv = parse_kv(line_no, parts)?;
                pending.push(Pending::Fc {
                    out: need(&kv, "out", line_no)?,
                });
            }
            "relu" => pending.push(Pending::Ready(LayerSpec::Relu)),
            "maxpool" => {
                let kv = parse_kv(line_no, parts)?;
                let kernel: usize = need(&kv, "k", line_no)?;
                pending.push(Pending::Ready(LayerSpec::MaxPool(PoolGeometry {
                    kernel,
                    stride: get(&kv, "stride", line_no)?.unwrap_or(kernel),
                    pad: get(&kv, "pad", line_no)?.unwrap_or(0),
                })));
            }
            "lrn" => {
                let kv = parse_kv(line_no, parts)?;
                pending.push(Pending::Ready(LayerSpec::Lrn(LrnParams {
                    size: get(&kv, "size", line_no)?.unwrap_or(5),
                    alpha: get(&kv, "alpha", line_no)?.unwrap_or(1e-4),
                    beta: get(&kv, "beta", line_no)?.unwrap_or(0.75),
                    k: get(&kv, "k", line_no)?.unwrap_or(1.0),
                })));
            }
            other => return config(format!("line {line_no}: unknown directive `{other}`")),
        }
    }
    let (Some(channels), Some(size)) = (channels, size) else {
        return config("manifest needs an `input channels=.. size=..` line");
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bias_dist = Normal::new(0.0f32, 0.01).expect("valid");
    let mut shape = (channels, size, size);
    let mut layers = Vec::with_capacity(pending.len());
    for (i, p) in pending.into_iter().enumerate() {
        let layer = match p {
            Pending::Ready(l) => l,
            Pending::Conv {
                out,
                kh,
                kw,
                stride,
                pad,
            } => {
                let fan_in = shape.0 * kh * kw;
                let dist = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid");
                let weights = (0..out * fan_in).map(|_| dist.sample(&mut rng)).collect();
                let bias = (0..out).map(|_| bias_dist.sample(&mut rng)).collect();
                LayerSpec::Conv(ConvLayer::new(
                    out, shape.0, kh, kw, stride, pad, weights, bias,
                )?)
            }
            Pending::Fc { out } => {
                let fan_in = shape.0 * shape.1 * shape.2;
                let dist = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid");
                let weights = (0..out * fan_in).map(|_| dist.sample(&mut rng)).collect();
                let bias = (0..out).map(|_| bias_dist.sample(&mut rng)).collect();
                LayerSpec::FullyConnected(FcLayer::new(out, fan_in, weights, bias)?)
            }
        };
        shape = layer
            .output_shape(shape)
            .map_err(|e| Error::Config(format!("layer {i} ({}): {e}", layer.kind())))?;
        layers.push(layer);
    }
    let target = target.unwrap_or(layers.len().saturating_sub(1));
    NetworkSpec::new(channels, size, layers, target)
}
