//! Dataset manifests and the built-in synthetic image generators.
//!
//! Manifest text, one directive per line (`#` starts a comment):
//!
//! ```text
//! class left
//! class right
//! train left images/a.pgm
//! test right,left images/b.ppm
//! train right synth:noise-fine-scale:seed=17
//! ```
//!
//! Paths are relative to the manifest. A `synth:` source is rendered on
//! demand at the requested size, using its first label as the class.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config, input, Result};
use crate::image::{read_pnm, to_grayscale};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test")]
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Class given by where a large blob sits. Each image also carries a
    /// random number of small spots, which only the finer pyramid levels
    /// resolve.
    NoiseFineScale,
    /// Class 1 images contain a bright striped square away from the borders, on a
    /// smooth random background. Class 0 images are background only.
    PlantedSquare,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::NoiseFineScale => "noise-fine-scale",
            SynthKind::PlantedSquare => "planted-square",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "noise-fine-scale" => Ok(SynthKind::NoiseFineScale),
            "planted-square" => Ok(SynthKind::PlantedSquare),
            _ => config(format!(
                "unknown synthetic generator `{s}` (noise-fine-scale, planted-square)"
            )),
        }
    }

    pub fn classes(self) -> Vec<String> {
        let names: &[&str] = match self {
            SynthKind::NoiseFineScale => &["left", "center", "right"],
            SynthKind::PlantedSquare => &["background", "square"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    File(PathBuf),
    Synth { kind: SynthKind, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub source: Source,
    pub split: Split,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub records: Vec<Record>,
}

/// A rendered synthetic image and, for planted squares, the square's
/// normalized `[x0, x1) × [y0, y1)` box.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub image: Tensor,
    pub square: Option<(f64, f64, f64, f64)>,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut classes: Vec<String> = Vec::new();
        let mut records = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| config::<()>(format!("manifest line {}: {m}", no + 1));
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts[0] {
                "class" | "classes" => {
                    for name in &parts[1..] {
                        if classes.iter().any(|c| c == name) {
                            err(&format!("class `{name}` declared twice"))?;
                        }
                        classes.push(name.to_string());
                    }
                }
                "train" | "test" => {
                    if parts.len() != 3 {
                        err("expected `<split> <labels> <source>`")?;
                    }
                    let split = if parts[0] == "train" {
                        Split::Train
                    } else {
                        Split::Test
                    };
                    let mut labels = Vec::new();
                    for name in parts[1].split(',') {
                        match classes.iter().position(|c| c == name) {
                            Some(i) if !labels.contains(&i) => labels.push(i),
                            Some(_) => {}
                            None => err(&format!("label `{name}` not in the class table"))?,
                        }
                    }
                    let source = parse_source(parts[2], base)?;
                    records.push(Record {
                        source,
                        split,
                        labels,
                    });
                }
                other => err(&format!("unknown directive `{other}`"))?,
            }
        }
        let m = Self { classes, records };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Balanced synthetic dataset: sample `i` of a split has class
    /// `i % n_classes` and a seed derived from `seed`, the split and `i`.
    pub fn synthetic(kind: SynthKind, n_train: usize, n_test: usize, seed: u64) -> Self {
        let classes = kind.classes();
        let mut records = Vec::with_capacity(n_train + n_test);
        for (split, n, salt) in [
            (Split::Train, n_train, 0u64),
            (Split::Test, n_test, 1u64 << 32),
        ] {
            for i in 0..n {
                let s = seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add(salt + i as u64);
                records.push(Record {
                    source: Source::Synth { kind, seed: s },
                    split,
                    labels: vec![i % classes.len()],
                });
            }
        }
        Self { classes, records }
    }

    /// Parses `synth:<kind>:train=N:test=M:seed=S` (all keys optional) or
    /// loads a manifest file.
    pub fn from_spec(spec: &str) -> Result<Self> {
        let Some(rest) = spec.strip_prefix("synth:") else {
            return Self::load(Path::new(spec));
        };
        let mut parts = rest.split(':');
        let kind = SynthKind::parse(parts.next().unwrap_or(""))?;
        let (mut train, mut test, mut seed) = (300usize, 300usize, 0u64);
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| crate::Error::Config(format!("bad dataset option `{p}`")))?;
            let num = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| crate::Error::Config(format!("bad number `{v}`")))
            };
            match k {
                "train" => train = num(v)? as usize,
                "test" => test = num(v)? as usize,
                "seed" => seed = num(v)?,
                _ => return config(format!("unknown dataset option `{k}`")),
            }
        }
        let m = Self::synthetic(kind, train, test, seed);
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return config("manifest declares no classes");
        }
        for split in [Split::Train, Split::Test] {
            if !self.records.iter().any(|r| r.split == split) {
                return config(format!("manifest has no {split:?} records").to_lowercase());
            }
        }
        if let Some(r) = self.records.iter().find(|r| r.labels.is_empty()) {
            return config(format!("record {:?} has no labels", r.source));
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Text form accepted by [`DatasetManifest::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.classes {
            s.push_str(&format!("class {c}\n"));
        }
        for r in &self.records {
            let split = match r.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let labels: Vec<&str> = r.labels.iter().map(|&l| self.classes[l].as_str()).collect();
            let src = match &r.source {
                Source::File(p) => p.display().to_string(),
                Source::Synth { kind, seed } => format!("synth:{}:seed={seed}", kind.name()),
            };
            s.push_str(&format!("{split} {} {src}\n", labels.join(",")));
        }
        s
    }
}

fn parse_source(s: &str, base: &Path) -> Result<Source> {
    if let Some(rest) = s.strip_prefix("synth:") {
        let (kind, opt) = rest.split_once(':').unwrap_or((rest, "seed=0"));
        let kind = SynthKind::parse(kind)?;
        let seed = opt
            .strip_prefix("seed=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| crate::Error::Config(format!("bad synthetic source `{s}`")))?;
        return Ok(Source::Synth { kind, seed });
    }
    Ok(Source::File(base.join(s)))
}

/// Loads or renders a record as a `channels`-plane image. Synthetic images
/// are rendered at `size × size`.
pub fn load_record(record: &Record, channels: usize, size: usize) -> Result<Tensor> {
    let img = match &record.source {
        Source::File(p) => read_pnm(p)?,
        Source::Synth { kind, seed } => render(*kind, record.labels[0], *seed, size).image,
    };
    match_channels(img, channels)
}

/// Converts gray to RGB by repetition and RGB to gray by luma.
pub fn match_channels(img: Tensor, channels: usize) -> Result<Tensor> {
    match (img.channels(), channels) {
        (a, b) if a == b => Ok(img),
        (3, 1) => Ok(to_grayscale(&img)),
        (1, c) => {
            let plane = img.data().to_vec();
            let data = plane
                .iter()
                .copied()
                .cycle()
                .take(plane.len() * c)
                .collect();
            Tensor::new(c, img.height(), img.width(), data)
        }
        (a, b) => input(format!(
            "cannot feed a {a}-channel image to a {b}-channel network"
        )),
    }
}

pub fn render(kind: SynthKind, class: usize, seed: u64, size: usize) -> SynthImage {
    match kind {
        SynthKind::NoiseFineScale => SynthImage {
            image: noise_fine_scale(class, seed, size),
            square: None,
        },
        SynthKind::PlantedSquare => planted_square(class, seed, size),
    }
}

fn noise_fine_scale(class: usize, seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let radius = 0.12 * s;
    let cx = (0.5 + 0.18 * ((class % 3) as f64 - 1.0) + rng.random_range(-0.02..0.02)) * s;
    let cy = (0.5 + rng.random_range(-0.02..0.02)) * s;
    let spot_radius = s / 32.0;
    let spots: Vec<(f64, f64)> = (0..rng.random_range(0..=60))
        .map(|_| {
            (
                rng.random_range(0.1..0.9) * s,
                rng.random_range(0.1..0.9) * s,
            )
        })
        .collect();
    let raised = |d: f64| {
        if d < 1.0 {
            0.5 + 0.5 * (std::f64::consts::PI * d).cos()
        } else {
            0.0
        }
    };
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = raised(((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() / radius);
            for &(px, py) in &spots {
                v += raised(((fx - px).powi(2) + (fy - py).powi(2)).sqrt() / spot_radius);
            }
            data.push((0.2 + 0.75 * v) as f32);
        }
    }
    Tensor::new(1, size, size, data).expect("size matches")
}

fn planted_square(class: usize, seed: u64, size: usize) -> SynthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.08),
            )
        })
        .collect();
    let edge = rng.random_range(0.15..0.25);
    let x0 = rng.random_range(0.1..0.9 - edge);
    let y0 = rng.random_range(0.1..0.9 - edge);
    let period = s / 32.0;
    let square = (class == 1).then_some((x0, x0 + edge, y0, y0 + edge));
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let mut val = 0.3;
            for &(fx, fy, ph, a) in &waves {
                val += a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin();
            }
            val += 0.03 * rng.random_range(-1.0..1.0);
            if let Some((a, b, c, d)) = square {
                if u >= a && u < b && v >= c && v < d {
                    val += 0.5 + 0.3 * (std::f64::consts::TAU * (x + y) as f64 / period).sin();
                }
            }
            data.push(val as f32);
        }
    }
    SynthImage {
        image: Tensor::new(1, size, size, data).expect("size matches"),
        square,
    }
}
