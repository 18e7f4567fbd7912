//! Toy conditioned motion corpus.
//!
//! Each class is a family of sinusoidal per-channel velocity curves with a
//! class-specific offset, amplitude and period. Items jitter phase, amplitude
//! and offset and add per-frame noise. The container layout is
//!
//! ```text
//! "MLCT", version u16, count u32,
//! per item: id u32, label u16, frames u16, channels u16, frames*channels f32 (LE, row-major)
//! ```

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::eval::summary_features;
use crate::rng::stream;

pub const CORPUS_MAGIC: &[u8; 4] = b"MLCT";
pub const CORPUS_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub id: u32,
    pub label: u16,
    /// `frames x channels` velocities.
    pub data: Array2<f64>,
}

impl MotionSequence {
    pub fn new(id: u32, label: u16, data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Empty("motion sequence"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("sequence {id} has non-finite values")));
        }
        Ok(Self { id, label, data })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub items: Vec<MotionSequence>,
}

impl Corpus {
    pub fn new(items: Vec<MotionSequence>) -> Self {
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of classes, taken as the largest label plus one.
    pub fn num_classes(&self) -> usize {
        self.items.iter().map(|s| s.label as usize + 1).max().unwrap_or(0)
    }

    /// `(train, held_out)`: items with `id % 5 == 0` are held out.
    pub fn split(&self) -> (Vec<MotionSequence>, Vec<MotionSequence>) {
        self.items.iter().cloned().partition(|s| s.id % 5 != 0)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CORPUS_MAGIC);
        out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.items.len() as u32).to_le_bytes());
        for s in &self.items {
            let frames = u16::try_from(s.frames())
                .map_err(|_| Error::Format(format!("item {} has too many frames", s.id)))?;
            let channels = u16::try_from(s.channels())
                .map_err(|_| Error::Format(format!("item {} has too many channels", s.id)))?;
            out.extend_from_slice(&s.id.to_le_bytes());
            out.extend_from_slice(&s.label.to_le_bytes());
            out.extend_from_slice(&frames.to_le_bytes());
            out.extend_from_slice(&channels.to_le_bytes());
            for x in s.data.iter() {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(Error::Format(format!("corpus truncated at offset {pos}")));
            }
            let out = &bytes[pos..pos + n];
            pos += n;
            Ok(out)
        };
        if take(4)? != CORPUS_MAGIC {
            return Err(Error::Format("bad magic, expected MLCT".into()));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
        if version != CORPUS_VERSION {
            return Err(Error::Version {
                kind: "corpus",
                found: version,
                expected: CORPUS_VERSION,
            });
        }
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        let mut items = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let id = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
            let label = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
            let frames = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let channels = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let raw = take(frames * channels * 4)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let data = Array2::from_shape_vec((frames, channels), data).expect("sized payload");
            items.push(MotionSequence::new(id, label, data)?);
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after corpus payload".into()));
        }
        Ok(Self { items })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyCorpusConfig {
    pub classes: usize,
    pub items_per_class: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub channels: usize,
    /// Standard deviation of per-frame noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            items_per_class: 200,
            frames_min: 32,
            frames_max: 64,
            channels: 4,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Per-class generator parameters, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFamily {
    pub offset: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub period: Vec<f64>,
}

/// Item-level draw from a class family.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemStyle {
    pub phase: Vec<f64>,
    pub amplitude_scale: f64,
    pub offset_shift: Vec<f64>,
}

const MIN_OFFSET_SEPARATION: f64 = 1.0;

/// Class families with offsets at least `MIN_OFFSET_SEPARATION` apart.
pub fn class_families(classes: usize, channels: usize, seed: u64) -> Vec<ClassFamily> {
    let mut rng = stream(seed, "corpus/classes");
    let mut out: Vec<ClassFamily> = Vec::with_capacity(classes);
    while out.len() < classes {
        let offset: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let far = out.iter().all(|c| {
            c.offset
                .iter()
                .zip(&offset)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                >= MIN_OFFSET_SEPARATION
        });
        let amplitude = (0..channels).map(|_| rng.gen_range(0.3..1.0)).collect();
        let period = (0..channels).map(|_| rng.gen_range(8.0..24.0)).collect();
        if far {
            out.push(ClassFamily {
                offset,
                amplitude,
                period,
            });
        }
    }
    out
}

pub fn draw_style(channels: usize, rng: &mut ChaCha8Rng) -> ItemStyle {
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let amplitude_scale = 1.0 + 0.1 * normal();
    let offset_shift = (0..channels).map(|_| 0.05 * normal()).collect();
    let phase = (0..channels)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    ItemStyle {
        phase,
        amplitude_scale,
        offset_shift,
    }
}

/// Noise-free rendering of a family and style over `frames` frames.
pub fn render(family: &ClassFamily, style: &ItemStyle, frames: usize) -> Array2<f64> {
    let channels = family.offset.len();
    Array2::from_shape_fn((frames, channels), |(f, j)| {
        let arg = std::f64::consts::TAU * f as f64 / family.period[j] + style.phase[j];
        family.offset[j]
            + style.offset_shift[j]
            + style.amplitude_scale * family.amplitude[j] * arg.sin()
    })
}

/// Generates the toy corpus. Values are stored as `f32`-representable
/// numbers so the in-memory corpus equals its serialized form.
pub fn generate(config: &ToyCorpusConfig) -> Result<Corpus> {
    if config.classes == 0 || config.items_per_class == 0 || config.channels == 0 {
        return Err(Error::InvalidArgument("corpus dimensions must be positive".into()));
    }
    if config.frames_min == 0 || config.frames_min > config.frames_max || config.frames_max > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "invalid frame range {}..={}",
            config.frames_min, config.frames_max
        )));
    }
    if config.classes > u16::MAX as usize {
        return Err(Error::InvalidArgument("too many classes".into()));
    }
    let families = class_families(config.classes, config.channels, config.seed);
    let mut rng = stream(config.seed, "corpus/items");
    let mut items = Vec::with_capacity(config.classes * config.items_per_class);
    let mut id = 0u32;
    for _ in 0..config.items_per_class {
        for (label, family) in families.iter().enumerate() {
            let frames = rng.gen_range(config.frames_min..=config.frames_max);
            let style = draw_style(config.channels, &mut rng);
            let mut data = render(family, &style, frames);
            data.mapv_inplace(|x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (x + config.noise * z) as f32 as f64
            });
            items.push(MotionSequence::new(id, label as u16, data)?);
            id += 1;
        }
    }
    Ok(Corpus { items })
}

/// Frozen stand-in for a text encoder: one seeded unit vector per class,
/// nudged per item by a fixed projection of the item's summary features so
/// that captions of the same class are close but not identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    class_vectors: Vec<Vec<f64>>,
    projection: Array2<f64>,
    style_weight: f64,
}

impl Vocabulary {
    pub fn new(classes: usize, dim: usize, feature_dim: usize, style_weight: f64, seed: u64) -> Self {
        let mut rng = stream(seed, "vocabulary");
        let class_vectors = (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                normalize(v)
            })
            .collect();
        let scale = 1.0 / (feature_dim.max(1) as f64).sqrt();
        let projection = Array2::from_shape_fn((dim, feature_dim), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self {
            class_vectors,
            projection,
            style_weight,
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn classes(&self) -> usize {
        self.class_vectors.len()
    }

    /// Unit embedding of a bare class label.
    pub fn class_embedding(&self, label: u16) -> Result<Vec<f64>> {
        self.class_vectors
            .get(label as usize)
            .cloned()
            .ok_or(Error::UnknownLabel(label))
    }

    /// Unit embedding of a specific item ("caption").
    pub fn embed(&self, item: &MotionSequence) -> Result<Vec<f64>> {
        let base = self.class_embedding(item.label)?;
        let feats = summary_features(&item.data);
        if feats.len() != self.projection.ncols() {
            return Err(Error::Shape {
                context: "vocabulary features",
                expected: vec![self.projection.ncols()],
                actual: vec![feats.len()],
            });
        }
        let style = self.projection.dot(&ndarray::Array1::from(feats));
        Ok(normalize(
            base.iter()
                .zip(style.iter())
                .map(|(b, s)| b + self.style_weight * s)
                .collect(),
        ))
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}
