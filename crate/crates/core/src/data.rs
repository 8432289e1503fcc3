//! Synthetic paired-modality sequence classification.
//!
//! Each class is a fixed sequence of latent codes. A sample renders that
//! sequence twice, once through a source projection and once through a target
//! projection, each with its own per-sample "speaker" gain and bias plus
//! Gaussian noise. The source is noisier than the target, so the target
//! modality carries more task information.
//!
//! Classes come in families that share a stem sequence and differ in a few
//! substituted positions, which keeps per-step codes recognisable while making
//! whole sequences easy to confuse.

use std::cell::Cell;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"MMBDATA\0";
pub const DATASET_VERSION: u32 = 1;

const STREAM_WORLD: u64 = 1;
const STREAM_SAMPLE: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// `K`
    pub num_classes: usize,
    /// `P`: number of latent codes.
    pub codebook_size: usize,
    /// `T`: steps per sequence in both modalities.
    pub seq_len: usize,
    pub code_dim: usize,
    pub source_dim: usize,
    pub target_dim: usize,
    /// Norm of every codebook vector.
    pub code_norm: f64,
    pub source_noise: f64,
    pub target_noise: f64,
    /// Classes per family sharing a stem sequence.
    pub family_size: usize,
    /// Stem positions rewritten for each family member.
    pub substitutions: usize,
    /// Per-sample gain is drawn from `[1 − spread, 1 + spread]`.
    pub speaker_gain_spread: f64,
    /// Standard deviation of the per-sample, per-dimension bias.
    pub speaker_bias_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            codebook_size: 8,
            seq_len: 10,
            code_dim: 8,
            source_dim: 24,
            target_dim: 16,
            code_norm: 1.0,
            source_noise: 0.8,
            target_noise: 0.2,
            family_size: 4,
            substitutions: 1,
            speaker_gain_spread: 0.2,
            speaker_bias_std: 0.05,
            train_per_class: 200,
            test_per_class: 50,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Structural checks shared by every generator entry point.
    fn validate_shape(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Spec("num_classes must be at least 2".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Spec("codebook_size must be at least 2".into()));
        }
        if self.seq_len < 1 {
            return Err(Error::Spec("seq_len must be at least 1".into()));
        }
        for (name, v) in [
            ("code_dim", self.code_dim),
            ("source_dim", self.source_dim),
            ("target_dim", self.target_dim),
            ("family_size", self.family_size),
        ] {
            if v == 0 {
                return Err(Error::Spec(format!("{name} must be positive")));
            }
        }
        let distinct = (self.codebook_size as u128).checked_pow(self.seq_len as u32);
        if distinct.is_some_and(|d| (self.num_classes as u128) > d) {
            return Err(Error::Spec(format!(
                "{} classes need distinct sequences but only {}^{} exist",
                self.num_classes, self.codebook_size, self.seq_len
            )));
        }
        for (name, v) in [
            ("source_noise", self.source_noise),
            ("target_noise", self.target_noise),
            ("speaker_bias_std", self.speaker_bias_std),
            ("code_norm", self.code_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Spec(format!("{name} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.speaker_gain_spread) {
            return Err(Error::Spec("speaker_gain_spread must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if !(self.source_noise > self.target_noise) {
            return Err(Error::Spec(format!(
                "source_noise ({}) must exceed target_noise ({})",
                self.source_noise, self.target_noise
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("dataset spec serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalSample {
    /// `L × d_src`
    pub x_src: Tensor,
    /// `S × d_tgt`
    pub x_tgt: Tensor,
    pub label: usize,
}

impl ModalSample {
    pub fn source_len(&self) -> usize {
        self.x_src.rows()
    }

    pub fn target_len(&self) -> usize {
        self.x_tgt.rows()
    }
}

/// The fixed generative structure shared by every sample of a spec.
#[derive(Clone, Debug)]
pub struct World {
    /// `P × code_dim`
    pub codebook: Tensor,
    /// `code_dim × d_src`
    pub source_projection: Tensor,
    /// `code_dim × d_tgt`
    pub target_projection: Tensor,
    pub class_codes: Vec<Vec<usize>>,
}

impl World {
    pub fn new(spec: &DatasetSpec) -> Result<Self> {
        spec.validate_shape()?;
        let mut rng = rng_for(spec.seed, &[STREAM_WORLD]);
        let mut codebook = Tensor::randn(spec.codebook_size, spec.code_dim, 1.0, &mut rng);
        for i in 0..spec.codebook_size {
            let row = codebook.row_mut(i);
            let n = crate::tensor::norm(row).max(f64::MIN_POSITIVE);
            row.iter_mut().for_each(|v| *v *= spec.code_norm / n);
        }
        // unit-variance projections keep ||W c|| ≈ ||c|| · √(d_out / code_dim)
        let scale = 1.0 / (spec.code_dim as f64).sqrt();
        let source_projection = Tensor::randn(spec.code_dim, spec.source_dim, scale, &mut rng);
        let target_projection = Tensor::randn(spec.code_dim, spec.target_dim, scale, &mut rng);
        let class_codes = class_sequences(spec, &mut rng);
        Ok(Self {
            codebook,
            source_projection,
            target_projection,
            class_codes,
        })
    }

    /// Clean per-step code vectors (`T × code_dim`) of a class.
    pub fn latent(&self, class: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = self.class_codes[class]
            .iter()
            .map(|&c| self.codebook.row(c).to_vec())
            .collect();
        Tensor::from_rows(&rows).expect("codebook rows share a width")
    }
}

fn class_sequences<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Vec<Vec<usize>> {
    let (p, t) = (spec.codebook_size, spec.seq_len);
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(spec.num_classes);
    let random_seq = |rng: &mut R| (0..t).map(|_| rng.random_range(0..p)).collect::<Vec<_>>();
    let mut stem = random_seq(rng);
    while out.len() < spec.num_classes {
        if out.len().is_multiple_of(spec.family_size) {
            stem = random_seq(rng);
        }
        let mut placed = false;
        for _ in 0..1000 {
            let mut seq = stem.clone();
            for _ in 0..spec.substitutions.min(t) {
                let pos = rng.random_range(0..t);
                let shift = rng.random_range(1..p);
                seq[pos] = (seq[pos] + shift) % p;
            }
            if !out.contains(&seq) {
                out.push(seq);
                placed = true;
                break;
            }
        }
        // small code spaces can run out of family variants
        while !placed {
            let seq = random_seq(rng);
            if !out.contains(&seq) {
                out.push(seq);
                placed = true;
            }
        }
    }
    out
}

/// Renders one sample of `class`; fully determined by `(spec, class, sample_seed)`.
pub fn render_sample(class: usize, sample_seed: u64, spec: &DatasetSpec, world: &World) -> Result<ModalSample> {
    if class >= world.class_codes.len() {
        return Err(Error::Spec(format!(
            "class {class} out of range for {} classes",
            world.class_codes.len()
        )));
    }
    let mut rng = rng_for(sample_seed, &[]);
    let latent = world.latent(class);
    let x_src = render_modality(&latent, &world.source_projection, spec.source_noise, spec, &mut rng)?;
    let x_tgt = render_modality(&latent, &world.target_projection, spec.target_noise, spec, &mut rng)?;
    Ok(ModalSample { x_src, x_tgt, label: class })
}

fn render_modality<R: Rng + ?Sized>(
    latent: &Tensor,
    projection: &Tensor,
    noise: f64,
    spec: &DatasetSpec,
    rng: &mut R,
) -> Result<Tensor> {
    let mut x = latent.matmul(projection)?;
    let spread = spec.speaker_gain_spread;
    let gain = if spread > 0.0 {
        rng.random_range(1.0 - spread..=1.0 + spread)
    } else {
        1.0
    };
    let bias: Vec<f64> = (0..x.cols())
        .map(|_| spec.speaker_bias_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let cols = x.cols();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        let eps: f64 = rng.sample(StandardNormal);
        *v = gain * *v + bias[i % cols] + noise * eps;
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_tag(t: u32) -> Result<Self> {
        match t {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            _ => Err(Error::format("dataset", format!("unknown split tag {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub split: Split,
    pub samples: Vec<ModalSample>,
}

/// Stable seed of sample `index` of `class` in `split`.
pub fn sample_seed(spec: &DatasetSpec, split: Split, class: usize, index: usize) -> u64 {
    crate::seed::derive_seed(spec.seed, &[STREAM_SAMPLE, split.tag() as u64, class as u64, index as u64])
}

/// Train and test sets, class-major order, `*_per_class` samples per class.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let world = World::new(spec)?;
    let split = |split: Split, per_class: usize| -> Result<Dataset> {
        let mut samples = Vec::with_capacity(per_class * spec.num_classes);
        for class in 0..spec.num_classes {
            for index in 0..per_class {
                samples.push(render_sample(class, sample_seed(spec, split, class, index), spec, &world)?);
            }
        }
        Ok(Dataset {
            spec: spec.clone(),
            split,
            samples,
        })
    };
    Ok((split(Split::Train, spec.train_per_class)?, split(Split::Test, spec.test_per_class)?))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// A copy with every target stream replaced by zeros.
    pub fn with_zeroed_targets(&self) -> Dataset {
        let mut d = self.clone();
        for s in &mut d.samples {
            s.x_tgt.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        d
    }

    /// Little-endian container: magic, version, split, seed, spec echo,
    /// records `(label, L, S, x_src, x_tgt)`, trailing CRC-32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u32(self.split.tag());
        w.u64(self.spec.seed);
        w.string(&self.spec.to_toml());
        w.u64(self.samples.len() as u64);
        w.u32(self.spec.source_dim as u32);
        w.u32(self.spec.target_dim as u32);
        for s in &self.samples {
            w.u32(s.label as u32);
            w.u32(s.source_len() as u32);
            w.u32(s.target_len() as u32);
            w.f64s(s.x_src.data());
            w.f64s(s.x_tgt.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("dataset", bytes)?;
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let split = Split::from_tag(r.u32()?)?;
        let seed = r.u64()?;
        let spec: DatasetSpec = toml::from_str(&r.string()?)
            .map_err(|e| Error::format("dataset", format!("spec echo: {e}")))?;
        if spec.seed != seed {
            return Err(Error::format("dataset", "header seed disagrees with spec echo"));
        }
        let count = r.u64()? as usize;
        let (d_src, d_tgt) = (r.u32()? as usize, r.u32()? as usize);
        if d_src != spec.source_dim || d_tgt != spec.target_dim {
            return Err(Error::format("dataset", "record widths disagree with spec echo"));
        }
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let label = r.u32()? as usize;
            let l = r.u32()? as usize;
            let s = r.u32()? as usize;
            let x_src = Tensor::matrix(l, d_src, r.f64s(l * d_src)?)?;
            let x_tgt = Tensor::matrix(s, d_tgt, r.f64s(s * d_tgt)?)?;
            if label >= spec.num_classes {
                return Err(Error::format("dataset", format!("label {label} out of range")));
            }
            samples.push(ModalSample { x_src, x_tgt, label });
        }
        r.finish()?;
        Ok(Self { spec, split, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Read access to paired samples. Evaluation goes through this so target
/// reads can be counted.
pub trait PairedSource {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    fn source(&self, i: usize) -> &Tensor;
    fn target(&self, i: usize) -> &Tensor;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairedSource for Dataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn label(&self, i: usize) -> usize {
        self.samples[i].label
    }

    fn source(&self, i: usize) -> &Tensor {
        &self.samples[i].x_src
    }

    fn target(&self, i: usize) -> &Tensor {
        &self.samples[i].x_tgt
    }
}

/// Wraps a source and counts target-modality reads.
pub struct CountingSource<'a, S: PairedSource + ?Sized> {
    inner: &'a S,
    target_reads: Cell<usize>,
}

impl<'a, S: PairedSource + ?Sized> CountingSource<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Self {
            inner,
            target_reads: Cell::new(0),
        }
    }

    pub fn target_reads(&self) -> usize {
        self.target_reads.get()
    }
}

impl<S: PairedSource + ?Sized> PairedSource for CountingSource<'_, S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn label(&self, i: usize) -> usize {
        self.inner.label(i)
    }

    fn source(&self, i: usize) -> &Tensor {
        self.inner.source(i)
    }

    fn target(&self, i: usize) -> &Tensor {
        self.target_reads.set(self.target_reads.get() + 1);
        self.inner.target(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Source,
    Target,
}

/// Accuracy of a nearest-centroid classifier on the flattened raw sequences
/// of one modality, centroids fitted on `train`.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset, modality: Modality) -> f64 {
    let pick = |s: &ModalSample| -> Vec<f64> {
        match modality {
            Modality::Source => s.x_src.data().to_vec(),
            Modality::Target => s.x_tgt.data().to_vec(),
        }
    };
    let k = train.spec.num_classes;
    let width = train.samples.first().map_or(0, |s| pick(s).len());
    let mut centroids = vec![vec![0.0; width]; k];
    let mut counts = vec![0usize; k];
    for s in &train.samples {
        for (c, v) in centroids[s.label].iter_mut().zip(pick(s)) {
            *c += v;
        }
        counts[s.label] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n > 0 {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let correct = test
        .samples
        .iter()
        .filter(|s| {
            let x = pick(s);
            let best = (0..k)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a].iter().zip(&x).map(|(c, v)| (c - v).powi(2)).sum();
                    let db: f64 = centroids[b].iter().zip(&x).map(|(c, v)| (c - v).powi(2)).sum();
                    da.total_cmp(&db)
                });
            best == Some(s.label)
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
