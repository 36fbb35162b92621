//! Synthetic long-tailed multi-label data, frequency strata and samplers.
//!
//! A dataset is drawn from a seeded *world*: per-class image prototypes
//! stamped at fixed positions, a latent semantic vector per class, and a
//! planted co-occurrence matrix derived from those vectors. The world depends
//! only on the seed, so a train split and a test split generated with the same
//! seed share prototypes and label structure.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::prompts::EmbeddingsFile;
use crate::rng;
use crate::tte;

/// Binary `N × C` label matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    samples: usize,
    classes: usize,
    data: Vec<u8>,
}

impl Labels {
    pub fn new(samples: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != samples * classes {
            return Err(Error::dim("labels", &[samples, classes], &[data.len()]));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::Label {
                row: pos / classes,
                col: pos % classes,
                value: f64::from(data[pos]),
            });
        }
        Ok(Self { samples, classes, data })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::param("ragged label rows"));
        }
        Self::new(rows.len(), classes, rows.concat())
    }

    /// Parses a `{0, 1}`-valued tensor; any other value is a label error.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(n * c);
        for (i, &v) in t.data().iter().enumerate() {
            match v {
                0.0 => data.push(0),
                1.0 => data.push(1),
                value => {
                    return Err(Error::Label {
                        row: i / c,
                        col: i % c,
                        value,
                    })
                }
            }
        }
        Self::new(n, c, data)
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.data[r * self.classes..(r + 1) * self.classes]
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.classes + c] == 1
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn column_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for r in 0..self.samples {
            for (c, &v) in self.row(r).iter().enumerate() {
                counts[c] += usize::from(v);
            }
        }
        counts
    }

    pub fn select(&self, indices: &[usize]) -> Labels {
        let mut data = Vec::with_capacity(indices.len() * self.classes);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Labels {
            samples: indices.len(),
            classes: self.classes,
            data,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.samples, self.classes],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("label shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × H × W × 3`
    pub images: Tensor,
    pub labels: Labels,
    pub class_counts: Vec<usize>,
    pub split: Split,
    pub seed: u64,
    pub imbalance_ratio: f64,
    pub snr: f64,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Labels, split: Split, seed: u64) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[3] != 3 || s[0] != labels.samples() {
            return Err(Error::dim("dataset", s, &[labels.samples(), 0, 0, 3]));
        }
        if let Some(r) = (0..labels.samples()).find(|&r| labels.row(r).iter().all(|&v| v == 0)) {
            return Err(Error::Contract(format!("sample {r} has no positive label")));
        }
        Ok(Self {
            class_counts: labels.column_counts(),
            images,
            labels,
            split,
            seed,
            imbalance_ratio: 1.0,
            snr: f64::INFINITY,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.samples()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.labels.classes()
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    /// Copy of image `i` as `H × W × 3`.
    pub fn image(&self, i: usize) -> Tensor {
        let (h, w) = self.image_size();
        let n = h * w * 3;
        Tensor::new(vec![h, w, 3], self.images.data()[i * n..(i + 1) * n].to_vec()).expect("image shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub classes: usize,
    pub samples: usize,
    pub imbalance_ratio: f64,
    pub snr: f64,
    pub seed: u64,
    pub image_size: usize,
    pub split: Split,
    /// Largest per-instance displacement of a class pattern, in pixels.
    pub jitter: usize,
}

impl GenerateConfig {
    pub fn new(classes: usize, samples: usize, imbalance_ratio: f64, snr: f64, seed: u64) -> Self {
        Self {
            classes,
            samples,
            imbalance_ratio,
            snr,
            seed,
            image_size: 32,
            split: Split::Train,
            jitter: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 3 {
            return Err(Error::param(format!("need at least 3 classes, got {}", self.classes)));
        }
        if self.samples < self.classes {
            return Err(Error::param(format!(
                "N = {} is smaller than C = {}",
                self.samples, self.classes
            )));
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return Err(Error::param(format!("imbalance ratio must be ≥ 1, got {}", self.imbalance_ratio)));
        }
        if !(self.snr > 0.0) {
            return Err(Error::param(format!("snr must be positive, got {}", self.snr)));
        }
        if self.image_size < 4 {
            return Err(Error::param("image size must be at least 4"));
        }
        if self.jitter > self.image_size / 4 {
            return Err(Error::param(format!(
                "jitter {} exceeds the pattern size {}",
                self.jitter,
                self.image_size / 4
            )));
        }
        Ok(())
    }
}

fn decay_rate(classes: usize, imbalance_ratio: f64) -> f64 {
    imbalance_ratio.ln() / (classes - 1) as f64
}

/// `round(n₁·exp(−λ(c−1)))` with `λ = ln(ratio)/(C−1)`, never below 1.
pub fn target_profile(classes: usize, head_count: f64, imbalance_ratio: f64) -> Vec<usize> {
    let lambda = decay_rate(classes, imbalance_ratio);
    (0..classes)
        .map(|c| ((head_count * (-lambda * c as f64).exp()).round() as usize).max(1))
        .collect()
}

/// Target per-class frequencies with `n₁` chosen so they sum to about `N`.
pub fn target_counts(classes: usize, samples: usize, imbalance_ratio: f64) -> Vec<usize> {
    let lambda = decay_rate(classes, imbalance_ratio);
    let mass: f64 = (0..classes).map(|c| (-lambda * c as f64).exp()).sum();
    target_profile(classes, samples as f64 / mass, imbalance_ratio)
}

const LATENT_DIM: usize = 8;
const COOCCUR_MAX: f64 = 0.6;
/// Damping for adding a rarer class to a more frequent seed class.
const RARER_DAMPING: f64 = 0.1;

/// The seeded generative structure shared by all splits.
#[derive(Clone, Debug)]
pub struct World {
    pub classes: usize,
    pub image_size: usize,
    pub patch: usize,
    /// Latent semantic vector per class, `C × 8`.
    pub semantics: Tensor,
    /// `cooccurrence[i][j]`: probability of adding class `j` to a sample seeded by `i`.
    pub cooccurrence: Tensor,
    /// Prototype patterns, each `patch × patch × 3`.
    pub prototypes: Vec<Tensor>,
    /// Top-left `(row, col)` of each prototype stamp.
    pub locations: Vec<(usize, usize)>,
}

impl World {
    pub fn new(classes: usize, image_size: usize, seed: u64) -> Self {
        let groups = (classes / 4).max(2);
        let mut r = rng::stream(seed, "world.semantics", 0);
        let centers = rng::normal(&mut r, &[groups, LATENT_DIM], 1.0);
        let noise = rng::normal(&mut r, &[classes, LATENT_DIM], 0.35);
        let mut sem = Tensor::zeros(&[classes, LATENT_DIM]);
        for c in 0..classes {
            let g = c % groups;
            for k in 0..LATENT_DIM {
                sem.data_mut()[c * LATENT_DIM + k] = centers.get(g, k) + noise.get(c, k);
            }
        }
        let unit = sem.row_l2_normalize().expect("nonzero latent");
        let sim = unit.matmul(&unit.transpose().expect("matrix")).expect("square");
        let mut co = Tensor::zeros(&[classes, classes]);
        for i in 0..classes {
            for j in 0..classes {
                if i == j {
                    continue;
                }
                let s = sim.get(i, j).max(0.0);
                let damp = if j < i { 1.0 } else { RARER_DAMPING };
                co.data_mut()[i * classes + j] = COOCCUR_MAX * s * s * damp;
            }
        }

        let patch = (image_size / 4).max(2);
        let mut prototypes = Vec::with_capacity(classes);
        let mut locations = Vec::with_capacity(classes);
        for c in 0..classes {
            let mut r = rng::stream(seed, "world.prototype", c as u64);
            // random signs on a coarse grid, bilinearly upsampled so the
            // pattern stays recognisable under small rescaling
            let coarse = (patch / 2).max(2);
            let data = (0..coarse * coarse * 3)
                .map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            let grid = Tensor::new(vec![coarse, coarse, 3], data).expect("prototype grid");
            prototypes.push(tte::resize(&grid, patch).expect("prototype resize"));
            let span = image_size - patch + 1;
            locations.push((r.random_range(0..span), r.random_range(0..span)));
        }
        Self {
            classes,
            image_size,
            patch,
            semantics: sem,
            cooccurrence: co,
            prototypes,
            locations,
        }
    }

    /// Noise-free image for a label set.
    pub fn render(&self, labels: &[u8]) -> Tensor {
        self.render_shifted(labels, &vec![(0, 0); self.classes])
    }

    /// Renders with each class instance displaced by `shifts[c]`, clamped to
    /// the canvas.
    pub fn render_shifted(&self, labels: &[u8], shifts: &[(i64, i64)]) -> Tensor {
        let s = self.image_size;
        let max = (s - self.patch) as i64;
        let mut img = Tensor::zeros(&[s, s, 3]);
        for (c, _) in labels.iter().enumerate().filter(|(_, &y)| y == 1) {
            let (r0, c0) = self.locations[c];
            let r0 = (r0 as i64 + shifts[c].0).clamp(0, max) as usize;
            let c0 = (c0 as i64 + shifts[c].1).clamp(0, max) as usize;
            let proto = &self.prototypes[c];
            for i in 0..self.patch {
                for j in 0..self.patch {
                    for ch in 0..3 {
                        let dst = ((r0 + i) * s + (c0 + j)) * 3 + ch;
                        img.data_mut()[dst] += proto.data()[(i * self.patch + j) * 3 + ch];
                    }
                }
            }
        }
        img
    }

    /// Class embeddings of width `dim` whose cosine structure follows the
    /// planted semantics; a stand-in for language-model class priors.
    pub fn class_embeddings(&self, dim: usize, seed: u64) -> EmbeddingsFile {
        let proj = rng::normal(&mut rng::stream(seed, "world.embed", 0), &[LATENT_DIM, dim], 1.0);
        let emb = self.semantics.matmul(&proj).expect("projection");
        EmbeddingsFile {
            classes: (0..self.classes).map(|c| format!("class_{c:02}")).collect(),
            dim,
            embeddings: (0..self.classes).map(|c| emb.row(c).to_vec()).collect(),
        }
    }
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64], total: f64) -> usize {
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

pub fn generate(cfg: &GenerateConfig) -> Result<Dataset> {
    cfg.validate()?;
    let world = World::new(cfg.classes, cfg.image_size, cfg.seed);
    let targets = target_counts(cfg.classes, cfg.samples, cfg.imbalance_ratio);
    let weights: Vec<f64> = targets.iter().map(|&n| n as f64).collect();
    let total: f64 = weights.iter().sum();

    let split_tag = match cfg.split {
        Split::Train => "split.train",
        Split::Test => "split.test",
    };
    let mut r = rng::stream(cfg.seed, split_tag, 0);
    let c = cfg.classes;
    let mut labels = vec![0u8; cfg.samples * c];
    for k in 0..cfg.samples {
        let row = &mut labels[k * c..(k + 1) * c];
        let seed_class = sample_weighted(&mut r, &weights, total);
        row[seed_class] = 1;
        for (j, slot) in row.iter_mut().enumerate() {
            if j != seed_class && r.random::<f64>() < world.cooccurrence.get(seed_class, j) {
                *slot = 1;
            }
        }
    }
    let labels = Labels::new(cfg.samples, c, labels)?;

    let s = cfg.image_size;
    let per = s * s * 3;
    let noise_std = 1.0 / cfg.snr;
    let mut noise_rng = rng::stream(cfg.seed, split_tag, 1);
    let mut shift_rng = rng::stream(cfg.seed, split_tag, 2);
    let j = cfg.jitter as i64;
    let mut images = Vec::with_capacity(cfg.samples * per);
    for k in 0..cfg.samples {
        let shifts: Vec<(i64, i64)> = (0..c)
            .map(|_| (shift_rng.random_range(-j..=j), shift_rng.random_range(-j..=j)))
            .collect();
        let clean = world.render_shifted(labels.row(k), &shifts);
        let noise = rng::normal(&mut noise_rng, &[per], noise_std);
        // stored at f32 precision so the on-disk format round-trips exactly
        images.extend(clean.data().iter().zip(noise.data()).map(|(a, b)| f64::from((a + b) as f32)));
    }
    let images = Tensor::new(vec![cfg.samples, s, s, 3], images)?;
    let mut ds = Dataset::new(images, labels, cfg.split, cfg.seed)?;
    ds.imbalance_ratio = cfg.imbalance_ratio;
    ds.snr = cfg.snr;
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Head,
    Medium,
    Tail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratification {
    pub head_min: usize,
    pub tail_max: usize,
    pub assignment: Vec<Group>,
}

impl Stratification {
    pub fn members(&self, group: Group) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == group)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Head if `n > head_min`, tail if `n < tail_max`, medium otherwise.
pub fn stratify(class_counts: &[usize], head_min: usize, tail_max: usize) -> Result<Stratification> {
    if head_min == 0 || tail_max == 0 {
        return Err(Error::param("stratification thresholds must be positive"));
    }
    if tail_max > head_min {
        return Err(Error::param(format!("tail_max {tail_max} exceeds head_min {head_min}")));
    }
    let assignment = class_counts
        .iter()
        .map(|&n| {
            if n > head_min {
                Group::Head
            } else if n < tail_max {
                Group::Tail
            } else {
                Group::Medium
            }
        })
        .collect();
    Ok(Stratification {
        head_min,
        tail_max,
        assignment,
    })
}

/// Draws a class uniformly, then one of its positive instances uniformly.
#[derive(Clone, Debug)]
pub struct ClassAwareSampler {
    per_class: Vec<Vec<usize>>,
}

impl ClassAwareSampler {
    pub fn new(labels: &Labels) -> Result<Self> {
        let mut per_class = vec![Vec::new(); labels.classes()];
        for r in 0..labels.samples() {
            for (c, &v) in labels.row(r).iter().enumerate() {
                if v == 1 {
                    per_class[c].push(r);
                }
            }
        }
        if let Some(class) = per_class.iter().position(Vec::is_empty) {
            return Err(Error::Frequency { class });
        }
        Ok(Self { per_class })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let c = rng.random_range(0..self.per_class.len());
        let pool = &self.per_class[c];
        (c, pool[rng.random_range(0..pool.len())])
    }

    pub fn batch(&self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..size).map(|_| self.draw(rng).1).collect()
    }
}

pub fn class_aware_batch(ds: &Dataset, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if batch == 0 {
        return Err(Error::param("batch must be at least 1"));
    }
    Ok(ClassAwareSampler::new(&ds.labels)?.batch(batch, rng))
}

const MAGIC: &[u8; 4] = b"LTML";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub imbalance_ratio: f64,
    pub class_counts: Vec<usize>,
    pub snr: f64,
    pub split: Split,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes the binary dataset and its `<path>.json` manifest.
pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = ds.image_size();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&DATASET_FORMAT_VERSION.to_le_bytes())?;
    for v in [ds.len(), h, w, ds.classes()] {
        let v = u32::try_from(v).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(ds.labels.as_bytes())?;
    for &v in ds.images.data() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    let manifest = DatasetManifest {
        seed: ds.seed,
        imbalance_ratio: ds.imbalance_ratio,
        class_counts: ds.class_counts.clone(),
        snr: ds.snr,
        split: ds.split,
    };
    std::fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("dataset file is truncated".into()),
        _ => e.into(),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{} is not an LTML dataset", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let [n, h, w, c] = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?].map(|v| v as usize);
    let mut labels = vec![0u8; n * c];
    read_exact(&mut r, &mut labels)?;
    let labels = Labels::new(n, c, labels)?;
    let mut raw = vec![0u8; n * h * w * 3 * 4];
    read_exact(&mut r, &mut raw)?;
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after the image block".into()));
    }
    let images = raw
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    let images = Tensor::new(vec![n, h, w, 3], images)?;

    let manifest: Option<DatasetManifest> = match std::fs::read_to_string(manifest_path(path)) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let (split, seed) = manifest.as_ref().map_or((Split::Train, 0), |m| (m.split, m.seed));
    let mut ds = Dataset::new(images, labels, split, seed)?;
    if let Some(m) = manifest {
        if m.class_counts != ds.class_counts {
            return Err(Error::Format("manifest class_counts disagree with labels".into()));
        }
        ds.imbalance_ratio = m.imbalance_ratio;
        ds.snr = m.snr;
    }
    Ok(ds)
}
