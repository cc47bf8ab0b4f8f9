//! Dataset ingestion: MNIST IDX, CSV, seeded Gaussian blobs and pre-binned
//! event frames stored in the checkpoint container.

use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use flate2::read::GzDecoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use trevsnn_core::network::NetworkConfig;
use trevsnn_core::Tensor;

use crate::checkpoint::read_container;
use crate::config::{DatasetKind, DatasetSpec};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Samples stored contiguously as `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub sample_shape: [usize; 3],
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, sample_shape: [usize; 3]) -> Result<Self> {
        let per = sample_shape.iter().product::<usize>();
        ensure!(
            per > 0 && images.len() == labels.len() * per,
            "{} values do not form {} samples of shape {:?}",
            images.len(),
            labels.len(),
            sample_shape
        );
        Ok(Self {
            images,
            labels,
            sample_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn truncate(&mut self, n: usize) {
        if n > 0 && n < self.len() {
            self.labels.truncate(n);
            self.images.truncate(n * self.sample_len());
        }
    }

    /// Gathers the given sample indices into one batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.sample_shape;
        let x = Tensor::new(vec![idx.len(), c, h, w], data).expect("batch shape is consistent");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Translates each sample of a batch by `(dy, dx)` pixels, replicating the border.
    pub fn shift_batch(&self, x: &mut Tensor<f32>, shifts: &[(i64, i64)]) {
        let [c, h, w] = self.sample_shape;
        let plane = h * w;
        let mut buf = vec![0.0f32; plane];
        for (sample, &(dy, dx)) in x.data_mut().chunks_mut(c * plane).zip(shifts) {
            if (dy, dx) == (0, 0) {
                continue;
            }
            for ch in sample.chunks_mut(plane) {
                for (i, out) in buf.iter_mut().enumerate() {
                    let y = (i / w) as i64 - dy;
                    let xx = (i % w) as i64 - dx;
                    *out = ch[y.clamp(0, h as i64 - 1) as usize * w
                        + xx.clamp(0, w as i64 - 1) as usize];
                }
                ch.copy_from_slice(&buf);
            }
        }
    }

    pub fn normalize(&mut self, mean: f64, std: f64) {
        if mean != 0.0 || std != 1.0 {
            let (m, s) = (mean as f32, std as f32);
            self.images.iter_mut().for_each(|x| *x = (*x - m) / s);
        }
    }

    /// Checks the split against the network's input geometry and class count.
    pub fn check(&self, config: &NetworkConfig) -> Result<()> {
        let [c, h, w] = self.sample_shape;
        ensure!(
            (h, w) == (config.in_height, config.in_width),
            "samples are {h}x{w}, the network expects {}x{}",
            config.in_height,
            config.in_width
        );
        let frames = config.timesteps * config.in_channels;
        let ok = c == config.in_channels || (!config.grouped_encoding && c == frames);
        ensure!(
            ok,
            "samples have {c} channels, the network expects {} (or {frames} frames)",
            config.in_channels
        );
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= config.num_classes) {
            bail!("label {bad} is outside [0, {})", config.num_classes);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .with_context(|| format!("decompressing {}", path.display()))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes.get(at..at + 4).context("truncated IDX header")?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX3 image file into `[0, 1]` pixels and returns `(pixels, n, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize, usize)> {
    let magic = be_u32(bytes, 0)?;
    ensure!(
        magic == IDX_IMAGES_MAGIC,
        "bad IDX image magic {magic:#010x}"
    );
    let (n, rows, cols) = (
        be_u32(bytes, 4)? as usize,
        be_u32(bytes, 8)? as usize,
        be_u32(bytes, 12)? as usize,
    );
    let body = &bytes[16..];
    ensure!(
        body.len() == n * rows * cols,
        "IDX image payload has {} bytes, header promises {}",
        body.len(),
        n * rows * cols
    );
    Ok((
        body.iter().map(|&p| p as f32 / 255.0).collect(),
        n,
        rows,
        cols,
    ))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    ensure!(
        magic == IDX_LABELS_MAGIC,
        "bad IDX label magic {magic:#010x}"
    );
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    ensure!(
        body.len() == n,
        "IDX label payload has {} bytes, header promises {n}",
        body.len()
    );
    Ok(body.iter().map(|&l| l as usize).collect())
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    bail!("{stem}[.gz] not found in {}", dir.display())
}

pub fn mnist_dir(spec: &DatasetSpec) -> PathBuf {
    if !spec.dir.as_os_str().is_empty() {
        return spec.dir.clone();
    }
    std::env::var_os("TREVSNN_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

pub fn load_mnist_split(dir: &Path, prefix: &str) -> Result<Dataset> {
    let images = read_maybe_gz(&find_idx(dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = read_maybe_gz(&find_idx(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
    let (pixels, n, rows, cols) = parse_idx_images(&images)?;
    let labels = parse_idx_labels(&labels)?;
    ensure!(labels.len() == n, "{n} images but {} labels", labels.len());
    Dataset::new(pixels, labels, [1, rows, cols])
}

/// One sample per line: `label,v0,v1,...`. A non-numeric first line is a header.
pub fn parse_csv(text: &str, sample_shape: [usize; 3]) -> Result<Dataset> {
    let per = sample_shape.iter().product::<usize>();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first = fields.next().unwrap_or_default();
        let Ok(label) = first.parse::<usize>() else {
            if ln == 0 {
                continue;
            }
            bail!(
                "line {}: label {first:?} is not a non-negative integer",
                ln + 1
            );
        };
        let before = images.len();
        for f in fields {
            images.push(
                f.parse::<f32>()
                    .with_context(|| format!("line {}: bad value {f:?}", ln + 1))?,
            );
        }
        ensure!(
            images.len() - before == per,
            "line {}: {} values, expected {per}",
            ln + 1,
            images.len() - before
        );
        labels.push(label);
    }
    Dataset::new(images, labels, sample_shape)
}

/// Gaussian blobs: one random centre per class, samples scattered around it.
pub fn synthetic_blobs(
    n: usize,
    classes: usize,
    sample_shape: [usize; 3],
    separation: f64,
    noise: f64,
    seed: u64,
    split: u64,
) -> Result<Dataset> {
    let per = sample_shape.iter().product::<usize>();
    let mut centre_rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..per)
                .map(|_| separation * Distribution::<f64>::sample(&StandardNormal, &mut centre_rng))
                .collect::<Vec<f64>>()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + split));
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        for &c in &centres[k] {
            let z: f64 = StandardNormal.sample(&mut rng);
            images.push((c + noise * z) as f32);
        }
        labels.push(k);
    }
    Dataset::new(images, labels, sample_shape)
}

/// Event frames: a container with `frames` `[N, T*C, H, W]` and `labels` `[N]`.
pub fn load_event_frames(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (_, entries) = read_container(&bytes)?;
    let get = |name: &str| {
        entries
            .iter()
            .find(|e| e.name == name)
            .with_context(|| format!("{} has no {name:?} entry", path.display()))
    };
    let frames = get("frames")?;
    let labels = get("labels")?;
    ensure!(
        frames.shape.len() == 4,
        "frames must be [N, T*C, H, W], got {:?}",
        frames.shape
    );
    ensure!(labels.shape == [frames.shape[0]], "labels must be [N]");
    let labels = labels
        .data
        .iter()
        .map(|&l| {
            ensure!(
                l >= 0.0 && l.fract() == 0.0,
                "label {l} is not a class index"
            );
            Ok(l as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        frames.data.clone(),
        labels,
        [frames.shape[1], frames.shape[2], frames.shape[3]],
    )
}

/// Loads, truncates, normalizes and validates both splits.
pub fn load_splits(spec: &DatasetSpec, config: &NetworkConfig, seed: u64) -> Result<Splits> {
    let shape = [config.in_channels, config.in_height, config.in_width];
    let (mut train, mut test) = match spec.kind {
        DatasetKind::MnistIdx => {
            let dir = mnist_dir(spec);
            (
                load_mnist_split(&dir, "train")?,
                load_mnist_split(&dir, "t10k")?,
            )
        }
        DatasetKind::Csv => {
            let read = |p: &Path| {
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
            };
            (
                parse_csv(&read(&spec.train)?, shape)?,
                parse_csv(&read(&spec.test)?, shape)?,
            )
        }
        DatasetKind::Synthetic => {
            let s = &spec.synthetic;
            let make = |n, split| {
                synthetic_blobs(
                    n,
                    config.num_classes,
                    shape,
                    s.separation,
                    s.noise,
                    seed,
                    split,
                )
            };
            (make(s.train_samples, 0)?, make(s.test_samples, 1)?)
        }
        DatasetKind::EventFrames => (
            load_event_frames(&spec.train)?,
            load_event_frames(&spec.test)?,
        ),
    };
    ensure!(
        train.sample_shape == test.sample_shape,
        "train samples are {:?} but test samples are {:?}",
        train.sample_shape,
        test.sample_shape
    );
    train.truncate(spec.train_limit);
    test.truncate(spec.test_limit);
    ensure!(
        !train.is_empty() && !test.is_empty(),
        "both splits need at least one sample"
    );
    for d in [&mut train, &mut test] {
        d.normalize(spec.mean, spec.std);
        d.check(config)?;
    }
    Ok(Splits { train, test })
}
