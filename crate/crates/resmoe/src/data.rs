//! Dataset ingestion: the CIFAR-100 binary layout, a synthetic clustered
//! generator for specialization experiments, and seeded batching.
//!
//! Images are stored as f64 in [0, 1]; the training precision conversion
//! happens at batch-gather time so both precisions read identical bytes.

use std::path::Path;

use resmoe_core::rng::SeedRng;
use resmoe_core::scalar::Scalar;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Bytes per CIFAR-100 binary record: coarse label, fine label, 32*32*3
/// channel-major pixels.
pub const CIFAR_RECORD_BYTES: usize = 3074;
pub const CIFAR_RESOLUTION: usize = 32;
pub const CIFAR_CLASSES: usize = 100;

/// Per-channel normalization constants for CIFAR-100 (widely used values).
pub const CIFAR_MEAN: [f64; 3] = [0.5071, 0.4865, 0.4409];
pub const CIFAR_STD: [f64; 3] = [0.2673, 0.2564, 0.2762];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Cifar100,
    Synthetic,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// [n, 3, h, w] row-major, values in [0, 1] (or normalized, see
    /// [`Normalize`]).
    pub images: Vec<f64>,
    pub fine_labels: Vec<usize>,
    pub coarse_labels: Option<Vec<usize>>,
    pub class_names: Vec<String>,
    pub num_classes: usize,
    pub resolution: (usize, usize),
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.fine_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine_labels.is_empty()
    }

    pub fn image_values(&self) -> usize {
        3 * self.resolution.0 * self.resolution.1
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.images.len() != n * self.image_values() {
            return Err(Error::Data(format!(
                "{} pixel values for {} images of {} values each",
                self.images.len(),
                n,
                self.image_values()
            )));
        }
        if let Some(l) = self.fine_labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Data(format!(
                "label {l} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Keep only the samples whose label passes the filter, remapping
    /// labels to a dense 0..m range in ascending original order.
    pub fn filter_classes(&self, keep: &[usize]) -> Dataset {
        let mut sorted = keep.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let remap: std::collections::HashMap<usize, usize> =
            sorted.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let iv = self.image_values();
        let mut images = Vec::new();
        let mut fine = Vec::new();
        let mut coarse = self.coarse_labels.as_ref().map(|_| Vec::new());
        for (i, &l) in self.fine_labels.iter().enumerate() {
            if let Some(&nl) = remap.get(&l) {
                images.extend_from_slice(&self.images[i * iv..(i + 1) * iv]);
                fine.push(nl);
                if let (Some(c), Some(src)) = (coarse.as_mut(), self.coarse_labels.as_ref()) {
                    c.push(src[i]);
                }
            }
        }
        Dataset {
            images,
            fine_labels: fine,
            coarse_labels: coarse,
            class_names: sorted
                .iter()
                .map(|&c| {
                    self.class_names
                        .get(c)
                        .cloned()
                        .unwrap_or_else(|| format!("class{c}"))
                })
                .collect(),
            num_classes: sorted.len(),
            resolution: self.resolution,
            provenance: self.provenance,
        }
    }
}

/// Decode a CIFAR-100 binary file (`train.bin` / `test.bin`).
pub fn load_cifar100_binary(path: &Path) -> Result<Dataset> {
    decode_cifar100(&std::fs::read(path)?)
}

pub fn decode_cifar100(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Data(format!(
            "corrupt CIFAR-100 file: {} bytes is not a multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(n * 3072);
    let mut fine = Vec::with_capacity(n);
    let mut coarse = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * CIFAR_RECORD_BYTES..(r + 1) * CIFAR_RECORD_BYTES];
        if rec[0] as usize >= 20 && rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Data(format!(
                "record {r}: coarse label {} out of range",
                rec[0]
            )));
        }
        if rec[1] as usize >= CIFAR_CLASSES {
            return Err(Error::Data(format!(
                "record {r}: fine label {} out of range",
                rec[1]
            )));
        }
        coarse.push(rec[0] as usize);
        fine.push(rec[1] as usize);
        images.extend(rec[2..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Dataset {
        images,
        fine_labels: fine,
        coarse_labels: Some(coarse),
        class_names: (0..CIFAR_CLASSES).map(|c| format!("class{c}")).collect(),
        num_classes: CIFAR_CLASSES,
        resolution: (CIFAR_RESOLUTION, CIFAR_RESOLUTION),
        provenance: Provenance::Cifar100,
    })
}

/// Re-encode a decoded CIFAR dataset into the binary layout (round-trip
/// testing; pixel values must still be exact multiples of 1/255).
pub fn encode_cifar100(ds: &Dataset) -> Result<Vec<u8>> {
    let coarse = ds
        .coarse_labels
        .as_ref()
        .ok_or_else(|| Error::Data("encode: missing coarse labels".into()))?;
    let iv = ds.image_values();
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_BYTES);
    for i in 0..ds.len() {
        out.push(coarse[i] as u8);
        out.push(ds.fine_labels[i] as u8);
        for &v in &ds.images[i * iv..(i + 1) * iv] {
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Invertible per-channel standardization.
#[derive(Debug, Clone, Copy)]
pub struct Normalize {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalize {
    pub fn cifar100() -> Self {
        Self {
            mean: CIFAR_MEAN,
            std: CIFAR_STD,
        }
    }

    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        self.map(ds, |v, m, s| (v - m) / s);
    }

    pub fn invert(&self, ds: &mut Dataset) {
        self.map(ds, |v, m, s| v * s + m);
    }

    fn map(&self, ds: &mut Dataset, f: impl Fn(f64, f64, f64) -> f64) {
        let hw = ds.resolution.0 * ds.resolution.1;
        for img in ds.images.chunks_mut(3 * hw) {
            for c in 0..3 {
                for v in &mut img[c * hw..(c + 1) * hw] {
                    *v = f(*v, self.mean[c], self.std[c]);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub classes_per_domain: usize,
    pub samples_per_class: usize,
    pub resolution: usize,
}

/// Clustered synthetic images: each domain owns a hue and a stripe
/// frequency (global statistics a gate can read off channel means), classes
/// within a domain differ by the position of a bright square. Pure in the
/// seed.
pub fn synthetic_clustered_dataset(seed: u64, spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_domains < 1
        || spec.classes_per_domain < 1
        || spec.samples_per_class < 1
        || spec.resolution < 8
    {
        return Err(Error::Data(format!(
            "synthetic spec parameters must be >= 1 (resolution >= 8): {spec:?}"
        )));
    }
    let d = spec.num_domains;
    let cpd = spec.classes_per_domain;
    let res = spec.resolution;
    let num_classes = d * cpd;
    let n = num_classes * spec.samples_per_class;
    let hw = res * res;

    let mut images = Vec::with_capacity(n * 3 * hw);
    let mut labels = Vec::with_capacity(n);
    // 3x3 anchor grid for the class square; classes cycle through it
    let sq = (res / 4).max(2);
    let grid = |slot: usize| -> (usize, usize) {
        let row = (slot / 3) % 3;
        let col = slot % 3;
        let span = res - sq - 2;
        (1 + row * span / 2, 1 + col * span / 2)
    };

    for label in 0..num_classes {
        let dom = label / cpd;
        let cls = label % cpd;
        let theta = core::f64::consts::TAU * dom as f64 / d as f64;
        let base = [
            0.5 + 0.42 * theta.cos(),
            0.5 + 0.42 * (theta - core::f64::consts::TAU / 3.0).cos(),
            0.5 + 0.42 * (theta + core::f64::consts::TAU / 3.0).cos(),
        ];
        let freq = 1.0 + dom as f64;
        let (ay, ax) = grid(cls);
        for s in 0..spec.samples_per_class {
            let mut rng = SeedRng::new(seed).derive((label as u64) << 20 | s as u64);
            let jy = rng.uniform_usize(3);
            let jx = rng.uniform_usize(3);
            let y0 = (ay + jy).min(res - sq);
            let x0 = (ax + jx).min(res - sq);
            for c in 0..3 {
                for y in 0..res {
                    for x in 0..res {
                        let stripe =
                            0.85 + 0.15 * (core::f64::consts::TAU * freq * y as f64 / res as f64).sin();
                        let mut v = base[c] * stripe;
                        if y >= y0 && y < y0 + sq && x >= x0 && x < x0 + sq {
                            // square takes the complementary color
                            v = 1.0 - base[c];
                        }
                        v += rng.uniform_range(-0.03, 0.03);
                        images.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(label);
        }
    }

    let ds = Dataset {
        images,
        fine_labels: labels,
        coarse_labels: Some((0..num_classes).flat_map(|l| vec![l / cpd; spec.samples_per_class]).collect()),
        class_names: (0..num_classes)
            .map(|l| format!("d{}c{}", l / cpd, l % cpd))
            .collect(),
        num_classes,
        resolution: (res, res),
        provenance: Provenance::Synthetic,
    };
    ds.validate()?;
    Ok(ds)
}

/// Fixed generation seeds so every run (and every sweep seed) sees the
/// same data; training randomness comes only from the run seed.
pub const TRAIN_DATA_SEED: u64 = 0xda7a;
pub const EVAL_DATA_SEED: u64 = 0xe7a1;

/// Materialize the (train, eval) datasets a config describes.
pub fn load_datasets(cfg: &crate::config::RunConfig) -> Result<(Dataset, Dataset)> {
    use crate::config::DataSource;
    match cfg.data.source {
        DataSource::Synthetic => {
            let train = synthetic_clustered_dataset(
                TRAIN_DATA_SEED,
                &cfg.synthetic_spec(cfg.data.samples_per_class),
            )?;
            let eval = synthetic_clustered_dataset(
                EVAL_DATA_SEED,
                &cfg.synthetic_spec(cfg.data.eval_samples_per_class),
            )?;
            Ok((train, eval))
        }
        DataSource::Cifar100 => {
            let dir = cfg
                .data
                .path
                .as_ref()
                .ok_or_else(|| Error::Data("cifar100 requires data.path".into()))?;
            let norm = Normalize::cifar100();
            let mut train = load_cifar100_binary(&dir.join("train.bin"))?;
            let mut eval = load_cifar100_binary(&dir.join("test.bin"))?;
            norm.apply(&mut train);
            norm.apply(&mut eval);
            Ok((train, eval))
        }
    }
}

/// Index batches for one epoch: seeded permutation (or storage order), the
/// final partial batch included.
pub fn epoch_batches(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::Data("batch_size must be >= 1".into()));
    }
    let order: Vec<usize> = if shuffle {
        SeedRng::new(seed).derive(0x0b17c4 ^ epoch as u64).permutation(n)
    } else {
        (0..n).collect()
    };
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Materialize a batch in training precision. With `augment`, applies the
/// standard pad-4 random crop + horizontal flip, seeded by `aug_rng`.
pub fn gather<S: Scalar>(
    ds: &Dataset,
    indices: &[usize],
    augment: bool,
    aug_rng: Option<&mut SeedRng>,
) -> Result<(Vec<S>, Vec<usize>)> {
    let iv = ds.image_values();
    let (h, w) = ds.resolution;
    let mut out = Vec::with_capacity(indices.len() * iv);
    let mut labels = Vec::with_capacity(indices.len());
    let mut rng = aug_rng;
    for &i in indices {
        if i >= ds.len() {
            return Err(Error::Data(format!(
                "index {i} out of range for {} samples",
                ds.len()
            )));
        }
        let img = &ds.images[i * iv..(i + 1) * iv];
        if augment {
            let rng = rng.as_deref_mut().ok_or_else(|| {
                Error::Data("augmentation requested without an rng".into())
            })?;
            let dy = rng.uniform_usize(9);
            let dx = rng.uniform_usize(9);
            let flip = rng.uniform() < 0.5;
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        // sample from the pad-4 canvas; outside -> 0
                        let sy = y + dy;
                        let sx = x + dx;
                        let v = if sy < 4 || sx < 4 || sy >= h + 4 || sx >= w + 4 {
                            0.0
                        } else {
                            let sx = if flip { w - 1 - (sx - 4) } else { sx - 4 };
                            img[(c * h + (sy - 4)) * w + sx]
                        };
                        out.push(S::from_f64(v));
                    }
                }
            }
        } else {
            out.extend(img.iter().map(|&v| S::from_f64(v)));
        }
        labels.push(ds.fine_labels[i]);
    }
    Ok((out, labels))
}
