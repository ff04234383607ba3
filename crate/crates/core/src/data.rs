//! Labeled image datasets stored as three `ODT1` containers in a directory:
//! `features.odt` (float `[N, C, H, W]`), `labels.odt` (u8 `[N]`) and
//! `split.odt` (u8 `[N]`, 0 = train, 1 = validation).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_container, write_float_tensor, write_u8_tensor, Float, Stored, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[C, H, W]` of one sample.
    pub shape: [usize; 3],
    pub features: Vec<Float>,
    pub labels: Vec<u8>,
    pub split: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    pub fn sample_size(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        let flag = match split {
            Split::Train => 0,
            Split::Val => 1,
        };
        (0..self.len()).filter(|&i| self.split[i] == flag).collect()
    }

    /// Gathers samples into a `[B, C, H, W]` tensor and their labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.sample_size();
        let mut data = Vec::with_capacity(idx.len() * s);
        for &i in idx {
            data.extend_from_slice(&self.features[i * s..(i + 1) * s]);
        }
        let shape = [idx.len(), self.shape[0], self.shape[1], self.shape[2]];
        let x = Tensor::new(&shape, data).expect("batch shape matches data");
        (x, idx.iter().map(|&i| self.labels[i] as usize).collect())
    }

    /// Consecutive batches over `idx`.
    pub fn batches<'a>(&'a self, idx: &'a [usize], size: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + 'a {
        idx.chunks(size.max(1)).map(move |c| self.batch(c))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let n = self.len();
        let write = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> Result<()>| -> Result<()> {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            f(&mut w)?;
            w.flush()?;
            Ok(())
        };
        let shape = [n, self.shape[0], self.shape[1], self.shape[2]];
        write("features.odt", &|w| write_float_tensor(w, &shape, &self.features))?;
        write("labels.odt", &|w| write_u8_tensor(w, &[n], &self.labels))?;
        write("split.odt", &|w| write_u8_tensor(w, &[n], &self.split))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let read = |name: &str| -> Result<Stored> {
            let path = dir.join(name);
            let f = File::open(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            read_container(&mut BufReader::new(f)).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
                other => other,
            })
        };
        let (fshape, features) = match read("features.odt")? {
            Stored::Float { shape, data } => (shape, data),
            Stored::U8 { .. } => return Err(Error::Format("features.odt must hold floats".into())),
        };
        let u8s = |name: &str| -> Result<(Vec<usize>, Vec<u8>)> {
            match read(name)? {
                Stored::U8 { shape, data } => Ok((shape, data)),
                Stored::Float { .. } => Err(Error::Format(format!("{name} must hold u8 values"))),
            }
        };
        let (lshape, labels) = u8s("labels.odt")?;
        let (sshape, split) = u8s("split.odt")?;
        let [n, c, h, w] = fshape[..] else {
            return Err(Error::Format(format!("features must be [N,C,H,W], got {fshape:?}")));
        };
        if lshape != [n] || sshape != [n] {
            return Err(Error::Format(format!(
                "label/split shapes {lshape:?}/{sshape:?} do not match {n} samples"
            )));
        }
        if let Some(bad) = split.iter().find(|&&s| s > 1) {
            return Err(Error::Format(format!("split flag {bad} (expected 0 or 1)")));
        }
        Ok(Dataset { shape: [c, h, w], features, labels, split })
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir)
}

/// Class-template images: each class is a fixed sum of Gaussian blobs, and
/// samples are jittered, shifted and noisy copies clipped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_blobs")]
    pub blobs: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_size() -> usize {
    8
}
fn default_channels() -> usize {
    1
}
fn default_noise() -> f64 {
    0.25
}
fn default_blobs() -> usize {
    3
}
fn default_val_fraction() -> f64 {
    0.2
}

impl SyntheticSpec {
    pub fn new(classes: usize, samples: usize, seed: u64) -> Self {
        SyntheticSpec {
            classes,
            samples,
            size: default_size(),
            channels: default_channels(),
            noise: default_noise(),
            blobs: default_blobs(),
            val_fraction: default_val_fraction(),
            seed,
        }
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > 256 {
        return Err(Error::Config(format!("classes must be in 2..=256, got {}", spec.classes)));
    }
    if spec.size < 3 || spec.channels == 0 || spec.samples < spec.classes {
        return Err(Error::Config("synthetic spec needs size >= 3, channels >= 1, samples >= classes".into()));
    }
    if !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(Error::Config("val_fraction must be in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (s, c) = (spec.size, spec.channels);
    let plane = s * s;
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let mut t = vec![0f64; c * plane];
            for ch in 0..c {
                for _ in 0..spec.blobs {
                    let cy = rng.random_range(0.5..s as f64 - 0.5);
                    let cx = rng.random_range(0.5..s as f64 - 0.5);
                    let sigma = rng.random_range(0.8..1.6);
                    let amp = rng.random_range(0.5..1.0);
                    for y in 0..s {
                        for x in 0..s {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            t[ch * plane + y * s + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
            }
            let peak = t.iter().cloned().fold(1e-9, f64::max);
            t.iter_mut().for_each(|v| *v /= peak);
            t
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut features = Vec::with_capacity(spec.samples * c * plane);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        // Balanced classes, shuffled below through the split assignment.
        let k = i % spec.classes;
        let (dy, dx) = (rng.random_range(-1i64..=1), rng.random_range(-1i64..=1));
        let gain = rng.random_range(0.8..1.2);
        for ch in 0..c {
            for y in 0..s as i64 {
                for x in 0..s as i64 {
                    let (sy, sx) = (y - dy, x - dx);
                    let base = if (0..s as i64).contains(&sy) && (0..s as i64).contains(&sx) {
                        templates[k][ch * plane + sy as usize * s + sx as usize]
                    } else {
                        0.0
                    };
                    let v = gain * base + noise.sample(&mut rng);
                    features.push(v.clamp(0.0, 1.0) as Float);
                }
            }
        }
        labels.push(k as u8);
    }
    let mut order: Vec<usize> = (0..spec.samples).collect();
    order.shuffle(&mut rng);
    let n_val = ((spec.samples as f64) * spec.val_fraction).round() as usize;
    let mut split = vec![0u8; spec.samples];
    for &i in &order[..n_val] {
        split[i] = 1;
    }
    Ok(Dataset { shape: [c, s, s], features, labels, split })
}
