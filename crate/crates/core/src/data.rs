//! MNIST-style IDX ingestion and per-device input views.

use crate::autodiff::Tensor;
use crate::error::{ensure, Error, Result};
use crate::numerics::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Pixels in a flattened 28×28 image.
pub const MNIST_PIXELS: usize = 784;
pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Standard file names inside an MNIST directory.
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// Images stored as raw bytes; pixel values are `byte / 255`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    width: usize,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn from_parts(pixels: Vec<u8>, labels: Vec<u8>, width: usize, classes: usize, split: Split) -> Result<Self> {
        ensure!(width >= 1, "image width must be positive");
        ensure!(pixels.len() % width == 0, "pixel buffer is not a whole number of images");
        let images = pixels.len() / width;
        if images != labels.len() {
            return Err(Error::CountMismatch {
                images,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::LabelRange {
                label: bad as usize,
                classes,
            });
        }
        Ok(Self {
            pixels,
            labels,
            width,
            classes,
            split,
        })
    }

    /// Class-dependent random prototypes plus per-pixel noise; a small,
    /// learnable stand-in for MNIST in tests.
    pub fn synthetic(n: usize, width: usize, classes: usize, split: Split, seed: u64) -> Result<Self> {
        ensure!(classes >= 2 && classes <= 256, "classes must be in 2..=256");
        let mut proto_rng = Rng::new(seed);
        let prototypes: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..width).map(|_| proto_rng.uniform()).collect())
            .collect();
        let stream = match split {
            Split::Train => 1,
            Split::Test => 2,
        };
        let mut rng = Rng::with_stream(seed, stream);
        let mut pixels = Vec::with_capacity(n * width);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.below(classes);
            labels.push(y as u8);
            for p in &prototypes[y] {
                let v = (p + 0.25 * rng.standard_normal()).clamp(0.0, 1.0);
                pixels.push((v * 255.0).round() as u8);
            }
        }
        Self::from_parts(pixels, labels, width, classes, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().map(|&l| l as usize)
    }

    pub fn image(&self, i: usize) -> Vec<f64> {
        self.raw_image(i).iter().map(|&b| b as f64 / 255.0).collect()
    }

    fn raw_image(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.width..(i + 1) * self.width]
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            pixels: self.pixels[..n * self.width].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    /// Per-device input matrices for the samples in `indices`: entry `k` is
    /// `indices.len() × plan.view_width()`.
    pub fn view_batch(&self, plan: &ViewPlan, indices: &[usize]) -> Result<Vec<Tensor>> {
        ensure!(plan.input_len() == self.width, "view plan is for {}-value inputs", plan.input_len());
        let w = plan.view_width();
        let mut out = Vec::with_capacity(plan.devices());
        for &(start, end) in plan.ranges() {
            let mut data = vec![0.0; indices.len() * w];
            for (r, &i) in indices.iter().enumerate() {
                let img = self.raw_image(i);
                for (dst, &b) in data[r * w..].iter_mut().zip(&img[start..end]) {
                    *dst = b as f64 / 255.0;
                }
            }
            out.push(Tensor::new(indices.len(), w, data)?);
        }
        Ok(out)
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_header(path: &Path, bytes: &[u8], magic: u32, header: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header as u64,
            actual: bytes.len() as u64,
        });
    }
    let found = read_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(())
}

/// Reads an IDX image file and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img = read_file(images_path)?;
    check_header(images_path, &img, IMAGE_MAGIC, 16)?;
    let n = read_u32(&img, 4) as usize;
    let width = read_u32(&img, 8) as usize * read_u32(&img, 12) as usize;
    let expected = 16 + n as u64 * width as u64;
    if (img.len() as u64) < expected {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            expected,
            actual: img.len() as u64,
        });
    }

    let lab = read_file(labels_path)?;
    check_header(labels_path, &lab, LABEL_MAGIC, 8)?;
    let m = read_u32(&lab, 4) as usize;
    let expected = 8 + m as u64;
    if (lab.len() as u64) < expected {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            expected,
            actual: lab.len() as u64,
        });
    }
    if n != m {
        return Err(Error::CountMismatch { images: n, labels: m });
    }
    Dataset::from_parts(
        img[16..16 + n * width].to_vec(),
        lab[8..8 + m].to_vec(),
        width,
        MNIST_CLASSES,
        split,
    )
}

/// Loads a split from a directory with the standard MNIST file names.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = split.file_names();
    load_idx(&dir.join(images), &dir.join(labels), split)
}

/// Paths a split is read from.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let (images, labels) = split.file_names();
    (dir.join(images), dir.join(labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewMode {
    /// Contiguous equal chunks, zero-padded at the end.
    #[default]
    Disjoint,
    /// Windows where neighbours share half their indices.
    Overlap50,
}

/// How a flattened input is split across devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPlan {
    mode: ViewMode,
    input_len: usize,
    width: usize,
    ranges: Vec<(usize, usize)>,
}

impl ViewPlan {
    pub fn new(devices: usize, mode: ViewMode, input_len: usize) -> Result<Self> {
        ensure!(devices >= 1, "at least one device is required");
        ensure!(input_len >= devices, "more devices than input values");
        let (width, stride) = match mode {
            ViewMode::Disjoint => {
                let w = input_len.div_ceil(devices);
                (w, w)
            }
            ViewMode::Overlap50 => {
                // smallest w with K windows at stride floor(w/2) covering the input
                let mut w = (2 * input_len).div_ceil(devices + 1);
                while devices > 1 && (devices - 1) * (w / 2) + w < input_len {
                    w += 1;
                }
                (w, if devices == 1 { w } else { w / 2 })
            }
        };
        let ranges = (0..devices)
            .map(|k| {
                let start = (k * stride).min(input_len);
                (start, (start + width).min(input_len))
            })
            .collect();
        Ok(Self {
            mode,
            input_len,
            width,
            ranges,
        })
    }

    pub fn mnist(devices: usize, mode: ViewMode) -> Result<Self> {
        Self::new(devices, mode, MNIST_PIXELS)
    }

    pub fn mode(&self) -> ViewMode {
        self.mode
    }

    pub fn devices(&self) -> usize {
        self.ranges.len()
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    /// Length of every view, including padding.
    pub fn view_width(&self) -> usize {
        self.width
    }

    /// Half-open index range of each view; views shorter than
    /// [`Self::view_width`] are zero-padded.
    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }
}

pub fn make_views(x: &[f64], plan: &ViewPlan) -> Result<Vec<Vec<f64>>> {
    ensure!(
        x.len() == plan.input_len(),
        "input has {} values, plan expects {}",
        x.len(),
        plan.input_len()
    );
    Ok(plan
        .ranges()
        .iter()
        .map(|&(s, e)| {
            let mut v = x[s..e].to_vec();
            v.resize(plan.view_width(), 0.0);
            v
        })
        .collect())
}
