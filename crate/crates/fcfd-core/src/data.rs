//! Dataset ingestion and synthetic data generation.
//!
//! Binary layout (all integers big-endian u32):
//!   images: magic "FCFDIMG1", count, channels, height, width, payload bytes
//!           row-major (count * channels * height * width).
//!   labels: magic "FCFDLBL1", count, then count u8 labels.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FcfdError, Result};
use crate::graph::Scalar;

pub const IMG_MAGIC: &[u8; 8] = b"FCFDIMG1";
pub const LBL_MAGIC: &[u8; 8] = b"FCFDLBL1";

#[derive(Clone, Debug)]
pub struct ImageDataset {
    /// (count, channels, height, width), raw u8 pixels.
    pub images: Array4<u8>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub split: String,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let d = self.images.dim();
        (d.1, d.2, d.3)
    }

    /// Per-channel mean and standard deviation over the whole split, in the
    /// [0,1] pixel scale. Computed on the train split and reused for eval.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.images.dim().1;
        let mut means = Vec::with_capacity(c);
        let mut stds = Vec::with_capacity(c);
        for ci in 0..c {
            let ch = self.images.index_axis(Axis(1), ci);
            let n = ch.len() as f64;
            let mean: f64 = ch.iter().map(|&v| v as f64 / 255.0).sum::<f64>() / n;
            let var: f64 = ch
                .iter()
                .map(|&v| {
                    let d = v as f64 / 255.0 - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            means.push(mean);
            stds.push(var.sqrt().max(1e-6));
        }
        (means, stds)
    }
}

/// A normalized float batch plus integer labels.
pub struct DataBatch<F: Scalar> {
    pub x: ArrayD<F>,
    pub y: Vec<usize>,
}

/// Extracts `indices` from the dataset and normalizes with the given
/// per-channel statistics.
pub fn make_batch<F: Scalar>(
    ds: &ImageDataset,
    indices: &[usize],
    mean: &[f64],
    std: &[f64],
) -> DataBatch<F> {
    let (c, h, w) = ds.image_shape();
    let mut x = Array4::<F>::zeros((indices.len(), c, h, w));
    let mut y = Vec::with_capacity(indices.len());
    for (bi, &i) in indices.iter().enumerate() {
        y.push(ds.labels[i] as usize);
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    let v = ds.images[[i, ci, yi, xi]] as f64 / 255.0;
                    x[[bi, ci, yi, xi]] = F::f((v - mean[ci]) / std[ci]);
                }
            }
        }
    }
    DataBatch {
        x: x.into_dyn(),
        y,
    }
}

pub fn write_idx_dataset(ds: &ImageDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (count, c, h, w) = ds.images.dim();
    let mut iw = BufWriter::new(File::create(images_path)?);
    iw.write_all(IMG_MAGIC)?;
    for v in [count, c, h, w] {
        iw.write_u32::<BigEndian>(v as u32)?;
    }
    // Array4 from constructors is standard (row-major) layout.
    for &px in ds.images.as_slice().expect("contiguous image array") {
        iw.write_all(&[px])?;
    }
    iw.flush()?;
    let mut lw = BufWriter::new(File::create(labels_path)?);
    lw.write_all(LBL_MAGIC)?;
    lw.write_u32::<BigEndian>(ds.labels.len() as u32)?;
    lw.write_all(&ds.labels)?;
    lw.flush()?;
    Ok(())
}

pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let mut magic = [0u8; 8];
    ir.read_exact(&mut magic).map_err(|_| FcfdError::Parse {
        offset: 0,
        message: "images file shorter than magic".into(),
    })?;
    if &magic != IMG_MAGIC {
        return Err(FcfdError::Parse {
            offset: 0,
            message: format!("bad images magic {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let count = ir.read_u32::<BigEndian>().map_err(parse_at(8))? as usize;
    let c = ir.read_u32::<BigEndian>().map_err(parse_at(12))? as usize;
    let h = ir.read_u32::<BigEndian>().map_err(parse_at(16))? as usize;
    let w = ir.read_u32::<BigEndian>().map_err(parse_at(20))? as usize;
    let payload = count * c * h * w;
    let mut pixels = vec![0u8; payload];
    ir.read_exact(&mut pixels).map_err(|_| FcfdError::Parse {
        offset: 24,
        message: format!("truncated image payload: expected {payload} bytes"),
    })?;
    let mut extra = [0u8; 1];
    if ir.read(&mut extra)? != 0 {
        return Err(FcfdError::Parse {
            offset: 24 + payload as u64,
            message: "trailing bytes after declared image payload".into(),
        });
    }

    let mut lr = BufReader::new(File::open(labels_path)?);
    let mut lmagic = [0u8; 8];
    lr.read_exact(&mut lmagic).map_err(|_| FcfdError::Parse {
        offset: 0,
        message: "labels file shorter than magic".into(),
    })?;
    if &lmagic != LBL_MAGIC {
        return Err(FcfdError::Parse {
            offset: 0,
            message: format!("bad labels magic {:?}", String::from_utf8_lossy(&lmagic)),
        });
    }
    let lcount = lr.read_u32::<BigEndian>().map_err(parse_at(8))? as usize;
    if lcount != count {
        return Err(FcfdError::Parse {
            offset: 8,
            message: format!("label count {lcount} does not match image count {count}"),
        });
    }
    let mut labels = vec![0u8; lcount];
    lr.read_exact(&mut labels).map_err(|_| FcfdError::Parse {
        offset: 12,
        message: format!("truncated labels: expected {lcount} bytes"),
    })?;

    let num_classes = labels.iter().copied().max().map(|m| m as usize + 1).unwrap_or(0);
    let images = Array4::from_shape_vec((count, c, h, w), pixels).unwrap();
    Ok(ImageDataset {
        images,
        labels,
        num_classes,
        split: "loaded".to_string(),
    })
}

fn parse_at(offset: u64) -> impl Fn(std::io::Error) -> FcfdError {
    move |_| FcfdError::Parse {
        offset,
        message: "truncated header".into(),
    }
}

/// Converts CIFAR-style binary batches (records of one label byte followed by
/// channels*height*width pixel bytes, channel-planar) into an [`ImageDataset`].
pub fn convert_cifar_bin(
    inputs: &[std::path::PathBuf],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<ImageDataset> {
    let record = 1 + channels * height * width;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in inputs {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() % record != 0 {
            return Err(FcfdError::Parse {
                offset: (bytes.len() - bytes.len() % record) as u64,
                message: format!(
                    "file {} is not a multiple of the {record}-byte record size",
                    path.display()
                ),
            });
        }
        for rec in bytes.chunks_exact(record) {
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    let count = labels.len();
    let num_classes = labels.iter().copied().max().map(|m| m as usize + 1).unwrap_or(0);
    let images = Array4::from_shape_vec((count, channels, height, width), pixels).unwrap();
    Ok(ImageDataset {
        images,
        labels,
        num_classes,
        split: "converted".to_string(),
    })
}

/// Per-class pattern parameters, a fixed function of the class index so that
/// independently seeded splits share the same class structure.
fn class_pattern(c: usize) -> (f64, f64, [f64; 3], (f64, f64)) {
    let orientation = PI * ((c % 5) as f64) / 5.0;
    let frequency = if c < 5 { 4.0 } else { 7.0 };
    // Channel mixing weights, distinct but mild.
    let mix = [
        0.9 + 0.1 * ((c * 37 % 11) as f64 / 11.0),
        0.7 + 0.3 * ((c * 53 % 13) as f64 / 13.0),
        0.8 + 0.2 * ((c * 71 % 7) as f64 / 7.0),
    ];
    // Class blob center in relative coordinates.
    let angle = 2.0 * PI * (c as f64) / 10.0;
    let center = (0.5 + 0.28 * angle.cos(), 0.5 + 0.28 * angle.sin());
    (orientation, frequency, mix, center)
}

/// Generates a class-conditional synthetic dataset: oriented gratings with a
/// random phase and spatial jitter per sample, plus a small class-position
/// blob and additive noise. Deterministic given `seed`.
pub fn make_synthetic(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<ImageDataset> {
    if num_classes == 0 || per_class == 0 || image_size == 0 {
        return Err(FcfdError::Config(
            "make_synthetic: all sizes must be positive".into(),
        ));
    }
    if num_classes > 255 {
        return Err(FcfdError::Config(
            "make_synthetic: at most 255 classes".into(),
        ));
    }
    let s = image_size;
    let count = num_classes * per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Array4::<u8>::zeros((count, 3, s, s));
    let mut labels = Vec::with_capacity(count);
    let noise_sigma = 0.14;
    let blob_amp = 0.12;
    let grating_amp = 0.30;
    for c in 0..num_classes {
        let (theta, freq, mix, center) = class_pattern(c);
        let (ct, st) = (theta.cos(), theta.sin());
        for i in 0..per_class {
            let idx = c * per_class + i;
            labels.push(c as u8);
            let phase: f64 = rng.gen_range(0.0..2.0 * PI);
            let jx: f64 = rng.gen_range(-3.0..3.0);
            let jy: f64 = rng.gen_range(-3.0..3.0);
            let amp: f64 = rng.gen_range(0.8..1.2);
            let cx = center.0 * s as f64 + jx;
            let cy = center.1 * s as f64 + jy;
            let sigma2 = (0.12 * s as f64).powi(2);
            for yi in 0..s {
                for xi in 0..s {
                    let u = xi as f64 + jx;
                    let v = yi as f64 + jy;
                    let grating = (2.0 * PI * freq * (u * ct + v * st) / s as f64 + phase).sin();
                    let d2 = (xi as f64 - cx).powi(2) + (yi as f64 - cy).powi(2);
                    let blob = (-d2 / (2.0 * sigma2)).exp();
                    for ch in 0..3 {
                        let noise: f64 = {
                            let n: f64 = rng.sample(rand_distr::StandardNormal);
                            n * noise_sigma
                        };
                        let val = 0.5
                            + grating_amp * amp * mix[ch] * grating
                            + blob_amp * blob * (if ch == c % 3 { 1.0 } else { 0.3 })
                            + noise;
                        images[[idx, ch, yi, xi]] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    Ok(ImageDataset {
        images,
        labels,
        num_classes,
        split: "synthetic".to_string(),
    })
}

/// Pad-4 random crop plus horizontal flip, with the randomness supplied by
/// the caller: `flips[i]` and `offsets[i]` (offsets in 0..=8, (4,4) is the
/// identity crop).
pub fn augment_batch<F: Scalar>(
    x: &ArrayD<F>,
    flips: &[bool],
    offsets: &[(usize, usize)],
) -> ArrayD<F> {
    let s = x.shape().to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(flips.len(), b);
    assert_eq!(offsets.len(), b);
    let pad = 4usize;
    let mut out = ArrayD::<F>::zeros(x.raw_dim());
    for bi in 0..b {
        let (oy, ox) = offsets[bi];
        assert!(oy <= 2 * pad && ox <= 2 * pad);
        for ci in 0..c {
            for yi in 0..h {
                let sy = yi as isize + oy as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xi in 0..w {
                    let sx0 = xi as isize + ox as isize - pad as isize;
                    if sx0 < 0 || sx0 >= w as isize {
                        continue;
                    }
                    let src_x = if flips[bi] {
                        w - 1 - sx0 as usize
                    } else {
                        sx0 as usize
                    };
                    out[[bi, ci, yi, xi]] = x[[bi, ci, sy as usize, src_x]];
                }
            }
        }
    }
    out
}

/// Samples augmentation decisions from `rng` and applies them.
pub fn augment<F: Scalar, R: Rng>(x: &ArrayD<F>, rng: &mut R) -> ArrayD<F> {
    let b = x.shape()[0];
    let flips: Vec<bool> = (0..b).map(|_| rng.gen_bool(0.5)).collect();
    let offsets: Vec<(usize, usize)> = (0..b)
        .map(|_| (rng.gen_range(0..=8), rng.gen_range(0..=8)))
        .collect();
    augment_batch(x, &flips, &offsets)
}
