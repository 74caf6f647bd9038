//! On-disk dataset layout:
//!
//! ```text
//! <root>/<split>/rgb/NNNN.png    8-bit RGB
//! <root>/<split>/depth/NNNN.pfm  metres, single channel
//! <root>/<split>/mask/NNNN.png   8-bit, 255 = valid
//! ```

use std::path::{Path, PathBuf};

use super::image::{read_pfm, read_png, write_pfm, write_png_gray8, write_png_rgb8};
use crate::error::{Error, Result};
use crate::synth::DepthSample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleFiles {
    pub index: usize,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub mask: PathBuf,
}

impl SampleFiles {
    pub fn new(split_dir: &Path, index: usize) -> Self {
        let stem = format!("{index:04}");
        SampleFiles {
            index,
            rgb: split_dir.join("rgb").join(format!("{stem}.png")),
            depth: split_dir.join("depth").join(format!("{stem}.pfm")),
            mask: split_dir.join("mask").join(format!("{stem}.png")),
        }
    }
}

pub fn write_sample(split_dir: &Path, index: usize, sample: &DepthSample) -> Result<SampleFiles> {
    let files = SampleFiles::new(split_dir, index);
    for sub in ["rgb", "depth", "mask"] {
        let dir = split_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let (h, w) = (sample.height(), sample.width());
    write_png_rgb8(&files.rgb, w, h, sample.rgb.data())?;
    write_pfm(&files.depth, w, h, sample.depth.data())?;
    let mask: Vec<f32> = sample.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    write_png_gray8(&files.mask, w, h, &mask)?;
    Ok(files)
}

/// Loads one sample. The mask file is optional; without it every pixel with
/// finite positive depth is valid.
pub fn read_sample(files: &SampleFiles) -> Result<DepthSample> {
    let rgb = read_png(&files.rgb)?;
    if rgb.channels != 3 {
        return Err(Error::Data(format!("{}: expected an RGB image", files.rgb.display())));
    }
    let depth = read_pfm(&files.depth)?;
    if depth.channels != 1 || (depth.width, depth.height) != (rgb.width, rgb.height) {
        return Err(Error::Data(format!(
            "{}: depth is {}x{}x{}, rgb is {}x{}",
            files.depth.display(),
            depth.channels,
            depth.height,
            depth.width,
            rgb.height,
            rgb.width
        )));
    }
    let (h, w) = (rgb.height, rgb.width);
    let mut valid: Vec<bool> = depth.data.iter().map(|d| d.is_finite() && *d > 0.0).collect();
    if files.mask.exists() {
        let mask = read_png(&files.mask)?;
        if (mask.width, mask.height) != (w, h) {
            return Err(Error::Data(format!("{}: mask size differs from rgb", files.mask.display())));
        }
        for (i, v) in valid.iter_mut().enumerate() {
            *v &= mask.data[i * mask.channels] > 0.5;
        }
    }
    // Interleaved HWC to planar CHW.
    let mut planar = vec![0.0; 3 * h * w];
    for (i, px) in rgb.data.chunks(3).enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px[c];
        }
    }
    let depth_data = depth.data.iter().map(|d| if d.is_finite() { *d } else { 0.0 }).collect();
    Ok(DepthSample {
        rgb: Tensor::new(&[3, h, w], planar)?,
        depth: Tensor::new(&[h, w], depth_data)?,
        valid,
        seed: files.index as u64,
    })
}

/// Samples of a split directory, ordered by index. Fails with a data error
/// when the directory holds none.
pub fn list_samples(split_dir: &Path) -> Result<Vec<SampleFiles>> {
    let rgb_dir = split_dir.join("rgb");
    let entries = std::fs::read_dir(&rgb_dir).map_err(|_| Error::Data(format!("no samples found in {}", split_dir.display())))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&rgb_dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".png") {
            if let Ok(i) = stem.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    if indices.is_empty() {
        return Err(Error::Data(format!("no samples found in {}", split_dir.display())));
    }
    indices.sort_unstable();
    Ok(indices.into_iter().map(|i| SampleFiles::new(split_dir, i)).collect())
}
