//! Videos as directories of numerically ordered PNG frames.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::VideoTensor;

/// Frame file name for index `i`.
pub fn frame_name(i: usize) -> String {
    format!("{i:04}.png")
}

/// Writes an RGB pixel-range video as `dir/0000.png`, `dir/0001.png`, ...
/// Values are clamped to `[0, 1]` and rounded to 8 bits.
pub fn write_frames(video: &VideoTensor, dir: &Path) -> Result<Vec<PathBuf>> {
    let [f, c, h, w] = video.shape();
    if c != 3 {
        return Err(Error::shape("3 channels", c));
    }
    std::fs::create_dir_all(dir)?;
    let per = h * w;
    let mut paths = Vec::with_capacity(f);
    for i in 0..f {
        let frame = video.frame(i);
        let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            let q = |ch: usize| (frame[ch * per + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([q(0), q(1), q(2)])
        });
        let path = dir.join(frame_name(i));
        img.save(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        paths.push(path);
    }
    Ok(paths)
}

/// PNG files of `dir` in numeric order of their file stems.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) != Some(true) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let idx: u64 = stem
            .parse()
            .map_err(|_| Error::Image(format!("frame name {:?} is not a number", path.display())))?;
        found.push((idx, path));
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Reads a frame directory into an RGB pixel-range video.
pub fn read_frames(dir: &Path) -> Result<VideoTensor> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(Error::domain(format!("no PNG frames in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    let mut size = None;
    for path in &paths {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let dims = img.dimensions();
        if *size.get_or_insert(dims) != dims {
            return Err(Error::shape(size.unwrap(), dims));
        }
        let (w, h) = (dims.0 as usize, dims.1 as usize);
        let mut data = vec![0.0; 3 * w * h];
        for (x, y, px) in img.enumerate_pixels() {
            let p = y as usize * w + x as usize;
            for ch in 0..3 {
                data[ch * w * h + p] = px[ch] as f64 / 255.0;
            }
        }
        frames.push(data);
    }
    let (w, h) = size.expect("at least one frame");
    VideoTensor::from_frames(&frames, 3, h as usize, w as usize)
}

/// Rounds a pixel-range video to the 8-bit grid used by [`write_frames`].
pub fn quantize(video: &VideoTensor) -> VideoTensor {
    video.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Writes a single-channel image with values in `[0, 1]`.
pub fn write_gray(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape(width * height, values.len()));
    }
    let img = image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([(values[y as usize * width + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
