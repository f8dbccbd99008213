//! Frame sequence I/O: raw 8-bit RGB or YUV420 files with a `key = value`
//! sidecar (`<file>.meta`), and directories of PNG images.
//!
//! Frames are `[3,H,W]` tensors in `[0,1]`. YUV uses full-range BT.601.

use std::fs;
use std::path::{Path, PathBuf};

use bvc_tensor::Tensor;

use crate::config::KvFile;
use crate::error::{CodecError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RawFormat {
    Rgb24,
    Yuv420,
}

impl RawFormat {
    pub fn frame_bytes(self, w: usize, h: usize) -> usize {
        match self {
            RawFormat::Rgb24 => 3 * w * h,
            RawFormat::Yuv420 => w * h + 2 * w.div_ceil(2) * h.div_ceil(2),
        }
    }

    fn name(self) -> &'static str {
        match self {
            RawFormat::Rgb24 => "rgb24",
            RawFormat::Yuv420 => "yuv420p",
        }
    }
}

impl std::str::FromStr for RawFormat {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" | "rgb24" => Ok(RawFormat::Rgb24),
            "yuv" | "yuv420" | "yuv420p" => Ok(RawFormat::Yuv420),
            _ => Err(CodecError::Data(format!("unknown raw format {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Video {
    pub frames: Vec<Tensor>,
    pub fps: f64,
}

impl Video {
    pub fn dims(&self) -> (usize, usize) {
        match self.frames.first() {
            Some(f) => {
                let (_, h, w) = f.dims3();
                (h, w)
            }
            None => (0, 0),
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a video from a PNG directory or a raw file with a sidecar.
pub fn read_video(path: &Path) -> Result<Video> {
    if path.is_dir() {
        read_png_dir(path)
    } else {
        read_raw(path)
    }
}

/// Writes a PNG directory when `path` has no extension or ends with `/`,
/// raw otherwise (format from the extension: `.yuv` or RGB).
pub fn write_video(path: &Path, video: &Video) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        None => write_png_dir(path, &video.frames),
        Some("yuv") => write_raw(path, video, RawFormat::Yuv420),
        Some(_) => write_raw(path, video, RawFormat::Rgb24),
    }
}

pub fn read_raw(path: &Path) -> Result<Video> {
    let meta = sidecar_path(path);
    let kv = KvFile::load(&meta).map_err(|e| CodecError::Data(format!("{}: {e}", meta.display())))?;
    let need = |k: &str| -> Result<usize> {
        kv.get::<usize>(k)?
            .ok_or_else(|| CodecError::Data(format!("{}: missing {k}", meta.display())))
    };
    let (w, h) = (need("width")?, need("height")?);
    if w == 0 || h == 0 {
        return Err(CodecError::Data("zero frame size in sidecar".into()));
    }
    let fps = kv.get::<f64>("fps")?.unwrap_or(30.0);
    let format: RawFormat = kv.raw("format").unwrap_or("rgb24").parse()?;
    let bytes = fs::read(path)?;
    let fb = format.frame_bytes(w, h);
    if bytes.len() % fb != 0 {
        return Err(CodecError::Data(format!(
            "{}: {} bytes is not a whole number of {w}x{h} {} frames",
            path.display(),
            bytes.len(),
            format.name()
        )));
    }
    let frames = bytes
        .chunks_exact(fb)
        .map(|b| match format {
            RawFormat::Rgb24 => rgb_to_tensor(b, w, h),
            RawFormat::Yuv420 => yuv_to_tensor(b, w, h),
        })
        .collect();
    Ok(Video { frames, fps })
}

pub fn write_raw(path: &Path, video: &Video, format: RawFormat) -> Result<()> {
    let (h, w) = video.dims();
    let mut out = Vec::with_capacity(video.frames.len() * format.frame_bytes(w, h));
    for f in &video.frames {
        if f.dims3() != (3, h, w) {
            return Err(CodecError::Data("frames differ in size".into()));
        }
        match format {
            RawFormat::Rgb24 => out.extend(tensor_to_rgb(f)),
            RawFormat::Yuv420 => out.extend(tensor_to_yuv(f)),
        }
    }
    fs::write(path, out)?;
    fs::write(
        sidecar_path(path),
        format!("width = {w}\nheight = {h}\nfps = {}\nformat = {}\n", video.fps, format.name()),
    )?;
    Ok(())
}

fn rgb_to_tensor(b: &[u8], w: usize, h: usize) -> Tensor {
    let hw = h * w;
    Tensor::from_fn(&[3, h, w], |i| b[(i % hw) * 3 + i / hw] as f32 / 255.0)
}

fn tensor_to_rgb(t: &Tensor) -> Vec<u8> {
    let (_, h, w) = t.dims3();
    let hw = h * w;
    (0..3 * hw).map(|i| to_u8(t.data()[(i % 3) * hw + i / 3])).collect()
}

fn yuv_to_tensor(b: &[u8], w: usize, h: usize) -> Tensor {
    let (cw, ch) = (w.div_ceil(2), h.div_ceil(2));
    let (yp, rest) = b.split_at(w * h);
    let (up, vp) = rest.split_at(cw * ch);
    let hw = h * w;
    let mut d = vec![0.0f32; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let l = yp[y * w + x] as f32;
            let u = up[(y / 2) * cw + x / 2] as f32 - 128.0;
            let v = vp[(y / 2) * cw + x / 2] as f32 - 128.0;
            let p = y * w + x;
            d[p] = ((l + 1.402 * v) / 255.0).clamp(0.0, 1.0);
            d[hw + p] = ((l - 0.344136 * u - 0.714136 * v) / 255.0).clamp(0.0, 1.0);
            d[2 * hw + p] = ((l + 1.772 * u) / 255.0).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, h, w], d)
}

fn tensor_to_yuv(t: &Tensor) -> Vec<u8> {
    let (_, h, w) = t.dims3();
    let hw = h * w;
    let px = |p: usize| {
        let d = t.data();
        let (r, g, b) = (d[p].clamp(0.0, 1.0), d[hw + p].clamp(0.0, 1.0), d[2 * hw + p].clamp(0.0, 1.0));
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        (y, -0.168736 * r - 0.331264 * g + 0.5 * b, 0.5 * r - 0.418688 * g - 0.081312 * b)
    };
    let mut out: Vec<u8> = (0..hw).map(|p| to_u8(px(p).0)).collect();
    let (cw, ch) = (w.div_ceil(2), h.div_ceil(2));
    let mut u = Vec::with_capacity(cw * ch);
    let mut v = Vec::with_capacity(cw * ch);
    for cy in 0..ch {
        for cx in 0..cw {
            let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
            for y in 2 * cy..(2 * cy + 2).min(h) {
                for x in 2 * cx..(2 * cx + 2).min(w) {
                    let (_, a, b) = px(y * w + x);
                    su += a;
                    sv += b;
                    n += 1.0;
                }
            }
            u.push(to_u8(su / n + 0.5));
            v.push(to_u8(sv / n + 0.5));
        }
    }
    out.extend(u);
    out.extend(v);
    out
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| CodecError::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(rgb_to_tensor(img.as_raw(), w, h))
}

pub fn write_png(path: &Path, frame: &Tensor) -> Result<()> {
    let (_, h, w) = frame.dims3();
    let img = image::RgbImage::from_raw(w as u32, h as u32, tensor_to_rgb(frame))
        .ok_or_else(|| CodecError::Image("buffer size".into()))?;
    img.save(path)
        .map_err(|e| CodecError::Image(format!("{}: {e}", path.display())))
}

/// Reads every `*.png` in `dir` in lexicographic order.
pub fn read_png_dir(dir: &Path) -> Result<Video> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CodecError::Data(format!("{}: no PNG files", dir.display())));
    }
    let frames = paths.iter().map(|p| read_png(p)).collect::<Result<Vec<_>>>()?;
    if frames.iter().any(|f| f.shape() != frames[0].shape()) {
        return Err(CodecError::Data(format!("{}: images differ in size", dir.display())));
    }
    Ok(Video { frames, fps: 30.0 })
}

/// Writes frames as `00000.png`, `00001.png`, ... in `dir`.
pub fn write_png_dir(dir: &Path, frames: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        write_png(&dir.join(format!("{i:05}.png")), f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn frames(n: usize, h: usize, w: usize) -> Vec<Tensor> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        (0..n)
            .map(|_| Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, &mut rng).map(|v| (v * 255.0).round() / 255.0))
            .collect()
    }

    #[test]
    fn rgb_and_png_are_lossless_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let v = Video { frames: frames(3, 5, 7), fps: 25.0 };
        write_video(&dir.path().join("a.rgb"), &v).unwrap();
        let r = read_video(&dir.path().join("a.rgb")).unwrap();
        assert_eq!(r.fps, 25.0);
        assert!(r.frames.iter().zip(&v.frames).all(|(a, b)| a.bit_eq(b)));
        write_video(&dir.path().join("png"), &v).unwrap();
        let p = read_video(&dir.path().join("png")).unwrap();
        assert!(p.frames.iter().zip(&v.frames).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn yuv_roundtrip_is_close_on_smooth_frames() {
        let dir = tempfile::tempdir().unwrap();
        let f = Tensor::from_fn(&[3, 6, 9], |i| 0.2 + 0.6 * ((i / 54) as f32 / 3.0));
        let v = Video { frames: vec![f.clone()], fps: 30.0 };
        let path = dir.path().join("a.yuv");
        write_video(&path, &v).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), RawFormat::Yuv420.frame_bytes(9, 6));
        let r = read_video(&path).unwrap();
        assert!(r.frames[0].max_abs_diff(&f) < 0.02);
    }

    #[test]
    fn truncated_raw_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rgb");
        write_video(&path, &Video { frames: frames(2, 4, 4), fps: 30.0 }).unwrap();
        let mut b = fs::read(&path).unwrap();
        b.pop();
        fs::write(&path, b).unwrap();
        assert!(read_video(&path).is_err());
    }
}
