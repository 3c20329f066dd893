//! Raster preprocessing: binary PPM/PGM I/O, grayscale, resize, quarter-turn rotation
//! and the frame-selection policy used to pick stills out of extracted video frames.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated image data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("frame index {index} out of range for {total} frames")]
    IndexOutOfRange { index: usize, total: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major 8-bit image with one (gray) or three (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::InvalidRaster(format!("{width}x{height} has no pixels")));
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::InvalidRaster(format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(ImageError::InvalidRaster(format!(
                "{} samples for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self, ImageError> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    fn offset(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let o = self.offset(x, y);
        &self.data[o..o + self.channels]
    }
}

/// Width, height and channel count read from a PPM/PGM header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageInfo {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

struct Header {
    info: ImageInfo,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, ImageError> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(ImageError::BadHeader("missing P magic".into()));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        b'1'..=b'4' | b'7' => {
            return Err(ImageError::UnsupportedFormat(format!(
                "P{} (only binary P5/P6 are supported)",
                bytes[1] as char
            )))
        }
        other => return Err(ImageError::BadHeader(format!("unknown magic P{}", other as char))),
    };

    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // Whitespace and comments between fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(ImageError::BadHeader("header ends early".into())),
            }
        }
        if pos == 2 {
            return Err(ImageError::BadHeader("no whitespace after magic".into()));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::BadHeader(format!("expected a number for header field {k}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| ImageError::BadHeader(format!("header value {text} too large")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageError::BadHeader("missing whitespace after maxval".into())),
    }

    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(ImageError::UnsupportedFormat(format!("maxval {maxval} (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::BadHeader(format!("empty image {width}x{height}")));
    }
    Ok(Header {
        info: ImageInfo {
            width,
            height,
            channels,
        },
        data_start: pos,
    })
}

/// Decodes a binary PGM (P5) or PPM (P6) image with maxval 255.
pub fn read_image(bytes: &[u8]) -> Result<Raster, ImageError> {
    let header = parse_header(bytes)?;
    let ImageInfo {
        width,
        height,
        channels,
    } = header.info;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| ImageError::BadHeader("image dimensions overflow".into()))?;
    let body = &bytes[header.data_start..];
    if body.len() < expected {
        return Err(ImageError::TruncatedData {
            expected,
            found: body.len(),
        });
    }
    Raster::new(width, height, channels, body[..expected].to_vec())
}

/// Encodes with a normalized `P5`/`P6` header: `"P6\n<w> <h>\n255\n"`.
pub fn write_image(img: &Raster) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_image_info(bytes: &[u8]) -> Result<ImageInfo, ImageError> {
    parse_header(bytes).map(|h| h.info)
}

pub fn load_image(path: &Path) -> Result<Raster, ImageError> {
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_image(&bytes)
}

pub fn load_image_info(path: &Path) -> Result<ImageInfo, ImageError> {
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_image_info(&bytes)
}

pub fn save_image(path: &Path, img: &Raster) -> Result<(), ImageError> {
    fs::write(path, write_image(img)).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// BT.601 luma, rounded half up. Single-channel input is returned unchanged.
pub fn to_grayscale(img: &Raster) -> Raster {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| {
            let y = 299 * px[0] as u32 + 587 * px[1] as u32 + 114 * px[2] as u32;
            ((y + 500) / 1000).min(255) as u8
        })
        .collect();
    Raster {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResizeMode {
    Nearest,
    #[default]
    Bilinear,
}

pub fn resize(img: &Raster, out_w: usize, out_h: usize, mode: ResizeMode) -> Result<Raster, ImageError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImageError::InvalidRaster(format!("resize target {out_w}x{out_h}")));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let ch = img.channels;
    let mut data = Vec::with_capacity(out_w * out_h * ch);
    match mode {
        ResizeMode::Nearest => {
            // floor((x + 0.5) * W / out_w) in exact integer arithmetic.
            let xs: Vec<usize> = (0..out_w)
                .map(|x| ((2 * x + 1) * img.width / (2 * out_w)).min(img.width - 1))
                .collect();
            for y in 0..out_h {
                let sy = ((2 * y + 1) * img.height / (2 * out_h)).min(img.height - 1);
                for &sx in &xs {
                    data.extend_from_slice(img.pixel(sx, sy));
                }
            }
        }
        ResizeMode::Bilinear => {
            let taps = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
                let scale = src as f64 / out as f64;
                (0..out)
                    .map(|o| {
                        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                        let i0 = s.floor() as usize;
                        let i1 = (i0 + 1).min(src - 1);
                        (i0, i1, s - i0 as f64)
                    })
                    .collect()
            };
            let xt = taps(out_w, img.width);
            let yt = taps(out_h, img.height);
            for &(y0, y1, fy) in &yt {
                for &(x0, x1, fx) in &xt {
                    for c in 0..ch {
                        let p = |x: usize, y: usize| img.data[img.offset(x, y) + c] as f64;
                        let top = p(x0, y0) + (p(x1, y0) - p(x0, y0)) * fx;
                        let bottom = p(x0, y1) + (p(x1, y1) - p(x0, y1)) * fx;
                        let v = top + (bottom - top) * fy;
                        data.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
    }
    Raster::new(out_w, out_h, ch, data)
}

/// Rotates by `turns` clockwise quarter turns (taken mod 4). Pure pixel permutation.
pub fn rotate_quarter(img: &Raster, turns: u8) -> Raster {
    let turns = turns % 4;
    if turns == 0 {
        return img.clone();
    }
    let (w, h, ch) = (img.width, img.height, img.channels);
    let (ow, oh) = if turns % 2 == 1 { (h, w) } else { (w, h) };
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..oh {
        for x in 0..ow {
            let (sx, sy) = match turns {
                1 => (y, h - 1 - x),
                2 => (w - 1 - x, h - 1 - y),
                _ => (w - 1 - y, x),
            };
            data.extend_from_slice(img.pixel(sx, sy));
        }
    }
    Raster {
        width: ow,
        height: oh,
        channels: ch,
        data,
    }
}

/// Maps a normalized box through the same clockwise quarter turns as [`rotate_quarter`].
pub fn rotate_box(b: &BBox, turns: u8) -> BBox {
    let (cx, cy, w, h) = (b.cx(), b.cy(), b.w(), b.h());
    let (ncx, ncy, nw, nh) = match turns % 4 {
        0 => return *b,
        1 => (1.0 - cy, cx, h, w),
        2 => (1.0 - cx, 1.0 - cy, w, h),
        _ => (cy, 1.0 - cx, h, w),
    };
    BBox::new(ncx, ncy, nw, nh).expect("quarter turns keep a box inside the unit image")
}

/// Which frame indices to keep out of an extracted clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FramePolicy {
    Explicit(Vec<usize>),
    Stride { start: usize, step: usize, count: usize },
}

impl FramePolicy {
    /// Frames 50, 60, ..., 100.
    pub fn addsl() -> Self {
        FramePolicy::Stride {
            start: 50,
            step: 10,
            count: 6,
        }
    }
}

impl Default for FramePolicy {
    fn default() -> Self {
        Self::addsl()
    }
}

/// Returns the selected indices, strictly increasing and all below `total`.
pub fn select_frames(total: usize, policy: &FramePolicy) -> Result<Vec<usize>, ImageError> {
    let mut idx: Vec<usize> = match policy {
        FramePolicy::Explicit(list) => list.clone(),
        FramePolicy::Stride { start, step, count } => (0..*count).map(|k| start + k * step).collect(),
    };
    idx.sort_unstable();
    idx.dedup();
    // Report the largest request so the error says how long the clip must be.
    if let Some(&last) = idx.last().filter(|&&i| i >= total) {
        return Err(ImageError::IndexOutOfRange { index: last, total });
    }
    Ok(idx)
}

/// Trailing decimal number of a file stem, e.g. `clip_0050` -> 50.
fn frame_number(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// Applies a frame policy to a directory of extracted frames named `<prefix><number>.<ext>`.
///
/// The clip length is taken as one past the highest frame number present. Returns the
/// selected frame files in frame order.
pub fn select_frame_files(dir: &Path, policy: &FramePolicy) -> Result<Vec<PathBuf>, ImageError> {
    let io = |source| ImageError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut frames: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_file() {
            if let Some(n) = frame_number(&path) {
                frames.push((n, path));
            }
        }
    }
    frames.sort();
    let total = frames.last().map_or(0, |(n, _)| n + 1);
    let keep = select_frames(total, policy)?;
    let mut out = Vec::with_capacity(keep.len());
    for k in keep {
        match frames.iter().find(|(n, _)| *n == k) {
            Some((_, p)) => out.push(p.clone()),
            None => return Err(ImageError::IndexOutOfRange { index: k, total }),
        }
    }
    Ok(out)
}
