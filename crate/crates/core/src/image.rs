//! Float images in `[0, 1]` and binary PGM (P5) / PPM (P6) codecs.

use std::io::Write;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Float, Tensor};

/// `height × width × channels` image, stored channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(shape_err!("images have 1 or 3 channels, got {channels}"));
        }
        if data.len() != height * width * channels {
            return Err(shape_err!("{height}×{width}×{channels} image with {} values", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err!("image {:?} vs {:?}", self.dims(), other.dims()));
        }
        Ok(())
    }

    /// `1×C×H×W` tensor.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(
            [1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::c(v as f64)).collect(),
        )
        .expect("consistent by construction")
    }

    /// Image from item `n` of an `N×C×H×W` tensor (values are not clamped).
    pub fn from_tensor<T: Float>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let (batch, c, h, w) = t.dims4()?;
        if n >= batch {
            return Err(shape_err!("batch index {n} of {batch}"));
        }
        let len = c * h * w;
        let data = t.data()[n * len..(n + 1) * len].iter().map(|v| v.f64() as f32).collect();
        Self::new(h, w, c, data)
    }

    pub fn batch_to_tensor<T: Float>(images: &[Image]) -> Result<Tensor<T>> {
        let items: Vec<Tensor<T>> = images.iter().map(|i| i.to_tensor()).collect();
        Tensor::stack(&items)
    }

    /// Quantize to 8-bit, clamping to `[0, 1]`.
    pub fn to_bytes_interleaved(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.push((self.get(y, x, c).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn from_bytes_interleaved(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * channels {
            return Err(shape_err!("{} bytes for {height}×{width}×{channels}", bytes.len()));
        }
        Ok(Self::from_fn(height, width, channels, |y, x, c| {
            bytes[(y * width + x) * channels + c] as f32 / 255.0
        }))
    }

    /// Encode as binary PGM (1 channel) or PPM (3 channels), maxval 255.
    pub fn encode_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes_interleaved());
        out
    }

    pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(format!("unsupported magic {m:?}")),
        };
        let parse = |s: String| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
        let width = parse(token()?)?;
        let height = parse(token()?)?;
        let maxval = parse(token()?)?;
        if maxval != 255 {
            return Err(format!("maxval {maxval} unsupported (expected 255)"));
        }
        // exactly one whitespace byte separates the header from the raster
        let body = pos + 1;
        let need = width * height * channels;
        if bytes.len() < body + need {
            return Err(format!("raster truncated: {} of {need} bytes", bytes.len().saturating_sub(body)));
        }
        Self::from_bytes_interleaved(height, width, channels, &bytes[body..body + need]).map_err(|e| e.to_string())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::decode_pnm(&bytes).map_err(|reason| Error::Image { path: path.to_path_buf(), reason })
    }

    /// Write atomically (temporary file + rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode_pnm())
    }
}

/// Write `bytes` to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
