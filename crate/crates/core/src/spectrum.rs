//! Blockwise 8x8 DCT decomposition into 192 frequency channels.
//!
//! Every 8x8 pixel block of each RGB plane is transformed with an orthonormal
//! 2-D DCT-II. Coefficient `(u, v)` (row frequency, column frequency) of the
//! block at `(r, c)` lands at spatial position `(r, c)` of channel
//! `color * 64 + zigzag(u, v)`, so channel index grows with frequency inside
//! each color group. Pixels are in `[0, 1]` with no level shift.

use std::path::Path;
use std::sync::OnceLock;

use image::{imageops::FilterType, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Real;

pub const BLOCK: usize = 8;
pub const FREQS: usize = BLOCK * BLOCK;
pub const COLORS: usize = 3;
pub const SPECTRAL_CHANNELS: usize = COLORS * FREQS;

pub const CACHE_MAGIC: &[u8; 5] = b"CDCT1";
const CACHE_VERSION: u32 = 1;
pub const CACHE_HEADER_LEN: usize = 5 + 4 * 4;

/// JPEG zigzag scan: `ZIGZAG[u][v]` is the scan position of frequency `(u, v)`.
const ZIGZAG: [[u8; 8]; 8] = [
    [0, 1, 5, 6, 14, 15, 27, 28],
    [2, 4, 7, 13, 16, 26, 29, 42],
    [3, 8, 12, 17, 25, 30, 41, 43],
    [9, 11, 18, 24, 31, 40, 44, 53],
    [10, 19, 23, 32, 39, 45, 52, 54],
    [20, 22, 33, 38, 46, 51, 55, 60],
    [21, 34, 37, 47, 50, 56, 59, 61],
    [35, 36, 48, 49, 57, 58, 62, 63],
];

fn unzigzag_table() -> &'static [(usize, usize); FREQS] {
    static TABLE: OnceLock<[(usize, usize); FREQS]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [(0, 0); FREQS];
        for (u, row) in ZIGZAG.iter().enumerate() {
            for (v, &k) in row.iter().enumerate() {
                t[k as usize] = (u, v);
            }
        }
        t
    })
}

pub fn zigzag(u: usize, v: usize) -> Result<usize> {
    if u >= BLOCK || v >= BLOCK {
        return Err(Error::invalid(format!("frequency ({u}, {v}) outside 0..8")));
    }
    Ok(ZIGZAG[u][v] as usize)
}

pub fn inverse_zigzag(k: usize) -> Result<(usize, usize)> {
    if k >= FREQS {
        return Err(Error::invalid(format!("zigzag index {k} outside 0..64")));
    }
    Ok(unzigzag_table()[k])
}

/// `basis[u][x] = a(u) cos((2x + 1) u pi / 16)` with orthonormal scaling.
fn basis<T: Real>() -> [[T; BLOCK]; BLOCK] {
    let mut m = [[T::zero(); BLOCK]; BLOCK];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for (x, e) in row.iter_mut().enumerate() {
            *e = T::of(a * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos());
        }
    }
    m
}

/// Forward transform of an interleaved `height x width x 3` buffer into a
/// channel-major `192 x (height/8) x (width/8)` buffer.
pub fn forward_blocks<T: Real>(pixels: &[T], height: usize, width: usize) -> Result<Vec<T>> {
    check_dims(height, width)?;
    if pixels.len() != height * width * COLORS {
        return Err(Error::invalid("pixel buffer does not match dimensions"));
    }
    let c = basis::<T>();
    let (br, bc) = (height / BLOCK, width / BLOCK);
    let plane = br * bc;
    let mut out = vec![T::zero(); SPECTRAL_CHANNELS * plane];
    let mut block = [[T::zero(); BLOCK]; BLOCK];
    let mut tmp = [[T::zero(); BLOCK]; BLOCK];
    for color in 0..COLORS {
        for r in 0..br {
            for col in 0..bc {
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, e) in row.iter_mut().enumerate() {
                        *e = pixels[((r * BLOCK + y) * width + col * BLOCK + x) * COLORS + color];
                    }
                }
                // tmp = C * block, coef = tmp * C^T
                for u in 0..BLOCK {
                    for x in 0..BLOCK {
                        tmp[u][x] = (0..BLOCK).map(|y| c[u][y] * block[y][x]).sum();
                    }
                }
                for u in 0..BLOCK {
                    for v in 0..BLOCK {
                        let coef: T = (0..BLOCK).map(|x| tmp[u][x] * c[v][x]).sum();
                        let ch = color * FREQS + ZIGZAG[u][v] as usize;
                        out[ch * plane + r * bc + col] = coef;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`forward_blocks`].
pub fn inverse_blocks<T: Real>(coefs: &[T], block_rows: usize, block_cols: usize) -> Result<Vec<T>> {
    let plane = block_rows * block_cols;
    if coefs.len() != SPECTRAL_CHANNELS * plane {
        return Err(Error::ChannelCount {
            expected: SPECTRAL_CHANNELS,
            got: coefs.len().checked_div(plane).unwrap_or(0),
        });
    }
    let c = basis::<T>();
    let (height, width) = (block_rows * BLOCK, block_cols * BLOCK);
    let mut out = vec![T::zero(); height * width * COLORS];
    let mut f = [[T::zero(); BLOCK]; BLOCK];
    let mut tmp = [[T::zero(); BLOCK]; BLOCK];
    for color in 0..COLORS {
        for r in 0..block_rows {
            for col in 0..block_cols {
                for u in 0..BLOCK {
                    for v in 0..BLOCK {
                        let ch = color * FREQS + ZIGZAG[u][v] as usize;
                        f[u][v] = coefs[ch * plane + r * block_cols + col];
                    }
                }
                // tmp = C^T * F, block = tmp * C
                for y in 0..BLOCK {
                    for v in 0..BLOCK {
                        tmp[y][v] = (0..BLOCK).map(|u| c[u][y] * f[u][v]).sum();
                    }
                }
                for y in 0..BLOCK {
                    for x in 0..BLOCK {
                        let p: T = (0..BLOCK).map(|v| tmp[y][v] * c[v][x]).sum();
                        out[((r * BLOCK + y) * width + col * BLOCK + x) * COLORS + color] = p;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(BLOCK) || !width.is_multiple_of(BLOCK) {
        return Err(Error::NotBlockAligned { height, width });
    }
    Ok(())
}

/// An RGB image, `height x width x 3` interleaved, nominally in `[0, 1]`.
///
/// Reconstructions after channel surgery may leave `[0, 1]`; call
/// [`ImageTensor::clamped`] when a displayable image is needed.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width * COLORS {
            return Err(Error::invalid(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * COLORS,
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * COLORS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..COLORS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * COLORS + c]
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        self
    }

    /// Mirror left to right.
    pub fn hflip(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let at = (y * self.width + x) * COLORS;
                data.extend_from_slice(&self.data[at..at + COLORS]);
            }
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    /// Reads a PNG or JPEG whose sides are already multiples of 8.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    /// Reads any PNG/JPEG, center-crops to a square and resizes to
    /// `size x size`.
    pub fn load_square(path: impl AsRef<Path>, size: usize) -> Result<Self> {
        check_dims(size, size)?;
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let side = w.min(h);
        let cropped = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
        let resized = if side as usize == size {
            cropped
        } else {
            image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle)
        };
        Self::from_rgb8(&resized)
    }

    /// Writes a PNG, clamping to `[0, 1]` and quantizing to 8 bits.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// 192 frequency channels over a grid of `block_rows x block_cols` blocks,
/// stored channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralTensor {
    block_rows: usize,
    block_cols: usize,
    data: Vec<f32>,
}

impl SpectralTensor {
    pub fn new(block_rows: usize, block_cols: usize, data: Vec<f32>) -> Result<Self> {
        let plane = block_rows * block_cols;
        if plane == 0 || data.len() != SPECTRAL_CHANNELS * plane {
            return Err(Error::ChannelCount {
                expected: SPECTRAL_CHANNELS,
                got: data.len().checked_div(plane).unwrap_or(0),
            });
        }
        Ok(Self {
            block_rows,
            block_cols,
            data,
        })
    }

    pub fn zeros(block_rows: usize, block_cols: usize) -> Self {
        Self {
            block_rows,
            block_cols,
            data: vec![0.0; SPECTRAL_CHANNELS * block_rows * block_cols],
        }
    }

    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    pub fn block_cols(&self) -> usize {
        self.block_cols
    }

    pub fn channels(&self) -> usize {
        SPECTRAL_CHANNELS
    }

    /// `(block_rows, block_cols, 192)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.block_rows, self.block_cols, SPECTRAL_CHANNELS)
    }

    pub fn plane_len(&self) -> usize {
        self.block_rows * self.block_cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        let p = self.plane_len();
        &self.data[ch * p..(ch + 1) * p]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f32] {
        let p = self.plane_len();
        &mut self.data[ch * p..(ch + 1) * p]
    }

    pub fn get(&self, ch: usize, row: usize, col: usize) -> f32 {
        self.data[ch * self.plane_len() + row * self.block_cols + col]
    }
}

pub fn dct_decompose(image: &ImageTensor) -> Result<SpectralTensor> {
    let data = forward_blocks(&image.data, image.height, image.width)?;
    SpectralTensor::new(image.height / BLOCK, image.width / BLOCK, data)
}

/// Exact inverse of [`dct_decompose`]; the result is not clamped.
pub fn idct_reconstruct(spec: &SpectralTensor) -> Result<ImageTensor> {
    let data = inverse_blocks(&spec.data, spec.block_rows, spec.block_cols)?;
    ImageTensor::new(spec.block_rows * BLOCK, spec.block_cols * BLOCK, data)
}

/// Spectrum of the horizontally mirrored image, computed without a round
/// trip through pixels: block columns reverse and odd horizontal
/// frequencies change sign.
#[allow(clippy::needless_range_loop)]
pub fn hflip_spectrum(spec: &SpectralTensor) -> SpectralTensor {
    let mut out = spec.clone();
    let (rows, cols) = (spec.block_rows, spec.block_cols);
    for color in 0..COLORS {
        for u in 0..BLOCK {
            for v in 0..BLOCK {
                let ch = color * FREQS + ZIGZAG[u][v] as usize;
                let sign = if v % 2 == 1 { -1.0 } else { 1.0 };
                let src = spec.channel(ch);
                let dst = out.channel_mut(ch);
                for r in 0..rows {
                    for c in 0..cols {
                        dst[r * cols + c] = sign * src[r * cols + cols - 1 - c];
                    }
                }
            }
        }
    }
    out
}

/// Reconstruction from zigzag frequencies `lo..=hi` only, in every color.
pub fn band_reconstruct(spec: &SpectralTensor, lo: usize, hi: usize) -> Result<ImageTensor> {
    if lo > hi || hi >= FREQS {
        return Err(Error::invalid(format!("invalid band {lo}:{hi}")));
    }
    let mut kept = spec.clone();
    for color in 0..COLORS {
        for k in (0..lo).chain(hi + 1..FREQS) {
            kept.channel_mut(color * FREQS + k).fill(0.0);
        }
    }
    idct_reconstruct(&kept)
}

/// Keeps zigzag band `lo..=hi` of `keep` and takes every other frequency
/// from `donor`, in every color.
pub fn band_swap(
    keep: &SpectralTensor,
    donor: &SpectralTensor,
    lo: usize,
    hi: usize,
) -> Result<SpectralTensor> {
    if lo > hi || hi >= FREQS {
        return Err(Error::invalid(format!("invalid band {lo}:{hi}")));
    }
    if keep.shape() != donor.shape() {
        return Err(Error::invalid("band_swap needs spectra of equal shape"));
    }
    let mut out = keep.clone();
    for color in 0..COLORS {
        for k in (0..lo).chain(hi + 1..FREQS) {
            let ch = color * FREQS + k;
            out.channel_mut(ch).copy_from_slice(donor.channel(ch));
        }
    }
    Ok(out)
}

pub fn cache_encode(spec: &SpectralTensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(CACHE_HEADER_LEN + spec.data.len() * 4);
    buf.extend_from_slice(CACHE_MAGIC);
    for v in [
        CACHE_VERSION,
        spec.block_rows as u32,
        spec.block_cols as u32,
        SPECTRAL_CHANNELS as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &x in &spec.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn cache_decode(bytes: &[u8]) -> Result<SpectralTensor> {
    if bytes.len() < CACHE_HEADER_LEN {
        return Err(Error::Format("DCT cache shorter than its header".into()));
    }
    if &bytes[..5] != CACHE_MAGIC {
        return Err(Error::Format("not a DCT cache file (bad magic)".into()));
    }
    let word = |i: usize| {
        let at = 5 + 4 * i;
        u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
    };
    let (version, rows, cols, channels) = (word(0), word(1) as usize, word(2) as usize, word(3));
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported DCT cache version {version}")));
    }
    if channels as usize != SPECTRAL_CHANNELS {
        return Err(Error::Format(format!("DCT cache has {channels} channels")));
    }
    let payload = &bytes[CACHE_HEADER_LEN..];
    let expected = rows * cols * SPECTRAL_CHANNELS * 4;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "DCT cache payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    SpectralTensor::new(rows, cols, data)
}

pub fn cache_write(spec: &SpectralTensor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, cache_encode(spec))?;
    Ok(())
}

pub fn cache_read(path: impl AsRef<Path>) -> Result<SpectralTensor> {
    cache_decode(&std::fs::read(path)?)
}
