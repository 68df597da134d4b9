//! RGB images with intensities in `[0, 1]`, stored channel-planar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::{cast_vec, Real};

/// `H × W × 3` image, stored as three contiguous `H × W` row-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T = f32> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn filled(height: usize, width: usize, rgb: [T; 3]) -> Self {
        let hw = height * width;
        let mut data = Vec::with_capacity(3 * hw);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, hw));
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Wraps planar `3 × H × W` data.
    pub fn from_planar(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "planar buffer of {} values does not match 3×{height}×{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from row-major interleaved samples (`H × W × channels`).
    pub fn from_interleaved(height: usize, width: usize, channels: usize, data: &[T]) -> Result<Self> {
        Self::from_strided(height, width, channels, data, false)
    }

    /// Builds an image from column-major interleaved samples: pixel `(y, x)`
    /// starts at `(x · H + y) · channels`. The result is the same canonical
    /// image that the row-major constructor would give.
    pub fn from_column_major(height: usize, width: usize, channels: usize, data: &[T]) -> Result<Self> {
        Self::from_strided(height, width, channels, data, true)
    }

    fn from_strided(
        height: usize,
        width: usize,
        channels: usize,
        data: &[T],
        column_major: bool,
    ) -> Result<Self> {
        if channels != 3 {
            return Err(Error::Input(format!("expected 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} samples do not match {height}×{width}×{channels}",
                data.len()
            )));
        }
        let hw = height * width;
        let mut planar = vec![T::zero(); 3 * hw];
        for y in 0..height {
            for x in 0..width {
                let pix = if column_major { x * height + y } else { y * width + x };
                for c in 0..3 {
                    planar[c * hw + y * width + x] = data[pix * 3 + c];
                }
            }
        }
        Self::from_planar(height, width, planar)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let hw = self.pixel_count();
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let hw = self.pixel_count();
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[c * self.pixel_count() + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let hw = self.pixel_count();
        self.data[c * hw + y * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [T; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn same_shape(&self, other: &Image<T>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_shape(&self, other: &Image<T>, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}×{} vs {}×{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn to_interleaved(&self) -> Vec<T> {
        let hw = self.pixel_count();
        let mut out = Vec::with_capacity(3 * hw);
        for p in 0..hw {
            for c in 0..3 {
                out.push(self.data[c * hw + p]);
            }
        }
        out
    }

    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        out.data
            .iter_mut()
            .for_each(|v| *v = v.max(T::zero()).min(T::one()));
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Input(format!(
                "crop {height}×{width}+{top}+{left} exceeds {}×{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            let plane = self.plane(c);
            for y in top..top + height {
                data.extend_from_slice(&plane[y * self.width + left..y * self.width + left + width]);
            }
        }
        Self::from_planar(height, width, data)
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            data: cast_vec(&self.data),
        }
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let n = self.pixel_count().max(1) as f64;
        let mut out = [0.0; 3];
        for (c, m) in out.iter_mut().enumerate() {
            *m = self.plane(c).iter().map(|v| v.as_f64()).sum::<f64>() / n;
        }
        out
    }

    /// Rec. 601 luma averaged over the image.
    pub fn mean_luminance(&self) -> f64 {
        let [r, g, b] = self.channel_means();
        0.299 * r + 0.587 * g + 0.114 * b
    }

    /// Lays images out left to right on a shared canvas, padding shorter ones
    /// with black.
    pub fn hstack(images: &[Image<T>]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Input("nothing to tile".into()));
        }
        let height = images.iter().map(|i| i.height).max().unwrap_or(0);
        let width: usize = images.iter().map(|i| i.width).sum();
        let mut canvas = Image::filled(height, width, [T::zero(); 3]);
        let mut left = 0;
        for img in images {
            for c in 0..3 {
                for y in 0..img.height {
                    for x in 0..img.width {
                        canvas.set(c, y, left + x, img.get(c, y, x));
                    }
                }
            }
            left += img.width;
        }
        Ok(canvas)
    }
}

fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Image<f32> {
    /// Snaps every sample to the nearest 16-bit level, matching what a
    /// 16-bit PNG round trip produces.
    pub fn quantized16(&self) -> Self {
        let mut out = self.clone();
        out.data
            .iter_mut()
            .for_each(|v| *v = quantize16(*v) as f32 / 65535.0);
        out
    }

    pub fn encode_png(&self, sixteen_bit: bool) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(Cursor::new(&mut bytes), self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            let raw: Vec<u8> = if sixteen_bit {
                enc.set_depth(png::BitDepth::Sixteen);
                self.to_interleaved()
                    .into_iter()
                    .flat_map(|v| quantize16(v).to_be_bytes())
                    .collect()
            } else {
                enc.set_depth(png::BitDepth::Eight);
                self.to_interleaved().into_iter().map(quantize8).collect()
            };
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Input(format!("png header: {e}")))?;
            writer
                .write_image_data(&raw)
                .map_err(|e| Error::Input(format!("png data: {e}")))?;
            writer
                .finish()
                .map_err(|e| Error::Input(format!("png finish: {e}")))?;
        }
        Ok(bytes)
    }

    pub fn write_png(&self, path: &Path, sixteen_bit: bool) -> Result<()> {
        let bytes = self.encode_png(sixteen_bit).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Decodes an 8- or 16-bit PNG (gray, gray+alpha, RGB, RGBA or palette);
    /// alpha is dropped and gray is replicated.
    pub fn decode_png(bytes: &[u8]) -> std::result::Result<Self, String> {
        Self::decode_from(Cursor::new(bytes))
    }

    fn decode_from<R: std::io::BufRead + std::io::Seek>(reader: R) -> std::result::Result<Self, String> {
        let mut decoder = png::Decoder::new(reader);
        decoder.set_transformations(png::Transformations::EXPAND);
        let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| "image too large".to_string())?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
        let (h, w) = (info.height as usize, info.width as usize);
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err("unexpanded palette".into()),
        };
        let samples: Vec<f32> = match info.bit_depth {
            png::BitDepth::Sixteen => buf[..info.line_size * h]
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
                .collect(),
            png::BitDepth::Eight => buf[..info.line_size * h]
                .iter()
                .map(|&b| b as f32 / 255.0)
                .collect(),
            other => return Err(format!("unsupported bit depth {other:?}")),
        };
        let hw = h * w;
        let mut planar = vec![0.0f32; 3 * hw];
        for p in 0..hw {
            let px = &samples[p * channels..(p + 1) * channels];
            let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            for c in 0..3 {
                planar[c * hw + p] = rgb[c];
            }
        }
        Image::from_planar(h, w, planar).map_err(|e| e.to_string())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::decode_from(BufReader::new(file)).map_err(|reason| Error::Image {
            path: path.to_path_buf(),
            reason,
        })
    }
}
