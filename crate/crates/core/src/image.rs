//! Planar RGB images and PNG encoding.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("png decode: {0}")]
    Decode(String),
    #[error("unsupported png color type {0}")]
    UnsupportedColor(String),
    #[error("image has {got} values, {h}x{w} RGB needs {}", 3 * h * w)]
    Shape { h: usize, w: usize, got: usize },
}

/// A `3 × h × w` image with channel-planar values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != 3 * h * w {
            return Err(ImageError::Shape { h, w, got: data.len() });
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * h * w);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let hw = self.h * self.w;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let hw = self.h * self.w;
        let i = y * self.w + x;
        [self.data[i], self.data[hw + i], self.data[2 * hw + i]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let hw = self.h * self.w;
        let i = y * self.w + x;
        self.data[i] = rgb[0];
        self.data[hw + i] = rgb[1];
        self.data[2 * hw + i] = rgb[2];
    }

    /// 8-bit RGB PNG.
    pub fn to_png(&self) -> Vec<u8> {
        let mut rgb = Vec::with_capacity(3 * self.h * self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                for v in self.pixel(y, x) {
                    rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        encode_png(self.w, self.h, png::ColorType::Rgb, &rgb)
    }

    /// Decode an 8-bit RGB, RGBA, or grayscale PNG.
    pub fn from_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| ImageError::Decode(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| ImageError::Decode("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| ImageError::Decode(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(ImageError::UnsupportedColor(format!("{:?}", info.bit_depth)));
        }
        let channels = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            other => return Err(ImageError::UnsupportedColor(format!("{other:?}"))),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let mut img = RgbImage::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let p = &buf[(y * w + x) * channels..];
                let rgb = if channels == 1 { [p[0]; 3] } else { [p[0], p[1], p[2]] };
                img.set_pixel(y, x, rgb.map(|v| v as f32 / 255.0));
            }
        }
        Ok(img)
    }
}

pub(crate) fn encode_png(w: usize, h: usize, color: png::ColorType, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, w as u32, h as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("png header");
        writer.write_image_data(pixels).expect("png data");
    }
    out
}
