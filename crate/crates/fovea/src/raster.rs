//! RGB raster images: in-memory float representation, area-average resizing,
//! and binary PPM (P6) input/output.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

/// RGB image, interleaved channels, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    data: Vec<f32>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize) -> Self {
        RasterImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        RasterImage {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Resample to `out_w` x `out_h` by exact box averaging: each output
    /// pixel integrates the source rectangle it covers, with fractional
    /// coverage at the edges. Identity at equal size; constant images stay
    /// constant at any size.
    pub fn resize_area(&self, out_w: usize, out_h: usize) -> RasterImage {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        let mut out = RasterImage::new(out_w, out_h);
        let sx = self.width as f64 / out_w as f64;
        let sy = self.height as f64 / out_h as f64;
        for oy in 0..out_h {
            let y_lo = oy as f64 * sy;
            let y_hi = (oy + 1) as f64 * sy;
            for ox in 0..out_w {
                let x_lo = ox as f64 * sx;
                let x_hi = (ox + 1) as f64 * sx;
                let mut acc = [0.0f64; 3];
                let mut total = 0.0f64;
                let y_start = y_lo.floor() as usize;
                let y_end = (y_hi.ceil() as usize).min(self.height);
                let x_start = x_lo.floor() as usize;
                let x_end = (x_hi.ceil() as usize).min(self.width);
                for py in y_start..y_end {
                    let wy = (y_hi.min((py + 1) as f64) - y_lo.max(py as f64)).max(0.0);
                    if wy == 0.0 {
                        continue;
                    }
                    for px in x_start..x_end {
                        let wx = (x_hi.min((px + 1) as f64) - x_lo.max(px as f64)).max(0.0);
                        if wx == 0.0 {
                            continue;
                        }
                        let w = wx * wy;
                        let p = self.pixel(px, py);
                        acc[0] += w * f64::from(p[0]);
                        acc[1] += w * f64::from(p[1]);
                        acc[2] += w * f64::from(p[2]);
                        total += w;
                    }
                }
                let inv = if total > 0.0 { 1.0 / total } else { 0.0 };
                out.set_pixel(
                    ox,
                    oy,
                    [
                        (acc[0] * inv) as f32,
                        (acc[1] * inv) as f32,
                        (acc[2] * inv) as f32,
                    ],
                );
            }
        }
        out
    }

    /// View as an [h, w, 3] tensor in the requested precision.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = self.data.iter().map(|&v| T::from_f64(f64::from(v))).collect();
        Tensor::new(vec![self.height, self.width, 3], data).expect("raster shape consistent")
    }

    /// Binary PPM (P6, maxval 255). Values are clamped to [0, 1] and
    /// rounded half-up; the byte stream is fully determined by the pixels.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.width * self.height * 3 + 32);
        buf.extend_from_slice(format!("P6\n{} {}\n255\n", self.width, self.height).as_bytes());
        for &v in &self.data {
            let b = (f64::from(v).clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.push(b);
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<RasterImage> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        parse_ppm(&bytes).map_err(|msg| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg,
        })
    }
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<RasterImage, String> {
    // Header: "P6" <ws> width <ws> height <ws> maxval <single ws> raster.
    let mut pos = 0;
    let mut read_token = || -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            return Err("comments not supported".into());
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if read_token()? != "P6" {
        return Err("not a P6 ppm".into());
    }
    let width: usize = read_token()?.parse().map_err(|_| "bad width")?;
    let height: usize = read_token()?.parse().map_err(|_| "bad height")?;
    let maxval: usize = read_token()?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    let mut img = RasterImage::new(width, height);
    for (i, &b) in bytes[pos..pos + need].iter().enumerate() {
        img.data[i] = f32::from(b) / 255.0;
    }
    Ok(img)
}
