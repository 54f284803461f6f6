//! Minimal RGB rasterizer for loss curves and true-vs-predicted scatters.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::datagen::write_image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GREY: Rgb = [170, 170, 170];
pub const PALETTE: [Rgb; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

const MARGIN: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![255; width * height * 3],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: i64, y: i64, color: Rgb) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&color);
    }

    /// Bresenham line.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn marker(&mut self, (x, y): (i64, i64), color: Rgb) {
        for dy in -1..=1 {
            for dx in -1..=1 {
                self.set(x + dx, y + dy, color);
            }
        }
    }

    /// `(H, W, 3)` tensor of 0-255 values.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64).collect();
        Tensor::new(vec![self.height, self.width, 3], data).expect("canvas buffer matches its shape")
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let fail = |e: png::EncodingError| Error::ImageFormat {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut w = enc.write_header().map_err(fail)?;
        w.write_image_data(&self.pixels).map_err(fail)?;
        w.finish().map_err(fail)
    }

    /// Writes `<stem>.dmim` and `<stem>.png`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_image(&dir.join(format!("{stem}.dmim")), &self.to_tensor())?;
        self.write_png(&dir.join(format!("{stem}.png")))
    }
}

/// Maps data coordinates into the plot area.
#[derive(Clone, Copy, Debug)]
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    width: usize,
    height: usize,
    margin: usize,
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64), width: usize, height: usize) -> Self {
        let widen = |(lo, hi): (f64, f64)| {
            if !(lo.is_finite() && hi.is_finite()) {
                (0.0, 1.0)
            } else if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        Self {
            x: widen(x),
            y: widen(y),
            width,
            height,
            margin: MARGIN.min(width.min(height) / 4),
        }
    }

    fn map(&self, x: f64, y: f64) -> (i64, i64) {
        let m = self.margin;
        let pw = (self.width - 2 * m) as f64;
        let ph = (self.height - 2 * m) as f64;
        let px = m as f64 + (x - self.x.0) / (self.x.1 - self.x.0) * pw;
        let py = (self.height - m) as f64 - (y - self.y.0) / (self.y.1 - self.y.0) * ph;
        (px.round() as i64, py.round() as i64)
    }

    fn axes(&self, c: &mut Canvas) {
        let m = self.margin;
        let (l, r) = (m as i64, (self.width - m) as i64);
        let (t, b) = (m as i64, (self.height - m) as i64);
        c.line((l, b), (r, b), BLACK);
        c.line((l, t), (l, b), BLACK);
        for i in 0..=4 {
            let x = l + (r - l) * i / 4;
            let y = b - (b - t) * i / 4;
            c.line((x, b), (x, b + 4), BLACK);
            c.line((l - 4, y), (l, y), BLACK);
        }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Polylines of per-epoch losses, one colour per series.
pub fn loss_plot(series: &[Vec<f64>], width: usize, height: usize) -> Canvas {
    let mut c = Canvas::new(width, height);
    let epochs = series.iter().map(Vec::len).max().unwrap_or(1).max(2);
    let y = range(series.iter().flatten().copied());
    let frame = Frame::new((1.0, epochs as f64), (y.0.min(0.0), y.1), width, height);
    frame.axes(&mut c);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<(i64, i64)> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(e, &v)| frame.map((e + 1) as f64, v))
            .collect();
        for w in points.windows(2) {
            c.line(w[0], w[1], color);
        }
        for &p in &points {
            c.marker(p, color);
        }
    }
    c
}

/// Predicted against true values with the identity line.
pub fn scatter_plot(true_values: &[f64], predicted: &[f64], width: usize, height: usize) -> Canvas {
    let mut c = Canvas::new(width, height);
    let r = range(true_values.iter().chain(predicted).copied());
    let frame = Frame::new(r, r, width, height);
    frame.axes(&mut c);
    c.line(frame.map(frame.x.0, frame.x.0), frame.map(frame.x.1, frame.x.1), GREY);
    for (&t, &p) in true_values.iter().zip(predicted) {
        if t.is_finite() && p.is_finite() {
            c.marker(frame.map(t, p), PALETTE[0]);
        }
    }
    c
}
