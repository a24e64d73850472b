//! A small rasterizer for diagnostic PNGs, plus CSV exports of samples and
//! trajectories. The PNGs carry no text or ticks.

use std::io::BufWriter;
use std::path::Path;

use reflow_core::Tensor;

use crate::error::{IoContext, LabError, Result};

pub type Rgb = [u8; 3];

pub const BLUE: Rgb = [31, 119, 180];
pub const ORANGE: Rgb = [255, 127, 14];
pub const GREEN: Rgb = [44, 160, 44];
pub const GREY: Rgb = [170, 170, 170];
pub const BLACK: Rgb = [0, 0, 0];

/// Data-space rectangle `[x0, x1] × [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Bounds {
    /// Tight box around the first two columns plus a 5% margin.
    pub fn around(sets: &[&Tensor]) -> Self {
        let mut b = Bounds {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for s in sets {
            for r in s.iter_rows().filter(|r| r.iter().all(|v| v.is_finite())) {
                let y = r.get(1).copied().unwrap_or(0.0);
                b.x0 = b.x0.min(r[0]);
                b.x1 = b.x1.max(r[0]);
                b.y0 = b.y0.min(y);
                b.y1 = b.y1.max(y);
            }
        }
        if b.x1.is_nan() || b.x1 < b.x0 {
            return Bounds {
                x0: -1.0,
                x1: 1.0,
                y0: -1.0,
                y1: 1.0,
            };
        }
        let mx = 0.05 * (b.x1 - b.x0).max(1e-9);
        let my = 0.05 * (b.y1 - b.y0).max(1e-9);
        Bounds {
            x0: b.x0 - mx,
            x1: b.x1 + mx,
            y0: b.y0 - my,
            y1: b.y1 + my,
        }
    }
}

pub struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<Rgb>,
    bounds: Bounds,
}

impl Canvas {
    pub fn new(width: usize, height: usize, bounds: Bounds) -> Self {
        let mut c = Canvas {
            width,
            height,
            pixels: vec![[255; 3]; width * height],
            bounds,
        };
        c.frame();
        c
    }

    fn frame(&mut self) {
        let (w, h) = (self.width as i64, self.height as i64);
        self.line_px((0, 0), (w - 1, 0), BLACK);
        self.line_px((0, h - 1), (w - 1, h - 1), BLACK);
        self.line_px((0, 0), (0, h - 1), BLACK);
        self.line_px((w - 1, 0), (w - 1, h - 1), BLACK);
    }

    fn to_px(&self, x: f64, y: f64) -> Option<(i64, i64)> {
        if !(x.is_finite() && y.is_finite()) {
            return None;
        }
        let b = &self.bounds;
        let u = (x - b.x0) / (b.x1 - b.x0) * (self.width - 1) as f64;
        let v = (b.y1 - y) / (b.y1 - b.y0) * (self.height - 1) as f64;
        Some((u.round() as i64, v.round() as i64))
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = c;
        }
    }

    fn line_px(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        // clipped lines are bounded by the canvas diagonal
        let limit = 4 * (self.width + self.height) as i64;
        for _ in 0..limit {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    /// Points from the first two columns, drawn as 3×3 squares.
    pub fn scatter(&mut self, pts: &Tensor, c: Rgb) {
        for r in pts.iter_rows() {
            let y = r.get(1).copied().unwrap_or(0.0);
            if let Some((u, v)) = self.to_px(r[0], y) {
                for du in -1..=1 {
                    for dv in -1..=1 {
                        self.put(u + du, v + dv, c);
                    }
                }
            }
        }
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], c: Rgb) {
        let px: Vec<_> = pts.iter().filter_map(|&(x, y)| self.to_px(x, y)).collect();
        for w in px.windows(2) {
            self.line_px(w[0], w[1], c);
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).at(path)?;
        let mut enc =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let err = |e: png::EncodingError| LabError::format("png", e.to_string());
        let mut w = enc.write_header().map_err(err)?;
        let bytes: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        w.write_image_data(&bytes).map_err(err)?;
        w.finish().map_err(err)
    }
}

/// Scatter of generated samples over reference data.
pub fn samples_png(path: &Path, reference: &Tensor, samples: &Tensor) -> Result<()> {
    let mut c = Canvas::new(512, 512, Bounds::around(&[reference, samples]));
    c.scatter(reference, GREY);
    c.scatter(samples, BLUE);
    c.save_png(path)
}

/// Trajectories of the first `max_paths` rows, one polyline each.
pub fn trajectories_png(path: &Path, states: &[Tensor], max_paths: usize) -> Result<()> {
    let refs: Vec<&Tensor> = states.iter().collect();
    let mut c = Canvas::new(512, 512, Bounds::around(&refs));
    let n = states.first().map_or(0, |s| s.rows()).min(max_paths);
    for i in 0..n {
        let pts: Vec<(f64, f64)> = states
            .iter()
            .map(|s| (s.get(i, 0), if s.cols() > 1 { s.get(i, 1) } else { 0.0 }))
            .collect();
        c.polyline(&pts, GREY);
    }
    if let (Some(first), Some(last)) = (states.first(), states.last()) {
        let head = |t: &Tensor| t.select_rows(&(0..n).collect::<Vec<_>>());
        c.scatter(&head(first), ORANGE);
        c.scatter(&head(last), BLUE);
    }
    c.save_png(path)
}

/// One polyline per series over a shared x axis.
pub fn series_png(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let pts: Vec<f64> = series.iter().flatten().flat_map(|&(x, y)| [x, y]).collect();
    let all = Tensor::matrix(pts.len() / 2, 2, pts);
    let mut c = Canvas::new(640, 400, Bounds::around(&[&all]));
    let colors = [BLUE, ORANGE, GREEN, BLACK, GREY];
    for (k, s) in series.iter().enumerate() {
        let col = colors[k % colors.len()];
        c.polyline(s, col);
        let m = Tensor::matrix(s.len(), 2, s.iter().flat_map(|&(x, y)| [x, y]).collect());
        c.scatter(&m, col);
    }
    c.save_png(path)
}

fn csv_err(e: csv::Error) -> LabError {
    LabError::format("csv export", e.to_string())
}

/// Header `x0,x1,…` then one row per point.
pub fn points_csv(path: &Path, pts: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record((0..pts.cols()).map(|k| format!("x{k}")))
        .map_err(csv_err)?;
    for r in pts.iter_rows() {
        w.write_record(r.iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    w.flush().at(path)
}

/// Long format: `sample,step,t,x0,x1,…`, one row per sample per visited time.
pub fn trajectory_csv(path: &Path, times: &[f64], states: &[Tensor]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let d = states.first().map_or(0, |s| s.cols());
    let mut header = vec!["sample".to_string(), "step".into(), "t".into()];
    header.extend((0..d).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(csv_err)?;
    let n = states.first().map_or(0, |s| s.rows());
    for i in 0..n {
        for (step, (t, s)) in times.iter().zip(states).enumerate() {
            let mut rec = vec![i.to_string(), step.to_string(), t.to_string()];
            rec.extend(s.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().at(path)
}
