//! Correlation heatmaps as binary PPM images.

use crate::stats::CorrelationReport;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapStyle {
    /// Side of one cell in pixels.
    pub cell: usize,
    pub outline: [u8; 3],
}

impl Default for HeatmapStyle {
    fn default() -> Self {
        HeatmapStyle {
            cell: 8,
            outline: [220, 20, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    /// RGB, row-major.
    pub pixels: Vec<u8>,
}

impl Pixmap {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// White at |r| = 0 through dark blue at |r| = 1.
pub fn cell_color(abs_r: f64) -> [u8; 3] {
    let v = abs_r.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    [lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0)]
}

/// One `cell x cell` block per model pair in manifest order; significant pairs get an outline.
pub fn render_heatmap(report: &CorrelationReport, style: &HeatmapStyle) -> Pixmap {
    let k = report.len();
    let cell = style.cell.max(1);
    let side = k * cell;
    let mut img = Pixmap {
        width: side,
        height: side,
        pixels: vec![255; 3 * side * side],
    };
    for i in 0..k {
        for j in 0..k {
            let color = cell_color(report.r[(i, j)].abs());
            let outlined = report.significant[(i, j)] && cell >= 3;
            for dy in 0..cell {
                for dx in 0..cell {
                    let edge = dx == 0 || dy == 0 || dx == cell - 1 || dy == cell - 1;
                    let rgb = if outlined && edge { style.outline } else { color };
                    img.set(j * cell + dx, i * cell + dy, rgb);
                }
            }
        }
    }
    img
}

/// Cells `(i, j)` whose top-left pixel carries the outline color.
pub fn outlined_cells(img: &Pixmap, k: usize, style: &HeatmapStyle) -> Vec<(usize, usize)> {
    let cell = style.cell.max(1);
    let mut out = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if img.pixel(j * cell, i * cell) == style.outline {
                out.push((i, j));
            }
        }
    }
    out
}
