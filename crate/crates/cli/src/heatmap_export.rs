//! Heatmap export: an 8×8 CSV and an optional binary PPM overlay.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ctxpeft_core::pipeline::GRID;
use ctxpeft_core::HeatmapGrid;

/// An RGB image in binary portable-pixmap (P6) form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Pixmap {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Self {
            width,
            height,
            rgb: color.repeat(width * height),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            ensure!(start < pos, "truncated pixmap header");
            fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
        }
        ensure!(fields[0] == "P6", "only binary P6 pixmaps are supported");
        let width: usize = fields[1].parse()?;
        let height: usize = fields[2].parse()?;
        ensure!(fields[3] == "255", "only 8-bit pixmaps are supported");
        let body = &bytes[pos + 1..];
        ensure!(body.len() == 3 * width * height, "pixmap body has {} bytes, expected {}", body.len(), 3 * width * height);
        Ok(Self {
            width,
            height,
            rgb: body.to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&bytes).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).with_context(|| format!("writing {}", path.display()))
    }
}

pub const RAMP_BOTTOM: [u8; 3] = [0, 0, 255];
pub const RAMP_TOP: [u8; 3] = [255, 0, 0];

/// Blue → green → red colour ramp over `t ∈ [0, 1]`.
pub fn ramp(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let u = 2.0 * t;
        (0.0, u, 1.0 - u)
    } else {
        let u = 2.0 * t - 1.0;
        (u, 1.0 - u, 0.0)
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

pub fn grid_csv(grid: &HeatmapGrid) -> String {
    let mut out = String::new();
    for row in grid.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn parse_grid_csv(text: &str) -> Result<Vec<f32>> {
    let mut values = Vec::with_capacity(GRID * GRID);
    for (i, line) in text.lines().enumerate() {
        let row: Vec<f32> = line
            .split(',')
            .map(|c| c.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("row {i}"))?;
        ensure!(row.len() == GRID, "row {i} has {} cells", row.len());
        values.extend(row);
    }
    ensure!(values.len() == GRID * GRID, "expected {GRID} rows");
    Ok(values)
}

/// Upscales the grid to the base image with nearest-neighbour sampling,
/// maps min..max onto the ramp and blends with weight `alpha`.
pub fn overlay(grid: &HeatmapGrid, base: &Pixmap, alpha: f32) -> Result<Pixmap> {
    if base.width == 0 || base.height == 0 {
        bail!("base image is empty");
    }
    let (lo, hi) = grid.min_max();
    let span = hi - lo;
    let mut out = base.clone();
    for y in 0..base.height {
        let gy = y * GRID / base.height;
        for x in 0..base.width {
            let gx = x * GRID / base.width;
            let v = grid.get(gy, gx);
            let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
            let c = ramp(t);
            let i = 3 * (y * base.width + x);
            for k in 0..3 {
                let mixed = (1.0 - alpha) * f32::from(base.rgb[i + k]) + alpha * f32::from(c[k]);
                out.rgb[i + k] = mixed.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// Writes `<stem>.csv` always and `<stem>.ppm` when a base image is given.
pub fn export_heatmap(grid: &HeatmapGrid, base: Option<&Pixmap>, dir: &Path, stem: &str) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, grid_csv(grid)).with_context(|| format!("writing {}", csv.display()))?;
    if let Some(base) = base {
        overlay(grid, base, 0.5)?.write(&dir.join(format!("{stem}.ppm")))?;
    }
    Ok(())
}
