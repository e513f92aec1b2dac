//! Rendering preprocessed ECGs to fixed-size images, resizing, and
//! partitioning into the transformer's patch grid.
//!
//! Records are drawn black-on-white at a native canvas resolution, then
//! box-resized down; the larger native canvas anti-aliases the 1-px traces.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::signal::{EcgRecord, Lead};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("render failed: {0}")]
    Render(String),
    #[error("missing lead {0}")]
    MissingLead(Lead),
    #[error("patch error: {0}")]
    Patch(String),
    #[error("cache error on {path}: {msg}")]
    Cache { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Native render canvas side before the box resize.
pub const NATIVE_CANVAS: usize = 560;
/// Model input side after resize.
pub const MODEL_SIDE: usize = 224;

/// Fixed-size single-channel image; pixels are row-major floats in [0,1],
/// 1.0 = white background, 0.0 = black trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub source_record_id: String,
}

impl RasterImage {
    pub fn blank(width: usize, height: usize, source_record_id: &str) -> Self {
        RasterImage {
            width,
            height,
            pixels: vec![1.0; width * height],
            source_record_id: source_record_id.to_string(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// 4 rows x 2 columns; leads fill the grid column-major in plot order
/// (I, II, V1, V2 down the left column; V3..V6 down the right).
pub const GRID_ROWS: usize = 4;
pub const GRID_COLS: usize = 2;

/// Grid cell (row, col) hosting a plotted lead.
pub fn lead_cell(lead: Lead) -> Option<(usize, usize)> {
    Lead::PLOTTED
        .iter()
        .position(|&l| l == lead)
        .map(|i| (i % GRID_ROWS, i / GRID_ROWS))
}

/// Pixel rectangle (x0, y0, w, h) of a lead's cell on a square canvas.
pub fn lead_cell_rect(lead: Lead, canvas: usize) -> Option<(usize, usize, usize, usize)> {
    let (row, col) = lead_cell(lead)?;
    let cw = canvas / GRID_COLS;
    let ch = canvas / GRID_ROWS;
    Some((col * cw, row * ch, cw, ch))
}

/// X pixel for a sample index within a cell of width `cell_w`.
pub fn sample_x(index: usize, n_samples: usize, cell_w: usize) -> usize {
    if n_samples <= 1 {
        return 0;
    }
    ((index as f64) * (cell_w - 1) as f64 / (n_samples - 1) as f64).round() as usize
}

fn draw_line(img: &mut RasterImage, x0: i64, y0: i64, x1: i64, y1: i64) {
    // Bresenham, all octants.
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
            img.pixels[y as usize * img.width + x as usize] = 0.0;
        }
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

/// Deterministic black-trace-on-white rendering of the eight plotted leads.
/// Each lead's [min, max] spans 80% of its cell height; flat leads sit on the
/// cell midline.
pub fn render(record: &EcgRecord, canvas: usize) -> Result<RasterImage, RasterError> {
    if canvas % (GRID_ROWS.max(GRID_COLS)) != 0 {
        return Err(RasterError::Render(format!(
            "canvas {canvas} not divisible by the {GRID_ROWS}x{GRID_COLS} grid"
        )));
    }
    for lead in Lead::PLOTTED {
        if !record.has_lead(lead) {
            return Err(RasterError::MissingLead(lead));
        }
    }
    let n = record.n_samples();
    if n == 0 {
        return Err(RasterError::Render("record has no samples".into()));
    }

    let mut img = RasterImage::blank(canvas, canvas, &record.record_id);
    for lead in Lead::PLOTTED {
        let samples = record.lead(lead).expect("checked above");
        let (x0, y0, cw, ch) = lead_cell_rect(lead, canvas).expect("plotted lead");
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mid = (min + max) / 2.0;
        let range = max - min;
        let y_center = y0 as f64 + ch as f64 / 2.0;
        let y_of = |v: f64| -> i64 {
            let normalized = if range > 0.0 { (v - mid) / range } else { 0.0 };
            let y = y_center - normalized * 0.8 * ch as f64;
            (y.round() as i64).clamp(y0 as i64, (y0 + ch - 1) as i64)
        };
        let mut prev = (
            (x0 + sample_x(0, n, cw)) as i64,
            y_of(samples[0]),
        );
        if n == 1 {
            draw_line(&mut img, prev.0, prev.1, prev.0, prev.1);
        }
        for (i, &v) in samples.iter().enumerate().skip(1) {
            let cur = ((x0 + sample_x(i, n, cw)) as i64, y_of(v));
            draw_line(&mut img, prev.0, prev.1, cur.0, cur.1);
            prev = cur;
        }
    }
    Ok(img)
}

/// Area-averaging (box filter) resize to `side` x `side`; no crop, no flip,
/// no augmentation anywhere in the image path.
pub fn resize_to(img: &RasterImage, side: usize) -> RasterImage {
    assert!(side > 0, "side must be positive");
    if img.width == side && img.height == side {
        return img.clone();
    }
    let sx = img.width as f64 / side as f64;
    let sy = img.height as f64 / side as f64;
    let mut pixels = Vec::with_capacity(side * side);
    for oy in 0..side {
        let fy0 = oy as f64 * sy;
        let fy1 = (oy + 1) as f64 * sy;
        for ox in 0..side {
            let fx0 = ox as f64 * sx;
            let fx1 = (ox + 1) as f64 * sx;
            let mut acc = 0.0f64;
            let mut total = 0.0f64;
            let y_lo = fy0.floor() as usize;
            let y_hi = (fy1.ceil() as usize).min(img.height);
            let x_lo = fx0.floor() as usize;
            let x_hi = (fx1.ceil() as usize).min(img.width);
            for y in y_lo..y_hi {
                let wy = (fy1.min((y + 1) as f64) - fy0.max(y as f64)).max(0.0);
                if wy == 0.0 {
                    continue;
                }
                for x in x_lo..x_hi {
                    let wx = (fx1.min((x + 1) as f64) - fx0.max(x as f64)).max(0.0);
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wy * wx * img.pixels[y * img.width + x] as f64;
                    total += wy * wx;
                }
            }
            pixels.push((acc / total).clamp(0.0, 1.0) as f32);
        }
    }
    RasterImage {
        width: side,
        height: side,
        pixels,
        source_record_id: img.source_record_id.clone(),
    }
}

/// Row-major non-overlapping partition of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major patches, each a row-major patch_size^2 pixel block.
    pub patches: Vec<Vec<f32>>,
    pub source_record_id: String,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

pub fn to_patches(img: &RasterImage, patch_size: usize) -> Result<PatchGrid, RasterError> {
    if patch_size == 0 || img.width % patch_size != 0 || img.height % patch_size != 0 {
        return Err(RasterError::Patch(format!(
            "image {}x{} not divisible by patch size {patch_size}",
            img.width, img.height
        )));
    }
    let rows = img.height / patch_size;
    let cols = img.width / patch_size;
    let mut patches = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut patch = Vec::with_capacity(patch_size * patch_size);
            for y in 0..patch_size {
                let row = (pr * patch_size + y) * img.width + pc * patch_size;
                patch.extend_from_slice(&img.pixels[row..row + patch_size]);
            }
            patches.push(patch);
        }
    }
    Ok(PatchGrid {
        patch_size,
        rows,
        cols,
        patches,
        source_record_id: img.source_record_id.clone(),
    })
}

pub fn from_patches(grid: &PatchGrid) -> RasterImage {
    let width = grid.cols * grid.patch_size;
    let height = grid.rows * grid.patch_size;
    let mut pixels = vec![0.0f32; width * height];
    for (pi, patch) in grid.patches.iter().enumerate() {
        let pr = pi / grid.cols;
        let pc = pi % grid.cols;
        for y in 0..grid.patch_size {
            let dst = (pr * grid.patch_size + y) * width + pc * grid.patch_size;
            let src = y * grid.patch_size;
            pixels[dst..dst + grid.patch_size]
                .copy_from_slice(&patch[src..src + grid.patch_size]);
        }
    }
    RasterImage {
        width,
        height,
        pixels,
        source_record_id: grid.source_record_id.clone(),
    }
}

const CACHE_MAGIC: &[u8; 4] = b"HBRT";
const CACHE_VERSION: u8 = 1;

/// Writes the image cache container: magic, version, producing config hash,
/// image count, then per image (id length, id bytes, width, height) and
/// little-endian f32 pixels.
pub fn write_image_cache(
    path: &Path,
    images: &[RasterImage],
    config_hash: &[u8; 32],
) -> Result<(), RasterError> {
    let io = |source: std::io::Error| RasterError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let io = |source: std::io::Error| RasterError::Io {
        path: path.display().to_string(),
        source,
    };
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&[CACHE_VERSION]).map_err(io)?;
    w.write_all(config_hash).map_err(io)?;
    w.write_all(&(images.len() as u32).to_le_bytes()).map_err(io)?;
    for img in images {
        let id = img.source_record_id.as_bytes();
        w.write_all(&(id.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(id).map_err(io)?;
        w.write_all(&(img.width as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(img.height as u32).to_le_bytes()).map_err(io)?;
        for p in &img.pixels {
            w.write_all(&p.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_image_cache(path: &Path) -> Result<([u8; 32], Vec<RasterImage>), RasterError> {
    let cache_err = |msg: String| RasterError::Cache {
        path: path.display().to_string(),
        msg,
    };
    let bytes = std::fs::read(path).map_err(|source| RasterError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut cur = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|e| cache_err(e.to_string()))?;
    if &magic != CACHE_MAGIC {
        return Err(cache_err("bad magic; not an image cache".into()));
    }
    let mut version = [0u8; 1];
    cur.read_exact(&mut version)
        .map_err(|e| cache_err(e.to_string()))?;
    if version[0] != CACHE_VERSION {
        return Err(cache_err(format!("unsupported version {}", version[0])));
    }
    let mut hash = [0u8; 32];
    cur.read_exact(&mut hash)
        .map_err(|e| cache_err(e.to_string()))?;
    let mut count_b = [0u8; 4];
    cur.read_exact(&mut count_b)
        .map_err(|e| cache_err(e.to_string()))?;
    let count = u32::from_le_bytes(count_b) as usize;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let mut id_len = [0u8; 2];
        cur.read_exact(&mut id_len)
            .map_err(|e| cache_err(e.to_string()))?;
        let mut id = vec![0u8; u16::from_le_bytes(id_len) as usize];
        cur.read_exact(&mut id)
            .map_err(|e| cache_err(e.to_string()))?;
        let mut dims = [0u8; 8];
        cur.read_exact(&mut dims)
            .map_err(|e| cache_err(e.to_string()))?;
        let width = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
        let mut raw = vec![0u8; width * height * 4];
        cur.read_exact(&mut raw)
            .map_err(|e| cache_err(e.to_string()))?;
        let pixels = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        images.push(RasterImage {
            width,
            height,
            pixels,
            source_record_id: String::from_utf8(id)
                .map_err(|e| cache_err(format!("bad record id: {e}")))?,
        });
    }
    Ok((hash, images))
}

/// Writes an 8-bit grayscale PNG.
pub fn save_png(img: &RasterImage, path: &Path) -> Result<(), RasterError> {
    let buf: Vec<u8> = img
        .pixels
        .iter()
        .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let gray = image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
        .ok_or_else(|| RasterError::Render("pixel buffer mismatch".into()))?;
    gray.save(path).map_err(|e| RasterError::Cache {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::EcgRecord;

    fn flat_record(value: f64) -> EcgRecord {
        EcgRecord {
            record_id: "flat".into(),
            patient_id: "p".into(),
            sampling_rate_hz: 500,
            leads: Lead::PLOTTED
                .iter()
                .map(|&l| (l, vec![value; 2500]))
                .collect(),
            label: None,
            acquired_at: None,
        }
    }

    fn wavy_record(seed: u64) -> EcgRecord {
        use rand::Rng;
        let mut rng = crate::util::rng_from(seed);
        EcgRecord {
            record_id: "wavy".into(),
            patient_id: "p".into(),
            sampling_rate_hz: 500,
            leads: Lead::PLOTTED
                .iter()
                .map(|&l| {
                    (
                        l,
                        (0..2500)
                            .map(|i| (i as f64 / 40.0).sin() + rng.random_range(-0.1..0.1))
                            .collect(),
                    )
                })
                .collect(),
            label: None,
            acquired_at: None,
        }
    }

    #[test]
    fn flat_leads_draw_cell_midlines() {
        let img = render(&flat_record(0.0), NATIVE_CANVAS).unwrap();
        let ch = NATIVE_CANVAS / GRID_ROWS;
        for lead in Lead::PLOTTED {
            let (x0, y0, cw, _) = lead_cell_rect(lead, NATIVE_CANVAS).unwrap();
            let mid = y0 + ch / 2;
            for x in x0..x0 + cw {
                assert_eq!(img.get(x, mid), 0.0, "midline must be black at x={x}");
            }
            // Row above the midline stays white.
            for x in x0..x0 + cw {
                assert_eq!(img.get(x, mid - 2), 1.0);
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let rec = wavy_record(3);
        let a = render(&rec, NATIVE_CANVAS).unwrap();
        let b = render(&rec, NATIVE_CANVAS).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn render_rejects_missing_lead() {
        let mut rec = flat_record(0.0);
        rec.leads.retain(|(l, _)| *l != Lead::V5);
        assert!(matches!(
            render(&rec, NATIVE_CANVAS),
            Err(RasterError::MissingLead(Lead::V5))
        ));
    }

    #[test]
    fn per_lead_scaling_is_amplitude_invariant() {
        let rec = wavy_record(8);
        let mut scaled = rec.clone();
        for (lead, samples) in &mut scaled.leads {
            if *lead == Lead::I {
                for s in samples.iter_mut() {
                    *s *= 2.0;
                }
            }
        }
        let a = render(&rec, NATIVE_CANVAS).unwrap();
        let b = render(&scaled, NATIVE_CANVAS).unwrap();
        let (x0, y0, cw, ch) = lead_cell_rect(Lead::I, NATIVE_CANVAS).unwrap();
        for y in y0..y0 + ch {
            for x in x0..x0 + cw {
                assert_eq!(a.get(x, y), b.get(x, y));
            }
        }
    }

    #[test]
    fn resize_identity_at_same_side() {
        let img = render(&wavy_record(1), 224).unwrap();
        let out = resize_to(&img, 224);
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn resize_preserves_constants() {
        let img = RasterImage {
            width: 350,
            height: 350,
            pixels: vec![0.3; 350 * 350],
            source_record_id: "c".into(),
        };
        let out = resize_to(&img, 224);
        for p in out.pixels {
            assert!((p - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_averages_checkerboard_to_half() {
        // Alternating pixels tile the plane with 2x2-periodic blocks; a 2x
        // box filter averages each block to exactly one half.
        let mut pixels = Vec::with_capacity(448 * 448);
        for y in 0..448 {
            for x in 0..448 {
                pixels.push(((x + y) % 2) as f32);
            }
        }
        let img = RasterImage {
            width: 448,
            height: 448,
            pixels,
            source_record_id: "cb".into(),
        };
        let out = resize_to(&img, 224);
        for p in out.pixels {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn patch_partition_counts() {
        let img = render(&wavy_record(2), 560).unwrap();
        let resized = resize_to(&img, 224);
        let grid = to_patches(&resized, 16).unwrap();
        assert_eq!(grid.n_patches(), 196);
        assert_eq!(grid.patches[0].len(), 256);

        let small = RasterImage::blank(32, 32, "s");
        assert_eq!(to_patches(&small, 16).unwrap().n_patches(), 4);
    }

    #[test]
    fn patch_round_trip_is_exact() {
        let img = resize_to(&render(&wavy_record(5), 560).unwrap(), 224);
        let grid = to_patches(&img, 16).unwrap();
        let back = from_patches(&grid);
        assert_eq!(back.pixels, img.pixels);
        assert_eq!(back.width, img.width);
    }

    #[test]
    fn patch_rejects_indivisible_sides() {
        let img = RasterImage::blank(230, 230, "x");
        assert!(matches!(to_patches(&img, 16), Err(RasterError::Patch(_))));
    }

    #[test]
    fn cache_round_trip() {
        let images: Vec<RasterImage> = (0..3)
            .map(|i| {
                let mut img = resize_to(&render(&wavy_record(i), 560).unwrap(), 224);
                img.source_record_id = format!("r{i}");
                img
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("images.hbrt");
        let hash = [7u8; 32];
        write_image_cache(&path, &images, &hash).unwrap();
        let (h, back) = read_image_cache(&path).unwrap();
        assert_eq!(h, hash);
        assert_eq!(back, images);

        // Rewrite is byte-identical.
        let bytes1 = std::fs::read(&path).unwrap();
        write_image_cache(&path, &images, &hash).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let img = resize_to(&render(&wavy_record(4), 560).unwrap(), 224);
        assert!(img.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
