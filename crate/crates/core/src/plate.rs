//! Ishihara-style colorblindness plates.
//!
//! A plate is a disk of non-overlapping dots. Dots whose centers fall inside
//! a blocky 5x7 digit glyph take figure colors, the rest take ground colors.
//! Figure and ground palettes differ along the protan confusion line, so the
//! digit is obvious to normal vision and nearly invisible to a simulated
//! protanope.
//!
//! Packing is seeded dart throwing: radii are tried from largest to smallest
//! and each radius is abandoned after `MISS_BUDGET` consecutive rejected
//! darts. Generation stops once the target coverage is reached.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::PlateAnswer;
use crate::seeding::{substream, STREAM_PLATE_PACKING};

pub type Rgb8 = [u8; 3];

/// Consecutive rejected darts before stepping down to the next radius.
pub const MISS_BUDGET: u32 = 2_000;
/// Glyph height as a fraction of the plate diameter.
pub const GLYPH_FRACTION: f64 = 0.6;
pub const PAPER: Rgb8 = [250, 248, 240];

#[derive(Debug, Error, PartialEq)]
pub enum PlateError {
    #[error("invalid plate spec: {0}")]
    InvalidSpec(String),
    #[error("coverage {achieved:.3} fell short of target {target:.3}")]
    PackingFailure { achieved: f64, target: f64 },
    #[error("plate shows no digit")]
    NoFigure,
    #[error("image encoding failed: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub id: String,
    pub figure: Vec<Rgb8>,
    pub ground: Vec<Rgb8>,
    /// Per-dot multiplicative lightness noise, as a fraction.
    pub lightness_jitter: f64,
}

impl Palette {
    /// Palettes shipped with the generator. Each figure color is its ground
    /// color shifted along the linear-RGB null direction of the protanope
    /// projection, then re-quantized.
    pub fn shipped() -> Vec<Palette> {
        vec![
            Palette {
                id: "classic".into(),
                figure: vec![[189, 129, 59], [205, 150, 69], [181, 112, 54]],
                ground: vec![[110, 140, 60], [140, 160, 70], [95, 125, 55]],
                lightness_jitter: 0.06,
            },
            Palette {
                id: "autumn".into(),
                figure: vec![[204, 141, 79], [218, 157, 89], [191, 125, 69]],
                ground: vec![[150, 150, 80], [170, 165, 90], [130, 135, 70]],
                lightness_jitter: 0.06,
            },
            Palette {
                id: "moss".into(),
                figure: vec![[170, 119, 89], [180, 141, 99], [166, 102, 79]],
                ground: vec![[90, 130, 90], [110, 150, 100], [80, 115, 80]],
                lightness_jitter: 0.06,
            },
        ]
    }

    pub fn by_id(id: &str) -> Option<Palette> {
        Self::shipped().into_iter().find(|p| p.id == id)
    }

    /// Deterministic palette choice for a plate seed.
    pub fn for_seed(seed: u64) -> Palette {
        let mut all = Self::shipped();
        let i = (seed % all.len() as u64) as usize;
        all.swap_remove(i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateSpec {
    pub digit: Option<u8>,
    pub seed: u64,
    pub canvas_px: u32,
    pub dot_radius_range: [f64; 2],
    pub margin_px: f64,
    pub coverage_target: f64,
    pub palette: Palette,
}

impl PlateSpec {
    pub fn new(digit: Option<u8>, seed: u64) -> Self {
        Self {
            digit,
            seed,
            canvas_px: 512,
            dot_radius_range: [4.0, 11.0],
            margin_px: 1.0,
            coverage_target: 0.55,
            palette: Palette::for_seed(seed),
        }
    }

    pub fn validate(&self) -> Result<(), PlateError> {
        let bad = |msg: String| Err(PlateError::InvalidSpec(msg));
        let [r_min, r_max] = self.dot_radius_range;
        if let Some(d) = self.digit {
            if d > 9 {
                return bad(format!("digit {d} is not 0-9"));
            }
        }
        if !(r_min > 0.0 && r_min <= r_max) {
            return bad(format!("radius range [{r_min}, {r_max}]"));
        }
        if self.margin_px.is_nan() || self.margin_px < 0.0 {
            return bad(format!("margin {}", self.margin_px));
        }
        if !(self.coverage_target > 0.0 && self.coverage_target < std::f64::consts::FRAC_PI_4) {
            return bad(format!("coverage target {}", self.coverage_target));
        }
        if f64::from(self.canvas_px) < 8.0 * r_max {
            return bad(format!("canvas {} too small for radius {r_max}", self.canvas_px));
        }
        let p = &self.palette;
        if p.figure.is_empty() || p.ground.is_empty() {
            return bad("palette needs figure and ground colors".into());
        }
        if p.figure.iter().any(|c| p.ground.contains(c)) {
            return bad(format!("palette {} figure and ground overlap", p.id));
        }
        if p.figure.iter().chain(&p.ground).any(|c| *c == PAPER) {
            return bad("palette color equals paper".into());
        }
        if !(0.0..0.5).contains(&p.lightness_jitter) {
            return bad(format!("jitter {}", p.lightness_jitter));
        }
        Ok(())
    }

    pub fn disk(&self) -> Disk {
        let c = f64::from(self.canvas_px) / 2.0;
        Disk { cx: c, cy: c, radius: c }
    }

    pub fn glyph_box(&self) -> GlyphBox {
        let disk = self.disk();
        let height = GLYPH_FRACTION * 2.0 * disk.radius;
        let cell = height / 7.0;
        GlyphBox {
            x0: disk.cx - 2.5 * cell,
            y0: disk.cy - 3.5 * cell,
            cell,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Disk {
    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.radius * self.radius
    }
}

/// Placement of the 5x7 glyph grid on the canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphBox {
    pub x0: f64,
    pub y0: f64,
    pub cell: f64,
}

impl GlyphBox {
    /// Grid cell containing a point, if it is inside the 5x7 box.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let gx = ((x - self.x0) / self.cell).floor();
        let gy = ((y - self.y0) / self.cell).floor();
        if (0.0..5.0).contains(&gx) && (0.0..7.0).contains(&gy) {
            Some((gx as usize, gy as usize))
        } else {
            None
        }
    }
}

/// 5x7 digit bitmaps, one row per byte, bit 4 = leftmost column.
const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

pub fn glyph_bit(digit: u8, col: usize, row: usize) -> bool {
    GLYPHS[usize::from(digit)][row] & (1 << (4 - col)) != 0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dot {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    /// Palette color before jitter.
    pub base: Rgb8,
    /// Rendered color.
    pub color: Rgb8,
    pub is_figure: bool,
}

#[derive(Debug, Clone)]
pub struct Plate {
    pub spec: PlateSpec,
    pub dots: Vec<Dot>,
    pub raster: RgbImage,
    pub answer: PlateAnswer,
}

/// Audit record written next to every exported plate image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateMeta {
    pub answer: PlateAnswer,
    pub seed: u64,
    pub palette_id: String,
    pub canvas_px: u32,
    pub dot_count: usize,
    pub figure_dots: usize,
    pub coverage: f64,
}

impl Plate {
    /// Dot area over plate-disk area.
    pub fn coverage(&self) -> f64 {
        let area: f64 = self
            .dots
            .iter()
            .map(|d| std::f64::consts::PI * d.radius * d.radius)
            .sum();
        area / self.spec.disk().area()
    }

    /// Fraction of in-disk pixels that are painted.
    pub fn raster_coverage(&self) -> f64 {
        let disk = self.spec.disk();
        let (mut inside, mut painted) = (0u64, 0u64);
        for (x, y, px) in self.raster.enumerate_pixels() {
            let dx = f64::from(x) + 0.5 - disk.cx;
            let dy = f64::from(y) + 0.5 - disk.cy;
            if dx * dx + dy * dy <= disk.radius * disk.radius {
                inside += 1;
                if px.0 != PAPER {
                    painted += 1;
                }
            }
        }
        painted as f64 / inside as f64
    }

    pub fn figure_dots(&self) -> usize {
        self.dots.iter().filter(|d| d.is_figure).count()
    }

    pub fn meta(&self) -> PlateMeta {
        PlateMeta {
            answer: self.answer,
            seed: self.spec.seed,
            palette_id: self.spec.palette.id.clone(),
            canvas_px: self.spec.canvas_px,
            dot_count: self.dots.len(),
            figure_dots: self.figure_dots(),
            coverage: self.coverage(),
        }
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>, PlateError> {
        let mut out = Cursor::new(Vec::new());
        self.raster
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| PlateError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }
}

pub fn check_answer(plate: &Plate, answer: PlateAnswer) -> bool {
    plate.answer == answer
}

/// Uniform grid over the canvas used for neighbour queries while packing.
struct Grid {
    cell: f64,
    cols: usize,
    buckets: Vec<Vec<u32>>,
}

impl Grid {
    fn new(extent: f64, cell: f64) -> Self {
        let cols = (extent / cell).ceil() as usize + 1;
        Self {
            cell,
            cols,
            buckets: vec![Vec::new(); cols * cols],
        }
    }

    fn key(&self, x: f64, y: f64) -> (usize, usize) {
        let cx = ((x / self.cell) as usize).min(self.cols - 1);
        let cy = ((y / self.cell) as usize).min(self.cols - 1);
        (cx, cy)
    }

    fn insert(&mut self, x: f64, y: f64, index: u32) {
        let (cx, cy) = self.key(x, y);
        self.buckets[cy * self.cols + cx].push(index);
    }

    fn neighbours(&self, x: f64, y: f64) -> impl Iterator<Item = u32> + '_ {
        let (cx, cy) = self.key(x, y);
        let xs = cx.saturating_sub(1)..=(cx + 1).min(self.cols - 1);
        let ys = cy.saturating_sub(1)..=(cy + 1).min(self.cols - 1);
        ys.flat_map(move |gy| xs.clone().map(move |gx| gy * self.cols + gx))
            .flat_map(move |b| self.buckets[b].iter().copied())
    }
}

fn radius_levels(r_min: f64, r_max: f64) -> Vec<f64> {
    let mut levels = Vec::new();
    let mut r = r_max;
    while r > r_min {
        levels.push(r);
        r -= 1.0;
    }
    levels.push(r_min);
    levels
}

pub fn generate_plate(spec: &PlateSpec) -> Result<Plate, PlateError> {
    spec.validate()?;
    let mut rng = substream(spec.seed, STREAM_PLATE_PACKING);
    let disk = spec.disk();
    let glyph = spec.glyph_box();
    let [r_min, r_max] = spec.dot_radius_range;
    let target_area = spec.coverage_target * disk.area();
    let mut grid = Grid::new(f64::from(spec.canvas_px), 2.0 * r_max + spec.margin_px);
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut area = 0.0;

    'levels: for r in radius_levels(r_min, r_max) {
        let reach = disk.radius - r;
        let mut misses = 0;
        while misses < MISS_BUDGET {
            let x = disk.cx + rng.random_range(-reach..=reach);
            let y = disk.cy + rng.random_range(-reach..=reach);
            let (dx, dy) = (x - disk.cx, y - disk.cy);
            let fits_disk = dx * dx + dy * dy <= reach * reach;
            let clear = fits_disk
                && grid.neighbours(x, y).all(|j| {
                    let (ox, oy, or) = placed[j as usize];
                    let min = r + or + spec.margin_px;
                    (ox - x).powi(2) + (oy - y).powi(2) >= min * min
                });
            if !clear {
                misses += 1;
                continue;
            }
            misses = 0;
            grid.insert(x, y, placed.len() as u32);
            placed.push((x, y, r));
            area += std::f64::consts::PI * r * r;
            if area >= target_area {
                break 'levels;
            }
        }
    }

    let achieved = area / disk.area();
    if achieved < spec.coverage_target - 0.10 {
        return Err(PlateError::PackingFailure {
            achieved,
            target: spec.coverage_target,
        });
    }

    let palette = &spec.palette;
    let dots: Vec<Dot> = placed
        .into_iter()
        .map(|(x, y, radius)| {
            let is_figure = spec
                .digit
                .is_some_and(|d| glyph.cell_of(x, y).is_some_and(|(c, r)| glyph_bit(d, c, r)));
            let colors = if is_figure { &palette.figure } else { &palette.ground };
            let base = colors[rng.random_range(0..colors.len())];
            let jitter = if palette.lightness_jitter > 0.0 {
                rng.random_range(-palette.lightness_jitter..=palette.lightness_jitter)
            } else {
                0.0
            };
            let mut color = base.map(|c| (f64::from(c) * (1.0 + jitter)).round().clamp(0.0, 255.0) as u8);
            if color == PAPER {
                color = base;
            }
            Dot {
                x,
                y,
                radius,
                base,
                color,
                is_figure,
            }
        })
        .collect();

    let raster = render(spec.canvas_px, &dots);
    Ok(Plate {
        spec: spec.clone(),
        dots,
        raster,
        answer: PlateAnswer::from_digit(spec.digit),
    })
}

fn render(canvas_px: u32, dots: &[Dot]) -> RgbImage {
    let mut img = RgbImage::from_pixel(canvas_px, canvas_px, Rgb(PAPER));
    let limit = f64::from(canvas_px);
    for dot in dots {
        let x_lo = (dot.x - dot.radius).floor().max(0.0) as u32;
        let x_hi = (dot.x + dot.radius).ceil().min(limit - 1.0) as u32;
        let y_lo = (dot.y - dot.radius).floor().max(0.0) as u32;
        let y_hi = (dot.y + dot.radius).ceil().min(limit - 1.0) as u32;
        let r2 = dot.radius * dot.radius;
        for py in y_lo..=y_hi {
            let dy = f64::from(py) + 0.5 - dot.y;
            for px in x_lo..=x_hi {
                let dx = f64::from(px) + 0.5 - dot.x;
                if dx * dx + dy * dy <= r2 {
                    img.put_pixel(px, py, Rgb(dot.color));
                }
            }
        }
    }
    img
}

/// Colorimetry used to validate plates.
pub mod color {
    use super::Rgb8;

    /// Protanope projection in linear RGB (Viénot, Brettel & Mollon 1999).
    /// Rows sum to one, so achromatic colors are fixed points.
    pub const PROTANOPIA: [[f64; 3]; 3] = [
        [0.11238, 0.88762, 0.0],
        [0.11238, 0.88762, 0.0],
        [0.00401, -0.00401, 1.0],
    ];

    pub fn srgb_to_linear(c: Rgb8) -> [f64; 3] {
        c.map(|v| {
            let v = f64::from(v) / 255.0;
            if v <= 0.04045 {
                v / 12.92
            } else {
                ((v + 0.055) / 1.055).powf(2.4)
            }
        })
    }

    pub fn linear_to_srgb(c: [f64; 3]) -> Rgb8 {
        c.map(|v| {
            let v = v.clamp(0.0, 1.0);
            let s = if v <= 0.0031308 {
                v * 12.92
            } else {
                1.055 * v.powf(1.0 / 2.4) - 0.055
            };
            (s * 255.0).round() as u8
        })
    }

    /// An sRGB color as a protanope perceives it, re-encoded as sRGB.
    pub fn protan_srgb(c: Rgb8) -> Rgb8 {
        linear_to_srgb(simulate_protanopia(srgb_to_linear(c)))
    }

    pub fn simulate_protanopia(linear: [f64; 3]) -> [f64; 3] {
        let m = PROTANOPIA;
        let mut out = [0.0; 3];
        for (o, row) in out.iter_mut().zip(m.iter()) {
            *o = (row[0] * linear[0] + row[1] * linear[1] + row[2] * linear[2]).clamp(0.0, 1.0);
        }
        out
    }

    /// CIE L*a*b* (D65) from linear sRGB.
    pub fn linear_to_lab(c: [f64; 3]) -> [f64; 3] {
        let x = 0.4124 * c[0] + 0.3576 * c[1] + 0.1805 * c[2];
        let y = 0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2];
        let z = 0.0193 * c[0] + 0.1192 * c[1] + 0.9505 * c[2];
        let f = |t: f64| {
            const D: f64 = 6.0 / 29.0;
            if t > D * D * D {
                t.cbrt()
            } else {
                t / (3.0 * D * D) + 4.0 / 29.0
            }
        };
        let (fx, fy, fz) = (f(x / 0.95047), f(y), f(z / 1.08883));
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
    }

    /// CIE76 color difference.
    pub fn delta_e(a: [f64; 3], b: [f64; 3]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LegibilityReport {
    pub normal_contrast: f64,
    pub dichromat_contrast: f64,
}

/// Mean CIE76 difference over all (figure dot, ground dot) pairs, using the
/// dots' palette colors, for normal vision and for simulated protanopia.
pub fn legibility_report(plate: &Plate) -> Result<LegibilityReport, PlateError> {
    use std::collections::HashMap;

    let mut figure: HashMap<Rgb8, u64> = HashMap::new();
    let mut ground: HashMap<Rgb8, u64> = HashMap::new();
    for dot in &plate.dots {
        let bucket = if dot.is_figure { &mut figure } else { &mut ground };
        *bucket.entry(dot.base).or_default() += 1;
    }
    if figure.is_empty() {
        return Err(PlateError::NoFigure);
    }
    if ground.is_empty() {
        return Err(PlateError::InvalidSpec("plate has no ground dots".into()));
    }
    let mean = |view: &dyn Fn([f64; 3]) -> [f64; 3]| {
        let mut total = 0.0;
        let mut weight = 0.0;
        for (f, nf) in &figure {
            let lf = color::linear_to_lab(view(color::srgb_to_linear(*f)));
            for (g, ng) in &ground {
                let lg = color::linear_to_lab(view(color::srgb_to_linear(*g)));
                let w = (*nf * *ng) as f64;
                total += w * color::delta_e(lf, lg);
                weight += w;
            }
        }
        total / weight
    };
    Ok(LegibilityReport {
        normal_contrast: mean(&|c| c),
        dichromat_contrast: mean(&color::simulate_protanopia),
    })
}

/// Reads a plate the way a participant with normal color vision would:
/// pixels are split into figure and ground by nearest palette color, and the
/// figure pixels are matched against the glyph grid.
pub fn read_plate(raster: &RgbImage, palettes: &[Palette]) -> PlateAnswer {
    let canvas_px = raster.width();
    let probe = PlateSpec {
        canvas_px,
        ..PlateSpec::new(None, 0)
    };
    let glyph = probe.glyph_box();

    let dist2 = |a: Rgb8, b: Rgb8| -> i32 {
        (0..3).map(|i| (i32::from(a[i]) - i32::from(b[i])).pow(2)).sum()
    };
    let nearest = |px: Rgb8, set: &[Rgb8]| set.iter().map(|c| dist2(px, *c)).min().unwrap_or(i32::MAX);
    let best_palette = palettes
        .iter()
        .min_by_key(|p| {
            raster
                .pixels()
                .step_by(7)
                .filter(|px| px.0 != PAPER)
                .map(|px| i64::from(nearest(px.0, &p.figure).min(nearest(px.0, &p.ground))))
                .sum::<i64>()
        })
        .expect("at least one palette");

    let mut counts = [[(0u32, 0u32); 5]; 7];
    let inset = 0.2 * glyph.cell;
    for (x, y, px) in raster.enumerate_pixels() {
        if px.0 == PAPER {
            continue;
        }
        let (fx, fy) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
        let Some((col, row)) = glyph.cell_of(fx, fy) else {
            continue;
        };
        let ox = fx - glyph.x0 - col as f64 * glyph.cell;
        let oy = fy - glyph.y0 - row as f64 * glyph.cell;
        if ox < inset || oy < inset || ox > glyph.cell - inset || oy > glyph.cell - inset {
            continue;
        }
        let is_fig = nearest(px.0, &best_palette.figure) < nearest(px.0, &best_palette.ground);
        let cell = &mut counts[row][col];
        cell.1 += 1;
        if is_fig {
            cell.0 += 1;
        }
    }
    let bits: Vec<bool> = counts
        .iter()
        .flatten()
        .map(|&(fig, all)| all > 0 && f64::from(fig) / f64::from(all) > 0.5)
        .collect();
    if bits.iter().filter(|b| **b).count() < 3 {
        return PlateAnswer::NoDigit;
    }
    let (digit, distance) = (0u8..10)
        .map(|d| {
            let miss = (0..7)
                .flat_map(|r| (0..5).map(move |c| (r, c)))
                .filter(|&(r, c)| glyph_bit(d, c, r) != bits[r * 5 + c])
                .count();
            (d, miss)
        })
        .min_by_key(|&(_, miss)| miss)
        .expect("ten glyphs");
    if distance <= 4 {
        PlateAnswer::Digit(digit)
    } else {
        PlateAnswer::NoDigit
    }
}
