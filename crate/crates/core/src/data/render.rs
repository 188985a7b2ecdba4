//! Parametric objects and defect renderers.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RngHandle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Hexagon,
    Ring,
    Ellipse,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Hexagon,
        Shape::Ring,
        Shape::Ellipse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Hexagon => "hexagon",
            Shape::Ring => "ring",
            Shape::Ellipse => "ellipse",
        }
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown object shape '{s}'")))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Scratch,
    Hole,
    Stain,
    Crack,
    Bent,
    Missing,
}

impl DefectKind {
    pub const ALL: [DefectKind; 6] = [
        DefectKind::Scratch,
        DefectKind::Hole,
        DefectKind::Stain,
        DefectKind::Crack,
        DefectKind::Bent,
        DefectKind::Missing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Scratch => "scratch",
            DefectKind::Hole => "hole",
            DefectKind::Stain => "stain",
            DefectKind::Crack => "crack",
            DefectKind::Bent => "bent",
            DefectKind::Missing => "missing",
        }
    }
}

impl FromStr for DefectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DefectKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("no renderer for defect '{s}'")))
    }
}

impl fmt::Display for DefectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// Sinusoidal brightness stripes.
    Stripes,
    /// Square checker brightness modulation.
    Checker,
}

/// A named object color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Swatch {
    pub name: String,
    pub rgb: [f64; 3],
}

/// Everything that distinguishes one rendering distribution from another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub palette: Vec<Swatch>,
    pub background: [f64; 3],
    /// Vertical (false) or horizontal (true) background gradient.
    pub horizontal_gradient: bool,
    pub texture: Texture,
    /// Range of the shape's half-extent in pixels on a 64-pixel canvas.
    pub size_range: (f64, f64),
}

fn swatches(list: &[(&str, [f64; 3])]) -> Vec<Swatch> {
    list.iter()
        .map(|(n, c)| Swatch {
            name: n.to_string(),
            rgb: *c,
        })
        .collect()
}

impl Domain {
    /// Warm colors on a light background with stripes, large objects.
    pub fn train() -> Self {
        Self {
            palette: swatches(&[
                ("red", [0.86, 0.16, 0.10]),
                ("orange", [0.95, 0.56, 0.10]),
                ("yellow", [0.95, 0.88, 0.16]),
                ("brown", [0.56, 0.31, 0.10]),
                ("pink", [0.95, 0.60, 0.66]),
                ("maroon", [0.52, 0.05, 0.15]),
            ]),
            background: [0.88, 0.82, 0.64],
            horizontal_gradient: false,
            texture: Texture::Stripes,
            size_range: (17.5, 22.0),
        }
    }

    /// Cool colors on a pale blue-grey background with a checker texture,
    /// smaller objects.
    pub fn target() -> Self {
        Self {
            palette: swatches(&[
                ("blue", [0.25, 0.45, 0.92]),
                ("green", [0.22, 0.70, 0.32]),
                ("purple", [0.60, 0.36, 0.82]),
                ("cyan", [0.20, 0.80, 0.86]),
                ("teal", [0.14, 0.60, 0.58]),
                ("navy", [0.30, 0.36, 0.70]),
            ]),
            background: [0.74, 0.80, 0.88],
            horizontal_gradient: true,
            texture: Texture::Checker,
            size_range: (13.0, 17.0),
        }
    }
}

/// Geometry and shading of one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectParams {
    pub shape: Shape,
    pub color: Swatch,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub angle: f64,
    pub aspect: f64,
    pub texture: Texture,
    pub texture_period: f64,
    pub texture_angle: f64,
    pub background: [f64; 3],
    pub horizontal_gradient: bool,
    pub noise_seed: u64,
}

fn hash_noise(seed: u64, x: usize, y: usize, c: usize) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [x as u64, y as u64, c as u64] {
        h ^= v.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn regular_polygon(r: f64, phi: f64, n: f64, radius: f64) -> bool {
    let sector = TAU / n;
    let local = phi.rem_euclid(sector) - sector / 2.0;
    r * local.cos() <= radius * (PI / n).cos()
}

impl ObjectParams {
    /// Membership of the continuous point `(x, y)`.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = u.hypot(v);
        let phi = v.atan2(u);
        match self.shape {
            Shape::Circle => r <= self.size,
            Shape::Square => regular_polygon(r, phi, 4.0, self.size * 1.15),
            Shape::Triangle => regular_polygon(r, phi, 3.0, self.size * 1.2),
            Shape::Hexagon => regular_polygon(r, phi, 6.0, self.size),
            Shape::Ring => r <= self.size && r >= self.size * 0.45,
            Shape::Ellipse => (u / self.size).powi(2) + (v / (self.size * self.aspect)).powi(2) <= 1.0,
        }
    }

    /// Textured object color at `(x, y)`; pixel noise is keyed by `(px, py)`.
    pub fn object_rgb(&self, x: f64, y: f64, px: usize, py: usize) -> [f64; 3] {
        let (s, c) = self.texture_angle.sin_cos();
        let t = (x - self.cx) * c + (y - self.cy) * s;
        let n = -(x - self.cx) * s + (y - self.cy) * c;
        let factor = match self.texture {
            Texture::Stripes => 1.0 + 0.08 * (TAU * t / self.texture_period).sin(),
            Texture::Checker => {
                let a = (t / self.texture_period).floor() as i64 + (n / self.texture_period).floor() as i64;
                if a.rem_euclid(2) == 0 {
                    1.07
                } else {
                    0.93
                }
            }
        };
        let mut rgb = [0.0; 3];
        for (ch, out) in rgb.iter_mut().enumerate() {
            let noise = 0.015 * hash_noise(self.noise_seed, px, py, ch);
            *out = (self.color.rgb[ch] * factor + noise).clamp(0.0, 1.0);
        }
        rgb
    }

    pub fn background_rgb(&self, px: usize, py: usize, size: usize) -> [f64; 3] {
        let pos = if self.horizontal_gradient { px } else { py } as f64 / size as f64;
        let shade = 0.03 * (pos - 0.5) * 2.0;
        let mut rgb = [0.0; 3];
        for (ch, out) in rgb.iter_mut().enumerate() {
            let noise = 0.015 * hash_noise(self.noise_seed.wrapping_add(1), px, py, ch);
            *out = (self.background[ch] + shade + noise).clamp(0.0, 1.0);
        }
        rgb
    }
}

/// A clean render: image, silhouette and the background layer under it.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedObject {
    pub params: ObjectParams,
    pub image: Image,
    pub silhouette: Vec<bool>,
    pub background: Image,
}

/// Draw object parameters from a domain.
pub fn sample_object(domain: &Domain, shape: Shape, size: usize, rng: &mut RngHandle) -> ObjectParams {
    let scale = size as f64 / 64.0;
    let obj_size = rng.range(domain.size_range.0, domain.size_range.1) * scale;
    let slack = (size as f64 / 2.0 - 1.2 * obj_size).max(0.0);
    let color = domain.palette[rng.index(0, domain.palette.len())].clone();
    ObjectParams {
        shape,
        color,
        cx: size as f64 / 2.0 + rng.range(-slack, slack),
        cy: size as f64 / 2.0 + rng.range(-slack, slack),
        size: obj_size,
        angle: rng.range(0.0, TAU),
        aspect: rng.range(0.55, 0.75),
        texture: domain.texture,
        texture_period: rng.range(6.0, 10.0) * scale,
        texture_angle: rng.range(0.0, PI),
        background: domain.background,
        horizontal_gradient: domain.horizontal_gradient,
        noise_seed: rng.next_u64(),
    }
}

/// Render with an optional warp `p -> q` applied to shape membership and texture.
fn render_with(params: &ObjectParams, size: usize, warp: &dyn Fn(f64, f64) -> (f64, f64)) -> (Image, Vec<bool>) {
    let mut img = Image::filled(size, size, [0.0; 3]);
    let mut sil = vec![false; size * size];
    for py in 0..size {
        for px in 0..size {
            let (x, y) = warp(px as f64 + 0.5, py as f64 + 0.5);
            let rgb = if params.contains(x, y) {
                sil[py * size + px] = true;
                params.object_rgb(x, y, px, py)
            } else {
                params.background_rgb(px, py, size)
            };
            img.set_pixel(py, px, rgb);
        }
    }
    img.quantize();
    (img, sil)
}

/// Deterministic clean render of `params` on a `size x size` canvas.
pub fn render_object(params: &ObjectParams, size: usize) -> RenderedObject {
    let (image, silhouette) = render_with(params, size, &|x, y| (x, y));
    let mut background = Image::filled(size, size, [0.0; 3]);
    for py in 0..size {
        for px in 0..size {
            background.set_pixel(py, px, params.background_rgb(px, py, size));
        }
    }
    background.quantize();
    RenderedObject {
        params: params.clone(),
        image,
        silhouette,
        background,
    }
}

/// Pixels within `radius` (Chebyshev) of any set pixel.
pub fn dilate(mask: &[bool], size: usize, radius: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..size {
        for x in 0..size {
            if !mask[y * size + x] {
                continue;
            }
            for yy in y.saturating_sub(radius)..=(y + radius).min(size - 1) {
                for xx in x.saturating_sub(radius)..=(x + radius).min(size - 1) {
                    out[yy * size + xx] = true;
                }
            }
        }
    }
    out
}

fn interior_points(sil: &[bool], size: usize, margin: usize) -> Vec<(usize, usize)> {
    let eroded: Vec<bool> = {
        let outside: Vec<bool> = sil.iter().map(|s| !s).collect();
        dilate(&outside, size, margin).iter().map(|d| !d).collect()
    };
    let pts: Vec<(usize, usize)> = (0..size * size).filter(|&i| eroded[i]).map(|i| (i % size, i / size)).collect();
    if pts.is_empty() {
        (0..size * size).filter(|&i| sil[i]).map(|i| (i % size, i / size)).collect()
    } else {
        pts
    }
}

fn boundary_points(sil: &[bool], size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..size {
        for x in 0..size {
            if !sil[y * size + x] {
                continue;
            }
            let edge = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx < 0 || ny < 0 || nx >= size as i64 || ny >= size as i64 || !sil[ny as usize * size + nx as usize]
            });
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - a.0 - t * vx).hypot(p.1 - a.1 - t * vy)
}

fn polyline_mask(segments: &[((f64, f64), (f64, f64))], half_width: f64, size: usize) -> Vec<bool> {
    let mut m = vec![false; size * size];
    for &(a, b) in segments {
        let x0 = (a.0.min(b.0) - half_width - 1.0).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + half_width + 1.0).ceil() as usize).min(size);
        let y0 = (a.1.min(b.1) - half_width - 1.0).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + half_width + 1.0).ceil() as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                if segment_distance((x as f64 + 0.5, y as f64 + 0.5), a, b) <= half_width {
                    m[y * size + x] = true;
                }
            }
        }
    }
    m
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Candidate change for one defect attempt: new image plus painted region.
struct Attempt {
    image: Image,
}

fn paint(base: &Image, region: &[bool], f: impl Fn(usize, usize, [f64; 3]) -> [f64; 3]) -> Attempt {
    let size = base.width();
    let mut image = base.clone();
    for (i, _) in region.iter().enumerate().filter(|(_, r)| **r) {
        let (x, y) = (i % size, i / size);
        image.set_pixel(y, x, f(x, y, base.pixel(y, x)));
    }
    image.quantize();
    Attempt { image }
}

fn attempt(kind: DefectKind, obj: &RenderedObject, current: &Image, rng: &mut RngHandle) -> Attempt {
    let size = current.width();
    let sil = &obj.silhouette;
    let scale = size as f64 / 64.0;
    match kind {
        DefectKind::Scratch => {
            let pts = interior_points(sil, size, 3);
            let (sx, sy) = pts[rng.index(0, pts.len())];
            let mut p = (sx as f64 + 0.5, sy as f64 + 0.5);
            let mut dir = rng.range(0.0, TAU);
            let mut segs = Vec::new();
            for _ in 0..rng.index(2, 4) {
                let len = rng.range(6.0, 10.0) * scale;
                let q = (p.0 + len * dir.cos(), p.1 + len * dir.sin());
                segs.push((p, q));
                p = q;
                dir += rng.range(-0.5, 0.5);
            }
            let line = polyline_mask(&segs, 0.9 * scale.max(1.0), size);
            let region: Vec<bool> = line.iter().zip(sil).map(|(l, s)| *l && *s).collect();
            paint(current, &region, |_, _, c| mix(c, [0.98, 0.98, 0.96], 0.85))
        }
        DefectKind::Hole => {
            let pts = interior_points(sil, size, 4);
            let (hx, hy) = pts[rng.index(0, pts.len())];
            let (ra, rb) = (rng.range(3.5, 6.0) * scale, rng.range(2.8, 5.0) * scale);
            let ang = rng.range(0.0, PI);
            let (s, c) = ang.sin_cos();
            let region: Vec<bool> = (0..size * size)
                .map(|i| {
                    let dx = (i % size) as f64 + 0.5 - (hx as f64 + 0.5);
                    let dy = (i / size) as f64 + 0.5 - (hy as f64 + 0.5);
                    let u = c * dx + s * dy;
                    let v = -s * dx + c * dy;
                    sil[i] && (u / ra).powi(2) + (v / rb).powi(2) <= 1.0
                })
                .collect();
            let seed = rng.next_u64();
            paint(current, &region, move |x, y, _| {
                let n = 0.01 * hash_noise(seed, x, y, 0);
                [0.07 + n, 0.06 + n, 0.06 + n]
            })
        }
        DefectKind::Stain => {
            let pts = interior_points(sil, size, 3);
            let (cx, cy) = pts[rng.index(0, pts.len())];
            let radius = rng.range(5.0, 8.5) * scale;
            let (pa, pb) = (rng.range(0.0, TAU), rng.range(0.0, TAU));
            let tint = [0.30, 0.26, 0.12];
            let alpha = |x: usize, y: usize| -> f64 {
                let dx = x as f64 + 0.5 - (cx as f64 + 0.5);
                let dy = y as f64 + 0.5 - (cy as f64 + 0.5);
                let phi = dy.atan2(dx);
                let edge = radius * (1.0 + 0.25 * (3.0 * phi + pa).sin() + 0.15 * (5.0 * phi + pb).sin());
                let r = dx.hypot(dy);
                (0.7 * ((edge - r) / 1.5 + 0.5).clamp(0.0, 1.0)).max(0.0)
            };
            let region: Vec<bool> = (0..size * size).map(|i| sil[i] && alpha(i % size, i / size) > 0.05).collect();
            paint(current, &region, |x, y, c| mix(c, tint, alpha(x, y)))
        }
        DefectKind::Crack => {
            let pts = interior_points(sil, size, 3);
            let (sx, sy) = pts[rng.index(0, pts.len())];
            let mut segs = Vec::new();
            let mut walk = |start: (f64, f64), mut dir: f64, steps: usize, rng: &mut RngHandle| {
                let mut p = start;
                let mut visited = vec![p];
                for _ in 0..steps {
                    dir += rng.range(-0.6, 0.6);
                    let q = (p.0 + 1.6 * scale * dir.cos(), p.1 + 1.6 * scale * dir.sin());
                    segs.push((p, q));
                    p = q;
                    visited.push(p);
                }
                visited
            };
            let trunk = walk((sx as f64 + 0.5, sy as f64 + 0.5), rng.range(0.0, TAU), rng.index(14, 22), rng);
            for _ in 0..rng.index(1, 3) {
                let from = trunk[rng.index(1, trunk.len())];
                let steps = rng.index(5, 10);
                walk(from, rng.range(0.0, TAU), steps, rng);
            }
            let line = polyline_mask(&segs, 0.75 * scale.max(1.0), size);
            let region: Vec<bool> = line.iter().zip(sil).map(|(l, s)| *l && *s).collect();
            paint(current, &region, |_, _, c| mix(c, [0.12, 0.09, 0.08], 0.85))
        }
        DefectKind::Bent => {
            let edge = boundary_points(sil, size);
            let (bx, by) = edge[rng.index(0, edge.len())];
            let p = &obj.params;
            let (nx, ny) = {
                let (dx, dy) = (bx as f64 + 0.5 - p.cx, by as f64 + 0.5 - p.cy);
                let n = dx.hypot(dy).max(1e-9);
                (dx / n, dy / n)
            };
            let amp = rng.range(4.0, 6.5) * scale;
            let sigma = rng.range(3.5, 5.0) * scale;
            let (ox, oy) = (bx as f64 + 0.5, by as f64 + 0.5);
            let warp = move |x: f64, y: f64| {
                let g = (-((x - ox).powi(2) + (y - oy).powi(2)) / (2.0 * sigma * sigma)).exp();
                (x + amp * g * nx, y + amp * g * ny)
            };
            let (warped, _) = render_with(p, size, &warp);
            let region = dilate(sil, size, 2);
            paint(current, &region, |x, y, _| warped.pixel(y, x))
        }
        DefectKind::Missing => {
            let edge = boundary_points(sil, size);
            let (bx, by) = edge[rng.index(0, edge.len())];
            let p = &obj.params;
            let radius = rng.range(6.0, 9.0) * scale;
            let (dx, dy) = (p.cx - (bx as f64 + 0.5), p.cy - (by as f64 + 0.5));
            let n = dx.hypot(dy).max(1e-9);
            let (cx, cy) = (bx as f64 + 0.5 + 0.3 * radius * dx / n, by as f64 + 0.5 + 0.3 * radius * dy / n);
            let region: Vec<bool> = (0..size * size)
                .map(|i| sil[i] && ((i % size) as f64 + 0.5 - cx).hypot((i / size) as f64 + 0.5 - cy) <= radius)
                .collect();
            let bg = &obj.background;
            paint(current, &region, |x, y, _| bg.pixel(y, x))
        }
    }
}

/// Minimum changed pixels for a defect to count as rendered.
pub fn min_defect_pixels(size: usize) -> usize {
    (size * size).div_ceil(200)
}

/// Apply one defect to `current` (an image of `obj`). Returns the new image
/// and the set of pixels it changed. Retries with fresh draws until the
/// change covers at least [`min_defect_pixels`].
pub fn render_defect(
    obj: &RenderedObject,
    current: &Image,
    kind: DefectKind,
    rng: &mut RngHandle,
) -> Result<(Image, Vec<bool>)> {
    let size = current.width();
    let need = min_defect_pixels(size);
    for _ in 0..64 {
        let a = attempt(kind, obj, current, rng);
        let changed: Vec<bool> = a
            .image
            .data()
            .chunks(3)
            .zip(current.data().chunks(3))
            .map(|(x, y)| x != y)
            .collect();
        if changed.iter().filter(|c| **c).count() >= need {
            return Ok((a.image, changed));
        }
    }
    Err(Error::Validation(format!(
        "could not place a visible '{kind}' defect on a {} after 64 attempts",
        obj.params.shape
    )))
}
