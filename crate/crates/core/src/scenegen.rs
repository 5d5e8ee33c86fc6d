//! Procedural toy scenes for a synthetic and an appearance-shifted "real"
//! domain.
//!
//! Scene layout (shapes, classes, per-instance colours) is drawn from one
//! random stream and the domain appearance transform from another, so the two
//! domains share their shape/class distribution and differ only in how the
//! pixels look.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::idmap::IdMap;
use crate::numerics::Tensor;
use crate::pnm;
use crate::segmask::MASKS_EXTENSION;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MAX_SHAPES_PER_FRAME: usize = 6;

const SHAPE_STREAM: u64 = 0;
const APPEARANCE_STREAM: u64 = 1;

/// Appearance parameters of a domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    /// Per-channel Gaussian noise, in colour units of [0, 1].
    pub noise_sigma: f64,
    /// Peak-to-peak amplitude of an additive linear brightness ramp.
    pub brightness_gradient: f64,
    pub hue_rotation_deg: f64,
    pub speckle_prob: f64,
    pub background: [f64; 3],
}

const BACKGROUND: [f64; 3] = [0.45, 0.45, 0.45];

impl DomainParams {
    pub fn synthetic() -> Self {
        DomainParams {
            noise_sigma: 0.01,
            brightness_gradient: 0.0,
            hue_rotation_deg: 0.0,
            speckle_prob: 0.0,
            background: BACKGROUND,
        }
    }

    pub fn real() -> Self {
        DomainParams {
            noise_sigma: 0.05,
            brightness_gradient: 0.25,
            hue_rotation_deg: 25.0,
            speckle_prob: 0.02,
            background: BACKGROUND,
        }
    }

    /// No appearance change at all; useful for exact geometric checks.
    pub fn clean() -> Self {
        DomainParams {
            noise_sigma: 0.0,
            ..Self::synthetic()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(contract_err!("noise sigma must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.speckle_prob) {
            return Err(contract_err!("speckle probability outside [0, 1]"));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(contract_err!("background colour outside [0, 1]"));
        }
        Ok(())
    }
}

/// Named appearance presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Syn,
    Real,
}

impl Domain {
    pub fn params(self) -> DomainParams {
        match self {
            Domain::Syn => DomainParams::synthetic(),
            Domain::Real => DomainParams::real(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Syn => "syn",
            Domain::Real => "real",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    /// Axis-aligned; covers columns `x..x+w` and rows `y..y+h`.
    Rect { x: i64, y: i64, w: i64, h: i64 },
    Disc { cx: f64, cy: f64, r: f64 },
    Triangle { v: [(f64, f64); 3] },
}

impl ShapeKind {
    /// Whether the shape covers the centre of pixel (row, col).
    pub fn covers(&self, row: usize, col: usize) -> bool {
        let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
        match *self {
            ShapeKind::Rect { x, y, w, h } => {
                let (c, r) = (col as i64, row as i64);
                c >= x && c < x + w && r >= y && r < y + h
            }
            ShapeKind::Disc { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            ShapeKind::Triangle { v } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                let d = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
                d.iter().all(|&e| e >= 0.0) || d.iter().all(|&e| e <= 0.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub class: u8,
    pub color: [f64; 3],
}

/// Image plus per-pixel class labels and instance ids (0 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Tensor,
    pub labels: IdMap,
    pub instances: IdMap,
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Base hue of an object class: the C−1 object classes are spread evenly
/// around the colour wheel.
pub fn class_hue(class: u8, classes: usize) -> f64 {
    360.0 * f64::from(class - 1) / (classes - 1) as f64
}

/// Draws the layout of a frame: shape geometry, class and colour.
pub fn sample_scene(num_shapes: usize, classes: usize, height: usize, width: usize, seed: u64) -> Vec<PlacedShape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHAPE_STREAM);
    let (hf, wf) = (height as f64, width as f64);
    let min_side = height.min(width) as f64;
    (0..num_shapes)
        .map(|_| {
            let class = rng.random_range(1..classes) as u8;
            let kind = match rng.random_range(0..3) {
                0 => {
                    let lo = (min_side / 8.0).round().max(2.0) as i64;
                    let hi = (min_side / 2.6).round() as i64;
                    let w = rng.random_range(lo..=hi);
                    let h = rng.random_range(lo..=hi);
                    let x = rng.random_range(-w / 4..=(width as i64 - 3 * w / 4));
                    let y = rng.random_range(-h / 4..=(height as i64 - 3 * h / 4));
                    ShapeKind::Rect { x, y, w, h }
                }
                1 => {
                    let r = rng.random_range(min_side / 12.0..=min_side / 5.0);
                    ShapeKind::Disc {
                        cx: rng.random_range(0.0..wf),
                        cy: rng.random_range(0.0..hf),
                        r,
                    }
                }
                _ => {
                    let (cx, cy) = (rng.random_range(0.0..wf), rng.random_range(0.0..hf));
                    let start = rng.random_range(0.0..std::f64::consts::TAU);
                    let mut v = [(0.0, 0.0); 3];
                    for (i, vert) in v.iter_mut().enumerate() {
                        let angle = start + i as f64 * std::f64::consts::TAU / 3.0 + rng.random_range(-0.4..0.4);
                        let radius = rng.random_range(min_side / 9.0..=min_side / 4.5);
                        *vert = (cx + radius * angle.cos(), cy + radius * angle.sin());
                    }
                    ShapeKind::Triangle { v }
                }
            };
            let hue = class_hue(class, classes) + rng.random_range(-10.0..=10.0);
            let sat = rng.random_range(0.6..=0.85);
            let val = rng.random_range(0.7..=0.95);
            PlacedShape {
                kind,
                class,
                color: hsv_to_rgb(hue, sat, val),
            }
        })
        .collect()
}

fn hue_rotation_matrix(deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let a = (1.0 - c) / 3.0;
    let b = s / 3f64.sqrt();
    [[c + a, a - b, a + b], [a + b, c + a, a - b], [a - b, a + b, c + a]]
}

/// Paints `shapes` in order (later shapes occlude earlier ones) and applies
/// the domain's appearance transform.
pub fn render_scene(
    shapes: &[PlacedShape],
    domain: &DomainParams,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Frame> {
    domain.validate()?;
    if shapes.len() > usize::from(u8::MAX) {
        return Err(contract_err!("at most 255 instances per frame"));
    }
    let n = height * width;
    let mut rgb = vec![domain.background; n];
    let mut labels = vec![0u8; n];
    let mut instances = vec![0u8; n];
    for (i, shape) in shapes.iter().enumerate() {
        for row in 0..height {
            for col in 0..width {
                if shape.kind.covers(row, col) {
                    let p = row * width + col;
                    rgb[p] = shape.color;
                    labels[p] = shape.class;
                    instances[p] = (i + 1) as u8;
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(APPEARANCE_STREAM);

    if domain.hue_rotation_deg != 0.0 {
        let m = hue_rotation_matrix(domain.hue_rotation_deg);
        for px in rgb.iter_mut() {
            let v = *px;
            *px = [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2]);
        }
    }
    if domain.brightness_gradient != 0.0 {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (dy, dx) = angle.sin_cos();
        // Project pixel centres onto the ramp direction and normalise to [0, 1].
        let corners = [(0.0, 0.0), (width as f64, 0.0), (0.0, height as f64), (width as f64, height as f64)];
        let proj = |x: f64, y: f64| x * dx + y * dy;
        let lo = corners.iter().map(|&(x, y)| proj(x, y)).fold(f64::INFINITY, f64::min);
        let hi = corners.iter().map(|&(x, y)| proj(x, y)).fold(f64::NEG_INFINITY, f64::max);
        for (p, px) in rgb.iter_mut().enumerate() {
            let t = (proj((p % width) as f64 + 0.5, (p / width) as f64 + 0.5) - lo) / (hi - lo);
            let offset = domain.brightness_gradient * (t - 0.5);
            px.iter_mut().for_each(|c| *c += offset);
        }
    }
    if domain.speckle_prob > 0.0 {
        for px in rgb.iter_mut() {
            if rng.random::<f64>() < domain.speckle_prob {
                *px = [rng.random(), rng.random(), rng.random()];
            }
        }
    }
    if domain.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, domain.noise_sigma).map_err(|e| contract_err!("noise: {e}"))?;
        for px in rgb.iter_mut() {
            px.iter_mut().for_each(|c| *c += normal.sample(&mut rng));
        }
    }

    let mut planar = vec![0.0; 3 * n];
    for (p, px) in rgb.iter().enumerate() {
        for c in 0..3 {
            planar[c * n + p] = px[c].clamp(0.0, 1.0);
        }
    }
    Ok(Frame {
        image: Tensor::from_vec([3, height, width], planar)?,
        labels: IdMap::new(width, height, labels)?,
        instances: IdMap::new(width, height, instances)?,
    })
}

/// Renders one frame with `num_shapes` random shapes.
pub fn render_frame(
    num_shapes: usize,
    classes: usize,
    domain: &DomainParams,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Frame> {
    if classes < 2 {
        return Err(contract_err!("need at least 2 classes, got {classes}"));
    }
    if classes > usize::from(u8::MAX) + 1 {
        return Err(contract_err!("at most 256 classes fit in 8-bit label maps"));
    }
    if height < 16 || width < 16 {
        return Err(shape_err!("frames must be at least 16×16, got {height}×{width}"));
    }
    let shapes = sample_scene(num_shapes, classes, height, width, seed);
    render_scene(&shapes, domain, height, width, seed)
}

/// Number of shapes in frame `seed`, uniform in 1..=MAX_SHAPES_PER_FRAME.
fn shape_count(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng.random_range(1..=MAX_SHAPES_PER_FRAME)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameFiles {
    pub image: String,
    pub labels: String,
    pub instances: String,
    pub masks: String,
}

impl FrameFiles {
    pub fn for_index(k: usize) -> Self {
        let stem = format!("frame_{k:05}");
        FrameFiles {
            image: format!("{stem}.ppm"),
            labels: format!("{stem}.labels.pgm"),
            instances: format!("{stem}.instances.pgm"),
            masks: format!("{stem}.{MASKS_EXTENSION}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain: String,
    pub frame_count: usize,
    pub seed: u64,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub appearance: DomainParams,
    pub frames: Vec<FrameFiles>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format("dataset manifest", &path, e.to_string()))?;
        if manifest.frames.len() != manifest.frame_count {
            return Err(Error::format(
                "dataset manifest",
                &path,
                format!("frame_count {} but {} frames listed", manifest.frame_count, manifest.frames.len()),
            ));
        }
        Ok(manifest)
    }
}

fn to_bytes(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `n` frames and a manifest into `out`. Frame `k` uses seed `seed ^ k`.
#[allow(clippy::too_many_arguments)]
pub fn gen_dataset(
    n: usize,
    domain_name: &str,
    domain: &DomainParams,
    out: &Path,
    seed: u64,
    classes: usize,
    height: usize,
    width: usize,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let frame_seed = seed ^ k as u64;
        let frame = render_frame(shape_count(frame_seed), classes, domain, height, width, frame_seed)?;
        let files = FrameFiles::for_index(k);
        write_frame(out, &files, &frame)?;
        frames.push(files);
    }
    let manifest = DatasetManifest {
        domain: domain_name.to_string(),
        frame_count: n,
        seed,
        classes,
        height,
        width,
        appearance: *domain,
        frames,
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn write_frame(dir: &Path, files: &FrameFiles, frame: &Frame) -> Result<()> {
    let (_, h, w) = frame.image.shape().chw()?;
    let n = h * w;
    let data = frame.image.data();
    let rgb: Vec<u8> = (0..n).flat_map(|p| [0, 1, 2].map(|c| to_bytes(data[c * n + p]))).collect();
    pnm::write(&dir.join(&files.image), &pnm::encode_ppm(w, h, &rgb))?;
    pnm::write(&dir.join(&files.labels), &pnm::encode_pgm(w, h, frame.labels.ids()))?;
    pnm::write(&dir.join(&files.instances), &pnm::encode_pgm(w, h, frame.instances.ids()))?;
    Ok(())
}

/// Loads a P6 image as a 3×H×W tensor scaled to [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let r = pnm::read(path)?;
    if r.channels != 3 {
        return Err(Error::format("RGB image", path, "expected a P6 file"));
    }
    let n = r.width * r.height;
    let mut planar = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            planar[c * n + p] = f64::from(r.samples[p * 3 + c]) / 255.0;
        }
    }
    Tensor::from_vec([3, r.height, r.width], planar)
}

/// Loads a P5 id map (labels or instances).
pub fn load_id_map(path: &Path) -> Result<IdMap> {
    let r = pnm::read(path)?;
    if r.channels != 1 {
        return Err(Error::format("id map", path, "expected a P5 file"));
    }
    IdMap::new(r.width, r.height, r.samples)
}

/// Resolves a manifest-relative file.
pub fn frame_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_shapes_gives_background_only() {
        let d = DomainParams::synthetic();
        let f = render_frame(0, 5, &d, 16, 16, 3).unwrap();
        assert!(f.labels.ids().iter().all(|&l| l == 0));
        assert!(f.instances.ids().iter().all(|&l| l == 0));
        let mean = f.image.data().iter().sum::<f64>() / f.image.numel() as f64;
        assert!((mean - 0.45).abs() < 0.01);

        let clean = render_frame(0, 5, &DomainParams::clean(), 16, 16, 3).unwrap();
        assert!(clean.image.data().iter().all(|&v| v == 0.45));
    }

    #[test]
    fn rectangle_area_is_exact() {
        let shape = PlacedShape {
            kind: ShapeKind::Rect { x: 5, y: 3, w: 7, h: 4 },
            class: 2,
            color: [0.9, 0.1, 0.1],
        };
        let f = render_scene(&[shape], &DomainParams::clean(), 16, 20, 0).unwrap();
        assert_eq!(f.labels.ids().iter().filter(|&&l| l != 0).count(), 28);
        assert_eq!(f.labels.get(3, 5), 2);
        assert_eq!(f.labels.get(6, 11), 2);
        assert_eq!(f.labels.get(7, 11), 0);
        assert_eq!(f.labels.get(6, 12), 0);
    }

    #[test]
    fn later_shapes_occlude_earlier_ones() {
        let a = PlacedShape {
            kind: ShapeKind::Rect { x: 0, y: 0, w: 10, h: 10 },
            class: 1,
            color: [1.0, 0.0, 0.0],
        };
        let b = PlacedShape {
            kind: ShapeKind::Rect { x: 5, y: 5, w: 10, h: 10 },
            class: 3,
            color: [0.0, 0.0, 1.0],
        };
        let f = render_scene(&[a, b], &DomainParams::clean(), 16, 16, 0).unwrap();
        assert_eq!(f.instances.get(7, 7), 2);
        assert_eq!(f.labels.get(7, 7), 3);
        assert_eq!(f.instances.ids().iter().filter(|&&i| i == 1).count(), 100 - 25);
    }

    #[test]
    fn frames_are_deterministic_and_consistent() {
        for seed in 0..20 {
            let d = DomainParams::real();
            let a = render_frame(5, 5, &d, 32, 32, seed).unwrap();
            let b = render_frame(5, 5, &d, 32, 32, seed).unwrap();
            assert_eq!(a, b);
            assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let mut class_of = [None; 256];
            for (&inst, &label) in a.instances.ids().iter().zip(a.labels.ids()) {
                if inst == 0 {
                    assert_eq!(label, 0);
                    continue;
                }
                assert!(label >= 1 && label < 5);
                let slot = &mut class_of[inst as usize];
                assert_eq!(*slot.get_or_insert(label), label);
            }
        }
    }

    #[test]
    fn domains_share_layout() {
        for seed in 0..10 {
            let syn = render_frame(4, 5, &DomainParams::synthetic(), 32, 32, seed).unwrap();
            let real = render_frame(4, 5, &DomainParams::real(), 32, 32, seed).unwrap();
            assert_eq!(syn.labels, real.labels);
            assert_eq!(syn.instances, real.instances);
            assert_ne!(syn.image, real.image);
        }
    }

    #[test]
    fn hue_rotation_preserves_grey() {
        let m = hue_rotation_matrix(25.0);
        for row in m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let d = DomainParams::synthetic();
        assert!(render_frame(1, 1, &d, 32, 32, 0).is_err());
        assert!(render_frame(1, 5, &d, 8, 32, 0).is_err());
    }

    #[test]
    fn dataset_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_dataset(3, "syn", &DomainParams::synthetic(), dir.path(), 11, 5, 16, 24).unwrap();
        assert_eq!(m.frames.len(), 3);
        assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);
        let img = load_image(&dir.path().join(&m.frames[1].image)).unwrap();
        assert_eq!(img.dims(), &[3, 16, 24]);
        let expect = render_frame(shape_count(11 ^ 1), 5, &DomainParams::synthetic(), 16, 24, 11 ^ 1).unwrap();
        let labels = load_id_map(&dir.path().join(&m.frames[1].labels)).unwrap();
        assert_eq!(labels, expect.labels);
        for (a, b) in img.data().iter().zip(expect.image.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn empty_dataset_has_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_dataset(0, "real", &DomainParams::real(), dir.path(), 0, 5, 16, 16).unwrap();
        assert!(m.frames.is_empty());
        assert_eq!(m.frame_count, 0);
    }
}
