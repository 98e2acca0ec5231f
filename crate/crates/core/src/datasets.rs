//! Synthetic stick-figure data with exact keypoints, the on-disk sample layout,
//! and a color-blob pose detector.
//!
//! Figures are drawn on integer pixel positions with one uniquely colored
//! marker per joint, so detection is exact on clean renders.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{corrupt, minpool_mask, Mask};
use crate::pose::{line_pixels, Keypoint, Keypoints17, PoseMaps, NUM_KEYPOINTS, SKELETON_EDGES};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const BASE_RESOLUTION: (usize, usize) = (18, 10);

/// 8-bit level to `[-1, 1]`.
pub fn from_u8(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn to_u8(x: f64) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Snap to the nearest value representable in an 8-bit PNG.
pub fn quantize(x: f64) -> f64 {
    from_u8(to_u8(x))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSample {
    /// `3 x H x W` in `[-1, 1]`
    pub image: Tensor,
    pub mask: Mask,
    pub keypoints: Keypoints17,
    pub pose: PoseMaps,
}

impl MaskedSample {
    pub fn new(image: Tensor, mask: Mask, keypoints: Keypoints17) -> Result<Self> {
        let (h, w) = mask.dims();
        if image.shape() != [3, h, w] {
            return Err(Error::ShapeMismatch {
                expected: vec![3, h, w],
                got: image.shape().to_vec(),
            });
        }
        let pose = PoseMaps::from_keypoints(&keypoints, h, w);
        Ok(Self {
            image,
            mask,
            keypoints,
            pose,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.mask.dims()
    }

    pub fn corrupted(&self) -> Tensor {
        corrupt(&self.image, &self.mask).expect("shapes validated at construction")
    }

    /// Horizontal mirror of image, mask, and keypoints (left/right swapped);
    /// pose maps are re-rasterized.
    pub fn flipped(&self) -> Self {
        let (h, w) = self.resolution();
        let mut image = self.image.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    image.data_mut()[(c * h + y) * w + x] = self.image.data()[(c * h + y) * w + (w - 1 - x)];
                }
            }
        }
        let keypoints = self.keypoints.flipped(w);
        Self {
            image,
            mask: self.mask.flipped(),
            pose: PoseMaps::from_keypoints(&keypoints, h, w),
            keypoints,
        }
    }

    /// Halves the resolution `levels` times: average-pooled image, min-pooled
    /// mask, keypoints mapped by `x' = (x + 0.5) / 2 - 0.5`.
    pub fn downsampled(&self, levels: usize) -> Result<Self> {
        let mut out = self.clone();
        for _ in 0..levels {
            let (h, w) = out.resolution();
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::InvalidTarget {
                    src_h: h,
                    src_w: w,
                    target_h: h / 2,
                    target_w: w / 2,
                });
            }
            let (ho, wo) = (h / 2, w / 2);
            let mut img = Tensor::zeros(&[3, ho, wo]);
            for c in 0..3 {
                for y in 0..ho {
                    for x in 0..wo {
                        let at = |yy: usize, xx: usize| out.image.data()[(c * h + yy) * w + xx];
                        img.data_mut()[(c * ho + y) * wo + x] =
                            0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
                    }
                }
            }
            let mask = minpool_mask(&out.mask, ho, wo)?;
            let mut kps = out.keypoints.clone();
            for i in 0..NUM_KEYPOINTS {
                let p = kps.get(i);
                kps.set(
                    i,
                    Keypoint {
                        x: (p.x + 0.5) / 2.0 - 0.5,
                        y: (p.y + 0.5) / 2.0 - 0.5,
                        visible: p.visible,
                    },
                );
            }
            out = Self::new(img, mask, kps)?;
        }
        Ok(out)
    }
}

/// Joint colors: corners and edge midpoints of the RGB cube, using the 8-bit
/// levels 0, 128, 255. Every color has at least one saturated channel.
pub fn default_palette() -> [[f64; 3]; NUM_KEYPOINTS] {
    let levels = [from_u8(0), from_u8(128), from_u8(255)];
    let mut colors = Vec::new();
    for r in 0..3 {
        for g in 0..3 {
            for b in 0..3 {
                let c = [levels[r], levels[g], levels[b]];
                let saturated = [r, g, b].iter().any(|&i| i != 1);
                let mid = [r, g, b].iter().filter(|&&i| i == 1).count();
                // prefer colors with at most one mid channel
                if saturated && mid <= 1 {
                    colors.push(c);
                }
            }
        }
    }
    let mut out = [[0.0; 3]; NUM_KEYPOINTS];
    out.copy_from_slice(&colors[..NUM_KEYPOINTS]);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StickFigureSpec {
    pub palette: [[f64; 3]; NUM_KEYPOINTS],
    /// Limb thickness in pixels at 72 px image height.
    pub limb_width: usize,
    pub background_seed: u64,
    /// Figure scale multiplier range.
    pub scale_range: (f64, f64),
    /// Degrees from straight down, outward positive.
    pub upper_arm_angle: (f64, f64),
    pub elbow_bend: (f64, f64),
    pub thigh_angle: (f64, f64),
    pub knee_bend: (f64, f64),
    /// L∞ color tolerance for blob detection.
    pub tolerance: f64,
    pub min_blob_area: usize,
    /// Extra pixels around the figure bounding box, at least 2.
    pub mask_margin: usize,
}

impl Default for StickFigureSpec {
    fn default() -> Self {
        Self {
            palette: default_palette(),
            limb_width: 2,
            background_seed: 0,
            scale_range: (0.85, 1.0),
            upper_arm_angle: (10.0, 70.0),
            elbow_bend: (-30.0, 60.0),
            thigh_angle: (0.0, 25.0),
            knee_bend: (-20.0, 20.0),
            tolerance: 0.3,
            min_blob_area: 1,
            mask_margin: 2,
        }
    }
}

impl StickFigureSpec {
    /// Smallest pairwise L∞ distance between palette colors.
    pub fn palette_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..NUM_KEYPOINTS {
            for j in i + 1..NUM_KEYPOINTS {
                let d = (0..3)
                    .map(|c| (self.palette[i][c] - self.palette[j][c]).abs())
                    .fold(0.0, f64::max);
                best = best.min(d);
            }
        }
        best
    }
}

/// Pixel size of one skeleton unit at height `h` (1 at the base height).
fn unit(h: usize) -> f64 {
    h as f64 / BASE_RESOLUTION.0 as f64
}

fn marker_radius(h: usize) -> i64 {
    ((unit(h) - 1.0) / 2.0).floor().max(0.0) as i64
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StickFigure {
    pub keypoints: Keypoints17,
    pub limb_color: [f64; 3],
}

impl StickFigure {
    pub fn translated(&self, dx: i64, dy: i64) -> Self {
        Self {
            keypoints: self.keypoints.translated(dx as f64, dy as f64),
            limb_color: self.limb_color,
        }
    }
}

fn pose_candidate<R: Rng>(spec: &StickFigureSpec, rng: &mut R, h: usize, w: usize) -> Keypoints17 {
    let u = unit(h) * sample_range(rng, spec.scale_range);
    let rad = |d: f64| d.to_radians();
    let mut p = [(0.0f64, 0.0f64); NUM_KEYPOINTS];
    let hip_y = sample_range(rng, (7.5 * u, h as f64 - 7.5 * u));
    let cx = sample_range(rng, (0.35 * w as f64, 0.65 * w as f64));
    // The figure faces the viewer: its left side is on the image right.
    let (sl, sr) = ((cx + 2.0 * u, hip_y - 5.0 * u), (cx - 2.0 * u, hip_y - 5.0 * u));
    let (hl, hr) = ((cx + 1.0 * u, hip_y), (cx - 1.0 * u, hip_y));
    p[5] = sl;
    p[6] = sr;
    p[11] = hl;
    p[12] = hr;
    let tilt = sample_range(rng, (-0.5, 0.5)) * u;
    let nose = (cx + tilt, hip_y - 7.0 * u);
    p[0] = nose;
    p[1] = (nose.0 + u, nose.1 - u);
    p[2] = (nose.0 - u, nose.1 - u);
    p[3] = (nose.0 + 2.0 * u, nose.1);
    p[4] = (nose.0 - 2.0 * u, nose.1);
    for (side, shoulder, elbow, wrist) in [(1.0, 5, 7, 9), (-1.0, 6, 8, 10)] {
        let a = rad(sample_range(rng, spec.upper_arm_angle));
        let b = a + rad(sample_range(rng, spec.elbow_bend));
        let s = p[shoulder];
        p[elbow] = (s.0 + side * 3.0 * u * a.sin(), s.1 + 3.0 * u * a.cos());
        let e = p[elbow];
        p[wrist] = (e.0 + side * 3.0 * u * b.sin(), e.1 + 3.0 * u * b.cos());
    }
    for (side, hip, knee, ankle) in [(1.0, 11, 13, 15), (-1.0, 12, 14, 16)] {
        let a = rad(sample_range(rng, spec.thigh_angle));
        let b = a + rad(sample_range(rng, spec.knee_bend));
        let s = p[hip];
        p[knee] = (s.0 + side * 3.5 * u * a.sin(), s.1 + 3.5 * u * a.cos());
        let k = p[knee];
        p[ankle] = (k.0 + side * 3.5 * u * b.sin(), k.1 + 3.5 * u * b.cos());
    }
    let mut kps = Keypoints17::invisible();
    for (i, (x, y)) in p.iter().enumerate() {
        kps.set(i, Keypoint::new(x.round(), y.round()));
    }
    kps
}

/// Every marker fits in the image and no two markers overlap.
fn placeable(kps: &Keypoints17, h: usize, w: usize) -> bool {
    let r = marker_radius(h);
    let pts: Vec<(i64, i64)> = kps.points().iter().map(|p| (p.x as i64, p.y as i64)).collect();
    if pts
        .iter()
        .any(|&(x, y)| x - r < 0 || y - r < 0 || x + r >= w as i64 || y + r >= h as i64)
    {
        return false;
    }
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = (pts[i].0 - pts[j].0).abs().max((pts[i].1 - pts[j].1).abs());
            if d <= 2 * r {
                return false;
            }
        }
    }
    true
}

fn neutral_pose(h: usize, w: usize) -> Keypoints17 {
    let spec = StickFigureSpec {
        scale_range: (1.0, 1.0),
        upper_arm_angle: (20.0, 20.0),
        elbow_bend: (0.0, 0.0),
        thigh_angle: (10.0, 10.0),
        knee_bend: (0.0, 0.0),
        ..StickFigureSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut kps = pose_candidate(&spec, &mut rng, h, w);
    // center it
    let cx = (w as f64 / 2.0).floor();
    let cy = (h as f64 / 2.0).floor();
    let dx = cx - kps.get(0).x;
    let dy = cy - 0.5 * (kps.get(1).y + kps.get(15).y).round();
    kps = kps.translated(dx, dy.round());
    kps
}

/// Draws a random figure whose joints land on distinct integer pixels.
pub fn random_figure(spec: &StickFigureSpec, seed: u64, h: usize, w: usize) -> StickFigure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5713_C4F1);
    let mut kps = None;
    for _ in 0..200 {
        let cand = pose_candidate(spec, &mut rng, h, w);
        if placeable(&cand, h, w) {
            kps = Some(cand);
            break;
        }
    }
    let keypoints = kps.unwrap_or_else(|| neutral_pose(h, w));
    let gray = rng.random_range(-0.45..0.45);
    let limb_color = [0, 1, 2].map(|_| quantize(gray + rng.random_range(-0.1..0.1)));
    StickFigure { keypoints, limb_color }
}

/// Smooth, low-saturation background texture in `[-0.6, 0.6]`.
pub fn background(spec: &StickFigureSpec, seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.background_seed ^ seed.wrapping_mul(0x2545_F491_4F6C_DD1D));
    let base = rng.random_range(-0.35..0.35);
    let tint = [0, 1, 2].map(|_| rng.random_range(-0.08..0.08));
    let (gy, gx) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let (fy, fx, phase) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..6.28));
    let mut img = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let (ny, nx) = (y as f64 / h as f64, x as f64 / w as f64);
            let wave = 0.08 * (fy * 6.28 * ny + fx * 6.28 * nx + phase).sin();
            let noise = rng.random_range(-0.05..0.05);
            for c in 0..3 {
                let v = base + tint[c] + gy * (ny - 0.5) + gx * (nx - 0.5) + wave + noise;
                img.data_mut()[(c * h + y) * w + x] = quantize(v.clamp(-0.6, 0.6));
            }
        }
    }
    img
}

fn paint(img: &mut Tensor, h: usize, w: usize, x: i64, y: i64, color: [f64; 3]) {
    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
        return;
    }
    let (x, y) = (x as usize, y as usize);
    for (c, v) in color.iter().enumerate() {
        img.data_mut()[(c * h + y) * w + x] = *v;
    }
}

/// Renders `figure` over `bg` and returns the image plus its silhouette pixels.
pub fn render_figure(spec: &StickFigureSpec, figure: &StickFigure, bg: &Tensor) -> (Tensor, BTreeSet<(i64, i64)>) {
    let (_, h, w) = (bg.shape()[0], bg.shape()[1], bg.shape()[2]);
    let mut img = bg.clone();
    let mut silhouette = BTreeSet::new();
    let half = ((spec.limb_width as f64 * h as f64 / 72.0).round() as i64 - 1).max(0) / 2;
    let kp = |i: usize| {
        let p = figure.keypoints.get(i);
        (p.x as i64, p.y as i64)
    };
    let mut segments: Vec<((i64, i64), (i64, i64))> = SKELETON_EDGES.iter().map(|&(_, a, b)| (kp(a), kp(b))).collect();
    let neck = ((kp(5).0 + kp(6).0) / 2, (kp(5).1 + kp(6).1) / 2);
    segments.push((kp(0), neck));
    for (a, b) in segments {
        for (x, y) in line_pixels(a, b) {
            for dy in -half..=half {
                for dx in -half..=half {
                    if (0..w as i64).contains(&(x + dx)) && (0..h as i64).contains(&(y + dy)) {
                        paint(&mut img, h, w, x + dx, y + dy, figure.limb_color);
                        silhouette.insert((x + dx, y + dy));
                    }
                }
            }
        }
    }
    let r = marker_radius(h);
    for i in 0..NUM_KEYPOINTS {
        let (x, y) = kp(i);
        for dy in -r..=r {
            for dx in -r..=r {
                if (0..w as i64).contains(&(x + dx)) && (0..h as i64).contains(&(y + dy)) {
                    paint(&mut img, h, w, x + dx, y + dy, spec.palette[i]);
                    silhouette.insert((x + dx, y + dy));
                }
            }
        }
    }
    (img, silhouette)
}

/// Mask with the silhouette's bounding box, grown by `margin`, marked missing.
pub fn figure_mask(silhouette: &BTreeSet<(i64, i64)>, margin: usize, h: usize, w: usize) -> Mask {
    let mut m = Mask::ones(h, w);
    if silhouette.is_empty() {
        return m;
    }
    let x0 = silhouette.iter().map(|p| p.0).min().unwrap() - margin as i64;
    let x1 = silhouette.iter().map(|p| p.0).max().unwrap() + margin as i64;
    let y0 = silhouette.iter().map(|p| p.1).min().unwrap() - margin as i64;
    let y1 = silhouette.iter().map(|p| p.1).max().unwrap() + margin as i64;
    for y in y0.max(0)..=y1.min(h as i64 - 1) {
        for x in x0.max(0)..=x1.min(w as i64 - 1) {
            m.set(y as usize, x as usize, false);
        }
    }
    m
}

pub fn synth_sample(spec: &StickFigureSpec, seed: u64, h: usize, w: usize) -> MaskedSample {
    assert!(
        h >= BASE_RESOLUTION.0 && w >= BASE_RESOLUTION.1,
        "synthetic samples need at least {}x{}",
        BASE_RESOLUTION.0,
        BASE_RESOLUTION.1
    );
    let figure = random_figure(spec, seed, h, w);
    let bg = background(spec, seed, h, w);
    let (image, silhouette) = render_figure(spec, &figure, &bg);
    let mask = figure_mask(&silhouette, spec.mask_margin.max(2), h, w);
    MaskedSample::new(image, mask, figure.keypoints).expect("rendered shapes agree")
}

pub fn synth_dataset(spec: &StickFigureSpec, seed: u64, count: usize, h: usize, w: usize) -> Vec<MaskedSample> {
    (0..count as u64)
        .map(|i| synth_sample(spec, seed.wrapping_mul(1_000_003).wrapping_add(i), h, w))
        .collect()
}

/// Finds each palette color's largest 8-connected blob and reports its centroid.
pub fn detect_pose_blobs(image: &Tensor, spec: &StickFigureSpec) -> Keypoints17 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut out = Keypoints17::invisible();
    let mut hit = vec![false; h * w];
    let mut seen = vec![false; h * w];
    for (k, color) in spec.palette.iter().enumerate() {
        for i in 0..h * w {
            hit[i] = (0..3).all(|c| (d[c * h * w + i] - color[c]).abs() <= spec.tolerance);
            seen[i] = false;
        }
        let mut best: Option<(usize, f64, f64)> = None;
        for start in 0..h * w {
            if !hit[start] || seen[start] {
                continue;
            }
            let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (y, x) = ((i / w) as i64, (i % w) as i64);
                n += 1;
                sx += x as f64;
                sy += y as f64;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                            continue;
                        }
                        let j = yy as usize * w + xx as usize;
                        if hit[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
            if best.is_none_or(|b| n > b.0) {
                best = Some((n, sx / n as f64, sy / n as f64));
            }
        }
        if let Some((n, x, y)) = best {
            if n >= spec.min_blob_area.max(1) {
                out.set(k, Keypoint::new(x, y));
            }
        }
    }
    out
}

// ---- on-disk layout ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub height: usize,
    pub width: usize,
    pub ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Annotation {
    keypoints: Vec<[f64; 3]>,
}

pub fn sample_id(i: usize) -> String {
    format!("{i:06}")
}

pub(crate) fn image_to_png(image: &Tensor) -> image::RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    })
}

fn mask_to_png(mask: &Mask) -> image::GrayImage {
    let (h, w) = mask.dims();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([mask.get(y as usize, x as usize) * 255]))
}

pub(crate) fn write_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Writes `samples` under `root` with ids `000000`, `000001`, ...
pub fn save_dataset(root: &Path, samples: &[MaskedSample]) -> Result<Manifest> {
    let res = samples.first().map(|s| s.resolution()).unwrap_or(BASE_RESOLUTION);
    save_dataset_at(root, samples, res)
}

/// Like [`save_dataset`], with the manifest resolution given explicitly so
/// that an empty dataset still records it.
pub fn save_dataset_at(root: &Path, samples: &[MaskedSample], (height, width): (usize, usize)) -> Result<Manifest> {
    for sub in ["images", "masks", "annotations"] {
        fs::create_dir_all(root.join(sub))?;
    }
    let mut ids = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.resolution() != (height, width) {
            return Err(Error::ResolutionMismatch {
                expected: (height, width),
                got: s.resolution(),
            });
        }
        let id = sample_id(i);
        write_png(&image_to_png(&s.image), &root.join("images").join(format!("{id}.png")))?;
        write_png(&mask_to_png(&s.mask), &root.join("masks").join(format!("{id}.png")))?;
        let ann = Annotation {
            keypoints: s
                .keypoints
                .points()
                .iter()
                .map(|p| [p.x, p.y, p.visible as u8 as f64])
                .collect(),
        };
        fs::write(root.join("annotations").join(format!("{id}.json")), serde_json::to_vec(&ann)?)?;
        ids.push(id);
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        height,
        width,
        ids,
    };
    fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Lazily read dataset; each sample is validated when first loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: Manifest,
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let bytes = fs::read(root.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersionMismatch(format!(
            "manifest schema {} (supported: {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.ids.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.manifest.height, self.manifest.width)
    }

    fn corrupt_image(&self, id: &str, path: &Path, reason: impl ToString) -> Error {
        Error::CorruptImage {
            id: id.to_string(),
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    pub fn get(&self, index: usize) -> Result<MaskedSample> {
        let id = &self.manifest.ids[index];
        let (h, w) = self.resolution();

        let ann_path = self.root.join("annotations").join(format!("{id}.json"));
        if !ann_path.exists() {
            return Err(Error::MissingAnnotation(id.clone()));
        }
        let ann: Annotation = serde_json::from_slice(&fs::read(&ann_path)?)?;
        let points: Vec<Keypoint> = ann
            .keypoints
            .iter()
            .map(|[x, y, v]| Keypoint {
                x: *x,
                y: *y,
                visible: *v != 0.0,
            })
            .collect();
        let keypoints = Keypoints17::from_slice(&points)
            .map_err(|e| Error::SchemaVersionMismatch(format!("sample {id}: {e}")))?;

        let img_path = self.root.join("images").join(format!("{id}.png"));
        let rgb = image::open(&img_path)
            .map_err(|e| self.corrupt_image(id, &img_path, e))?
            .to_rgb8();
        if (rgb.height() as usize, rgb.width() as usize) != (h, w) {
            return Err(self.corrupt_image(id, &img_path, format!("size {}x{}, expected {h}x{w}", rgb.height(), rgb.width())));
        }
        let mut image = Tensor::zeros(&[3, h, w]);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                image.data_mut()[(c * h + y as usize) * w + x as usize] = from_u8(px.0[c]);
            }
        }

        let mask_path = self.root.join("masks").join(format!("{id}.png"));
        let gray = image::open(&mask_path)
            .map_err(|e| self.corrupt_image(id, &mask_path, e))?
            .to_luma8();
        if (gray.height() as usize, gray.width() as usize) != (h, w) {
            return Err(self.corrupt_image(id, &mask_path, "mask size differs from manifest"));
        }
        let mut values = Vec::with_capacity(h * w);
        for v in gray.as_raw() {
            match v {
                0 => values.push(0),
                255 => values.push(1),
                other => return Err(self.corrupt_image(id, &mask_path, format!("mask value {other} is neither 0 nor 255"))),
            }
        }
        let mask = Mask::from_values(h, w, values)?;
        MaskedSample::new(image, mask, keypoints)
    }

    pub fn load_all(&self) -> Result<Vec<MaskedSample>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// Deterministic permutation of `0..n` for a shuffle seed.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::oks;

    #[test]
    fn palette_is_well_separated() {
        let spec = StickFigureSpec::default();
        assert!(spec.palette_separation() > 0.3);
        for c in spec.palette {
            assert!(c.iter().any(|v| v.abs() == 1.0));
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = StickFigureSpec::default();
        assert_eq!(synth_sample(&spec, 4, 72, 40), synth_sample(&spec, 4, 72, 40));
        assert_ne!(synth_sample(&spec, 4, 72, 40), synth_sample(&spec, 5, 72, 40));
    }

    #[test]
    fn joint_pixels_carry_palette_colors() {
        let spec = StickFigureSpec::default();
        for (h, w) in [(72, 40), (18, 10)] {
            let s = synth_sample(&spec, 9, h, w);
            for (k, p) in s.keypoints.points().iter().enumerate() {
                assert!(p.visible);
                let (x, y) = (p.x as usize, p.y as usize);
                for c in 0..3 {
                    assert_eq!(s.image.data()[(c * h + y) * w + x], spec.palette[k][c]);
                }
            }
        }
    }

    #[test]
    fn mask_covers_silhouette_and_keypoints() {
        let spec = StickFigureSpec::default();
        for seed in 0..20 {
            let fig = random_figure(&spec, seed, 72, 40);
            let bg = background(&spec, seed, 72, 40);
            let (_, sil) = render_figure(&spec, &fig, &bg);
            let s = synth_sample(&spec, seed, 72, 40);
            assert!(s.mask.missing_count() >= sil.len());
            for &(x, y) in &sil {
                assert_eq!(s.mask.get(y as usize, x as usize), 0);
            }
        }
    }

    #[test]
    fn detector_recovers_clean_keypoints() {
        let spec = StickFigureSpec::default();
        let mut total = 0.0;
        for seed in 0..100 {
            let s = synth_sample(&spec, seed, 72, 40);
            let det = detect_pose_blobs(&s.image, &spec);
            total += oks(&det, &s.keypoints, s.mask.missing_bbox_area()).unwrap();
        }
        assert!(total / 100.0 >= 0.99);
    }

    #[test]
    fn detector_on_background_finds_nothing() {
        let spec = StickFigureSpec::default();
        let bg = background(&spec, 3, 72, 40);
        assert_eq!(detect_pose_blobs(&bg, &spec).visible_count(), 0);
    }

    #[test]
    fn detector_is_translation_equivariant() {
        let spec = StickFigureSpec::default();
        let fig = random_figure(&spec, 12, 72, 40);
        let bg = background(&spec, 12, 72, 40);
        let (a, _) = render_figure(&spec, &fig, &bg);
        let moved = fig.translated(1, -2);
        let (b, _) = render_figure(&spec, &moved, &bg);
        let (da, db) = (detect_pose_blobs(&a, &spec), detect_pose_blobs(&b, &spec));
        for i in 0..NUM_KEYPOINTS {
            let (p, q) = (da.get(i), db.get(i));
            if p.visible && q.visible {
                assert!((q.x - p.x - 1.0).abs() <= 1.0 && (q.y - p.y + 2.0).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn random_poses_are_placeable() {
        let spec = StickFigureSpec::default();
        for (h, w) in [(18, 10), (36, 20), (72, 40)] {
            let ok = (0..200)
                .filter(|&s| placeable(&random_figure(&spec, s, h, w).keypoints, h, w))
                .count();
            assert!(ok >= 195, "{h}x{w}: {ok}");
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let s = synth_sample(&StickFigureSpec::default(), 1, 36, 20);
        assert_eq!(s.flipped().flipped(), s);
    }

    #[test]
    fn downsample_halves_everything() {
        let s = synth_sample(&StickFigureSpec::default(), 2, 72, 40);
        let d = s.downsampled(2).unwrap();
        assert_eq!(d.resolution(), (18, 10));
        assert_eq!(d.keypoints.get(0).x, (s.keypoints.get(0).x + 0.5) / 4.0 - 0.5);
    }

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = StickFigureSpec::default();
        let samples = synth_dataset(&spec, 1, 10, 36, 20);
        save_dataset(dir.path(), &samples).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.load_all().unwrap(), samples);

        fs::remove_file(dir.path().join("annotations/000003.json")).unwrap();
        match ds.get(3) {
            Err(Error::MissingAnnotation(id)) => assert_eq!(id, "000003"),
            other => panic!("{other:?}"),
        }
        let short: Vec<[f64; 3]> = vec![[1.0, 1.0, 1.0]; 16];
        fs::write(
            dir.path().join("annotations/000004.json"),
            serde_json::to_vec(&serde_json::json!({ "keypoints": short })).unwrap(),
        )
        .unwrap();
        assert!(matches!(ds.get(4), Err(Error::SchemaVersionMismatch(_))));
        fs::write(dir.path().join("images/000005.png"), b"not a png").unwrap();
        assert!(matches!(ds.get(5), Err(Error::CorruptImage { .. })));
    }

    #[test]
    fn shuffle_is_seeded() {
        assert_eq!(shuffled_order(50, 3), shuffled_order(50, 3));
        assert_ne!(shuffled_order(50, 3), shuffled_order(50, 4));
    }
}
