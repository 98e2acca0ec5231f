//! COCO-17 keypoints: spatial encodings for conditioning and the OKS metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_KEYPOINTS: usize = 17;
pub const NUM_LIMB_CLASSES: usize = 6;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Standard COCO per-keypoint falloff constants.
pub const COCO_SIGMAS: [f64; NUM_KEYPOINTS] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// Index of each keypoint's mirror image under a horizontal flip.
pub const FLIP_INDEX: [usize; NUM_KEYPOINTS] =
    [0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LimbClass {
    LeftArm = 0,
    RightArm = 1,
    LeftLeg = 2,
    RightLeg = 3,
    Torso = 4,
    Head = 5,
}

/// Skeleton edges grouped by class. The nose-to-neck edge of the head class is
/// handled separately since its far end is the shoulder midpoint.
pub const SKELETON_EDGES: [(LimbClass, usize, usize); 16] = [
    (LimbClass::LeftArm, 5, 7),
    (LimbClass::LeftArm, 7, 9),
    (LimbClass::RightArm, 6, 8),
    (LimbClass::RightArm, 8, 10),
    (LimbClass::LeftLeg, 11, 13),
    (LimbClass::LeftLeg, 13, 15),
    (LimbClass::RightLeg, 12, 14),
    (LimbClass::RightLeg, 14, 16),
    (LimbClass::Torso, 5, 6),
    (LimbClass::Torso, 11, 12),
    (LimbClass::Torso, 5, 11),
    (LimbClass::Torso, 6, 12),
    (LimbClass::Head, 0, 1),
    (LimbClass::Head, 0, 2),
    (LimbClass::Head, 1, 3),
    (LimbClass::Head, 2, 4),
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            visible: true,
        }
    }

    pub const HIDDEN: Keypoint = Keypoint {
        x: 0.0,
        y: 0.0,
        visible: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoints17 {
    points: [Keypoint; NUM_KEYPOINTS],
}

impl Default for Keypoints17 {
    fn default() -> Self {
        Self::invisible()
    }
}

impl Keypoints17 {
    pub fn new(points: [Keypoint; NUM_KEYPOINTS]) -> Self {
        Self { points }
    }

    pub fn invisible() -> Self {
        Self {
            points: [Keypoint::HIDDEN; NUM_KEYPOINTS],
        }
    }

    /// Fails with `SchemaVersionMismatch` unless exactly 17 entries are given.
    pub fn from_slice(points: &[Keypoint]) -> Result<Self> {
        let points: [Keypoint; NUM_KEYPOINTS] = points.try_into().map_err(|_| {
            Error::SchemaVersionMismatch(format!(
                "expected {NUM_KEYPOINTS} keypoints, got {}",
                points.len()
            ))
        })?;
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Keypoint; NUM_KEYPOINTS] {
        &self.points
    }

    pub fn get(&self, i: usize) -> Keypoint {
        self.points[i]
    }

    pub fn set(&mut self, i: usize, kp: Keypoint) {
        self.points[i] = kp;
    }

    pub fn visible_count(&self) -> usize {
        self.points.iter().filter(|p| p.visible).count()
    }

    /// Mirror across the vertical axis of an image `width` pixels wide,
    /// swapping left/right keypoint identities.
    pub fn flipped(&self, width: usize) -> Self {
        let far = width as f64 - 1.0;
        let mut out = [Keypoint::HIDDEN; NUM_KEYPOINTS];
        for (i, p) in self.points.iter().enumerate() {
            out[FLIP_INDEX[i]] = Keypoint {
                x: far - p.x,
                y: p.y,
                visible: p.visible,
            };
        }
        Self { points: out }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut out = self.clone();
        for p in &mut out.points {
            p.x += dx;
            p.y += dy;
        }
        out
    }
}

/// Pixel index of a continuous coordinate: `floor(v + 0.5)`.
pub fn pixel_index(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

fn in_bounds(x: i64, y: i64, h: usize, w: usize) -> bool {
    x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h
}

/// One-hot keypoint map `17 x H x W`; invisible or out-of-range keypoints
/// leave their channel empty.
pub fn encode_keypoints(kps: &Keypoints17, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(&[NUM_KEYPOINTS, h, w]);
    for (k, p) in kps.points.iter().enumerate() {
        if !p.visible {
            continue;
        }
        let (x, y) = (pixel_index(p.x), pixel_index(p.y));
        if in_bounds(x, y, h, w) {
            t.data_mut()[(k * h + y as usize) * w + x as usize] = 1.0;
        }
    }
    t
}

/// Integer points of the digital segment between two pixels.
///
/// Along the major axis every integer is visited; the minor coordinate is the
/// ideal line rounded half-up, so the result is independent of endpoint order.
pub fn line_pixels(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    if dx == 0 && dy == 0 {
        return vec![a];
    }
    let x_major = dx.abs() >= dy.abs();
    let (start, end) = if x_major {
        if a.0 <= b.0 { (a, b) } else { (b, a) }
    } else if a.1 <= b.1 {
        (a, b)
    } else {
        (b, a)
    };
    let (major_span, minor_span) = if x_major {
        (end.0 - start.0, end.1 - start.1)
    } else {
        (end.1 - start.1, end.0 - start.0)
    };
    (0..=major_span)
        .map(|i| {
            // round(i * minor / major) with ties toward +inf
            let minor = (2 * i * minor_span + major_span).div_euclid(2 * major_span);
            if x_major {
                (start.0 + i, start.1 + minor)
            } else {
                (start.0 + minor, start.1 + i)
            }
        })
        .collect()
}

fn draw_segment(t: &mut Tensor, class: LimbClass, a: (f64, f64), b: (f64, f64), h: usize, w: usize) {
    let pa = (pixel_index(a.0), pixel_index(a.1));
    let pb = (pixel_index(b.0), pixel_index(b.1));
    for (x, y) in line_pixels(pa, pb) {
        if in_bounds(x, y, h, w) {
            t.data_mut()[((class as usize) * h + y as usize) * w + x as usize] = 1.0;
        }
    }
}

/// All drawable segments `(class, from, to)` in continuous coordinates.
pub fn skeleton_segments(kps: &Keypoints17) -> Vec<(LimbClass, (f64, f64), (f64, f64))> {
    let p = &kps.points;
    let mut segs: Vec<_> = SKELETON_EDGES
        .iter()
        .filter(|(_, i, j)| p[*i].visible && p[*j].visible)
        .map(|&(c, i, j)| (c, (p[i].x, p[i].y), (p[j].x, p[j].y)))
        .collect();
    if p[0].visible && p[5].visible && p[6].visible {
        let neck = ((p[5].x + p[6].x) / 2.0, (p[5].y + p[6].y) / 2.0);
        segs.push((LimbClass::Head, (p[0].x, p[0].y), neck));
    }
    segs
}

/// Skeleton map `6 x H x W` with one channel per limb class.
pub fn rasterize_skeleton(kps: &Keypoints17, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(&[NUM_LIMB_CLASSES, h, w]);
    for (class, a, b) in skeleton_segments(kps) {
        draw_segment(&mut t, class, a, b, h, w);
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseMaps {
    /// `17 x H x W`
    pub keypoints: Tensor,
    /// `6 x H x W`
    pub skeleton: Tensor,
}

impl PoseMaps {
    pub fn from_keypoints(kps: &Keypoints17, h: usize, w: usize) -> Self {
        Self {
            keypoints: encode_keypoints(kps, h, w),
            skeleton: rasterize_skeleton(kps, h, w),
        }
    }
}

/// Object keypoint similarity with COCO falloffs, averaged over the visible
/// ground-truth keypoints. `scale` is the object area in pixels².
pub fn oks(pred: &Keypoints17, gt: &Keypoints17, scale: f64) -> Result<f64> {
    let visible = gt.visible_count();
    if visible == 0 {
        return Err(Error::NoVisibleGroundTruth);
    }
    let mut total = 0.0;
    for i in 0..NUM_KEYPOINTS {
        let (g, p) = (gt.points[i], pred.points[i]);
        if !g.visible || !p.visible {
            continue;
        }
        let k = 2.0 * COCO_SIGMAS[i];
        let d2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
        total += (-d2 / (2.0 * scale * k * k)).exp();
    }
    Ok(total / visible as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn only(i: usize, x: f64, y: f64) -> Keypoints17 {
        let mut k = Keypoints17::invisible();
        k.set(i, Keypoint::new(x, y));
        k
    }

    fn ones(t: &Tensor) -> Vec<usize> {
        t.data()
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 1.0)
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn encode_single_visible_keypoint() {
        let t = encode_keypoints(&only(0, 3.0, 2.0), 8, 8);
        assert_eq!(ones(&t), vec![2 * 8 + 3]);
    }

    #[test]
    fn encode_all_invisible_is_empty() {
        let t = encode_keypoints(&Keypoints17::invisible(), 8, 8);
        assert_eq!(t.shape(), &[17, 8, 8]);
        assert!(t.data().iter().all(|v| *v == 0.0));
    }

    /// Brute-force rounding oracle over a grid of fractional coordinates.
    #[test]
    fn encode_rounding_matches_bruteforce() {
        let (h, w) = (8usize, 8usize);
        for xi in -20..=100 {
            for yi in [-1.0, 0.2, 3.5, 7.49, 7.5] {
                let x = xi as f64 / 12.5;
                let t = encode_keypoints(&only(5, x, yi), h, w);
                let cx = (x + 0.5).floor();
                let cy = (yi + 0.5).floor();
                let expect: Vec<usize> = if cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64 {
                    vec![(5 * h + cy as usize) * w + cx as usize]
                } else {
                    vec![]
                };
                assert_eq!(ones(&t), expect, "x={x} y={yi}");
            }
        }
        // the case called out explicitly: x = 7.6 rounds to column 8, which is dropped
        let t = encode_keypoints(&only(5, 7.6, 0.2), h, w);
        assert!(ones(&t).is_empty());
    }

    #[test]
    fn torso_line_between_shoulders() {
        let mut k = Keypoints17::invisible();
        k.set(5, Keypoint::new(1.0, 4.0));
        k.set(6, Keypoint::new(6.0, 4.0));
        let s = rasterize_skeleton(&k, 8, 8);
        let torso = LimbClass::Torso as usize;
        let expect: Vec<usize> = (1..=6).map(|x| (torso * 8 + 4) * 8 + x).collect();
        assert_eq!(ones(&s), expect);
    }

    #[test]
    fn degenerate_arm_is_a_single_pixel() {
        let mut k = Keypoints17::invisible();
        for i in [5, 7, 9] {
            k.set(i, Keypoint::new(2.0, 2.0));
        }
        let s = rasterize_skeleton(&k, 8, 8);
        let arm = LimbClass::LeftArm as usize;
        assert_eq!(ones(&s), vec![(arm * 8 + 2) * 8 + 2]);
    }

    #[test]
    fn empty_skeleton() {
        let s = rasterize_skeleton(&Keypoints17::invisible(), 5, 4);
        assert_eq!(s.shape(), &[6, 5, 4]);
        assert_eq!(s.sum(), 0.0);
    }

    #[test]
    fn oks_closed_forms() {
        let mut gt = Keypoints17::invisible();
        gt.set(3, Keypoint::new(10.0, 10.0));
        gt.set(9, Keypoint::new(20.0, 5.0));
        assert!((oks(&gt, &gt, 50.0).unwrap() - 1.0).abs() < 1e-12);

        let scale = 64.0;
        let single = only(7, 4.0, 4.0);
        let k = 2.0 * COCO_SIGMAS[7];
        let d = (2.0 * scale * k * k).sqrt();
        let pred = only(7, 4.0 + d, 4.0);
        assert!((oks(&pred, &single, scale).unwrap() - (-1.0f64).exp()).abs() < 1e-12);

        let mut half = gt.clone();
        half.set(9, Keypoint::HIDDEN);
        assert!((oks(&half, &gt, 50.0).unwrap() - 0.5).abs() < 1e-12);

        assert!(matches!(
            oks(&gt, &Keypoints17::invisible(), 1.0),
            Err(Error::NoVisibleGroundTruth)
        ));
    }

    #[test]
    fn flip_swaps_sides() {
        let k = only(9, 3.0, 4.0);
        let f = k.flipped(10);
        assert!(!f.get(9).visible);
        assert_eq!(f.get(10), Keypoint::new(6.0, 4.0));
        assert_eq!(f.flipped(10), k);
    }

    fn arb_keypoints() -> impl Strategy<Value = Keypoints17> {
        proptest::collection::vec((-4.0..20.0f64, -4.0..20.0f64, any::<bool>()), 17).prop_map(|v| {
            let pts: Vec<Keypoint> = v
                .into_iter()
                .map(|(x, y, visible)| Keypoint { x, y, visible })
                .collect();
            Keypoints17::from_slice(&pts).unwrap()
        })
    }

    proptest! {
        #[test]
        fn encode_channels_hold_at_most_one_pixel(k in arb_keypoints()) {
            let t = encode_keypoints(&k, 13, 9);
            for c in 0..17 {
                let s: f64 = t.data()[c * 13 * 9..(c + 1) * 13 * 9].iter().sum();
                prop_assert!(s <= 1.0);
            }
            prop_assert!(t.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        }

        #[test]
        fn oks_of_self_is_one(k in arb_keypoints(), s in 0.1..1e4f64) {
            prop_assume!(k.visible_count() > 0);
            prop_assert!((oks(&k, &k, s).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn oks_translation_invariant(p in arb_keypoints(), g in arb_keypoints(), dx in -5.0..5.0f64, dy in -5.0..5.0f64) {
            prop_assume!(g.visible_count() > 0);
            let a = oks(&p, &g, 40.0).unwrap();
            let b = oks(&p.translated(dx, dy), &g.translated(dx, dy), 40.0).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn oks_non_increasing_in_distance(g in arb_keypoints(), i in 0usize..17, d1 in 0.0..10.0f64, extra in 0.0..10.0f64) {
            prop_assume!(g.get(i).visible);
            let mut near = g.clone();
            let mut far = g.clone();
            let gi = g.get(i);
            near.set(i, Keypoint::new(gi.x + d1, gi.y));
            far.set(i, Keypoint::new(gi.x + d1 + extra, gi.y));
            prop_assert!(oks(&far, &g, 30.0).unwrap() <= oks(&near, &g, 30.0).unwrap() + 1e-15);
        }

        #[test]
        fn oks_symmetric_under_equal_sigma_relabel(p in arb_keypoints(), g in arb_keypoints()) {
            prop_assume!(g.visible_count() > 0);
            // eyes share a sigma, as do every left/right pair
            let swap = |k: &Keypoints17| {
                let mut o = k.clone();
                o.set(1, k.get(2));
                o.set(2, k.get(1));
                o.set(11, k.get(12));
                o.set(12, k.get(11));
                o
            };
            let a = oks(&p, &g, 25.0).unwrap();
            let b = oks(&swap(&p), &swap(&g), 25.0).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
