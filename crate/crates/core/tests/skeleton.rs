//! Skeleton rasterization against an independent per-pixel membership test.

use posefill::pose::{rasterize_skeleton, Keypoint, Keypoints17, LimbClass, SKELETON_EDGES, NUM_LIMB_CLASSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Whether pixel `p` lies on the discrete segment `a`-`b`: along the longer
/// axis every integer between the endpoints is covered, and the other
/// coordinate is the ideal line rounded half up from the lower endpoint.
fn on_segment(a: (i64, i64), b: (i64, i64), p: (i64, i64)) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    if dx == 0 && dy == 0 {
        return p == a;
    }
    let x_major = dx.abs() >= dy.abs();
    let key = |q: (i64, i64)| if x_major { q.0 } else { q.1 };
    let (lo, hi) = if key(a) <= key(b) { (a, b) } else { (b, a) };
    let (major, minor, lo_major, lo_minor, span_major, span_minor) = if x_major {
        (p.0, p.1, lo.0, lo.1, hi.0 - lo.0, hi.1 - lo.1)
    } else {
        (p.1, p.0, lo.1, lo.0, hi.1 - lo.1, hi.0 - lo.0)
    };
    let i = major - lo_major;
    if i < 0 || i > span_major {
        return false;
    }
    let ideal = i as f64 * span_minor as f64 / span_major as f64;
    minor - lo_minor == round_half_up(ideal)
}

fn random_keypoints(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Keypoints17 {
    let mut k = Keypoints17::invisible();
    for i in 0..17 {
        if rng.random_bool(0.8) {
            // Some points fall outside the image to exercise clipping.
            let x = rng.random_range(-3.0..w as f64 + 3.0);
            let y = rng.random_range(-3.0..h as f64 + 3.0);
            k.set(i, Keypoint::new(x, y));
        }
    }
    k
}

fn segments(k: &Keypoints17) -> Vec<(LimbClass, (f64, f64), (f64, f64))> {
    let p = k.points();
    let mut out: Vec<_> = SKELETON_EDGES
        .iter()
        .filter(|(_, i, j)| p[*i].visible && p[*j].visible)
        .map(|&(c, i, j)| (c, (p[i].x, p[i].y), (p[j].x, p[j].y)))
        .collect();
    if p[0].visible && p[5].visible && p[6].visible {
        let neck = ((p[5].x + p[6].x) / 2.0, (p[5].y + p[6].y) / 2.0);
        out.push((LimbClass::Head, (p[0].x, p[0].y), neck));
    }
    out
}

#[test]
fn skeleton_matches_membership_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..100 {
        let (h, w) = [(18, 10), (36, 20), (24, 24)][case % 3];
        let k = random_keypoints(&mut rng, h, w);
        let got = rasterize_skeleton(&k, h, w);
        let segs = segments(&k);
        for c in 0..NUM_LIMB_CLASSES {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let want = segs.iter().any(|&(class, a, b)| {
                        class as usize == c
                            && on_segment(
                                (round_half_up(a.0), round_half_up(a.1)),
                                (round_half_up(b.0), round_half_up(b.1)),
                                (x, y),
                            )
                    });
                    let v = got.data()[(c * h + y as usize) * w + x as usize];
                    assert_eq!(v == 1.0, want, "case {case} class {c} pixel ({x},{y})");
                }
            }
        }
    }
}

#[test]
fn segment_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let a = (rng.random_range(-5..15), rng.random_range(-5..15));
        let b = (rng.random_range(-5..15), rng.random_range(-5..15));
        let mut ab = posefill::pose::line_pixels(a, b);
        let mut ba = posefill::pose::line_pixels(b, a);
        ab.sort();
        ba.sort();
        assert_eq!(ab, ba);
        for p in &ab {
            assert!(on_segment(a, b, *p));
        }
    }
}
