//! Perturbing non-critical elements of recorded screens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::screen::{BBox, Screen};
use crate::D_TEXT;

use super::Demonstration;

/// Chance that a non-critical element is perturbed.
pub const P_AUG: f64 = 0.3;
/// Chance that a whole sample is left as recorded.
pub const P_UNCHANGED: f64 = 0.01;
/// Half-width of the uniform offset added to each bbox coordinate.
pub const BBOX_JITTER: f32 = 0.05;
const MIN_EXTENT: f32 = 1.0 / 128.0;

fn random_unit(rng: &mut ChaCha8Rng) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..D_TEXT).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Keeps `lo < hi` inside `[0, 1]` with at least `MIN_EXTENT` between them.
fn fix_span(lo: f32, hi: f32) -> (f32, f32) {
    let (lo, hi) = (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0));
    let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    if hi - lo >= MIN_EXTENT {
        return (lo, hi);
    }
    let h = MIN_EXTENT / 2.0;
    let c = (0.5 * (lo + hi)).clamp(h, 1.0 - h);
    (c - h, (c + h).min(1.0))
}

fn jitter(b: BBox, rng: &mut ChaCha8Rng) -> BBox {
    let mut o = [0.0f32; 4];
    for x in &mut o {
        *x = rng.gen_range(-BBOX_JITTER..BBOX_JITTER);
    }
    let (l, r) = fix_span(b.left() + o[0], b.right() + o[2]);
    let (t, bt) = fix_span(b.top() + o[1], b.bottom() + o[3]);
    BBox::new(l, t, r, bt)
}

/// Perturbs each non-critical element with probability [`P_AUG`] by either
/// swapping its text embedding for a random unit vector or jittering its
/// bbox. Critical elements are never touched.
pub fn augment_screen(screen: &Screen, rng: &mut ChaCha8Rng) -> Screen {
    let mut out = screen.clone();
    if rng.gen_bool(P_UNCHANGED) {
        return out;
    }
    for e in out.elements.iter_mut().filter(|e| !e.critical) {
        if !rng.gen_bool(P_AUG) {
            continue;
        }
        if rng.gen_bool(0.5) {
            e.text_embed_override = Some(random_unit(rng));
        } else {
            e.bbox = jitter(e.bbox, rng);
        }
    }
    out
}

/// Augments every step of `d`; actions, labels and configuration are kept.
pub fn augment(d: &Demonstration, seed: u64) -> Demonstration {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = d.clone();
    for s in &mut out.steps {
        s.screen = augment_screen(&s.screen, &mut rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_fix_handles_collapsed_and_inverted_ranges() {
        for (lo, hi) in [(0.5, 0.5), (0.9, 0.1), (-0.2, -0.1), (1.0, 1.3), (0.999, 1.0)] {
            let (a, b) = fix_span(lo, hi);
            assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a < b, "{lo} {hi} -> {a} {b}");
        }
    }

    #[test]
    fn random_unit_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_unit(&mut rng);
        assert_eq!(v.len(), D_TEXT);
        assert!((v.iter().map(|x| x * x).sum::<f32>() - 1.0).abs() < 1e-5);
    }
}
