//! Geometric and photometric augmentation shared by both frames of a pair.

use rand::Rng;

use crate::engine::Tensor;
use crate::error::{shape_err, Result};
use crate::label::LabelMap;
use crate::scalar::Scalar;

pub const FLIP_PROB: f64 = 0.5;
pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const JITTER_SCALE: (f64, f64) = (0.8, 1.2);
pub const JITTER_OFFSET: f64 = 0.05;

/// One sampled augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    /// Counter-clockwise rotation about the frame centre, radians.
    pub angle: f64,
    pub scale: [f64; 3],
    pub offset: [f64; 3],
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { flip: false, angle: 0.0, scale: [1.0; 3], offset: [0.0; 3] };

    pub fn sample(rng: &mut impl Rng) -> Self {
        let flip = rng.gen_bool(FLIP_PROB);
        let angle = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians();
        let scale = [0; 3].map(|_| rng.gen_range(JITTER_SCALE.0..=JITTER_SCALE.1));
        let offset = [0; 3].map(|_| rng.gen_range(-JITTER_OFFSET..=JITTER_OFFSET));
        Augmentation { flip, angle, scale, offset }
    }

    /// Source coordinate (in pixel indices) that lands on output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let (s, c) = self.angle.sin_cos();
        let sx = cx + c * dx - s * dy;
        let sy = cy + s * dx + c * dy;
        let sx = if self.flip { w as f64 - 1.0 - sx } else { sx };
        (sx.clamp(0.0, w as f64 - 1.0), sy.clamp(0.0, h as f64 - 1.0))
    }

    /// Flip, rotate (bilinear, clamp-to-edge) and colour-jitter a `3 x H x W` frame.
    pub fn apply_frame<S: Scalar>(&self, frame: &Tensor<S>) -> Result<Tensor<S>> {
        let &[c, h, w] = frame.shape() else {
            return Err(shape_err!("frame must be CxHxW, got {:?}", frame.shape()));
        };
        let src = frame.data();
        let mut out = Vec::with_capacity(src.len());
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let (scale, offset) = (self.scale[ch % 3], self.offset[ch % 3]);
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = self.source(x, y, w, h);
                    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                    let at = |xx: usize, yy: usize| plane[yy * w + xx].as_f64();
                    let v = (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0)) + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1));
                    out.push(S::lit((v * scale + offset).clamp(0.0, 1.0)));
                }
            }
        }
        Tensor::new(vec![c, h, w], out)
    }

    /// Same geometry as [`apply_frame`](Self::apply_frame), nearest-neighbour.
    pub fn apply_labels(&self, labels: &LabelMap) -> LabelMap {
        let (w, h) = (labels.width(), labels.height());
        LabelMap::from_fn(w, h, |x, y| {
            let (sx, sy) = self.source(x, y, w, h);
            labels.get(sx.round() as usize, sy.round() as usize)
        })
    }

    /// The same augmentation without rotation.
    pub fn without_rotation(&self) -> Self {
        Augmentation { angle: 0.0, ..*self }
    }
}

fn class_set(l: &LabelMap) -> [bool; 256] {
    let mut s = [false; 256];
    for &c in l.data() {
        s[c as usize] = true;
    }
    s
}

/// Samples an augmentation for a set of label maps; rotation is dropped if it
/// would push a class entirely out of any of them.
pub fn sample_preserving(rng: &mut impl Rng, labels: &[&LabelMap]) -> Augmentation {
    let aug = Augmentation::sample(rng);
    if labels.iter().all(|l| class_set(&aug.apply_labels(l)) == class_set(l)) {
        aug
    } else {
        aug.without_rotation()
    }
}
