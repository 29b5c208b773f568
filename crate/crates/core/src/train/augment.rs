use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Provenance, SampleBatch};
use super::{TrainError, IGNORE_INDEX};
use crate::tensor::{Shape4, Tensor4};
use crate::Scalar;

/// Random geometric augmentation, one transform per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Mirror horizontally with probability 1/2.
    pub flip: bool,
    /// Always mirror; overrides `flip`.
    pub force_flip: bool,
    pub scale_range: (f64, f64),
    /// Rotation drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Output `(h, w)`; the input size when `None`. Regions outside the
    /// transformed image are zero with label `IGNORE_INDEX`.
    pub crop: Option<(usize, usize)>,
}

impl Default for AugmentPolicy {
    /// Identity transform.
    fn default() -> Self {
        Self {
            flip: false,
            force_flip: false,
            scale_range: (1.0, 1.0),
            rotation_deg: 0.0,
            crop: None,
        }
    }
}

impl AugmentPolicy {
    /// Flip, scale 0.5..2, rotate up to 10 degrees, crop to `crop`.
    pub fn standard(crop: (usize, usize)) -> Self {
        Self {
            flip: true,
            force_flip: false,
            scale_range: (0.5, 2.0),
            rotation_deg: 10.0,
            crop: Some(crop),
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        let (a, b) = self.scale_range;
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return Err(TrainError::Config(format!("scale_range must satisfy 0 < lo <= hi, got {a}..{b}")));
        }
        if !(self.rotation_deg >= 0.0 && self.rotation_deg < 180.0) {
            return Err(TrainError::Config(format!("rotation_deg must lie in [0, 180), got {}", self.rotation_deg)));
        }
        if matches!(self.crop, Some((0, _)) | Some((_, 0))) {
            return Err(TrainError::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

struct Transform {
    flip: bool,
    scale: f64,
    cos: f64,
    sin: f64,
    /// Crop origin in the scaled frame.
    oy: f64,
    ox: f64,
}

impl Transform {
    /// Continuous source position of the output pixel centre `(y, x)`.
    fn source(&self, y: usize, x: usize, sh: f64, sw: f64, w: f64) -> (f64, f64) {
        let (v, u) = (y as f64 + 0.5 + self.oy - sh / 2.0, x as f64 + 0.5 + self.ox - sw / 2.0);
        let (vr, ur) = (self.cos * v - self.sin * u, self.sin * v + self.cos * u);
        let ys = vr / self.scale + sh / self.scale / 2.0;
        let xs = ur / self.scale + sw / self.scale / 2.0;
        (ys, if self.flip { w - xs } else { xs })
    }
}

fn bilinear<T: Scalar>(img: &Tensor4<T>, n: usize, c: usize, ys: f64, xs: f64) -> f64 {
    let s = img.shape();
    let (h, w) = (s.h as f64, s.w as f64);
    if !(0.0..=h).contains(&ys) || !(0.0..=w).contains(&xs) {
        return 0.0;
    }
    let py = (ys - 0.5).clamp(0.0, h - 1.0);
    let px = (xs - 0.5).clamp(0.0, w - 1.0);
    let (y0, x0) = (py.floor() as usize, px.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
    let (fy, fx) = (py - y0 as f64, px - x0 as f64);
    let at = |y, x| img.at(n, c, y, x).to_f64_lossy();
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    if fy == 0.0 {
        top
    } else {
        top * (1.0 - fy) + bottom * fy
    }
}

/// Applies one random flip/scale/rotate/crop per sample: bilinear for the
/// image, nearest for labels. Deterministic per `seed`.
pub fn augment<T: Scalar>(batch: &SampleBatch<T>, seed: u64, policy: &AugmentPolicy) -> Result<SampleBatch<T>, TrainError> {
    policy.validate()?;
    let (h, w) = (batch.height(), batch.width());
    let (oh, ow) = policy.crop.unwrap_or((h, w));
    let n = batch.len();
    let mut images = Tensor4::zeros(Shape4::new(n, 3, oh, ow));
    let mut labels = vec![IGNORE_INDEX; n * oh * ow];
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let flip = policy.force_flip || (policy.flip && rng.random::<bool>());
        let (a, b) = policy.scale_range;
        let scale = if a == b { a } else { rng.random_range(a..=b) };
        let deg = if policy.rotation_deg > 0.0 {
            rng.random_range(-policy.rotation_deg..=policy.rotation_deg)
        } else {
            0.0
        };
        let (sh, sw) = (h as f64 * scale, w as f64 * scale);
        let offset = |rng: &mut ChaCha8Rng, scaled: f64, out: usize| {
            let slack = scaled - out as f64;
            if slack == 0.0 {
                0.0
            } else {
                // Negative slack centres-with-jitter a small image in the crop.
                rng.random_range(slack.min(0.0)..=slack.max(0.0)).round()
            }
        };
        let t = Transform {
            flip,
            scale,
            cos: deg.to_radians().cos(),
            sin: deg.to_radians().sin(),
            oy: offset(&mut rng, sh, oh),
            ox: offset(&mut rng, sw, ow),
        };
        let src_labels = batch.label_map(i);
        for y in 0..oh {
            for x in 0..ow {
                let (ys, xs) = t.source(y, x, sh, sw, w as f64);
                for c in 0..3 {
                    *images.at_mut(i, c, y, x) = T::lit(bilinear(&batch.images, i, c, ys, xs));
                }
                if (0.0..h as f64).contains(&ys) && (0.0..w as f64).contains(&xs) {
                    labels[(i * oh + y) * ow + x] = src_labels[ys.floor() as usize * w + xs.floor() as usize];
                }
            }
        }
    }
    SampleBatch::new(
        images,
        labels,
        batch.num_classes,
        Provenance::Derived {
            from: Box::new(batch.provenance.clone()),
            note: format!("augment seed {seed}"),
        },
    )
}
