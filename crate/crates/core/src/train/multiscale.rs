use super::TrainError;
use crate::arch::ExecutableNet;
use crate::tensor::{kernels, Shape4, Tensor4};
use crate::Scalar;

/// Scales 0.5 to 2 in steps of 0.25.
pub const EVAL_SCALES: [f64; 7] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];

fn pad_to<T: Scalar>(x: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
    let s = x.shape();
    if (s.h, s.w) == (h, w) {
        return x.clone();
    }
    Tensor4::from_fn(Shape4::new(s.n, s.c, h, w), |n, c, y, xx| {
        if y < s.h && xx < s.w {
            x.at(n, c, y, xx)
        } else {
            T::zero()
        }
    })
}

fn crop<T: Scalar>(x: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
    let s = x.shape();
    if (s.h, s.w) == (h, w) {
        return x.clone();
    }
    Tensor4::from_fn(Shape4::new(s.n, s.c, h, w), |n, c, y, xx| x.at(n, c, y, xx))
}

/// Average of softmax maps over rescaled (and optionally mirrored) copies
/// of `images`, each resized back to the input resolution. Rescaled inputs
/// are zero-padded on the bottom and right to the network stride.
pub fn multi_scale_predict<T: Scalar>(
    net: &mut ExecutableNet<T>,
    images: &Tensor4<T>,
    scales: &[f64],
    flip: bool,
) -> Result<Tensor4<T>, TrainError> {
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(TrainError::Config(format!("scales must be positive, got {scales:?}")));
    }
    let s = images.shape();
    let stride = net.graph().total_stride();
    let mut acc: Option<Tensor4<T>> = None;
    let mut count = 0usize;
    for &scale in scales {
        let sh = ((s.h as f64 * scale).round() as usize).max(1);
        let sw = ((s.w as f64 * scale).round() as usize).max(1);
        let scaled = kernels::resize_bilinear(images, sh, sw)?;
        let (ph, pw) = (sh.div_ceil(stride) * stride, sw.div_ceil(stride) * stride);
        let padded = pad_to(&scaled, ph, pw);
        let views: &[bool] = if flip { &[false, true] } else { &[false] };
        for &mirrored in views {
            let input = if mirrored { padded.flip_horizontal() } else { padded.clone() };
            let mut probs = net.predict(&input)?;
            if mirrored {
                probs = probs.flip_horizontal();
            }
            let back = kernels::resize_bilinear(&crop(&probs, sh, sw), s.h, s.w)?;
            match acc.as_mut() {
                None => acc = Some(back),
                Some(a) => a.add_assign(&back)?,
            }
            count += 1;
        }
    }
    let acc = acc.expect("at least one scale");
    Ok(if count == 1 { acc } else { acc.scale(T::one() / T::lit(count as f64)) })
}
