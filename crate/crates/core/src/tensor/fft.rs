//! 2-D discrete Fourier transforms over the two leading axes of an array,
//! applied independently per trailing index (channel).
//!
//! Forward is unnormalized; inverse carries the 1/(H·W) factor. Arbitrary
//! (non power of two) extents are handled by the mixed-radix/Bluestein
//! planner underneath.

use super::Real;
use ndarray::{ArrayD, IxDyn};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Transforms (re, im) over axes (0, 1). `im = None` means a real input.
pub fn fft2_pair<T: Real>(
    re: &ArrayD<T>,
    im: Option<&ArrayD<T>>,
    inverse: bool,
) -> (ArrayD<T>, ArrayD<T>) {
    let shape = re.shape().to_vec();
    assert!(shape.len() >= 2, "fft2 needs at least 2 axes, got {shape:?}");
    let (h, w) = (shape[0], shape[1]);
    let channels: usize = shape[2..].iter().product::<usize>().max(1);

    let re_c = re.as_standard_layout();
    let re_s = re_c.as_slice().expect("standard layout");
    let mut buf: Vec<Complex<T>> = match im {
        Some(im) => {
            let im_c = im.as_standard_layout();
            let im_s = im_c.as_slice().expect("standard layout");
            re_s.iter().zip(im_s).map(|(&r, &i)| Complex::new(r, i)).collect()
        }
        None => re_s.iter().map(|&r| Complex::new(r, T::zero())).collect(),
    };

    let mut planner = FftPlanner::<T>::new();
    let fft_h = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let fft_w = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };

    // Axis 1: rows of length w, stride `channels` between elements.
    let mut lane = vec![Complex::new(T::zero(), T::zero()); w];
    for row in 0..h {
        for c in 0..channels {
            let base = row * w * channels + c;
            for (k, l) in lane.iter_mut().enumerate() {
                *l = buf[base + k * channels];
            }
            fft_w.process(&mut lane);
            for (k, l) in lane.iter().enumerate() {
                buf[base + k * channels] = *l;
            }
        }
    }
    // Axis 0: columns of length h, stride w*channels.
    let mut lane = vec![Complex::new(T::zero(), T::zero()); h];
    for col in 0..w {
        for c in 0..channels {
            let base = col * channels + c;
            for (k, l) in lane.iter_mut().enumerate() {
                *l = buf[base + k * w * channels];
            }
            fft_h.process(&mut lane);
            for (k, l) in lane.iter().enumerate() {
                buf[base + k * w * channels] = *l;
            }
        }
    }

    let scale = if inverse {
        T::one() / T::from_usize(h * w).expect("grid size fits")
    } else {
        T::one()
    };
    let mut out_re = Vec::with_capacity(buf.len());
    let mut out_im = Vec::with_capacity(buf.len());
    for z in &buf {
        out_re.push(z.re * scale);
        out_im.push(z.im * scale);
    }
    (
        ArrayD::from_shape_vec(IxDyn(&shape), out_re).expect("shape preserved"),
        ArrayD::from_shape_vec(IxDyn(&shape), out_im).expect("shape preserved"),
    )
}
