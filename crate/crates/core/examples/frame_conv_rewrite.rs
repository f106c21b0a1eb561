//! A frame convolution computed two ways: synthesizing pixel kernels from
//! the frame, or lifting the input onto the atoms and mixing with a 1x1
//! convolution. Both routes agree to rounding error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steerkit::blocks::{frame_conv, frame_conv_lifted};
use steerkit::frames::{make_framelet_frame, make_gaussian_derivative_frame, make_pixel_frame, DerivativeSet};
use steerkit::Tensor;

fn main() -> steerkit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let frames = [
        ("pixel", make_pixel_frame(3)?),
        ("gauss", make_gaussian_derivative_frame(5, 1.2, 2, DerivativeSet::TotalOrder)?),
        ("framelet", make_framelet_frame(3)?),
    ];
    for (name, frame) in &frames {
        let m = frame.atom_count();
        let x = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn(&[4, 3, m], |_| rng.random_range(-1.0..1.0));
        let a = frame_conv(&x, frame.atoms(), &w)?;
        let b = frame_conv_lifted(&x, frame.atoms(), &w)?;
        let single = frame_conv_lifted(&x.cast::<f32>(), &frame.atoms().cast::<f32>(), &w.cast::<f32>())?;
        println!(
            "{name:<9} M={m}  f64 diff {:.2e}  f32 vs f64 {:.2e}",
            a.max_abs_diff(&b)?,
            single.cast::<f64>().max_abs_diff(&a)?
        );
    }
    Ok(())
}
