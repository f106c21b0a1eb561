//! A dynamic steerable block: with zero pose it is an ordinary frame
//! convolution; with a constant pose it filters with rotated atoms.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steerkit::autodiff::Graph;
use steerkit::blocks::{Ctx, DynamicBlock, ParamStore, PoseGranularity, SteeringMode};
use steerkit::frames::{make_gaussian_derivative_frame, DerivativeSet};
use steerkit::group::GroupAction;
use steerkit::tensor::rotate_quarter;
use steerkit::Tensor;

fn run(block: &DynamicBlock, store: &ParamStore, x: &Tensor, pose: &Tensor) -> steerkit::Result<Tensor> {
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let ctx = Ctx::new(store, &vars, false);
    let (xv, pv) = (g.constant(x.clone()), g.constant(pose.clone()));
    let y = block.forward_with_pose(&mut g, &ctx, xv, pv)?;
    Ok(g.value(y).clone())
}

fn main() -> steerkit::Result<()> {
    let frame = Arc::new(make_gaussian_derivative_frame(3, 1.0, 2, DerivativeSet::TotalOrder)?);
    let block = DynamicBlock::new(
        "dyn",
        frame,
        2,
        4,
        16,
        GroupAction::Rotation,
        PoseGranularity::PerOutputChannel,
        SteeringMode::Analytic,
    )?;
    let mut store = ParamStore::new();
    block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
    println!("pose channels {}, parameters {}", block.pose_channels(), store.count());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_fn(&[1, 2, 20, 20], |_| rng.random_range(-1.0..1.0));

    let zero = Tensor::zeros(&[1, block.pose_channels(), 20, 20]);
    let y0 = run(&block, &store, &x, &zero)?;
    let plain = block.static_counterpart().apply(&x, store.param(&block.weight_name())?)?;
    println!("zero pose vs frame conv: {:.2e}", y0.max_abs_diff(&plain)?);

    // Rotating the input a quarter turn and steering every filter by the
    // same angle rotates the response field.
    let quarter = Tensor::full(&[1, block.pose_channels(), 20, 20], FRAC_PI_2);
    let y1 = run(&block, &store, &rotate_quarter(&x, 1)?, &quarter)?;
    let expect = rotate_quarter(&y0, 1)?;
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..4 {
        for r in 3..17 {
            for col in 3..17 {
                let i = (c * 20 + r) * 20 + col;
                num += (y1.data()[i] - expect.data()[i]).powi(2);
                den += expect.data()[i].powi(2);
            }
        }
    }
    println!("quarter-turn equivariance, interior relative error {:.2e}", (num / den).sqrt());

    // Learned pose field from the block's own pose network.
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let mut ctx = Ctx::new(&store, &vars, false);
    let xv = g.constant(x.clone());
    block.forward(&mut g, &mut ctx, xv)?;
    let (_, pose) = &ctx.poses[0];
    let p = g.value(*pose);
    println!("learned pose field {:?}, range [{:.3}, {:.3}]", p.shape(), p.data().iter().cloned().fold(f64::MAX, f64::min), p.data().iter().cloned().fold(f64::MIN, f64::max));
    Ok(())
}
