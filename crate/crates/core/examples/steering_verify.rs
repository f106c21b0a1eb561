//! Steering operators: closed-form rotation blocks against least-squares
//! solutions, the composition law, scale steering on a spanning frame and
//! a random frame that is not steerable.

use std::f64::consts::PI;

use steerkit::frames::{make_gaussian_derivative_frame, make_random_frame, DerivativeSet};
use steerkit::steering::{
    solve_steering, to_raw_basis, verify_equivariance, AnalyticRotation, GroupAction, STEERABILITY_THRESHOLD,
};

fn main() -> steerkit::Result<()> {
    let jet = make_gaussian_derivative_frame(3, 1.0, 2, DerivativeSet::TotalOrder)?;
    let analytic = AnalyticRotation::new(&jet)?;

    println!("closed form vs solved (raw generator basis)");
    for k in 0..8 {
        let tau = -PI + k as f64 * PI / 4.0;
        let solved = solve_steering(&jet, GroupAction::Rotation, &[tau])?;
        let diff = (to_raw_basis(&jet, &solved.matrix) - analytic.raw_matrix(tau)).abs().max();
        println!("  tau {tau:+.4}  residual {:.2e}  max diff {diff:.2e}", solved.residual);
    }

    let report = verify_equivariance(&jet, GroupAction::Rotation, 8, 1e-6)?;
    println!(
        "rotation: max residual {:.2e}, max composition defect {:.2e}",
        report.max_residual,
        report.max_composition_defect.unwrap_or(0.0)
    );

    let spanning = make_gaussian_derivative_frame(3, 1.0, 2, DerivativeSet::PerAxis)?;
    let scale = verify_equivariance(&spanning, GroupAction::Scaling, 15, STEERABILITY_THRESHOLD)?;
    println!("scaling on the spanning frame: max residual {:.2e}", scale.max_residual);
    let scale_jet = verify_equivariance(&jet, GroupAction::Scaling, 15, STEERABILITY_THRESHOLD)?;
    println!("scaling on the 6-atom jet: max residual {:.2e}", scale_jet.max_residual);

    let random = make_random_frame(5, 9, 1)?;
    let neg = verify_equivariance(&random, GroupAction::Rotation, 16, STEERABILITY_THRESHOLD)?;
    println!(
        "random 5x5 frame: max residual {:.3} -> {}",
        neg.max_residual,
        if neg.passed() { "steerable" } else { "not steerable" }
    );
    Ok(())
}
