//! Builds every frame family, prints its diagnostics and writes an atom
//! mosaic per family.
//!
//! cargo run --example frame_gallery -- [out_dir]

use std::path::PathBuf;

use steerkit::frames::{
    atom_mosaic, frame_bounds, make_framelet_frame, make_gaussian_derivative_frame, make_naive_frame,
    make_pixel_frame, make_random_frame, DerivativeSet, Frame,
};
use steerkit::io::write_pgm;

fn main() -> steerkit::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/frame_gallery".into()));
    std::fs::create_dir_all(&out)?;

    let frames: Vec<(&str, Frame)> = vec![
        ("pixel", make_pixel_frame(3)?),
        ("gauss_per_axis", make_gaussian_derivative_frame(3, 1.0, 2, DerivativeSet::PerAxis)?),
        ("gauss_total", make_gaussian_derivative_frame(3, 1.0, 2, DerivativeSet::TotalOrder)?),
        ("gauss_total_k7", make_gaussian_derivative_frame(7, 1.5, 2, DerivativeSet::TotalOrder)?),
        ("framelet", make_framelet_frame(3)?),
        ("naive", make_naive_frame(3, 2)?),
        ("random_k5", make_random_frame(5, 9, 7)?),
    ];

    println!("{:<16} {:>3} {:>6} {:>10} {:>10} {:>10}", "frame", "M", "rank", "A", "B", "cond");
    for (name, frame) in &frames {
        let info = frame_bounds(frame);
        println!(
            "{:<16} {:>3} {:>3}/{:<2} {:>10.3e} {:>10.3e} {:>10.3e}",
            name,
            frame.atom_count(),
            info.rank,
            info.dimension,
            info.lower_bound,
            info.upper_bound,
            info.gram_condition
        );
        let (w, h, pix) = atom_mosaic(frame, 12);
        write_pgm(&out.join(format!("{name}.pgm")), w, h, &pix)?;
    }
    println!("mosaics written to {}", out.display());
    Ok(())
}
