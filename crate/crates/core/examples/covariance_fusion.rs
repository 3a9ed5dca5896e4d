//! Generalized covariance intersection of two position estimates.

use nalgebra::{Matrix2, Vector2};
use roadtwin::fusion::{gci_fuse, optimize_omega, Gaussian};

fn main() {
    // a camera is precise across the road, a radar along it
    let camera = Gaussian::new(Vector2::new(101.2, -3.7), Matrix2::new(4.0, 0.0, 0.0, 0.1));
    let radar = Gaussian::new(Vector2::new(99.6, -3.3), Matrix2::new(0.5, 0.0, 0.0, 1.5));
    for w in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let f = gci_fuse(&camera, &radar, w).unwrap();
        println!(
            "omega {w:.2}: mean ({:.2}, {:.2}), det {:.4}",
            f.mean[0],
            f.mean[1],
            f.cov.determinant()
        );
    }
    let w = optimize_omega(&camera.cov, &radar.cov);
    let f = gci_fuse(&camera, &radar, w).unwrap();
    println!("optimal omega {w:.4}: mean ({:.2}, {:.2}), det {:.4}", f.mean[0], f.mean[1], f.cov.determinant());
}
