//! Optimal and gated assignment on a small cost matrix.

use nalgebra::DMatrix;
use roadtwin::assignment::{gated_assignment, solve};

fn main() {
    let cost = DMatrix::from_row_slice(3, 4, &[
        4.0, 1.0, 3.0, 9.0,
        2.0, 0.0, 5.0, 8.0,
        3.0, 2.0, 2.0, 7.5,
    ]);
    let a = solve(&cost).unwrap();
    println!("pairs {:?}, total cost {}", a.pairs, a.total_cost);
    println!("gated at 2.5: {:?}", gated_assignment(&cost, 2.5).unwrap());
}
