//! Projects a car into a roadside camera and casts the box back onto the road.

use nalgebra::{Point2, Vector3};
use roadtwin::geometry::{
    backproject_box, camera_rotation, project_vehicle_to_box, vehicle_cuboid, CameraModel, Intrinsics, RigidTransform,
};

fn main() {
    let intrinsics = Intrinsics {
        fx: 2730.0,
        fy: 2730.0,
        cx: 960.0,
        cy: 600.0,
        width: 1920.0,
        height: 1200.0,
    };
    let pose = RigidTransform::from_parts(camera_rotation(0.0, 6f64.to_radians(), 0.0), Vector3::new(0.0, 0.0, 7.0));
    let cam = CameraModel::new(intrinsics, pose).unwrap();

    println!("{:>8} {:>26} {:>10} {:>10}", "x (m)", "box (px)", "anchor x", "offset");
    for x in [40.0, 80.0, 120.0, 160.0, 200.0] {
        let corners = vehicle_cuboid(Point2::new(x, -3.75), 0.0, 4.6, 1.8, 1.5);
        let b = project_vehicle_to_box(&cam, &corners).unwrap().clipped;
        let p = backproject_box(&cam, &b).unwrap();
        println!(
            "{x:>8.1} [{:>6.0},{:>5.0},{:>6.0},{:>5.0}] {:>10.2} {:>10.2}",
            b.u_min,
            b.v_min,
            b.u_max,
            b.v_max,
            p.x,
            p.x - x
        );
    }
}
