//! Projects the reference face at a few poses and recovers each pose from
//! the 2D landmarks alone.
//!
//!     cargo run --example pose_solver

use poseinit::geometry::{project_weak_perspective, BoundingBox, HeadPose, Shape3D};
use poseinit::pose_solver::fit_pose_from_landmarks;

fn main() -> poseinit::Result<()> {
    let shape3d = Shape3D::canonical();
    let bb = BoundingBox::new(40.0, 30.0, 120.0, 120.0)?;
    let poses = [
        (0.0, 0.0, 0.0),
        (15.0, -40.0, 5.0),
        (-25.0, 60.0, -20.0),
        (10.0, 85.0, 0.0),
    ];
    println!("{:>24}  {:>24}  {:>10}", "true (p, y, r)", "fitted (p, y, r)", "residual");
    for (p, y, r) in poses {
        let pose = HeadPose::new(p, y, r)?;
        let landmarks = project_weak_perspective(&shape3d, &pose, &bb)?;
        let fit = fit_pose_from_landmarks(&landmarks, &shape3d)?;
        let f = fit.pose;
        println!(
            "{:>7.2} {:>7.2} {:>7.2}  {:>7.2} {:>7.2} {:>7.2}  {:>10.2e}",
            p, y, r, f.pitch, f.yaw, f.roll, fit.residual
        );
    }
    Ok(())
}
