//! Actions between views: yaw pairs become `(sin, cos)` of the wrapped
//! angle, camera poses become a canonical relative quaternion plus the
//! relative translation.

use aassl::actions::{relative_pose_action, yaw_action, Pose, Quat};

fn main() -> aassl::Result<()> {
    for (a, b) in [(10.0, 350.0), (0.0, 90.0), (350.0, 20.0)] {
        let act = yaw_action(a, b);
        println!("yaw {a:>5} -> {b:>5}: {:?} ({:+.1} deg)", act.flat(), act.yaw_degrees().unwrap());
    }

    let up = [0.0, 0.0, 1.0];
    let p1 = Pose::from_center(Quat::from_axis_angle(up, 0.0), [2.0, 0.0, 0.5]);
    let p2 = Pose::from_center(Quat::from_axis_angle(up, 30f64.to_radians()), [1.7, 1.0, 0.5]);
    let act = relative_pose_action(&p1, &p2, 0)?;
    let flat = act.flat();
    println!("pose: q = {:.5?}, t = {:.5?}, flag = {}", &flat[..4], &flat[4..7], flat[7]);

    // The same camera motion seen from a rotated world frame gives the same action.
    let world = Quat::from_axis_angle([1.0, 0.0, 0.0], 0.7);
    let moved = |p: &Pose| Pose::from_center(p.rotation.mul(&world.conjugate()), world.rotate(p.center()));
    let again = relative_pose_action(&moved(&p1), &moved(&p2), 0)?.flat();
    let diff = flat.iter().zip(&again).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("after a change of world frame: max difference {diff:.2e}");
    Ok(())
}
