//! Shared inputs for the benchmarks: rendered synthetic stereo frames at full KITTI size.

use nalgebra::Vector3;
use stereoslam_core::geometry::Twist;
use stereoslam_core::synth::{generate_scene, render_frame, RenderOptions, RenderedFrame, Scene, SceneSpec};
use stereoslam_core::tracker::PoseObservation;
use stereoslam_core::{se3_exp, GrayImage, Isometry3, StereoRig};

/// Scene dense enough that the detector reports several hundred keypoints per image.
pub fn scene(frames: usize) -> (SceneSpec, Scene) {
    let spec = SceneSpec { point_count: 1000, length: frames as f64, noise_sigma: 0.3, ..Default::default() };
    let scene = generate_scene(&spec);
    (spec, scene)
}

pub fn rendered(spec: &SceneSpec, scene: &Scene, index: usize) -> RenderedFrame {
    render_frame(scene, &scene.poses[index], spec, index, RenderOptions::default())
}

pub fn image_pair(spec: &SceneSpec, scene: &Scene, index: usize) -> (GrayImage, GrayImage) {
    let f = rendered(spec, scene, index);
    (f.left.unwrap(), f.right.unwrap())
}

/// `n` exact stereo observations of random points seen from the identity pose, and a
/// prior perturbed by a few centimeters and milliradians.
pub fn pose_problem(rig: &StereoRig, n: usize) -> (Vec<PoseObservation>, Isometry3) {
    let mut obs = Vec::with_capacity(n);
    let mut k = 0u64;
    while obs.len() < n {
        k += 1;
        // Low-discrepancy sweep over the view volume, no RNG needed.
        let f = |m: u64| ((k * m) % 1009) as f64 / 1009.0;
        let p = Vector3::new(-8.0 + 16.0 * f(389), -2.0 + 4.0 * f(613), 4.0 + 30.0 * f(151));
        let (Ok(l), Ok(r)) = (rig.left.project(&p), rig.right.project(&p)) else { continue };
        if !(l.in_view && r.in_view) {
            continue;
        }
        obs.push(PoseObservation { p_w: p, k_l: l.point, k_r: r.point, landmark: k.is_multiple_of(3) });
    }
    (obs, se3_exp(&Twist::new(0.05, -0.02, 0.08, 0.004, -0.006, 0.003)))
}
