use stereoslam_core::eval::ate_rmse;
use stereoslam_core::io::{load_kitti_sequence, read_trajectory};
use stereoslam_core::pipeline::{run_pipeline, write_outputs, PipelineError, Slam};
use stereoslam_core::synth::{generate_scene, render_frame, write_dataset, RenderOptions, SceneSpec, TrajectoryKind};
use stereoslam_core::SlamConfig;

#[test]
fn written_dataset_runs_through_the_pipeline() {
    let spec = SceneSpec { point_count: 5000, length: 25.0, noise_sigma: 0.3, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&generate_scene(&spec), &spec, dir.path(), "03").unwrap();

    let manifest = load_kitti_sequence(dir.path(), "03").unwrap();
    assert_eq!(manifest.len(), 26);
    let truth = manifest.ground_truth.clone().expect("poses written");
    let output = run_pipeline(&manifest, &SlamConfig::default()).unwrap();
    assert_eq!(output.trajectory.len(), 26);
    assert_eq!(output.durations.len(), 26);
    let ate = ate_rmse(&output.trajectory, &truth, true).unwrap();
    assert!(ate < 0.1, "ATE {ate}");

    let out = dir.path().join("out");
    write_outputs(&output, Some(&truth), &out).unwrap();
    let reread = read_trajectory(&out.join("trajectory.txt")).unwrap();
    let max_diff = reread
        .iter()
        .zip(&output.trajectory)
        .map(|(a, b)| (a.to_homogeneous() - b.to_homogeneous()).amax())
        .fold(0.0, f64::max);
    assert!(max_diff < 1e-9);
    let metrics = std::fs::read_to_string(out.join("metrics.txt")).unwrap();
    assert!(metrics.contains("ATE RMSE (m)"), "{metrics}");
    assert_eq!(std::fs::read_to_string(out.join("frames.csv")).unwrap().lines().count(), 27);
}

#[test]
fn missing_sequence_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_kitti_sequence(dir.path(), "00").is_err());
    let spec = SceneSpec { point_count: 200, length: 2.0, ..Default::default() };
    write_dataset(&generate_scene(&spec), &spec, dir.path(), "00").unwrap();
    let mut manifest = load_kitti_sequence(dir.path(), "00").unwrap();
    std::fs::remove_file(&manifest.pairs[1].1).unwrap();
    manifest.pairs.truncate(2);
    assert!(matches!(run_pipeline(&manifest, &SlamConfig::default()), Err(PipelineError::Load(_))));
}

#[test]
fn revisiting_a_place_closes_the_loop() {
    let spec = SceneSpec {
        trajectory: TrajectoryKind::Loop,
        length: 150.0,
        point_count: 3000,
        noise_sigma: 0.3,
        ..Default::default()
    };
    let scene = generate_scene(&spec);
    let mut slam = Slam::new(spec.rig, SlamConfig::default());
    let opts = RenderOptions { quantize: false, images: false };
    for (k, pose) in scene.poses.iter().enumerate() {
        let f = render_frame(&scene, pose, &spec, k, opts);
        slam.process_pairs(&f.stereo_pairs(spec.seed), scene.timestamps[k], None).unwrap();
    }
    let maps = slam.world.local_maps.len();
    assert!(maps > 20, "{maps} local maps");
    let revisit = slam.closures().iter().filter(|c| c.map_i.0 + 1 >= maps - 3 && c.map_j.0 <= 2).count();
    assert!(revisit > 0, "no closure between the last and first local maps");
    assert!(slam.closures().iter().all(|c| c.inliers >= 25 && c.mean_error <= 0.25));
}
