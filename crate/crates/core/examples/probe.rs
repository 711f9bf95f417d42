use hvslam::config::*;
use hvslam::frontend::*;
use hvslam::geometry::{CameraModel, InverseDepthPoint, Pose};
use hvslam::mapping::*;
use hvslam::simworld::*;
use hvslam::tracking::*;
use nalgebra::Vector6;
use std::collections::BTreeMap;

fn main() {
    let sim = SimConfig::default();
    let fcfg = FrontendConfig::default();
    let tcfg = TrackingConfig::default();
    let cam = CameraModel::new(sim.focal, sim.focal, sim.image_width as f64 / 2.0, sim.image_height as f64 / 2.0, sim.image_width, sim.image_height);
    let (scene, script) = generate_scenario(ScenarioKind::Loop, 7, 400, &sim).unwrap();
    let mut det = FeatureDetector::new(fcfg.clone());

    // frame 0 = host keyframe with gt depths
    let f0 = render_frame(&scene, &cam, &script.poses[0], 0.0, 0.0, 0);
    let pyr0 = build_pyramid(&f0.image, fcfg.pyramid_levels).unwrap();
    let feats0 = det.detect(&pyr0, fcfg.target_count);
    let mut map = WorldMap::new(cam);
    let kf = Keyframe {
        id: KeyframeId(0), pose: script.poses[0], pyramid: Some(pyr0.clone()),
        features: feats0.clone(), patches_present: true, state: KeyframeState::Active,
        timestamp: 0.0, frame_index: 0, brightness: (1.0, 0.0), loop_anchor: false,
    };
    let kf_id = map.insert_keyframe(kf);
    let mut assoc = vec![None; feats0.len()];
    let mut n_lm = 0;
    for (fi, f) in feats0.iter().enumerate() {
        if let Some(depth) = depth_at(&scene, &cam, &script.poses[0], &f.uv) {
            let idepth = 1.0 / depth;
            let mut obs = BTreeMap::new();
            obs.insert(kf_id, f.uv);
            let lm = Landmark {
                id: LandmarkId(0), host: kf_id,
                anchor: InverseDepthPoint::new([f.uv.x, f.uv.y], idepth, (0.05f64 * idepth).powi(2)),
                descriptor: f.descriptor, patch: Some(f.patch),
                observations: obs, status: LandmarkStatus::Active,
                filter_updates: 0, outlier_count: 0,
            };
            let id = map.insert_landmark(lm);
            assoc[fi] = Some(id);
            n_lm += 1;
        }
    }
    println!("bootstrap: {n_lm} landmarks");
    let snapshot = map.window_snapshot();

    let frame0 = Frame { index: 0, timestamp: 0.0, pyramid: pyr0, features: feats0 };
    let mut tracker = Tracker::new(tcfg.clone(), fcfg.clone(), cam);
    tracker.prime(&frame0, script.poses[0], assoc);

    // Fixed point check: track frame 0 itself from gt init
    let (pose_cw, state, gm) = tracker.joint_optimize(&frame0, &snapshot, &script.poses[0].inverse());
    let dt = (pose_cw.inverse().translation() - script.poses[0].translation()).norm();
    println!("fixed point: dT={dt:.2e} m, n_p={}, n_g={}, status={:?}, matches={}", state.n_p, state.n_g, state.status, gm.len());

    // Track frames 1..8 sequentially
    for i in 1..8 {
        let f = render_frame(&scene, &cam, &script.poses[i], i as f64 / 20.0, 0.0, 0);
        let pyr = build_pyramid(&f.image, fcfg.pyramid_levels).unwrap();
        let feats = det.detect(&pyr, fcfg.target_count);
        let frame = Frame { index: i, timestamp: i as f64 / 20.0, pyramid: pyr, features: feats };
        let t0 = std::time::Instant::now();
        let out = tracker.track(&frame, &snapshot);
        let ms = t0.elapsed().as_secs_f64() * 1000.0;
        let gt = &script.poses[i];
        let dt = (out.state.current_pose.translation() - gt.translation()).norm();
        let dr = (out.state.current_pose.rotation().inverse() * gt.rotation()).angle();
        println!("frame {i}: dT={:.3} mm dR={:.2e} rad flow={:.1}px inl={} n_p={} n_g={} status={:?} {:.1} ms",
            dt*1000.0, dr, out.mean_flow, out.relative_inliers, out.state.n_p, out.state.n_g, out.state.status, ms);
    }

    // Spec scenarios: host at frame k, track frame k+1 with perturbed init
    for k in [0usize, 40, 80] {
        let (map2, assoc2, frame_k) = bootstrap_at(&scene, &cam, &script, k, &fcfg);
        let snap2 = map2.window_snapshot();
        let mut tr = Tracker::new(tcfg.clone(), fcfg.clone(), cam);
        tr.prime(&frame_k, script.poses[k], assoc2);
        let fnext = make_frame(&scene, &cam, &script, k + 1, &fcfg);
        let mut tang = Vector6::zeros();
        tang[0] = 0.02; tang[4] = 1.0f64.to_radians();
        let init = Pose::exp(&tang).compose(&script.poses[k + 1].inverse());
        let (pose_cw, state, _) = tr.joint_optimize(&fnext, &snap2, &init);
        let dt = (pose_cw.inverse().translation() - script.poses[k + 1].translation()).norm();
        println!("perturbed next-frame k={k}: dT={:.4} mm status={:?}", dt * 1000.0, state.status);
        {
            let mut c = tcfg.clone(); c.window_search_radius = 0.0;
            let trp = Tracker::new(c, fcfg.clone(), cam);
            let (p2, _, _) = trp.joint_optimize(&fnext, &snap2, &init);
            let dtp = (p2.inverse().translation() - script.poses[k + 1].translation()).norm();
            let mut c = tcfg.clone(); c.min_photometric_points = usize::MAX;
            let trg = Tracker::new(c, fcfg.clone(), cam);
            let (p3, st3, _) = trg.joint_optimize(&fnext, &snap2, &init);
            let dtg = (p3.inverse().translation() - script.poses[k + 1].translation()).norm();
            println!("   photo-only: {:.4} mm   geo-only: {:.4} mm (n_g={})", dtp * 1000.0, dtg * 1000.0, st3.n_g);
        }

        // pure 0.05 m translation from frame k
        let mut tt = Vector6::zeros();
        tt[0] = 0.05;
        let pose_b = script.poses[k].compose(&Pose::exp(&tt));
        let fb = render_frame(&scene, &cam, &pose_b, 0.0, 0.0, 0);
        let pyrb = build_pyramid(&fb.image, fcfg.pyramid_levels).unwrap();
        let mut detb = FeatureDetector::new(fcfg.clone());
        let featsb = detb.detect(&pyrb, fcfg.target_count);
        let frame_b = Frame { index: 1000, timestamp: 0.0, pyramid: pyrb, features: featsb };
        if let Some((rel_cw, _, inl, total)) = tr.estimate_relative_pose(&frame_b, &snap2) {
            let est = rel_cw.inverse();
            let dt = (est.translation() - pose_b.translation()).norm();
            println!("pure-translation k={k}: dT={:.4} mm inl={inl}/{total}", dt * 1000.0);
        }
    }
}

fn make_frame(scene: &Scene, cam: &CameraModel, script: &TrajectoryScript, i: usize, fcfg: &FrontendConfig) -> Frame {
    let f = render_frame(scene, cam, &script.poses[i], i as f64 / 20.0, 0.0, 0);
    let pyr = build_pyramid(&f.image, fcfg.pyramid_levels).unwrap();
    let mut det = FeatureDetector::new(fcfg.clone());
    let feats = det.detect(&pyr, fcfg.target_count);
    Frame { index: i, timestamp: i as f64 / 20.0, pyramid: pyr, features: feats }
}

fn bootstrap_at(scene: &Scene, cam: &CameraModel, script: &TrajectoryScript, k: usize, fcfg: &FrontendConfig) -> (WorldMap, Vec<Option<LandmarkId>>, Frame) {
    let frame = make_frame(scene, cam, script, k, fcfg);
    let mut map = WorldMap::new(*cam);
    let kf = Keyframe {
        id: KeyframeId(0), pose: script.poses[k], pyramid: Some(frame.pyramid.clone()),
        features: frame.features.clone(), patches_present: true, state: KeyframeState::Active,
        timestamp: 0.0, frame_index: k, brightness: (1.0, 0.0), loop_anchor: false,
    };
    let kf_id = map.insert_keyframe(kf);
    let mut assoc = vec![None; frame.features.len()];
    for (fi, f) in frame.features.iter().enumerate() {
        if let Some(depth) = depth_at(scene, cam, &script.poses[k], &f.uv) {
            let idepth = 1.0 / depth;
            let mut obs = BTreeMap::new();
            obs.insert(kf_id, f.uv);
            let lm = Landmark {
                id: LandmarkId(0), host: kf_id,
                anchor: InverseDepthPoint::new([f.uv.x, f.uv.y], idepth, (0.05f64 * idepth).powi(2)),
                descriptor: f.descriptor, patch: Some(f.patch),
                observations: obs, status: LandmarkStatus::Active,
                filter_updates: 0, outlier_count: 0,
            };
            let id = map.insert_landmark(lm);
            assoc[fi] = Some(id);
        }
    }
    (map, assoc, frame)
}
