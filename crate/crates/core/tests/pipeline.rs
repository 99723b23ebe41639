use std::sync::Arc;

use epvr_core::eval::{
    generate_sequence, mean_std, mpjpe, mpjre, pa_mpjpe, CameraModel, GroundTruthFrame, MotionKind, SequenceSpec,
    SyntheticSequence,
};
use epvr_core::pipeline::{
    run_replay, run_replay_files, FrameResult, Heuristic, PipelineConfig, PipelineError, PositionNoise,
    PredictorBackend, PredictorKind, Replay, Session, ToyNeural,
};
use epvr_core::neural::{NetworkConfig, PoseNetwork};
use epvr_core::skeleton::KinematicTree;

fn sequence(kind: MotionKind, seconds: f64, seed: u64) -> SyntheticSequence {
    generate_sequence(&SequenceSpec::new(kind, seconds, 30.0, seed), &KinematicTree::smpl22(), &CameraModel::default())
        .unwrap()
}

fn bare_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.stages.use_refine = false;
    cfg.stages.use_filter = false;
    cfg.stages.use_kpo = false;
    cfg.predictor.kind = PredictorKind::Replay;
    cfg
}

fn run(cfg: &PipelineConfig, seq: &SyntheticSequence, predictor: Arc<dyn PredictorBackend>) -> Vec<FrameResult> {
    let mut session = Session::new(cfg.clone(), Arc::new(KinematicTree::smpl22()), predictor).unwrap();
    let kps = seq.keypoint_frames();
    seq.motion_frames().iter().zip(&kps).map(|(m, k)| session.process_frame(m, Some(k)).unwrap()).collect()
}

fn replay_of(gt: &[GroundTruthFrame]) -> Arc<dyn PredictorBackend> {
    Arc::new(Replay::from_ground_truth(gt))
}

#[test]
fn identity_pipeline_reproduces_ground_truth_positions() {
    for kind in [MotionKind::Walk, MotionKind::Squat, MotionKind::Kick] {
        let seq = sequence(kind, 1.0, 4);
        let gt = seq.ground_truth();
        let results = run(&bare_config(), &seq, replay_of(&gt));
        for (r, g) in results.iter().zip(&gt) {
            for (p, q) in r.positions().iter().zip(&g.positions) {
                assert!((p - q).norm() < 1e-9, "{kind} t={} off by {}", r.timestamp, (p - q).norm());
            }
        }
    }
}

#[test]
fn identity_pipeline_scores_zero() {
    let seq = sequence(MotionKind::Walk, 1.0, 9);
    let gt = seq.ground_truth();
    let mut session = Session::new(bare_config(), Arc::new(KinematicTree::smpl22()), replay_of(&gt)).unwrap();
    let report = run_replay(&mut session, &seq.motion_frames(), None, Some(&gt), |_| {}).unwrap();
    for s in report.metrics.unwrap() {
        assert!(s.mean.abs() < 1e-7, "{} = {}", s.name, s.mean);
    }
}

#[test]
fn kpo_with_true_anchors_never_hurts_a_perfect_prediction() {
    let seq = sequence(MotionKind::Walk, 1.0, 2);
    let gt = seq.ground_truth();
    let mut on = bare_config();
    on.stages.use_kpo = true;
    let with = run(&on, &seq, replay_of(&gt));
    let without = run(&bare_config(), &seq, replay_of(&gt));
    for ((a, b), g) in with.iter().zip(&without).zip(&gt) {
        let e_on = mpjpe(a.positions(), &g.positions).unwrap();
        let e_off = mpjpe(b.positions(), &g.positions).unwrap();
        assert!(e_on <= e_off + 1e-9, "t={} {e_on} > {e_off}", a.timestamp);
    }
}

#[test]
fn kpo_reduces_error_under_position_noise() {
    let mut wins = 0;
    for seed in 0..6 {
        let seq = sequence(MotionKind::Walk, 1.0, seed);
        let gt = seq.ground_truth();
        let mut off = bare_config();
        off.position_noise = Some(PositionNoise { sigma_m: 0.02, seed });
        let mut on = off.clone();
        on.stages.use_kpo = true;
        let err = |cfg: &PipelineConfig| {
            let rs = run(cfg, &seq, replay_of(&gt));
            let per: Vec<f64> = rs.iter().zip(&gt).map(|(r, g)| mpjpe(r.positions(), &g.positions).unwrap()).collect();
            mean_std(&per).0
        };
        if err(&on) < err(&off) {
            wins += 1;
        }
    }
    assert_eq!(wins, 6);
}

#[test]
fn heuristic_static_output_is_constant() {
    let seq = sequence(MotionKind::Static, 1.0, 1);
    let cfg = PipelineConfig::default();
    let results = run(&cfg, &seq, Arc::new(Heuristic));
    for r in &results[1..] {
        assert_eq!(r.pose, results[1].pose);
    }
}

#[test]
fn report_matches_recomputation_from_frame_dumps() {
    let seq = sequence(MotionKind::Kick, 1.0, 5);
    let gt = seq.ground_truth();
    let mut cfg = PipelineConfig::default();
    cfg.position_noise = Some(PositionNoise { sigma_m: 0.01, seed: 1 });
    let mut session = Session::new(cfg, Arc::new(KinematicTree::smpl22()), Arc::new(Heuristic)).unwrap();
    let mut dumps = Vec::new();
    let report = run_replay(&mut session, &seq.motion_frames(), Some(&seq.keypoint_frames()), Some(&gt), |r| {
        dumps.push(r.clone())
    })
    .unwrap();

    let mut e = Vec::new();
    let mut pa = Vec::new();
    let mut re = Vec::new();
    for (r, g) in dumps.iter().zip(&gt) {
        e.push(mpjpe(r.positions(), &g.positions).unwrap());
        pa.push(pa_mpjpe(r.positions(), &g.positions).unwrap());
        re.push(mpjre(&r.pose.rotation_matrices().unwrap(), &g.pose.rotation_matrices().unwrap()).unwrap());
    }
    let metrics = report.metrics.unwrap();
    for (name, values) in [("MPJPE", &e), ("PA-MPJPE", &pa), ("MPJRE", &re)] {
        let (mean, std) = mean_std(values);
        let s = metrics.iter().find(|s| s.name == name).unwrap();
        assert!((s.mean - mean).abs() < 1e-9 && (s.std - std).abs() < 1e-9, "{name}");
        assert_eq!(s.count, dumps.len());
    }
}

#[test]
fn disabling_a_stage_leaves_upstream_untouched() {
    let seq = sequence(MotionKind::Walk, 0.7, 3);
    let net: Arc<dyn PredictorBackend> =
        Arc::new(ToyNeural::new(PoseNetwork::random(&NetworkConfig::default(), 7).unwrap()));
    let full = run(&PipelineConfig::default(), &seq, net.clone());
    for stage in ["filter", "kpo"] {
        let mut cfg = PipelineConfig::default();
        cfg.stages.ablate(stage).unwrap();
        let ablated = run(&cfg, &seq, net.clone());
        for (a, b) in full.iter().zip(&ablated) {
            // Rotations come from the predictor, upstream of both stages.
            assert_eq!(a.pose.root_rotation, b.pose.root_rotation);
            assert_eq!(a.pose.local_rotations, b.pose.local_rotations);
            let l = b.latency;
            assert_eq!(if stage == "kpo" { l.kpo } else { l.filter }, 0.0);
            assert!(l.stage_sum() <= l.total);
            assert!(b.kpo.is_some() == (stage != "kpo"));
        }
    }
    for r in &full {
        assert!(r.latency.stage_sum() <= r.latency.total);
        assert!(r.latency.kpo > 0.0 && r.latency.predict > 0.0);
    }
}

#[test]
fn replay_is_deterministic() {
    let seq = sequence(MotionKind::Walk, 0.5, 8);
    let gt = seq.ground_truth();
    let net: Arc<dyn PredictorBackend> =
        Arc::new(ToyNeural::new(PoseNetwork::random(&NetworkConfig::default(), 1).unwrap()));
    let mut cfg = PipelineConfig::default();
    cfg.position_noise = Some(PositionNoise { sigma_m: 0.02, seed: 5 });
    let once = || {
        let mut s = Session::new(cfg.clone(), Arc::new(KinematicTree::smpl22()), net.clone()).unwrap();
        let mut poses = Vec::new();
        let r = run_replay(&mut s, &seq.motion_frames(), Some(&seq.keypoint_frames()), Some(&gt), |f| {
            poses.push(f.pose.clone())
        })
        .unwrap();
        (r.metrics, poses)
    };
    assert_eq!(once(), once());
}

#[test]
fn missing_keypoint_frames_are_carried_forward() {
    let seq = sequence(MotionKind::Walk, 0.5, 2);
    let net: Arc<dyn PredictorBackend> =
        Arc::new(ToyNeural::new(PoseNetwork::random(&NetworkConfig::default(), 3).unwrap()));
    let mut session = Session::new(PipelineConfig::default(), Arc::new(KinematicTree::smpl22()), net).unwrap();
    let kps = seq.keypoint_frames();
    for (i, m) in seq.motion_frames().iter().enumerate() {
        let r = session.process_frame(m, (i % 3 == 0).then(|| &kps[i])).unwrap();
        assert_eq!(r.positions().len(), 22);
    }
}

#[test]
fn stale_frames_are_rejected() {
    let seq = sequence(MotionKind::Walk, 0.2, 2);
    let mut session =
        Session::new(PipelineConfig::default(), Arc::new(KinematicTree::smpl22()), Arc::new(Heuristic)).unwrap();
    let m = seq.motion_frames();
    session.process_frame(&m[1], None).unwrap();
    assert!(matches!(session.process_frame(&m[1], None), Err(PipelineError::StaleFrame { .. })));
    assert!(matches!(session.process_frame(&m[0], None), Err(PipelineError::StaleFrame { .. })));
    session.process_frame(&m[2], None).unwrap();
}

#[test]
fn file_replay_checks_frame_counts() {
    let dir = tempfile::tempdir().unwrap();
    let seq = sequence(MotionKind::Squat, 0.5, 6);
    let gt = seq.ground_truth();
    let motion = dir.path().join("motion.jsonl");
    let keypoints = dir.path().join("keypoints.jsonl");
    let truth = dir.path().join("groundtruth.jsonl");
    let short = dir.path().join("short.jsonl");
    let write = |p: &std::path::Path, f: &dyn Fn(&mut Vec<u8>)| {
        let mut buf = Vec::new();
        f(&mut buf);
        std::fs::write(p, buf).unwrap();
    };
    write(&motion, &|b| epvr_core::descriptor::write_motion(b, &seq.motion_frames()).unwrap());
    write(&keypoints, &|b| epvr_core::refine::write_keypoints(b, &seq.keypoint_frames()).unwrap());
    write(&truth, &|b| epvr_core::eval::write_ground_truth(b, &gt).unwrap());
    write(&short, &|b| epvr_core::eval::write_ground_truth(b, &gt[..3]).unwrap());

    let cfg = bare_config();
    let report = run_replay_files(&cfg, &motion, Some(&keypoints), Some(&truth), |_| {}).unwrap();
    assert_eq!(report.frames, gt.len());
    assert!(report.metrics.unwrap()[0].mean < 1e-7);
    let err = run_replay_files(&cfg, &motion, None, Some(&short), |_| {}).unwrap_err();
    assert!(matches!(err, PipelineError::FrameCountMismatch { .. }));
    let err = run_replay_files(&cfg, &dir.path().join("nope.jsonl"), None, None, |_| {}).unwrap_err();
    assert!(matches!(err, PipelineError::Io { .. }));
}
