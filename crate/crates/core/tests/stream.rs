use sebsfv::metrics;
use sebsfv::pipeline::{self, PipelineConfig};
use sebsfv::registration;
use sebsfv::synth::{self, MixtureSpec, SceneSpec};
use sebsfv::videodata::VideoMatrix;

#[test]
fn registration_raises_background_cdf() {
    let spec = SceneSpec {
        width: 96,
        height: 96,
        frames: 60,
        rotation_per_frame: 0.5,
        shadows: Vec::new(),
        mixture: MixtureSpec {
            weights: vec![1.0],
            sigmas: vec![0.0],
        },
        seed: 2,
        ..SceneSpec::default()
    };
    let scene = synth::generate_scene(&spec).unwrap();
    let raw = VideoMatrix::from_frames(&scene.frames).unwrap();
    let registered = registration::register_sequence(&scene.frames, 100).unwrap().video;
    let common: Vec<usize> = (0..raw.d())
        .filter(|&i| (0..raw.n()).all(|j| raw.mask()[(i, j)] && registered.mask()[(i, j)]))
        .collect();
    assert!(common.len() > raw.d() / 4);
    let before = metrics::cdf_curve(&raw.data().select_rows(&common), 5.0).unwrap();
    let after = metrics::cdf_curve(&registered.data().select_rows(&common), 5.0).unwrap();
    assert!(after >= before, "CDF(5) before {before} after {after}");
}

#[test]
fn chunks_are_processed_independently() {
    let spec = SceneSpec {
        width: 48,
        height: 48,
        frames: 130,
        shadows: vec![synth::ShadowTrack {
            start: [5.0, 20.0],
            velocity: [0.25, 0.0],
            size: [6, 5],
            depth: 0.3,
        }],
        seed: 5,
        ..SceneSpec::default()
    };
    let scene = synth::generate_scene(&spec).unwrap();
    let video = VideoMatrix::from_frames(&scene.frames).unwrap();
    let cfg = PipelineConfig {
        k: 3,
        rank: Some(3),
        ..PipelineConfig::default()
    };
    let full = pipeline::se_bsfv_stream(&video, &cfg).unwrap();
    let tail = pipeline::se_bsfv_stream(&video.columns(100, 130), &cfg).unwrap();
    assert_eq!(full.stack.boundaries, vec![0, 100]);
    for j in 0..30 {
        let a = full.stack.residuals.column(100 + j);
        let b = tail.stack.residuals.column(j);
        assert!((a - b).amax() <= 1e-12, "frame {}", 100 + j);
        assert_eq!(
            full.diagnostics[100 + j].inner_iterations,
            tail.diagnostics[j].inner_iterations
        );
    }
}
