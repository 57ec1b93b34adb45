//! Fixtures shared by the benchmarks.

use densba_core::correspondence::MIN_COVISIBLE_FRACTION;
use densba_core::oracle::{generate_scene, SceneConfig, ViewId};
use densba_core::{BAProblem, NoiseModel, SceneOracle, SyntheticScene};

pub fn scene(frames: usize, width: usize, height: usize) -> SyntheticScene {
    let cfg = SceneConfig {
        frames,
        width,
        height,
        focal: 0.78 * width as f64,
        ..SceneConfig::default()
    };
    generate_scene(&cfg, 0).expect("scene")
}

/// Ground-truth problem over every covisible directed pair with noisy targets.
pub fn problem(frames: usize, width: usize, height: usize) -> BAProblem {
    let scene = scene(frames, width, height);
    let noise = NoiseModel {
        sigma: 0.5,
        ..NoiseModel::default()
    };
    let oracle = SceneOracle::new(scene.clone(), noise, 1);
    let mut obs = Vec::new();
    for i in 0..frames {
        for j in 0..frames {
            if i != j {
                let o = oracle.observe(ViewId::left(i), ViewId::left(j), (i, j));
                if o.overlap() >= MIN_COVISIBLE_FRACTION {
                    obs.push(o);
                }
            }
        }
    }
    let mut p = BAProblem::new(scene.poses, scene.depths, scene.intrinsics, obs, [0, 1].into()).expect("problem");
    p.set_uniform_damping(oracle.damping);
    p
}
