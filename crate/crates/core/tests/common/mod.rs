#![allow(dead_code)]

use std::collections::BTreeSet;

use densba_core::correspondence::dense_correspondence;
use densba_core::{BAProblem, EdgeObservation, InverseDepthMap, Intrinsics, PoseSE3, Twist};
use nalgebra::{Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_twist(rng: &mut impl Rng, trans: f64, rot: f64) -> Twist {
    let mut v = Vector6::zeros();
    for k in 0..3 {
        v[k] = rng.random_range(-trans..=trans);
        v[k + 3] = rng.random_range(-rot..=rot);
    }
    Twist(v)
}

/// Observation with targets at the exact reprojection under `poses`/`depths`.
pub fn exact_observation(poses: &[PoseSE3], depths: &[InverseDepthMap], intr: &Intrinsics, i: usize, j: usize) -> EdgeObservation {
    let f = dense_correspondence(&poses[i], &poses[j], &depths[i], intr);
    EdgeObservation {
        source: i,
        target: j,
        width: f.width,
        height: f.height,
        confidence: vec![Vector2::new(1.0, 1.0); f.valid.len()],
        targets: f.targets,
        valid: f.valid,
    }
}

/// A random problem with noisy targets and random confidences on a `w × h` grid.
pub fn random_problem(rng: &mut impl Rng, frames: usize, w: usize, h: usize, fixed: BTreeSet<usize>) -> BAProblem {
    let intr = Intrinsics::new(0.8 * w as f64, 0.8 * w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap();
    let poses: Vec<PoseSE3> = (0..frames)
        .map(|k| {
            let mut xi = random_twist(rng, 0.05, 0.03);
            xi.0[0] += 0.15 * k as f64;
            PoseSE3::exp(&xi)
        })
        .collect();
    let depths: Vec<InverseDepthMap> = (0..frames)
        .map(|_| {
            let v = (0..w * h).map(|_| rng.random_range(0.3..0.7)).collect();
            InverseDepthMap::new(w, h, v).unwrap()
        })
        .collect();
    let mut obs = Vec::new();
    for i in 0..frames {
        for j in 0..frames {
            if i == j {
                continue;
            }
            let mut o = exact_observation(&poses, &depths, &intr, i, j);
            for (t, c) in o.targets.iter_mut().zip(o.confidence.iter_mut()) {
                *t += Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                *c = Vector2::new(rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
            }
            obs.push(o);
        }
    }
    BAProblem::new(poses, depths, intr, obs, fixed).unwrap()
}

pub fn pose_gap(a: &PoseSE3, b: &PoseSE3) -> f64 {
    a.compose(&b.inverse()).log().unwrap().norm()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn translation(p: &PoseSE3) -> Vector3<f64> {
    *p.translation()
}
