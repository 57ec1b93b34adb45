//! Keyframe graph: flow distances, proximity edges, backend edge sampling and
//! keyframe removal.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{InverseDepthMap, Intrinsics};
use crate::correspondence::mean_flow_magnitude;
use crate::se3::PoseSE3;

/// Suppression radius for backend edge sampling, in index space.
pub const SUPPRESSION_RADIUS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    /// Stable identifier (index of the frame in the input stream).
    pub id: usize,
    pub timestamp: f64,
    pub pose: PoseSE3,
    pub depth: InverseDepthMap,
    /// Depth of the right view for stereo keyframes.
    pub right_depth: Option<InverseDepthMap>,
}

/// Keyframes in temporal order and directed edges between their ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameGraph {
    pub keyframes: Vec<Keyframe>,
    pub edges: BTreeSet<(usize, usize)>,
}

/// Dense `N×N` matrix of mean flow between keyframes, row = source.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(if i == j { 0.0 } else { f(i, j) });
            }
        }
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Mean of both directions; infinite if either direction is.
    pub fn symmetric(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.get(i, j), self.get(j, i));
        if a.is_finite() && b.is_finite() {
            0.5 * (a + b)
        } else {
            f64::INFINITY
        }
    }
}

pub fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Selects undirected index pairs `i < j` for the backend.
///
/// Finite temporally adjacent pairs come first, then remaining finite pairs in
/// increasing symmetric distance (ties by lexicographic index). Every selected
/// pair suppresses unselected pairs within Chebyshev distance
/// [`SUPPRESSION_RADIUS`]. `max_edges` bounds the number of directed edges, so
/// at most `max_edges / 2` pairs are returned.
pub fn sample_backend_edges(dist: &DistanceMatrix, max_edges: usize) -> Vec<(usize, usize)> {
    let n = dist.len();
    let max_pairs = max_edges / 2;
    let mut selected: Vec<(usize, usize)> = Vec::new();
    let mut suppressed = vec![false; n * n];
    let take = |p: (usize, usize), selected: &mut Vec<(usize, usize)>, suppressed: &mut [bool]| {
        selected.push(p);
        let r = SUPPRESSION_RADIUS;
        for a in p.0.saturating_sub(r)..=(p.0 + r).min(n - 1) {
            for b in p.1.saturating_sub(r)..=(p.1 + r).min(n - 1) {
                suppressed[a * n + b] = true;
            }
        }
    };
    for i in 0..n.saturating_sub(1) {
        if selected.len() >= max_pairs {
            return selected;
        }
        if dist.symmetric(i, i + 1).is_finite() {
            take((i, i + 1), &mut selected, &mut suppressed);
        }
    }
    let mut candidates: Vec<(f64, usize, usize)> = (0..n)
        .flat_map(|i| (i + 2..n).map(move |j| (i, j)))
        .map(|(i, j)| (dist.symmetric(i, j), i, j))
        .filter(|c| c.0.is_finite())
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    for (_, i, j) in candidates {
        if selected.len() >= max_pairs {
            break;
        }
        if !suppressed[i * n + j] {
            take((i, j), &mut selected, &mut suppressed);
        }
    }
    selected
}

/// Both orientations of each undirected pair.
pub fn directed(pairs: &[(usize, usize)]) -> Vec<(usize, usize)> {
    pairs.iter().flat_map(|&(i, j)| [(i, j), (j, i)]).collect()
}

/// Indices of the `k` smallest finite distances, ties broken by index.
pub fn nearest(distances: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).filter(|&i| distances[i].is_finite()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

impl FrameGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.keyframes.iter().map(|k| k.id).collect()
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.keyframes.iter().position(|k| k.id == id)
    }

    pub fn get(&self, id: usize) -> Option<&Keyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    pub fn get_mut(&mut self, id: usize) -> Option<&mut Keyframe> {
        self.keyframes.iter_mut().find(|k| k.id == id)
    }

    pub fn push(&mut self, kf: Keyframe) {
        debug_assert!(self.keyframes.last().is_none_or(|l| l.id < kf.id));
        self.keyframes.push(kf);
    }

    pub fn add_edge(&mut self, i: usize, j: usize) -> bool {
        i != j && self.get(i).is_some() && self.get(j).is_some() && self.edges.insert((i, j))
    }

    /// Ids adjacent to `id` through any edge, in ascending order.
    pub fn neighbors(&self, id: usize) -> BTreeSet<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Mean flow from keyframe `a` to keyframe `b` (ids) under current estimates.
    pub fn distance(&self, a: usize, b: usize, intr: &Intrinsics) -> f64 {
        match (self.get(a), self.get(b)) {
            (Some(ka), Some(kb)) => mean_flow_magnitude(&ka.pose, &kb.pose, &ka.depth, intr),
            _ => f64::INFINITY,
        }
    }

    pub fn build_distance_matrix(&self, intr: &Intrinsics) -> DistanceMatrix {
        let n = self.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let ki = &self.keyframes[i];
                (0..n)
                    .map(|j| {
                        if i == j {
                            0.0
                        } else {
                            mean_flow_magnitude(&ki.pose, &self.keyframes[j].pose, &ki.depth, intr)
                        }
                    })
                    .collect()
            })
            .collect();
        DistanceMatrix {
            n,
            data: rows.into_iter().flatten().collect(),
        }
    }

    /// Connects `new_id` in both directions to its `k` closest covisible keyframes.
    pub fn proximity_edges(&mut self, new_id: usize, k: usize, intr: &Intrinsics) -> Vec<(usize, usize)> {
        let others: Vec<usize> = self.ids().into_iter().filter(|&id| id != new_id).collect();
        let dists: Vec<f64> = others
            .iter()
            .map(|&o| {
                let (a, b) = (self.distance(new_id, o, intr), self.distance(o, new_id, intr));
                if a.is_finite() && b.is_finite() {
                    0.5 * (a + b)
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        let mut added = Vec::new();
        for idx in nearest(&dists, k) {
            let o = others[idx];
            for e in [(new_id, o), (o, new_id)] {
                if self.add_edge(e.0, e.1) {
                    added.push(e);
                }
            }
        }
        added
    }

    /// Removes the keyframe with `id` and its incident edges.
    pub fn remove(&mut self, id: usize) -> Option<Keyframe> {
        let pos = self.index_of(id)?;
        self.edges.retain(|&(a, b)| a != id && b != id);
        Some(self.keyframes.remove(pos))
    }

    /// Chooses a keyframe to drop once the graph holds more than `window` keyframes.
    ///
    /// Among temporally adjacent pairs closer than `flow_threshold` (symmetric
    /// distance), the newer frame of the closest pair is removed; otherwise the
    /// oldest. Frames in `protected` are never removed.
    pub fn keyframe_removal(
        &mut self,
        flow_threshold: f64,
        window: usize,
        protected: &[usize],
        intr: &Intrinsics,
    ) -> Option<Keyframe> {
        if self.len() <= window {
            return None;
        }
        let mut best: Option<(f64, usize)> = None;
        for w in 0..self.len() - 1 {
            let (a, b) = (self.keyframes[w].id, self.keyframes[w + 1].id);
            if protected.contains(&b) {
                continue;
            }
            let (d1, d2) = (self.distance(a, b, intr), self.distance(b, a, intr));
            let d = if d1.is_finite() && d2.is_finite() { 0.5 * (d1 + d2) } else { f64::INFINITY };
            if d < flow_threshold && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, b));
            }
        }
        let victim = match best {
            Some((_, id)) => id,
            None => self.keyframes.iter().map(|k| k.id).find(|id| !protected.contains(id))?,
        };
        self.remove(victim)
    }

    /// Drops edges whose endpoints are no longer covisible.
    pub fn prune_invisible_edges(&mut self, intr: &Intrinsics) -> usize {
        let before = self.edges.len();
        let keep: BTreeSet<_> = self
            .edges
            .iter()
            .copied()
            .filter(|&(a, b)| self.distance(a, b, intr).is_finite())
            .collect();
        self.edges = keep;
        before - self.edges.len()
    }

    pub fn dump(&self, intr: &Intrinsics) -> GraphDump {
        let dist = self.build_distance_matrix(intr);
        let n = self.len();
        GraphDump {
            nodes: self
                .keyframes
                .iter()
                .map(|k| GraphNode {
                    id: k.id,
                    timestamp: k.timestamp,
                    translation: (*k.pose.translation()).into(),
                    quaternion_xyzw: k.pose.quaternion_xyzw(),
                    mean_inverse_depth: k.depth.mean(),
                })
                .collect(),
            edges: self.edges.iter().copied().collect(),
            distances: (0..n)
                .map(|i| (0..n).map(|j| Some(dist.get(i, j)).filter(|d| d.is_finite())).collect())
                .collect(),
        }
    }
}

/// Serializable snapshot of the graph. Infinite distances are written as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize)>,
    pub distances: Vec<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub timestamp: f64,
    /// World-to-camera translation.
    pub translation: [f64; 3],
    pub quaternion_xyzw: [f64; 4],
    pub mean_inverse_depth: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn intr() -> Intrinsics {
        Intrinsics::new(20.0, 20.0, 7.5, 5.5).unwrap()
    }

    fn kf(id: usize, x: f64) -> Keyframe {
        Keyframe {
            id,
            timestamp: id as f64,
            pose: PoseSE3::from_translation(Vector3::new(x, 0.0, 0.0)),
            depth: InverseDepthMap::constant(16, 12, 0.5),
            right_depth: None,
        }
    }

    fn line_graph(xs: &[f64]) -> FrameGraph {
        let mut g = FrameGraph::new();
        for (k, &x) in xs.iter().enumerate() {
            g.push(kf(k, x));
        }
        g
    }

    #[test]
    fn single_keyframe_matrix() {
        let d = line_graph(&[0.0]).build_distance_matrix(&intr());
        assert_eq!(d.len(), 1);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn identical_poses_have_zero_distance() {
        let d = line_graph(&[0.3, 0.3]).build_distance_matrix(&intr());
        assert_eq!(d.get(0, 1), 0.0);
        assert_eq!(d.get(1, 0), 0.0);
    }

    #[test]
    fn matrix_matches_pairwise_recomputation() {
        let g = line_graph(&[0.0, 0.1, 0.35, 0.4, 2.5]);
        let d = g.build_distance_matrix(&intr());
        for i in 0..5 {
            for j in 0..5 {
                let direct = if i == j {
                    0.0
                } else {
                    let (a, b) = (&g.keyframes[i], &g.keyframes[j]);
                    mean_flow_magnitude(&a.pose, &b.pose, &a.depth, &intr())
                };
                assert_eq!(d.get(i, j).to_bits(), direct.to_bits());
            }
        }
        // 2.5 units at inverse depth 0.5 and focal 20 is 25 px on a 16 px wide image.
        assert!(d.get(0, 4).is_infinite());
    }

    #[test]
    fn nearest_picks_smallest_finite() {
        assert_eq!(nearest(&[2.0, 9.0, 4.0, f64::INFINITY, 3.0], 3), vec![0, 4, 2]);
        assert!(nearest(&[f64::INFINITY; 4], 3).is_empty());
        assert_eq!(nearest(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
    }

    #[test]
    fn proximity_with_two_keyframes_connects_both() {
        let mut g = line_graph(&[0.0, 0.05]);
        let added = g.proximity_edges(1, 3, &intr());
        assert_eq!(added, vec![(1, 0), (0, 1)]);
    }

    #[test]
    fn proximity_skips_non_covisible() {
        let mut g = line_graph(&[0.0, 3.0, 6.0]);
        assert!(g.proximity_edges(2, 3, &intr()).is_empty());
        assert!(g.edges.is_empty());
    }

    #[test]
    fn chebyshev_example() {
        assert_eq!(chebyshev((3, 5), (4, 7)), 2);
        let dist = DistanceMatrix::from_fn(8, |i, j| match (i.min(j), i.max(j)) {
            (3, 5) => 0.1,
            (a, b) if b - a == 1 => f64::INFINITY,
            (a, b) => 1.0 + (a + b) as f64,
        });
        let picked = sample_backend_edges(&dist, 100);
        assert!(picked.contains(&(3, 5)));
        assert!(!picked.contains(&(4, 7)));
    }

    #[test]
    fn adjacency_always_present_for_three_frames() {
        let dist = DistanceMatrix::from_fn(3, |_, _| 5.0);
        let picked = sample_backend_edges(&dist, 48);
        assert_eq!(picked, vec![(0, 1), (1, 2)]);
        assert_eq!(directed(&picked).len(), 4);
    }

    #[test]
    fn sampling_respects_budget() {
        let dist = DistanceMatrix::from_fn(20, |i, j| i.abs_diff(j) as f64);
        assert_eq!(sample_backend_edges(&dist, 10).len(), 5);
    }

    #[test]
    fn redundant_newer_frame_removed() {
        let mut g = line_graph(&[0.0, 0.4, 0.8, 0.81, 1.2]);
        let removed = g.keyframe_removal(16.0, 4, &[0, 1], &intr()).unwrap();
        assert_eq!(removed.id, 3);
        assert_eq!(g.len(), 4);
    }

    #[test]
    fn oldest_removed_without_redundancy_and_gauge_kept() {
        let mut g = line_graph(&[0.0, 0.6, 1.2, 1.8]);
        g.add_edge(2, 3);
        g.add_edge(1, 2);
        let removed = g.keyframe_removal(1.0, 3, &[0, 1], &intr()).unwrap();
        assert_eq!(removed.id, 2);
        assert_eq!(g.edges.len(), 0);
        assert!(g.keyframe_removal(1.0, 3, &[0, 1], &intr()).is_none());
    }

    #[test]
    fn gauge_frames_never_removed_even_if_redundant() {
        let mut g = line_graph(&[0.0, 0.0, 0.0]);
        let removed = g.keyframe_removal(16.0, 2, &[0, 1], &intr()).unwrap();
        assert_eq!(removed.id, 2);
    }

    #[test]
    fn dump_serializes_infinity_as_null() {
        let g = line_graph(&[0.0, 5.0]);
        let json = serde_json::to_string(&g.dump(&intr())).unwrap();
        assert!(json.contains("null"));
    }

    fn random_matrix(n: usize) -> impl Strategy<Value = DistanceMatrix> {
        proptest::collection::vec(prop_oneof![4 => 0.0f64..100.0, 1 => Just(f64::INFINITY)], n * n)
            .prop_map(move |v| DistanceMatrix::from_fn(n, |i, j| v[i * n + j]))
    }

    proptest! {
        #[test]
        fn suppression_holds_exhaustively(dist in random_matrix(30), budget in 2usize..600) {
            let picked = sample_backend_edges(&dist, budget);
            prop_assert!(picked.len() * 2 <= budget);
            for &(i, j) in &picked {
                prop_assert!(i < j && dist.symmetric(i, j).is_finite());
            }
            let far: Vec<_> = picked.iter().filter(|p| p.1 - p.0 > 1).collect();
            for a in 0..far.len() {
                for b in a + 1..far.len() {
                    prop_assert!(chebyshev(*far[a], *far[b]) > SUPPRESSION_RADIUS);
                }
            }
            prop_assert_eq!(sample_backend_edges(&dist, budget), picked);
        }
    }
}
