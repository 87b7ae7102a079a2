//! Deterministic point-cloud kernels: farthest point sampling, k-nearest
//! neighbors, patch grouping/normalization, and the l1-form Chamfer distance.
//! Everything here is pure and brute-force; clouds stay small enough that
//! spatial acceleration structures would be noise.

pub mod io;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// A raw point set with optional per-point part labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub labels: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud {
            points,
            labels: None,
        }
    }

    pub fn with_labels(points: Vec<Point3>, labels: Vec<u16>) -> Self {
        assert_eq!(points.len(), labels.len());
        PointCloud {
            points,
            labels: Some(labels),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            for i in 0..3 {
                c[i] += p[i];
            }
        }
        let n = self.points.len() as f64;
        c.map(|v| v / n)
    }

    /// A copy translated so its centroid sits at the origin.
    pub fn centered(&self) -> PointCloud {
        let c = self.centroid();
        let points = self
            .points
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        PointCloud {
            points,
            labels: self.labels.clone(),
        }
    }

    pub fn translated(&self, t: Point3) -> PointCloud {
        let points = self
            .points
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect();
        PointCloud {
            points,
            labels: self.labels.clone(),
        }
    }
}

fn sqdist(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Entry (i,j) holds the squared Euclidean distance between a[i] and b[j].
pub fn pairwise_sqdist(a: &[Point3], b: &[Point3]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|p| b.iter().map(|q| sqdist(p, q)).collect())
        .collect()
}

/// Greedy farthest point sampling: starting from `start_index`, repeatedly
/// pick the point maximizing the minimum distance to the selected set. Ties
/// break toward the lowest index.
pub fn sample_fps(cloud: &[Point3], g: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if g > n || g == 0 {
        return Err(Error::Size(format!(
            "fps: requested {g} centers from {n} points"
        )));
    }
    if start_index >= n {
        return Err(Error::Size(format!(
            "fps: start index {start_index} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(g);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start_index;
    selected.push(current);
    for _ in 1..g {
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0;
        for i in 0..n {
            let d = sqdist(&cloud[i], &cloud[current]).min(min_d[i]);
            min_d[i] = d;
            if d > best {
                best = d;
                best_i = i;
            }
        }
        current = best_i;
        selected.push(current);
    }
    Ok(selected)
}

/// For each query point, the indices of its `k` nearest reference points,
/// sorted by ascending distance with ties broken toward the lowest index.
pub fn knn(query: &[Point3], reference: &[Point3], k: usize) -> Result<Vec<Vec<usize>>> {
    if k > reference.len() {
        return Err(Error::Size(format!(
            "knn: k={k} exceeds reference size {}",
            reference.len()
        )));
    }
    let mut out = Vec::with_capacity(query.len());
    for q in query {
        let mut order: Vec<usize> = (0..reference.len()).collect();
        let d: Vec<f64> = reference.iter().map(|r| sqdist(q, r)).collect();
        order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap().then(a.cmp(&b)));
        order.truncate(k);
        out.push(order);
    }
    Ok(out)
}

/// Patch decomposition: `g` FPS centers, each with its `n` nearest points
/// translated so the center sits at the origin.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub centers: Vec<Point3>,
    pub patches: Vec<Vec<Point3>>,
    pub source_indices: Vec<Vec<usize>>,
}

impl PatchSet {
    pub fn group_count(&self) -> usize {
        self.centers.len()
    }

    pub fn patch_size(&self) -> usize {
        self.patches.first().map_or(0, |p| p.len())
    }

    /// Undo the per-patch normalization: patch points plus their center.
    pub fn reassembled(&self) -> Vec<Point3> {
        let mut out = Vec::new();
        for (c, patch) in self.centers.iter().zip(&self.patches) {
            for p in patch {
                out.push([p[0] + c[0], p[1] + c[1], p[2] + c[2]]);
            }
        }
        out
    }
}

pub fn group_patches(cloud: &PointCloud, g: usize, n: usize) -> Result<PatchSet> {
    group_patches_from(cloud, g, n, 0)
}

/// Grouping with an explicit FPS start index (seedable for training-time
/// variety; the default start is index 0).
pub fn group_patches_from(
    cloud: &PointCloud,
    g: usize,
    n: usize,
    fps_start: usize,
) -> Result<PatchSet> {
    let center_idx = sample_fps(&cloud.points, g, fps_start)?;
    let centers: Vec<Point3> = center_idx.iter().map(|&i| cloud.points[i]).collect();
    let membership = knn(&centers, &cloud.points, n)?;
    let mut patches = Vec::with_capacity(g);
    for (c, members) in centers.iter().zip(&membership) {
        let patch: Vec<Point3> = members
            .iter()
            .map(|&i| {
                let p = cloud.points[i];
                [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
            })
            .collect();
        patches.push(patch);
    }
    Ok(PatchSet {
        centers,
        patches,
        source_indices: membership,
    })
}

/// l1-form Chamfer distance: the symmetric mean nearest-neighbor Euclidean
/// distance between the two sets.
pub fn chamfer_l1(p: &[Point3], q: &[Point3]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Size("chamfer: point sets must be non-empty".into()));
    }
    let mut forward = 0.0;
    for a in p {
        let mut best = f64::INFINITY;
        for b in q {
            best = best.min(sqdist(a, b));
        }
        forward += best.sqrt();
    }
    let mut backward = 0.0;
    for b in q {
        let mut best = f64::INFINITY;
        for a in p {
            best = best.min(sqdist(a, b));
        }
        backward += best.sqrt();
    }
    Ok(forward / p.len() as f64 + backward / q.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    /// Independent O(g*N^2) oracle: rebuild the min-distance table from
    /// scratch each round instead of updating it incrementally.
    pub(crate) fn fps_oracle(cloud: &[Point3], g: usize, start: usize) -> Vec<usize> {
        let mut selected = vec![start];
        while selected.len() < g {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for i in 0..cloud.len() {
                let d = selected
                    .iter()
                    .map(|&s| sqdist(&cloud[i], &cloud[s]))
                    .fold(f64::INFINITY, f64::min);
                if d > best {
                    best = d;
                    best_i = i;
                }
            }
            selected.push(best_i);
        }
        selected
    }

    pub(crate) fn knn_oracle(query: &[Point3], reference: &[Point3], k: usize) -> Vec<Vec<usize>> {
        query
            .iter()
            .map(|q| {
                let mut pairs: Vec<(f64, usize)> = reference
                    .iter()
                    .enumerate()
                    .map(|(j, r)| (sqdist(q, r), j))
                    .collect();
                pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                pairs.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect()
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn fps_collinear_example() {
        let cloud = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
        ];
        assert_eq!(sample_fps(&cloud, 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_exhaustive_returns_all_indices() {
        let cloud = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let sel = sample_fps(&cloud, 3, 0).unwrap();
        let mut sorted = sel.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn fps_matches_oracle_on_random_clouds() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        for _ in 0..40 {
            let n = rng.random_range(2..=64);
            let cloud = random_cloud(&mut rng, n);
            let g = rng.random_range(1..=n);
            let start = rng.random_range(0..n);
            assert_eq!(
                sample_fps(&cloud, g, start).unwrap(),
                fps_oracle(&cloud, g, start)
            );
        }
    }

    #[test]
    fn fps_size_error() {
        let cloud = vec![[0.0; 3]];
        assert!(matches!(sample_fps(&cloud, 2, 0), Err(Error::Size(_))));
    }

    #[test]
    fn knn_examples_and_oracle() {
        let reference = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let hits = knn(&[[0.9, 0.0, 0.0]], &reference, 2).unwrap();
        assert_eq!(hits[0], vec![1, 0]);

        // coincident query puts the matching reference first
        let hits = knn(&[[1.0, 0.0, 0.0]], &reference, 3).unwrap();
        assert_eq!(hits[0][0], 1);

        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        for _ in 0..20 {
            let nr = rng.random_range(1..=128);
            let nq = rng.random_range(1..=16);
            let reference = random_cloud(&mut rng, nr);
            let query = random_cloud(&mut rng, nq);
            let k = rng.random_range(1..=nr);
            assert_eq!(
                knn(&query, &reference, k).unwrap(),
                knn_oracle(&query, &reference, k)
            );
        }

        assert!(matches!(
            knn(&[[0.0; 3]], &reference, 4),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn group_patches_shapes_and_origin_membership() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let cloud = PointCloud::new(random_cloud(&mut rng, 128));
        let ps = group_patches(&cloud, 16, 8).unwrap();
        assert_eq!(ps.group_count(), 16);
        assert!(ps.patches.iter().all(|p| p.len() == 8));
        // the center belongs to its own patch, so every normalized patch
        // contains the origin
        for patch in &ps.patches {
            assert!(patch
                .iter()
                .any(|p| p[0] == 0.0 && p[1] == 0.0 && p[2] == 0.0));
        }
        // patch + center recovers the parent coordinates exactly
        for ((c, patch), idx) in ps.centers.iter().zip(&ps.patches).zip(&ps.source_indices) {
            for (p, &i) in patch.iter().zip(idx) {
                let orig = cloud.points[i];
                assert_eq!([p[0] + c[0], p[1] + c[1], p[2] + c[2]], orig);
            }
        }
    }

    #[test]
    fn group_patches_translation_equivariance_on_integer_grid() {
        let points: Vec<Point3> = (0..27)
            .map(|i| [(i % 3) as f64, ((i / 3) % 3) as f64, (i / 9) as f64])
            .collect();
        let cloud = PointCloud::new(points);
        let a = group_patches(&cloud, 5, 4).unwrap();
        let b = group_patches(&cloud.translated([10.0, -7.0, 3.0]), 5, 4).unwrap();
        for (ca, cb) in a.centers.iter().zip(&b.centers) {
            assert_eq!([ca[0] + 10.0, ca[1] - 7.0, ca[2] + 3.0], *cb);
        }
        assert_eq!(a.patches, b.patches);
    }

    #[test]
    fn chamfer_examples() {
        let p = vec![[0.0, 0.0, 0.0]];
        let q = vec![[1.0, 0.0, 0.0]];
        assert!((chamfer_l1(&p, &q).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(chamfer_l1(&p, &p).unwrap(), 0.0);
        assert!(matches!(chamfer_l1(&p, &[]), Err(Error::Size(_))));
    }

    #[test]
    fn pairwise_examples() {
        assert_eq!(pairwise_sqdist(&[[0.0; 3]], &[[0.0; 3]]), vec![vec![0.0]]);
        let d = pairwise_sqdist(&[[0.0, 0.0, 0.0]], &[[3.0, 4.0, 0.0]]);
        assert_eq!(d[0][0], 25.0);
    }

    proptest! {
        #[test]
        fn fps_selected_indices_are_unique(n in 2usize..40, seed in 0u64..500) {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let cloud = random_cloud(&mut rng, n);
            let g = 1 + (seed as usize % n);
            let sel = sample_fps(&cloud, g, 0).unwrap();
            let mut sorted = sel.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), sel.len());
        }

        #[test]
        fn fps_min_pairwise_distance_is_non_increasing(seed in 0u64..200) {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let cloud = random_cloud(&mut rng, 24);
            let mut last = f64::INFINITY;
            for g in 2..=12usize {
                let sel = sample_fps(&cloud, g, 0).unwrap();
                let mut min_d = f64::INFINITY;
                for i in 0..sel.len() {
                    for j in (i + 1)..sel.len() {
                        min_d = min_d.min(sqdist(&cloud[sel[i]], &cloud[sel[j]]));
                    }
                }
                prop_assert!(min_d <= last + 1e-12);
                last = min_d;
            }
        }

        #[test]
        fn chamfer_is_symmetric_and_zero_iff_coincident(seed in 0u64..200) {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let p = random_cloud(&mut rng, 9);
            let q = random_cloud(&mut rng, 7);
            let ab = chamfer_l1(&p, &q).unwrap();
            let ba = chamfer_l1(&q, &p).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab > 0.0);
            prop_assert_eq!(chamfer_l1(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn pairwise_matches_triple_loop_oracle(seed in 0u64..100) {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, 6);
            let b = random_cloud(&mut rng, 5);
            let fast = pairwise_sqdist(&a, &b);
            for i in 0..a.len() {
                for j in 0..b.len() {
                    let mut s = 0.0;
                    for c in 0..3 {
                        let d = a[i][c] - b[j][c];
                        s += d * d;
                    }
                    prop_assert!((fast[i][j] - s).abs() < 1e-12);
                }
            }
        }
    }
}
