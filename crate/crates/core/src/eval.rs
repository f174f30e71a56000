//! Correspondence quality: graph geodesics, mean geodesic error, cumulative
//! error curves and Hits@1.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::matching::PointMap;
use crate::mesh::{EdgeGraph, TriangleMesh};
use crate::par;

/// Curve thresholds used by reports: 0 to 0.25 in steps of 0.01.
pub fn default_thresholds() -> Vec<f64> {
    (0..=25).map(|i| i as f64 * 0.01).collect()
}

/// Dijkstra distances from `source`; unreachable vertices get `f64::INFINITY`.
pub fn geodesic_distances(graph: &EdgeGraph, source: usize) -> Result<Vec<f64>> {
    let n = graph.n_vertices();
    if source >= n {
        return Err(Error::InvalidArgument(format!(
            "source {source} out of range for {n} vertices"
        )));
    }
    let mut dist = vec![f64::INFINITY; n];
    dist[source] = 0.0;
    // distances are nonnegative, so their bit patterns order like the values
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((0f64.to_bits(), source)));
    while let Some(Reverse((bits, u))) = heap.pop() {
        let d = f64::from_bits(bits);
        if d > dist[u] {
            continue;
        }
        for &(v, len) in graph.neighbors(u) {
            let nd = d + len;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Reverse((nd.to_bits(), v)));
            }
        }
    }
    Ok(dist)
}

/// Per-source geodesic errors with their summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    #[serde(skip)]
    pub errors: Vec<f64>,
    pub mean: f64,
    pub mean_x100: f64,
    /// `(threshold, fraction of errors below it)`.
    pub curve: Vec<(f64, f64)>,
}

impl ErrorReport {
    pub fn from_errors(errors: Vec<f64>) -> Self {
        let mean = if errors.is_empty() {
            0.0
        } else {
            errors.iter().sum::<f64>() / errors.len() as f64
        };
        let curve = cumulative_curve(&errors, &default_thresholds());
        Self {
            errors,
            mean,
            mean_x100: 100.0 * mean,
            curve,
        }
    }

    /// Fraction of errors strictly above `t`.
    pub fn fraction_above(&self, t: f64) -> f64 {
        if self.errors.is_empty() {
            return 0.0;
        }
        self.errors.iter().filter(|&&e| e > t).count() as f64 / self.errors.len() as f64
    }

    /// `source_index,error` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source_index,error\n");
        for (i, e) in self.errors.iter().enumerate() {
            let _ = writeln!(s, "{i},{e:?}");
        }
        s
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Writes `<stem>.csv` and `<stem>.json` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fsutil::write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())?;
        fsutil::write_atomic(
            &dir.join(format!("{stem}.json")),
            self.summary_json().as_bytes(),
        )
    }
}

/// Geodesic distance on the unit-area copy of `mesh2` between `pmap(i)` and `gt(i)`.
pub fn mean_geodesic_error(
    pmap: &PointMap,
    gt: &PointMap,
    mesh2: &TriangleMesh,
) -> Result<ErrorReport> {
    if pmap.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "predicted map has {} entries, ground truth {}",
            pmap.len(),
            gt.len()
        )));
    }
    let n2 = mesh2.n_vertices();
    pmap.check_range(n2)?;
    gt.check_range(n2)?;
    let graph = mesh2.normalize_to_unit_area()?.edge_graph();

    let mut sources: Vec<usize> = gt.targets().to_vec();
    sources.sort_unstable();
    sources.dedup();
    let mut slot = vec![usize::MAX; n2];
    for (k, &s) in sources.iter().enumerate() {
        slot[s] = k;
    }
    let rows: Vec<Vec<f64>> = par::map_slice(&sources, |&s| geodesic_distances(&graph, s))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut errors = Vec::with_capacity(gt.len());
    for (i, (&p, &g)) in pmap.targets().iter().zip(gt.targets()).enumerate() {
        let e = rows[slot[g]][p];
        if !e.is_finite() {
            return Err(Error::InvalidMesh(format!(
                "source {i}: target {p} is not connected to ground truth {g}"
            )));
        }
        errors.push(e);
    }
    Ok(ErrorReport::from_errors(errors))
}

/// Fraction of errors strictly below each threshold.
pub fn cumulative_curve(errors: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&t| (t, sorted.partition_point(|&e| e < t) as f64 / n))
        .collect()
}

/// Fraction of exact matches.
pub fn hits_at_1(pred: &PointMap, gt: &PointMap) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} entries, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument("empty ground truth".into()));
    }
    let hits = pred
        .targets()
        .iter()
        .zip(gt.targets())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geom;
    use crate::synth::{generate_template, TemplateKind};

    #[test]
    fn path_graph_distances() {
        // 0 --1-- 1 --2-- 2 as a degenerate-free strip: use a mesh whose edge graph we control
        let m = TriangleMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [3.0, 0.0, 0.0],
                [1.0, 5.0, 0.0],
            ],
            vec![[0, 1, 3], [1, 2, 3]],
            "path",
        )
        .unwrap();
        let d = geodesic_distances(&m.edge_graph(), 0).unwrap();
        assert_eq!(&d[..3], &[0.0, 1.0, 3.0]);
    }

    #[test]
    fn metric_properties_on_icosphere() {
        let m = generate_template(&TemplateKind::Icosphere { subdivisions: 2 }).unwrap();
        let g = m.edge_graph();
        let n = m.n_vertices();
        let all: Vec<Vec<f64>> = (0..n).map(|s| geodesic_distances(&g, s).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let (u, v, w) = (
                rng.random_range(0..n),
                rng.random_range(0..n),
                rng.random_range(0..n),
            );
            assert_eq!(all[u][u], 0.0);
            assert!((all[u][v] - all[v][u]).abs() < 1e-9);
            assert!(all[u][w] <= all[u][v] + all[v][w] + 1e-9);
            assert!(all[u][v] >= geom::dist(m.vertices()[u], m.vertices()[v]) - 1e-12);
        }
    }

    #[test]
    fn error_report_oracles() {
        let m = generate_template(&TemplateKind::Icosphere { subdivisions: 1 })
            .unwrap()
            .normalize_to_unit_area()
            .unwrap();
        let n = m.n_vertices();
        let gt = PointMap::identity(n);
        assert_eq!(mean_geodesic_error(&gt, &gt, &m).unwrap().mean, 0.0);

        let (nbr, len) = m.edge_graph().neighbors(0)[0];
        let mut t = gt.targets().to_vec();
        t[0] = nbr;
        let r = mean_geodesic_error(&PointMap::from_vec(t.clone()), &gt, &m).unwrap();
        assert!((r.mean - len / n as f64).abs() < 1e-12);
        assert!((r.mean_x100 - 100.0 * r.mean).abs() < 1e-12);

        let big = m
            .with_vertices(m.vertices().iter().map(|&p| geom::scale(p, 3.7)).collect())
            .unwrap();
        let rb = mean_geodesic_error(&PointMap::from_vec(t), &gt, &big).unwrap();
        assert!((rb.mean - r.mean).abs() < 1e-12);
        assert!(mean_geodesic_error(&PointMap::identity(n - 1), &gt, &m).is_err());
    }

    #[test]
    fn curve_oracles() {
        assert_eq!(
            cumulative_curve(&[0.1, 0.3], &[0.2, 0.4]),
            vec![(0.2, 0.5), (0.4, 1.0)]
        );
        assert!(cumulative_curve(&[0.0; 5], &[1e-9, 0.5])
            .iter()
            .all(|p| p.1 == 1.0));
        assert!(cumulative_curve(&[0.2], &[]).is_empty());
        assert_eq!(cumulative_curve(&[0.2, 3.0], &[f64::INFINITY])[0].1, 1.0);
    }

    #[test]
    fn hits() {
        let gt = PointMap::identity(4);
        assert_eq!(hits_at_1(&gt, &gt).unwrap(), 1.0);
        assert_eq!(
            hits_at_1(&PointMap::from_vec(vec![0, 1, 3, 2]), &gt).unwrap(),
            0.5
        );
        assert!(hits_at_1(&PointMap::identity(3), &gt).is_err());

        let m = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trials = 4000;
        let mut total = 0.0;
        for _ in 0..trials {
            let mut p: Vec<usize> = (0..m).collect();
            p.shuffle(&mut rng);
            total += hits_at_1(&PointMap::from_vec(p), &PointMap::identity(m)).unwrap();
        }
        assert!((total / trials as f64 - 1.0 / m as f64).abs() < 0.01);
    }
}
