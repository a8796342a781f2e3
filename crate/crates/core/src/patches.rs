//! Patch placement on the region of interest of a surface mesh.
//!
//! Centers are chosen by seeded farthest-point sampling under the
//! mesh-edge (Dijkstra) geodesic. All patches share one radius, grown in
//! 10% steps from `sqrt(area / count)` until every in-region vertex is
//! within reach of some center.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::SurfaceMesh;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub id: usize,
    /// Sorted in-region vertex indices.
    pub vertex_ids: Vec<usize>,
    pub center: usize,
    /// Geodesic radius (mm).
    pub radius: f64,
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest path lengths over the mesh edge graph.
pub fn dijkstra(adj: &[Vec<(usize, f64)>], source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Entry(0.0, source));
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Entry(nd, v));
            }
        }
    }
    dist
}

pub fn place_patches(mesh: &SurfaceMesh, target_count: usize, seed: u64) -> Result<Vec<Patch>> {
    let region = mesh.region_vertices();
    if target_count == 0 || region.len() < target_count {
        return Err(Error::InsufficientRegion {
            available: region.len(),
            requested: target_count,
        });
    }
    let adj = mesh.edge_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = Vec::with_capacity(target_count);
    let mut center_dist: Vec<Vec<f64>> = Vec::with_capacity(target_count);
    let mut nearest = vec![f64::INFINITY; mesh.vertex_count()];
    let mut next = region[rng.random_range(0..region.len())];
    for _ in 0..target_count {
        let d = dijkstra(&adj, next);
        for (n, &x) in nearest.iter_mut().zip(&d) {
            *n = n.min(x);
        }
        centers.push(next);
        center_dist.push(d);
        // farthest in-region vertex; ties go to the lowest index
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for &v in &region {
            if nearest[v] > best.0 {
                best = (nearest[v], v);
            }
        }
        next = best.1;
    }

    let cover = region.iter().map(|&v| nearest[v]).fold(0.0, f64::max);
    if !cover.is_finite() {
        return Err(Error::invalid(format!(
            "region is split into more than {target_count} disconnected parts"
        )));
    }
    let mut radius = (mesh.area() / target_count as f64).sqrt();
    if !(radius > 0.0) {
        radius = cover.max(f64::MIN_POSITIVE);
    }
    while radius < cover {
        radius *= 1.1;
    }

    Ok(centers
        .iter()
        .zip(&center_dist)
        .enumerate()
        .map(|(id, (&center, dist))| Patch {
            id,
            vertex_ids: region.iter().copied().filter(|&v| dist[v] <= radius).collect(),
            center,
            radius,
        })
        .collect())
}

/// Number of patches covering each vertex.
pub fn multiplicity(patches: &[Patch], vertex_count: usize) -> Vec<u32> {
    let mut m = vec![0u32; vertex_count];
    for p in patches {
        for &v in &p.vertex_ids {
            m[v] += 1;
        }
    }
    m
}
