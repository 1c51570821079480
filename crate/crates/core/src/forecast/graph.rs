use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Default neighbourhood radius between zone centroids.
pub const DEFAULT_RADIUS_KM: f64 = 5.0;

/// Distance graph over zones with the symmetric-normalized propagation
/// operator `D^-1/2 (A + I) D^-1/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneGraph {
    pub radius_km: f64,
    /// 0/1 adjacency without self-loops.
    pub adjacency: Array2<f64>,
    pub norm_adjacency: Array2<f64>,
}

impl ZoneGraph {
    pub fn n_zones(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|v| **v > 0.0).count() / 2
    }
}

pub fn build_graph(coords: &[(f64, f64)], radius_km: f64) -> ZoneGraph {
    let n = coords.len();
    let mut adjacency = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let (dx, dy) = (coords[i].0 - coords[j].0, coords[i].1 - coords[j].1);
            if (dx * dx + dy * dy).sqrt() <= radius_km {
                adjacency[[i, j]] = 1.0;
                adjacency[[j, i]] = 1.0;
            }
        }
    }
    let degree: Vec<f64> = (0..n).map(|i| 1.0 + adjacency.row(i).sum()).collect();
    let norm_adjacency = Array2::from_shape_fn((n, n), |(i, j)| {
        let a = if i == j { 1.0 } else { adjacency[[i, j]] };
        a / (degree[i].sqrt() * degree[j].sqrt())
    });
    ZoneGraph { radius_km, adjacency, norm_adjacency }
}
