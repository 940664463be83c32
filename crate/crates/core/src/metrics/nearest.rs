//! Exact nearest-neighbour distances backed by a k-d tree.

use kiddo::{ImmutableKdTree, SquaredEuclidean};

use crate::geom::{Point3, PointCloud};

pub struct NearestTree {
    tree: Option<ImmutableKdTree<f64, 3>>,
}

impl NearestTree {
    pub fn new(cloud: &PointCloud) -> Self {
        let coords: Vec<[f64; 3]> = cloud.iter().map(|p| [p.x, p.y, p.z]).collect();
        Self {
            tree: (!coords.is_empty()).then(|| ImmutableKdTree::new_from_slice(&coords)),
        }
    }

    /// Squared distance to the nearest point; `None` for an empty cloud.
    pub fn distance_squared(&self, q: &Point3) -> Option<f64> {
        let tree = self.tree.as_ref()?;
        Some(tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]).distance)
    }

    pub fn distance(&self, q: &Point3) -> Option<f64> {
        self.distance_squared(q).map(f64::sqrt)
    }
}
