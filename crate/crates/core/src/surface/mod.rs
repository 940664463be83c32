//! Zero-level-set extraction by marching cubes.

mod table;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::FIELD_HALF_EXTENT;
use crate::geom::{Aabb, Point3, Sdf, TriMesh};

pub use table::case_table;
use table::{corner_offset, EDGES};

pub const MIN_RESOLUTION: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum SurfaceError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("non-finite field value {value} at grid corner {index:?} = ({:.9}, {:.9}, {:.9})", point[0], point[1], point[2])]
    NonFinite {
        index: [usize; 3],
        point: [f64; 3],
        value: f64,
    },
}

/// Sampling lattice: `resolution` cells per axis over `[min, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub resolution: usize,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::cube(128, FIELD_HALF_EXTENT)
    }
}

impl GridSpec {
    pub fn cube(resolution: usize, half: f64) -> Self {
        Self {
            resolution,
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn with_resolution(resolution: usize) -> Self {
        Self {
            resolution,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SurfaceError> {
        if self.resolution < MIN_RESOLUTION {
            return Err(SurfaceError::Grid(format!(
                "resolution {} is below the minimum {MIN_RESOLUTION}",
                self.resolution
            )));
        }
        for k in 0..3 {
            if !(self.min[k].is_finite() && self.max[k].is_finite() && self.min[k] < self.max[k]) {
                return Err(SurfaceError::Grid(format!(
                    "empty or non-finite box on axis {k}: [{}, {}]",
                    self.min[k], self.max[k]
                )));
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::new(Point3::from(self.min), Point3::from(self.max))
    }

    /// Cell edge length per axis.
    pub fn cell_size(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| (self.max[k] - self.min[k]) / self.resolution as f64)
    }

    fn coord(&self, axis: usize, i: usize) -> f64 {
        let t = i as f64 / self.resolution as f64;
        self.min[axis] + (self.max[axis] - self.min[axis]) * t
    }

    pub fn corner(&self, i: usize, j: usize, k: usize) -> Point3 {
        Point3::new(self.coord(0, i), self.coord(1, j), self.coord(2, k))
    }
}

/// Field values at all `(resolution + 1)^3` corners, x fastest.
pub fn sample_grid<S: Sdf + ?Sized>(sdf: &S, grid: &GridSpec) -> Result<Vec<f64>, SurfaceError> {
    grid.validate()?;
    let m = grid.resolution + 1;
    let slabs: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|k| {
            let pts: Vec<Point3> = (0..m * m).map(|ij| grid.corner(ij % m, ij / m, k)).collect();
            sdf.sdf_batch(&pts)
        })
        .collect();
    let values: Vec<f64> = slabs.concat();
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        let index = [idx % m, (idx / m) % m, idx / (m * m)];
        let p = grid.corner(index[0], index[1], index[2]);
        return Err(SurfaceError::NonFinite {
            index,
            point: [p.x, p.y, p.z],
            value: values[idx],
        });
    }
    Ok(values)
}

/// Triangle mesh of `{x | sdf(x) = 0}` with normals facing positive values.
/// Corners with `sdf < 0` are inside; vertices are linearly interpolated
/// on sign-change edges and shared between neighbouring cells.
pub fn marching_cubes<S: Sdf + ?Sized>(sdf: &S, grid: &GridSpec) -> Result<TriMesh, SurfaceError> {
    let values = sample_grid(sdf, grid)?;
    Ok(mesh_from_values(&values, grid))
}

/// Marching cubes over precomputed corner values (see [`sample_grid`]).
pub fn mesh_from_values(values: &[f64], grid: &GridSpec) -> TriMesh {
    let n = grid.resolution;
    let m = n + 1;
    let at = |i: usize, j: usize, k: usize| values[i + m * (j + m * k)];
    let table = case_table();
    let mut vertex_of: HashMap<usize, u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let corner = |c: usize| {
                    let o = corner_offset(c);
                    (i + o[0], j + o[1], k + o[2])
                };
                let mut case = 0usize;
                for c in 0..8 {
                    let (x, y, z) = corner(c);
                    if at(x, y, z) < 0.0 {
                        case |= 1 << c;
                    }
                }
                let tris = &table[case];
                if tris.is_empty() {
                    continue;
                }
                let mut vertex = |e: u8| -> u32 {
                    let (a, b) = EDGES[e as usize];
                    let (ax, ay, az) = corner(a);
                    let (bx, by, bz) = corner(b);
                    let axis = (a ^ b).trailing_zeros() as usize;
                    let id = (ax + m * (ay + m * az)) * 3 + axis;
                    *vertex_of.entry(id).or_insert_with(|| {
                        let (va, vb) = (at(ax, ay, az), at(bx, by, bz));
                        let (pa, pb) = (grid.corner(ax, ay, az), grid.corner(bx, by, bz));
                        let t = va / (va - vb);
                        vertices.push(pa + (pb - pa) * t);
                        (vertices.len() - 1) as u32
                    })
                };
                for t in tris {
                    triangles.push(t.map(&mut vertex));
                }
            }
        }
    }
    TriMesh::new(vertices, triangles)
}
