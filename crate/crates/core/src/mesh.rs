//! Regular triangulation of the unit square.
//!
//! Nodes are numbered lexicographically with `x` running fastest, so node
//! `(i, j)` sits at `(i h, j h)` and has index `j (n + 1) + i`. Every grid cell
//! is split along its lower-left to upper-right diagonal into two
//! counterclockwise triangles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One side of the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Right, Side::Top, Side::Bottom];

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
            Side::Top => 2,
            Side::Bottom => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StructuredMesh {
    n: usize,
    h: f64,
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: [Vec<[usize; 2]>; 4],
}

pub fn build_unit_square_mesh(n: usize) -> Result<StructuredMesh> {
    StructuredMesh::unit_square(n)
}

impl StructuredMesh {
    pub fn unit_square(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("mesh needs at least one cell per side".into()));
        }
        let h = 1.0 / n as f64;
        let np = n + 1;
        let mut nodes = Vec::with_capacity(np * np);
        for j in 0..np {
            for i in 0..np {
                // i * h would accumulate rounding differently from i / n
                nodes.push([i as f64 / n as f64, j as f64 / n as f64]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let a = j * np + i;
                let b = a + 1;
                let c = a + np + 1;
                let d = a + np;
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
        let mut left = Vec::with_capacity(n);
        let mut right = Vec::with_capacity(n);
        let mut top = Vec::with_capacity(n);
        let mut bottom = Vec::with_capacity(n);
        for k in 0..n {
            bottom.push([k, k + 1]);
            top.push([n * np + k, n * np + k + 1]);
            left.push([k * np, (k + 1) * np]);
            right.push([k * np + n, (k + 1) * np + n]);
        }
        Ok(Self { n, h, nodes, triangles, boundary_edges: [left, right, top, bottom] })
    }

    /// Copy of the mesh with node `k` moved to `nodes[k] + t * displacement[k]`.
    ///
    /// Topology, `n` and the nominal spacing are kept; only the geometry
    /// changes. Used to realize `x + t theta(x)` perturbations of the domain.
    pub fn displaced(&self, displacement: &[[f64; 2]], t: f64) -> Result<Self> {
        crate::error::check_len(self.nodes.len(), displacement.len())?;
        let mut out = self.clone();
        for (p, d) in out.nodes.iter_mut().zip(displacement) {
            p[0] += t * d[0];
            p[1] += t * d[1];
        }
        Ok(out)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn boundary_edges(&self, side: Side) -> &[[usize; 2]] {
        &self.boundary_edges[side.index()]
    }

    /// Node index of grid point `(i, j)`.
    #[inline]
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    #[inline]
    pub fn node_ij(&self, k: usize) -> (usize, usize) {
        (k % (self.n + 1), k / (self.n + 1))
    }

    pub fn is_boundary_node(&self, k: usize) -> bool {
        let (i, j) = self.node_ij(k);
        i == 0 || j == 0 || i == self.n || j == self.n
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    /// Area and the constant gradients of the three barycentric basis functions.
    pub fn element_gradients(&self, t: usize) -> (f64, [[f64; 2]; 3]) {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        let det = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]);
        let inv = 1.0 / det;
        let g = [
            [(pb[1] - pc[1]) * inv, (pc[0] - pb[0]) * inv],
            [(pc[1] - pa[1]) * inv, (pa[0] - pc[0]) * inv],
            [(pa[1] - pb[1]) * inv, (pb[0] - pa[0]) * inv],
        ];
        (0.5 * det, g)
    }

    /// Sorted, duplicate-free indices of the nodes on any of `sides`.
    pub fn boundary_nodes(&self, sides: &[Side]) -> Vec<usize> {
        let mut marked = vec![false; self.nodes.len()];
        for &side in sides {
            for e in self.boundary_edges(side) {
                marked[e[0]] = true;
                marked[e[1]] = true;
            }
        }
        marked.iter().enumerate().filter_map(|(k, &m)| m.then_some(k)).collect()
    }

    /// Boolean mask over nodes lying on any of `sides`.
    pub fn side_mask(&self, sides: &[Side]) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        for k in self.boundary_nodes(sides) {
            mask[k] = true;
        }
        mask
    }
}

pub fn boundary_nodes(mesh: &StructuredMesh, sides: &[Side]) -> Vec<usize> {
    mesh.boundary_nodes(sides)
}
