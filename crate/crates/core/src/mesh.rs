//! Structured triangulations of axis-aligned rectangles, red refinement, and
//! the coarse-parent lookup used by the two-level solver.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned rectangle [x0, x1] x [y0, y1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn unit_square() -> Self {
        Self { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diameter(&self) -> f64 {
        self.width().hypot(self.height())
    }
}

/// Which side of the rectangle a boundary edge lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundarySide {
    Bottom,
    Right,
    Top,
    Left,
}

impl BoundarySide {
    /// True for the sides whose tangent is the x axis.
    pub fn is_horizontal(&self) -> bool {
        matches!(self, BoundarySide::Bottom | BoundarySide::Top)
    }
}

/// Counterclockwise triangle given by indices into the mesh vertex list.
#[derive(Debug, Clone, Copy)]
pub struct Triangle {
    pub vertex_ids: [usize; 3],
}

#[derive(Debug)]
pub struct Mesh {
    pub vertices: Vec<Point2>,
    pub triangles: Vec<Triangle>,
    /// Boundary edges as (lo, hi) vertex pairs plus the side they lie on.
    pub boundary_edges: Vec<([usize; 2], BoundarySide)>,
    /// Maximum edge length over all triangles.
    pub mesh_size: f64,
    pub domain: Rect,
}

/// Unique (undirected) edge list plus the per-triangle local-edge map.
/// Local edge `k` of a triangle is the edge opposite local vertex `k`.
#[derive(Debug)]
pub struct EdgeTopology {
    /// Edges as (lo, hi) vertex index pairs.
    pub edges: Vec<[usize; 2]>,
    /// Global edge ids of the three local edges of each triangle.
    pub tri_edges: Vec<[usize; 3]>,
    /// Number of triangles incident to each edge (1 = boundary, 2 = interior).
    pub edge_valence: Vec<u8>,
}

impl Mesh {
    pub fn from_parts(domain: Rect, vertices: Vec<Point2>, triangles: Vec<Triangle>) -> Result<Self> {
        for (i, t) in triangles.iter().enumerate() {
            let area = signed_area(
                vertices[t.vertex_ids[0]],
                vertices[t.vertex_ids[1]],
                vertices[t.vertex_ids[2]],
            );
            if !(area > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "triangle {i} has nonpositive signed area {area}"
                )));
            }
        }
        let mut mesh = Mesh {
            vertices,
            triangles,
            boundary_edges: Vec::new(),
            mesh_size: 0.0,
            domain,
        };
        mesh.mesh_size = mesh
            .triangles
            .iter()
            .map(|t| mesh.longest_edge(t))
            .fold(0.0, f64::max);
        mesh.boundary_edges = mesh.classify_boundary_edges()?;
        Ok(mesh)
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle_vertices(&self, t: usize) -> [Point2; 3] {
        let ids = self.triangles[t].vertex_ids;
        [self.vertices[ids[0]], self.vertices[ids[1]], self.vertices[ids[2]]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(t);
        signed_area(a, b, c)
    }

    pub fn centroid(&self, t: usize) -> Point2 {
        let [a, b, c] = self.triangle_vertices(t);
        Point2::new((a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0)
    }

    fn longest_edge(&self, t: &Triangle) -> f64 {
        let [a, b, c] = [
            self.vertices[t.vertex_ids[0]],
            self.vertices[t.vertex_ids[1]],
            self.vertices[t.vertex_ids[2]],
        ];
        dist(a, b).max(dist(b, c)).max(dist(c, a))
    }

    pub fn edge_topology(&self) -> EdgeTopology {
        let mut index: HashMap<[usize; 2], usize> = HashMap::new();
        let mut edges = Vec::new();
        let mut edge_valence: Vec<u8> = Vec::new();
        let mut tri_edges = Vec::with_capacity(self.triangles.len());
        for t in &self.triangles {
            let v = t.vertex_ids;
            let mut ids = [0usize; 3];
            for k in 0..3 {
                let (a, b) = (v[(k + 1) % 3], v[(k + 2) % 3]);
                let key = [a.min(b), a.max(b)];
                let id = *index.entry(key).or_insert_with(|| {
                    edges.push(key);
                    edge_valence.push(0);
                    edges.len() - 1
                });
                edge_valence[id] += 1;
                ids[k] = id;
            }
            tri_edges.push(ids);
        }
        EdgeTopology { edges, tri_edges, edge_valence }
    }

    fn classify_boundary_edges(&self) -> Result<Vec<([usize; 2], BoundarySide)>> {
        let topo = self.edge_topology();
        let tol = 1e-12 * self.domain.diameter().max(1.0);
        let mut out = Vec::new();
        for (e, valence) in topo.edges.iter().zip(&topo.edge_valence) {
            match valence {
                2 => continue,
                1 => {
                    let (a, b) = (self.vertices[e[0]], self.vertices[e[1]]);
                    let side = if (a.y - self.domain.y0).abs() <= tol && (b.y - self.domain.y0).abs() <= tol {
                        BoundarySide::Bottom
                    } else if (a.y - self.domain.y1).abs() <= tol && (b.y - self.domain.y1).abs() <= tol {
                        BoundarySide::Top
                    } else if (a.x - self.domain.x0).abs() <= tol && (b.x - self.domain.x0).abs() <= tol {
                        BoundarySide::Left
                    } else if (a.x - self.domain.x1).abs() <= tol && (b.x - self.domain.x1).abs() <= tol {
                        BoundarySide::Right
                    } else {
                        return Err(Error::InvalidArgument(format!(
                            "boundary edge ({}, {}) does not lie on a rectangle side",
                            e[0], e[1]
                        )));
                    };
                    out.push((*e, side));
                }
                v => {
                    return Err(Error::InvalidArgument(format!(
                        "non-conforming mesh: edge ({}, {}) shared by {v} triangles",
                        e[0], e[1]
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Plain-text dump: "v x y" per vertex, "t i j k" per triangle,
    /// "b i j" per boundary edge.
    pub fn write_dump(&self, mut w: impl Write) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {:.17e} {:.17e}", v.x, v.y)?;
        }
        for t in &self.triangles {
            writeln!(w, "t {} {} {}", t.vertex_ids[0], t.vertex_ids[1], t.vertex_ids[2])?;
        }
        for (e, _) in &self.boundary_edges {
            writeln!(w, "b {} {}", e[0], e[1])?;
        }
        Ok(())
    }
}

fn signed_area(a: Point2, b: Point2, c: Point2) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
}

fn dist(a: Point2, b: Point2) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Structured mesh of a rectangle: an nx-by-ny grid of cells, each split along
/// the same diagonal. The grid is chosen so the cell spacing is at most
/// `target_h` in each direction.
pub fn generate_rect_mesh(domain: Rect, target_h: f64) -> Result<Arc<Mesh>> {
    if !(target_h > 0.0) || !target_h.is_finite() {
        return Err(Error::InvalidArgument(format!("target_h must be positive, got {target_h}")));
    }
    if !(domain.width() > 0.0) || !(domain.height() > 0.0) {
        return Err(Error::InvalidArgument(format!("degenerate rectangle {domain:?}")));
    }
    let nx = (domain.width() / target_h).ceil().max(1.0) as usize;
    let ny = (domain.height() / target_h).ceil().max(1.0) as usize;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = domain.x0 + domain.width() * (i as f64) / (nx as f64);
            let y = domain.y0 + domain.height() * (j as f64) / (ny as f64);
            vertices.push(Point2::new(x, y));
        }
    }
    let vid = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            // Diagonal from lower-left to upper-right of each cell.
            let (a, b, c, d) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
            triangles.push(Triangle { vertex_ids: [a, b, c] });
            triangles.push(Triangle { vertex_ids: [a, c, d] });
        }
    }
    Ok(Arc::new(Mesh::from_parts(domain, vertices, triangles)?))
}

#[derive(Debug)]
pub struct MeshHierarchy {
    pub coarse: Arc<Mesh>,
    pub fine: Arc<Mesh>,
    /// Coarse triangle id owning each fine triangle.
    pub parent_of: Vec<usize>,
}

/// Splits every triangle into 4 congruent children through edge midpoints.
pub fn red_refine(mesh: &Arc<Mesh>) -> Result<MeshHierarchy> {
    let topo = mesh.edge_topology();
    let mut vertices = mesh.vertices.clone();
    let mut midpoint = vec![0usize; topo.edges.len()];
    for (e, slot) in topo.edges.iter().zip(&mut midpoint) {
        let (a, b) = (mesh.vertices[e[0]], mesh.vertices[e[1]]);
        vertices.push(Point2::new(0.5 * (a.x + b.x), 0.5 * (a.y + b.y)));
        *slot = vertices.len() - 1;
    }
    let mut triangles = Vec::with_capacity(4 * mesh.n_triangles());
    let mut parent_of = Vec::with_capacity(4 * mesh.n_triangles());
    for (p, t) in mesh.triangles.iter().enumerate() {
        let [v0, v1, v2] = t.vertex_ids;
        let e = topo.tri_edges[p];
        let (m0, m1, m2) = (midpoint[e[0]], midpoint[e[1]], midpoint[e[2]]);
        for child in [[v0, m2, m1], [v1, m0, m2], [v2, m1, m0], [m0, m1, m2]] {
            triangles.push(Triangle { vertex_ids: child });
            parent_of.push(p);
        }
    }
    let fine = Arc::new(Mesh::from_parts(mesh.domain, vertices, triangles)?);
    Ok(MeshHierarchy { coarse: Arc::clone(mesh), fine, parent_of })
}

impl MeshHierarchy {
    /// Composes `self` (coarse -> mid) with `next` (mid -> fine).
    pub fn compose(self, next: MeshHierarchy) -> MeshHierarchy {
        debug_assert!(Arc::ptr_eq(&self.fine, &next.coarse));
        let parent_of = next.parent_of.iter().map(|&m| self.parent_of[m]).collect();
        MeshHierarchy { coarse: self.coarse, fine: next.fine, parent_of }
    }

    /// Refines `levels` times (>= 1), composing parent maps across levels.
    pub fn build(coarse: &Arc<Mesh>, levels: usize) -> Result<MeshHierarchy> {
        if levels == 0 {
            return Err(Error::InvalidArgument("refinement levels must be >= 1".into()));
        }
        let mut hierarchy = red_refine(coarse)?;
        for _ in 1..levels {
            let next = red_refine(&hierarchy.fine)?;
            hierarchy = hierarchy.compose(next);
        }
        Ok(hierarchy)
    }
}

/// Coarse triangles sorted by centroid x-value; built once, queried many times.
#[derive(Debug)]
pub struct CentroidIndex {
    /// Triangle ids ordered by centroid x.
    order: Vec<usize>,
    /// Centroid x-values in the same order.
    xs: Vec<f64>,
}

impl CentroidIndex {
    pub fn new(mesh: &Mesh) -> Self {
        let mut order: Vec<usize> = (0..mesh.n_triangles()).collect();
        order.sort_by(|&a, &b| mesh.centroid(a).x.total_cmp(&mesh.centroid(b).x));
        let xs = order.iter().map(|&t| mesh.centroid(t).x).collect();
        Self { order, xs }
    }

    /// Candidate triangles whose centroid x lies within `window` of `x`.
    fn candidates(&self, x: f64, window: f64) -> &[usize] {
        let lo = self.xs.partition_point(|&cx| cx < x - window);
        let hi = self.xs.partition_point(|&cx| cx <= x + window);
        &self.order[lo..hi]
    }
}

/// Binary search on sorted centroids, then point-in-triangle scan over the
/// strip of candidates whose centroid x is within the coarse mesh size.
pub fn find_parent(fine_centroid: Point2, coarse: &Mesh, index: &CentroidIndex) -> Result<usize> {
    let window = coarse.mesh_size * (1.0 + 1e-12) + 1e-300;
    for &t in index.candidates(fine_centroid.x, window) {
        if point_in_triangle(fine_centroid, &coarse.triangles[t], coarse) {
            return Ok(t);
        }
    }
    Err(Error::LookupFailure { x: fine_centroid.x, y: fine_centroid.y })
}

/// Closed-triangle membership by signed sub-areas, with a tolerance scaled by
/// the triangle area.
pub fn point_in_triangle(p: Point2, t: &Triangle, mesh: &Mesh) -> bool {
    let [a, b, c] = [
        mesh.vertices[t.vertex_ids[0]],
        mesh.vertices[t.vertex_ids[1]],
        mesh.vertices[t.vertex_ids[2]],
    ];
    let area = signed_area(a, b, c);
    let s0 = signed_area(p, b, c);
    let s1 = signed_area(a, p, c);
    let s2 = signed_area(a, b, p);
    let tol = -1e-12 * area;
    s0 >= tol && s1 >= tol && s2 >= tol
}
