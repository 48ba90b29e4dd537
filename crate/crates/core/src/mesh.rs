//! Fixed Eulerian background grid, Lagrangian solid meshes and the
//! interpolation/distribution operators between them.

use std::collections::hash_map::DefaultHasher;
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use thiserror::Error;

pub type Point = Vector2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point ({x}, {y}) lies outside the background domain")]
    OutOfDomain { x: f64, y: f64 },
    #[error("triangle {triangle} has non-positive area {area:.3e}")]
    InvertedTriangle { triangle: usize, area: f64 },
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Rect { x0, x1, y0, y1 }
    }

    pub fn unit() -> Self {
        Rect::new(0.0, 1.0, 0.0, 1.0)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }
}

/// Boundary side flags stored per velocity node.
pub mod side {
    pub const BOTTOM: u8 = 1;
    pub const RIGHT: u8 = 2;
    pub const TOP: u8 = 4;
    pub const LEFT: u8 = 8;
}

/// Biquadratic Lagrange shape functions on `[-1, 1]²`, local node `a + 3 b`.
pub fn q2_shape(xi: f64, eta: f64) -> ([f64; 9], [[f64; 2]; 9]) {
    let l = |t: f64| [0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)];
    let dl = |t: f64| [t - 0.5, -2.0 * t, t + 0.5];
    let (lx, ly, dx, dy) = (l(xi), l(eta), dl(xi), dl(eta));
    let mut phi = [0.0; 9];
    let mut grad = [[0.0; 2]; 9];
    for b in 0..3 {
        for a in 0..3 {
            phi[a + 3 * b] = lx[a] * ly[b];
            grad[a + 3 * b] = [dx[a] * ly[b], lx[a] * dy[b]];
        }
    }
    (phi, grad)
}

/// Bilinear shape functions on `[-1, 1]²`, local node `a + 2 b`.
pub fn q1_shape(xi: f64, eta: f64) -> ([f64; 4], [[f64; 2]; 4]) {
    let l = |t: f64| [0.5 * (1.0 - t), 0.5 * (1.0 + t)];
    let dl = [-0.5, 0.5];
    let (lx, ly) = (l(xi), l(eta));
    let mut phi = [0.0; 4];
    let mut grad = [[0.0; 2]; 4];
    for b in 0..2 {
        for a in 0..2 {
            phi[a + 2 * b] = lx[a] * ly[b];
            grad[a + 2 * b] = [dl[a] * ly[b], lx[a] * dl[b]];
        }
    }
    (phi, grad)
}

/// Taylor-Hood (Q2 velocity / Q1 pressure) grid over a rectangle.
#[derive(Debug, Clone)]
pub struct BackgroundMesh {
    pub nx: usize,
    pub ny: usize,
    pub domain: Rect,
    pub hx: f64,
    pub hy: f64,
    pub velocity_nodes: Vec<Point>,
    pub pressure_nodes: Vec<Point>,
    pub velocity_elements: Vec<[usize; 9]>,
    pub pressure_elements: Vec<[usize; 4]>,
    /// OR of [`side`] flags; zero for interior nodes.
    pub boundary_tags: Vec<u8>,
}

pub fn build_background_grid(nx: usize, ny: usize, domain: Rect) -> Result<BackgroundMesh, MeshError> {
    if nx == 0 || ny == 0 {
        return Err(MeshError::InvalidArgument(format!(
            "element counts must be positive, got {nx}×{ny}"
        )));
    }
    if !(domain.x1 > domain.x0 && domain.y1 > domain.y0) {
        return Err(MeshError::InvalidArgument(format!("degenerate domain {domain:?}")));
    }
    let hx = (domain.x1 - domain.x0) / nx as f64;
    let hy = (domain.y1 - domain.y0) / ny as f64;
    let (vx, vy) = (2 * nx + 1, 2 * ny + 1);
    let mut velocity_nodes = Vec::with_capacity(vx * vy);
    let mut boundary_tags = Vec::with_capacity(vx * vy);
    for j in 0..vy {
        for i in 0..vx {
            let x = if i == vx - 1 { domain.x1 } else { domain.x0 + 0.5 * hx * i as f64 };
            let y = if j == vy - 1 { domain.y1 } else { domain.y0 + 0.5 * hy * j as f64 };
            velocity_nodes.push(Point::new(x, y));
            let mut tag = 0;
            if j == 0 {
                tag |= side::BOTTOM;
            }
            if j == vy - 1 {
                tag |= side::TOP;
            }
            if i == 0 {
                tag |= side::LEFT;
            }
            if i == vx - 1 {
                tag |= side::RIGHT;
            }
            boundary_tags.push(tag);
        }
    }
    let pressure_nodes = (0..=ny)
        .flat_map(|j| (0..=nx).map(move |i| (i, j)))
        .map(|(i, j)| velocity_nodes[2 * j * vx + 2 * i])
        .collect();
    let mut velocity_elements = Vec::with_capacity(nx * ny);
    let mut pressure_elements = Vec::with_capacity(nx * ny);
    for ey in 0..ny {
        for ex in 0..nx {
            let mut conn = [0; 9];
            for b in 0..3 {
                for a in 0..3 {
                    conn[a + 3 * b] = (2 * ey + b) * vx + 2 * ex + a;
                }
            }
            velocity_elements.push(conn);
            let mut pc = [0; 4];
            for b in 0..2 {
                for a in 0..2 {
                    pc[a + 2 * b] = (ey + b) * (nx + 1) + ex + a;
                }
            }
            pressure_elements.push(pc);
        }
    }
    Ok(BackgroundMesh {
        nx,
        ny,
        domain,
        hx,
        hy,
        velocity_nodes,
        pressure_nodes,
        velocity_elements,
        pressure_elements,
        boundary_tags,
    })
}

impl BackgroundMesh {
    pub fn num_velocity_nodes(&self) -> usize {
        self.velocity_nodes.len()
    }

    pub fn num_pressure_nodes(&self) -> usize {
        self.pressure_nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.nx * self.ny
    }

    /// Lower-left corner of element `e`.
    pub fn element_origin(&self, e: usize) -> Point {
        let (ex, ey) = (e % self.nx, e / self.nx);
        Point::new(
            self.domain.x0 + ex as f64 * self.hx,
            self.domain.y0 + ey as f64 * self.hy,
        )
    }

    pub fn element_center(&self, e: usize) -> Point {
        self.element_origin(e) + Point::new(0.5 * self.hx, 0.5 * self.hy)
    }

    /// Maps local coordinates of element `e` to physical coordinates.
    pub fn map_local(&self, e: usize, local: [f64; 2]) -> Point {
        self.element_center(e) + Point::new(0.5 * self.hx * local[0], 0.5 * self.hy * local[1])
    }

    pub fn boundary_nodes(&self, mask: u8) -> Vec<usize> {
        self.boundary_tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t & mask != 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Host element and local coordinates of `x`.
    ///
    /// Points on shared faces resolve to the lowest-index adjacent element.
    pub fn locate_point(&self, x: &Point) -> Result<(usize, [f64; 2]), MeshError> {
        if !self.domain.contains(x) || !x.x.is_finite() || !x.y.is_finite() {
            return Err(MeshError::OutOfDomain { x: x.x, y: x.y });
        }
        let axis = |v: f64, v0: f64, h: f64, n: usize| -> (usize, f64) {
            let t = (v - v0) / h;
            let k = (t.ceil() as isize - 1).clamp(0, n as isize - 1) as usize;
            let local = 2.0 * (t - k as f64) - 1.0;
            (k, local.clamp(-1.0, 1.0))
        };
        let (ex, xi) = axis(x.x, self.domain.x0, self.hx, self.nx);
        let (ey, eta) = axis(x.y, self.domain.y0, self.hy, self.ny);
        Ok((ey * self.nx + ex, [xi, eta]))
    }

    /// Evaluation record for an arbitrary point (weight set to zero).
    pub fn point_record(&self, x: &Point) -> Result<PointRecord, MeshError> {
        let (element, local) = self.locate_point(x)?;
        Ok(self.record_at(element, local, *x, 0.0))
    }

    fn record_at(&self, element: usize, local: [f64; 2], point: Point, weight: f64) -> PointRecord {
        let (phi, gref) = q2_shape(local[0], local[1]);
        let (sx, sy) = (2.0 / self.hx, 2.0 / self.hy);
        let mut grad = [[0.0; 2]; 9];
        for (g, r) in grad.iter_mut().zip(gref.iter()) {
            *g = [r[0] * sx, r[1] * sy];
        }
        PointRecord {
            element,
            nodes: self.velocity_elements[element],
            local,
            point,
            phi,
            grad,
            weight,
        }
    }
}

/// Lagrangian linear-triangle mesh of the solid.
#[derive(Debug, Clone, PartialEq)]
pub struct SolidMesh {
    pub ref_coords: Vec<Point>,
    pub cur_coords: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub anchored_nodes: Vec<usize>,
}

fn signed_area(coords: &[Point], t: &[usize; 3]) -> f64 {
    let (a, b, c) = (coords[t[0]], coords[t[1]], coords[t[2]]);
    0.5 * ((b - a).x * (c - a).y - (b - a).y * (c - a).x)
}

impl SolidMesh {
    pub fn new(coords: Vec<Point>, triangles: Vec<[usize; 3]>, anchored_nodes: Vec<usize>) -> Result<Self, MeshError> {
        let mesh = SolidMesh {
            ref_coords: coords.clone(),
            cur_coords: coords,
            triangles,
            anchored_nodes,
        };
        mesh.check_orientation()?;
        Ok(mesh)
    }

    pub fn num_nodes(&self) -> usize {
        self.cur_coords.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        signed_area(&self.cur_coords, &self.triangles[t])
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| signed_area(&self.cur_coords, t)).sum()
    }

    pub fn reference_area(&self) -> f64 {
        self.triangles.iter().map(|t| signed_area(&self.ref_coords, t)).sum()
    }

    pub fn check_orientation(&self) -> Result<(), MeshError> {
        if self.ref_coords.len() != self.cur_coords.len() {
            return Err(MeshError::InvalidArgument("reference/current node counts differ".into()));
        }
        for coords in [&self.ref_coords, &self.cur_coords] {
            for (k, t) in self.triangles.iter().enumerate() {
                let area = signed_area(coords, t);
                if !(area > 0.0) {
                    return Err(MeshError::InvertedTriangle { triangle: k, area });
                }
            }
        }
        Ok(())
    }

    pub fn displacements(&self) -> Vec<Point> {
        self.cur_coords
            .iter()
            .zip(&self.ref_coords)
            .map(|(x, x0)| x - x0)
            .collect()
    }

    /// Fingerprint of the current geometry, used to detect stale transfer maps.
    pub fn geometry_stamp(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.triangles.len().hash(&mut h);
        for p in &self.cur_coords {
            p.x.to_bits().hash(&mut h);
            p.y.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Disc triangulated by concentric rings: ring `k` carries `8k` nodes,
/// giving `8 R²` triangles for `R` rings.
pub fn build_disc_mesh(center: Point, radius: f64, target_triangles: usize) -> Result<SolidMesh, MeshError> {
    if !(radius > 0.0) {
        return Err(MeshError::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    if target_triangles < 8 {
        return Err(MeshError::InvalidArgument(format!(
            "at least 8 triangles are needed for one ring, got {target_triangles}"
        )));
    }
    let rings = ((target_triangles as f64 / 8.0).sqrt().round() as usize).max(1);
    let mut coords = vec![center];
    let mut ring_start = vec![0usize];
    for k in 1..=rings {
        ring_start.push(coords.len());
        let r = radius * k as f64 / rings as f64;
        let m = 8 * k;
        for j in 0..m {
            let th = 2.0 * PI * j as f64 / m as f64;
            coords.push(center + Point::new(r * th.cos(), r * th.sin()));
        }
    }
    let mut triangles = Vec::with_capacity(8 * rings * rings);
    for j in 0..8 {
        triangles.push([0, ring_start[1] + j, ring_start[1] + (j + 1) % 8]);
    }
    for k in 2..=rings {
        let (a, b) = (8 * (k - 1), 8 * k);
        let (sa, sb) = (ring_start[k - 1], ring_start[k]);
        let (mut i, mut j) = (0, 0);
        while i < a || j < b {
            let next_in = (i + 1) as f64 / a as f64;
            let next_out = (j + 1) as f64 / b as f64;
            if i < a && (j == b || next_in < next_out) {
                triangles.push([sa + i, sb + j % b, sa + (i + 1) % a]);
                i += 1;
            } else {
                triangles.push([sa + i % a, sb + j, sb + (j + 1) % b]);
                j += 1;
            }
        }
    }
    SolidMesh::new(coords, triangles, Vec::new())
}

/// Structured triangulation of `[base_x, base_x + w] × [0, h]`; nodes on `y = 0` are anchored.
pub fn build_leaflet_mesh(base_x: f64, w: f64, h: f64, target_triangles: usize) -> Result<SolidMesh, MeshError> {
    if !(w > 0.0 && h > 0.0) {
        return Err(MeshError::InvalidArgument(format!("leaflet size must be positive, got {w}×{h}")));
    }
    let target = target_triangles.max(2) as f64;
    let nw = ((target * w / (2.0 * h)).sqrt() - 1e-9).ceil().max(1.0) as usize;
    let nh = ((target / (2.0 * nw as f64)).round() as usize).max(1);
    let mut coords = Vec::with_capacity((nw + 1) * (nh + 1));
    for j in 0..=nh {
        for i in 0..=nw {
            let x = if i == nw { base_x + w } else { base_x + w * i as f64 / nw as f64 };
            let y = if j == nh { h } else { h * j as f64 / nh as f64 };
            coords.push(Point::new(x, y));
        }
    }
    let id = |i: usize, j: usize| j * (nw + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nw * nh);
    for j in 0..nh {
        for i in 0..nw {
            triangles.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            triangles.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    let anchored = (0..=nw).map(|i| id(i, 0)).collect();
    SolidMesh::new(coords, triangles, anchored)
}

/// Quadrature on triangles, as barycentric points with weights summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriangleQuadrature {
    /// centroid, exact for degree 1
    OnePoint,
    /// edge-interior points, exact for degree 2
    ThreePoint,
}

impl TriangleQuadrature {
    pub fn from_points(n: usize) -> Result<Self, MeshError> {
        match n {
            1 => Ok(TriangleQuadrature::OnePoint),
            3 => Ok(TriangleQuadrature::ThreePoint),
            _ => Err(MeshError::InvalidArgument(format!(
                "unsupported triangle rule with {n} points (use 1 or 3)"
            ))),
        }
    }

    pub fn points(&self) -> &'static [([f64; 3], f64)] {
        const ONE: [([f64; 3], f64); 1] = [([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 1.0)];
        const THREE: [([f64; 3], f64); 3] = [
            ([2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], 1.0 / 3.0),
            ([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], 1.0 / 3.0),
            ([1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0], 1.0 / 3.0),
        ];
        match self {
            TriangleQuadrature::OnePoint => &ONE,
            TriangleQuadrature::ThreePoint => &THREE,
        }
    }
}

/// Background shape data evaluated at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointRecord {
    pub element: usize,
    pub nodes: [usize; 9],
    pub local: [f64; 2],
    pub point: Point,
    pub phi: [f64; 9],
    /// gradients with respect to physical coordinates
    pub grad: [[f64; 2]; 9],
    /// quadrature weight times triangle area (zero for plain evaluation points)
    pub weight: f64,
}

impl PointRecord {
    /// Interpolated value and gradient `G_ij = ∂u_i/∂x_j` of an interleaved velocity field.
    pub fn interp(&self, dofs: &[f64]) -> (Vector2<f64>, Matrix2<f64>) {
        let mut u = Vector2::zeros();
        let mut g = Matrix2::zeros();
        for k in 0..9 {
            let n = self.nodes[k];
            let (ux, uy) = (dofs[2 * n], dofs[2 * n + 1]);
            u.x += self.phi[k] * ux;
            u.y += self.phi[k] * uy;
            g[(0, 0)] += ux * self.grad[k][0];
            g[(0, 1)] += ux * self.grad[k][1];
            g[(1, 0)] += uy * self.grad[k][0];
            g[(1, 1)] += uy * self.grad[k][1];
        }
        (u, g)
    }

    /// Adds `φ_i(x) · load` to every velocity dof of the host element.
    pub fn distribute(&self, load: &Vector2<f64>, out: &mut [f64]) {
        for k in 0..9 {
            let n = self.nodes[k];
            out[2 * n] += self.phi[k] * load.x;
            out[2 * n + 1] += self.phi[k] * load.y;
        }
    }

    /// Adds `T : ∇φ_i` to every velocity dof; the adjoint of the gradient in [`interp`](Self::interp).
    pub fn distribute_gradient(&self, t: &Matrix2<f64>, out: &mut [f64]) {
        for k in 0..9 {
            let n = self.nodes[k];
            let [gx, gy] = self.grad[k];
            out[2 * n] += t[(0, 0)] * gx + t[(0, 1)] * gy;
            out[2 * n + 1] += t[(1, 0)] * gx + t[(1, 1)] * gy;
        }
    }
}

/// Checked interpolation of a background velocity vector.
pub fn interp_at(
    record: &PointRecord,
    bg: &BackgroundMesh,
    dofs: &[f64],
) -> Result<(Vector2<f64>, Matrix2<f64>), MeshError> {
    check_dofs(bg, dofs.len())?;
    Ok(record.interp(dofs))
}

/// Checked distribution of a point load; returns a dense background vector.
pub fn distribute_to_background(
    record: &PointRecord,
    bg: &BackgroundMesh,
    load: &Vector2<f64>,
) -> Result<Vec<f64>, MeshError> {
    let mut out = vec![0.0; 2 * bg.num_velocity_nodes()];
    record.distribute(load, &mut out);
    Ok(out)
}

fn check_dofs(bg: &BackgroundMesh, len: usize) -> Result<(), MeshError> {
    let expected = 2 * bg.num_velocity_nodes();
    if len != expected {
        return Err(MeshError::InvalidArgument(format!(
            "velocity vector has {len} entries, expected {expected}"
        )));
    }
    Ok(())
}

/// Records at every solid quadrature point, ordered by (triangle, point).
#[derive(Debug, Clone)]
pub struct TransferMap {
    pub records: Vec<PointRecord>,
    pub points_per_triangle: usize,
    /// geometry stamp of the solid mesh this map was built from
    pub stamp: u64,
}

impl TransferMap {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.records.iter().map(|r| r.weight).sum()
    }

    /// Quadrature point positions (barycentric combos of current triangle nodes).
    pub fn points(&self) -> impl Iterator<Item = &Point> {
        self.records.iter().map(|r| &r.point)
    }
}

pub fn build_transfer_map(
    bg: &BackgroundMesh,
    solid: &SolidMesh,
    rule: TriangleQuadrature,
) -> Result<TransferMap, MeshError> {
    let pts = rule.points();
    let per_tri: Vec<Result<Vec<PointRecord>, MeshError>> = solid
        .triangles
        .par_iter()
        .map(|t| {
            // |det J|: a folded triangle still adds a non-negative contribution
            let area = signed_area(&solid.cur_coords, t).abs();
            let (a, b, c) = (solid.cur_coords[t[0]], solid.cur_coords[t[1]], solid.cur_coords[t[2]]);
            pts.iter()
                .map(|(bary, w)| {
                    let x = a * bary[0] + b * bary[1] + c * bary[2];
                    let (e, local) = bg.locate_point(&x)?;
                    Ok(bg.record_at(e, local, x, w * area))
                })
                .collect()
        })
        .collect();
    let mut records = Vec::with_capacity(solid.num_triangles() * pts.len());
    for r in per_tri {
        records.extend(r?);
    }
    Ok(TransferMap {
        records,
        points_per_triangle: pts.len(),
        stamp: solid.geometry_stamp(),
    })
}

/// Evaluation records at the solid nodes (used to move the mesh and to sample velocities).
pub fn node_records(bg: &BackgroundMesh, solid: &SolidMesh) -> Result<Vec<PointRecord>, MeshError> {
    solid.cur_coords.iter().map(|x| bg.point_record(x)).collect()
}
