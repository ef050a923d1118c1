//! Hybrid geometry: a structured finite-difference grid covering the whole
//! box `Ω`, a conforming tetrahedral mesh covering the inner box `Ω_FEM`, the
//! partition of `∂Ω` into top/bottom/lateral parts and the node maps that glue
//! the two discretizations together.
//!
//! The inner mesh starts as every hexahedral cell of the grid split into six
//! tetrahedra along the main diagonal. With that split, the P1 stiffness of
//! the Laplacian reproduces the 7-point difference stencil, so nodes of the
//! two discretizations that coincide can exchange values by plain copies.

mod locate;
mod refine;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cross3, norm3, sub3, Real, Vec3};

pub use locate::{barycentric, interpolate_nodal, locate_point, NodalTransfer, PointLocator};
pub use refine::{conformity_violations, refine_local, uniform_refine};

/// Axis-aligned geometry of the hybrid domain, in dimensionless length units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct DomainSpec<S> {
    pub omega_lo: Vec3<S>,
    pub omega_hi: Vec3<S>,
    pub fem_lo: Vec3<S>,
    pub fem_hi: Vec3<S>,
    pub h_fdm: S,
}

impl<S: Real> DomainSpec<S> {
    /// The setup of the melanoma experiments: `Ω = (−2,12)³`, `Ω_FEM = (0,10)³`.
    pub fn melanoma(h_fdm: S) -> Self {
        Self {
            omega_lo: [S::lit(-2.0); 3],
            omega_hi: [S::lit(12.0); 3],
            fem_lo: [S::zero(); 3],
            fem_hi: [S::lit(10.0); 3],
            h_fdm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.h_fdm;
        if !(h > S::zero()) || !h.is_finite() {
            return Err(Error::Config(format!("grid spacing must be positive, got {h}")));
        }
        for d in 0..3 {
            if !(self.fem_lo[d] > self.omega_lo[d] && self.fem_hi[d] < self.omega_hi[d]) {
                return Err(Error::Config(format!(
                    "FEM box must lie strictly inside Ω along axis {d}"
                )));
            }
            if !(self.fem_hi[d] > self.fem_lo[d]) {
                return Err(Error::Config(format!("empty FEM box along axis {d}")));
            }
            for (what, len) in [
                ("Ω extent", self.omega_hi[d] - self.omega_lo[d]),
                ("FEM extent", self.fem_hi[d] - self.fem_lo[d]),
                ("FEM offset", self.fem_lo[d] - self.omega_lo[d]),
            ] {
                let cells = len / h;
                if (cells - cells.round()).abs() > S::lit(1e-6) * cells.max(S::one()) {
                    return Err(Error::Config(format!(
                        "{what} along axis {d} is not a multiple of the spacing {h}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn cells(&self, lo: S, hi: S) -> usize {
        ((hi - lo) / self.h_fdm).round().to_usize().unwrap_or(0)
    }
}

/// Uniform node lattice with linear indexing `i + nx·(j + ny·k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredGrid<S> {
    pub dims: [usize; 3],
    pub spacing: S,
    pub origin: Vec3<S>,
}

impl<S: Real> StructuredGrid<S> {
    pub fn new(lo: Vec3<S>, hi: Vec3<S>, spacing: S) -> Self {
        let mut dims = [0; 3];
        for d in 0..3 {
            dims[d] = ((hi[d] - lo[d]) / spacing).round().to_usize().unwrap_or(0) + 1;
        }
        Self {
            dims,
            spacing,
            origin: lo,
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn ijk(&self, id: usize) -> [usize; 3] {
        let i = id % self.dims[0];
        let rest = id / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn coords(&self, id: usize) -> Vec3<S> {
        let [i, j, k] = self.ijk(id);
        [
            self.origin[0] + S::from_count(i) * self.spacing,
            self.origin[1] + S::from_count(j) * self.spacing,
            self.origin[2] + S::from_count(k) * self.spacing,
        ]
    }

    /// Node id of the lattice point at `x`, if `x` is (numerically) a lattice point.
    pub fn node_at(&self, x: Vec3<S>) -> Option<usize> {
        let mut ijk = [0usize; 3];
        for d in 0..3 {
            let t = (x[d] - self.origin[d]) / self.spacing;
            let r = t.round();
            if (t - r).abs() > S::lit(1e-7) || r < S::zero() {
                return None;
            }
            let r = r.to_usize()?;
            if r >= self.dims[d] {
                return None;
            }
            ijk[d] = r;
        }
        Some(self.index(ijk[0], ijk[1], ijk[2]))
    }
}

/// Tag carried by a boundary facet of a tetrahedral mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BoundaryTag(pub u8);

impl BoundaryTag {
    pub const X_LO: Self = Self(0);
    pub const X_HI: Self = Self(1);
    pub const Y_LO: Self = Self(2);
    pub const Y_HI: Self = Self(3);
    pub const Z_LO: Self = Self(4);
    pub const Z_HI: Self = Self(5);
    pub const UNTAGGED: Self = Self(u8::MAX);
}

/// Green-closure family membership: the vertices of the element that was
/// bisected to produce this one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GreenFamily {
    pub parent_vertices: [usize; 4],
    pub parent_level: u32,
}

/// Conforming tetrahedral mesh with refinement history.
#[derive(Clone, Debug)]
pub struct TetraMesh<S> {
    pub(crate) vertices: Vec<Vec3<S>>,
    pub(crate) tets: Vec<[usize; 4]>,
    pub(crate) boundary_facets: Vec<([usize; 3], BoundaryTag)>,
    pub(crate) level: Vec<u32>,
    pub(crate) parent: Vec<Option<usize>>,
    pub(crate) green: Vec<Option<GreenFamily>>,
    /// Edge (sorted vertex pair) to the vertex created at its midpoint.
    pub(crate) midpoints: HashMap<(usize, usize), usize>,
}

pub(crate) const LOCAL_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

#[inline]
pub(crate) fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

#[inline]
pub(crate) fn face_key(mut f: [usize; 3]) -> [usize; 3] {
    f.sort_unstable();
    f
}

pub(crate) fn signed_volume<S: Real>(p: &[Vec3<S>; 4]) -> S {
    let a = sub3(p[1], p[0]);
    let b = sub3(p[2], p[0]);
    let c = sub3(p[3], p[0]);
    let n = cross3(a, b);
    (n[0] * c[0] + n[1] * c[1] + n[2] * c[2]) / S::lit(6.0)
}

pub(crate) fn triangle_area<S: Real>(a: Vec3<S>, b: Vec3<S>, c: Vec3<S>) -> S {
    norm3(cross3(sub3(b, a), sub3(c, a))) * S::lit(0.5)
}

impl<S: Real> TetraMesh<S> {
    /// Builds a mesh from raw connectivity. Negatively oriented elements are
    /// reoriented; degenerate ones are rejected. Boundary facets are tagged by
    /// `tag_of`.
    pub fn new(
        vertices: Vec<Vec3<S>>,
        tets: Vec<[usize; 4]>,
        tag_of: impl Fn([Vec3<S>; 3]) -> BoundaryTag,
    ) -> Result<Self> {
        let n = tets.len();
        let mut mesh = Self {
            vertices,
            tets,
            boundary_facets: Vec::new(),
            level: vec![0; n],
            parent: vec![None; n],
            green: vec![None; n],
            midpoints: HashMap::new(),
        };
        mesh.orient()?;
        let facets = mesh.compute_boundary_faces();
        mesh.boundary_facets = facets
            .into_iter()
            .map(|f| {
                let p = [mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]];
                (f, tag_of(p))
            })
            .collect();
        Ok(mesh)
    }

    /// Box `[lo, hi]` with spacing `h`, every cell split into six tetrahedra
    /// sharing the cell diagonal from its lowest to its highest corner.
    pub fn structured_box(lo: Vec3<S>, hi: Vec3<S>, h: S) -> Result<Self> {
        let grid = StructuredGrid::new(lo, hi, h);
        let [nx, ny, nz] = grid.dims;
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(Error::Config("box must contain at least one cell".into()));
        }
        let vertices: Vec<_> = (0..grid.len()).map(|id| grid.coords(id)).collect();
        let mut tets = Vec::with_capacity(6 * (nx - 1) * (ny - 1) * (nz - 1));
        const PERMS: [[usize; 3]; 6] = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for k in 0..nz - 1 {
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    for perm in PERMS {
                        let mut c = [i, j, k];
                        let mut tet = [grid.index(i, j, k), 0, 0, 0];
                        for (slot, axis) in perm.into_iter().enumerate() {
                            c[axis] += 1;
                            tet[slot + 1] = grid.index(c[0], c[1], c[2]);
                        }
                        tets.push(tet);
                    }
                }
            }
        }
        Self::new(vertices, tets, box_tagger(lo, hi, h))
    }

    fn orient(&mut self) -> Result<()> {
        for k in 0..self.tets.len() {
            let vol = signed_volume(&self.tet_points(k));
            if !(vol.abs() > S::epsilon() * S::lit(16.0) * self.longest_edge(k).powi(3)) {
                return Err(Error::DegenerateElement {
                    element: k,
                    volume: vol.as_f64(),
                });
            }
            if vol < S::zero() {
                self.tets[k].swap(2, 3);
            }
        }
        Ok(())
    }

    pub(crate) fn compute_boundary_faces(&self) -> Vec<[usize; 3]> {
        let mut count: HashMap<[usize; 3], u32> = HashMap::with_capacity(self.tets.len() * 2);
        for t in &self.tets {
            for f in tet_faces(t) {
                *count.entry(face_key(f)).or_insert(0) += 1;
            }
        }
        let mut faces: Vec<_> = count
            .into_iter()
            .filter_map(|(f, c)| (c == 1).then_some(f))
            .collect();
        faces.sort_unstable();
        faces
    }

    pub fn vertices(&self) -> &[Vec3<S>] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn boundary_facets(&self) -> &[([usize; 3], BoundaryTag)] {
        &self.boundary_facets
    }

    pub fn levels(&self) -> &[u32] {
        &self.level
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn is_green(&self, k: usize) -> bool {
        self.green[k].is_some()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    #[inline]
    pub fn tet_points(&self, k: usize) -> [Vec3<S>; 4] {
        let t = self.tets[k];
        [
            self.vertices[t[0]],
            self.vertices[t[1]],
            self.vertices[t[2]],
            self.vertices[t[3]],
        ]
    }

    pub fn volume(&self, k: usize) -> S {
        signed_volume(&self.tet_points(k))
    }

    pub fn longest_edge(&self, k: usize) -> S {
        let p = self.tet_points(k);
        LOCAL_EDGES
            .iter()
            .map(|&(a, b)| norm3(sub3(p[a], p[b])))
            .fold(S::zero(), S::max)
    }

    pub fn centroid(&self, k: usize) -> Vec3<S> {
        let p = self.tet_points(k);
        let q = S::lit(0.25);
        [
            (p[0][0] + p[1][0] + p[2][0] + p[3][0]) * q,
            (p[0][1] + p[1][1] + p[2][1] + p[3][1]) * q,
            (p[0][2] + p[1][2] + p[2][2] + p[3][2]) * q,
        ]
    }

    pub fn total_volume(&self) -> S {
        (0..self.n_tets()).map(|k| self.volume(k)).sum()
    }

    /// Lumped (row-sum) P1 mass: a quarter of each incident element volume.
    pub fn lumped_mass(&self) -> Vec<S> {
        let mut m = vec![S::zero(); self.n_vertices()];
        let q = S::lit(0.25);
        for k in 0..self.n_tets() {
            let v = self.volume(k) * q;
            for &i in &self.tets[k] {
                m[i] += v;
            }
        }
        m
    }

    /// All element ids incident to each vertex.
    pub fn vertex_to_tets(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_vertices()];
        for (k, t) in self.tets.iter().enumerate() {
            for &i in t {
                adj[i].push(k);
            }
        }
        adj
    }

    pub fn bounding_box(&self) -> (Vec3<S>, Vec3<S>) {
        let mut lo = [S::infinity(); 3];
        let mut hi = [S::neg_infinity(); 3];
        for p in &self.vertices {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }
}

pub(crate) fn tet_faces(t: &[usize; 4]) -> [[usize; 3]; 4] {
    [
        [t[1], t[2], t[3]],
        [t[0], t[2], t[3]],
        [t[0], t[1], t[3]],
        [t[0], t[1], t[2]],
    ]
}

/// Tags facets lying on the faces of the box `[lo, hi]`.
pub fn box_tagger<S: Real>(lo: Vec3<S>, hi: Vec3<S>, h: S) -> impl Fn([Vec3<S>; 3]) -> BoundaryTag {
    let tol = h * S::lit(1e-9);
    move |p: [Vec3<S>; 3]| {
        for d in 0..3 {
            if p.iter().all(|q| (q[d] - lo[d]).abs() <= tol) {
                return BoundaryTag(2 * d as u8);
            }
            if p.iter().all(|q| (q[d] - hi[d]).abs() <= tol) {
                return BoundaryTag(2 * d as u8 + 1);
            }
        }
        BoundaryTag::UNTAGGED
    }
}

/// Piecewise-constant element diameter, `h|_K = h_K`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshSizeField<S> {
    pub h: Vec<S>,
}

impl<S: Real> MeshSizeField<S> {
    pub fn max(&self) -> S {
        self.h.iter().copied().fold(S::zero(), S::max)
    }

    pub fn min(&self) -> S {
        self.h.iter().copied().fold(S::infinity(), S::min)
    }
}

/// Longest edge of every element.
pub fn mesh_size<S: Real>(mesh: &TetraMesh<S>) -> MeshSizeField<S> {
    MeshSizeField {
        h: (0..mesh.n_tets()).map(|k| mesh.longest_edge(k)).collect(),
    }
}

/// Partition of `∂Ω`: `∂₁Ω` top (`x₃` max), `∂₂Ω` bottom, `∂₃Ω` the four sides.
/// Facets are the boundary quads of the structured grid.
#[derive(Clone, Debug, Default)]
pub struct BoundaryPartition {
    pub top_nodes: Vec<usize>,
    pub bottom_nodes: Vec<usize>,
    pub lateral_nodes: Vec<usize>,
    pub top_facets: Vec<[usize; 4]>,
    pub bottom_facets: Vec<[usize; 4]>,
    pub lateral_facets: Vec<[usize; 4]>,
}

impl BoundaryPartition {
    pub fn new<S: Real>(grid: &StructuredGrid<S>) -> Self {
        let [nx, ny, nz] = grid.dims;
        let mut part = Self::default();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let id = grid.index(i, j, k);
                    if k == nz - 1 {
                        part.top_nodes.push(id);
                    } else if k == 0 {
                        part.bottom_nodes.push(id);
                    } else if i == 0 || i == nx - 1 || j == 0 || j == ny - 1 {
                        part.lateral_nodes.push(id);
                    }
                }
            }
        }
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let q = |k| {
                    [
                        grid.index(i, j, k),
                        grid.index(i + 1, j, k),
                        grid.index(i + 1, j + 1, k),
                        grid.index(i, j + 1, k),
                    ]
                };
                part.bottom_facets.push(q(0));
                part.top_facets.push(q(nz - 1));
            }
        }
        for k in 0..nz - 1 {
            for j in 0..ny - 1 {
                for i in [0, nx - 1] {
                    part.lateral_facets.push([
                        grid.index(i, j, k),
                        grid.index(i, j + 1, k),
                        grid.index(i, j + 1, k + 1),
                        grid.index(i, j, k + 1),
                    ]);
                }
            }
            for i in 0..nx - 1 {
                for j in [0, ny - 1] {
                    part.lateral_facets.push([
                        grid.index(i, j, k),
                        grid.index(i + 1, j, k),
                        grid.index(i + 1, j, k + 1),
                        grid.index(i, j, k + 1),
                    ]);
                }
            }
        }
        part
    }

    pub fn n_facets(&self) -> usize {
        self.top_facets.len() + self.bottom_facets.len() + self.lateral_facets.len()
    }
}

/// Position of a FEM vertex relative to the FE/FD interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRole {
    /// On `∂Ω_FEM`: the value is copied from the coinciding grid node.
    Interface,
    /// Within one grid cell of `∂Ω_FEM`: still part of the vacuum region, its
    /// value is fed back to the coinciding grid node when there is one.
    Overlap,
    /// Interior vertex whose coefficients the inversion may change.
    Free,
}

/// A FEM vertex and the grid node at the same position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodePair {
    pub fem: usize,
    pub fd: usize,
}

/// `Ω = Ω_FDM ∪ Ω_FEM` with everything needed to step both parts together.
#[derive(Clone, Debug)]
pub struct HybridDomain<S> {
    pub spec: DomainSpec<S>,
    pub grid: StructuredGrid<S>,
    pub mesh: TetraMesh<S>,
    pub partition: BoundaryPartition,
    /// Interface vertices (on `∂Ω_FEM`) paired with grid nodes; FD → FE.
    pub overlap: Vec<NodePair>,
    /// First interior layer of grid nodes inside `Ω_FEM`; FE → FD.
    pub feedback: Vec<NodePair>,
    roles: Vec<NodeRole>,
    fd_owned: Vec<bool>,
}

/// Builds the structured grid on `Ω`, the tetrahedral mesh on `Ω_FEM`, the
/// boundary partition and the coupling maps.
pub fn build_hybrid_domain<S: Real>(spec: DomainSpec<S>) -> Result<HybridDomain<S>> {
    spec.validate()?;
    let grid = StructuredGrid::new(spec.omega_lo, spec.omega_hi, spec.h_fdm);
    let mesh = TetraMesh::structured_box(spec.fem_lo, spec.fem_hi, spec.h_fdm)?;
    debug_assert_eq!(
        mesh.n_tets(),
        6 * (0..3).map(|d| spec.cells(spec.fem_lo[d], spec.fem_hi[d])).product::<usize>()
    );
    let partition = BoundaryPartition::new(&grid);
    HybridDomain::assemble(spec, grid, mesh, partition)
}

impl<S: Real> HybridDomain<S> {
    fn assemble(
        spec: DomainSpec<S>,
        grid: StructuredGrid<S>,
        mesh: TetraMesh<S>,
        partition: BoundaryPartition,
    ) -> Result<Self> {
        let h = spec.h_fdm;
        let tol = h * S::lit(1e-7);
        let mut roles = Vec::with_capacity(mesh.n_vertices());
        let mut overlap = Vec::new();
        let mut feedback = Vec::new();
        for (v, &x) in mesh.vertices.iter().enumerate() {
            let d = interface_distance(&spec, x);
            let role = if d <= tol {
                NodeRole::Interface
            } else if d <= h + tol {
                NodeRole::Overlap
            } else {
                NodeRole::Free
            };
            roles.push(role);
            match role {
                NodeRole::Interface => {
                    let fd = grid.node_at(x).ok_or_else(|| {
                        Error::Contract(format!("interface vertex {v} is not a grid node"))
                    })?;
                    overlap.push(NodePair { fem: v, fd });
                }
                NodeRole::Overlap if (d - h).abs() <= tol => {
                    if let Some(fd) = grid.node_at(x) {
                        feedback.push(NodePair { fem: v, fd });
                    }
                }
                _ => {}
            }
        }
        let fd_owned = (0..grid.len())
            .map(|id| {
                let x = grid.coords(id);
                !(0..3).all(|d| x[d] > spec.fem_lo[d] + tol && x[d] < spec.fem_hi[d] - tol)
            })
            .collect();
        Ok(Self {
            spec,
            grid,
            mesh,
            partition,
            overlap,
            feedback,
            roles,
            fd_owned,
        })
    }

    pub fn roles(&self) -> &[NodeRole] {
        &self.roles
    }

    pub fn role(&self, v: usize) -> NodeRole {
        self.roles[v]
    }

    /// Whether a FEM vertex carries free coefficients (not pinned to vacuum).
    pub fn is_free(&self, v: usize) -> bool {
        self.roles[v] == NodeRole::Free
    }

    pub fn free_mask(&self) -> Vec<bool> {
        self.roles.iter().map(|r| *r == NodeRole::Free).collect()
    }

    /// Grid nodes updated by the difference scheme (outside `Ω_FEM` or on its boundary).
    pub fn fd_owned(&self) -> &[bool] {
        &self.fd_owned
    }

    /// Elements with no vertex on `∂Ω_FEM`; only these may be refined.
    pub fn refinable(&self, k: usize) -> bool {
        self.mesh.tets[k]
            .iter()
            .all(|&v| self.roles[v] != NodeRole::Interface)
    }

    /// Elements whose vertices all carry free coefficients.
    pub fn all_free(&self, k: usize) -> bool {
        self.mesh.tets[k].iter().all(|&v| self.roles[v] == NodeRole::Free)
    }

    /// Smallest element size over both subdomains.
    pub fn h_min(&self) -> S {
        mesh_size(&self.mesh).min().min(self.spec.h_fdm)
    }

    /// Refines the FEM mesh. Elements touching `∂Ω_FEM` must come out
    /// unchanged so the interface stays a plain node-to-node copy.
    pub fn refine_fem(&self, marked: &[usize]) -> Result<Self> {
        if marked.is_empty() {
            return Ok(self.clone());
        }
        let refined = refine_local(&self.mesh, marked)?;
        let touching = |m: &TetraMesh<S>, roles: &dyn Fn(usize) -> bool| {
            let mut set: Vec<[usize; 4]> = m
                .tets
                .iter()
                .filter(|t| t.iter().any(|&v| roles(v)))
                .map(|t| {
                    let mut s = *t;
                    s.sort_unstable();
                    s
                })
                .collect();
            set.sort_unstable();
            set
        };
        let before = touching(&self.mesh, &|v| self.roles[v] == NodeRole::Interface);
        let spec = &self.spec;
        let tol = spec.h_fdm * S::lit(1e-7);
        let after = touching(&refined, &|v| {
            interface_distance(spec, refined.vertices[v]) <= tol
        });
        if before != after {
            return Err(Error::InterfaceRefinement);
        }
        Self::assemble(
            self.spec.clone(),
            self.grid.clone(),
            refined,
            self.partition.clone(),
        )
    }

    /// Like [`refine_fem`](Self::refine_fem), but when the closure would
    /// reach the interface, drops the marked elements nearest to it, one
    /// distance layer at a time, and retries. Returns the refined domain and
    /// the elements actually refined (empty when nothing could be).
    pub fn refine_fem_guarded(&self, marked: &[usize]) -> Result<(Self, Vec<usize>)> {
        let depth = |k: usize| {
            self.mesh.tets[k]
                .iter()
                .map(|&v| interface_distance(&self.spec, self.mesh.vertices[v]))
                .fold(S::infinity(), S::min)
        };
        let mut kept: Vec<usize> = marked.to_vec();
        loop {
            if kept.is_empty() {
                return Ok((self.clone(), kept));
            }
            match self.refine_fem(&kept) {
                Ok(d) => return Ok((d, kept)),
                Err(Error::InterfaceRefinement) => {
                    let shallowest = kept.iter().map(|&k| depth(k)).fold(S::infinity(), S::min);
                    let tol = self.spec.h_fdm * S::lit(1e-6);
                    kept.retain(|&k| depth(k) > shallowest + tol);
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Distance from `x` to `∂Ω_FEM` (for points inside the FEM box).
pub fn interface_distance<S: Real>(spec: &DomainSpec<S>, x: Vec3<S>) -> S {
    (0..3)
        .map(|d| (x[d] - spec.fem_lo[d]).min(spec.fem_hi[d] - x[d]))
        .fold(S::infinity(), S::min)
}
