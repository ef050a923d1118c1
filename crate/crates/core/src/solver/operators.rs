//! Spatial operators of the hybrid scheme.
//!
//! FEM part: lumped mass, lumped damping, scalar P1 stiffness in CSR form and
//! the grad-div term `Σ_K w_K |K| (div u)_K (div v)_K` with `w_K` the vertex
//! mean of `ε − 1`. FD part: finite-volume 7-point Laplacian on dual cells of
//! the structured grid, which gives homogeneous Neumann conditions for free.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{signed_volume, triangle_area, HybridDomain, StructuredGrid, TetraMesh};
use crate::scalar::{Real, Vec3};

use super::MaterialField;

/// Element gradients of the four P1 basis functions.
pub(crate) fn basis_gradients<S: Real>(p: &[Vec3<S>; 4]) -> Result<(S, [Vec3<S>; 4])> {
    let vol = signed_volume(p);
    if !(vol > S::zero()) {
        return Err(Error::DegenerateElement {
            element: usize::MAX,
            volume: vol.as_f64(),
        });
    }
    // rows of the inverse Jacobian are the gradients of λ1, λ2, λ3
    let e = [
        [p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]],
        [p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]],
        [p[3][0] - p[0][0], p[3][1] - p[0][1], p[3][2] - p[0][2]],
    ];
    let det = vol * S::lit(6.0);
    let c = |a: Vec3<S>, b: Vec3<S>| {
        [
            (a[1] * b[2] - a[2] * b[1]) / det,
            (a[2] * b[0] - a[0] * b[2]) / det,
            (a[0] * b[1] - a[1] * b[0]) / det,
        ]
    };
    let g1 = c(e[1], e[2]);
    let g2 = c(e[2], e[0]);
    let g3 = c(e[0], e[1]);
    let g0 = [
        -(g1[0] + g2[0] + g3[0]),
        -(g1[1] + g2[1] + g3[1]),
        -(g1[2] + g2[2] + g3[2]),
    ];
    Ok((vol, [g0, g1, g2, g3]))
}

/// FEM operator set on the tetrahedral mesh.
#[derive(Clone, Debug)]
pub struct FemOperators<S> {
    /// `m_i = Σ_{K∋i} |K|/4`.
    pub lumped_volume: Vec<S>,
    /// Lumped `ε`-weighted mass `ε_i m_i`.
    pub mass: Vec<S>,
    /// Lumped damping `σ_i m_i`.
    pub damping: Vec<S>,
    /// Scalar stiffness in CSR form (applied per component).
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub stiffness: Vec<S>,
    /// Element volumes and basis gradients.
    pub volume: Vec<S>,
    pub grads: Vec<[Vec3<S>; 4]>,
    /// Grad-div weight per element, vertex mean of `ε − 1`.
    pub graddiv_weight: Vec<S>,
    /// Lumped boundary mass on the facets of `∂Ω_FEM`.
    pub boundary_mass: Vec<S>,
    /// Elements incident to each vertex, with the local index of the vertex.
    pub(crate) incident: Vec<Vec<(usize, usize)>>,
}

/// Assembles `{M(ε), D(σ), K, G(ε), B}` on the mesh.
pub fn assemble_fem_operators<S: Real>(
    mesh: &TetraMesh<S>,
    material: &MaterialField<S>,
) -> Result<FemOperators<S>> {
    let nv = mesh.n_vertices();
    if material.eps.len() != nv || material.sigma.len() != nv {
        return Err(Error::Contract(format!(
            "material has {} / {} values for {nv} vertices",
            material.eps.len(),
            material.sigma.len()
        )));
    }
    let mut volume = Vec::with_capacity(mesh.n_tets());
    let mut grads = Vec::with_capacity(mesh.n_tets());
    for k in 0..mesh.n_tets() {
        let (v, g) = basis_gradients(&mesh.tet_points(k)).map_err(|e| match e {
            Error::DegenerateElement { volume, .. } => Error::DegenerateElement { element: k, volume },
            e => e,
        })?;
        volume.push(v);
        grads.push(g);
    }

    let mut incident = vec![Vec::new(); nv];
    for (k, t) in mesh.tets().iter().enumerate() {
        for (l, &i) in t.iter().enumerate() {
            incident[i].push((k, l));
        }
    }
    let quarter = S::lit(0.25);
    let lumped_volume: Vec<S> = incident
        .iter()
        .map(|inc| inc.iter().map(|&(k, _)| volume[k] * quarter).sum())
        .collect();

    // CSR pattern from vertex adjacency, assembled row by row.
    let tets = mesh.tets();
    let rows: Vec<Vec<(usize, S)>> = incident
        .par_iter()
        .enumerate()
        .map(|(i, inc)| {
            let mut row: Vec<(usize, S)> = Vec::with_capacity(16);
            for &(k, li) in inc {
                let gi = grads[k][li];
                for (lj, &j) in tets[k].iter().enumerate() {
                    let gj = grads[k][lj];
                    let v = volume[k] * (gi[0] * gj[0] + gi[1] * gj[1] + gi[2] * gj[2]);
                    match row.iter_mut().find(|(c, _)| *c == j) {
                        Some(e) => e.1 += v,
                        None => row.push((j, v)),
                    }
                }
            }
            row.sort_unstable_by_key(|e| e.0);
            debug_assert!(row.iter().any(|e| e.0 == i));
            row
        })
        .collect();
    let mut row_ptr = Vec::with_capacity(nv + 1);
    row_ptr.push(0);
    let mut col = Vec::new();
    let mut stiffness = Vec::new();
    for r in rows {
        for (c, v) in r {
            col.push(c);
            stiffness.push(v);
        }
        row_ptr.push(col.len());
    }

    let mut boundary_mass = vec![S::zero(); nv];
    let third = S::one() / S::lit(3.0);
    for (f, _) in mesh.boundary_facets() {
        let p = f.map(|i| mesh.vertices()[i]);
        let a = triangle_area(p[0], p[1], p[2]) * third;
        for &i in f {
            boundary_mass[i] += a;
        }
    }

    let mut ops = FemOperators {
        mass: Vec::new(),
        damping: Vec::new(),
        graddiv_weight: Vec::new(),
        lumped_volume,
        row_ptr,
        col,
        stiffness,
        volume,
        grads,
        boundary_mass,
        incident,
    };
    ops.set_material(mesh, material);
    Ok(ops)
}

impl<S: Real> FemOperators<S> {
    /// Updates the coefficient-dependent parts (`M`, `D`, `G` weights).
    pub fn set_material(&mut self, mesh: &TetraMesh<S>, material: &MaterialField<S>) {
        self.mass = self
            .lumped_volume
            .iter()
            .zip(&material.eps)
            .map(|(&m, &e)| m * e)
            .collect();
        self.damping = self
            .lumped_volume
            .iter()
            .zip(&material.sigma)
            .map(|(&m, &s)| m * s)
            .collect();
        let quarter = S::lit(0.25);
        self.graddiv_weight = mesh
            .tets()
            .iter()
            .map(|t| t.iter().map(|&i| material.eps[i] - S::one()).sum::<S>() * quarter)
            .collect();
    }

    pub fn has_graddiv(&self) -> bool {
        self.graddiv_weight.iter().any(|&w| w != S::zero())
    }

    /// `(K u)_i` for one scalar component field.
    pub fn stiffness_row(&self, i: usize, u: &[Vec3<S>]) -> Vec3<S> {
        let mut acc = [S::zero(); 3];
        for p in self.row_ptr[i]..self.row_ptr[i + 1] {
            let (j, k) = (self.col[p], self.stiffness[p]);
            for c in 0..3 {
                acc[c] += k * u[j][c];
            }
        }
        acc
    }

    pub fn stiffness_entry(&self, i: usize, j: usize) -> S {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col[r.clone()]
            .binary_search(&j)
            .map(|p| self.stiffness[r.start + p])
            .unwrap_or(S::zero())
    }

    /// Per-element divergence of a P1 vector field.
    pub fn divergence(&self, mesh: &TetraMesh<S>, u: &[Vec3<S>]) -> Vec<S> {
        mesh.tets()
            .par_iter()
            .zip(self.grads.par_iter())
            .map(|(t, g)| {
                let mut d = S::zero();
                for l in 0..4 {
                    let v = u[t[l]];
                    d += g[l][0] * v[0] + g[l][1] * v[1] + g[l][2] * v[2];
                }
                d
            })
            .collect()
    }

    /// `(G u)_i` given the element divergences of `u`.
    pub fn graddiv_row(&self, i: usize, div: &[S]) -> Vec3<S> {
        let mut acc = [S::zero(); 3];
        for &(k, l) in &self.incident[i] {
            let w = self.graddiv_weight[k];
            if w == S::zero() {
                continue;
            }
            let s = w * self.volume[k] * div[k];
            let g = self.grads[k][l];
            for c in 0..3 {
                acc[c] += s * g[c];
            }
        }
        acc
    }

    /// Gershgorin bound on the row `i` of `|K ⊗ I| + |G|` with the grad-div
    /// weight replaced by `w_max` times the free-vertex fraction of each element.
    pub(crate) fn row_bound(&self, i: usize, tets: &[[usize; 4]], free: &[bool], w_max: S) -> S {
        let mut sum = S::zero();
        for p in self.row_ptr[i]..self.row_ptr[i + 1] {
            sum += self.stiffness[p].abs();
        }
        let mut gd = [S::zero(); 3];
        for &(k, l) in &self.incident[i] {
            let nfree = tets[k].iter().filter(|&&v| free[v]).count();
            if nfree == 0 {
                continue;
            }
            let w = w_max * S::from_count(nfree) * S::lit(0.25);
            let total: S = self.grads[k]
                .iter()
                .map(|g| g[0].abs() + g[1].abs() + g[2].abs())
                .sum();
            for c in 0..3 {
                gd[c] += w * self.volume[k] * self.grads[k][l][c].abs() * total;
            }
        }
        sum + gd[0].max(gd[1]).max(gd[2])
    }
}

/// Finite-volume Laplacian on the structured grid of `Ω`.
#[derive(Clone, Debug)]
pub struct FdOperator<S> {
    /// Dual-cell volume of each node.
    pub mass: Vec<S>,
    /// Coupling to the `+x`, `+y`, `+z` neighbour (zero at the upper boundary).
    pub weight_plus: Vec<[S; 3]>,
    /// Dual-face area on `∂₁Ω` (top), `∂₂Ω` (bottom) and `∂₃Ω` (sides).
    pub area_top: Vec<S>,
    pub area_bottom: Vec<S>,
    pub area_lateral: Vec<S>,
    pub(crate) strides: [usize; 3],
}

impl<S: Real> FdOperator<S> {
    pub fn new(grid: &StructuredGrid<S>) -> Self {
        let n = grid.len();
        let h = grid.spacing;
        let half = S::lit(0.5);
        let mut mass = Vec::with_capacity(n);
        let mut weight_plus = Vec::with_capacity(n);
        let mut area_top = vec![S::zero(); n];
        let mut area_bottom = vec![S::zero(); n];
        let mut area_lateral = vec![S::zero(); n];
        for id in 0..n {
            let ijk = grid.ijk(id);
            let mut frac = [S::one(); 3];
            for d in 0..3 {
                if ijk[d] == 0 || ijk[d] + 1 == grid.dims[d] {
                    frac[d] = half;
                }
            }
            mass.push(h * h * h * frac[0] * frac[1] * frac[2]);
            let mut w = [S::zero(); 3];
            for d in 0..3 {
                if ijk[d] + 1 < grid.dims[d] {
                    w[d] = h * frac[(d + 1) % 3] * frac[(d + 2) % 3];
                }
            }
            weight_plus.push(w);
            let face = |d: usize| h * h * frac[(d + 1) % 3] * frac[(d + 2) % 3];
            if ijk[2] + 1 == grid.dims[2] {
                area_top[id] = face(2);
            }
            if ijk[2] == 0 {
                area_bottom[id] = face(2);
            }
            for d in 0..2 {
                if ijk[d] == 0 {
                    area_lateral[id] += face(d);
                }
                if ijk[d] + 1 == grid.dims[d] {
                    area_lateral[id] += face(d);
                }
            }
        }
        Self {
            mass,
            weight_plus,
            area_top,
            area_bottom,
            area_lateral,
            strides: [1, grid.dims[0], grid.dims[0] * grid.dims[1]],
        }
    }

    /// `(A u)_id` for the grid Laplacian.
    #[inline]
    pub fn apply_row(&self, grid: &StructuredGrid<S>, id: usize, u: &[Vec3<S>]) -> Vec3<S> {
        let ijk = grid.ijk(id);
        let ui = u[id];
        let mut acc = [S::zero(); 3];
        for d in 0..3 {
            let s = self.strides[d];
            let w = self.weight_plus[id][d];
            if w != S::zero() {
                let v = u[id + s];
                for c in 0..3 {
                    acc[c] += w * (ui[c] - v[c]);
                }
            }
            if ijk[d] > 0 {
                let w = self.weight_plus[id - s][d];
                let v = u[id - s];
                for c in 0..3 {
                    acc[c] += w * (ui[c] - v[c]);
                }
            }
        }
        acc
    }

    pub(crate) fn row_bound(&self, grid: &StructuredGrid<S>, id: usize) -> S {
        let ijk = grid.ijk(id);
        let mut sum = S::zero();
        for d in 0..3 {
            sum += self.weight_plus[id][d];
            if ijk[d] > 0 {
                sum += self.weight_plus[id - self.strides[d]][d];
            }
        }
        sum + sum
    }
}

/// Largest stable time step of the leapfrog scheme for every admissible
/// coefficient field with `ε ≤ eps_max`, from a Gershgorin bound on `M⁻¹A`.
pub fn stable_dt<S: Real>(domain: &HybridDomain<S>, eps_max: S, cfl: S) -> Result<S> {
    let ops = assemble_fem_operators(&domain.mesh, &MaterialField::vacuum(domain.mesh.n_vertices(), eps_max, S::zero()))?;
    let fd = FdOperator::new(&domain.grid);
    let free = domain.free_mask();
    let w_max = (eps_max - S::one()).max(S::zero());
    let fem_max = (0..domain.mesh.n_vertices())
        .into_par_iter()
        .filter(|&i| domain.role(i) != crate::mesh::NodeRole::Interface)
        .map(|i| ops.row_bound(i, domain.mesh.tets(), &free, w_max) / ops.lumped_volume[i])
        .reduce(S::zero, S::max);
    let owned = domain.fd_owned();
    let fd_max = (0..domain.grid.len())
        .into_par_iter()
        .filter(|&id| owned[id])
        .map(|id| fd.row_bound(&domain.grid, id) / fd.mass[id])
        .reduce(S::zero, S::max);
    let lambda = fem_max.max(fd_max);
    Ok(cfl * S::lit(2.0) / lambda.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_hybrid_domain, DomainSpec, TetraMesh};

    fn reference_tet() -> TetraMesh<f64> {
        TetraMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2, 3]],
            |_| crate::mesh::BoundaryTag(0),
        )
        .unwrap()
    }

    #[test]
    fn reference_tet_stiffness() {
        let m = reference_tet();
        let ops = assemble_fem_operators(&m, &MaterialField::uniform(4, 2.0, 0.0, 10.0, 2.0)).unwrap();
        // hand-computed P1 stiffness of the unit reference tetrahedron
        let expected = [
            [0.5, -1.0 / 6.0, -1.0 / 6.0, -1.0 / 6.0],
            [-1.0 / 6.0, 1.0 / 6.0, 0.0, 0.0],
            [-1.0 / 6.0, 0.0, 1.0 / 6.0, 0.0],
            [-1.0 / 6.0, 0.0, 0.0, 1.0 / 6.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((ops.stiffness_entry(i, j) - expected[i][j]).abs() < 1e-15);
            }
            assert!((ops.mass[i] - 2.0 / 24.0).abs() < 1e-15);
        }
        assert!(ops.graddiv_weight.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn unit_permittivity_has_no_graddiv() {
        let m = TetraMesh::structured_box([0.0; 3], [2.0; 3], 1.0).unwrap();
        let ops = assemble_fem_operators(&m, &MaterialField::<f64>::vacuum(m.n_vertices(), 10.0, 2.0)).unwrap();
        assert!(!ops.has_graddiv());
        let u: Vec<[f64; 3]> = (0..m.n_vertices()).map(|i| [i as f64, 1.0, -2.0]).collect();
        let div = ops.divergence(&m, &u);
        for i in 0..m.n_vertices() {
            assert_eq!(ops.graddiv_row(i, &div), [0.0; 3]);
        }
    }

    #[test]
    fn constants_are_in_the_stiffness_kernel() {
        let m = TetraMesh::structured_box([0.0; 3], [3.0; 3], 1.0).unwrap();
        let ops = assemble_fem_operators(&m, &MaterialField::<f64>::vacuum(m.n_vertices(), 10.0, 2.0)).unwrap();
        let u = vec![[1.5, -2.0, 0.25]; m.n_vertices()];
        for i in 0..m.n_vertices() {
            let r = ops.stiffness_row(i, &u);
            assert!(r.iter().all(|v| v.abs() < 1e-13));
        }
    }

    #[test]
    fn six_tet_split_reproduces_the_seven_point_stencil() {
        let h = 0.5;
        let m = TetraMesh::structured_box([0.0; 3], [2.0; 3], h).unwrap();
        let ops = assemble_fem_operators(&m, &MaterialField::<f64>::vacuum(m.n_vertices(), 10.0, 2.0)).unwrap();
        let grid = StructuredGrid::new([0.0; 3], [2.0; 3], h);
        let fd = FdOperator::new(&grid);
        // box-boundary vertices are never FEM rows in the hybrid scheme
        let interior = |id: usize| grid.ijk(id).iter().all(|&c| c > 0 && c + 1 < grid.dims[0]);
        for i in (0..m.n_vertices()).filter(|&i| interior(i)) {
            assert!((ops.lumped_volume[i] - fd.mass[i]).abs() < 1e-15);
            for p in ops.row_ptr[i]..ops.row_ptr[i + 1] {
                let j = ops.col[p];
                let [a, b] = [grid.ijk(i), grid.ijk(j)];
                let diff: usize = (0..3).map(|d| a[d].abs_diff(b[d])).sum();
                if diff == 1 {
                    let d = (0..3).find(|&d| a[d] != b[d]).unwrap();
                    let lo = if a[d] < b[d] { i } else { j };
                    assert!((ops.stiffness[p] + fd.weight_plus[lo][d]).abs() < 1e-14);
                } else if i != j {
                    assert!(ops.stiffness[p].abs() < 1e-14, "off-axis coupling {}", ops.stiffness[p]);
                }
            }
        }
    }

    #[test]
    fn stable_dt_matches_vacuum_stencil_bound() {
        let spec = DomainSpec {
            omega_lo: [0.0; 3],
            omega_hi: [3.0; 3],
            fem_lo: [1.0; 3],
            fem_hi: [2.0; 3],
            h_fdm: 0.5,
        };
        let dom = build_hybrid_domain(spec).unwrap();
        let dt = stable_dt(&dom, 1.0, 1.0).unwrap();
        // λ ≤ 12/h² for the 7-point Laplacian
        assert!((dt - 2.0 * 0.5 / 12f64.sqrt()).abs() < 1e-12);
        assert!(stable_dt(&dom, 10.0, 1.0).unwrap() <= dt);
    }
}
