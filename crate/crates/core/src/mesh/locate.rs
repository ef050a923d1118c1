//! Point location and P1 transfer between meshes.

use super::{signed_volume, TetraMesh};
use crate::error::{Error, Result};
use crate::scalar::{Real, Vec3};

const BARY_TOL: f64 = 1e-10;

/// Bucket grid over the bounding box of a mesh, each bucket listing the
/// elements whose bounding boxes overlap it (in increasing id order).
#[derive(Clone, Debug)]
pub struct PointLocator<'m, S> {
    mesh: &'m TetraMesh<S>,
    lo: Vec3<S>,
    cell: Vec3<S>,
    dims: [usize; 3],
    buckets: Vec<Vec<usize>>,
}

impl<'m, S: Real> PointLocator<'m, S> {
    pub fn new(mesh: &'m TetraMesh<S>) -> Self {
        let (lo, hi) = mesh.bounding_box();
        let n = mesh.n_tets().max(1) as f64;
        let per_axis = (n / 4.0).cbrt().ceil().max(1.0) as usize;
        let mut cell = [S::one(); 3];
        let dims = [per_axis; 3];
        for d in 0..3 {
            let ext = hi[d] - lo[d];
            cell[d] = if ext > S::zero() {
                ext / S::from_count(per_axis)
            } else {
                S::one()
            };
        }
        let mut loc = Self {
            mesh,
            lo,
            cell,
            dims,
            buckets: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
        };
        let pad = S::lit(BARY_TOL);
        for k in 0..mesh.n_tets() {
            let p = mesh.tet_points(k);
            let mut a = [0usize; 3];
            let mut b = [0usize; 3];
            for d in 0..3 {
                let mn = p.iter().map(|q| q[d]).fold(S::infinity(), S::min);
                let mx = p.iter().map(|q| q[d]).fold(S::neg_infinity(), S::max);
                a[d] = loc.bin(d, mn - pad * loc.cell[d]);
                b[d] = loc.bin(d, mx + pad * loc.cell[d]);
            }
            for z in a[2]..=b[2] {
                for y in a[1]..=b[1] {
                    for x in a[0]..=b[0] {
                        let id = loc.flat([x, y, z]);
                        loc.buckets[id].push(k);
                    }
                }
            }
        }
        loc
    }

    fn bin(&self, d: usize, x: S) -> usize {
        let t = ((x - self.lo[d]) / self.cell[d]).floor();
        if t < S::zero() {
            0
        } else {
            t.to_usize().unwrap_or(usize::MAX).min(self.dims[d] - 1)
        }
    }

    fn flat(&self, b: [usize; 3]) -> usize {
        b[0] + self.dims[0] * (b[1] + self.dims[1] * b[2])
    }

    /// Lowest-id element containing `x` and the barycentric coordinates of
    /// `x` in it.
    pub fn locate(&self, x: Vec3<S>) -> Option<(usize, [S; 4])> {
        let tol = S::lit(BARY_TOL);
        for d in 0..3 {
            let (lo, hi) = (self.lo[d], self.lo[d] + self.cell[d] * S::from_count(self.dims[d]));
            let pad = tol * self.cell[d];
            if x[d] < lo - pad || x[d] > hi + pad {
                return None;
            }
        }
        let b = [self.bin(0, x[0]), self.bin(1, x[1]), self.bin(2, x[2])];
        self.buckets[self.flat(b)].iter().find_map(|&k| {
            let l = barycentric(&self.mesh.tet_points(k), x);
            l.iter()
                .all(|&c| c >= -tol && c <= S::one() + tol)
                .then_some((k, l))
        })
    }
}

/// Barycentric coordinates of `x` with respect to the tetrahedron `p`.
pub fn barycentric<S: Real>(p: &[Vec3<S>; 4], x: Vec3<S>) -> [S; 4] {
    let vol = signed_volume(p);
    let mut l = [S::zero(); 4];
    for i in 0..4 {
        let mut q = *p;
        q[i] = x;
        l[i] = signed_volume(&q) / vol;
    }
    l
}

/// Element containing `x` (lowest id on shared faces) with barycentric coordinates.
pub fn locate_point<S: Real>(mesh: &TetraMesh<S>, x: Vec3<S>) -> Result<(usize, [S; 4])> {
    PointLocator::new(mesh).locate(x).ok_or_else(|| Error::PointNotFound {
        x: x[0].as_f64(),
        y: x[1].as_f64(),
        z: x[2].as_f64(),
    })
}

/// Linear transfer weights from the vertices of one mesh to those of another.
#[derive(Clone, Debug)]
pub struct NodalTransfer<S> {
    weights: Vec<[(usize, S); 4]>,
}

impl<S: Real> NodalTransfer<S> {
    pub fn new(source: &TetraMesh<S>, target: &TetraMesh<S>) -> Result<Self> {
        let loc = PointLocator::new(source);
        let mut weights = Vec::with_capacity(target.n_vertices());
        for (v, &x) in target.vertices.iter().enumerate() {
            if v < source.n_vertices() && source.vertices[v] == x {
                weights.push([(v, S::one()), (v, S::zero()), (v, S::zero()), (v, S::zero())]);
                continue;
            }
            let (k, l) = loc.locate(x).ok_or_else(|| Error::PointNotFound {
                x: x[0].as_f64(),
                y: x[1].as_f64(),
                z: x[2].as_f64(),
            })?;
            let t = source.tets[k];
            if let Some(i) = (0..4).find(|&i| (l[i] - S::one()).abs() <= S::lit(1e-12)) {
                weights.push([(t[i], S::one()), (t[i], S::zero()), (t[i], S::zero()), (t[i], S::zero())]);
            } else {
                weights.push([(t[0], l[0]), (t[1], l[1]), (t[2], l[2]), (t[3], l[3])]);
            }
        }
        Ok(Self { weights })
    }

    pub fn apply(&self, field: &[S]) -> Vec<S> {
        self.weights
            .iter()
            .map(|w| {
                if w[1].1 == S::zero() && w[2].1 == S::zero() && w[3].1 == S::zero() && w[0].1 == S::one() {
                    field[w[0].0]
                } else {
                    w.iter().map(|&(i, c)| c * field[i]).sum()
                }
            })
            .collect()
    }
}

/// P1 interpolation of a nodal field on `source` onto the vertices of `target`.
/// Vertices shared with the source are copied exactly.
pub fn interpolate_nodal<S: Real>(
    source: &TetraMesh<S>,
    field: &[S],
    target: &TetraMesh<S>,
) -> Result<Vec<S>> {
    if field.len() != source.n_vertices() {
        return Err(Error::Contract(format!(
            "field has {} values for {} vertices",
            field.len(),
            source.n_vertices()
        )));
    }
    Ok(NodalTransfer::new(source, target)?.apply(field))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{refine_local, uniform_refine};
    use proptest::prelude::*;

    fn block() -> TetraMesh<f64> {
        TetraMesh::structured_box([0.0; 3], [2.0; 3], 1.0).unwrap()
    }

    #[test]
    fn centroid_locates_its_own_element() {
        let m = block();
        for k in 0..m.n_tets() {
            let (j, l) = locate_point(&m, m.centroid(k)).unwrap();
            assert_eq!(j, k);
            for c in l {
                assert!((c - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_vertex_goes_to_lowest_id() {
        let m = block();
        let centre = [1.0, 1.0, 1.0];
        let (k, _) = locate_point(&m, centre).unwrap();
        let lowest = (0..m.n_tets())
            .find(|&j| m.tets()[j].iter().any(|&v| m.vertices()[v] == centre))
            .unwrap();
        assert_eq!(k, lowest);
    }

    #[test]
    fn exterior_point_is_not_found() {
        assert!(matches!(
            locate_point(&block(), [2.5, 1.0, 1.0]),
            Err(Error::PointNotFound { .. })
        ));
    }

    #[test]
    fn constant_field_is_preserved() {
        let a = block();
        let b = uniform_refine(&a).unwrap();
        let f = vec![3.25; a.n_vertices()];
        assert!(interpolate_nodal(&a, &f, &b).unwrap().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn midpoints_take_endpoint_averages() {
        let a = block();
        let b = uniform_refine(&a).unwrap();
        let f: Vec<f64> = (0..a.n_vertices()).map(|i| ((i * 7919) % 101) as f64 / 7.0).collect();
        let g = interpolate_nodal(&a, &f, &b).unwrap();
        for (&(p, q), &m) in &b.midpoints {
            if p < a.n_vertices() && q < a.n_vertices() {
                assert!((g[m] - 0.5 * (f[p] + f[q])).abs() < 1e-12);
            }
        }
        assert_eq!(&g[..a.n_vertices()], &f[..]);
    }

    proptest! {
        #[test]
        fn affine_fields_are_reproduced(
            c in prop::array::uniform4(-5.0f64..5.0),
            marks in prop::collection::vec(0usize..48, 1..6),
        ) {
            let a = block();
            let b = refine_local(&a, &marks).unwrap();
            let aff = |x: [f64; 3]| c[0] * x[0] + c[1] * x[1] + c[2] * x[2] + c[3];
            let f: Vec<f64> = a.vertices().iter().map(|&x| aff(x)).collect();
            let g = interpolate_nodal(&a, &f, &b).unwrap();
            for (v, &x) in b.vertices().iter().enumerate() {
                prop_assert!((g[v] - aff(x)).abs() < 1e-12);
            }
        }
    }
}
