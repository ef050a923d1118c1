//! Red refinement with green closure.
//!
//! Green elements are never refined further: before each refinement pass every
//! green family is replaced by its parent, so closure always starts from
//! red-refined (shape-regular) elements.

use std::collections::{HashMap, HashSet};

use super::{
    edge_key, face_key, signed_volume, tet_faces, BoundaryTag, GreenFamily, TetraMesh,
    LOCAL_EDGES,
};
use crate::error::{Error, Result};
use crate::scalar::{cross3, dot3, midpoint3, norm3, sub3, Real};

#[derive(Clone, Debug)]
struct Elem {
    v: [usize; 4],
    level: u32,
    origin: Option<usize>,
    green: Option<GreenFamily>,
    red: bool,
}

/// Refines the marked elements into eight children each and closes the mesh
/// with green elements. An empty `marked` returns the input unchanged.
pub fn refine_local<S: Real>(mesh: &TetraMesh<S>, marked: &[usize]) -> Result<TetraMesh<S>> {
    if marked.is_empty() {
        return Ok(mesh.clone());
    }
    if let Some(&bad) = marked.iter().find(|&&k| k >= mesh.n_tets()) {
        return Err(Error::Contract(format!(
            "marked element {bad} out of range (mesh has {})",
            mesh.n_tets()
        )));
    }
    let marked: HashSet<usize> = marked.iter().copied().collect();

    // Replace every green family by its parent; a marked child marks the parent.
    let mut elems = Vec::with_capacity(mesh.n_tets());
    let mut families: HashMap<[usize; 4], usize> = HashMap::new();
    for (k, t) in mesh.tets.iter().enumerate() {
        match mesh.green[k] {
            None => elems.push(Elem {
                v: *t,
                level: mesh.level[k],
                origin: Some(k),
                green: None,
                red: marked.contains(&k),
            }),
            Some(fam) => {
                let mut key = fam.parent_vertices;
                key.sort_unstable();
                let idx = *families.entry(key).or_insert_with(|| {
                    elems.push(Elem {
                        v: fam.parent_vertices,
                        level: fam.parent_level,
                        origin: Some(k),
                        green: None,
                        red: false,
                    });
                    elems.len() - 1
                });
                if marked.contains(&k) {
                    elems[idx].red = true;
                }
            }
        }
    }
    let mut vertices = mesh.vertices.clone();
    let mut midpoints = mesh.midpoints.clone();
    let mut made_from: HashMap<usize, (usize, usize)> = HashMap::new();
    let mut touched = vec![false; elems.len()];
    let split_elem = |e: &Elem,
                          vertices: &mut Vec<[S; 3]>,
                          midpoints: &mut HashMap<(usize, usize), usize>,
                          made_from: &mut HashMap<usize, (usize, usize)>| {
        for &(a, b) in &LOCAL_EDGES {
            let key = edge_key(e.v[a], e.v[b]);
            midpoints.entry(key).or_insert_with(|| {
                vertices.push(midpoint3(vertices[key.0], vertices[key.1]));
                made_from.insert(vertices.len() - 1, key);
                vertices.len() - 1
            });
        }
    };

    // Alternate closure marking and red subdivision until no element needs it.
    let mut origin_touched: Vec<bool>;
    loop {
        for e in elems.iter().filter(|e| e.red) {
            split_elem(e, &mut vertices, &mut midpoints, &mut made_from);
        }
        loop {
            let mut changed = false;
            for e in elems.iter_mut().filter(|e| !e.red) {
                if green_closure(&e.v, &midpoints).is_none() {
                    e.red = true;
                    changed = true;
                    split_elem(e, &mut vertices, &mut midpoints, &mut made_from);
                }
            }
            if !changed {
                break;
            }
        }
        if !elems.iter().any(|e| e.red) {
            break;
        }
        let mut next = Vec::with_capacity(elems.len() + 8 * elems.iter().filter(|e| e.red).count());
        origin_touched = Vec::with_capacity(next.capacity());
        for (e, t) in elems.into_iter().zip(touched.iter().copied()) {
            if e.red {
                for child in red_children(&e.v, &midpoints, &vertices) {
                    next.push(Elem {
                        v: child,
                        level: e.level + 1,
                        origin: e.origin,
                        green: None,
                        red: false,
                    });
                    origin_touched.push(true);
                }
            } else {
                next.push(e);
                origin_touched.push(t);
            }
        }
        elems = next;
        touched = origin_touched;
    }

    // Green closure of the remaining elements with split edges.
    let mut tets = Vec::with_capacity(elems.len() * 2);
    let mut level = Vec::with_capacity(tets.capacity());
    let mut parent = Vec::with_capacity(tets.capacity());
    let mut green = Vec::with_capacity(tets.capacity());
    for (e, t) in elems.iter().zip(&touched) {
        let children = match green_closure(&e.v, &midpoints) {
            Some(None) => {
                tets.push(e.v);
                level.push(e.level);
                parent.push(if *t { e.origin } else { None });
                green.push(e.green);
                continue;
            }
            Some(Some(children)) => children,
            None => unreachable!("closure loop leaves only green-closable elements"),
        };
        let fam = GreenFamily {
            parent_vertices: e.v,
            parent_level: e.level,
        };
        for c in children {
            tets.push(c);
            level.push(e.level + 1);
            parent.push(e.origin);
            green.push(Some(fam));
        }
    }
    for t in tets.iter_mut() {
        let p = [vertices[t[0]], vertices[t[1]], vertices[t[2]], vertices[t[3]]];
        if signed_volume(&p) < S::zero() {
            t.swap(2, 3);
        }
    }

    let mut out = TetraMesh {
        vertices,
        tets,
        boundary_facets: Vec::new(),
        level,
        parent,
        green,
        midpoints,
    };
    let old_tags: HashMap<[usize; 3], BoundaryTag> = mesh
        .boundary_facets
        .iter()
        .map(|(f, t)| (face_key(*f), *t))
        .collect();
    let n_old = mesh.n_vertices();
    let faces = out.compute_boundary_faces();
    let mut facets = Vec::with_capacity(faces.len());
    for f in faces {
        let mut leaves = Vec::with_capacity(6);
        for &v in &f {
            collect_leaves(v, n_old, &made_from, &mut leaves);
        }
        leaves.sort_unstable();
        leaves.dedup();
        let tag = if leaves.len() == 3 {
            old_tags.get(&[leaves[0], leaves[1], leaves[2]]).copied()
        } else {
            None
        }
        .or_else(|| containing_facet(mesh, f.map(|i| out.vertices[i])));
        match tag {
            Some(tag) => facets.push((f, tag)),
            None => {
                return Err(Error::Contract(format!(
                    "refined boundary facet {f:?} at {:?} has no parent facet",
                    f.map(|i| out.vertices[i])
                )))
            }
        }
    }
    out.boundary_facets = facets;
    for k in 0..out.n_tets() {
        let v = out.volume(k);
        if !(v > S::zero()) {
            return Err(Error::DegenerateElement {
                element: k,
                volume: v.as_f64(),
            });
        }
    }
    Ok(out)
}

/// Refines every element.
pub fn uniform_refine<S: Real>(mesh: &TetraMesh<S>) -> Result<TetraMesh<S>> {
    let all: Vec<usize> = (0..mesh.n_tets()).collect();
    refine_local(mesh, &all)
}

/// Tag of the old boundary facet containing the triangle `p`, found by scan.
fn containing_facet<S: Real>(mesh: &TetraMesh<S>, p: [[S; 3]; 3]) -> Option<BoundaryTag> {
    let c = [
        (p[0][0] + p[1][0] + p[2][0]) / S::lit(3.0),
        (p[0][1] + p[1][1] + p[2][1]) / S::lit(3.0),
        (p[0][2] + p[1][2] + p[2][2]) / S::lit(3.0),
    ];
    mesh.boundary_facets.iter().find_map(|(f, tag)| {
        let q = f.map(|i| mesh.vertices[i]);
        let n = cross3(sub3(q[1], q[0]), sub3(q[2], q[0]));
        let area2 = norm3(n);
        let scale = norm3(sub3(q[1], q[0]));
        let off_plane = |x: [S; 3]| (dot3(n, sub3(x, q[0])) / area2).abs() > S::lit(1e-9) * scale;
        if p.iter().any(|&x| off_plane(x)) {
            return None;
        }
        let tol = -S::lit(1e-9) * area2;
        let inside = (0..3).all(|i| {
            let e = cross3(sub3(q[(i + 1) % 3], q[i]), sub3(c, q[i]));
            dot3(e, n) >= tol
        });
        inside.then_some(*tag)
    })
}

fn collect_leaves(
    v: usize,
    n_old: usize,
    made_from: &HashMap<usize, (usize, usize)>,
    out: &mut Vec<usize>,
) {
    if v < n_old {
        out.push(v);
    } else {
        let (a, b) = made_from[&v];
        collect_leaves(a, n_old, made_from, out);
        collect_leaves(b, n_old, made_from, out);
    }
}

/// Bitmask over `LOCAL_EDGES` of edges that carry a midpoint.
fn split_edges(v: &[usize; 4], midpoints: &HashMap<(usize, usize), usize>) -> u8 {
    let mut mask = 0u8;
    for (i, &(a, b)) in LOCAL_EDGES.iter().enumerate() {
        if midpoints.contains_key(&edge_key(v[a], v[b])) {
            mask |= 1 << i;
        }
    }
    mask
}

/// Green children of an element: `Some(None)` when it needs no closure,
/// `None` when green closure cannot make it conforming.
fn green_closure(
    v: &[usize; 4],
    midpoints: &HashMap<(usize, usize), usize>,
) -> Option<Option<Vec<[usize; 4]>>> {
    let children = match closure_pattern(split_edges(v, midpoints))? {
        Closure::None => return Some(None),
        Closure::Edge(le) => green_edge(v, le, midpoints),
        Closure::Face(lf) => green_face(v, lf, midpoints),
    };
    // children must not carry split edges of their own
    children
        .iter()
        .all(|c| split_edges(c, midpoints) == 0)
        .then_some(Some(children))
}

enum Closure {
    None,
    Edge(usize),
    /// Local vertex opposite the split face.
    Face(usize),
}

fn closure_pattern(mask: u8) -> Option<Closure> {
    match mask.count_ones() {
        0 => Some(Closure::None),
        1 => Some(Closure::Edge(mask.trailing_zeros() as usize)),
        3 => (0..4)
            .find(|&opp| {
                let face_mask: u8 = LOCAL_EDGES
                    .iter()
                    .enumerate()
                    .filter(|(_, &(a, b))| a != opp && b != opp)
                    .map(|(i, _)| 1u8 << i)
                    .sum();
                face_mask == mask
            })
            .map(Closure::Face),
        _ => None,
    }
}

fn mid(midpoints: &HashMap<(usize, usize), usize>, a: usize, b: usize) -> usize {
    midpoints[&edge_key(a, b)]
}

fn red_children<S: Real>(
    v: &[usize; 4],
    midpoints: &HashMap<(usize, usize), usize>,
    vertices: &[[S; 3]],
) -> [[usize; 4]; 8] {
    let m = |a: usize, b: usize| mid(midpoints, v[a], v[b]);
    let (m01, m02, m03, m12, m13, m23) = (m(0, 1), m(0, 2), m(0, 3), m(1, 2), m(1, 3), m(2, 3));
    // Split the inner octahedron along its shortest diagonal.
    let diagonals = [(m01, m23), (m02, m13), (m03, m12)];
    let len2 = |(a, b): (usize, usize)| {
        let (p, q) = (vertices[a], vertices[b]);
        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
    };
    let mut best = 0;
    for i in 1..3 {
        if len2(diagonals[i]) < len2(diagonals[best]) {
            best = i;
        }
    }
    let (p, q) = diagonals[best];
    let (a, a2) = diagonals[(best + 1) % 3];
    let (b, b2) = diagonals[(best + 2) % 3];
    let ring = [a, b, a2, b2];
    [
        [v[0], m01, m02, m03],
        [m01, v[1], m12, m13],
        [m02, m12, v[2], m23],
        [m03, m13, m23, v[3]],
        [p, q, ring[0], ring[1]],
        [p, q, ring[1], ring[2]],
        [p, q, ring[2], ring[3]],
        [p, q, ring[3], ring[0]],
    ]
}

fn green_edge(
    v: &[usize; 4],
    local_edge: usize,
    midpoints: &HashMap<(usize, usize), usize>,
) -> Vec<[usize; 4]> {
    let (a, b) = LOCAL_EDGES[local_edge];
    let m = mid(midpoints, v[a], v[b]);
    let mut left = *v;
    left[b] = m;
    let mut right = *v;
    right[a] = m;
    vec![left, right]
}

fn green_face(
    v: &[usize; 4],
    opposite: usize,
    midpoints: &HashMap<(usize, usize), usize>,
) -> Vec<[usize; 4]> {
    let f: Vec<usize> = (0..4).filter(|&i| i != opposite).map(|i| v[i]).collect();
    let (a, b, c, d) = (f[0], f[1], f[2], v[opposite]);
    let (mab, mac, mbc) = (mid(midpoints, a, b), mid(midpoints, a, c), mid(midpoints, b, c));
    vec![
        [a, mab, mac, d],
        [b, mbc, mab, d],
        [c, mac, mbc, d],
        [mab, mbc, mac, d],
    ]
}

/// Exhaustive conformity scan for meshes of box-shaped domains. Returns a
/// description of every violation; empty means conforming.
pub fn conformity_violations<S: Real>(mesh: &TetraMesh<S>) -> Vec<String> {
    let mut out = Vec::new();
    for k in 0..mesh.n_tets() {
        let v = mesh.volume(k);
        if !(v > S::zero()) {
            out.push(format!("element {k} has volume {v}"));
        }
    }
    let mut count: HashMap<[usize; 3], u32> = HashMap::new();
    for t in &mesh.tets {
        for f in tet_faces(t) {
            *count.entry(face_key(f)).or_insert(0) += 1;
        }
    }
    let (lo, hi) = mesh.bounding_box();
    let tol = (0..3)
        .map(|d| hi[d] - lo[d])
        .fold(S::zero(), S::max)
        * S::lit(1e-10);
    let mut tagged: HashSet<[usize; 3]> = HashSet::new();
    for (f, tag) in &mesh.boundary_facets {
        if *tag == BoundaryTag::UNTAGGED {
            out.push(format!("boundary facet {f:?} is untagged"));
        }
        tagged.insert(face_key(*f));
    }
    for (f, c) in count {
        if c > 2 {
            out.push(format!("face {f:?} shared by {c} elements"));
        } else if c == 1 {
            let p = f.map(|i| mesh.vertices[i]);
            let on_box = (0..3).any(|d| {
                p.iter().all(|q| (q[d] - lo[d]).abs() <= tol)
                    || p.iter().all(|q| (q[d] - hi[d]).abs() <= tol)
            });
            if !on_box {
                out.push(format!("hanging face {f:?}"));
            }
            if !tagged.contains(&f) {
                out.push(format!("boundary face {f:?} missing from facet list"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::mesh_size;

    fn cube() -> TetraMesh<f64> {
        TetraMesh::structured_box([0.0; 3], [1.0; 3], 1.0).unwrap()
    }

    fn block(n: usize) -> TetraMesh<f64> {
        TetraMesh::structured_box([0.0; 3], [n as f64; 3], 1.0).unwrap()
    }

    #[test]
    fn uniform_refinement_of_cube() {
        let r = uniform_refine(&cube()).unwrap();
        assert_eq!(r.n_tets(), 48);
        assert_eq!(r.n_vertices(), 27);
        assert!(conformity_violations(&r).is_empty());
        // corner children are similar to their parent; octahedron children are no larger
        let sizes = mesh_size(&r);
        assert!((sizes.max() - 3f64.sqrt() / 2.0).abs() < 1e-14);
        assert!(sizes.h.iter().all(|&h| h <= 3f64.sqrt() / 2.0 + 1e-14));
        assert!(r.levels().iter().all(|&l| l == 1));
        assert!((r.total_volume() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn empty_marking_is_identity() {
        let m = cube();
        let r = refine_local(&m, &[]).unwrap();
        assert_eq!(r.tets(), m.tets());
        assert_eq!(r.vertices(), m.vertices());
    }

    #[test]
    fn single_interior_tet_gets_closure() {
        let m = block(3);
        let centre = [1.5, 1.5, 1.5];
        let k = (0..m.n_tets())
            .find(|&k| {
                let c = m.centroid(k);
                (0..3).all(|d| (c[d] - centre[d]).abs() < 0.5)
            })
            .unwrap();
        let r = refine_local(&m, &[k]).unwrap();
        assert!(conformity_violations(&r).is_empty());
        let red = r.parents().iter().zip(0..).filter(|(p, i)| **p == Some(k) && !r.is_green(*i)).count();
        assert_eq!(red, 8);
        assert!((0..r.n_tets()).any(|i| r.is_green(i)));
        assert!((r.total_volume() - 27.0).abs() < 1e-11);
    }

    #[test]
    fn repeated_local_refinement_regreens() {
        let mut m = block(3);
        for _ in 0..3 {
            let marked: Vec<usize> = (0..m.n_tets())
                .filter(|&k| {
                    let c = m.centroid(k);
                    (c[0] - 1.3).powi(2) + (c[1] - 1.6).powi(2) + (c[2] - 1.4).powi(2) < 0.3
                })
                .collect();
            assert!(!marked.is_empty());
            m = refine_local(&m, &marked).unwrap();
            let v = conformity_violations(&m);
            assert!(v.is_empty(), "{:?}", &v[..v.len().min(5)]);
            assert!((m.total_volume() - 27.0).abs() < 1e-10);
        }
        assert!(m.levels().iter().any(|&l| l >= 3));
    }

    #[test]
    fn marked_elements_halve_in_size() {
        let m = block(2);
        let h = mesh_size(&m).h;
        let marked = [3usize, 17, 30];
        let r = refine_local(&m, &marked).unwrap();
        let hr = mesh_size(&r).h;
        for &k in &marked {
            for (i, p) in r.parents().iter().enumerate() {
                if *p == Some(k) && !r.is_green(i) {
                    assert!(hr[i] <= h[k] / 2.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn boundary_tags_survive_refinement() {
        let r = uniform_refine(&uniform_refine(&cube()).unwrap()).unwrap();
        assert_eq!(r.boundary_facets().len(), 12 * 16);
        let tagger = crate::mesh::box_tagger([0.0; 3], [1.0; 3], 1.0);
        for (f, t) in r.boundary_facets() {
            let p = f.map(|i| r.vertices()[i]);
            assert_eq!(tagger(p), *t);
        }
    }

    #[test]
    fn out_of_range_mark_is_rejected() {
        assert!(refine_local(&cube(), &[6]).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn random_markings_stay_conforming(
            rounds in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 1..8), 1..4)
        ) {
            let mut m = block(2);
            for picks in rounds {
                let marked: Vec<usize> = picks.iter().map(|p| (p * m.n_tets() as f64) as usize).collect();
                m = refine_local(&m, &marked).unwrap();
                let v = conformity_violations(&m);
                proptest::prop_assert!(v.is_empty(), "{:?}", &v[..v.len().min(3)]);
                proptest::prop_assert!((m.total_volume() - 8.0).abs() < 1e-10);
            }
        }
    }
}
