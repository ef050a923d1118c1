//! Material phantoms, synthetic boundary observations computed on a finer
//! mesh than the one used for inversion, and multiplicative noise.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{DomainSpec, HybridDomain};
use crate::objective::ObservationSet;
use crate::scalar::{Real, Vec3};
use crate::solver::{
    run_forward, stable_dt, BoundaryModel, ForwardProblem, MaterialField, RunOptions, SourceSpec,
    TimeGrid,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape<S> {
    Sphere { center: Vec3<S>, radius: S },
    Ellipsoid { center: Vec3<S>, radii: Vec3<S> },
}

impl<S: Real> Shape<S> {
    pub fn contains(&self, x: Vec3<S>) -> bool {
        let (c, r) = self.axes();
        (0..3).map(|d| ((x[d] - c[d]) / r[d]).powi(2)).sum::<S>() <= S::one()
    }

    pub fn center(&self) -> Vec3<S> {
        self.axes().0
    }

    /// Radius of the smallest centred ball containing the shape.
    pub fn bounding_radius(&self) -> S {
        let r = self.axes().1;
        r[0].max(r[1]).max(r[2])
    }

    fn axes(&self) -> (Vec3<S>, Vec3<S>) {
        match *self {
            Shape::Sphere { center, radius } => (center, [radius; 3]),
            Shape::Ellipsoid { center, radii } => (center, radii),
        }
    }
}

/// Horizontal slab between two depths below the top face of `Ω_FEM`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer<S> {
    pub depth_from: S,
    pub depth_to: S,
    pub eps: S,
    pub sigma: S,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inclusion<S> {
    #[serde(flatten)]
    pub shape: Shape<S>,
    pub eps: S,
    pub sigma: S,
    #[serde(default)]
    pub stage: Option<u8>,
}

/// Background, layers (in order, later ones win) and an optional tumor on
/// top. Lengths are dimensionless with one unit per millimetre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec<S> {
    pub background: (S, S),
    #[serde(default)]
    pub layers: Vec<Layer<S>>,
    #[serde(default)]
    pub tumor: Option<Inclusion<S>>,
    pub eps_max: S,
    pub sigma_max: S,
}

pub const PRESETS: [&str; 4] = ["homogeneous", "stage1", "stage2", "layered"];

impl<S: Real> PhantomSpec<S> {
    pub fn homogeneous() -> Self {
        Self {
            background: (S::one(), S::zero()),
            layers: Vec::new(),
            tumor: None,
            eps_max: S::lit(10.0),
            sigma_max: S::lit(2.0),
        }
    }

    /// Named phantom placed relative to the FEM box. The weighted (÷5) test
    /// values are used except for `layered`, which carries the real ones.
    pub fn preset(name: &str, domain: &DomainSpec<S>) -> Result<Self> {
        let lo = domain.fem_lo;
        let hi = domain.fem_hi;
        let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let scale = ext[0].min(ext[1]).min(ext[2]) / S::lit(10.0);
        let mid = |d: usize| (lo[d] + hi[d]) * S::lit(0.5);
        let mut spec = Self::homogeneous();
        match name {
            "homogeneous" => {}
            "stage1" => {
                spec.tumor = Some(Inclusion {
                    shape: Shape::Sphere {
                        center: [mid(0), mid(1), hi[2] - S::lit(3.0) * scale],
                        radius: S::lit(1.5) * scale,
                    },
                    eps: S::lit(8.0),
                    sigma: S::lit(1.2),
                    stage: Some(1),
                });
            }
            "stage2" => {
                spec.tumor = Some(Inclusion {
                    shape: Shape::Ellipsoid {
                        center: [mid(0), mid(1), hi[2] - S::lit(3.5) * scale],
                        radii: [S::lit(1.5) * scale, S::lit(1.5) * scale, S::lit(2.0) * scale],
                    },
                    eps: S::lit(9.0),
                    sigma: S::lit(1.2),
                    stage: Some(2),
                });
            }
            "layered" => {
                let layer = |a: f64, b: f64, eps: f64, sigma: f64| Layer {
                    depth_from: S::lit(a) * scale,
                    depth_to: S::lit(b) * scale,
                    eps: S::lit(eps),
                    sigma: S::lit(sigma),
                };
                spec.layers = vec![
                    layer(0.0, 1.0, 35.0, 4.0),
                    layer(1.0, 4.5, 40.0, 9.0),
                    layer(4.5, 10.0, 9.0, 1.0),
                ];
                spec.tumor = Some(Inclusion {
                    shape: Shape::Sphere {
                        center: [mid(0), mid(1), hi[2] - S::lit(3.0) * scale],
                        radius: S::lit(1.5) * scale,
                    },
                    eps: S::lit(45.0),
                    sigma: S::lit(6.0),
                    stage: Some(1),
                });
                spec.eps_max = S::lit(50.0);
                spec.sigma_max = S::lit(10.0);
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown phantom preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        }
        Ok(spec)
    }

    pub fn validate(&self, domain: &DomainSpec<S>) -> Result<()> {
        let in_box = |e: S, s: S| e >= S::one() && e <= self.eps_max && s >= S::zero() && s <= self.sigma_max;
        let (be, bs) = self.background;
        if !in_box(be, bs) {
            return Err(Error::Config(format!("background ({be}, {bs}) outside the admissible box")));
        }
        let depth = domain.fem_hi[2] - domain.fem_lo[2];
        for l in &self.layers {
            if !in_box(l.eps, l.sigma) {
                return Err(Error::Config(format!("layer values ({}, {}) outside the admissible box", l.eps, l.sigma)));
            }
            if !(l.depth_from >= S::zero() && l.depth_to > l.depth_from && l.depth_to <= depth) {
                return Err(Error::Config(format!(
                    "layer depths [{}, {}] outside Ω_FEM",
                    l.depth_from, l.depth_to
                )));
            }
        }
        if let Some(t) = &self.tumor {
            if !in_box(t.eps, t.sigma) {
                return Err(Error::Config(format!("tumor values ({}, {}) outside the admissible box", t.eps, t.sigma)));
            }
            let (c, r) = t.shape.axes();
            for d in 0..3 {
                if !(r[d] > S::zero() && c[d] - r[d] >= domain.fem_lo[d] && c[d] + r[d] <= domain.fem_hi[d]) {
                    return Err(Error::Config("tumor extends outside Ω_FEM".into()));
                }
            }
        }
        Ok(())
    }

    fn value_at(&self, x: Vec3<S>, top: S) -> (S, S) {
        let mut v = self.background;
        let depth = top - x[2];
        for l in &self.layers {
            if depth >= l.depth_from && depth <= l.depth_to {
                v = (l.eps, l.sigma);
            }
        }
        if let Some(t) = &self.tumor {
            if t.shape.contains(x) {
                v = (t.eps, t.sigma);
            }
        }
        v
    }
}

/// Nodal coefficients by point tests at the vertices; the vacuum layer
/// stays at `(1, 0)`.
pub fn build_phantom<S: Real>(spec: &PhantomSpec<S>, domain: &HybridDomain<S>) -> Result<MaterialField<S>> {
    spec.validate(&domain.spec)?;
    let n = domain.mesh.n_vertices();
    let mut m = MaterialField::vacuum(n, spec.eps_max, spec.sigma_max);
    let top = domain.spec.fem_hi[2];
    for (i, &x) in domain.mesh.vertices().iter().enumerate() {
        if domain.is_free(i) {
            let (e, s) = spec.value_at(x, top);
            m.eps[i] = e;
            m.sigma[i] = s;
        }
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec<S> {
    pub delta: S,
    pub seed: u64,
}

/// `d ← d (1 + δ u)` with `u ~ U[−1, 1]` drawn independently per sample
/// and component from a seeded stream.
pub fn add_noise<S: Real>(obs: &ObservationSet<S>, noise: NoiseSpec<S>) -> Result<ObservationSet<S>> {
    if !(noise.delta >= S::zero()) {
        return Err(Error::Config(format!("noise level δ = {} must be nonnegative", noise.delta)));
    }
    let mut out = obs.clone();
    out.noise_level = noise.delta;
    out.seed = noise.seed;
    if noise.delta == S::zero() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let u = Uniform::new_inclusive(-1.0f64, 1.0);
    for v in out.trace.values.iter_mut() {
        for c in v.iter_mut() {
            *c *= S::one() + noise.delta * S::lit(u.sample(&mut rng));
        }
    }
    Ok(out)
}

/// How the data mesh and time grid are built.
#[derive(Clone, Debug)]
pub struct DataGeneration<S> {
    pub source: SourceSpec<S>,
    pub t_end: S,
    pub cfl: S,
    pub model: BoundaryModel,
    /// Number of local refinements of the data mesh.
    pub fine_level: usize,
    /// Refinement level of the mesh the data will be inverted on.
    pub inversion_level: usize,
    /// Skips the check that the data mesh is finer than the inversion mesh.
    pub allow_inverse_crime: bool,
}

/// Refines the FEM mesh `levels` times around the tumor, or around the
/// centre of `Ω_FEM` for phantoms without one.
pub fn refine_around<S: Real>(
    domain: &HybridDomain<S>,
    spec: &PhantomSpec<S>,
    levels: usize,
) -> Result<HybridDomain<S>> {
    let (center, radius) = match &spec.tumor {
        Some(t) => (t.shape.center(), t.shape.bounding_radius()),
        None => {
            let (lo, hi) = (domain.spec.fem_lo, domain.spec.fem_hi);
            let ext = (hi[0] - lo[0]).min(hi[1] - lo[1]).min(hi[2] - lo[2]);
            let half = S::lit(0.5);
            (
                [(lo[0] + hi[0]) * half, (lo[1] + hi[1]) * half, (lo[2] + hi[2]) * half],
                ext * S::lit(0.15),
            )
        }
    };
    let mut current = domain.clone();
    for _ in 0..levels {
        let mesh = &current.mesh;
        let marked: Vec<usize> = (0..mesh.n_tets())
            .filter(|&k| {
                if !current.all_free(k) {
                    return false;
                }
                let c = mesh.centroid(k);
                let d = (0..3).map(|i| (c[i] - center[i]).powi(2)).sum::<S>().sqrt();
                d <= radius + mesh.longest_edge(k)
            })
            .collect();
        let (next, used) = current.refine_fem_guarded(&marked)?;
        if used.is_empty() {
            return Err(Error::Config("no refinable elements around the inclusion".into()));
        }
        current = next;
    }
    Ok(current)
}

/// Simulates backscattered traces on the top boundary for the phantom on a
/// locally refined copy of `domain`. The result lives on the fine mesh's
/// time grid.
pub fn generate_observations<S: Real>(
    domain: &HybridDomain<S>,
    phantom: &PhantomSpec<S>,
    setup: &DataGeneration<S>,
) -> Result<ObservationSet<S>> {
    if setup.fine_level <= setup.inversion_level && !setup.allow_inverse_crime {
        return Err(Error::InverseCrime {
            data_level: setup.fine_level,
            inversion_level: setup.inversion_level,
        });
    }
    let fine = refine_around(domain, phantom, setup.fine_level)?;
    let material = build_phantom(phantom, &fine)?;
    let dt = stable_dt(&fine, phantom.eps_max, setup.cfl)?;
    let mut problem = ForwardProblem::new(&fine, TimeGrid::covering(setup.t_end, dt)?, setup.source.clone());
    problem.model = setup.model;
    let out = run_forward(&problem, &material, &fine.partition.top_nodes, RunOptions::default())?;
    Ok(ObservationSet::new(out.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_hybrid_domain;
    use crate::solver::TraceRecord;

    fn small_spec() -> DomainSpec<f64> {
        DomainSpec {
            omega_lo: [0.0; 3],
            omega_hi: [4.0, 4.0, 5.0],
            fem_lo: [0.5; 3],
            fem_hi: [3.5, 3.5, 4.5],
            h_fdm: 0.5,
        }
    }

    #[test]
    fn preset_values() {
        let spec = DomainSpec::<f64>::melanoma(1.0);
        let dom = build_hybrid_domain(spec.clone()).unwrap();
        let s1 = PhantomSpec::preset("stage1", &spec).unwrap();
        let m = build_phantom(&s1, &dom).unwrap();
        let c = s1.tumor.as_ref().unwrap().shape.center();
        let inside = dom.mesh.vertices().iter().position(|x| *x == c).unwrap();
        assert_eq!((m.eps[inside], m.sigma[inside]), (8.0, 1.2));
        assert_eq!(m.eps.iter().cloned().fold(0.0, f64::max), 8.0);
        assert!(m.eps.iter().zip(&m.sigma).all(|(&e, &s)| (e == 1.0 && s == 0.0) || (e == 8.0 && s == 1.2)));
        let s2 = build_phantom(&PhantomSpec::preset("stage2", &spec).unwrap(), &dom).unwrap();
        assert_eq!(s2.eps.iter().cloned().fold(0.0, f64::max), 9.0);
        let h = build_phantom(&PhantomSpec::preset("homogeneous", &spec).unwrap(), &dom).unwrap();
        assert!(h.eps.iter().all(|&e| e == 1.0) && h.sigma.iter().all(|&s| s == 0.0));
        let real = build_phantom(&PhantomSpec::preset("layered", &spec).unwrap(), &dom).unwrap();
        real.validate(&dom).unwrap();
        assert_eq!(real.eps.iter().cloned().fold(0.0, f64::max), 45.0);
        assert!(PhantomSpec::<f64>::preset("stage3", &spec).is_err());
    }

    #[test]
    fn tumor_outside_the_fem_box_is_rejected() {
        let spec = DomainSpec::<f64>::melanoma(1.0);
        let dom = build_hybrid_domain(spec).unwrap();
        let mut p = PhantomSpec::homogeneous();
        p.tumor = Some(Inclusion {
            shape: Shape::Sphere { center: [9.5, 5.0, 5.0], radius: 1.0 },
            eps: 8.0,
            sigma: 1.2,
            stage: None,
        });
        assert!(matches!(build_phantom(&p, &dom), Err(Error::Config(_))));
    }

    fn trace(values: Vec<[f64; 3]>) -> ObservationSet<f64> {
        let g = TimeGrid::from_steps(0.1, values.len());
        let mut t = TraceRecord::zeros(vec![0], &g);
        t.values = values;
        ObservationSet::new(t)
    }

    #[test]
    fn noise_examples() {
        let obs = trace(vec![[1.0, 0.0, -2.0]; 50]);
        let same = add_noise(&obs, NoiseSpec { delta: 0.0, seed: 3 }).unwrap();
        assert_eq!(same.trace, obs.trace);
        let a = add_noise(&obs, NoiseSpec { delta: 0.1, seed: 7 }).unwrap();
        let b = add_noise(&obs, NoiseSpec { delta: 0.1, seed: 7 }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.noise_level, 0.1);
        assert!(a.trace.values.iter().all(|v| v[1] == 0.0));
        assert!(a.trace.values.iter().all(|v| (v[0] - 1.0).abs() <= 0.1 && v[0] != 1.0));
        assert!(add_noise(&obs, NoiseSpec { delta: -0.1, seed: 7 }).is_err());
    }

    #[test]
    fn noise_rms_matches_uniform_moments() {
        // RMS of δu for u ~ U[−1, 1] is δ/√3
        let obs = trace(vec![[1.0; 3]; 100_000 / 3 + 1]);
        let noisy = add_noise(&obs, NoiseSpec { delta: 0.1, seed: 11 }).unwrap();
        let rel: Vec<f64> = noisy.trace.values.iter().flat_map(|v| v.iter().map(|x| x - 1.0)).collect();
        let rms = (rel.iter().map(|x| x * x).sum::<f64>() / rel.len() as f64).sqrt();
        let expected = 0.1 / 3f64.sqrt();
        assert!((rms - expected).abs() < 0.02 * expected, "{rms} vs {expected}");
    }

    fn gen(fine_level: usize) -> DataGeneration<f64> {
        DataGeneration {
            source: SourceSpec::new(3.0),
            t_end: 6.0,
            cfl: 0.9,
            model: BoundaryModel::PlaneWave,
            fine_level,
            inversion_level: 0,
            allow_inverse_crime: false,
        }
    }

    #[test]
    fn inverse_crime_is_refused_unless_allowed() {
        let dom = build_hybrid_domain(small_spec()).unwrap();
        let p = PhantomSpec::homogeneous();
        assert!(matches!(
            generate_observations(&dom, &p, &gen(0)),
            Err(Error::InverseCrime { data_level: 0, inversion_level: 0 })
        ));
        let mut g = gen(0);
        g.allow_inverse_crime = true;
        let obs = generate_observations(&dom, &p, &g).unwrap();
        assert_eq!(obs.trace.nodes, dom.partition.top_nodes);
    }

    #[test]
    fn scattered_signal_appears_after_the_direct_arrival() {
        let spec = small_spec();
        let dom = build_hybrid_domain(spec.clone()).unwrap();
        let mut tumor = PhantomSpec::homogeneous();
        tumor.tumor = Some(Inclusion {
            shape: Shape::Sphere { center: [2.0, 2.0, 2.5], radius: 1.0 },
            eps: 8.0,
            sigma: 1.2,
            stage: Some(1),
        });
        let fine = refine_around(&dom, &tumor, 1).unwrap();
        let dt = stable_dt(&fine, 10.0, 0.9).unwrap();
        let g = TimeGrid::covering(6.0, dt).unwrap();
        let problem = ForwardProblem::new(&fine, g, SourceSpec::new(3.0));
        let run = |p: &PhantomSpec<f64>| {
            let m = build_phantom(p, &fine).unwrap();
            run_forward(&problem, &m, &fine.partition.top_nodes, RunOptions::default()).unwrap().trace
        };
        let (a, b) = (run(&tumor), run(&PhantomSpec::homogeneous()));
        let nn = a.nodes.len();
        let diff_in = |lo: f64, hi: f64| {
            (0..g.n_steps)
                .filter(|&n| g.time(n + 1) >= lo && g.time(n + 1) < hi)
                .flat_map(|n| (0..nn).map(move |s| (n, s)))
                .map(|(n, s)| {
                    let (x, y) = (a.at(n, s), b.at(n, s));
                    (0..3).map(|c| (x[c] - y[c]).abs()).fold(0.0, f64::max)
                })
                .fold(0.0, f64::max)
        };
        // the nodal inclusion reaches up to about z = 4 and the top of Ω is
        // at z = 5, so echoes need about 2 time units to return
        assert!(diff_in(0.0, 1.5) < 1e-2 * diff_in(2.5, 6.0));
        assert!(diff_in(2.5, 6.0) > 0.0);
    }
}
