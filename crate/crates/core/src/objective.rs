//! Tikhonov functional, its smoothing weight in time and the adjoint-based
//! gradients with respect to the nodal permittivity and conductivity.
//!
//! Gradients are Riesz representatives in the lumped `L²(Ω_FEM)` inner
//! product `(f, g) = Σ m_i f_i g_i`, so `(g_ε, δε) + (g_σ, δσ)` is the
//! derivative of the discrete functional in the direction `(δε, δσ)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::HybridDomain;
use crate::scalar::{Real, Vec3};
use crate::solver::{
    EnergySample, FdOperator, FemOperators, ForwardProblem, HybridSolver, MaterialField,
    RunOptions, TimeGrid, TraceRecord,
};

/// Temporal weight: `1` on `[0, T−ζ]`, then a C¹ cubic ramp down to `0` at `T`.
pub fn smoothing_z<S: Real>(t: S, t_end: S, zeta: S) -> S {
    let start = t_end - zeta;
    if t <= start {
        S::one()
    } else if t >= t_end {
        S::zero()
    } else {
        let s = (t - start) / zeta;
        S::one() - s * s * (S::lit(3.0) - S::lit(2.0) * s)
    }
}

/// Boundary observations with the indicator of where they count.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet<S> {
    pub trace: TraceRecord<S>,
    /// Per trace node: whether it enters the misfit.
    pub mask: Vec<bool>,
    /// Field components that enter the misfit.
    pub components: [bool; 3],
    /// Width of the final ramp of the time weight.
    pub zeta: S,
    pub noise_level: S,
    pub seed: u64,
}

impl<S: Real> ObservationSet<S> {
    /// All nodes and components observed, `ζ = T/10`, no noise.
    pub fn new(trace: TraceRecord<S>) -> Self {
        let t_end = trace.time_grid().t_end;
        Self {
            mask: vec![true; trace.nodes.len()],
            trace,
            components: [true; 3],
            zeta: t_end * S::lit(0.1),
            noise_level: S::zero(),
            seed: 0,
        }
    }

    pub fn time_grid(&self) -> TimeGrid<S> {
        self.trace.time_grid()
    }

    /// Same observations on another time grid over the same interval.
    pub fn resampled(&self, time: &TimeGrid<S>) -> Self {
        let mut out = self.clone();
        if self.trace.n_steps != time.n_steps || self.trace.dt != time.dt {
            out.trace = self.trace.resample(time);
        }
        out
    }

    /// Checks the set against the domain: observed nodes on the top face.
    pub fn validate(&self, domain: &HybridDomain<S>) -> Result<()> {
        if self.mask.len() != self.trace.nodes.len() {
            return Err(Error::Contract("mask length differs from node count".into()));
        }
        let top_z = domain.grid.dims[2] - 1;
        for (&id, &m) in self.trace.nodes.iter().zip(&self.mask) {
            if id >= domain.grid.len() {
                return Err(Error::Contract(format!("observation node {id} out of range")));
            }
            if m && domain.grid.ijk(id)[2] != top_z {
                return Err(Error::Contract(format!(
                    "observed node {id} is not on the top boundary"
                )));
            }
        }
        let t_end = self.time_grid().t_end;
        if !(self.zeta > S::zero()) || (t_end > S::zero() && !(self.zeta < t_end)) {
            return Err(Error::Config(format!("ramp width ζ = {} outside (0, T)", self.zeta)));
        }
        Ok(())
    }

    /// Surface quadrature weights per node and component (masked).
    pub fn weights(&self, fd: &FdOperator<S>) -> Vec<Vec3<S>> {
        self.trace
            .nodes
            .iter()
            .zip(&self.mask)
            .map(|(&id, &m)| {
                let a = if m { fd.area_top[id] } else { S::zero() };
                let mut w = [S::zero(); 3];
                for c in 0..3 {
                    if self.components[c] {
                        w[c] = a;
                    }
                }
                w
            })
            .collect()
    }

    /// `z(t_{n+1})` for every trace sample `n`.
    pub fn z_values(&self) -> Vec<S> {
        let g = self.time_grid();
        (0..g.n_steps)
            .map(|n| smoothing_z(g.time(n + 1), g.t_end, self.zeta))
            .collect()
    }
}

fn check_shapes<S: Real>(trace: &TraceRecord<S>, obs: &ObservationSet<S>) -> Result<()> {
    if trace.nodes != obs.trace.nodes || trace.n_steps != obs.trace.n_steps || trace.dt != obs.trace.dt {
        return Err(Error::Contract(format!(
            "trace ({} nodes, {} steps, dt {}) does not match observations ({} nodes, {} steps, dt {})",
            trace.nodes.len(),
            trace.n_steps,
            trace.dt,
            obs.trace.nodes.len(),
            obs.trace.n_steps,
            obs.trace.dt
        )));
    }
    Ok(())
}

/// `½ Σ_n dt z(t_n) Σ_i w_i |u_i − d_i|²` for explicit weights.
pub fn weighted_misfit<S: Real>(
    residual: &TraceRecord<S>,
    weights: &[Vec3<S>],
    z: &[S],
) -> S {
    let nn = residual.nodes.len();
    let half = S::lit(0.5);
    (0..residual.n_steps)
        .map(|n| {
            let r = &residual.values[n * nn..(n + 1) * nn];
            let s: S = r
                .iter()
                .zip(weights)
                .map(|(v, w)| w[0] * v[0] * v[0] + w[1] * v[1] * v[1] + w[2] * v[2] * v[2])
                .sum();
            half * residual.dt * z[n] * s
        })
        .sum()
}

fn residual<S: Real>(trace: &TraceRecord<S>, obs: &ObservationSet<S>) -> TraceRecord<S> {
    let mut r = trace.clone();
    for (a, b) in r.values.iter_mut().zip(&obs.trace.values) {
        for c in 0..3 {
            a[c] -= b[c];
        }
    }
    r
}

/// Data term of the functional for a simulated trace.
pub fn evaluate_misfit<S: Real>(
    trace: &TraceRecord<S>,
    obs: &ObservationSet<S>,
    fd: &FdOperator<S>,
) -> Result<S> {
    check_shapes(trace, obs)?;
    Ok(weighted_misfit(&residual(trace, obs), &obs.weights(fd), &obs.z_values()))
}

/// Regularization weights, decay exponent and prior fields.
#[derive(Clone, Debug, PartialEq)]
pub struct TikhonovParams<S> {
    pub gamma_eps: S,
    pub gamma_sigma: S,
    pub p: S,
    pub eps_prior: Vec<S>,
    pub sigma_prior: Vec<S>,
}

impl<S: Real> TikhonovParams<S> {
    /// Priors `ε⁰ = 1`, `σ⁰ = 0`.
    pub fn vacuum_prior(n: usize, gamma_eps: S, gamma_sigma: S, p: S) -> Self {
        Self {
            gamma_eps,
            gamma_sigma,
            p,
            eps_prior: vec![S::one(); n],
            sigma_prior: vec![S::zero(); n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_eps >= S::zero() && self.gamma_sigma >= S::zero()) {
            return Err(Error::Config("regularization weights must be nonnegative".into()));
        }
        if !(self.p > S::zero() && self.p < S::one()) {
            return Err(Error::Config(format!("decay exponent p = {} outside (0, 1)", self.p)));
        }
        Ok(())
    }
}

/// `(γ_ε/2)‖ε − ε⁰‖² + (γ_σ/2)‖σ − σ⁰‖²` with lumped quadrature weights `m`.
pub fn regularization<S: Real>(material: &MaterialField<S>, params: &TikhonovParams<S>, m: &[S]) -> S {
    let half = S::lit(0.5);
    let mut se = S::zero();
    let mut ss = S::zero();
    for i in 0..m.len() {
        let de = material.eps[i] - params.eps_prior[i];
        let ds = material.sigma[i] - params.sigma_prior[i];
        se += m[i] * de * de;
        ss += m[i] * ds * ds;
    }
    half * (params.gamma_eps * se + params.gamma_sigma * ss)
}

/// Misfit plus regularization.
pub fn evaluate_tikhonov<S: Real>(
    trace: &TraceRecord<S>,
    obs: &ObservationSet<S>,
    material: &MaterialField<S>,
    params: &TikhonovParams<S>,
    fd: &FdOperator<S>,
    lumped_volume: &[S],
) -> Result<S> {
    Ok(evaluate_misfit(trace, obs, fd)? + regularization(material, params, lumped_volume))
}

/// Nodal gradients on the FEM mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPair<S> {
    pub g_eps: Vec<S>,
    pub g_sigma: Vec<S>,
}

fn check_histories<S: Real>(u: &[Vec<Vec3<S>>], lambda: &[Vec<Vec3<S>>], n: usize) -> Result<()> {
    if u.len() != lambda.len() + 1 || lambda.is_empty() {
        return Err(Error::Contract(format!(
            "history lengths {} (field) and {} (adjoint) do not fit one time grid",
            u.len(),
            lambda.len()
        )));
    }
    if u.iter().chain(lambda).any(|h| h.len() != n) {
        return Err(Error::Contract("history snapshot size differs from vertex count".into()));
    }
    Ok(())
}

#[inline]
fn dot<S: Real>(a: Vec3<S>, b: Vec3<S>) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// `g_ε = γ_ε(ε−ε⁰) − λ(0)·f₁ − Σ dt ∂ₜλ·∂ₜE + ⟨Σ dt div λ div E⟩`, with
/// forward differences in time and the element products volume-averaged to
/// the vertices. `u` holds `u⁻¹ … u^N`, `lambda` holds `λ⁰ … λ^N`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_grad_eps<S: Real>(
    domain: &HybridDomain<S>,
    ops: &FemOperators<S>,
    u: &[Vec<Vec3<S>>],
    lambda: &[Vec<Vec3<S>>],
    material: &MaterialField<S>,
    params: &TikhonovParams<S>,
    f1: Option<&[Vec3<S>]>,
    dt: S,
) -> Result<Vec<S>> {
    let nv = domain.mesh.n_vertices();
    check_histories(u, lambda, nv)?;
    let n_steps = lambda.len() - 1;
    let inv_dt = S::one() / dt;
    let mesh = &domain.mesh;

    // element sums Σ_n dt (div λⁿ)(div uⁿ)
    let mut div_sum = vec![S::zero(); mesh.n_tets()];
    for n in 0..n_steps {
        let dl = ops.divergence(mesh, &lambda[n]);
        if dl.iter().all(|&x| x == S::zero()) {
            continue;
        }
        let du = ops.divergence(mesh, &u[n + 1]);
        div_sum
            .par_iter_mut()
            .zip(dl.par_iter().zip(du.par_iter()))
            .for_each(|(s, (a, b))| *s += dt * *a * *b);
    }

    let g = (0..nv)
        .into_par_iter()
        .map(|i| {
            if !domain.is_free(i) {
                return S::zero();
            }
            let mut g = params.gamma_eps * (material.eps[i] - params.eps_prior[i]);
            if let Some(f1) = f1 {
                g -= dot(lambda[0][i], f1[i]);
            }
            let mut acc = S::zero();
            for n in 0..n_steps {
                let dl = [
                    lambda[n + 1][i][0] - lambda[n][i][0],
                    lambda[n + 1][i][1] - lambda[n][i][1],
                    lambda[n + 1][i][2] - lambda[n][i][2],
                ];
                let du = [
                    u[n + 2][i][0] - u[n + 1][i][0],
                    u[n + 2][i][1] - u[n + 1][i][1],
                    u[n + 2][i][2] - u[n + 1][i][2],
                ];
                acc += dot(dl, du);
            }
            g -= acc * inv_dt;
            let (mut num, mut den) = (S::zero(), S::zero());
            for &(k, _) in &ops.incident[i] {
                num += ops.volume[k] * div_sum[k];
                den += ops.volume[k];
            }
            g + num / den
        })
        .collect();
    Ok(g)
}

/// `g_σ = γ_σ(σ−σ⁰) + Σ dt λ·∂ₜE` with centred differences in time.
pub fn assemble_grad_sigma<S: Real>(
    domain: &HybridDomain<S>,
    u: &[Vec<Vec3<S>>],
    lambda: &[Vec<Vec3<S>>],
    material: &MaterialField<S>,
    params: &TikhonovParams<S>,
) -> Result<Vec<S>> {
    let nv = domain.mesh.n_vertices();
    check_histories(u, lambda, nv)?;
    let n_steps = lambda.len() - 1;
    let half = S::lit(0.5);
    let g = (0..nv)
        .into_par_iter()
        .map(|i| {
            if !domain.is_free(i) {
                return S::zero();
            }
            let mut acc = S::zero();
            for n in 0..n_steps {
                let du = [
                    u[n + 2][i][0] - u[n][i][0],
                    u[n + 2][i][1] - u[n][i][1],
                    u[n + 2][i][2] - u[n][i][2],
                ];
                acc += dot(lambda[n][i], du);
            }
            params.gamma_sigma * (material.sigma[i] - params.sigma_prior[i]) + half * acc
        })
        .collect();
    Ok(g)
}

/// Value of the functional with its parts and the simulated trace.
#[derive(Clone, Debug)]
pub struct Evaluation<S> {
    pub value: S,
    pub misfit: S,
    pub regularization: S,
    pub trace: TraceRecord<S>,
    pub energy: Vec<EnergySample<S>>,
}

/// The reduced functional `J(ε, σ)` of one forward problem and data set.
pub struct Objective<'p, 'd, S> {
    pub problem: &'p ForwardProblem<'d, S>,
    pub obs: &'p ObservationSet<S>,
    pub params: TikhonovParams<S>,
    fd: FdOperator<S>,
}

impl<'p, 'd, S: Real> Objective<'p, 'd, S> {
    pub fn new(
        problem: &'p ForwardProblem<'d, S>,
        obs: &'p ObservationSet<S>,
        params: TikhonovParams<S>,
    ) -> Result<Self> {
        params.validate()?;
        obs.validate(problem.domain)?;
        if obs.trace.n_steps != problem.time.n_steps || obs.trace.dt != problem.time.dt {
            return Err(Error::Contract(
                "observations are not sampled on the problem's time grid".into(),
            ));
        }
        let n = problem.domain.mesh.n_vertices();
        if params.eps_prior.len() != n || params.sigma_prior.len() != n {
            return Err(Error::Contract("prior length differs from vertex count".into()));
        }
        Ok(Self {
            problem,
            obs,
            params,
            fd: FdOperator::new(&problem.domain.grid),
        })
    }

    pub fn fd(&self) -> &FdOperator<S> {
        &self.fd
    }

    fn finish(&self, solver: &HybridSolver<'_, '_, S>, material: &MaterialField<S>, trace: TraceRecord<S>, energy: Vec<EnergySample<S>>) -> Result<Evaluation<S>> {
        let misfit = evaluate_misfit(&trace, self.obs, &self.fd)?;
        let reg = regularization(material, &self.params, &solver.fem.lumped_volume);
        Ok(Evaluation {
            value: misfit + reg,
            misfit,
            regularization: reg,
            trace,
            energy,
        })
    }

    pub fn evaluate(&self, material: &MaterialField<S>) -> Result<Evaluation<S>> {
        let solver = HybridSolver::new(self.problem, material)?;
        let out = solver.forward(&self.obs.trace.nodes, RunOptions::default())?;
        self.finish(&solver, material, out.trace, out.energy)
    }

    /// Functional value and its gradient from one forward and one adjoint solve.
    pub fn evaluate_with_gradient(
        &self,
        material: &MaterialField<S>,
    ) -> Result<(Evaluation<S>, GradientPair<S>)> {
        let solver = HybridSolver::new(self.problem, material)?;
        let out = solver.forward(
            &self.obs.trace.nodes,
            RunOptions {
                store_volume: true,
                snapshot_every: None,
            },
        )?;
        let u = out.history.expect("history requested");
        let eval = self.finish(&solver, material, out.trace, out.energy)?;

        let weights = self.obs.weights(&self.fd);
        let z = self.obs.z_values();
        let mut forcing = residual(&eval.trace, self.obs);
        let nn = forcing.nodes.len();
        for (n, zn) in z.iter().enumerate() {
            for s in 0..nn {
                let v = forcing.at_mut(n, s);
                for c in 0..3 {
                    v[c] *= *zn * weights[s][c];
                }
            }
        }
        let adj = solver.adjoint(&forcing)?;
        let f1 = self.problem.initial.as_ref().map(|d| d.f1.as_slice());
        let g_eps = assemble_grad_eps(
            self.problem.domain,
            &solver.fem,
            &u,
            &adj.history,
            material,
            &self.params,
            f1,
            self.problem.time.dt,
        )?;
        let g_sigma = assemble_grad_sigma(self.problem.domain, &u, &adj.history, material, &self.params)?;
        Ok((eval, GradientPair { g_eps, g_sigma }))
    }
}

/// Lumped `L²(Ω_FEM)` inner product.
pub fn lumped_inner<S: Real>(m: &[S], a: &[S], b: &[S]) -> S {
    m.iter().zip(a).zip(b).map(|((&m, &x), &y)| m * x * y).sum()
}

/// Central difference estimates of the directional derivative of `J` next to
/// the adjoint prediction `(g_ε, δε) + (g_σ, δσ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalCheck<S> {
    /// `(τ, [J(q+τδ) − J(q−τδ)] / 2τ)`.
    pub estimates: Vec<(S, S)>,
    pub adjoint: S,
}

impl<S: Real> DirectionalCheck<S> {
    pub fn relative_errors(&self) -> Vec<S> {
        self.estimates
            .iter()
            .map(|&(_, e)| {
                let scale = self.adjoint.abs().max(e.abs());
                if scale == S::zero() {
                    S::zero()
                } else {
                    (e - self.adjoint).abs() / scale
                }
            })
            .collect()
    }

    /// Smallest relative error over the τ values.
    pub fn best_relative_error(&self) -> S {
        self.relative_errors()
            .into_iter()
            .fold(S::infinity(), S::min)
    }
}

/// Compares the adjoint gradient with central differences of `J` along
/// `(δε, δσ)` for each `τ`.
pub fn directional_derivative_oracle<S: Real>(
    objective: &Objective<'_, '_, S>,
    material: &MaterialField<S>,
    d_eps: &[S],
    d_sigma: &[S],
    taus: &[S],
) -> Result<DirectionalCheck<S>> {
    let domain = objective.problem.domain;
    let n = domain.mesh.n_vertices();
    if d_eps.len() != n || d_sigma.len() != n {
        return Err(Error::Contract("direction length differs from vertex count".into()));
    }
    for i in 0..n {
        if !domain.is_free(i) && (d_eps[i] != S::zero() || d_sigma[i] != S::zero()) {
            return Err(Error::Contract(format!(
                "direction is nonzero on vacuum-layer vertex {i}"
            )));
        }
    }
    let shifted = |tau: S| -> Result<MaterialField<S>> {
        let mut m = material.clone();
        for i in 0..n {
            m.eps[i] += tau * d_eps[i];
            m.sigma[i] += tau * d_sigma[i];
        }
        m.validate(domain).map_err(|e| {
            Error::Contract(format!("perturbation τ = {tau} leaves the admissible set: {e}"))
        })?;
        Ok(m)
    };
    let mut estimates = Vec::with_capacity(taus.len());
    for &tau in taus {
        let plus = objective.evaluate(&shifted(tau)?)?.value;
        let minus = objective.evaluate(&shifted(-tau)?)?.value;
        estimates.push((tau, (plus - minus) / (tau + tau)));
    }
    let (_, grad) = objective.evaluate_with_gradient(material)?;
    let m = &crate::solver::assemble_fem_operators(&domain.mesh, material)?.lumped_volume;
    let adjoint = lumped_inner(m, &grad.g_eps, d_eps) + lumped_inner(m, &grad.g_sigma, d_sigma);
    Ok(DirectionalCheck { estimates, adjoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_hybrid_domain, DomainSpec};
    use crate::solver::{run_forward, stable_dt, SourceSpec};
    use proptest::prelude::*;

    fn domain() -> HybridDomain<f64> {
        build_hybrid_domain(DomainSpec {
            omega_lo: [0.0; 3],
            omega_hi: [4.0, 4.0, 5.0],
            fem_lo: [0.5; 3],
            fem_hi: [3.5, 3.5, 4.5],
            h_fdm: 0.5,
        })
        .unwrap()
    }

    fn problem(dom: &HybridDomain<f64>) -> ForwardProblem<'_, f64> {
        let dt = stable_dt(dom, 10.0, 0.9).unwrap();
        ForwardProblem::new(dom, TimeGrid::covering(6.0, dt).unwrap(), SourceSpec::new(3.0))
    }

    fn bump(dom: &HybridDomain<f64>, c: [f64; 3], r: f64, amp: f64) -> Vec<f64> {
        dom.mesh
            .vertices()
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let d2 = (0..3).map(|k| (x[k] - c[k]).powi(2)).sum::<f64>();
                if dom.is_free(i) && d2 < r * r {
                    amp * (1.0 - d2 / (r * r)).powi(2)
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn phantom(dom: &HybridDomain<f64>) -> MaterialField<f64> {
        let mut m = MaterialField::vacuum(dom.mesh.n_vertices(), 10.0, 2.0);
        let e = bump(dom, [2.0, 2.0, 2.5], 1.2, 4.0);
        let s = bump(dom, [2.0, 2.0, 2.5], 1.2, 0.8);
        for i in 0..e.len() {
            m.eps[i] += e[i];
            m.sigma[i] += s[i];
        }
        m
    }

    fn observations(p: &ForwardProblem<'_, f64>, m: &MaterialField<f64>) -> ObservationSet<f64> {
        let out = run_forward(p, m, &p.domain.partition.top_nodes, RunOptions::default()).unwrap();
        ObservationSet::new(out.trace)
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(smoothing_z::<f64>(0.0, 12.0, 1.2), 1.0);
        assert_eq!(smoothing_z::<f64>(12.0, 12.0, 1.2), 0.0);
        assert!((smoothing_z::<f64>(12.0 - 0.6, 12.0, 1.2) - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn smoothing_is_bounded_and_monotone(t in 0.0f64..12.0, dt in 0.0f64..1.0, zeta in 0.1f64..6.0) {
            let a = smoothing_z(t, 12.0, zeta);
            let b = smoothing_z((t + dt).min(12.0), 12.0, zeta);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(b <= a + 1e-15);
        }

        #[test]
        fn misfit_scales_quadratically(c in -3.0f64..3.0, k in 0.1f64..4.0) {
            let g = TimeGrid::from_steps(0.5, 4);
            let mut r = TraceRecord::zeros(vec![0, 1], &g);
            for v in r.values.iter_mut() { *v = [c, 0.5 * c, 0.0]; }
            let w = vec![[1.0; 3], [0.25; 3]];
            let z = vec![1.0; 4];
            let base = weighted_misfit(&r, &w, &z);
            prop_assert!(base >= 0.0);
            for v in r.values.iter_mut() { for x in v.iter_mut() { *x *= k; } }
            prop_assert!((weighted_misfit(&r, &w, &z) - k * k * base).abs() <= 1e-12 * (1.0 + base * k * k));
        }
    }

    #[test]
    fn misfit_examples() {
        // one unit-area node carrying c over unit time with unit weight → c²/2
        let g = TimeGrid::from_steps(0.25, 4);
        let mut r = TraceRecord::zeros(vec![0], &g);
        for v in r.values.iter_mut() {
            *v = [0.0, 3.0, 0.0];
        }
        assert!((weighted_misfit::<f64>(&r, &[[1.0; 3]], &[1.0; 4]) - 4.5).abs() < 1e-14);
        let dom = domain();
        let p = problem(&dom);
        let obs = observations(&p, &phantom(&dom));
        let fd = FdOperator::new(&dom.grid);
        assert_eq!(evaluate_misfit(&obs.trace, &obs, &fd).unwrap(), 0.0);
    }

    #[test]
    fn tikhonov_examples() {
        let n = 5;
        let m = vec![0.2; n];
        let mut mat = MaterialField::vacuum(n, 10.0, 2.0);
        let mut params = TikhonovParams::vacuum_prior(n, 2.0, 1.0, 0.5);
        assert_eq!(regularization(&mat, &params, &m), 0.0);
        for e in mat.eps.iter_mut() {
            *e = 2.0;
        }
        // ε − ε⁰ ≡ 1 on unit volume with γ_ε = 2 → 1
        assert!((regularization::<f64>(&mat, &params, &m) - 1.0).abs() < 1e-15);
        params.gamma_eps = 0.0;
        assert_eq!(regularization(&mat, &params, &m), 0.0);
    }

    #[test]
    fn zero_adjoint_leaves_only_regularization() {
        let dom = domain();
        let ops = crate::solver::assemble_fem_operators(&dom.mesh, &phantom(&dom)).unwrap();
        let n = dom.mesh.n_vertices();
        let mat = phantom(&dom);
        let params = TikhonovParams::vacuum_prior(n, 0.3, 0.7, 0.5);
        let u: Vec<Vec<[f64; 3]>> = (0..6).map(|k| vec![[k as f64, 1.0, 2.0]; n]).collect();
        let lambda = vec![vec![[0.0; 3]; n]; 5];
        let ge = assemble_grad_eps(&dom, &ops, &u, &lambda, &mat, &params, None, 0.1).unwrap();
        let gs = assemble_grad_sigma(&dom, &u, &lambda, &mat, &params).unwrap();
        for i in 0..n {
            let (e, s) = if dom.is_free(i) {
                (0.3 * (mat.eps[i] - 1.0), 0.7 * mat.sigma[i])
            } else {
                (0.0, 0.0)
            };
            assert!((ge[i] - e).abs() < 1e-14);
            assert!((gs[i] - s).abs() < 1e-14);
        }
        assert!(assemble_grad_sigma(&dom, &u[1..], &lambda, &mat, &params).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let dom = domain();
        let p = problem(&dom);
        let obs = observations(&p, &phantom(&dom));
        let n = dom.mesh.n_vertices();
        let params = TikhonovParams::vacuum_prior(n, 1e-3, 1e-3, 0.5);
        let obj = Objective::new(&p, &obs, params).unwrap();
        let mut base = MaterialField::vacuum(n, 10.0, 2.0);
        let b = bump(&dom, [1.8, 2.1, 2.8], 1.0, 1.5);
        let s = bump(&dom, [1.8, 2.1, 2.8], 1.0, 0.3);
        for i in (0..n).filter(|&i| dom.is_free(i)) {
            base.eps[i] += 0.5 + b[i];
            base.sigma[i] += 0.2 + s[i];
        }
        let de = bump(&dom, [2.2, 1.9, 2.4], 1.1, 1.0);
        let ds = bump(&dom, [2.0, 2.3, 2.6], 0.9, 0.5);
        let check = directional_derivative_oracle(&obj, &base, &de, &ds, &[1e-2, 1e-3, 1e-4]).unwrap();
        assert!(check.adjoint.abs() > 0.0);
        assert!(check.best_relative_error() < 1e-4, "{check:?}");
    }

    #[test]
    fn zero_direction_gives_zero_estimates() {
        let dom = domain();
        let p = problem(&dom);
        let obs = observations(&p, &phantom(&dom));
        let n = dom.mesh.n_vertices();
        let obj = Objective::new(&p, &obs, TikhonovParams::vacuum_prior(n, 1e-2, 1e-2, 0.5)).unwrap();
        let z = vec![0.0; n];
        let check =
            directional_derivative_oracle(&obj, &MaterialField::vacuum(n, 10.0, 2.0), &z, &z, &[1e-2]).unwrap();
        assert_eq!(check.estimates[0].1, 0.0);
        assert_eq!(check.adjoint, 0.0);
    }

    #[test]
    fn inadmissible_perturbation_is_rejected() {
        let dom = domain();
        let p = problem(&dom);
        let obs = observations(&p, &phantom(&dom));
        let n = dom.mesh.n_vertices();
        let obj = Objective::new(&p, &obs, TikhonovParams::vacuum_prior(n, 1e-2, 1e-2, 0.5)).unwrap();
        // ε = 1 minus anything leaves the box
        let d = bump(&dom, [2.0, 2.0, 2.5], 1.0, 1.0);
        let r = directional_derivative_oracle(&obj, &MaterialField::vacuum(n, 10.0, 2.0), &d, &vec![0.0; n], &[1e-2]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_vanish_off_the_free_region() {
        let dom = domain();
        let p = problem(&dom);
        let obs = observations(&p, &phantom(&dom));
        let n = dom.mesh.n_vertices();
        let obj = Objective::new(&p, &obs, TikhonovParams::vacuum_prior(n, 1e-2, 1e-2, 0.5)).unwrap();
        let (eval, g) = obj.evaluate_with_gradient(&MaterialField::vacuum(n, 10.0, 2.0)).unwrap();
        assert!(eval.misfit > 0.0);
        for i in (0..n).filter(|&i| !dom.is_free(i)) {
            assert_eq!(g.g_eps[i], 0.0);
            assert_eq!(g.g_sigma[i], 0.0);
        }
        assert!(g.g_eps.iter().any(|&x| x != 0.0));
    }
}
