//! Conjugate gradient reconstruction of `(ε, σ)` with iteratively decaying
//! Tikhonov weights, and its adaptive variant that refines the FEM mesh
//! where the reconstructed coefficients peak.

use std::io::Write;

use crate::error::{Error, Result};
use crate::mesh::{interpolate_nodal, HybridDomain, TetraMesh};
use crate::objective::{lumped_inner, GradientPair, ObservationSet, Objective, TikhonovParams};
use crate::scalar::{Real, Vec3};
use crate::solver::{stable_dt, BoundaryModel, ForwardProblem, MaterialField, SourceSpec, TimeGrid};

/// Termination tolerances for the inner (CGA) and outer (ACGA) loops.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StoppingCriteria<S> {
    pub eta_eps_1: S,
    pub eta_eps_2: S,
    pub eta_sigma_1: S,
    pub eta_sigma_2: S,
    pub theta_eps_1: S,
    pub theta_eps_2: S,
    pub theta_sigma_1: S,
    pub theta_sigma_2: S,
    /// Largest iteration index `M`; iterations run for `m = 0, …, M`.
    pub max_iters: usize,
    /// Largest refinement index `N`; levels run for `i = 0, …, N`.
    pub max_refinements: usize,
}

impl<S: Real> Default for StoppingCriteria<S> {
    fn default() -> Self {
        let t = S::lit(1e-6);
        Self {
            eta_eps_1: t,
            eta_eps_2: t,
            eta_sigma_1: t,
            eta_sigma_2: t,
            theta_eps_1: t,
            theta_eps_2: t,
            theta_sigma_1: t,
            theta_sigma_2: t,
            max_iters: 20,
            max_refinements: 6,
        }
    }
}

impl<S: Real> StoppingCriteria<S> {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.eta_eps_1,
            self.eta_eps_2,
            self.eta_sigma_1,
            self.eta_sigma_2,
            self.theta_eps_1,
            self.theta_eps_2,
            self.theta_sigma_1,
            self.theta_sigma_2,
        ];
        if all.iter().any(|&t| !(t > S::zero())) {
            return Err(Error::Config("all stopping tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// `((Δε < a₁) ∨ (Δσ < b₁)) ∧ ((g_ε < a₂) ∨ (g_σ < b₂))`.
pub fn termination_test<S: Real>(
    d_eps: S,
    d_sigma: S,
    g_eps: S,
    g_sigma: S,
    tol: [S; 4],
) -> bool {
    let [a1, a2, b1, b2] = tol;
    (d_eps < a1 || d_sigma < b1) && (g_eps < a2 || g_sigma < b2)
}

/// Marking thresholds `β̃`, one pair per refinement; the last pair repeats.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RefinementConfig<S> {
    pub beta_tilde_eps: Vec<S>,
    pub beta_tilde_sigma: Vec<S>,
    /// Stop refining once a mesh would exceed this many tetrahedra.
    pub max_elements: usize,
}

impl<S: Real> Default for RefinementConfig<S> {
    fn default() -> Self {
        Self::constant(S::lit(0.7), S::lit(0.7))
    }
}

impl<S: Real> RefinementConfig<S> {
    pub fn constant(beta_eps: S, beta_sigma: S) -> Self {
        Self {
            beta_tilde_eps: vec![beta_eps],
            beta_tilde_sigma: vec![beta_sigma],
            max_elements: 2_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta_tilde_eps.is_empty() || self.beta_tilde_sigma.is_empty() {
            return Err(Error::Config("at least one β̃ pair is required".into()));
        }
        for &b in self.beta_tilde_eps.iter().chain(&self.beta_tilde_sigma) {
            if !(b > S::zero() && b < S::one()) {
                return Err(Error::Config(format!("β̃ = {b} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn at(&self, level: usize) -> (S, S) {
        let pick = |v: &[S]| v[level.min(v.len() - 1)];
        (pick(&self.beta_tilde_eps), pick(&self.beta_tilde_sigma))
    }
}

/// Initial Tikhonov weights and their decay exponent.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InversionParams<S> {
    pub gamma_eps0: S,
    pub gamma_sigma0: S,
    pub p: S,
}

impl<S: Real> Default for InversionParams<S> {
    fn default() -> Self {
        Self {
            gamma_eps0: S::lit(1e-2),
            gamma_sigma0: S::lit(1e-2),
            p: S::lit(0.5),
        }
    }
}

impl<S: Real> InversionParams<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_eps0 > S::zero() && self.gamma_sigma0 > S::zero()) {
            return Err(Error::Config("initial regularization weights must be positive".into()));
        }
        if !(self.p > S::zero() && self.p < S::one()) {
            return Err(Error::Config(format!("decay exponent p = {} outside (0, 1)", self.p)));
        }
        Ok(())
    }
}

/// Outcome of the direction update.
#[derive(Clone, Debug, PartialEq)]
pub enum Direction<S> {
    /// `d = −g + β d_prev` (`β = 0` on the first iteration).
    Step { d: Vec<S>, beta: S },
    /// The previous gradient vanished: the iteration has converged.
    Converged,
}

/// Fletcher–Reeves direction in the lumped inner product with weights `m`.
/// `prev = None` on the first iteration.
pub fn update_direction<S: Real>(m: &[S], g: &[S], prev: Option<(&[S], &[S])>) -> Direction<S> {
    match prev {
        None => Direction::Step {
            d: g.iter().map(|&x| -x).collect(),
            beta: S::zero(),
        },
        Some((g_prev, d_prev)) => {
            let den = lumped_inner(m, g_prev, g_prev);
            if den == S::zero() {
                return Direction::Converged;
            }
            let beta = lumped_inner(m, g, g) / den;
            Direction::Step {
                d: g.iter().zip(d_prev).map(|(&g, &d)| -g + beta * d).collect(),
                beta,
            }
        }
    }
}

/// Falls back to `−g` when `d` is not a descent direction.
pub fn descent_or_restart<S: Real>(m: &[S], g: &[S], d: Vec<S>) -> Vec<S> {
    if lumped_inner(m, g, &d) > S::zero() {
        g.iter().map(|&x| -x).collect()
    } else {
        d
    }
}

/// `α = −(g, d) / (γ (d, d))`.
pub fn step_size<S: Real>(m: &[S], g: &[S], d: &[S], gamma: S) -> Result<S> {
    if !(gamma > S::zero()) {
        return Err(Error::Config(format!("step size needs γ > 0, got {gamma}")));
    }
    let dd = lumped_inner(m, d, d);
    if dd == S::zero() {
        return Err(Error::Contract("step size along a zero direction".into()));
    }
    Ok(-lumped_inner(m, g, d) / (gamma * dd))
}

/// `γ^{m+1} = γ⁰ / (m+1)^p`, with `γ¹ = γ⁰`.
pub fn regularization_update<S: Real>(gamma0: S, m: usize, p: S) -> S {
    gamma0 / S::from_count(m + 1).powf(p)
}

/// Clamps to the admissible boxes and pins the vacuum layer. Idempotent.
pub fn project_coefficients<S: Real>(material: &mut MaterialField<S>, free: &[bool]) {
    material.project(free);
}

fn lumped_norm<S: Real>(m: &[S], a: &[S]) -> S {
    lumped_inner(m, a, a).sqrt()
}

fn lumped_distance<S: Real>(m: &[S], a: &[S], b: &[S]) -> S {
    m.iter()
        .zip(a.iter().zip(b))
        .map(|(&w, (&x, &y))| w * (x - y) * (x - y))
        .sum::<S>()
        .sqrt()
}

/// One line of the iteration log.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord<S> {
    pub m: usize,
    pub j: S,
    pub misfit: S,
    pub norm_g_eps: S,
    pub norm_g_sigma: S,
    /// Step sizes applied in this iteration.
    pub alpha_eps: S,
    pub alpha_sigma: S,
    /// Regularization weights used in this iteration's functional.
    pub gamma_eps: S,
    pub gamma_sigma: S,
}

pub const LOG_HEADER: &str = "m,J,norm_g_eps,norm_g_sigma,alpha_eps,alpha_sigma,gamma_eps,gamma_sigma";

/// Writes the iteration log as CSV.
pub fn write_log<S: Real, W: Write>(out: &mut W, records: &[IterationRecord<S>]) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.m,
            r.j.as_f64(),
            r.norm_g_eps.as_f64(),
            r.norm_g_sigma.as_f64(),
            r.alpha_eps.as_f64(),
            r.alpha_sigma.as_f64(),
            r.gamma_eps.as_f64(),
            r.gamma_sigma.as_f64()
        )?;
    }
    Ok(())
}

/// Iterate of the conjugate gradient method.
#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub m: usize,
    pub material: MaterialField<S>,
    pub grad: Option<GradientPair<S>>,
    pub d_eps: Vec<S>,
    pub d_sigma: Vec<S>,
    pub alpha_eps: S,
    pub alpha_sigma: S,
    pub gamma_eps: S,
    pub gamma_sigma: S,
    pub j_history: Vec<S>,
}

impl<S: Real> OptimizerState<S> {
    /// Iteration zero: `α⁰ = 1/γ⁰`.
    pub fn new(material: MaterialField<S>, params: &InversionParams<S>) -> Self {
        Self {
            m: 0,
            material,
            grad: None,
            d_eps: Vec::new(),
            d_sigma: Vec::new(),
            alpha_eps: S::one() / params.gamma_eps0,
            alpha_sigma: S::one() / params.gamma_sigma0,
            gamma_eps: params.gamma_eps0,
            gamma_sigma: params.gamma_sigma0,
            j_history: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Tolerance,
    ZeroGradient,
    MaxIterations,
}

/// Result of one conjugate gradient run.
#[derive(Clone, Debug)]
pub struct CgaResult<S> {
    pub material: MaterialField<S>,
    pub records: Vec<IterationRecord<S>>,
    /// Functional at the returned coefficients, with the last weights.
    pub final_j: S,
    pub final_misfit: S,
    /// Gradient norms of the last evaluated iterate.
    pub final_grad_norms: (S, S),
    pub stop: StopReason,
}

/// Everything one CGA run needs besides the observations.
#[derive(Clone, Debug)]
pub struct InversionSetup<S> {
    pub source: SourceSpec<S>,
    pub t_end: S,
    pub cfl: S,
    pub model: BoundaryModel,
    pub params: InversionParams<S>,
    pub stopping: StoppingCriteria<S>,
}

impl<S: Real> InversionSetup<S> {
    /// Time grid for a domain: stable for every admissible `ε`.
    pub fn time_grid(&self, domain: &HybridDomain<S>, eps_max: S) -> Result<TimeGrid<S>> {
        TimeGrid::covering(self.t_end, stable_dt(domain, eps_max, self.cfl)?)
    }
}

/// Runs the conjugate gradient algorithm from `initial`, which also serves
/// as the Tikhonov prior. Observations are resampled to the stable time grid
/// of `domain` when needed.
pub fn cga_run<S: Real>(
    domain: &HybridDomain<S>,
    obs: &ObservationSet<S>,
    initial: &MaterialField<S>,
    setup: &InversionSetup<S>,
    mut on_iteration: impl FnMut(&IterationRecord<S>),
) -> Result<CgaResult<S>> {
    setup.params.validate()?;
    setup.stopping.validate()?;
    initial.validate(domain)?;
    let time = setup.time_grid(domain, initial.eps_max)?;
    let obs = obs.resampled(&time);
    let mut problem = ForwardProblem::new(domain, time, setup.source.clone());
    problem.model = setup.model;
    let n = domain.mesh.n_vertices();
    let tik = TikhonovParams {
        gamma_eps: setup.params.gamma_eps0,
        gamma_sigma: setup.params.gamma_sigma0,
        p: setup.params.p,
        eps_prior: initial.eps.clone(),
        sigma_prior: initial.sigma.clone(),
    };
    let mut objective = Objective::new(&problem, &obs, tik)?;
    let w = domain.mesh.lumped_mass();
    let free = domain.free_mask();
    let stop = &setup.stopping;
    let tol = [stop.eta_eps_1, stop.eta_eps_2, stop.eta_sigma_1, stop.eta_sigma_2];

    let mut state = OptimizerState::new(initial.clone(), &setup.params);
    let mut records = Vec::new();
    let mut prev: Option<(GradientPair<S>, Vec<S>, Vec<S>)> = None;
    loop {
        let m = state.m;
        objective.params.gamma_eps = state.gamma_eps;
        objective.params.gamma_sigma = state.gamma_sigma;
        let (eval, g) = objective.evaluate_with_gradient(&state.material)?;
        if !eval.value.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: m });
        }
        state.j_history.push(eval.value);
        let ng = (lumped_norm(&w, &g.g_eps), lumped_norm(&w, &g.g_sigma));

        let dirs = match &prev {
            None => (
                update_direction(&w, &g.g_eps, None),
                update_direction(&w, &g.g_sigma, None),
            ),
            Some((gp, de, ds)) => (
                update_direction(&w, &g.g_eps, Some((&gp.g_eps, de))),
                update_direction(&w, &g.g_sigma, Some((&gp.g_sigma, ds))),
            ),
        };
        let (d_eps, d_sigma) = match dirs {
            (Direction::Step { d: de, .. }, Direction::Step { d: ds, .. }) => {
                (descent_or_restart(&w, &g.g_eps, de), descent_or_restart(&w, &g.g_sigma, ds))
            }
            _ => {
                let rec = record(m, &eval, ng, S::zero(), S::zero(), &state);
                on_iteration(&rec);
                records.push(rec);
                return Ok(finish(state.material, records, eval.value, eval.misfit, ng, StopReason::ZeroGradient));
            }
        };
        if ng.0 == S::zero() && ng.1 == S::zero() {
            let rec = record(m, &eval, ng, S::zero(), S::zero(), &state);
            on_iteration(&rec);
            records.push(rec);
            return Ok(finish(state.material, records, eval.value, eval.misfit, ng, StopReason::ZeroGradient));
        }

        let old = state.material.clone();
        for i in 0..n {
            state.material.eps[i] += state.alpha_eps * d_eps[i];
            state.material.sigma[i] += state.alpha_sigma * d_sigma[i];
        }
        project_coefficients(&mut state.material, &free);
        let rec = record(m, &eval, ng, state.alpha_eps, state.alpha_sigma, &state);
        on_iteration(&rec);
        records.push(rec);

        // step sizes and weights for the next iteration
        let next_alpha = |g: &[S], d: &[S], gamma: S, old: S| -> Result<S> {
            if lumped_inner(&w, d, d) == S::zero() {
                Ok(old)
            } else {
                step_size(&w, g, d, gamma)
            }
        };
        state.alpha_eps = next_alpha(&g.g_eps, &d_eps, state.gamma_eps, state.alpha_eps)?;
        state.alpha_sigma = next_alpha(&g.g_sigma, &d_sigma, state.gamma_sigma, state.alpha_sigma)?;
        state.gamma_eps = regularization_update(setup.params.gamma_eps0, m, setup.params.p);
        state.gamma_sigma = regularization_update(setup.params.gamma_sigma0, m, setup.params.p);

        let de = lumped_distance(&w, &state.material.eps, &old.eps);
        let ds = lumped_distance(&w, &state.material.sigma, &old.sigma);
        let converged = termination_test(de, ds, ng.0, ng.1, tol);
        state.d_eps = d_eps.clone();
        state.d_sigma = d_sigma.clone();
        state.grad = Some(g.clone());
        prev = Some((g, d_eps, d_sigma));
        if converged || m >= stop.max_iters {
            objective.params.gamma_eps = state.gamma_eps;
            objective.params.gamma_sigma = state.gamma_sigma;
            let last = objective.evaluate(&state.material)?;
            if !last.value.is_finite() {
                return Err(Error::NonFiniteObjective { iteration: m + 1 });
            }
            let reason = if converged { StopReason::Tolerance } else { StopReason::MaxIterations };
            return Ok(finish(state.material, records, last.value, last.misfit, ng, reason));
        }
        state.m += 1;
    }
}

fn record<S: Real>(
    m: usize,
    eval: &crate::objective::Evaluation<S>,
    ng: (S, S),
    alpha_eps: S,
    alpha_sigma: S,
    state: &OptimizerState<S>,
) -> IterationRecord<S> {
    IterationRecord {
        m,
        j: eval.value,
        misfit: eval.misfit,
        norm_g_eps: ng.0,
        norm_g_sigma: ng.1,
        alpha_eps,
        alpha_sigma,
        gamma_eps: state.gamma_eps,
        gamma_sigma: state.gamma_sigma,
    }
}

fn finish<S>(
    material: MaterialField<S>,
    records: Vec<IterationRecord<S>>,
    final_j: S,
    final_misfit: S,
    final_grad_norms: (S, S),
    stop: StopReason,
) -> CgaResult<S> {
    CgaResult {
        material,
        records,
        final_j,
        final_misfit,
        final_grad_norms,
        stop,
    }
}

/// Per element `h_K · |mean of the nodal values over K|`.
pub fn refinement_indicator<S: Real>(mesh: &TetraMesh<S>, field: &[S]) -> Vec<S> {
    let quarter = S::lit(0.25);
    (0..mesh.n_tets())
        .map(|k| {
            let t = mesh.tets()[k];
            let mean = (field[t[0]] + field[t[1]] + field[t[2]] + field[t[3]]) * quarter;
            mesh.longest_edge(k) * mean.abs()
        })
        .collect()
}

/// Elements with `indicator ≥ β̃ · max indicator`, ascending.
pub fn select_elements<S: Real>(indicator: &[S], beta_tilde: S) -> Vec<usize> {
    let max = indicator.iter().copied().fold(S::zero(), S::max);
    if !(max > S::zero()) {
        return Vec::new();
    }
    let threshold = beta_tilde * max;
    (0..indicator.len()).filter(|&k| indicator[k] >= threshold).collect()
}

/// Union of the ε- and σ-rule markings restricted to elements whose
/// coefficients are all free.
pub fn mark_for_refinement<S: Real>(
    domain: &HybridDomain<S>,
    material: &MaterialField<S>,
    beta: (S, S),
) -> Vec<usize> {
    let restrict = |mut ind: Vec<S>| {
        for (k, v) in ind.iter_mut().enumerate() {
            if !domain.all_free(k) {
                *v = S::zero();
            }
        }
        ind
    };
    let ie = restrict(refinement_indicator(&domain.mesh, &material.eps));
    let is = restrict(refinement_indicator(&domain.mesh, &material.sigma));
    let mut marked = select_elements(&ie, beta.0);
    marked.extend(select_elements(&is, beta.1));
    marked.sort_unstable();
    marked.dedup();
    marked
}

/// Reconstruction on one mesh of the adaptive sequence.
#[derive(Clone, Debug)]
pub struct LevelResult<S> {
    pub level: usize,
    pub domain: HybridDomain<S>,
    pub cga: CgaResult<S>,
    /// Elements of this level's mesh refined to obtain the next one.
    pub marked: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptiveStop {
    Tolerance,
    MaxRefinements,
    NothingMarked,
    /// The next mesh would exceed the element cap; results are partial.
    ElementCap,
    /// No marked element could be refined without touching the interface.
    InterfaceGuard,
}

#[derive(Clone, Debug)]
pub struct AcgaResult<S> {
    pub levels: Vec<LevelResult<S>>,
    pub stop: AdaptiveStop,
}

impl<S> AcgaResult<S> {
    pub fn last(&self) -> &LevelResult<S> {
        self.levels.last().expect("at least one level")
    }

    pub fn partial(&self) -> bool {
        matches!(self.stop, AdaptiveStop::ElementCap | AdaptiveStop::InterfaceGuard)
    }
}

/// Adaptive conjugate gradient algorithm. Each level warm-starts from the
/// previous reconstruction interpolated onto the refined mesh, which is
/// also that level's prior.
pub fn acga_run<S: Real>(
    domain: &HybridDomain<S>,
    obs: &ObservationSet<S>,
    initial: &MaterialField<S>,
    setup: &InversionSetup<S>,
    refinement: &RefinementConfig<S>,
    mut on_iteration: impl FnMut(usize, &IterationRecord<S>),
) -> Result<AcgaResult<S>> {
    refinement.validate()?;
    let stop = &setup.stopping;
    let tol = [stop.theta_eps_1, stop.theta_eps_2, stop.theta_sigma_1, stop.theta_sigma_2];
    let mut levels: Vec<LevelResult<S>> = Vec::new();
    let mut current = domain.clone();
    let mut start = initial.clone();
    for level in 0..=stop.max_refinements {
        let cga = cga_run(&current, obs, &start, setup, |r| on_iteration(level, r))?;
        if level > 0 {
            let w = current.mesh.lumped_mass();
            let de = lumped_distance(&w, &cga.material.eps, &start.eps);
            let ds = lumped_distance(&w, &cga.material.sigma, &start.sigma);
            let (ge, gs) = cga.final_grad_norms;
            if termination_test(de, ds, ge, gs, tol) {
                levels.push(LevelResult { level, domain: current, cga, marked: Vec::new() });
                return Ok(AcgaResult { levels, stop: AdaptiveStop::Tolerance });
            }
        }
        if level == stop.max_refinements {
            levels.push(LevelResult { level, domain: current, cga, marked: Vec::new() });
            return Ok(AcgaResult { levels, stop: AdaptiveStop::MaxRefinements });
        }
        let marked = mark_for_refinement(&current, &cga.material, refinement.at(level));
        if marked.is_empty() {
            levels.push(LevelResult { level, domain: current, cga, marked });
            return Ok(AcgaResult { levels, stop: AdaptiveStop::NothingMarked });
        }
        let (next, marked) = current.refine_fem_guarded(&marked)?;
        if marked.is_empty() {
            levels.push(LevelResult { level, domain: current, cga, marked });
            return Ok(AcgaResult { levels, stop: AdaptiveStop::InterfaceGuard });
        }
        if next.mesh.n_tets() > refinement.max_elements {
            levels.push(LevelResult { level, domain: current, cga, marked });
            return Ok(AcgaResult { levels, stop: AdaptiveStop::ElementCap });
        }
        let mut warm = MaterialField {
            eps: interpolate_nodal(&current.mesh, &cga.material.eps, &next.mesh)?,
            sigma: interpolate_nodal(&current.mesh, &cga.material.sigma, &next.mesh)?,
            eps_max: cga.material.eps_max,
            sigma_max: cga.material.sigma_max,
        };
        warm.project(&next.free_mask());
        levels.push(LevelResult { level, domain: current, cga, marked });
        current = next;
        start = warm;
    }
    unreachable!("the level loop returns on its last pass")
}

/// Peak values and a location estimate of the reconstructed inclusion.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionSummary<S> {
    pub max_eps: S,
    pub max_sigma: S,
    pub argmax_eps: Vec3<S>,
    pub argmax_sigma: Vec3<S>,
    /// Mass-weighted centroid of `ε − 1` over vertices above half its peak.
    pub centroid: Vec3<S>,
}

pub fn summarize<S: Real>(mesh: &TetraMesh<S>, material: &MaterialField<S>) -> ReconstructionSummary<S> {
    let x = mesh.vertices();
    let argmax = |f: &[S]| {
        let mut best = 0;
        for i in 1..f.len() {
            if f[i] > f[best] {
                best = i;
            }
        }
        best
    };
    let ie = argmax(&material.eps);
    let is = argmax(&material.sigma);
    let peak = material.eps[ie] - S::one();
    let w = mesh.lumped_mass();
    let mut c = [S::zero(); 3];
    let mut total = S::zero();
    if peak > S::zero() {
        for i in 0..x.len() {
            let v = material.eps[i] - S::one();
            if v >= peak * S::lit(0.5) {
                let wi = w[i] * v;
                total += wi;
                for d in 0..3 {
                    c[d] += wi * x[i][d];
                }
            }
        }
    }
    let centroid = if total > S::zero() {
        [c[0] / total, c[1] / total, c[2] / total]
    } else {
        x[ie]
    };
    ReconstructionSummary {
        max_eps: material.eps[ie],
        max_sigma: material.sigma[is],
        argmax_eps: x[ie],
        argmax_sigma: x[is],
        centroid,
    }
}
