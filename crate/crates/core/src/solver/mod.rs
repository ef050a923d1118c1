//! Explicit leapfrog solution of the stabilized Maxwell model
//! `ε ∂ₜₜE + σ ∂ₜE − ΔE − ∇div((ε−1)E) = 0` on the hybrid domain, and of the
//! discrete adjoint of that scheme.
//!
//! Every owned unknown (a grid node outside or on `∂Ω_FEM`, or a mesh vertex
//! strictly inside) obeys
//!
//! ```text
//! (M/dt² + Cⁿ/2dt) uⁿ⁺¹ = Fⁿ + (2M/dt²) uⁿ − A uⁿ − (M/dt² − Cⁿ/2dt) uⁿ⁻¹
//! ```
//!
//! with lumped `M`, `C = D(σ) + boundary area on absorbing faces` and
//! `A = K ⊗ I + G(ε)`. Since `A` is symmetric across the FD/FE interface the
//! adjoint recursion uses the same row kernels run backwards in time.

mod operators;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{HybridDomain, NodeRole};
use crate::scalar::{Real, Vec3};

pub use operators::{assemble_fem_operators, stable_dt, FdOperator, FemOperators};

/// Nodal permittivity and conductivity on the FEM vertices. Grid nodes outside
/// `Ω_FEM` are vacuum (`ε = 1`, `σ = 0`) implicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialField<S> {
    pub eps: Vec<S>,
    pub sigma: Vec<S>,
    pub eps_max: S,
    pub sigma_max: S,
}

impl<S: Real> MaterialField<S> {
    pub fn uniform(n: usize, eps: S, sigma: S, eps_max: S, sigma_max: S) -> Self {
        Self {
            eps: vec![eps; n],
            sigma: vec![sigma; n],
            eps_max,
            sigma_max,
        }
    }

    pub fn vacuum(n: usize, eps_max: S, sigma_max: S) -> Self {
        Self::uniform(n, S::one(), S::zero(), eps_max, sigma_max)
    }

    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }

    /// Checks the box constraints and the vacuum condition on pinned vertices.
    pub fn validate(&self, domain: &HybridDomain<S>) -> Result<()> {
        let n = domain.mesh.n_vertices();
        if self.eps.len() != n || self.sigma.len() != n {
            return Err(Error::Contract(format!(
                "material has {} / {} values for {n} vertices",
                self.eps.len(),
                self.sigma.len()
            )));
        }
        for i in 0..n {
            let (e, s) = (self.eps[i], self.sigma[i]);
            if !(e >= S::one() && e <= self.eps_max && s >= S::zero() && s <= self.sigma_max) {
                return Err(Error::Contract(format!(
                    "vertex {i}: (ε, σ) = ({e}, {s}) outside [1, {}] × [0, {}]",
                    self.eps_max, self.sigma_max
                )));
            }
            if !domain.is_free(i) && (e != S::one() || s != S::zero()) {
                return Err(Error::Contract(format!(
                    "vertex {i} lies in the vacuum layer but has (ε, σ) = ({e}, {s})"
                )));
            }
        }
        Ok(())
    }

    /// Clamps to the boxes and resets pinned vertices to vacuum. Idempotent.
    pub fn project(&mut self, free: &[bool]) {
        for i in 0..self.eps.len() {
            if free[i] {
                self.eps[i] = self.eps[i].max(S::one()).min(self.eps_max);
                self.sigma[i] = self.sigma[i].max(S::zero()).min(self.sigma_max);
            } else {
                self.eps[i] = S::one();
                self.sigma[i] = S::zero();
            }
        }
    }
}

/// Uniform time grid on `(0, T)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid<S> {
    pub dt: S,
    pub n_steps: usize,
    pub t_end: S,
}

impl<S: Real> TimeGrid<S> {
    /// Smallest number of equal steps covering `(0, t_end)` with `dt ≤ dt_max`.
    pub fn covering(t_end: S, dt_max: S) -> Result<Self> {
        if !(t_end >= S::zero()) || !(dt_max > S::zero()) {
            return Err(Error::Config(format!(
                "invalid time grid: T = {t_end}, dt_max = {dt_max}"
            )));
        }
        let n = (t_end / dt_max).ceil().to_usize().unwrap_or(0);
        // guard against `T/dt_max` landing one ulp above an integer
        let n = if n > 0 && t_end / S::from_count(n - 1) <= dt_max { n - 1 } else { n };
        if n == 0 {
            return Ok(Self {
                dt: dt_max,
                n_steps: 0,
                t_end: S::zero(),
            });
        }
        Ok(Self {
            dt: t_end / S::from_count(n),
            n_steps: n,
            t_end,
        })
    }

    pub fn from_steps(dt: S, n_steps: usize) -> Self {
        Self {
            dt,
            n_steps,
            t_end: dt * S::from_count(n_steps),
        }
    }

    #[inline]
    pub fn time(&self, n: usize) -> S {
        self.dt * S::from_count(n)
    }
}

/// Plane-wave pulse `P(t) = (0, P₂, 0)` driven through the top face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec<S> {
    pub omega: S,
    /// End of the time window in which the top face carries the source.
    pub t1: S,
    pub amplitude: S,
    /// Driven field component, zero-based (`1` is `E₂`).
    pub component: usize,
}

impl<S: Real> SourceSpec<S> {
    pub fn new(omega: S) -> Self {
        Self {
            omega,
            t1: S::TAU() / omega,
            amplitude: S::one(),
            component: 1,
        }
    }

    pub fn period(&self) -> S {
        S::TAU() / self.omega
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > S::zero()) || !self.omega.is_finite() {
            return Err(Error::Config(format!("ω must be positive, got {}", self.omega)));
        }
        if self.t1 < self.period() * (S::one() - S::lit(1e-12)) {
            return Err(Error::Config(format!(
                "t1 = {} ends before the pulse (2π/ω = {})",
                self.t1,
                self.period()
            )));
        }
        if self.component > 2 {
            return Err(Error::Config(format!("component {} out of range", self.component)));
        }
        Ok(())
    }
}

/// `amplitude · sin(ωt)` on `(0, 2π/ω)`, zero elsewhere.
pub fn source_value<S: Real>(t: S, spec: &SourceSpec<S>) -> S {
    if t > S::zero() && t < spec.period() {
        spec.amplitude * (spec.omega * t).sin()
    } else {
        S::zero()
    }
}

/// Which boundary conditions close the problem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryModel {
    /// Source then absorbing on top, absorbing on the bottom, Neumann on the sides.
    #[default]
    PlaneWave,
    /// Absorbing on the whole boundary; driven by initial data only.
    AbsorbingEverywhere,
}

/// Initial data `E(·,0) = f₀`, `∂ₜE(·,0) = f₁` on the FEM vertices. Both must
/// vanish on the vacuum layer.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialData<S> {
    pub f0: Vec<Vec3<S>>,
    pub f1: Vec<Vec3<S>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// Finite-value check cadence in steps.
    pub nan_check_every: usize,
    /// Refuse runs whose stored history would exceed this many bytes.
    pub memory_cap_bytes: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            nan_check_every: 10,
            memory_cap_bytes: 4 << 30,
        }
    }
}

/// Everything except the coefficients that defines a forward problem.
#[derive(Clone, Debug)]
pub struct ForwardProblem<'d, S> {
    pub domain: &'d HybridDomain<S>,
    pub time: TimeGrid<S>,
    pub source: SourceSpec<S>,
    pub model: BoundaryModel,
    pub initial: Option<InitialData<S>>,
    pub options: SolverOptions,
}

impl<'d, S: Real> ForwardProblem<'d, S> {
    pub fn new(domain: &'d HybridDomain<S>, time: TimeGrid<S>, source: SourceSpec<S>) -> Self {
        Self {
            domain,
            time,
            source,
            model: BoundaryModel::PlaneWave,
            initial: None,
            options: SolverOptions::default(),
        }
    }

    /// Whether the top face is absorbing at `t_n`.
    fn top_absorbing(&self, n: usize) -> bool {
        match self.model {
            BoundaryModel::PlaneWave => self.time.time(n) > self.source.t1,
            BoundaryModel::AbsorbingEverywhere => true,
        }
    }
}

/// Field values on both discretizations. Paired interface nodes hold
/// bitwise-identical copies.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridField<S> {
    pub fd: Vec<Vec3<S>>,
    pub fem: Vec<Vec3<S>>,
}

impl<S: Real> HybridField<S> {
    pub fn zeros(domain: &HybridDomain<S>) -> Self {
        Self {
            fd: vec![[S::zero(); 3]; domain.grid.len()],
            fem: vec![[S::zero(); 3]; domain.mesh.n_vertices()],
        }
    }

    fn all_finite(&self) -> bool {
        self.fd
            .par_iter()
            .chain(self.fem.par_iter())
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Two consecutive time levels of the leapfrog scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveState<S> {
    pub prev: HybridField<S>,
    pub curr: HybridField<S>,
    /// Index `n` of `curr`.
    pub step: usize,
}

/// Discrete energy `½|δu|²_M + ½ uⁿ⁺¹·A uⁿ` at `t_{n+1/2}`, over all owned
/// unknowns and over the FEM vertices only.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergySample<S> {
    pub t: S,
    pub total: S,
    pub fem: S,
}

/// Samples of the field at selected grid nodes; entry `n` holds `uⁿ⁺¹`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord<S> {
    pub nodes: Vec<usize>,
    /// `n_steps × nodes.len()` samples, step-major.
    pub values: Vec<Vec3<S>>,
    pub dt: S,
    pub n_steps: usize,
}

impl<S: Real> TraceRecord<S> {
    pub fn zeros(nodes: Vec<usize>, time: &TimeGrid<S>) -> Self {
        Self {
            values: vec![[S::zero(); 3]; nodes.len() * time.n_steps],
            nodes,
            dt: time.dt,
            n_steps: time.n_steps,
        }
    }

    #[inline]
    pub fn at(&self, step: usize, slot: usize) -> Vec3<S> {
        self.values[step * self.nodes.len() + slot]
    }

    #[inline]
    pub fn at_mut(&mut self, step: usize, slot: usize) -> &mut Vec3<S> {
        let n = self.nodes.len();
        &mut self.values[step * n + slot]
    }

    pub fn step_values(&self, step: usize) -> &[Vec3<S>] {
        let n = self.nodes.len();
        &self.values[step * n..(step + 1) * n]
    }

    pub fn time_grid(&self) -> TimeGrid<S> {
        TimeGrid::from_steps(self.dt, self.n_steps)
    }

    /// Linear resampling in time onto another grid over the same interval.
    /// The field is taken as zero at `t = 0`, matching zero initial data on
    /// the grid nodes; samples past the last time are held constant.
    pub fn resample(&self, time: &TimeGrid<S>) -> Self {
        let mut out = Self::zeros(self.nodes.clone(), time);
        if self.n_steps == 0 {
            return out;
        }
        let nn = self.nodes.len();
        for k in 0..time.n_steps {
            // sample index s ↔ time (s+1)·dt
            let s = time.time(k + 1) / self.dt - S::one();
            let (lo, frac) = if s <= S::zero() {
                (None, s + S::one())
            } else {
                let f = s.floor();
                let i = f.to_usize().unwrap_or(usize::MAX);
                if i + 1 >= self.n_steps {
                    (Some(self.n_steps - 1), S::zero())
                } else {
                    (Some(i), s - f)
                }
            };
            for slot in 0..nn {
                let a = lo.map_or([S::zero(); 3], |i| self.at(i, slot));
                let b = match lo {
                    None => self.at(0, slot),
                    Some(i) if frac > S::zero() => self.at(i + 1, slot),
                    Some(i) => self.at(i, slot),
                };
                let v = out.at_mut(k, slot);
                for c in 0..3 {
                    v[c] = a[c] + frac * (b[c] - a[c]);
                }
            }
        }
        out
    }
}

/// Result of a forward run.
#[derive(Clone, Debug)]
pub struct ForwardOutput<S> {
    pub trace: TraceRecord<S>,
    /// FEM vertex values `u⁻¹, u⁰, …, u^N` when requested.
    pub history: Option<Vec<Vec<Vec3<S>>>>,
    pub energy: Vec<EnergySample<S>>,
    /// `(step, |E| per FEM vertex)` every `snapshot_every` steps.
    pub snapshots: Vec<(usize, Vec<S>)>,
}

/// Result of an adjoint run.
#[derive(Clone, Debug)]
pub struct AdjointOutput<S> {
    /// FEM vertex values `λ⁰, …, λ^N` (the last one is zero).
    pub history: Vec<Vec<Vec3<S>>>,
    /// `λⁿ` at the forcing nodes; entry `n` holds `λⁿ` for `n < N`.
    pub trace: TraceRecord<S>,
    /// Energy of the backward recursion, indexed like the forward energy.
    pub energy: Vec<EnergySample<S>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub store_volume: bool,
    pub snapshot_every: Option<usize>,
}

/// Sparse forcing on grid nodes, aligned with a node list.
struct Forcing<'a, S> {
    slot: &'a [u32],
    values: &'a [Vec3<S>],
}

const NO_SLOT: u32 = u32::MAX;

/// Operators for one coefficient field on one hybrid domain.
pub struct HybridSolver<'p, 'd, S> {
    pub problem: &'p ForwardProblem<'d, S>,
    pub fem: FemOperators<S>,
    pub fd: FdOperator<S>,
    fem_rows: Vec<bool>,
}

impl<'p, 'd, S: Real> HybridSolver<'p, 'd, S> {
    pub fn new(problem: &'p ForwardProblem<'d, S>, material: &MaterialField<S>) -> Result<Self> {
        problem.source.validate()?;
        material.validate(problem.domain)?;
        let domain = problem.domain;
        let fem = assemble_fem_operators(&domain.mesh, material)?;
        let fd = FdOperator::new(&domain.grid);
        let fem_rows = domain.roles().iter().map(|r| *r != NodeRole::Interface).collect();
        if let Some(init) = &problem.initial {
            let n = domain.mesh.n_vertices();
            if init.f0.len() != n || init.f1.len() != n {
                return Err(Error::Contract("initial data length mismatch".into()));
            }
            let nonzero = |v: &Vec3<S>| v.iter().any(|x| *x != S::zero());
            if (0..n).any(|i| !domain.is_free(i) && (nonzero(&init.f0[i]) || nonzero(&init.f1[i]))) {
                return Err(Error::Contract(
                    "initial data must vanish on the vacuum layer".into(),
                ));
            }
        }
        Ok(Self {
            problem,
            fem,
            fd,
            fem_rows,
        })
    }

    pub fn set_material(&mut self, material: &MaterialField<S>) -> Result<()> {
        material.validate(self.problem.domain)?;
        self.fem.set_material(&self.problem.domain.mesh, material);
        Ok(())
    }

    fn fd_damping(&self, id: usize, top: bool) -> S {
        let mut c = self.fd.area_bottom[id];
        if top {
            c += self.fd.area_top[id];
        }
        if self.problem.model == BoundaryModel::AbsorbingEverywhere {
            c += self.fd.area_lateral[id];
        }
        c
    }

    /// One leapfrog update `next ← (prev, curr)`. `top_new`/`top_old` select the
    /// absorbing state of the top face in the damping that multiplies `next`
    /// and `prev` respectively (equal in forward time, shifted in the adjoint).
    fn advance(
        &self,
        prev: &HybridField<S>,
        curr: &HybridField<S>,
        next: &mut HybridField<S>,
        force: &Forcing<'_, S>,
        top_new: bool,
        top_old: bool,
    ) -> (S, S) {
        let domain = self.problem.domain;
        let dt = self.problem.time.dt;
        let inv_dt2 = S::one() / (dt * dt);
        let inv_2dt = S::one() / (dt + dt);
        let half = S::lit(0.5);
        let row = |m: S, c_new: S, c_old: S, f: Vec3<S>, au: Vec3<S>, u: Vec3<S>, uo: Vec3<S>| {
            let lhs = m * inv_dt2 + c_new * inv_2dt;
            let old = m * inv_dt2 - c_old * inv_2dt;
            let two_m = (m + m) * inv_dt2;
            let mut out = [S::zero(); 3];
            let mut e = S::zero();
            for c in 0..3 {
                out[c] = (f[c] + two_m * u[c] - au[c] - old * uo[c]) / lhs;
                let v = (out[c] - u[c]) / dt;
                e += half * (m * v * v + out[c] * au[c]);
            }
            (out, e)
        };

        let grid = &domain.grid;
        let owned = domain.fd_owned();
        let e_fd = next
            .fd
            .par_iter_mut()
            .enumerate()
            .map(|(id, out)| {
                if !owned[id] {
                    return S::zero();
                }
                let au = self.fd.apply_row(grid, id, &curr.fd);
                let f = match force.slot[id] {
                    NO_SLOT => [S::zero(); 3],
                    s => force.values[s as usize],
                };
                let (v, e) = row(
                    self.fd.mass[id],
                    self.fd_damping(id, top_new),
                    self.fd_damping(id, top_old),
                    f,
                    au,
                    curr.fd[id],
                    prev.fd[id],
                );
                *out = v;
                e
            })
            .sum::<S>();

        let div = self
            .fem
            .has_graddiv()
            .then(|| self.fem.divergence(&domain.mesh, &curr.fem));
        let e_fem = next
            .fem
            .par_iter_mut()
            .enumerate()
            .map(|(i, out)| {
                if !self.fem_rows[i] {
                    return S::zero();
                }
                let mut au = self.fem.stiffness_row(i, &curr.fem);
                if let Some(div) = &div {
                    let g = self.fem.graddiv_row(i, div);
                    for c in 0..3 {
                        au[c] += g[c];
                    }
                }
                let d = self.fem.damping[i];
                let (v, e) = row(
                    self.fem.mass[i],
                    d,
                    d,
                    [S::zero(); 3],
                    au,
                    curr.fem[i],
                    prev.fem[i],
                );
                *out = v;
                e
            })
            .sum::<S>();

        for p in &domain.overlap {
            next.fem[p.fem] = next.fd[p.fd];
        }
        for p in &domain.feedback {
            next.fd[p.fd] = next.fem[p.fem];
        }
        (e_fd + e_fem, e_fem)
    }

    fn slots(&self, nodes: &[usize]) -> Result<Vec<u32>> {
        let domain = self.problem.domain;
        let mut slot = vec![NO_SLOT; domain.grid.len()];
        for (s, &id) in nodes.iter().enumerate() {
            if id >= domain.grid.len() || !domain.fd_owned()[id] {
                return Err(Error::Contract(format!(
                    "node {id} is not a grid node updated by the difference scheme"
                )));
            }
            slot[id] = s as u32;
        }
        Ok(slot)
    }

    fn check_memory(&self, snapshots: usize) -> Result<()> {
        let bytes = snapshots
            .saturating_mul(self.problem.domain.mesh.n_vertices())
            .saturating_mul(3 * std::mem::size_of::<S>());
        if bytes > self.problem.options.memory_cap_bytes {
            return Err(Error::MemoryCap {
                required: bytes,
                cap: self.problem.options.memory_cap_bytes,
            });
        }
        Ok(())
    }

    /// Initial state `(u⁻¹, u⁰)`.
    pub fn initial_state(&self) -> WaveState<S> {
        let domain = self.problem.domain;
        let mut prev = HybridField::zeros(domain);
        let mut curr = HybridField::zeros(domain);
        if let Some(init) = &self.problem.initial {
            let dt = self.problem.time.dt;
            for i in 0..domain.mesh.n_vertices() {
                curr.fem[i] = init.f0[i];
                for c in 0..3 {
                    prev.fem[i][c] = init.f0[i][c] - dt * init.f1[i][c];
                }
            }
        }
        WaveState {
            prev,
            curr,
            step: 0,
        }
    }

    /// Source values at the top nodes at `t_n` (zero once the gate closes).
    fn source_forcing(&self, n: usize, top: &[usize], buf: &mut [Vec3<S>]) {
        let p = &self.problem;
        let active = p.model == BoundaryModel::PlaneWave && p.time.time(n) <= p.source.t1;
        let value = if active {
            source_value(p.time.time(n), &p.source)
        } else {
            S::zero()
        };
        for (b, &id) in buf.iter_mut().zip(top) {
            *b = [S::zero(); 3];
            b[p.source.component] = self.fd.area_top[id] * value;
        }
    }

    /// Advances `state` by one step with the model's source.
    pub fn forward_step(&self, state: &mut WaveState<S>, scratch: &mut HybridField<S>) -> Result<EnergySample<S>> {
        let top = &self.problem.domain.partition.top_nodes;
        let slot = self.slots(top)?;
        let mut buf = vec![[S::zero(); 3]; top.len()];
        self.source_forcing(state.step, top, &mut buf);
        let n = state.step;
        let on = self.problem.top_absorbing(n);
        let (total, fem) = self.advance(
            &state.prev,
            &state.curr,
            scratch,
            &Forcing { slot: &slot, values: &buf },
            on,
            on,
        );
        std::mem::swap(&mut state.prev, &mut state.curr);
        std::mem::swap(&mut state.curr, scratch);
        state.step += 1;
        if !state.curr.all_finite() {
            return Err(Error::Instability { step: state.step });
        }
        Ok(EnergySample {
            t: self.problem.time.time(n) + self.problem.time.dt * S::lit(0.5),
            total,
            fem,
        })
    }

    /// Runs all steps from the initial data, recording `record_on`.
    pub fn forward(&self, record_on: &[usize], opts: RunOptions) -> Result<ForwardOutput<S>> {
        let p = self.problem;
        let n_steps = p.time.n_steps;
        if opts.store_volume {
            self.check_memory(n_steps + 2)?;
        }
        self.slots(record_on)?;
        let top = &p.domain.partition.top_nodes;
        let src_slot = self.slots(top)?;
        let mut buf = vec![[S::zero(); 3]; top.len()];
        let mut trace = TraceRecord::zeros(record_on.to_vec(), &p.time);
        let mut state = self.initial_state();
        let mut next = HybridField::zeros(p.domain);
        let mut history = opts.store_volume.then(|| {
            let mut h = Vec::with_capacity(n_steps + 2);
            h.push(state.prev.fem.clone());
            h.push(state.curr.fem.clone());
            h
        });
        let mut energy = Vec::with_capacity(n_steps);
        let mut snapshots = Vec::new();
        let check = p.options.nan_check_every.max(1);
        for n in 0..n_steps {
            self.source_forcing(n, top, &mut buf);
            let on = p.top_absorbing(n);
            let (total, fem) = self.advance(
                &state.prev,
                &state.curr,
                &mut next,
                &Forcing {
                    slot: &src_slot,
                    values: &buf,
                },
                on,
                on,
            );
            std::mem::swap(&mut state.prev, &mut state.curr);
            std::mem::swap(&mut state.curr, &mut next);
            state.step = n + 1;
            energy.push(EnergySample {
                t: p.time.time(n) + p.time.dt * S::lit(0.5),
                total,
                fem,
            });
            for (s, &id) in record_on.iter().enumerate() {
                *trace.at_mut(n, s) = state.curr.fd[id];
            }
            if let Some(h) = history.as_mut() {
                h.push(state.curr.fem.clone());
            }
            if let Some(every) = opts.snapshot_every {
                if every > 0 && (n + 1) % every == 0 {
                    snapshots.push((n + 1, magnitudes(&state.curr.fem)));
                }
            }
            if ((n + 1) % check == 0 || n + 1 == n_steps) && !state.curr.all_finite() {
                return Err(Error::Instability { step: n + 1 });
            }
        }
        Ok(ForwardOutput {
            trace,
            history,
            energy,
            snapshots,
        })
    }

    /// Backward recursion of the discrete adjoint driven by `-forcing` at the
    /// trace nodes: forcing sample `n` acts at time level `n + 1`.
    pub fn adjoint(&self, forcing: &TraceRecord<S>) -> Result<AdjointOutput<S>> {
        let p = self.problem;
        let n_steps = p.time.n_steps;
        if forcing.n_steps != n_steps {
            return Err(Error::Contract(format!(
                "adjoint forcing has {} steps, time grid has {n_steps}",
                forcing.n_steps
            )));
        }
        self.check_memory(n_steps + 1)?;
        let slot = self.slots(&forcing.nodes)?;
        let mut buf = vec![[S::zero(); 3]; forcing.nodes.len()];
        // (λ^{k+1}, λ^k) starting from zeros at k = N
        let mut later = HybridField::zeros(p.domain);
        let mut curr = HybridField::zeros(p.domain);
        let mut next = HybridField::zeros(p.domain);
        let mut history = vec![Vec::new(); n_steps + 1];
        history[n_steps] = curr.fem.clone();
        let mut energy = vec![EnergySample::default(); n_steps];
        let mut trace = TraceRecord::zeros(forcing.nodes.clone(), &p.time);
        let check = p.options.nan_check_every.max(1);
        for k in (1..=n_steps).rev() {
            for (b, v) in buf.iter_mut().zip(forcing.step_values(k - 1)) {
                *b = [-v[0], -v[1], -v[2]];
            }
            let (total, fem) = self.advance(
                &later,
                &curr,
                &mut next,
                &Forcing {
                    slot: &slot,
                    values: &buf,
                },
                p.top_absorbing(k - 1),
                p.top_absorbing(k + 1),
            );
            std::mem::swap(&mut later, &mut curr);
            std::mem::swap(&mut curr, &mut next);
            history[k - 1] = curr.fem.clone();
            for (s, &id) in forcing.nodes.iter().enumerate() {
                *trace.at_mut(k - 1, s) = curr.fd[id];
            }
            energy[k - 1] = EnergySample {
                t: p.time.time(k) - p.time.dt * S::lit(0.5),
                total,
                fem,
            };
            if ((n_steps - k + 1) % check == 0 || k == 1) && !curr.all_finite() {
                return Err(Error::Instability { step: k - 1 });
            }
        }
        Ok(AdjointOutput {
            history,
            trace,
            energy,
        })
    }
}

fn magnitudes<S: Real>(u: &[Vec3<S>]) -> Vec<S> {
    u.iter()
        .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
        .collect()
}

/// Forward solve from the model's initial data.
pub fn run_forward<S: Real>(
    problem: &ForwardProblem<'_, S>,
    material: &MaterialField<S>,
    record_on: &[usize],
    opts: RunOptions,
) -> Result<ForwardOutput<S>> {
    HybridSolver::new(problem, material)?.forward(record_on, opts)
}

/// Adjoint solve for a forcing trace (see [`HybridSolver::adjoint`]).
pub fn run_adjoint<S: Real>(
    problem: &ForwardProblem<'_, S>,
    material: &MaterialField<S>,
    forcing: &TraceRecord<S>,
) -> Result<AdjointOutput<S>> {
    HybridSolver::new(problem, material)?.adjoint(forcing)
}

#[cfg(test)]
mod tests;
