use super::*;
use crate::mesh::{build_hybrid_domain, DomainSpec};

fn small_domain() -> HybridDomain<f64> {
    build_hybrid_domain(DomainSpec {
        omega_lo: [0.0; 3],
        omega_hi: [4.0, 4.0, 6.0],
        fem_lo: [1.0; 3],
        fem_hi: [3.0, 3.0, 5.0],
        h_fdm: 0.5,
    })
    .unwrap()
}

fn problem<'d>(dom: &'d HybridDomain<f64>, omega: f64, t_end: f64) -> ForwardProblem<'d, f64> {
    let dt = stable_dt(dom, 10.0, 0.9).unwrap();
    ForwardProblem::new(dom, TimeGrid::covering(t_end, dt).unwrap(), SourceSpec::new(omega))
}

/// Material with a cubic inclusion in the free region.
fn inclusion(dom: &HybridDomain<f64>, eps: f64, sigma: f64) -> MaterialField<f64> {
    let mut m = MaterialField::vacuum(dom.mesh.n_vertices(), 10.0, 2.0);
    for (i, x) in dom.mesh.vertices().iter().enumerate() {
        if dom.is_free(i) && (x[2] - 3.0).abs() < 0.6 {
            m.eps[i] = eps;
            m.sigma[i] = sigma;
        }
    }
    m
}

#[test]
fn source_value_examples() {
    let s = SourceSpec::new(1.0);
    assert_eq!(source_value(0.0, &s), 0.0);
    assert!((source_value(std::f64::consts::FRAC_PI_2, &s) - 1.0).abs() < 1e-15);
    assert_eq!(source_value(7.0, &s), 0.0);
}

#[test]
fn gate_closing_before_pulse_ends_is_rejected() {
    let mut s = SourceSpec::new(2.0);
    s.t1 = 1.0;
    assert!(s.validate().is_err());
}

#[test]
fn time_grid_covers_interval() {
    let g = TimeGrid::covering(12.0, 0.25).unwrap();
    assert_eq!(g.n_steps, 48);
    let g = TimeGrid::<f64>::covering(12.0, 0.26).unwrap();
    assert_eq!(g.n_steps, 47);
    assert!((g.dt * 47.0 - 12.0).abs() < 1e-12);
    assert_eq!(TimeGrid::covering(0.0, 0.1).unwrap().n_steps, 0);
}

#[test]
fn no_source_keeps_zero_state() {
    let dom = small_domain();
    let mut p = problem(&dom, 2.0, 2.0);
    p.model = BoundaryModel::AbsorbingEverywhere;
    let out = run_forward(
        &p,
        &MaterialField::vacuum(dom.mesh.n_vertices(), 10.0, 2.0),
        &dom.partition.top_nodes,
        RunOptions {
            store_volume: true,
            snapshot_every: None,
        },
    )
    .unwrap();
    assert!(out.trace.values.iter().all(|v| *v == [0.0; 3]));
    assert!(out.history.unwrap().iter().all(|h| h.iter().all(|v| *v == [0.0; 3])));
}

#[test]
fn zero_steps_give_empty_trace() {
    let dom = small_domain();
    let mut p = problem(&dom, 2.0, 1.0);
    p.time = TimeGrid::from_steps(0.1, 0);
    let out = run_forward(
        &p,
        &MaterialField::vacuum(dom.mesh.n_vertices(), 10.0, 2.0),
        &dom.partition.top_nodes,
        RunOptions::default(),
    )
    .unwrap();
    assert!(out.trace.values.is_empty());
}

#[test]
fn interface_copies_agree_bitwise_every_step() {
    let dom = small_domain();
    let p = problem(&dom, 2.0, 4.0);
    let solver = HybridSolver::new(&p, &inclusion(&dom, 4.0, 0.5)).unwrap();
    let mut state = solver.initial_state();
    let mut scratch = HybridField::zeros(&dom);
    for _ in 0..p.time.n_steps {
        solver.forward_step(&mut state, &mut scratch).unwrap();
        for q in dom.overlap.iter().chain(&dom.feedback) {
            assert_eq!(state.curr.fem[q.fem], state.curr.fd[q.fd]);
        }
    }
    assert!(state.curr.fd.iter().any(|v| v[1] != 0.0));
}

#[test]
fn energy_is_nonincreasing_once_the_source_stops() {
    let dom = small_domain();
    let p = problem(&dom, 2.0, 8.0);
    for (eps, sigma) in [(1.0, 0.0), (5.0, 0.0), (5.0, 1.0)] {
        let out = run_forward(&p, &inclusion(&dom, eps, sigma), &[], RunOptions::default()).unwrap();
        let t_off = p.source.t1;
        let mut last = f64::INFINITY;
        for e in out.energy.iter().filter(|e| e.t - 0.5 * p.time.dt > t_off) {
            assert!(e.total <= last * (1.0 + 1e-12) + 1e-15, "ε={eps}, σ={sigma}: {} > {last}", e.total);
            last = e.total;
        }
    }
}

#[test]
fn plane_wave_travels_at_unit_speed() {
    // narrow column with Neumann sides: the exact solution is 1D
    let dom = build_hybrid_domain(DomainSpec {
        omega_lo: [0.0, 0.0, 0.0],
        omega_hi: [1.0, 1.0, 12.0],
        fem_lo: [0.25, 0.25, 2.0],
        fem_hi: [0.75, 0.75, 10.0],
        h_fdm: 0.125,
    })
    .unwrap();
    let p = problem(&dom, 2.0, 11.0);
    let out = run_forward(
        &p,
        &MaterialField::vacuum(dom.mesh.n_vertices(), 10.0, 2.0),
        &[dom.grid.index(4, 4, dom.grid.dims[2] - 1)],
        RunOptions {
            store_volume: true,
            snapshot_every: None,
        },
    )
    .unwrap();
    let probe = dom
        .mesh
        .vertices()
        .iter()
        .position(|x| (x[0] - 0.5).abs() < 1e-12 && (x[1] - 0.5).abs() < 1e-12 && (x[2] - 6.0).abs() < 1e-12)
        .unwrap();
    let hist = out.history.unwrap();
    let top: Vec<f64> = (0..p.time.n_steps).map(|n| out.trace.at(n, 0)[1]).collect();
    let deep: Vec<f64> = (0..p.time.n_steps).map(|n| hist[n + 2][probe][1]).collect();
    let best = (0..p.time.n_steps)
        .max_by(|&a, &b| {
            let c = |lag: usize| (0..p.time.n_steps - lag).map(|n| top[n] * deep[n + lag]).sum::<f64>();
            c(a).partial_cmp(&c(b)).unwrap()
        })
        .unwrap();
    let lag = best as f64 * p.time.dt;
    assert!((lag - 6.0).abs() <= 2.0 * p.time.dt, "lag {lag}");
    // the top trace is the integrated pulse (1 − cos ωt)/ω
    let g = |s: f64| if s <= 0.0 { 0.0 } else if s < std::f64::consts::PI { (1.0 - (2.0 * s).cos()) / 2.0 } else { 0.0 };
    let err = (0..p.time.n_steps)
        .map(|n| (top[n] - g(p.time.time(n + 1))).abs())
        .fold(0.0, f64::max);
    assert!(err < 0.05, "max error {err}");
}

#[test]
fn conductive_slab_attenuates_transmission() {
    let dom = small_domain();
    let p = problem(&dom, 3.0, 6.0);
    let bottom_probe: Vec<usize> = dom
        .partition
        .bottom_nodes
        .iter()
        .copied()
        .filter(|&id| {
            let x = dom.grid.coords(id);
            (x[0] - 2.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12
        })
        .collect();
    let peak = |m: &MaterialField<f64>| {
        let out = run_forward(&p, m, &bottom_probe, RunOptions::default()).unwrap();
        out.trace.values.iter().map(|v| v[1].abs()).fold(0.0, f64::max)
    };
    let clear = peak(&inclusion(&dom, 1.0, 0.0));
    let lossy = peak(&inclusion(&dom, 1.0, 2.0));
    assert!(clear > 0.0);
    assert!(lossy < clear, "{lossy} !< {clear}");
}

#[test]
fn zero_forcing_gives_zero_adjoint() {
    let dom = small_domain();
    let p = problem(&dom, 2.0, 3.0);
    let forcing = TraceRecord::zeros(dom.partition.top_nodes.clone(), &p.time);
    let out = run_adjoint(&p, &inclusion(&dom, 3.0, 1.0), &forcing).unwrap();
    assert_eq!(out.history.len(), p.time.n_steps + 1);
    assert!(out.history.iter().all(|h| h.iter().all(|v| *v == [0.0; 3])));
}

#[test]
fn adjoint_is_the_transpose_of_the_forward_map() {
    // ⟨g, u⟩ over the trace equals −⟨λ, F⟩ over the source
    use rand::{Rng, SeedableRng};
    let dom = small_domain();
    let p = problem(&dom, 3.0, 4.0);
    let mat = inclusion(&dom, 4.0, 0.8);
    let top = dom.partition.top_nodes.clone();
    let fwd = run_forward(&p, &mat, &top, RunOptions::default()).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut g = TraceRecord::zeros(top.clone(), &p.time);
    for v in g.values.iter_mut() {
        *v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    }
    let adj = run_adjoint(&p, &mat, &g).unwrap();
    let lhs: f64 = g.values.iter().zip(&fwd.trace.values).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum();
    let fd = FdOperator::new(&dom.grid);
    let mut rhs = 0.0;
    for n in 0..p.time.n_steps {
        let t = p.time.time(n);
        if t > p.source.t1 {
            continue;
        }
        let pv = source_value(t, &p.source);
        for (s, &id) in top.iter().enumerate() {
            rhs -= adj.trace.at(n, s)[1] * fd.area_top[id] * pv;
        }
    }
    assert!(lhs.abs() > 1e-6);
    assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs(), "{lhs} vs {rhs}");
}

#[test]
fn adjoint_energy_peaks_inside_the_interval() {
    let dom = small_domain();
    let p = problem(&dom, 3.0, 6.0);
    let top = dom.partition.top_nodes.clone();
    let a = run_forward(&p, &inclusion(&dom, 6.0, 0.0), &top, RunOptions::default()).unwrap();
    let b = run_forward(&p, &inclusion(&dom, 1.0, 0.0), &top, RunOptions::default()).unwrap();
    let mut r = a.trace.clone();
    for (x, y) in r.values.iter_mut().zip(&b.trace.values) {
        for c in 0..3 {
            x[c] -= y[c];
        }
    }
    let adj = run_adjoint(&p, &MaterialField::vacuum(dom.mesh.n_vertices(), 10.0, 2.0), &r).unwrap();
    let (imax, _) = adj
        .energy
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.fem.partial_cmp(&y.1.fem).unwrap())
        .unwrap();
    assert!(imax > 0 && imax + 1 < p.time.n_steps, "peak at {imax}");
}

#[test]
fn resampling_onto_same_grid_is_identity() {
    let g = TimeGrid::from_steps(0.1, 20);
    let mut t = TraceRecord::zeros(vec![3, 4], &g);
    for (i, v) in t.values.iter_mut().enumerate() {
        *v = [i as f64, -(i as f64), 0.5];
    }
    let r = t.resample(&g);
    for (a, b) in r.values.iter().zip(&t.values) {
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn resampling_is_exact_for_linear_signals() {
    let g = TimeGrid::<f64>::from_steps(0.1, 30);
    let mut t = TraceRecord::zeros(vec![0], &g);
    for n in 0..30 {
        *t.at_mut(n, 0) = [2.0 * g.time(n + 1), 0.0, 0.0];
    }
    let fine = TimeGrid::from_steps(0.075, 40);
    let r = t.resample(&fine);
    for k in 0..40 {
        assert!((r.at(k, 0)[0] - 2.0 * fine.time(k + 1)).abs() < 1e-12);
    }
}

#[test]
fn memory_cap_is_enforced() {
    let dom = small_domain();
    let mut p = problem(&dom, 2.0, 2.0);
    p.options.memory_cap_bytes = 1000;
    let r = run_forward(
        &p,
        &MaterialField::vacuum(dom.mesh.n_vertices(), 10.0, 2.0),
        &[],
        RunOptions {
            store_volume: true,
            snapshot_every: None,
        },
    );
    assert!(matches!(r, Err(Error::MemoryCap { .. })));
}

#[test]
fn oversized_step_is_reported_as_instability() {
    let dom = small_domain();
    let mut p = problem(&dom, 2.0, 2.0);
    p.time = TimeGrid::from_steps(p.time.dt * 3.0, 1000);
    p.options.nan_check_every = 5;
    let r = run_forward(&p, &inclusion(&dom, 3.0, 0.0), &[], RunOptions::default());
    assert!(matches!(r, Err(Error::Instability { .. })), "{r:?}");
}

#[test]
fn vacuum_layer_material_is_rejected() {
    let dom = small_domain();
    let mut m = MaterialField::vacuum(dom.mesh.n_vertices(), 10.0, 2.0);
    let pinned = (0..dom.mesh.n_vertices()).find(|&i| !dom.is_free(i)).unwrap();
    m.eps[pinned] = 2.0;
    assert!(m.validate(&dom).is_err());
    m.project(&dom.free_mask());
    assert!(m.validate(&dom).is_ok());
}

#[test]
fn single_precision_runs() {
    let dom = build_hybrid_domain(DomainSpec::<f32> {
        omega_lo: [0.0; 3],
        omega_hi: [4.0, 4.0, 6.0],
        fem_lo: [1.0; 3],
        fem_hi: [3.0, 3.0, 5.0],
        h_fdm: 0.5,
    })
    .unwrap();
    let dt = stable_dt(&dom, 10.0f32, 0.9).unwrap();
    let p = ForwardProblem::new(&dom, TimeGrid::covering(3.0, dt).unwrap(), SourceSpec::new(2.0f32));
    let out = run_forward(
        &p,
        &MaterialField::vacuum(dom.mesh.n_vertices(), 10.0, 2.0),
        &dom.partition.top_nodes,
        RunOptions::default(),
    )
    .unwrap();
    assert!(out.trace.values.iter().any(|v| v[1] != 0.0));
}
