use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use wcip_core::datagen::{add_noise, build_phantom, generate_observations, refine_around, DataGeneration};
use wcip_core::inversion::{acga_run, cga_run, summarize, write_log, CgaResult, InversionSetup};
use wcip_core::io::{read_observations, write_observations, write_vtk, PointData};
use wcip_core::mesh::{build_hybrid_domain, HybridDomain};
use wcip_core::objective::{directional_derivative_oracle, ObservationSet, Objective, TikhonovParams};
use wcip_core::solver::{run_forward, stable_dt, ForwardProblem, MaterialField, RunOptions, TimeGrid};
use wcip_core::{Error, Mesh};

use crate::config::RunConfig;

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn out_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn domain(cfg: &RunConfig) -> anyhow::Result<HybridDomain<f64>> {
    Ok(build_hybrid_domain(cfg.domain_spec())?)
}

fn write_material(path: &Path, title: &str, mesh: &Mesh, m: &MaterialField<f64>) -> anyhow::Result<()> {
    let mut w = create(path)?;
    write_vtk(&mut w, title, mesh, &[PointData::Scalar("eps", &m.eps), PointData::Scalar("sigma", &m.sigma)])?;
    w.flush()?;
    Ok(())
}

fn write_obs(path: &Path, obs: &ObservationSet<f64>, dom: &HybridDomain<f64>) -> anyhow::Result<()> {
    let mut w = create(path)?;
    write_observations(&mut w, obs, &dom.grid)?;
    w.flush()?;
    Ok(())
}

fn data_setup(cfg: &RunConfig) -> DataGeneration<f64> {
    DataGeneration {
        source: cfg.source(),
        t_end: cfg.time.t_end,
        cfl: cfg.time.cfl,
        model: cfg.source.model,
        fine_level: cfg.data.fine_level,
        inversion_level: cfg.data.inversion_level,
        allow_inverse_crime: cfg.data.allow_inverse_crime,
    }
}

/// Runs the phantom on the data mesh, which is the configured mesh refined
/// `fine_level` times around the inclusion, exactly as `generate` does.
pub fn forward(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = out_dir(cfg)?;
    let base = domain(cfg)?;
    let phantom = cfg.phantom()?;
    let dom = refine_around(&base, &phantom, cfg.data.fine_level)?;
    let material = build_phantom(&phantom, &dom)?;
    let dt = stable_dt(&dom, phantom.eps_max, cfg.time.cfl)?;
    let time = match cfg.time.n_steps {
        Some(n) => TimeGrid::from_steps(dt, n),
        None => TimeGrid::covering(cfg.time.t_end, dt)?,
    };
    let mut problem = ForwardProblem::new(&dom, time, cfg.source());
    problem.model = cfg.source.model;
    let opts = RunOptions {
        store_volume: false,
        snapshot_every: cfg.output.snapshot_every,
    };
    let out = run_forward(&problem, &material, &dom.partition.top_nodes, opts)?;
    write_material(&dir.join("phantom.vtk"), "phantom", &dom.mesh, &material)?;
    for (step, mag) in &out.snapshots {
        let mut w = create(&dir.join(format!("snapshot_{step:06}.vtk")))?;
        write_vtk(&mut w, &format!("|E| at step {step}"), &dom.mesh, &[PointData::Scalar("E_magnitude", mag)])?;
        w.flush()?;
    }
    let path = dir.join("forward.obs");
    write_obs(&path, &ObservationSet::new(out.trace), &dom)?;
    println!(
        "forward: {} steps of dt = {:.6e}, {} snapshots, trace in {}",
        time.n_steps,
        time.dt,
        out.snapshots.len(),
        path.display()
    );
    Ok(())
}

pub fn generate(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = out_dir(cfg)?;
    let dom = domain(cfg)?;
    let phantom = cfg.phantom()?;
    let clean = generate_observations(&dom, &phantom, &data_setup(cfg))?;
    let obs = add_noise(&clean, cfg.noise())?;
    let path = dir.join("observations.obs");
    write_obs(&path, &obs, &dom)?;
    println!(
        "generate: {} nodes × {} steps, δ = {}, seed {}, written to {}",
        obs.trace.nodes.len(),
        obs.trace.n_steps,
        obs.noise_level,
        obs.seed,
        path.display()
    );
    Ok(())
}

fn read_obs(path: &Path, dom: &HybridDomain<f64>) -> anyhow::Result<ObservationSet<f64>> {
    let mut f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let file = read_observations::<f64, _>(&mut f).with_context(|| format!("reading {}", path.display()))?;
    file.check_grid(&dom.grid)?;
    file.obs.validate(dom)?;
    Ok(file.obs)
}

fn write_level(dir: &Path, level: usize, dom: &HybridDomain<f64>, cga: &CgaResult<f64>, log_name: &str) -> anyhow::Result<String> {
    let mut log = create(&dir.join(log_name))?;
    write_log(&mut log, &cga.records)?;
    log.flush()?;
    write_material(&dir.join(format!("level_{level}.vtk")), &format!("reconstruction level {level}"), &dom.mesh, &cga.material)?;
    let s = summarize(&dom.mesh, &cga.material);
    let fmt = |x: [f64; 3]| format!("[{:.4}, {:.4}, {:.4}]", x[0], x[1], x[2]);
    Ok(format!(
        "[level_{level}]\nvertices = {}\ntets = {}\niterations = {}\nstop = \"{:?}\"\nfinal_j = {:e}\nfinal_misfit = {:e}\nmax_eps = {}\nmax_sigma = {}\nargmax_eps = {}\nargmax_sigma = {}\ncentroid = {}\n",
        dom.mesh.n_vertices(),
        dom.mesh.n_tets(),
        cga.records.len(),
        cga.stop,
        cga.final_j,
        cga.final_misfit,
        s.max_eps,
        s.max_sigma,
        fmt(s.argmax_eps),
        fmt(s.argmax_sigma),
        fmt(s.centroid),
    ))
}

pub fn invert(cfg: &RunConfig, obs: Option<&Path>, adaptive: bool) -> anyhow::Result<()> {
    let obs_path = obs.ok_or_else(|| Error::Config("inversion needs --obs".into()))?;
    let dir = out_dir(cfg)?;
    let dom = domain(cfg)?;
    let obs = read_obs(obs_path, &dom)?;
    let setup = InversionSetup {
        source: cfg.source(),
        t_end: cfg.time.t_end,
        cfl: cfg.time.cfl,
        model: cfg.source.model,
        params: cfg.params(),
        stopping: cfg.stopping(),
    };
    let initial = MaterialField::vacuum(dom.mesh.n_vertices(), cfg.inversion.eps_max, cfg.inversion.sigma_max);
    let mut summary = String::new();
    if adaptive {
        let result = acga_run(&dom, &obs, &initial, &setup, &cfg.refinement(), |level, r| {
            eprintln!("level {level} m {} J {:.6e}", r.m, r.j);
        })?;
        summary.push_str(&format!("levels = {}\nadaptive_stop = \"{:?}\"\n\n", result.levels.len(), result.stop));
        for l in &result.levels {
            summary.push_str(&write_level(&dir, l.level, &l.domain, &l.cga, &format!("log_level_{}.csv", l.level))?);
            summary.push('\n');
        }
    } else {
        let cga = cga_run(&dom, &obs, &initial, &setup, |r| eprintln!("m {} J {:.6e}", r.m, r.j))?;
        summary.push_str(&write_level(&dir, 0, &dom, &cga, "log.csv")?);
    }
    fs::write(dir.join("summary.toml"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Smooth bump centred in the FEM box, zero on the vacuum layer.
fn bump(dom: &HybridDomain<f64>) -> Vec<f64> {
    let s = &dom.spec;
    let c: Vec<f64> = (0..3).map(|d| 0.5 * (s.fem_lo[d] + s.fem_hi[d])).collect();
    let w = (0..3).map(|d| s.fem_hi[d] - s.fem_lo[d]).fold(f64::INFINITY, f64::min) / 4.0;
    dom.mesh
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, x)| {
            if !dom.is_free(i) {
                return 0.0;
            }
            let r2: f64 = (0..3).map(|d| (x[d] - c[d]).powi(2)).sum();
            (-r2 / (2.0 * w * w)).exp()
        })
        .collect()
}

pub fn gradcheck(cfg: &RunConfig) -> anyhow::Result<()> {
    let dom = domain(cfg)?;
    let phantom = cfg.phantom()?;
    let n = dom.mesh.n_vertices();
    let eps_max = cfg.inversion.eps_max;
    let dt = stable_dt(&dom, eps_max, cfg.time.cfl)?;
    let mut problem = ForwardProblem::new(&dom, TimeGrid::covering(cfg.time.t_end, dt)?, cfg.source());
    problem.model = cfg.source.model;
    let obs = generate_observations(&dom, &phantom, &data_setup(cfg))?.resampled(&problem.time);
    let inv = &cfg.inversion;
    let objective = Objective::new(&problem, &obs, TikhonovParams::vacuum_prior(n, inv.gamma_eps0, inv.gamma_sigma0, inv.p))?;
    // an interior point, so that ±τ·bump stays admissible
    let mut base = MaterialField::vacuum(n, eps_max, inv.sigma_max);
    for i in 0..n {
        if dom.is_free(i) {
            base.eps[i] = (1.0 + eps_max) / 2.0;
            base.sigma[i] = inv.sigma_max / 2.0;
        }
    }
    let d = bump(&dom);
    let zero = vec![0.0; n];
    let taus = [1e-2, 1e-3, 1e-4];
    println!("coefficient,tau,finite_difference,adjoint,relative_error");
    for (name, de, ds) in [("eps", &d, &zero), ("sigma", &zero, &d)] {
        let check = directional_derivative_oracle(&objective, &base, de, ds, &taus)?;
        for ((tau, est), err) in check.estimates.iter().zip(check.relative_errors()) {
            println!("{name},{tau:e},{est:.12e},{:.12e},{err:.3e}", check.adjoint);
        }
    }
    Ok(())
}
