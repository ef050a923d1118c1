use std::path::{Path, PathBuf};

use serde::Deserialize;
use wcip_core::datagen::{NoiseSpec, PhantomSpec, PRESETS};
use wcip_core::inversion::{InversionParams, RefinementConfig, StoppingCriteria};
use wcip_core::mesh::DomainSpec;
use wcip_core::solver::{BoundaryModel, SourceSpec};
use wcip_core::{Error, Result};

/// Experiment description read from a TOML file. Every section is optional
/// and falls back to the desk-scale melanoma setup.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainConfig,
    pub time: TimeConfig,
    pub source: SourceConfig,
    pub phantom: PhantomConfig,
    pub data: DataConfig,
    pub noise: NoiseConfig,
    pub inversion: InversionConfig,
    pub output: OutputConfig,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub fem_lo: [f64; 3],
    pub fem_hi: [f64; 3],
    pub h: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        let m = DomainSpec::<f64>::melanoma(1.0);
        Self {
            lo: m.omega_lo,
            hi: m.omega_hi,
            fem_lo: m.fem_lo,
            fem_hi: m.fem_hi,
            h: m.h_fdm,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub t_end: f64,
    pub cfl: f64,
    /// Fixed step count for `forward`; overrides `t_end` there.
    pub n_steps: Option<usize>,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            t_end: 12.0,
            cfl: 0.9,
            n_steps: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub omega: f64,
    pub model: BoundaryModel,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            omega: 2.0,
            model: BoundaryModel::PlaneWave,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// One of the presets.
    pub name: Option<String>,
    /// TOML file holding a full phantom description.
    pub file: Option<PathBuf>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            name: Some("stage1".into()),
            file: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub fine_level: usize,
    pub inversion_level: usize,
    pub allow_inverse_crime: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            fine_level: 1,
            inversion_level: 0,
            allow_inverse_crime: false,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub delta: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub gamma_eps0: f64,
    pub gamma_sigma0: f64,
    pub p: f64,
    pub max_iters: usize,
    pub max_refinements: usize,
    pub beta_tilde_eps: Vec<f64>,
    pub beta_tilde_sigma: Vec<f64>,
    pub max_elements: usize,
    /// `[η₁ε, η₂ε, η₁σ, η₂σ]`.
    pub eta: [f64; 4],
    /// `[θ₁ε, θ₂ε, θ₁σ, θ₂σ]`.
    pub theta: [f64; 4],
    pub eps_max: f64,
    pub sigma_max: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        let p = InversionParams::<f64>::default();
        let s = StoppingCriteria::<f64>::default();
        let r = RefinementConfig::<f64>::default();
        Self {
            gamma_eps0: p.gamma_eps0,
            gamma_sigma0: p.gamma_sigma0,
            p: p.p,
            max_iters: s.max_iters,
            max_refinements: s.max_refinements,
            beta_tilde_eps: r.beta_tilde_eps,
            beta_tilde_sigma: r.beta_tilde_sigma,
            max_elements: r.max_elements,
            eta: [s.eta_eps_1, s.eta_eps_2, s.eta_sigma_1, s.eta_sigma_2],
            theta: [s.theta_eps_1, s.theta_eps_2, s.theta_sigma_1, s.theta_sigma_2],
            eps_max: 10.0,
            sigma_max: 2.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub snapshot_every: Option<usize>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("wcip-out"),
            snapshot_every: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.domain_spec().validate()?;
        let t = &self.time;
        if !(t.t_end > 0.0) || !(t.cfl > 0.0 && t.cfl <= 1.0) {
            return Err(Error::Config(format!("need T > 0 and 0 < cfl ≤ 1, got {} and {}", t.t_end, t.cfl)));
        }
        if t.n_steps == Some(0) {
            return Err(Error::Config("n_steps must be positive".into()));
        }
        self.source().validate()?;
        match (&self.phantom.name, &self.phantom.file) {
            (Some(_), Some(_)) => return Err(Error::Config("give either phantom.name or phantom.file".into())),
            (None, None) => return Err(Error::Config("no phantom given".into())),
            (Some(n), None) if !PRESETS.contains(&n.as_str()) => {
                return Err(Error::Config(format!("unknown phantom {n:?}; presets are {PRESETS:?}")))
            }
            (None, Some(f)) if !self.resolve(f).is_file() => {
                return Err(Error::Config(format!("phantom file {} does not exist", self.resolve(f).display())))
            }
            _ => {}
        }
        if !(self.noise.delta >= 0.0) {
            return Err(Error::Config(format!("noise level δ must be ≥ 0, got {}", self.noise.delta)));
        }
        let inv = &self.inversion;
        if !(inv.p > 0.0 && inv.p < 1.0) {
            return Err(Error::Config(format!("p must lie in (0, 1), got {}", inv.p)));
        }
        if !(inv.eps_max > 1.0) || !(inv.sigma_max > 0.0) {
            return Err(Error::Config("coefficient bounds must exceed the vacuum values".into()));
        }
        self.params().validate()?;
        self.stopping().validate()?;
        self.refinement().validate()?;
        if let Some(0) = self.output.snapshot_every {
            return Err(Error::Config("snapshot cadence must be positive".into()));
        }
        Ok(())
    }

    pub fn domain_spec(&self) -> DomainSpec<f64> {
        let d = &self.domain;
        DomainSpec {
            omega_lo: d.lo,
            omega_hi: d.hi,
            fem_lo: d.fem_lo,
            fem_hi: d.fem_hi,
            h_fdm: d.h,
        }
    }

    pub fn source(&self) -> SourceSpec<f64> {
        SourceSpec::new(self.source.omega)
    }

    pub fn phantom(&self) -> Result<PhantomSpec<f64>> {
        let spec = self.domain_spec();
        let phantom = match (&self.phantom.name, &self.phantom.file) {
            (Some(name), _) => PhantomSpec::preset(name, &spec)?,
            (None, Some(file)) => {
                let path = self.resolve(file);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("cannot read phantom {}: {e}", path.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            (None, None) => return Err(Error::Config("no phantom given".into())),
        };
        phantom.validate(&spec)?;
        Ok(phantom)
    }

    pub fn noise(&self) -> NoiseSpec<f64> {
        NoiseSpec {
            delta: self.noise.delta,
            seed: self.noise.seed,
        }
    }

    pub fn params(&self) -> InversionParams<f64> {
        InversionParams {
            gamma_eps0: self.inversion.gamma_eps0,
            gamma_sigma0: self.inversion.gamma_sigma0,
            p: self.inversion.p,
        }
    }

    pub fn stopping(&self) -> StoppingCriteria<f64> {
        let (e, t) = (self.inversion.eta, self.inversion.theta);
        StoppingCriteria {
            eta_eps_1: e[0],
            eta_eps_2: e[1],
            eta_sigma_1: e[2],
            eta_sigma_2: e[3],
            theta_eps_1: t[0],
            theta_eps_2: t[1],
            theta_sigma_1: t[2],
            theta_sigma_2: t[3],
            max_iters: self.inversion.max_iters,
            max_refinements: self.inversion.max_refinements,
        }
    }

    pub fn refinement(&self) -> RefinementConfig<f64> {
        RefinementConfig {
            beta_tilde_eps: self.inversion.beta_tilde_eps.clone(),
            beta_tilde_sigma: self.inversion.beta_tilde_sigma.clone(),
            max_elements: self.inversion.max_elements,
        }
    }
}
