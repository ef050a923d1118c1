use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate element {element}: signed volume {volume:e}")]
    DegenerateElement { element: usize, volume: f64 },

    #[error("point ({x}, {y}, {z}) lies outside the mesh")]
    PointNotFound { x: f64, y: f64, z: f64 },

    #[error("refinement would modify elements touching the FE/FD interface")]
    InterfaceRefinement,

    #[error("numerical instability: non-finite field at step {step}")]
    Instability { step: usize },

    #[error("non-finite objective at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("volume history needs {required} bytes, cap is {cap}")]
    MemoryCap { required: usize, cap: usize },

    #[error("inverse crime: data mesh level {data_level} is not finer than inversion level {inversion_level}")]
    InverseCrime {
        data_level: usize,
        inversion_level: usize,
    },

    #[error("observation file: {0}")]
    Format(String),

    #[error("observation file header checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
