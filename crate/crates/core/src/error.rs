use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("structural error: {0}")]
    Structural(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("topology error: region {from} does not send flow to region {to}")]
    Topology { from: usize, to: usize },
    #[error("infeasible set-point: negative admitted demand in regions {0:?}")]
    Infeasible(Vec<usize>),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("unstable controller: {0}")]
    Unstable(String),
    #[error("integration error at t = {t_h} h: {reason}; rho = {rho:?}")]
    Integration { t_h: f64, reason: String, rho: Vec<f64> },
    #[error("config error in {location}: {message}")]
    Config { location: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
