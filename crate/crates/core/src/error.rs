use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The point lies on the camera's principal plane and has no finite image.
    #[error("point on principal plane (depth {depth:e})")]
    PrincipalPlane { depth: f64 },

    #[error("{what} needs at least {needed} inputs, got {got}")]
    Arity {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("triangulated point is at infinity (w = {w:e})")]
    PointAtInfinity { w: f64 },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("referential error: {0}")]
    Referential(String),

    #[error("unsupported format_version {found:?} (supported major {supported})")]
    FormatVersion { found: String, supported: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("synthetic scene generation failed: {0}")]
    Generation(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("reconstruction failed: {0}")]
    Reconstruction(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
