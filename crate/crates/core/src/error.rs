use thiserror::Error;

/// Errors raised anywhere in the geometry, assembly and time-stepping stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid knot vector: {0}")]
    InvalidKnots(String),

    #[error("parameter {value} outside knot range [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("invalid patch: {0}")]
    InvalidPatch(String),

    #[error("degenerate parameterization at s = ({0}, {1})")]
    DegenerateParameterization(f64, f64),

    #[error("collocation points collapse: abscissae {0} and {1} are too close")]
    CollocationDegeneracy(f64, f64),

    #[error("quadrature order {0} out of range 1..=64")]
    QuadratureOrder(usize),

    #[error("near-singular subdivision exceeded depth {0}")]
    NearSingularOverflow(usize),

    #[error("kernel evaluated at zero separation")]
    SingularEvaluation,

    #[error("single-layer system is singular at row {row} (collocation point {point:?})")]
    BemSingular { row: usize, point: [f64; 3] },

    #[error("linear system is singular at pivot {0}")]
    SingularMatrix(usize),

    #[error("evaluation point is too close to the surface (distance {0:e})")]
    NearSurface(f64),

    #[error("element degenerate at quadrature point of element {0}")]
    ElementDegeneracy(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("patch file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
