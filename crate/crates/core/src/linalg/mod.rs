//! Sparse storage and the only linear-system solver in the crate.

mod cholesky;
mod sparse;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use cholesky::{reverse_cuthill_mckee, EnvelopeCholesky};
pub use sparse::CsrMatrix;

static SOLVER_INVOCATIONS: AtomicUsize = AtomicUsize::new(0);

/// Total number of factorizations and triangular solves performed by this process.
pub fn solver_invocations() -> usize {
    SOLVER_INVOCATIONS.load(Ordering::SeqCst)
}

fn count_solver_invocation() {
    SOLVER_INVOCATIONS.fetch_add(1, Ordering::SeqCst);
}
