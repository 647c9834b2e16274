//! Two-scale solvers for the Stokes–Nernst–Planck–Poisson system in periodically
//! perforated domains: cell problems, the microscopic system, the upscaled
//! system, first-order reconstructions and convergence diagnostics.

pub mod cell;
pub mod config;
pub mod error;
pub mod fv;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod macroscale;
pub mod micro;
pub mod recon;
pub mod verify;

pub use error::{Error, Result};

/// Maps over a slice, on the rayon pool when the `parallel` feature is enabled.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
