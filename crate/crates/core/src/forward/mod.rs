//! Hidden forward physics: operator assembly, spectral decomposition and exact
//! Duhamel evolution of the driven wave equation.

mod evolve;
mod operator;
mod source;

pub use evolve::{
    duhamel_evolve, energy, free_wave, source_for_cauchy_data, CauchyState, ModalSource,
};
pub use operator::{
    assemble, assemble_and_decompose, EllipticOperatorSpec, SpectralModel, Stencil,
    SELF_ADJOINT_TOL,
};
pub use source::{gauss_legendre, CauchyControl, SourceFunction, Window};

#[cfg(test)]
mod tests;
