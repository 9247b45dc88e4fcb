//! Conditional similarity retrieval: annotations, caption mining,
//! benchmark construction, a conditional combiner head and evaluation.

pub mod annotation;
pub mod benchmark;
pub mod caption;
pub mod io;
pub mod mining;
pub mod rng;
pub mod combiner;
pub mod retrieval;
pub mod synthetic;
