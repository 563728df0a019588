//! Kernel architecture search: stochastic construction of neural kernels as
//! micro-DAGs of fine-grained primitives, symbolic shape solving, budgeted
//! variable assignment, reference interpretation and distributed evaluation.

pub mod cost;
pub mod dag;
pub mod harness;
pub mod interp;
pub mod ir;
pub mod matching;
pub mod primitive;
pub mod sampler;
pub mod shape;
pub mod solver;

pub use dag::{DagError, KernelTemplate, MicroDag, NodeId};
pub use shape::{Assignment, Constant, Dimension, Shape, VarId};
