//! Beta diffusion trees: a prior over trees whose leaves define overlapping
//! feature allocations, with simulation, exact densities, branching-process
//! moments, a hierarchical factor-model likelihood and a Metropolis-Hastings
//! sampler validated by joint-distribution tests.

pub mod branching;
pub mod density;
pub mod error;
pub mod factor;
pub mod geweke;
pub mod ks;
pub mod mcmc;
pub mod objects;
pub mod params;
pub mod prior;
pub mod slice;
pub mod special;
pub mod tree;

pub use error::{BdtError, Result};
pub use objects::ObjectSet;
pub use params::{HyperPrior, Hyperparams};
pub use tree::{NodeId, NodeKind, Slot, Tree, TreeBuilder};
