//! Shapley-value allocation of carbon emission responsibility in power networks.
//!
//! A power network is modelled as a set of entities (thermal generators,
//! renewable generators, loads) attached to buses of a DC network. For every
//! coalition of entities a linear dispatch problem yields the system emissions
//! that coalition would cause on its own; the Shapley value of that
//! characteristic function splits the realised emissions of each period over
//! the entities in a provably fair way.
//!
//! Exact Shapley values need `2^n` dispatch solves and stop being practical
//! around two dozen entities. The crate therefore also implements a paired
//! kernel-weighted coalition sampler, a feed-forward surrogate that replaces
//! the dispatch solver inside the sampler, and an error model that turns
//! sampling-convergence fits and surrogate bias measurements into an a
//! posteriori bound on the allocation error.
//!
//! The main entry points, in the order a study usually touches them:
//!
//! * [`grid`]: network + entity model, synthesis, scenario generation, PTDF.
//! * [`dcopf`]: coalition dispatch LP and the bounded-simplex solver behind it.
//! * [`shapley`]: exact characteristic tables and exact Shapley values.
//! * [`sampler`]: paired kernel-weighted sampling estimator and the
//!   stratified Monte Carlo baseline.
//! * [`surrogate`]: dataset generation, training, inference, serialization.
//! * [`pipeline`]: per-period and horizon allocation drivers tying the above
//!   together.
//! * [`bounds`]: convergence fits, surrogate-bias propagation, total error
//!   budget.
//! * [`properties`]: behavioural checks (sign structure, monotonicity,
//!   profile reshaping) on top of any allocator.
//!
//! Every capability has a runnable demonstration under `examples/`:
//!
//! ```text
//! cargo run --example synthesize_and_dispatch
//! cargo run --example exact_shapley
//! cargo run --example kernelshap_estimate
//! cargo run --example stratified_baseline
//! cargo run --example train_surrogate
//! cargo run --example surroshap_pipeline
//! cargo run --example error_bounds
//! cargo run --example property_checks
//! ```
//!
//! A thin `surroshap` binary exposes the same operations as subcommands for
//! scripted use; see `surroshap --help`.
//!
//! All randomness is counter-based: results depend only on the documented
//! `(seed, index)` pairs, never on thread count or iteration timing.

pub mod allocation;
pub mod bounds;
pub mod cli;
pub mod dcopf;
pub mod error;
pub mod grid;
pub mod pipeline;
pub mod properties;
pub mod rng;
pub mod sampler;
pub mod shapley;
pub mod surrogate;

pub use allocation::{AllocationResult, Method};
pub use error::Error;
