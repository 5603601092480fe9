//! Online shielding for an avatar acting among stochastic adversaries.
//!
//! Between two avatar decisions a finite-horizon sub-MDP of the multi-agent arena is
//! built and every task available at the next decision is valued by its minimal
//! probability of reaching an unsafe state. Tasks whose value is too far above the
//! optimum are blocked.

pub mod arena;
pub mod behavior;
pub mod harness;
pub mod mdp;
pub mod rl;
pub mod service;
pub mod shield;
pub mod snake;
pub mod submdp;

pub use arena::{gridworld_from_ascii, Arena, ArenaError, LocId, Task, TaskId};
pub use behavior::{uniform_behavior, weighted_behavior, AdversaryBehavior};
pub use mdp::{GlobalState, Payload};
pub use submdp::{build_submdp, SubMdp};
