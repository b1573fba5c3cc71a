//! Job-shop scheduling toolkit: instances, a dispatching environment on
//! the disjunctive graph, classical priority rules, an exact
//! branch-and-bound oracle, and a graph-network policy trained with PPO.

pub mod env;
pub mod instance;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod ppo;
pub mod rules;
