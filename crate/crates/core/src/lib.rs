//! Adversarial imitation learning with evolvable reward-assignment functions.
//!
//! The crate bundles the pieces needed to train an imitation policy against a
//! binary discriminator, to turn discriminator logits into rewards through a
//! small expression language, to score a trained policy by the Wasserstein
//! distance between its state-action samples and the demonstrations, and to
//! search the space of reward-assignment expressions with an evolutionary loop
//! whose crossover step is delegated to a chat-completion model.

pub mod ail;
pub mod disc;
pub mod envs;
pub mod evolution;
pub mod neural;
pub mod ot;
pub mod policy;
pub mod ra;
pub mod rng;
pub mod toolkit;
