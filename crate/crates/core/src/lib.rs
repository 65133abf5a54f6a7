//! Learning linear complementarity system (LCS) models for contact-rich
//! control, and fine-tuning them for task performance by differentiating a
//! contact-implicit MPC planner inside a PPO loop.

pub mod envs;
pub mod lcs;
pub mod learning;
pub mod mpc;
pub mod optim;
pub mod policy;
pub mod rl;
pub mod trainer;
