//! Two-stage locomotion learning: a spring-leg reduced-order teacher, gait
//! feature recording, and adversarially constrained distillation into a
//! planar multi-link biped.

pub mod biped_env;
pub mod env;
pub mod evalkit;
pub mod gail;
pub mod gaitdata;
pub mod neural;
pub mod physics2d;
pub mod ppo;
pub mod rom_env;
pub mod sac;
pub mod student;
