//! Desk-scale post-training engine for embodied reasoning tasks.
//!
//! Task-aware rewards, group-relative policy optimization with quality control, a
//! frontier curriculum with rejection-sampling fine-tuning, on-policy distillation, and
//! a micro Mixture-of-Transformers kernel with analytic gradients.

pub mod cli;
pub mod curriculum;
pub mod distill;
pub mod grpo;
pub mod mot;
pub mod numerics;
pub mod optim;
pub mod policy;
pub mod rewards;
pub mod task;
