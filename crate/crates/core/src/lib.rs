#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod bench;
pub mod envs;
pub mod extract;
pub mod grrt;
pub mod ipt;
pub mod nn;
pub mod ppo;
pub mod state;
