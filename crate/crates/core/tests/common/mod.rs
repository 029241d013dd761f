#![allow(dead_code)]

pub mod grads;
pub mod oracles;
pub mod props;
