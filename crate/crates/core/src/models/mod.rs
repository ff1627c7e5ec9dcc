//! Model instantiations of the engine contract.

pub mod attn;
pub mod dln;
pub mod fcln;
pub mod modadd;
