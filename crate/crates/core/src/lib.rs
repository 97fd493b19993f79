pub mod dynamics;
pub mod qp;
pub mod safety;
pub mod nn;
pub mod policy;
pub mod sysid;
