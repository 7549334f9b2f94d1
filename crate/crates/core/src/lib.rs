pub mod distsim;
pub mod events;
pub mod fixture;
pub mod multigrid;
pub mod plot;
pub mod regular;
pub mod sfc;
pub mod spacetree;
pub mod storage;
pub mod trace;
pub mod traversal;
