pub mod ablate;
pub mod bench;
pub mod dump;
pub mod eval;
pub mod gradcheck;
pub mod selftest;
pub mod train;
