pub mod bench;
pub mod eval;
pub mod fit_gmn;
pub mod gen_data;
pub mod sample;
pub mod train;
