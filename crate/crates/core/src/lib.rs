pub mod autodiff;
pub mod ehr;
pub mod encode;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod recal;
pub mod screen;
pub mod seed;
pub mod shapley;
pub mod synth;
pub mod train;
pub mod trajectory;
