pub mod autodiff;
pub mod conditioning;
pub mod data;
pub mod evaluation;
pub mod gan;
pub mod imputer;
pub mod missingness;
pub mod nn;
pub mod pipeline;
