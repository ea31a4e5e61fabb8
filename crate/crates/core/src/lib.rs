pub mod checks;
pub mod domain;
pub mod error;
pub mod gallery;
pub mod io;
pub mod genfun;
pub mod law;
pub mod model;
pub mod montecarlo;
pub mod projection;
pub mod reproduce;
pub mod site;
pub mod spectral;
