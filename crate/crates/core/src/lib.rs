pub mod attention;
mod binio;
pub mod cma;
pub mod harness;
pub mod ndtensor;
pub mod objective;
pub mod params;
pub mod pixelnet;
pub mod segmodel;
pub mod synthbench;
