pub mod acoustic;
pub mod experiment;
pub mod factors;
pub mod fleetsim;
pub mod liegroups;
pub mod solver;
pub mod osm;
