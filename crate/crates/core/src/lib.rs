//! Desk-scale laboratory for search-advertising auction strategy: a seeded
//! synthetic marketplace, a parametric GSP auction, isotonic rate
//! calibration, a small hand-rolled neural toolkit, offline actor-critic
//! training against a parameter server, online evolution-strategy
//! refinement, and a grid-search oracle that anchors the evaluations.

pub mod auction;
pub mod calib;
pub mod ddpg;
pub mod es;
pub mod market;
pub mod net;
pub mod oracle;
pub mod rng;
pub mod sim;
