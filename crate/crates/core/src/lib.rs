//! Auction-based VM pricing and placement for a three-tier edge deployment,
//! with per-slot bandwidth allocation.

pub mod auction;
pub mod bandwidth;
pub mod cli;
pub mod exact;
pub mod heuristics;
pub mod io;
pub mod model;
pub mod money;
pub mod scenario;
pub mod sim;

pub use money::Money;
