pub mod addressing;
pub mod charging;
pub mod control;
pub mod experiments;
pub mod lte;
pub mod mec;
pub mod placement;
pub mod message;
pub mod security;
pub mod transport;
pub mod sim;
