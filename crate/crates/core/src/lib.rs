pub mod client;
pub mod control;
pub mod protocol;
pub mod sim;
pub mod vision;
