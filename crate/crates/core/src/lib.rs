pub mod endpoint;
pub mod engine;
pub mod identity;
pub mod routing;
pub mod sim;
pub mod time;
pub mod wire;
