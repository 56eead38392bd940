//! Live sessions: a human plays one side of the pursuit-evasion game over a
//! websocket while the simulator drives the other.

pub mod protocol;
pub mod server;
pub mod session;

pub use server::{router, AppState, Health, ServerConfig};
pub use session::{Ack, Session, SessionError};
