//! Head-streamer concentration on live-streaming platforms: a static
//! logit/network-effect model, its equilibria and continuous-time dynamics,
//! an agent-based simulator with platform policies, and welfare-maximising
//! traffic allocation.

pub mod abm;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod par;
pub mod welfare;

pub use error::{Error, Result};
pub use model::{Market, MarketState, PlatformParams, StreamerParams, TrafficAllocation};
