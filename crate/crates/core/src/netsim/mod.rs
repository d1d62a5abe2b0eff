//! Deterministic simulated network and power environment.

pub mod link;
pub mod script;
pub mod trace;
pub mod workload;
pub mod world;

pub use link::{Delivery, LinkId, LinkSchedule, LinkState};
pub use script::{Check, Command, Presence, ScenarioHeader, ScenarioScript, ScriptLine};
pub use trace::{Trace, TraceEvent};
pub use world::{run_scenario, SimError, World};
