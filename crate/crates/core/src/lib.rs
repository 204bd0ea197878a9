//! Delegation manager for teams of risk-averse grid-navigating agents.

pub mod agents;
pub mod gridworld;
pub mod harness;
pub mod layouts;
pub mod manager;
pub mod oracle;
