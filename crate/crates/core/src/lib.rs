//! Agent-based testbed for two energy decision problems: stochastic home
//! battery dispatch with blackout interventions, and simultaneous ascending
//! auctions (SAA) for power network access rights.
//!
//! The crate is organized around pluggable agents (exact DP, greedy,
//! straightforward bidding, and LLM-backed agents speaking a structured
//! Thought/Action/Reflection/Journal protocol) driven by a seeded Monte
//! Carlo harness.

pub mod agent;
pub mod auction;
pub mod battery;
pub mod bidding;
pub mod dispatch;
pub mod harness;
pub mod llm;
pub mod money;

pub use money::{Energy, Money};
