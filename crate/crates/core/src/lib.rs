//! Information-flow message brokering.
//!
//! Events flow through a directed acyclic graph of information spaces
//! (event histories and interpretations) connected by select, transform,
//! merge, interpret and expand arcs. The graph is deployed over a tree of
//! brokers that sequence, persist, filter and multicast events to clients.

pub mod model;
pub mod interp;
pub mod graph;
pub mod matching;
pub mod wire;
pub mod log;
pub mod broker;
pub mod client;
pub mod sim;
pub mod optimize;
pub mod demo;
pub mod net;
