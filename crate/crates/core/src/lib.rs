//! A small onion-routing network: directory, relays, a circuit-building
//! client, a SOCKS gateway, and a harness for speed and DNS-leak tests.

pub mod cli;
pub mod client;
pub mod directory;
pub mod dns;
pub mod link;
pub mod onion;
pub mod relay;
mod tasks;
pub mod gateway;
pub mod harness;
