// SPDX-License-Identifier: Apache-2.0

//! Simulated SDN plus Gwardar, an intrusion protection system that spots a compromised
//! controller (and misbehaving switches) from data-plane packet trajectories and restores the
//! network from trusted snapshots of an intercepted flow-table replica.

pub mod controller;
pub mod dataplane;
pub mod detection;
pub mod error;
pub mod harness;
pub mod interceptor;
pub mod netmodel;
pub mod normal;
pub mod protection;
pub mod sdn;
pub mod southbound;
pub mod trajectory;

pub use error::{Error, Result};
