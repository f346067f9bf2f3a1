// SPDX-License-Identifier: Apache-2.0

//! The simulated network as a whole: NOS, data plane, and the interception point between them
//! where Gwardar can block controller traffic.

use crate::controller::{compile_shortest_paths, CompromiseMode, Controller, PriorityClass};
use crate::dataplane::{DataPlane, FlowModAck};
use crate::error::Result;
use crate::netmodel::{DeviceId, FlowMod, FlowRule, SimTime, Topology};
use crate::southbound::Origin;

#[derive(Debug, Clone)]
pub struct Sdn {
    pub dataplane: DataPlane,
    pub controller: Controller,
    controller_blocked: bool,
    blocked: u64,
}

impl Sdn {
    pub fn new(topology: Topology, seed: u64) -> Self {
        Self {
            dataplane: DataPlane::new(topology.clone(), seed),
            controller: Controller::new(topology),
            controller_blocked: false,
            blocked: 0,
        }
    }

    pub fn topology(&self) -> &Topology {
        self.dataplane.topology()
    }

    pub fn now(&self) -> SimTime {
        self.dataplane.now()
    }

    pub fn set_time(&mut self, t: SimTime) {
        self.dataplane.set_time(t);
    }

    pub fn controller_blocked(&self) -> bool {
        self.controller_blocked
    }

    pub fn set_controller_blocked(&mut self, blocked: bool) {
        self.controller_blocked = blocked;
    }

    /// Controller FlowMods dropped at the interception point so far.
    pub fn blocked_count(&self) -> u64 {
        self.blocked
    }

    fn deliver_from_controller(&mut self, mods: Vec<FlowMod>) -> usize {
        if self.controller_blocked {
            self.blocked += mods.len() as u64;
            return 0;
        }
        let mut n = 0;
        for m in &mods {
            // The NOS only addresses devices it knows; unknown ids are a caller bug.
            if self.dataplane.apply_flow_mod(m, Origin::Controller).is_ok() {
                n += 1;
            }
        }
        n
    }

    /// Northbound submission. Returns how many FlowMods reached the data plane.
    pub fn submit_policy(&mut self, rules: Vec<(DeviceId, FlowRule)>, class: PriorityClass) -> usize {
        let mods = self.controller.submit_policy(rules, class);
        self.deliver_from_controller(mods)
    }

    pub fn withdraw_policy(&mut self, rules: Vec<(DeviceId, FlowRule)>, class: PriorityClass) -> usize {
        let mods = self.controller.withdraw_policy(rules, class);
        self.deliver_from_controller(mods)
    }

    pub fn compromise(&mut self, mode: CompromiseMode) -> usize {
        let now = self.now();
        let mods = self.controller.compromise(mode, now);
        self.deliver_from_controller(mods)
    }

    /// Gwardar's own path to the switches, bypassing the NOS.
    pub fn send_direct(&mut self, mods: &[FlowMod]) -> Vec<Result<FlowModAck>> {
        mods.iter()
            .map(|m| self.dataplane.apply_flow_mod(m, Origin::Gwardar))
            .collect()
    }

    /// Compiles shortest-path routing and pushes it through the NOS.
    pub fn install_shortest_paths(&mut self) -> Result<usize> {
        let now = self.now();
        let compiled = compile_shortest_paths(self.topology())?;
        let rules = compiled
            .into_iter()
            .flat_map(|(d, rs)| rs.into_iter().map(move |r| (d, r.installed_at(now))))
            .collect();
        Ok(self.submit_policy(rules, PriorityClass::Normal))
    }
}
