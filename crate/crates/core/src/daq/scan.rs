//! Scan loop: projects contacts onto taxels and runs every channel through
//! the forward model and its dynamics, one frame per tick.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::capmodel::{DeformationState, TaxelModel};
use crate::daq::frame::Frame;
use crate::dynamics::{ChannelState, SensorChannelConfig};
use crate::error::DomainError;
use crate::topology::{project_contacts, ContactSpec, SkinTopology, TopologyError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScanError {
    #[error("{got} channel states for {expected} taxels")]
    StateMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Scan rate and address-ordered taxel list.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSchedule {
    pub rate_hz: f64,
    pub order: Vec<usize>,
}

impl ScanSchedule {
    pub fn new(topo: &SkinTopology, rate_hz: f64) -> Result<Self, DomainError> {
        if !(100.0..=400.0).contains(&rate_hz) {
            return Err(DomainError::OutOfRange {
                name: "scan rate",
                value: rate_hz,
                min: 100.0,
                max: 400.0,
            });
        }
        Ok(ScanSchedule {
            rate_hz,
            order: topo.scan_order(),
        })
    }

    pub fn period(&self) -> f64 {
        1.0 / self.rate_hz
    }
}

/// Simulated time advancing in whole scan periods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualClock {
    rate_hz: f64,
    tick: u64,
}

impl VirtualClock {
    pub fn new(rate_hz: f64) -> Self {
        VirtualClock { rate_hz, tick: 0 }
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn seconds(&self) -> f64 {
        self.tick as f64 / self.rate_hz
    }

    pub fn micros(&self) -> u64 {
        (self.tick as f64 * 1e6 / self.rate_hz).round() as u64
    }

    pub fn advance(&mut self) {
        self.tick += 1;
    }
}

/// Everything a scan needs besides the mutable channel states.
#[derive(Debug, Clone)]
pub struct ScanSetup {
    pub topology: SkinTopology,
    pub model: TaxelModel,
    pub channel: SensorChannelConfig,
    pub schedule: ScanSchedule,
    /// In-plane deformation of taxels near moving joints.
    pub poses: BTreeMap<usize, DeformationState>,
}

impl ScanSetup {
    pub fn new(
        topology: SkinTopology,
        model: TaxelModel,
        channel: SensorChannelConfig,
    ) -> Result<Self, ScanError> {
        channel.validate()?;
        let schedule = ScanSchedule::new(&topology, channel.sample_rate_hz)?;
        Ok(ScanSetup {
            topology,
            model,
            channel,
            schedule,
            poses: BTreeMap::new(),
        })
    }

    /// Fresh channel states in scan order.
    pub fn channel_states(&self) -> Result<Vec<ChannelState>, ScanError> {
        let rate = self.channel.hysteresis.resolve_rate(&self.model)?;
        let baseline = self.model.baseline();
        Ok(self
            .schedule
            .order
            .iter()
            .map(|&i| ChannelState::new(&self.channel, i as u64, baseline, rate))
            .collect())
    }
}

/// Scans every taxel once in address order and returns the frame together
/// with the unencoded readings in pF.
pub fn scan_cycle(
    setup: &ScanSetup,
    forces: &BTreeMap<usize, f64>,
    states: &mut [ChannelState],
    sequence: u32,
    timestamp_us: u64,
) -> Result<(Frame, Vec<f64>), ScanError> {
    let order = &setup.schedule.order;
    if states.len() != order.len() {
        return Err(ScanError::StateMismatch {
            expected: order.len(),
            got: states.len(),
        });
    }
    let dt = setup.schedule.period();
    let baseline = setup.model.baseline();
    let rest = DeformationState::default();
    let mut readings = Vec::with_capacity(order.len());
    for (state, index) in states.iter_mut().zip(order) {
        let force = forces.get(index).copied().unwrap_or(0.0);
        let pose = setup.poses.get(index).unwrap_or(&rest);
        let ideal = setup.model.capacitance(force, pose)?;
        readings.push(state.process(ideal, baseline, force, dt, &setup.channel)?);
    }
    Ok((Frame::from_pf(sequence, timestamp_us, &readings), readings))
}

/// Produces frames on demand.
pub trait FrameSource: Send {
    fn next_frame(&mut self) -> Result<Frame, ScanError>;
}

/// Deterministic scan loop in virtual time.
#[derive(Debug, Clone)]
pub struct Simulator {
    setup: ScanSetup,
    contacts: Vec<ContactSpec>,
    states: Vec<ChannelState>,
    clock: VirtualClock,
    sequence: u32,
    last: Vec<f64>,
}

impl Simulator {
    pub fn new(setup: ScanSetup, contacts: Vec<ContactSpec>) -> Result<Self, ScanError> {
        for c in &contacts {
            c.validate()?;
            setup.topology.section(&c.link_id)?;
        }
        let states = setup.channel_states()?;
        let clock = VirtualClock::new(setup.schedule.rate_hz);
        Ok(Simulator {
            setup,
            contacts,
            states,
            clock,
            sequence: 0,
            last: Vec::new(),
        })
    }

    pub fn setup(&self) -> &ScanSetup {
        &self.setup
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn states(&self) -> &[ChannelState] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [ChannelState] {
        &mut self.states
    }

    pub fn set_pose(&mut self, index: usize, pose: DeformationState) {
        self.setup.poses.insert(index, pose);
    }

    /// Readings of the most recent frame, in pF before wire encoding.
    pub fn last_readings(&self) -> &[f64] {
        &self.last
    }

    /// Advances one tick with contacts taken from the configured scenario.
    pub fn step(&mut self) -> Result<Frame, ScanError> {
        let forces = project_contacts(&self.setup.topology, &self.contacts, self.clock.seconds())?;
        self.step_with_forces(&forces)
    }

    /// Advances one tick with an explicit per-taxel force map.
    pub fn step_with_forces(&mut self, forces: &BTreeMap<usize, f64>) -> Result<Frame, ScanError> {
        let (frame, readings) = scan_cycle(
            &self.setup,
            forces,
            &mut self.states,
            self.sequence,
            self.clock.micros(),
        )?;
        self.sequence = self.sequence.wrapping_add(1);
        self.clock.advance();
        self.last = readings;
        Ok(frame)
    }
}

impl FrameSource for Simulator {
    fn next_frame(&mut self) -> Result<Frame, ScanError> {
        self.step()
    }
}
