//! Power-envelope and utilization calculator for servers, instances, and
//! racks.
//!
//! Envelopes are provisioned by rounding the per-server figure up to the
//! next 0.1 kW before multiplying out a rack, matching how the published
//! numbers were quoted (2,118 W -> 2.2 kW -> 39.6 kW for 18 nodes). Both
//! the nominal and provisioned values are reported.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
#[serde(default)]
pub struct PowerModel<S: Scalar> {
    pub server_idle_watts: S,
    pub card_envelope_watts: S,
    pub cards_per_server: u64,
    pub cooling_watts: S,
    pub margin_fraction: S,
}

impl<S: Scalar> Default for PowerModel<S> {
    fn default() -> Self {
        Self {
            server_idle_watts: S::from_config(615.0),
            card_envelope_watts: S::from_config(50.0),
            cards_per_server: 16,
            cooling_watts: S::from_config(350.0),
            margin_fraction: S::from_config(0.20),
        }
    }
}

impl<S: Scalar> PowerModel<S> {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.server_idle_watts,
            self.card_envelope_watts,
            self.cooling_watts,
            self.margin_fraction,
        ];
        if fields.iter().any(|v| *v < S::zero()) {
            return Err(Error::invalid("power model", "all fields must be >= 0"));
        }
        if self.margin_fraction >= S::one() {
            return Err(Error::invalid("power model", "margin_fraction must be < 1"));
        }
        Ok(())
    }

    /// Per-server envelope:
    /// `(idle + cards x card_envelope + cooling) x (1 + margin)`.
    pub fn server_envelope(&self) -> S {
        let base = self.server_idle_watts
            + self.card_envelope_watts * S::from_count(self.cards_per_server)
            + self.cooling_watts;
        base * (S::one() + self.margin_fraction)
    }

    /// Server envelope rounded up to the next 0.1 kW, the granularity at
    /// which rack power is provisioned.
    pub fn server_envelope_provisioned(&self) -> S {
        let step = S::from_config(100.0);
        (self.server_envelope() / step).ceil() * step
    }

    /// Rack envelope under the provisioning convention:
    /// `nodes x provisioned server envelope`.
    pub fn rack_envelope(&self, nodes: u64) -> S {
        self.server_envelope_provisioned() * S::from_count(nodes)
    }

    /// Rack envelope without provisioning rounding.
    pub fn rack_envelope_nominal(&self, nodes: u64) -> S {
        self.server_envelope() * S::from_count(nodes)
    }
}

/// Measured power as a fraction of the allocation.
pub fn utilization<S: Scalar>(measured_watts: S, allocated_watts: S) -> Result<S> {
    if allocated_watts <= S::zero() {
        return Err(Error::UndefinedAllocation);
    }
    Ok(measured_watts / allocated_watts)
}

/// Multi-instance power extrapolation with failover headroom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct InstanceExtrapolation<S: Scalar> {
    pub instances: u64,
    pub total_watts: S,
    pub reserve_low_watts: S,
    pub reserve_high_watts: S,
    pub rack_envelope_watts: S,
    /// Total plus the low end of the reserve fits the rack envelope.
    pub fits_at_low_reserve: bool,
    /// Total plus the high end of the reserve fits the rack envelope.
    pub fits_at_high_reserve: bool,
}

impl<S: Scalar> InstanceExtrapolation<S> {
    /// Fits with some reserve but not the full one.
    pub fn marginal(&self) -> bool {
        self.fits_at_low_reserve && !self.fits_at_high_reserve
    }
}

/// Scales one instance's measured draw to `k` instances and flags whether
/// the total plus a failover reserve fits the rack envelope.
pub fn extrapolate_instances<S: Scalar>(
    per_instance_watts: S,
    k: u64,
    reserve_watts: (S, S),
    rack_envelope_watts: S,
) -> InstanceExtrapolation<S> {
    let total = per_instance_watts * S::from_count(k);
    InstanceExtrapolation {
        instances: k,
        total_watts: total,
        reserve_low_watts: reserve_watts.0,
        reserve_high_watts: reserve_watts.1,
        rack_envelope_watts,
        fits_at_low_reserve: total + reserve_watts.0 <= rack_envelope_watts,
        fits_at_high_reserve: total + reserve_watts.1 <= rack_envelope_watts,
    }
}
