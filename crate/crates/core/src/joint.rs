//! Paired (target, guide) state. Only the target channel ever diffuses; the
//! guide is the clean conditioning image.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeIndex {
    /// Position on the discrete ladder, `0` is clean data.
    Step(usize),
    /// Continuous diffusion time in `[0, 1]`.
    Continuous(f64),
}

impl TimeIndex {
    pub fn is_clean(&self) -> bool {
        matches!(self, TimeIndex::Step(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    target: Grid,
    guide: Grid,
    time: TimeIndex,
}

/// Which channels the forward process touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelMask {
    pub target: bool,
    pub guide: bool,
}

impl ChannelMask {
    pub const CONDITIONAL: ChannelMask = ChannelMask {
        target: true,
        guide: false,
    };
}

impl JointState {
    /// A clean state at time zero.
    pub fn new(target: Grid, guide: Grid) -> Result<Self> {
        target.check_shape(&guide, "target and guide")?;
        if !target.is_finite() {
            return Err(Error::Validation("target contains non-finite values".into()));
        }
        if !guide.is_finite() {
            return Err(Error::Validation("guide contains non-finite values".into()));
        }
        Ok(JointState {
            target,
            guide,
            time: TimeIndex::Step(0),
        })
    }

    pub fn target(&self) -> &Grid {
        &self.target
    }

    pub fn guide(&self) -> &Grid {
        &self.guide
    }

    pub fn time(&self) -> TimeIndex {
        self.time
    }

    pub fn mask(&self) -> ChannelMask {
        ChannelMask::CONDITIONAL
    }

    pub fn with_time(mut self, time: TimeIndex) -> Self {
        self.time = time;
        self
    }

    /// Replaces the target channel, keeping guide and time.
    pub fn with_target(&self, target: Grid) -> Result<Self> {
        target.check_shape(&self.guide, "new target vs guide")?;
        Ok(JointState {
            target,
            guide: self.guide.clone(),
            time: self.time,
        })
    }

    /// Forward-perturbs the target channel at time `t`; the guide is untouched.
    pub fn perturb(&self, schedule: &NoiseSchedule, t: f64, z: &Grid) -> Result<Self> {
        let sample = schedule.perturb(&self.target, t, z)?;
        Ok(JointState {
            target: sample.x_t,
            guide: self.guide.clone(),
            time: TimeIndex::Continuous(t),
        })
    }
}

pub fn make_joint(target: Grid, guide: Grid) -> Result<JointState> {
    JointState::new(target, guide)
}

/// Overwrites the guide channel with `reference`, leaving target and time as they were.
pub fn pin_guide(state: JointState, reference: &Grid) -> Result<JointState> {
    state.target.check_shape(reference, "pin_guide reference")?;
    Ok(JointState {
        guide: reference.clone(),
        ..state
    })
}
