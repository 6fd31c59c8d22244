use super::{CopError, Result};

/// Which groups of loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossMask {
    /// Class, 2D box, GIoU and projected-center terms.
    pub two_d: bool,
    /// Dimension and orientation terms.
    pub size_angle: bool,
    pub depth: bool,
}

impl LossMask {
    pub const ALL: LossMask = LossMask {
        two_d: true,
        size_angle: true,
        depth: true,
    };

    pub fn active_groups(&self) -> usize {
        self.two_d as usize + self.size_angle as usize + self.depth as usize
    }
}

/// Stage-wise loss activation for hierarchical task learning.
///
/// `schedule` holds two increasing epoch boundaries: before the first only
/// the 2D terms train, from the first size and angle join, and from the
/// second depth joins.
pub fn htl_stage_mask(epoch: usize, schedule: &[usize]) -> Result<LossMask> {
    if schedule.len() != 2 || schedule[0] >= schedule[1] {
        return Err(CopError::InvalidConfig(format!(
            "HTL schedule needs two increasing boundaries, got {schedule:?}"
        )));
    }
    Ok(LossMask {
        two_d: true,
        size_angle: epoch >= schedule[0],
        depth: epoch >= schedule[1],
    })
}
