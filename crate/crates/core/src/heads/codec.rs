//! Box residual codec: center deltas normalized by the anchor's BEV
//! diagonal (height for z), log extent ratios and a raw yaw delta.

use crate::error::Result;
use crate::geometry::{wrap_angle, Box3d};

pub const CODE_SIZE: usize = 7;

pub fn encode(anchor: &Box3d, target: &Box3d) -> [f64; CODE_SIZE] {
    let [la, wa, ha] = anchor.extents;
    let diag = (la * la + wa * wa).sqrt();
    [
        (target.center[0] - anchor.center[0]) / diag,
        (target.center[1] - anchor.center[1]) / diag,
        (target.center[2] - anchor.center[2]) / ha,
        (target.extents[0] / la).ln(),
        (target.extents[1] / wa).ln(),
        (target.extents[2] / ha).ln(),
        target.yaw - anchor.yaw,
    ]
}

/// Inverse of [`encode`]; the yaw is wrapped into (-π, π].
pub fn decode(anchor: &Box3d, r: &[f64; CODE_SIZE]) -> Result<Box3d> {
    let [la, wa, ha] = anchor.extents;
    let diag = (la * la + wa * wa).sqrt();
    Box3d::new(
        [anchor.center[0] + r[0] * diag, anchor.center[1] + r[1] * diag, anchor.center[2] + r[2] * ha],
        [la * r[3].exp(), wa * r[4].exp(), ha * r[5].exp()],
        wrap_angle(anchor.yaw + r[6]),
    )
}
