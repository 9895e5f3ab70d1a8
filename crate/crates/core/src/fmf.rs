//! Feature map flow: fuse the current BEV map with the previous step's map,
//! optionally resampled into the current ego frame by relative odometry.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Module, Param};
use crate::tensor::Tensor;
use crate::types::Pose2D;
use crate::voxel::BevGeometry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FmfConfig {
    pub enabled: bool,
    pub use_odometry: bool,
    pub kernel_size: usize,
}

impl Default for FmfConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            use_odometry: true,
            kernel_size: 3,
        }
    }
}

impl FmfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "fmf.kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Trainable parameters of the fusion block for `c` channels.
    pub fn param_count(&self, c: usize) -> usize {
        let k = self.kernel_size;
        2 * c * c * k * k + c + 2 * c
    }
}

/// Shared concat-conv-BN-ReLU fusion block.
#[derive(Debug, Clone)]
pub struct FmfParams {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl FmfParams {
    pub fn new(channels: usize, kernel_size: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new("fmf.conv", 2 * channels, channels, kernel_size, 1, true, rng),
            bn: BatchNorm::new("fmf.bn", channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv.out_channels()
    }
}

impl Module for FmfParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

pub fn fmf_base(
    tape: &mut Tape,
    current: Var,
    previous: Var,
    params: &mut FmfParams,
    train: bool,
) -> Result<Var> {
    if tape.shape(current) != tape.shape(previous) {
        return Err(Error::shape(format!(
            "fmf inputs differ: {:?} vs {:?}",
            tape.shape(current),
            tape.shape(previous)
        )));
    }
    let cat = tape.concat_channels(current, previous)?;
    let y = params.conv.forward(tape, cat)?;
    let y = params.bn.forward(tape, y, train, None)?;
    Ok(tape.relu(y))
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Source pixel coordinates in the previous map for every pixel of the
/// current map, as a `[1, h, w, 2]` sampling grid.
pub fn warp_grid(relative: &Pose2D, geom: &BevGeometry) -> Tensor {
    let (w, h) = (geom.width, geom.height);
    let inv = relative.inverse();
    let mut data = Vec::with_capacity(w * h * 2);
    for j in 0..h {
        for i in 0..w {
            let (x, y) = geom.pixel_center(i, j);
            let (sx, sy) = inv.apply(x, y);
            let (px, py) = geom.to_pixel(sx, sy);
            data.push(snap(px - 0.5));
            data.push(snap(py - 0.5));
        }
    }
    Tensor::new([1, h, w, 2], data).expect("grid size")
}

/// Resamples the previous map into the current ego frame. `relative` maps
/// previous-frame coordinates to current-frame coordinates.
pub fn warp_feature_map(
    tape: &mut Tape,
    map: Var,
    relative: &Pose2D,
    geom: &BevGeometry,
) -> Result<Var> {
    let (_, _, h, w) = tape.value(map).dims4()?;
    if (h, w) != (geom.height, geom.width) {
        return Err(Error::shape(format!(
            "map {h}x{w} does not match BEV geometry {}x{}",
            geom.height, geom.width
        )));
    }
    tape.bilinear_sample(map, &warp_grid(relative, geom))
}

/// Previous pre-aggregation map and its ego pose.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FmfState {
    pub prev_map: Option<Tensor>,
    pub prev_pose: Option<Pose2D>,
}

impl FmfState {
    pub fn initialized(&self) -> bool {
        self.prev_map.is_some()
    }
}

/// Relative pose between two optional absolute poses, when both are known.
pub fn relative_pose(prev: Option<Pose2D>, cur: Option<Pose2D>) -> Option<Pose2D> {
    Some(Pose2D::relative(&prev?, &cur?))
}

/// Fuses `current` with an explicitly supplied previous map (both on the
/// tape), warping the previous map when `relative` is given.
pub fn fmf_pair(
    tape: &mut Tape,
    current: Var,
    previous: Var,
    relative: Option<&Pose2D>,
    geom: &BevGeometry,
    params: &mut FmfParams,
    train: bool,
) -> Result<Var> {
    let previous = match relative {
        Some(rel) => warp_feature_map(tape, previous, rel, geom)?,
        None => previous,
    };
    fmf_base(tape, current, previous, params, train)
}

/// One recurrent step. On the first call the current map serves as its own
/// predecessor. The returned state holds the current pre-aggregation map.
#[allow(clippy::too_many_arguments)]
pub fn fmf_step(
    tape: &mut Tape,
    current: Var,
    state: &FmfState,
    params: &mut FmfParams,
    pose: Option<Pose2D>,
    use_odometry: bool,
    geom: &BevGeometry,
    train: bool,
) -> Result<(Var, FmfState)> {
    let cur_value = tape.value(current).clone();
    let (previous, relative) = match &state.prev_map {
        None => (current, None),
        Some(prev) => {
            if prev.shape() != cur_value.shape() {
                return Err(Error::State(format!(
                    "feature map shape changed from {:?} to {:?} mid-sequence",
                    prev.shape(),
                    cur_value.shape()
                )));
            }
            let rel = if use_odometry {
                relative_pose(state.prev_pose, pose)
            } else {
                None
            };
            (tape.constant(prev.clone()), rel)
        }
    };
    let out = fmf_pair(tape, current, previous, relative.as_ref(), geom, params, train)?;
    Ok((
        out,
        FmfState {
            prev_map: Some(cur_value),
            prev_pose: pose,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom(w: usize, h: usize) -> BevGeometry {
        BevGeometry {
            x_min: -(w as f64) * 0.32,
            y_min: -(h as f64) * 0.32,
            cell: 0.64,
            width: w,
            height: h,
        }
    }

    #[test]
    fn identity_warp_is_exact() {
        let mut t = Tape::new();
        let m = t.constant(Tensor::from_fn([1, 3, 6, 7], |i| (i as f64 * 0.37).sin()));
        let y = warp_feature_map(&mut t, m, &Pose2D::IDENTITY, &geom(7, 6)).unwrap();
        assert_eq!(t.value(y), t.value(m));
    }

    #[test]
    fn param_count_matches_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = FmfParams::new(5, 3, &mut rng);
        assert_eq!(p.num_trainable(), FmfConfig::default().param_count(5));
    }

    #[test]
    fn shape_change_is_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = FmfParams::new(2, 3, &mut rng);
        let g = geom(4, 4);
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([1, 2, 4, 4]));
        let (_, st) = fmf_step(&mut t, a, &FmfState::default(), &mut p, None, true, &g, false)
            .unwrap();
        let b = t.constant(Tensor::zeros([1, 2, 5, 4]));
        let r = fmf_step(&mut t, b, &st, &mut p, None, true, &g, false);
        assert!(matches!(r, Err(Error::State(_))));
    }
}
