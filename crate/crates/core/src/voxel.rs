//! Pillar / voxel bucketing with capped, seeded random sampling.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::PointCloudFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    Pillar,
    Voxel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub cell_size: (f64, f64, f64),
    pub max_points_per_cell: usize,
    pub max_cells: usize,
    pub mode: GridMode,
}

/// Integer grid extents: `width` along x, `height` along y, `depth` along z
/// (depth is 1 in pillar mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

fn cells_along(range: (f64, f64), cell: f64, axis: &str) -> Result<usize> {
    let extent = range.1 - range.0;
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::Config(format!("{axis} range {range:?} is empty")));
    }
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(Error::Config(format!("{axis} cell size must be positive")));
    }
    let n = extent / cell;
    let rounded = n.round();
    if (n - rounded).abs() > 1e-6 || rounded < 1.0 {
        return Err(Error::Config(format!(
            "{axis} extent {extent} is not a whole number of {cell} cells"
        )));
    }
    Ok(rounded as usize)
}

impl GridConfig {
    pub fn validate(&self) -> Result<GridDims> {
        if self.max_points_per_cell == 0 || self.max_cells == 0 {
            return Err(Error::Config("grid caps must be at least 1".into()));
        }
        let width = cells_along(self.x_range, self.cell_size.0, "x")?;
        let height = cells_along(self.y_range, self.cell_size.1, "y")?;
        let depth = match self.mode {
            GridMode::Pillar => {
                cells_along(self.z_range, self.z_range.1 - self.z_range.0, "z")?;
                1
            }
            GridMode::Voxel => cells_along(self.z_range, self.cell_size.2, "z")?,
        };
        Ok(GridDims {
            width,
            height,
            depth,
        })
    }

    pub fn dims(&self) -> GridDims {
        self.validate().expect("invalid grid config")
    }

    /// Width of the decorated per-point feature.
    pub fn feature_dim(&self) -> usize {
        match self.mode {
            GridMode::Pillar => 9,
            GridMode::Voxel => 7,
        }
    }
}

/// Full-range pillar preset.
pub fn default_pillar_config() -> GridConfig {
    GridConfig {
        x_range: (-51.2, 51.2),
        y_range: (-51.2, 51.2),
        z_range: (-3.0, 3.0),
        cell_size: (0.32, 0.32, 6.0),
        max_points_per_cell: 20,
        max_cells: 60_000,
        mode: GridMode::Pillar,
    }
}

/// Full-range voxel preset.
pub fn default_voxel_config() -> GridConfig {
    GridConfig {
        x_range: (-51.2, 51.2),
        y_range: (-51.2, 51.2),
        z_range: (-3.0, 3.0),
        cell_size: (0.1, 0.1, 0.15),
        max_points_per_cell: 10,
        max_cells: 150_000,
        mode: GridMode::Voxel,
    }
}

/// Pillar preset over a 25.6 m square (80 x 80 cells).
pub fn desk_pillar_config() -> GridConfig {
    GridConfig {
        x_range: (-12.8, 12.8),
        y_range: (-12.8, 12.8),
        ..default_pillar_config()
    }
}

/// Voxel preset over a 12.8 m square (128 x 128 x 40 cells).
pub fn desk_voxel_config() -> GridConfig {
    GridConfig {
        x_range: (-6.4, 6.4),
        y_range: (-6.4, 6.4),
        ..default_voxel_config()
    }
}

/// Metric layout of a BEV map: pixel `(i, j)` (column `i`, row `j`) covers
/// `[x_min + i*cell, x_min + (i+1)*cell)` by the same along y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGeometry {
    pub x_min: f64,
    pub y_min: f64,
    pub cell: f64,
    pub width: usize,
    pub height: usize,
}

impl BevGeometry {
    /// Map center of pixel `(i, j)` in meters.
    pub fn pixel_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_min + (i as f64 + 0.5) * self.cell,
            self.y_min + (j as f64 + 0.5) * self.cell,
        )
    }

    /// Continuous pixel coordinates of a metric point.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x_min) / self.cell, (y - self.y_min) / self.cell)
    }
}

impl GridConfig {
    /// Geometry of the map produced at `stride` cells per output pixel.
    /// Requires square cells and dims divisible by `stride`.
    pub fn bev_geometry(&self, stride: usize) -> Result<BevGeometry> {
        let d = self.validate()?;
        if (self.cell_size.0 - self.cell_size.1).abs() > 1e-12 {
            return Err(Error::Config("BEV cells must be square".into()));
        }
        if stride == 0 || d.width % stride != 0 || d.height % stride != 0 {
            return Err(Error::Config(format!(
                "grid {}x{} is not divisible by output stride {stride}",
                d.width, d.height
            )));
        }
        Ok(BevGeometry {
            x_min: self.x_range.0,
            y_min: self.y_range.0,
            cell: self.cell_size.0 * stride as f64,
            width: d.width / stride,
            height: d.height / stride,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCoord {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

/// Sparse occupied cells with per-point decorated features.
///
/// `features` is row-major `[num_cells, max_points, feature_dim]`; rows at or
/// beyond a cell's point count are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarTensor {
    pub features: Vec<f64>,
    pub coords: Vec<CellCoord>,
    pub point_counts: Vec<usize>,
    pub max_points: usize,
    pub feature_dim: usize,
    pub grid_dims: GridDims,
}

impl PillarTensor {
    pub fn num_cells(&self) -> usize {
        self.coords.len()
    }

    pub fn total_points(&self) -> usize {
        self.point_counts.iter().sum()
    }

    pub fn point_features(&self, cell: usize, row: usize) -> &[f64] {
        let start = (cell * self.max_points + row) * self.feature_dim;
        &self.features[start..start + self.feature_dim]
    }

    /// Native-endian bytes of every field, for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.coords {
            for v in [c.x, c.y, c.z] {
                out.extend_from_slice(&(v as u64).to_le_bytes());
            }
        }
        for &n in &self.point_counts {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        out
    }
}

/// Buckets `frame` into the grid described by `cfg`.
pub fn voxelize(frame: &PointCloudFrame, cfg: &GridConfig, seed: u64) -> Result<PillarTensor> {
    let dims = cfg.validate()?;
    let (dx, dy, dz) = cfg.cell_size;
    let voxel = cfg.mode == GridMode::Voxel;

    let mut keyed: Vec<(usize, usize)> = Vec::with_capacity(frame.points.len());
    for (idx, p) in frame.points.iter().enumerate() {
        let inside = p.x >= cfg.x_range.0
            && p.x < cfg.x_range.1
            && p.y >= cfg.y_range.0
            && p.y < cfg.y_range.1
            && p.z >= cfg.z_range.0
            && p.z < cfg.z_range.1;
        if !inside {
            continue;
        }
        let ix = ((p.x - cfg.x_range.0) / dx).floor() as usize;
        let iy = ((p.y - cfg.y_range.0) / dy).floor() as usize;
        let iz = if voxel {
            ((p.z - cfg.z_range.0) / dz).floor() as usize
        } else {
            0
        };
        if ix >= dims.width || iy >= dims.height || iz >= dims.depth {
            continue;
        }
        let key = (iz * dims.height + iy) * dims.width + ix;
        keyed.push((key, idx));
    }
    keyed.sort_by_key(|&(key, _)| key);

    let mut cells: Vec<(usize, Vec<usize>)> = Vec::new();
    for (key, idx) in keyed {
        match cells.last_mut() {
            Some((k, members)) if *k == key => members.push(idx),
            _ => cells.push((key, vec![idx])),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if cells.len() > cfg.max_cells {
        let mut keep = sample(&mut rng, cells.len(), cfg.max_cells).into_vec();
        keep.sort_unstable();
        let mut all: Vec<Option<(usize, Vec<usize>)>> = cells.into_iter().map(Some).collect();
        cells = keep.into_iter().map(|i| all[i].take().unwrap()).collect();
    }

    let cap = cfg.max_points_per_cell;
    let d = cfg.feature_dim();
    let mut features = vec![0.0; cells.len() * cap * d];
    let mut coords = Vec::with_capacity(cells.len());
    let mut point_counts = Vec::with_capacity(cells.len());
    for (ci, (key, members)) in cells.iter_mut().enumerate() {
        if members.len() > cap {
            let mut keep = sample(&mut rng, members.len(), cap).into_vec();
            keep.sort_unstable();
            *members = keep.into_iter().map(|i| members[i]).collect();
        }
        let ix = *key % dims.width;
        let iy = (*key / dims.width) % dims.height;
        let iz = *key / (dims.width * dims.height);
        coords.push(CellCoord {
            x: ix,
            y: iy,
            z: iz,
        });
        point_counts.push(members.len());

        let n = members.len() as f64;
        let (mut mx, mut my, mut mz) = (0.0, 0.0, 0.0);
        for &i in members.iter() {
            let p = &frame.points[i];
            mx += p.x;
            my += p.y;
            mz += p.z;
        }
        mx /= n;
        my /= n;
        mz /= n;
        let center_x = cfg.x_range.0 + (ix as f64 + 0.5) * dx;
        let center_y = cfg.y_range.0 + (iy as f64 + 0.5) * dy;
        for (row, &i) in members.iter().enumerate() {
            let p = &frame.points[i];
            let base = (ci * cap + row) * d;
            let f = &mut features[base..base + d];
            f[0] = p.x;
            f[1] = p.y;
            f[2] = p.z;
            f[3] = p.intensity;
            f[4] = p.x - mx;
            f[5] = p.y - my;
            f[6] = p.z - mz;
            if !voxel {
                f[7] = p.x - center_x;
                f[8] = p.y - center_y;
            }
        }
    }

    Ok(PillarTensor {
        features,
        coords,
        point_counts,
        max_points: cap,
        feature_dim: d,
        grid_dims: dims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Point;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn frame_of(points: Vec<Point>) -> PointCloudFrame {
        PointCloudFrame {
            points,
            ..Default::default()
        }
    }

    #[test]
    fn origin_lands_in_cell_160() {
        let cfg = default_pillar_config();
        let t = voxelize(&frame_of(vec![Point::new(0.0, 0.0, 0.0, 0.5)]), &cfg, 0).unwrap();
        assert_eq!(t.coords, vec![CellCoord { x: 160, y: 160, z: 0 }]);
    }

    #[test]
    fn single_point_decoration() {
        let cfg = desk_pillar_config();
        let p = Point::new(1.0, -2.0, 0.5, 0.25);
        let t = voxelize(&frame_of(vec![p]), &cfg, 0).unwrap();
        let f = t.point_features(0, 0);
        assert_eq!(&f[..4], &[1.0, -2.0, 0.5, 0.25]);
        assert_eq!(&f[4..7], &[0.0, 0.0, 0.0]);
        let c = t.coords[0];
        let cx = -12.8 + (c.x as f64 + 0.5) * 0.32;
        let cy = -12.8 + (c.y as f64 + 0.5) * 0.32;
        assert!((f[7] - (1.0 - cx)).abs() < 1e-12);
        assert!((f[8] - (-2.0 - cy)).abs() < 1e-12);
        assert!(f[7].abs() <= 0.16 + 1e-12 && f[8].abs() <= 0.16 + 1e-12);
    }

    #[test]
    fn cap_of_twenty_is_reproducible() {
        let cfg = default_pillar_config();
        let points: Vec<Point> = (0..25)
            .map(|i| Point::new(0.01 * i as f64, 0.005 * i as f64, 0.0, 0.5))
            .collect();
        let frame = frame_of(points);
        let a = voxelize(&frame, &cfg, 42).unwrap();
        assert_eq!(a.point_counts, vec![20]);
        let b = voxelize(&frame, &cfg, 42).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = voxelize(&frame, &cfg, 43).unwrap();
        assert_eq!(c.point_counts, vec![20]);
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn cell_cap_drops_cells() {
        let mut cfg = desk_pillar_config();
        cfg.max_cells = 3;
        let points: Vec<Point> = (0..10)
            .map(|i| Point::new(-12.0 + i as f64, 0.0, 0.0, 0.1))
            .collect();
        let t = voxelize(&frame_of(points), &cfg, 1).unwrap();
        assert_eq!(t.num_cells(), 3);
    }

    #[test]
    fn max_boundary_is_excluded() {
        let cfg = desk_pillar_config();
        let t = voxelize(
            &frame_of(vec![
                Point::new(12.8, 0.0, 0.0, 0.0),
                Point::new(0.0, 12.8, 0.0, 0.0),
                Point::new(-12.8, -12.8, -3.0, 0.0),
            ]),
            &cfg,
            0,
        )
        .unwrap();
        assert_eq!(t.coords, vec![CellCoord { x: 0, y: 0, z: 0 }]);
    }

    #[test]
    fn empty_frame_gives_empty_tensor() {
        let t = voxelize(&frame_of(vec![]), &desk_pillar_config(), 0).unwrap();
        assert_eq!(t.num_cells(), 0);
        assert!(t.features.is_empty());
    }

    #[test]
    fn presets() {
        let p = default_pillar_config();
        assert_eq!((p.max_points_per_cell, p.max_cells), (20, 60_000));
        assert_eq!(p.cell_size, (0.32, 0.32, 6.0));
        let v = default_voxel_config();
        assert_eq!((v.max_points_per_cell, v.max_cells), (10, 150_000));
        assert_eq!(v.cell_size, (0.1, 0.1, 0.15));
        let d = desk_pillar_config().dims();
        assert_eq!((d.width, d.height), (80, 80));
        let dv = desk_voxel_config().dims();
        assert_eq!((dv.width, dv.height, dv.depth), (128, 128, 40));
    }

    #[test]
    fn voxel_mode_uses_seven_features() {
        let cfg = desk_voxel_config();
        let t = voxelize(
            &frame_of(vec![
                Point::new(0.01, 0.02, 0.01, 0.5),
                Point::new(0.03, 0.04, 0.02, 0.5),
            ]),
            &cfg,
            0,
        )
        .unwrap();
        assert_eq!(t.feature_dim, 7);
        assert_eq!(t.point_counts, vec![2]);
        let f0 = t.point_features(0, 0);
        assert!((f0[4] + 0.01).abs() < 1e-12);
        assert!((f0[5] + 0.01).abs() < 1e-12);
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        let mut cfg = desk_pillar_config();
        cfg.cell_size.0 = 0.3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn uncapped_partition_matches_brute_force(
            pts in prop::collection::vec(
                (-14.0f64..14.0, -14.0f64..14.0, -3.5f64..3.5), 0..1000),
            seed in any::<u64>(),
        ) {
            let mut cfg = desk_pillar_config();
            // Caps equal to the point count can never bind.
            cfg.max_points_per_cell = pts.len().max(1);
            cfg.max_cells = pts.len().max(1);
            let points: Vec<Point> =
                pts.iter().map(|&(x, y, z)| Point::new(x, y, z, 0.5)).collect();
            let t = voxelize(&frame_of(points.clone()), &cfg, seed).unwrap();

            let mut expected: HashMap<(usize, usize), usize> = HashMap::new();
            for p in &points {
                if p.x >= -12.8 && p.x < 12.8 && p.y >= -12.8 && p.y < 12.8
                    && p.z >= -3.0 && p.z < 3.0 {
                    let ix = ((p.x + 12.8) / 0.32).floor() as usize;
                    let iy = ((p.y + 12.8) / 0.32).floor() as usize;
                    *expected.entry((ix, iy)).or_default() += 1;
                }
            }
            let in_range: usize = expected.values().sum();
            prop_assert_eq!(t.total_points(), in_range);
            prop_assert_eq!(t.num_cells(), expected.len());
            for (c, &n) in t.coords.iter().zip(&t.point_counts) {
                prop_assert_eq!(expected.get(&(c.x, c.y)).copied(), Some(n));
            }
            for ci in 0..t.num_cells() {
                for row in t.point_counts[ci]..t.max_points {
                    prop_assert!(t.point_features(ci, row).iter().all(|&v| v == 0.0));
                }
            }
        }

        #[test]
        fn capped_output_respects_caps_and_is_deterministic(
            pts in prop::collection::vec(
                (-2.0f64..2.0, -2.0f64..2.0, -1.0f64..1.0), 0..400),
            seed in any::<u64>(),
        ) {
            let mut cfg = desk_pillar_config();
            cfg.max_points_per_cell = 3;
            cfg.max_cells = 10;
            let frame = frame_of(
                pts.iter().map(|&(x, y, z)| Point::new(x, y, z, 0.5)).collect());
            let a = voxelize(&frame, &cfg, seed).unwrap();
            let b = voxelize(&frame, &cfg, seed).unwrap();
            prop_assert_eq!(a.to_bytes(), b.to_bytes());
            prop_assert!(a.num_cells() <= 10);
            prop_assert!(a.point_counts.iter().all(|&n| (1..=3).contains(&n)));
            let mut seen = std::collections::HashSet::new();
            for c in &a.coords {
                prop_assert!(seen.insert((c.x, c.y, c.z)));
                prop_assert!(c.x < 80 && c.y < 80);
            }
        }
    }
}
