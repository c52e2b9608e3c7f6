//! Birds-eye-view rasterization of detections, map layers and future ego
//! positions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    point_in_oriented_rect, point_in_polygon, rect_corners, world_to_ego, Pose2D,
};
use crate::scene::{Detection, DetectionFrame, MapLayers, Polygon, Scene};

pub const N_CHANNELS: usize = 8;
pub const N_MAP_CHANNELS: usize = 3;
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = [
    "ped_crossing",
    "walkway",
    "carpark_area",
    "det_m2.0",
    "det_m1.5",
    "det_m1.0",
    "det_m0.5",
    "det_0.0",
];
/// Offsets of the detection channels relative to `t0` (seconds).
pub const HISTORY_OFFSETS: [f64; 5] = [-2.0, -1.5, -1.0, -0.5, 0.0];
pub const HISTORY: f64 = 2.0;
pub const FRAME_TOLERANCE: f64 = 1e-3;
pub const HORIZON_STEPS: usize = 15;
pub const HORIZON_DT: f64 = 0.25;
pub const HORIZON: f64 = HORIZON_STEPS as f64 * HORIZON_DT;

const INDEX_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cell: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub x_min: f64,
    pub y_min: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            cell: 0.3,
            n_rows: 256,
            n_cols: 256,
            x_min: -16.8,
            y_min: -38.4,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0 && self.cell.is_finite()) {
            return Err(Error::config("grid.cell", "must be positive"));
        }
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::config("grid", "needs at least one row and column"));
        }
        if !(self.x_min.is_finite() && self.y_min.is_finite()) {
            return Err(Error::config("grid", "origin must be finite"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.n_rows as f64 * self.cell
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.n_cols as f64 * self.cell
    }

    /// Ego-frame x of the center of row `r`. Centers are placed symmetrically
    /// around the middle of the extent so mirroring is exact in floating point.
    pub fn row_center(&self, r: usize) -> f64 {
        let mid = self.x_min + 0.5 * self.n_rows as f64 * self.cell;
        mid + (r as f64 + 0.5 - 0.5 * self.n_rows as f64) * self.cell
    }

    pub fn col_center(&self, c: usize) -> f64 {
        let mid = self.y_min + 0.5 * self.n_cols as f64 * self.cell;
        mid + (c as f64 + 0.5 - 0.5 * self.n_cols as f64) * self.cell
    }

    pub fn cell_center(&self, r: usize, c: usize) -> [f64; 2] {
        [self.row_center(r), self.col_center(c)]
    }

    /// Flat index `row * n_cols + col`.
    pub fn flat(&self, r: usize, c: usize) -> usize {
        r * self.n_cols + c
    }

    /// Row/column index range whose centers may fall inside `[lo, hi]` along
    /// each axis, clipped to the grid. `None` when disjoint.
    fn cell_window(&self, lo: [f64; 2], hi: [f64; 2]) -> Option<([usize; 2], [usize; 2])> {
        let span = |lo: f64, hi: f64, min: f64, n: usize| -> Option<(usize, usize)> {
            let a = ((lo - min) / self.cell - 0.5).floor().max(0.0);
            let b = ((hi - min) / self.cell - 0.5).ceil().min(n as f64 - 1.0);
            if !(a <= b) {
                return None;
            }
            Some((a as usize, b as usize))
        };
        let (r0, r1) = span(lo[0], hi[0], self.x_min, self.n_rows)?;
        let (c0, c1) = span(lo[1], hi[1], self.y_min, self.n_cols)?;
        Some(([r0, c0], [r1, c1]))
    }
}

/// Grid cell containing the ego-frame point, if any.
pub fn cell_of(point: &Pose2D, spec: &GridSpec) -> Option<(usize, usize)> {
    if !(point.x.is_finite() && point.y.is_finite()) {
        return None;
    }
    let r = ((point.x - spec.x_min) / spec.cell + INDEX_EPS).floor();
    let c = ((point.y - spec.y_min) / spec.cell + INDEX_EPS).floor();
    if r < 0.0 || c < 0.0 || r >= spec.n_rows as f64 || c >= spec.n_cols as f64 {
        return None;
    }
    Some((r as usize, c as usize))
}

/// Binary occupancy grid of one channel, row-major.
pub type Channel = Vec<u8>;

/// The 8-channel binary planner input: map layers then detection history.
#[derive(Debug, Clone, PartialEq)]
pub struct BevInput {
    pub spec: GridSpec,
    /// `[channel][row][col]`, each entry 0 or 1.
    pub data: Vec<u8>,
    pub frame: Pose2D,
}

impl BevInput {
    pub fn zeros(spec: GridSpec, frame: Pose2D) -> Self {
        Self {
            spec,
            data: vec![0; N_CHANNELS * spec.n_cells()],
            frame,
        }
    }

    pub fn channel(&self, k: usize) -> &[u8] {
        let n = self.spec.n_cells();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [u8] {
        let n = self.spec.n_cells();
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, r: usize, c: usize) -> u8 {
        self.channel(k)[self.spec.flat(r, c)]
    }

    pub fn count_ones(&self, k: usize) -> usize {
        self.channel(k).iter().map(|&v| v as usize).sum()
    }

    /// Writes channel `k` as a plain PGM (P2, maxval 1).
    pub fn write_pgm(&self, k: usize, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = pgm_p2(self.channel(k), self.spec.n_rows, self.spec.n_cols, 1);
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Dumps all channels as `raster_<scene>_<t0>_<channel>.pgm` into `dir`.
    pub fn dump_pgm(&self, dir: impl AsRef<Path>, scene_id: &str, t0: f64) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        (0..N_CHANNELS)
            .map(|k| {
                let path = dir.join(format!(
                    "raster_{scene_id}_{t0:.2}_{}.pgm",
                    CHANNEL_NAMES[k]
                ));
                self.write_pgm(k, &path)?;
                Ok(path)
            })
            .collect()
    }
}

/// Plain-text PGM of a row-major grid. Row 0 is written first.
pub fn pgm_p2(values: &[u8], rows: usize, cols: usize, maxval: u8) -> String {
    let mut s = String::with_capacity(values.len() * 2 + 32);
    let _ = writeln!(s, "P2\n{cols} {rows}\n{maxval}");
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| v.to_string())
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Marks every cell whose center lies inside an oriented box footprint given
/// in the ego frame.
pub fn fill_box(channel: &mut [u8], spec: &GridSpec, center: &Pose2D, length: f64, width: f64) {
    let corners = rect_corners(center, length, width);
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in corners {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let Some(([r0, c0], [r1, c1])) = spec.cell_window(lo, hi) else {
        return;
    };
    for r in r0..=r1 {
        for c in c0..=c1 {
            if point_in_oriented_rect(spec.cell_center(r, c), center, length, width) {
                channel[spec.flat(r, c)] = 1;
            }
        }
    }
}

/// Marks every cell whose center lies inside the (ego-frame) polygon.
pub fn fill_polygon(channel: &mut [u8], spec: &GridSpec, poly: &[[f64; 2]]) {
    if poly.len() < 3 {
        return;
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in poly {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let Some(([r0, c0], [r1, c1])) = spec.cell_window(lo, hi) else {
        return;
    };
    for r in r0..=r1 {
        for c in c0..=c1 {
            if point_in_polygon(spec.cell_center(r, c), poly) {
                channel[spec.flat(r, c)] = 1;
            }
        }
    }
}

fn polygon_to_ego(poly: &Polygon, frame: &Pose2D) -> Polygon {
    poly.iter()
        .map(|p| frame.inverse_transform_point(*p))
        .collect()
}

/// Fills the three map channels of `input`.
pub fn rasterize_map(input: &mut BevInput, map: &MapLayers) {
    let spec = input.spec;
    let frame = input.frame;
    for (k, layer) in map.layers().iter().enumerate() {
        let ch = input.channel_mut(k);
        for poly in layer.iter() {
            fill_polygon(ch, &spec, &polygon_to_ego(poly, &frame));
        }
    }
}

/// Occupancy of world-frame boxes in detection channel `slot` (0 = t0 − 2 s).
pub fn rasterize_boxes<'a>(
    input: &mut BevInput,
    slot: usize,
    boxes: impl IntoIterator<Item = &'a Detection>,
) {
    let spec = input.spec;
    let frame = input.frame;
    let ch = input.channel_mut(N_MAP_CHANNELS + slot);
    for b in boxes {
        let local = world_to_ego(&b.center, &frame);
        fill_box(ch, &spec, &local, b.length, b.width);
    }
}

/// Checks that `frames` are exactly the five history frames ending at `t0`.
pub fn check_history(frames: &[DetectionFrame], t0: f64) -> Result<()> {
    let expected = || {
        HISTORY_OFFSETS
            .iter()
            .map(|o| format!("{:.1}", t0 + o))
            .collect::<Vec<_>>()
            .join(", ")
    };
    if frames.len() != HISTORY_OFFSETS.len() {
        return Err(Error::Input(format!(
            "expected {} detection frames at t0 offsets [-2.0, -1.5, -1.0, -0.5, 0.0] (timestamps {}), got {}",
            HISTORY_OFFSETS.len(),
            expected(),
            frames.len()
        )));
    }
    for (f, off) in frames.iter().zip(HISTORY_OFFSETS) {
        if (f.timestamp - (t0 + off)).abs() > FRAME_TOLERANCE {
            return Err(Error::Input(format!(
                "detection frame at {} does not match expected offsets [-2.0, -1.5, -1.0, -0.5, 0.0] from t0 = {t0} (timestamps {})",
                f.timestamp,
                expected()
            )));
        }
    }
    Ok(())
}

/// Builds the planner input from five detection frames (oldest first), the
/// map, and the ego pose at `t0`. Scores are ignored.
pub fn rasterize_input(
    frames: &[DetectionFrame],
    map: &MapLayers,
    ego_t0: &Pose2D,
    t0: f64,
    spec: &GridSpec,
) -> Result<BevInput> {
    check_history(frames, t0)?;
    let mut input = BevInput::zeros(*spec, *ego_t0);
    rasterize_map(&mut input, map);
    for (slot, f) in frames.iter().enumerate() {
        rasterize_boxes(&mut input, slot, &f.boxes);
    }
    Ok(input)
}

/// Future positions of the prediction subject on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTrack {
    /// `None` where the pose leaves the grid.
    pub cells: Vec<Option<(usize, usize)>>,
    pub times: Vec<f64>,
    /// Continuous ego-frame positions, kept for distance metrics.
    pub positions: Vec<[f64; 2]>,
}

impl TargetTrack {
    pub fn in_grid(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

pub fn horizon_times(t0: f64) -> Vec<f64> {
    (1..=HORIZON_STEPS)
        .map(|i| t0 + HORIZON_DT * i as f64)
        .collect()
}

/// Target track from world poses at the horizon times, expressed relative to
/// `frame`.
pub fn target_from_poses(
    poses: &[Pose2D],
    times: Vec<f64>,
    frame: &Pose2D,
    spec: &GridSpec,
) -> TargetTrack {
    let local: Vec<Pose2D> = poses.iter().map(|p| world_to_ego(p, frame)).collect();
    TargetTrack {
        cells: local.iter().map(|p| cell_of(p, spec)).collect(),
        positions: local.iter().map(|p| [p.x, p.y]).collect(),
        times,
    }
}

/// Discretized future ego trajectory for the chunk ending at `t0`.
pub fn rasterize_target(scene: &Scene, t0: f64, spec: &GridSpec) -> Result<TargetTrack> {
    let start = scene.start_time();
    let end = scene.duration();
    if t0 - HISTORY < start - 1e-6 || t0 + HORIZON > end + 1e-6 {
        return Err(Error::Range {
            what: "chunk time t0".into(),
            value: t0,
            lo: start + HISTORY,
            hi: end - HORIZON,
        });
    }
    let frame = scene.interpolate_ego(t0)?;
    let times = horizon_times(t0);
    let poses = times
        .iter()
        .map(|&t| scene.interpolate_ego(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(target_from_poses(&poses, times, &frame, spec))
}
