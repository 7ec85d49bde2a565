//! Walking-dataset ingestion and window extraction.
//!
//! Input is the standard annotation layout: one observation per line,
//! `frame_id  pedestrian_id  x  y`, whitespace separated, world
//! coordinates in meters, frames annotated on a fixed stride (every 10th
//! raw frame in the common datasets, 0.4 s apart). The parser maps raw
//! frame ids onto a dense step grid so that step `t` and step `t+1` are
//! always one annotation interval apart, splits tracks at observation
//! gaps, and rejects anything ambiguous (duplicate observations, frames
//! off the stride) instead of guessing.

use crate::{Error, Result, WorldPoint};
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

pub type PedestrianId = i64;

/// One pedestrian's gapless track: `positions[i]` is at step
/// `start_step + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: PedestrianId,
    pub start_step: i64,
    pub positions: Vec<WorldPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Step index of the last point.
    pub fn end_step(&self) -> i64 {
        self.start_step + self.positions.len() as i64 - 1
    }

    /// Position at an absolute step index, if the track covers it.
    pub fn position_at_step(&self, step: i64) -> Option<WorldPoint> {
        let idx = step.checked_sub(self.start_step)?;
        if idx < 0 {
            return None;
        }
        self.positions.get(idx as usize).copied()
    }

    /// Time-ordered `(step, position)` pairs.
    pub fn points(&self) -> impl Iterator<Item = (i64, WorldPoint)> + '_ {
        self.positions
            .iter()
            .enumerate()
            .map(move |(i, &p)| (self.start_step + i as i64, p))
    }
}

/// A full recording: every trajectory of one dataset, on a shared step
/// grid. Trajectories are sorted by id and ids are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    trajectories: Vec<Trajectory>,
    frame_base: i64,
    frame_stride: i64,
}

impl Scene {
    /// Builds a scene from already-segmented trajectories; they are sorted
    /// by id here, and ids must be unique.
    pub fn new(
        name: &str,
        mut trajectories: Vec<Trajectory>,
        frame_base: i64,
        frame_stride: i64,
    ) -> Result<Self> {
        if frame_stride < 1 {
            return Err(Error::Argument {
                context: "Scene::new",
                message: format!("frame stride must be positive, got {frame_stride}"),
            });
        }
        if trajectories.is_empty() {
            return Err(Error::Argument {
                context: "Scene::new",
                message: "a scene needs at least one trajectory".into(),
            });
        }
        trajectories.sort_by_key(|t| t.id);
        for pair in trajectories.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::Argument {
                    context: "Scene::new",
                    message: format!("duplicate pedestrian id {}", pair[0].id),
                });
            }
        }
        for t in &trajectories {
            if t.positions.is_empty() {
                return Err(Error::Argument {
                    context: "Scene::new",
                    message: format!("pedestrian {} has no positions", t.id),
                });
            }
            if t.positions.iter().any(|p| !p.is_finite()) {
                return Err(Error::Argument {
                    context: "Scene::new",
                    message: format!("pedestrian {} has non-finite positions", t.id),
                });
            }
        }
        Ok(Self {
            name: name.to_string(),
            trajectories,
            frame_base,
            frame_stride,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// Raw frame id corresponding to step 0.
    pub fn frame_base(&self) -> i64 {
        self.frame_base
    }

    /// Raw frames per step (annotation stride of the source file).
    pub fn frame_stride(&self) -> i64 {
        self.frame_stride
    }

    pub fn step_of_frame(&self, frame: i64) -> Option<i64> {
        let rel = frame - self.frame_base;
        (rel % self.frame_stride == 0).then(|| rel / self.frame_stride)
    }

    pub fn num_points(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Axis-aligned bounding box over every observation.
    pub fn bounds(&self) -> (WorldPoint, WorldPoint) {
        let mut lo = WorldPoint::new(f64::INFINITY, f64::INFINITY);
        let mut hi = WorldPoint::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for tr in &self.trajectories {
            for p in &tr.positions {
                lo.x = lo.x.min(p.x);
                lo.y = lo.y.min(p.y);
                hi.x = hi.x.max(p.x);
                hi.y = hi.y.max(p.y);
            }
        }
        (lo, hi)
    }

    /// All pedestrians present at `step`, sorted by id.
    pub fn positions_at_step(&self, step: i64) -> Vec<(PedestrianId, WorldPoint)> {
        self.trajectories
            .iter()
            .filter_map(|tr| tr.position_at_step(step).map(|p| (tr.id, p)))
            .collect()
    }
}

/// Parses an annotation file into a scene.
///
/// Lines are `frame ped x y`; blank lines and lines starting with `#` are
/// skipped. Frame and pedestrian ids may be written as integral floats
/// (`840.0`), matching common exports. Fails on malformed lines (with the
/// 1-based line number), duplicate `(frame, ped)` observations, and frames
/// that do not sit on the detected annotation stride.
pub fn parse_dataset(name: &str, text: &str) -> Result<Scene> {
    let mut rows: Vec<(i64, PedestrianId, WorldPoint)> = Vec::new();
    let mut seen: BTreeMap<(i64, PedestrianId), usize> = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields (frame ped x y), got {}", fields.len()),
            });
        }
        let frame = parse_integral(fields[0], "frame id", line_no)?;
        let ped = parse_integral(fields[1], "pedestrian id", line_no)?;
        let x = parse_coord(fields[2], "x", line_no)?;
        let y = parse_coord(fields[3], "y", line_no)?;
        if let Some(first) = seen.insert((frame, ped), line_no) {
            return Err(Error::Data {
                message: format!(
                    "duplicate observation for pedestrian {ped} at frame {frame} \
                     (lines {first} and {line_no})"
                ),
            });
        }
        rows.push((frame, ped, WorldPoint::new(x, y)));
    }
    if rows.is_empty() {
        return Err(Error::Data {
            message: format!("dataset '{name}' contains no observations"),
        });
    }

    let mut by_ped: BTreeMap<PedestrianId, Vec<(i64, WorldPoint)>> = BTreeMap::new();
    for (frame, ped, pos) in rows {
        by_ped.entry(ped).or_default().push((frame, pos));
    }
    for track in by_ped.values_mut() {
        track.sort_by_key(|&(frame, _)| frame);
    }

    let frame_base = by_ped
        .values()
        .flat_map(|t| t.iter().map(|&(f, _)| f))
        .min()
        .expect("rows nonempty");
    let frame_stride = detect_stride(&by_ped);
    for track in by_ped.values() {
        for &(frame, _) in track {
            if (frame - frame_base) % frame_stride != 0 {
                return Err(Error::Data {
                    message: format!(
                        "frame {frame} is off the annotation stride \
                         ({frame_stride} frames, base {frame_base})"
                    ),
                });
            }
        }
    }

    // Cut tracks where consecutive observations are more than one stride
    // apart. The first segment keeps the pedestrian's id; further segments
    // get fresh ids above every id in the file so ids stay unique.
    let mut next_synthetic = by_ped.keys().max().copied().unwrap_or(0) + 1;
    let mut trajectories = Vec::new();
    for (&ped, track) in &by_ped {
        let mut segment_start = 0usize;
        let mut segments: Vec<&[(i64, WorldPoint)]> = Vec::new();
        for i in 1..track.len() {
            if track[i].0 - track[i - 1].0 != frame_stride {
                segments.push(&track[segment_start..i]);
                segment_start = i;
            }
        }
        segments.push(&track[segment_start..]);
        for (seg_idx, seg) in segments.iter().enumerate() {
            let id = if seg_idx == 0 {
                ped
            } else {
                let id = next_synthetic;
                next_synthetic += 1;
                id
            };
            trajectories.push(Trajectory {
                id,
                start_step: (seg[0].0 - frame_base) / frame_stride,
                positions: seg.iter().map(|&(_, p)| p).collect(),
            });
        }
    }
    Scene::new(name, trajectories, frame_base, frame_stride)
}

/// Most common gap between consecutive same-pedestrian frames; ties go to
/// the smaller gap. Falls back to 1 when no pedestrian has two points.
fn detect_stride(by_ped: &BTreeMap<PedestrianId, Vec<(i64, WorldPoint)>>) -> i64 {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for track in by_ped.values() {
        for pair in track.windows(2) {
            let gap = pair[1].0 - pair[0].0;
            if gap > 0 {
                *counts.entry(gap).or_insert(0) += 1;
            }
        }
    }
    counts
        .into_iter()
        .max_by_key(|&(gap, count)| (count, core::cmp::Reverse(gap)))
        .map(|(gap, _)| gap)
        .unwrap_or(1)
}

fn parse_integral(field: &str, what: &str, line: usize) -> Result<i64> {
    let value: f64 = field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("{what} '{field}' is not a number"),
    })?;
    if !value.is_finite() || value.fract() != 0.0 || value.abs() > 2f64.powi(53) {
        return Err(Error::Parse {
            line,
            message: format!("{what} '{field}' is not an integer"),
        });
    }
    Ok(value as i64)
}

fn parse_coord(field: &str, what: &str, line: usize) -> Result<f64> {
    let value: f64 = field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("{what} coordinate '{field}' is not a number"),
    })?;
    if !value.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("{what} coordinate '{field}' is not finite"),
        });
    }
    Ok(value)
}

/// Serializes a scene back to the annotation layout, rows sorted by
/// `(frame, pedestrian)`, every field printed with 6 decimal places.
/// `parse_dataset(scene_to_tsv(s))` reproduces `s` exactly.
pub fn scene_to_tsv(scene: &Scene) -> String {
    let mut rows: Vec<(i64, PedestrianId, WorldPoint)> = Vec::with_capacity(scene.num_points());
    for tr in scene.trajectories() {
        for (step, pos) in tr.points() {
            rows.push((scene.frame_base + step * scene.frame_stride, tr.id, pos));
        }
    }
    rows.sort_by_key(|&(frame, id, _)| (frame, id));
    let mut out = String::with_capacity(rows.len() * 48);
    for (frame, id, pos) in rows {
        let _ = writeln!(
            out,
            "{:.6}\t{:.6}\t{:.6}\t{:.6}",
            frame as f64, id as f64, pos.x, pos.y
        );
    }
    out
}

/// A neighbor's presence over one window: `steps[i]` is its position at
/// the window's i-th step, `None` where it is not observed.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTrack {
    pub id: PedestrianId,
    pub steps: Vec<Option<WorldPoint>>,
}

impl NeighborTrack {
    pub fn present_anywhere(&self) -> bool {
        self.steps.iter().any(Option::is_some)
    }
}

/// One supervised example: a target pedestrian observed for `obs_len`
/// steps and to be predicted for `pred_len` more, plus every other
/// pedestrian co-present in either part of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSample {
    pub target_id: PedestrianId,
    /// Absolute step of `observed[0]` in the source scene.
    pub start_step: i64,
    pub observed: Vec<WorldPoint>,
    pub future: Vec<WorldPoint>,
    /// Neighbors with at least one observation in the observed window,
    /// sorted by id; `steps` has length `obs_len`.
    pub neighbors_observed: Vec<NeighborTrack>,
    /// Neighbors with at least one observation in the future window,
    /// sorted by id; `steps` has length `pred_len`.
    pub neighbors_future: Vec<NeighborTrack>,
}

impl PredictionSample {
    pub fn obs_len(&self) -> usize {
        self.observed.len()
    }

    pub fn pred_len(&self) -> usize {
        self.future.len()
    }

    /// Mirror the whole sample about `center` along the chosen axes
    /// (training-time flip augmentation; the grid is fit to the scene, so
    /// mirroring about the grid center keeps points in bounds).
    pub fn mirrored(&self, flip_x: bool, flip_y: bool, center: WorldPoint) -> Self {
        let flip = |p: WorldPoint| {
            WorldPoint::new(
                if flip_x { 2.0 * center.x - p.x } else { p.x },
                if flip_y { 2.0 * center.y - p.y } else { p.y },
            )
        };
        let flip_track = |t: &NeighborTrack| NeighborTrack {
            id: t.id,
            steps: t.steps.iter().map(|s| s.map(flip)).collect(),
        };
        Self {
            target_id: self.target_id,
            start_step: self.start_step,
            observed: self.observed.iter().copied().map(flip).collect(),
            future: self.future.iter().copied().map(flip).collect(),
            neighbors_observed: self.neighbors_observed.iter().map(flip_track).collect(),
            neighbors_future: self.neighbors_future.iter().map(flip_track).collect(),
        }
    }
}

/// Slides a window of `obs_len + pred_len` steps along every trajectory,
/// advancing `window_stride` steps between starts. Only pedestrians whose
/// own track fully covers the window become targets; every sample lists
/// all co-present others as neighbors.
pub fn build_samples(
    scene: &Scene,
    obs_len: usize,
    pred_len: usize,
    window_stride: usize,
) -> Result<Vec<PredictionSample>> {
    if obs_len == 0 || pred_len == 0 || window_stride == 0 {
        return Err(Error::Argument {
            context: "build_samples",
            message: format!(
                "window lengths and stride must be positive \
                 (obs {obs_len}, pred {pred_len}, stride {window_stride})"
            ),
        });
    }
    let total = obs_len + pred_len;
    let mut samples = Vec::new();
    for target in scene.trajectories() {
        if target.len() < total {
            continue;
        }
        let mut s = 0usize;
        while s + total <= target.len() {
            let w0 = target.start_step + s as i64;
            let observed = target.positions[s..s + obs_len].to_vec();
            let future = target.positions[s + obs_len..s + total].to_vec();
            let mut neighbors_observed = Vec::new();
            let mut neighbors_future = Vec::new();
            for other in scene.trajectories() {
                if other.id == target.id {
                    continue;
                }
                let obs_track = NeighborTrack {
                    id: other.id,
                    steps: (0..obs_len)
                        .map(|i| other.position_at_step(w0 + i as i64))
                        .collect(),
                };
                if obs_track.present_anywhere() {
                    neighbors_observed.push(obs_track);
                }
                let fut_track = NeighborTrack {
                    id: other.id,
                    steps: (0..pred_len)
                        .map(|i| other.position_at_step(w0 + (obs_len + i) as i64))
                        .collect(),
                };
                if fut_track.present_anywhere() {
                    neighbors_future.push(fut_track);
                }
            }
            samples.push(PredictionSample {
                target_id: target.id,
                start_step: w0,
                observed,
                future,
                neighbors_observed,
                neighbors_future,
            });
            s += window_stride;
        }
    }
    Ok(samples)
}

/// Splits scenes for the leave-one-out protocol: the named scene becomes
/// the test set, all others the training set. Name matching is
/// case-insensitive; an unknown name is a configuration error.
pub fn leave_one_out<'a>(scenes: &'a [Scene], held_out: &str) -> Result<(Vec<&'a Scene>, &'a Scene)> {
    let mut test = None;
    let mut train = Vec::new();
    for scene in scenes {
        if scene.name.eq_ignore_ascii_case(held_out) {
            if test.is_some() {
                return Err(Error::Config {
                    message: format!("scene name '{held_out}' is ambiguous"),
                });
            }
            test = Some(scene);
        } else {
            train.push(scene);
        }
    }
    match test {
        Some(t) => Ok((train, t)),
        None => {
            let known: Vec<&str> = scenes.iter().map(|s| s.name.as_str()).collect();
            Err(Error::Config {
                message: format!("unknown scene '{held_out}'; have {known:?}"),
            })
        }
    }
}
