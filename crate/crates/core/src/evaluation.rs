//! Displacement metrics, autoregressive rollout, the best-of-k sampling
//! protocol, the linear baseline, and the ablation harnesses.
//!
//! Rollout mirrors inference as trained: the model is warmed up on the
//! observation window with ground-truth maps, then runs on its own
//! predictions. Every pedestrian in the sample gets its own recurrent
//! stream over shared weights; after each step all streams' decoded
//! positions are re-encoded into everyone's next input, so predicted
//! pedestrians keep influencing each other. A frozen-neighbor mode
//! (neighbors pinned at their last observed position) exists for
//! comparison.

use crate::convlstm::{StackParams, StackRun};
use crate::prob_map::{
    argmax_decode, encode_frame, sample_coordinate, EncodeOptions, GridSpec, ProbMap,
};
use crate::tensor::Scalar;
use crate::training::{SceneSamples, TrainConfig, DEFAULT_MARGIN_FRAC};
use crate::trajectory::{PedestrianId, PredictionSample, Scene};
use crate::{Error, Result, WorldPoint};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Average displacement error: mean Euclidean distance over every
/// pedestrian and step.
pub fn ade(pred: &[Vec<WorldPoint>], truth: &[Vec<WorldPoint>]) -> Result<f64> {
    check_paired(pred, truth, "ade")?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.iter().zip(t) {
            total += a.distance(b);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Final displacement error: mean Euclidean distance at the last step.
pub fn fde(pred: &[Vec<WorldPoint>], truth: &[Vec<WorldPoint>]) -> Result<f64> {
    check_paired(pred, truth, "fde")?;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        total += p.last().unwrap().distance(t.last().unwrap());
    }
    Ok(total / pred.len() as f64)
}

fn check_paired(
    pred: &[Vec<WorldPoint>],
    truth: &[Vec<WorldPoint>],
    context: &'static str,
) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Shape {
            context,
            expected: alloc::vec![truth.len().max(1)],
            got: alloc::vec![pred.len()],
        });
    }
    for (p, t) in pred.iter().zip(truth) {
        if p.is_empty() || p.len() != t.len() {
            return Err(Error::Shape {
                context,
                expected: alloc::vec![t.len().max(1)],
                got: alloc::vec![p.len()],
            });
        }
    }
    Ok(())
}

/// How a predicted map becomes a position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Draw a cell proportionally to its value, then jitter inside it.
    Sample,
    /// Deterministic: center of the highest-valued cell.
    Argmax,
}

/// How neighbor pedestrians evolve during the prediction window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborMode {
    /// Every pedestrian is predicted and re-encoded each step.
    Joint,
    /// Neighbors stay at their last observed position; only the target
    /// moves.
    Frozen,
}

/// Predicted world trajectories from one rollout.
#[derive(Debug, Clone)]
pub struct RolloutOutcome<T: Scalar> {
    /// `pred_len` decoded positions for the sample's target.
    pub target: Vec<WorldPoint>,
    /// Decoded positions for each co-predicted neighbor (empty in frozen
    /// mode or with integration off).
    pub neighbors: Vec<(PedestrianId, Vec<WorldPoint>)>,
    /// The target stream's predicted map at each step, kept for export.
    pub target_maps: Vec<ProbMap<T>>,
    /// Decode failures that fell back to the previous position.
    pub fallbacks: usize,
}

struct PedStream<'p, T: Scalar> {
    id: PedestrianId,
    run: StackRun<'p, T>,
    /// Last decoded (or observed) position; `None` until first seen.
    last_pos: Option<WorldPoint>,
    /// Model output from the most recent step.
    last_map: Option<ProbMap<T>>,
}

/// Runs the model over one sample: ground-truth warm-up on the observed
/// window, then `pred_len` autoregressive steps.
pub fn rollout<T: Scalar>(
    params: &StackParams<T>,
    sample: &PredictionSample,
    spec: &GridSpec,
    cfg: &TrainConfig,
    decode: DecodeMode,
    neighbors: NeighborMode,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutOutcome<T>> {
    let layout = params.layout();
    if (layout.width, layout.height) != (spec.width(), spec.height()) {
        return Err(Error::Shape {
            context: "rollout grid",
            expected: alloc::vec![layout.width, layout.height],
            got: alloc::vec![spec.width(), spec.height()],
        });
    }
    if sample.obs_len() != cfg.obs_len || sample.pred_len() != cfg.pred_len {
        return Err(Error::Argument {
            context: "rollout",
            message: format!(
                "sample window {}+{} does not match config {}+{}",
                sample.obs_len(),
                sample.pred_len(),
                cfg.obs_len,
                cfg.pred_len
            ),
        });
    }
    let opts = cfg.encode_options();

    // Streams in a fixed order: target first, then neighbors ascending by
    // id (they arrive sorted). The order pins RNG consumption, so sampled
    // rollouts are reproducible.
    let co_predict = neighbors == NeighborMode::Joint && cfg.integrate_neighbors;
    let mut streams: Vec<PedStream<T>> = Vec::new();
    streams.push(PedStream {
        id: sample.target_id,
        run: StackRun::new(params),
        last_pos: None,
        last_map: None,
    });
    if co_predict {
        for nb in &sample.neighbors_observed {
            streams.push(PedStream {
                id: nb.id,
                run: StackRun::new(params),
                last_pos: None,
                last_map: None,
            });
        }
    }

    // Warm-up: feed each stream the observed frames, marking the stream's
    // own pedestrian as the target. Frames encode pedestrians actually
    // present (as in training); only the stream's own pedestrian persists
    // at its previous position when it drops out mid-observation, since
    // its map cannot be encoded without it.
    for t in 0..cfg.obs_len {
        let mut present: Vec<(PedestrianId, WorldPoint)> =
            alloc::vec![(sample.target_id, sample.observed[t])];
        for nb in &sample.neighbors_observed {
            if let Some(p) = nb.steps[t] {
                present.push((nb.id, p));
            }
        }
        for stream in &mut streams {
            let here = present.iter().find(|(id, _)| *id == stream.id).map(|&(_, p)| p);
            if let Some(p) = here {
                stream.last_pos = Some(p);
            }
            let Some(own_pos) = stream.last_pos else {
                continue; // not seen yet; the stream starts later
            };
            let mut frame = present.clone();
            if here.is_none() {
                frame.push((stream.id, own_pos));
            }
            let map = encode_frame::<T>(&frame, stream.id, spec, &opts)?;
            stream.last_map = Some(stream.run.step(&map)?);
        }
    }

    // In frozen mode the neighbors hold their final observed position for
    // the entire prediction window.
    let frozen: Vec<(PedestrianId, WorldPoint)> = if co_predict {
        Vec::new()
    } else if cfg.integrate_neighbors {
        sample
            .neighbors_observed
            .iter()
            .filter_map(|nb| {
                nb.steps
                    .iter()
                    .rev()
                    .find_map(|s| *s)
                    .map(|p| (nb.id, p))
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut fallbacks = 0usize;
    let mut target_maps: Vec<ProbMap<T>> = Vec::with_capacity(cfg.pred_len);
    let mut tracks: Vec<Vec<WorldPoint>> = alloc::vec![Vec::with_capacity(cfg.pred_len); streams.len()];
    for m in 0..cfg.pred_len {
        // Decode everyone before re-encoding anyone, in stream order.
        for (si, stream) in streams.iter_mut().enumerate() {
            let map = stream
                .last_map
                .as_ref()
                .expect("every stream has stepped at least once by the end of warm-up");
            if si == 0 {
                target_maps.push(map.clone());
            }
            let decoded = match decode {
                DecodeMode::Argmax => Ok(argmax_decode(map)),
                DecodeMode::Sample => sample_coordinate(map, rng),
            };
            let pos = match decoded {
                Ok(p) => p,
                Err(Error::Decode { .. }) => {
                    fallbacks += 1;
                    stream.last_pos.expect("started stream has a position")
                }
                Err(other) => return Err(other),
            };
            stream.last_pos = Some(pos);
            tracks[si].push(pos);
        }
        if m + 1 == cfg.pred_len {
            break;
        }
        let mut frame: Vec<(PedestrianId, WorldPoint)> = streams
            .iter()
            .map(|s| (s.id, s.last_pos.unwrap()))
            .collect();
        frame.extend(frozen.iter().copied());
        for stream in &mut streams {
            let map = encode_frame::<T>(&frame, stream.id, spec, &opts)?;
            stream.last_map = Some(stream.run.step(&map)?);
        }
    }

    let mut tracks = tracks.into_iter();
    let target = tracks.next().expect("target stream always exists");
    let neighbors = streams.iter().skip(1).map(|s| s.id).zip(tracks).collect();
    Ok(RolloutOutcome {
        target,
        neighbors,
        target_maps,
        fallbacks,
    })
}

/// Per-sample evaluation result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleScore {
    pub ade: f64,
    pub fde: f64,
    pub fallbacks: usize,
}

/// Draws `k` sampled rollouts and keeps the best: minimum ADE and minimum
/// FDE are taken independently over the draws (the usual best-of-k
/// reading). Draws consume the generator sequentially, so scores for a
/// prefix of k are unaffected by raising k.
pub fn best_of_k<T: Scalar>(
    params: &StackParams<T>,
    sample: &PredictionSample,
    spec: &GridSpec,
    cfg: &TrainConfig,
    neighbors: NeighborMode,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampleScore> {
    if k == 0 {
        return Err(Error::Argument {
            context: "best_of_k",
            message: "k must be at least 1".into(),
        });
    }
    let truth = core::slice::from_ref(&sample.future);
    let mut best = SampleScore {
        ade: f64::INFINITY,
        fde: f64::INFINITY,
        fallbacks: 0,
    };
    for _ in 0..k {
        let out = rollout(params, sample, spec, cfg, DecodeMode::Sample, neighbors, rng)?;
        let pred = core::slice::from_ref(&out.target);
        best.ade = best.ade.min(ade(pred, truth)?);
        best.fde = best.fde.min(fde(pred, truth)?);
        best.fallbacks += out.fallbacks;
    }
    Ok(best)
}

/// One evaluated dataset (or baseline) row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub dataset: String,
    pub ade: f64,
    pub fde: f64,
    /// Evaluated target pedestrians (one per sample window).
    pub num_pedestrians: usize,
    pub num_samples_k: usize,
    pub seed: u64,
}

/// Evaluates a model over every sample of a scene with the best-of-k
/// protocol. Each sample draws from its own RNG stream
/// (`set_stream(sample index)` on the shared seed), so results do not
/// depend on evaluation order.
pub fn evaluate_scene<T: Scalar>(
    params: &StackParams<T>,
    data: &SceneSamples,
    cfg: &TrainConfig,
    neighbors: NeighborMode,
    k: usize,
    seed: u64,
) -> Result<MetricReport> {
    if data.samples.is_empty() {
        return Err(Error::Argument {
            context: "evaluate_scene",
            message: format!("scene {} yielded no samples", data.name),
        });
    }
    let mut sum_ade = 0.0;
    let mut sum_fde = 0.0;
    for (i, sample) in data.samples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let score = best_of_k(params, sample, &data.spec, cfg, neighbors, k, &mut rng)?;
        sum_ade += score.ade;
        sum_fde += score.fde;
    }
    let n = data.samples.len() as f64;
    Ok(MetricReport {
        dataset: data.name.clone(),
        ade: sum_ade / n,
        fde: sum_fde / n,
        num_pedestrians: data.samples.len(),
        num_samples_k: k,
        seed,
    })
}

/// Evaluates a deterministic per-sample predictor (a baseline) the same
/// way a model is scored.
pub fn evaluate_baseline_scene<F>(
    name: &str,
    data: &SceneSamples,
    mut predict: F,
) -> Result<MetricReport>
where
    F: FnMut(&PredictionSample) -> Result<Vec<WorldPoint>>,
{
    if data.samples.is_empty() {
        return Err(Error::Argument {
            context: "evaluate_baseline_scene",
            message: format!("scene {} yielded no samples", data.name),
        });
    }
    let mut sum_ade = 0.0;
    let mut sum_fde = 0.0;
    for sample in &data.samples {
        let pred = predict(sample)?;
        if pred.len() != sample.pred_len() {
            return Err(Error::Shape {
                context: "evaluate_baseline_scene",
                expected: alloc::vec![sample.pred_len()],
                got: alloc::vec![pred.len()],
            });
        }
        let p = core::slice::from_ref(&pred);
        let t = core::slice::from_ref(&sample.future);
        sum_ade += ade(p, t)?;
        sum_fde += fde(p, t)?;
    }
    let n = data.samples.len() as f64;
    Ok(MetricReport {
        dataset: name.to_string(),
        ade: sum_ade / n,
        fde: sum_fde / n,
        num_pedestrians: data.samples.len(),
        num_samples_k: 1,
        seed: 0,
    })
}

/// Unweighted mean across per-scene rows, named `AVG`.
pub fn average_report(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Argument {
            context: "average_report",
            message: "no rows to average".into(),
        });
    }
    let n = reports.len() as f64;
    Ok(MetricReport {
        dataset: "AVG".to_string(),
        ade: reports.iter().map(|r| r.ade).sum::<f64>() / n,
        fde: reports.iter().map(|r| r.fde).sum::<f64>() / n,
        num_pedestrians: reports.iter().map(|r| r.num_pedestrians).sum(),
        num_samples_k: reports[0].num_samples_k,
        seed: reports[0].seed,
    })
}

/// Least-squares straight-line fit per axis over the observed steps,
/// extrapolated `pred_len` steps past the window. A single observed point
/// (no slope information) predicts standing still.
pub fn linear_baseline(observed: &[WorldPoint], pred_len: usize) -> Result<Vec<WorldPoint>> {
    if observed.is_empty() {
        return Err(Error::Argument {
            context: "linear_baseline",
            message: "no observed points".into(),
        });
    }
    if observed.len() == 1 {
        return Ok(alloc::vec![observed[0]; pred_len]);
    }
    let n = observed.len() as f64;
    let t_mean = (observed.len() - 1) as f64 / 2.0;
    let mut sxx = 0.0;
    let mut sxy_x = 0.0;
    let mut sxy_y = 0.0;
    let mut x_mean = 0.0;
    let mut y_mean = 0.0;
    for p in observed {
        x_mean += p.x;
        y_mean += p.y;
    }
    x_mean /= n;
    y_mean /= n;
    for (t, p) in observed.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxx += dt * dt;
        sxy_x += dt * (p.x - x_mean);
        sxy_y += dt * (p.y - y_mean);
    }
    let slope_x = sxy_x / sxx;
    let slope_y = sxy_y / sxx;
    Ok((0..pred_len)
        .map(|m| {
            let t = (observed.len() + m) as f64 - t_mean;
            WorldPoint::new(x_mean + slope_x * t, y_mean + slope_y * t)
        })
        .collect())
}

/// Predicts the last observed position for every future step.
pub fn stationary_baseline(observed: &[WorldPoint], pred_len: usize) -> Result<Vec<WorldPoint>> {
    match observed.last() {
        Some(&p) => Ok(alloc::vec![p; pred_len]),
        None => Err(Error::Argument {
            context: "stationary_baseline",
            message: "no observed points".into(),
        }),
    }
}

/// What an ablation run varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    /// Grid resolution sweep (the four paper sizes, or any list).
    MapSize,
    /// Neighbor integration on versus off.
    Integration,
}

/// One configuration to evaluate in a sweep.
pub struct AblationEntry<'a> {
    pub label: String,
    pub grid: (usize, usize),
    pub integrate_neighbors: bool,
    /// Trained weights for this configuration. In a map-size sweep all
    /// entries may omit the model to measure pure encode-decode
    /// quantization error instead.
    pub params: Option<&'a StackParams<f32>>,
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub grid_width: usize,
    pub grid_height: usize,
    pub cell_size: f64,
    pub integrate_neighbors: bool,
    pub ade: f64,
    pub fde: f64,
}

/// Evaluates each entry on one scene, refitting the grid per entry.
///
/// Integration sweeps need exactly two modeled entries (one per switch
/// position). Map-size sweeps take any number of entries but must be
/// uniformly modeled or uniformly model-free; the model-free form decodes
/// ground-truth maps through best-of-k sampling, isolating the error the
/// grid itself introduces.
pub fn ablation_sweep(
    kind: AblationKind,
    entries: &[AblationEntry],
    scene: &Scene,
    base: &TrainConfig,
    k: usize,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    match kind {
        AblationKind::Integration => {
            if entries.len() != 2
                || entries[0].integrate_neighbors == entries[1].integrate_neighbors
            {
                return Err(Error::Config {
                    message: "integration sweep needs exactly one entry per switch position"
                        .into(),
                });
            }
            if entries.iter().any(|e| e.params.is_none()) {
                return Err(Error::Config {
                    message: "integration sweep entries need trained checkpoints".into(),
                });
            }
        }
        AblationKind::MapSize => {
            if entries.is_empty() {
                return Err(Error::Config {
                    message: "map-size sweep needs at least one entry".into(),
                });
            }
            let modeled = entries.iter().filter(|e| e.params.is_some()).count();
            if modeled != 0 && modeled != entries.len() {
                return Err(Error::Config {
                    message: format!(
                        "map-size sweep mixes modeled and model-free entries \
                         ({modeled} of {})",
                        entries.len()
                    ),
                });
            }
        }
    }

    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let cfg = TrainConfig {
            grid_width: entry.grid.0,
            grid_height: entry.grid.1,
            integrate_neighbors: entry.integrate_neighbors,
            ..base.clone()
        };
        let data = crate::training::prepare_scene(scene, &cfg, DEFAULT_MARGIN_FRAC, 1)?;
        if data.samples.is_empty() {
            return Err(Error::Config {
                message: format!("scene {} yields no samples for sweep", scene.name),
            });
        }
        let (a, f) = match entry.params {
            Some(params) => {
                let report =
                    evaluate_scene(params, &data, &cfg, NeighborMode::Joint, k, seed)?;
                (report.ade, report.fde)
            }
            None => quantization_error(&data, &cfg, k, seed)?,
        };
        rows.push(AblationRow {
            label: entry.label.clone(),
            grid_width: entry.grid.0,
            grid_height: entry.grid.1,
            cell_size: data.spec.cell_size(),
            integrate_neighbors: entry.integrate_neighbors,
            ade: a,
            fde: f,
        });
    }
    Ok(rows)
}

/// Best-of-k sampled decode of ground-truth target maps: the error floor
/// a grid imposes before any model is involved.
fn quantization_error(
    data: &SceneSamples,
    cfg: &TrainConfig,
    k: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::Argument {
            context: "quantization_error",
            message: "k must be at least 1".into(),
        });
    }
    let opts = EncodeOptions {
        integrate_neighbors: false,
        ..cfg.encode_options()
    };
    let mut sum_ade = 0.0;
    let mut sum_fde = 0.0;
    for (i, sample) in data.samples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let maps: Vec<ProbMap<f64>> = sample
            .future
            .iter()
            .map(|&p| encode_frame(&[(sample.target_id, p)], sample.target_id, &data.spec, &opts))
            .collect::<Result<_>>()?;
        let truth = core::slice::from_ref(&sample.future);
        let mut best_ade = f64::INFINITY;
        let mut best_fde = f64::INFINITY;
        for _ in 0..k {
            let decoded: Vec<WorldPoint> = maps
                .iter()
                .map(|m| sample_coordinate(m, &mut rng))
                .collect::<Result<_>>()?;
            let pred = core::slice::from_ref(&decoded);
            best_ade = best_ade.min(ade(pred, truth)?);
            best_fde = best_fde.min(fde(pred, truth)?);
        }
        sum_ade += best_ade;
        sum_fde += best_fde;
    }
    let n = data.samples.len() as f64;
    Ok((sum_ade / n, sum_fde / n))
}
