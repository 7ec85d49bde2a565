//! Map-regression training: teacher-forced sequences, mean-squared map
//! loss, gradient clipping, Adam, and the in-memory checkpoint record.
//!
//! Every supervised example covers `obs_len + pred_len` consecutive steps.
//! The model sees the first `obs_len + pred_len - 1` maps as input (so 19
//! with the 8/12 default split) with every pedestrian drawn at their
//! ground-truth position, and the loss compares the last `pred_len`
//! outputs against target-only maps one step ahead. Outputs produced
//! while the network is still warming up over the observation window are
//! left unsupervised.
//!
//! Training runs in `f32` on a single thread; with a fixed seed the loss
//! log and final parameters are bit-reproducible.

use crate::convlstm::{stack_backward, stack_forward_traced, StackLayout, StackParams};
use crate::prob_map::{encode_frame, EncodeOptions, GridSpec, ProbMap};
use crate::tensor::{adam_step, AdamParams, AdamState, Scalar, Tensor};
use crate::trajectory::{PedestrianId, PredictionSample, Scene};
use crate::{Error, Result, WorldPoint};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fraction of the trajectory bounding box added on each side when a
/// scene's grid is fitted.
pub const DEFAULT_MARGIN_FRAC: f64 = 0.05;

/// Everything a training run needs to know. Grid cells and sigmas are in
/// meters; `hidden_channels` is ordered input side first.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    pub sigma_target: f64,
    pub sigma_other: f64,
    pub obs_len: usize,
    pub pred_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub integrate_neighbors: bool,
    pub clip_norm: f64,
    pub hidden_channels: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            grid_width: 100,
            grid_height: 100,
            sigma_target: 0.1,
            sigma_other: 0.3,
            obs_len: 8,
            pred_len: 12,
            lr: 1e-3,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            integrate_neighbors: true,
            clip_norm: 5.0,
            hidden_channels: alloc::vec![128, 64, 64, 32, 32],
            kernel_size: 3,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is deliberately legal: it freezes the parameters, which
    /// the tests use as a determinism probe.
    pub fn validate(&self) -> Result<()> {
        let positive = self.grid_width > 0
            && self.grid_height > 0
            && self.obs_len > 0
            && self.pred_len > 0
            && self.batch_size > 0;
        if !positive {
            return Err(Error::Config {
                message: format!("lengths must be positive: {self:?}"),
            });
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config {
                message: format!("learning rate out of range: {}", self.lr),
            });
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config {
                message: format!("clip norm out of range: {}", self.clip_norm),
            });
        }
        if !(self.sigma_target > 0.0 && self.sigma_target.is_finite())
            || !(self.sigma_other > 0.0 && self.sigma_other.is_finite())
        {
            return Err(Error::Config {
                message: "sigmas must be positive and finite".into(),
            });
        }
        self.layout().validate()
    }

    pub fn encode_options(&self) -> EncodeOptions {
        EncodeOptions {
            sigma_target: self.sigma_target,
            sigma_other: self.sigma_other,
            integrate_neighbors: self.integrate_neighbors,
        }
    }

    pub fn layout(&self) -> StackLayout {
        StackLayout {
            input_channels: 1,
            hidden_channels: self.hidden_channels.clone(),
            kernel_size: self.kernel_size,
            height: self.grid_height,
            width: self.grid_width,
        }
    }

    /// Number of maps fed to the model per sample.
    pub fn input_steps(&self) -> usize {
        self.obs_len + self.pred_len - 1
    }
}

/// Mean over cells of the squared difference between two maps on the
/// same grid. The training objective sums this over the target steps.
pub fn l2_loss<T: Scalar>(pred: &ProbMap<T>, truth: &ProbMap<T>) -> Result<T> {
    pred.check_same_spec(truth, "l2_loss")?;
    let n = T::from(pred.spec().num_cells()).unwrap();
    let mut acc = T::zero();
    for (&p, &t) in pred.tensor().data().iter().zip(truth.tensor().data()) {
        let d = p - t;
        acc = acc + d * d;
    }
    Ok(acc / n)
}

/// Gradient of `l2_loss` with respect to the prediction: `2 (p - t) / N`.
pub fn l2_loss_grad<T: Scalar>(pred: &ProbMap<T>, truth: &ProbMap<T>) -> Result<Tensor<T>> {
    pred.check_same_spec(truth, "l2_loss_grad")?;
    let scale = T::from(2.0 / pred.spec().num_cells() as f64).unwrap();
    let mut g = pred.tensor().clone();
    for (gv, &tv) in g.data_mut().iter_mut().zip(truth.tensor().data()) {
        *gv = (*gv - tv) * scale;
    }
    Ok(g)
}

/// The teacher-forced input sequence and the target maps for one sample.
///
/// Inputs cover window steps `0 .. obs+pred-1` and show every pedestrian
/// at their recorded position (or only the target when integration is
/// off). Target map `m` shows only the target at window step
/// `obs_len + m`, always with `sigma_target`, regardless of the
/// integration switch.
pub fn make_training_pair<T: Scalar>(
    sample: &PredictionSample,
    cfg: &TrainConfig,
    spec: &GridSpec,
) -> Result<(Vec<ProbMap<T>>, Vec<ProbMap<T>>)> {
    if sample.obs_len() != cfg.obs_len || sample.pred_len() != cfg.pred_len {
        return Err(Error::Argument {
            context: "make_training_pair",
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
    let inputs = (0..cfg.input_steps())
        .map(|t| {
            let frame = frame_positions(sample, t, cfg.obs_len);
            encode_frame(&frame, sample.target_id, spec, &opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let target_opts = EncodeOptions {
        integrate_neighbors: false,
        ..opts
    };
    let targets = (0..cfg.pred_len)
        .map(|m| {
            let p = sample.future[m];
            encode_frame(&[(sample.target_id, p)], sample.target_id, spec, &target_opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((inputs, targets))
}

/// Positions of everyone recorded at window step `t` (target first).
fn frame_positions(
    sample: &PredictionSample,
    t: usize,
    obs_len: usize,
) -> Vec<(PedestrianId, WorldPoint)> {
    let mut out = Vec::new();
    if t < obs_len {
        out.push((sample.target_id, sample.observed[t]));
        for nb in &sample.neighbors_observed {
            if let Some(p) = nb.steps[t] {
                out.push((nb.id, p));
            }
        }
    } else {
        out.push((sample.target_id, sample.future[t - obs_len]));
        for nb in &sample.neighbors_future {
            if let Some(p) = nb.steps[t - obs_len] {
                out.push((nb.id, p));
            }
        }
    }
    out
}

/// Samples from one scene, all sharing that scene's fitted grid.
#[derive(Debug, Clone)]
pub struct SceneSamples {
    pub name: String,
    pub spec: GridSpec,
    pub samples: Vec<PredictionSample>,
}

/// Fits a grid to the scene and windows it into samples. Scenes too
/// short to yield a single sample come back with an empty sample list.
pub fn prepare_scene(
    scene: &Scene,
    cfg: &TrainConfig,
    margin_frac: f64,
    window_stride: usize,
) -> Result<SceneSamples> {
    let points: Vec<WorldPoint> = scene
        .trajectories()
        .iter()
        .flat_map(|t| t.positions.iter().copied())
        .collect();
    let spec = crate::prob_map::fit_grid(&points, cfg.grid_width, cfg.grid_height, margin_frac)?;
    let samples =
        crate::trajectory::build_samples(scene, cfg.obs_len, cfg.pred_len, window_stride)?;
    Ok(SceneSamples {
        name: scene.name.clone(),
        spec,
        samples,
    })
}

/// Recoverable position of a `ChaCha8Rng`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// In-memory training snapshot: everything needed to run inference or
/// serialize a restartable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub params: StackParams<f32>,
    /// One optimizer state per parameter tensor, in canonical order.
    pub adam: Vec<AdamState<f32>>,
    pub epoch: usize,
    pub rng: RngState,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Result of a training run: the final snapshot plus one mean loss per
/// epoch (mean over samples of the per-sample objective).
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub loss_log: Vec<f64>,
}

/// Trains a fresh model on the given scenes.
///
/// Batches never mix scenes (each scene has its own grid). Every epoch
/// reshuffles sample order within scenes and the order of batches across
/// scenes, both driven by the seeded generator, so runs are reproducible
/// bit for bit.
pub fn train(scenes: &[SceneSamples], cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let total: usize = scenes.iter().map(|s| s.samples.len()).sum();
    if total == 0 {
        return Err(Error::Argument {
            context: "train",
            message: "no training samples".into(),
        });
    }
    for scene in scenes {
        if (scene.spec.width(), scene.spec.height()) != (cfg.grid_width, cfg.grid_height) {
            return Err(Error::Shape {
                context: "train scene grid",
                expected: alloc::vec![cfg.grid_width, cfg.grid_height],
                got: alloc::vec![scene.spec.width(), scene.spec.height()],
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = StackParams::<f32>::init(&cfg.layout(), &mut rng)?;
    let mut adam: Vec<AdamState<f32>> = params
        .tensors()
        .iter()
        .map(|(_, t)| AdamState::new(t.shape()))
        .collect();
    let hp = AdamParams::<f32>::with_lr(cfg.lr as f32);

    let mut loss_log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // (scene index, sample indices) per batch, order shuffled across
        // the whole epoch.
        let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
        for (si, scene) in scenes.iter().enumerate() {
            let mut order: Vec<usize> = (0..scene.samples.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                batches.push((si, chunk.to_vec()));
            }
        }
        batches.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        for (bi, (si, members)) in batches.iter().enumerate() {
            let scene = &scenes[*si];
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0f64;
            for &mi in members {
                let (inputs, targets) =
                    make_training_pair::<f32>(&scene.samples[mi], cfg, &scene.spec)?;
                let (preds, tape) = stack_forward_traced(&inputs, &params)?;
                let mut out_grads = Vec::with_capacity(preds.len());
                let mut sample_loss = 0.0f64;
                for (k, pred) in preds.iter().enumerate() {
                    if k + 1 >= cfg.obs_len {
                        let target = &targets[k + 1 - cfg.obs_len];
                        sample_loss += l2_loss(pred, target)? as f64;
                        out_grads.push(l2_loss_grad(pred, target)?);
                    } else {
                        out_grads.push(Tensor::zeros(pred.tensor().shape()));
                    }
                }
                if !sample_loss.is_finite() {
                    return Err(Error::Numeric {
                        context: format!(
                            "training loss became non-finite at epoch {epoch}, batch {bi} \
                             (scene {}, parameter norm {:.3e})",
                            scene.name,
                            params.global_norm()
                        ),
                    });
                }
                batch_loss += sample_loss;
                grads.accumulate(&stack_backward(&params, &tape, &out_grads)?)?;
            }
            epoch_loss += batch_loss;

            grads.scale_all(1.0 / members.len() as f32);
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(Error::Numeric {
                    context: format!(
                        "gradient norm became non-finite at epoch {epoch}, batch {bi} \
                         (parameter norm {:.3e})",
                        params.global_norm()
                    ),
                });
            }
            if norm > cfg.clip_norm {
                grads.scale_all((cfg.clip_norm / norm) as f32);
            }
            let grad_list = grads.tensors();
            for (((label, param), state), (_, grad)) in params
                .tensors_mut()
                .into_iter()
                .zip(adam.iter_mut())
                .zip(grad_list)
            {
                adam_step(&label, param, grad, state, &hp)?;
            }
        }
        loss_log.push(epoch_loss / total as f64);
    }

    Ok(TrainRun {
        checkpoint: Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            params,
            adam,
            epoch: cfg.epochs,
            rng: RngState::capture(&rng),
        },
        loss_log,
    })
}
