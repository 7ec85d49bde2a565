//! Finite-difference refereeing of the backward pass, exposed as a
//! command so a build can be validated on any machine.
//!
//! The check builds a small random stack in 64-bit precision, computes
//! analytic parameter gradients of a summed squared-error loss, then
//! probes every coordinate with central differences and reports the
//! worst relative error per tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socprob_core::convlstm::{
    stack_backward, stack_forward, stack_forward_traced, StackLayout, StackParams,
};
use socprob_core::prob_map::{GridSpec, ProbMap};
use socprob_core::tensor::{finite_diff_grad, max_relative_error, Tensor};
use socprob_core::WorldPoint;

use crate::error::Result;

/// Largest acceptable relative error between analytic and numeric
/// gradients at 64-bit precision.
pub const THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Worst relative error per parameter tensor, in canonical order.
    pub rows: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let mut t = Tensor::<f64>::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-scale..scale);
    }
    t
}

/// Runs the check: `tiny` is the single-layer witness configuration,
/// otherwise a two-layer stack exercises the inter-layer paths.
pub fn run(tiny: bool, seed: u64) -> Result<GradcheckReport> {
    let (layout, steps) = if tiny {
        (
            StackLayout {
                input_channels: 1,
                hidden_channels: vec![2],
                kernel_size: 3,
                height: 6,
                width: 6,
            },
            3,
        )
    } else {
        (
            StackLayout {
                input_channels: 1,
                hidden_channels: vec![3, 2],
                kernel_size: 3,
                height: 8,
                width: 8,
            },
            4,
        )
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = StackParams::<f64>::init(&layout, &mut rng)?;
    let spec = GridSpec::new(layout.width, layout.height, WorldPoint::new(0.0, 0.0), 1.0)?;

    let inputs: Vec<ProbMap<f64>> = (0..steps)
        .map(|_| {
            let mut t = Tensor::<f64>::zeros(&[1, layout.height, layout.width]);
            for v in t.data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            ProbMap::from_tensor(&spec, t)
        })
        .collect::<socprob_core::Result<_>>()?;
    let targets: Vec<Tensor<f64>> = (0..steps)
        .map(|_| {
            let mut t = rand_tensor(&[1, layout.height, layout.width], &mut rng, 0.5);
            for v in t.data_mut() {
                *v += 0.5; // targets in (0, 1), like encoded maps
            }
            t
        })
        .collect();

    // L = sum over steps and cells of (pred - target)^2.
    let loss = |preds: &[ProbMap<f64>]| -> f64 {
        preds
            .iter()
            .zip(&targets)
            .map(|(p, t)| {
                p.tensor()
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    };

    let (preds, tape) = stack_forward_traced(&inputs, &params)?;
    let out_grads: Vec<Tensor<f64>> = preds
        .iter()
        .zip(&targets)
        .map(|(p, t)| {
            let mut g = p.tensor().clone();
            for (gv, &tv) in g.data_mut().iter_mut().zip(t.data()) {
                *gv = 2.0 * (*gv - tv);
            }
            g
        })
        .collect();
    let analytic = stack_backward(&params, &tape, &out_grads)?;

    let mut rows = Vec::with_capacity(params.tensor_count());
    let mut worst = 0.0f64;
    for idx in 0..params.tensor_count() {
        let base = params.tensors()[idx].1.clone();
        let f = |probe: &Tensor<f64>| -> socprob_core::Result<f64> {
            let mut trial = params.clone();
            *trial.tensors_mut()[idx].1 = probe.clone();
            Ok(loss(&stack_forward(&inputs, &trial)?))
        };
        let numeric = finite_diff_grad(f, &base, 1e-5)?;
        let (label, analytic_t) = {
            let list = analytic.tensors();
            (list[idx].0.clone(), list[idx].1.clone())
        };
        // Floor 1e-4: coordinates much smaller than typical gradient
        // entries (O(0.1..10) here) are compared absolutely, so the
        // divided-difference rounding noise of ~1e-10 cannot register
        // as a large relative error on a near-zero coordinate.
        let err = max_relative_error(&analytic_t, &numeric, 1e-4)?;
        if err > worst {
            worst = err;
        }
        rows.push((label, err));
    }
    Ok(GradcheckReport {
        rows,
        max_rel_err: worst,
        threshold: THRESHOLD,
    })
}
