//! Rendering maps, metrics, and trajectories to portable text formats.
//!
//! Everything here is deterministic string assembly: floats print with
//! Rust's shortest-round-trip formatting, so a seeded rerun reproduces
//! each artifact byte for byte.

use socprob_core::evaluation::{AblationRow, MetricReport, RolloutOutcome};
use socprob_core::prob_map::ProbMap;
use socprob_core::tensor::Scalar;
use socprob_core::trajectory::PredictionSample;

/// Renders a map as a plain-text PGM (P2) image, maxval 65535.
///
/// Grid row 0 sits at the world origin (lowest y) while PGM scans top to
/// bottom, so rows are emitted in reverse: north is up in the image.
pub fn pgm_string<T: Scalar>(map: &ProbMap<T>) -> String {
    let spec = map.spec();
    let (w, h) = (spec.width(), spec.height());
    let mut out = String::with_capacity(h * w * 6 + 32);
    out.push_str("P2\n");
    out.push_str(&format!("{w} {h}\n65535\n"));
    for row in (0..h).rev() {
        for col in 0..w {
            if col > 0 {
                out.push(' ');
            }
            let v = map.value(row, col).to_f64().unwrap_or(0.0);
            let level = (v.clamp(0.0, 1.0) * 65535.0).round() as u32;
            out.push_str(&level.to_string());
        }
        out.push('\n');
    }
    out
}

/// Renders a map as CSV: H rows of W comma-separated reals, in the same
/// top-down orientation as [`pgm_string`].
pub fn heatmap_csv<T: Scalar>(map: &ProbMap<T>) -> String {
    let spec = map.spec();
    let (w, h) = (spec.width(), spec.height());
    let mut out = String::new();
    for row in (0..h).rev() {
        for col in 0..w {
            if col > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", map.value(row, col).to_f64().unwrap_or(0.0)));
        }
        out.push('\n');
    }
    out
}

/// Metric rows: `scene,ade,fde,k,seed`.
pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("scene,ade,fde,k,seed\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.dataset, r.ade, r.fde, r.num_samples_k, r.seed
        ));
    }
    out
}

/// Sweep rows with the varied configuration columns prepended:
/// `label,grid_width,grid_height,cell_size,integration,ade,fde,k,seed`.
pub fn ablation_csv(rows: &[AblationRow], k: usize, seed: u64) -> String {
    let mut out = String::from("label,grid_width,grid_height,cell_size,integration,ade,fde,k,seed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{k},{seed}\n",
            r.label,
            r.grid_width,
            r.grid_height,
            r.cell_size,
            r.integrate_neighbors,
            r.ade,
            r.fde
        ));
    }
    out
}

/// Per-epoch training losses: `epoch,mean_loss`, epochs counted from 1.
pub fn loss_log_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, loss) in losses.iter().enumerate() {
        out.push_str(&format!("{},{loss}\n", i + 1));
    }
    out
}

/// Trajectory overlay rows: `ped_id,step,kind,x,y`.
///
/// Observed rows cover the target and every neighbor observation; `gt`
/// rows cover the prediction window where ground truth exists; `pred`
/// rows come from the rollout (target plus any co-predicted neighbors).
pub fn overlay_csv<T: Scalar>(
    sample: &PredictionSample,
    outcome: Option<&RolloutOutcome<T>>,
) -> String {
    let mut out = String::from("ped_id,step,kind,x,y\n");
    let obs_len = sample.obs_len();
    let mut push = |id: i64, step: usize, kind: &str, x: f64, y: f64| {
        out.push_str(&format!("{id},{step},{kind},{x},{y}\n"));
    };

    for (t, p) in sample.observed.iter().enumerate() {
        push(sample.target_id, t, "obs", p.x, p.y);
    }
    for nb in &sample.neighbors_observed {
        for (t, p) in nb.steps.iter().enumerate() {
            if let Some(p) = p {
                push(nb.id, t, "obs", p.x, p.y);
            }
        }
    }
    for (m, p) in sample.future.iter().enumerate() {
        push(sample.target_id, obs_len + m, "gt", p.x, p.y);
    }
    for nb in &sample.neighbors_future {
        for (m, p) in nb.steps.iter().enumerate() {
            if let Some(p) = p {
                push(nb.id, obs_len + m, "gt", p.x, p.y);
            }
        }
    }
    if let Some(outcome) = outcome {
        for (m, p) in outcome.target.iter().enumerate() {
            push(sample.target_id, obs_len + m, "pred", p.x, p.y);
        }
        for (id, track) in &outcome.neighbors {
            for (m, p) in track.iter().enumerate() {
                push(*id, obs_len + m, "pred", p.x, p.y);
            }
        }
    }
    out
}
