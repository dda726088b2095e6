//! Cross-task feature fusion.
//!
//! The NDDR layer concatenates same-resolution features of `K` tasks along
//! channels, normalizes the result and gives every task its own 1×1
//! projection back to `C` channels. Cross-stitch and sluice layers are the
//! same computation with the projections tied to scalar multiples of
//! identity blocks; [`SluiceLayer::to_nddr`] builds that constrained layer
//! explicitly.

mod channels;
mod nddr;
mod shortcut;
mod stitch;

use serde::{Deserialize, Serialize};

pub use nddr::{
    diagonal_init, init_projections, projection_matrix, xavier_init, InitPolicy, NddrConfig,
    NddrLayer, NddrVars, NormPlacement,
};
pub use shortcut::shortcut_aggregate;
pub use stitch::{mix_features, CrossStitchLayer, SluiceLayer, DEFAULT_SUBSPACES};

/// Parameter overhead of NDDR layers at a list of fusion points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionParamCount {
    /// Projection weights of one task, `Σ (K·C)·C`.
    pub per_task_weights: usize,
    /// Projection biases of one task, `Σ C` (zero when biases are off).
    pub per_task_bias: usize,
    /// `per_task_weights + per_task_bias`.
    pub per_task: usize,
    /// `K × per_task`.
    pub total: usize,
    /// Normalization scale and shift, `Σ 2·K·C`, shared by all tasks.
    pub norm_affine: usize,
}

pub fn count_fusion_params(tasks: usize, channels: &[usize], bias: bool) -> FusionParamCount {
    let per_task_weights: usize = channels.iter().map(|&c| tasks * c * c).sum();
    let per_task_bias: usize = if bias { channels.iter().sum() } else { 0 };
    let per_task = per_task_weights + per_task_bias;
    FusionParamCount {
        per_task_weights,
        per_task_bias,
        per_task,
        total: tasks * per_task,
        norm_affine: channels.iter().map(|&c| 2 * tasks * c).sum(),
    }
}
