//! Cross-attention layout guidance on plain tensors.
//!
//! The engine works in three phases over a reverse-diffusion schedule:
//!
//! 1. [`excite`]: excite every subject token while pushing subject attention
//!    maps apart (blocked excite loss, dilated overlap loss, conditional norm).
//! 2. [`layout`]: threshold the maps into masks, move the two worst-overlapping
//!    subjects to their least-overlapping downward position, and migrate the
//!    latent content with them.
//! 3. [`follow`]: pull every subject's attention inside its (moved) mask and
//!    make it fill the mask.
//!
//! [`guidance`] runs all three against the differentiable [`toy`] attention
//! model; [`exchange`] and [`manifest`] let external pipelines drive each phase
//! with their own attention and latent snapshots.

pub mod error;
pub mod exchange;
pub mod excite;
pub mod follow;
pub mod gradcheck;
pub mod guidance;
pub mod layout;
pub mod manifest;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use excite::{
    build_blocking_sequence, loss_ae, loss_be, loss_norm, loss_overlap, loss_phase1,
    sort_tokens_by_max, BlockingSequence, LossWeights, OverlapLoss, Phase1Loss,
};
pub use follow::{loss_fill, loss_inside, loss_phase3, MaskSet, Phase3Loss};
pub use guidance::{run_guidance, AblationFlags, GuidanceConfig, GuidanceTrace, PhaseSchedule};
pub use layout::{
    migrate_latent, plan_layout, search_shift, upscale_mask, GammaConfig, ImputationConfig,
    ImputationMode, LayoutPlan, Shift,
};
pub use tensor::{
    frobenius_inner, grayscale_dilate3x3, spatial_argmax, AttentionMaps, BinaryGrid, Grid,
    LatentGrid, SubjectSet,
};
pub use toy::ToyAttentionModel;
