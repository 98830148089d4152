//! The prover-verifier game: masks, losses, training and certificates.

mod config;
mod engine;
mod losses;
mod mask;

pub use config::{spec_hash, Arch, GameConfig};
pub use engine::{
    write_certificates, write_log_csv, CertificateRecord, Decision, Decisions, EpochStats, Game, LogRow, LOG_HEADER,
};
pub use losses::{argmax, arthur_loss, arthur_loss_var, merlin_loss, morgana_safe_loss, posterior};
pub use mask::{apply_mask, topk_indices, topk_mask, Granularity, MaskSelection, UnitLayout};
