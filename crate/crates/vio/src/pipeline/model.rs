//! Arithmetic memory and operation-count model.
//!
//! Every number here comes from the configured geometry, not from a
//! profiler: frame-buffer bits follow from image dimensions and the code
//! size per block, track storage from the two-stage layout, Hessian
//! storage from the band envelope, and factorization work from the dense
//! multiply-accumulate formulas next to a measured zero-skipping run on a
//! seeded system with the same block pattern and value structure as a
//! smoother Hessian.
//!
//! Dense references: a left-looking Cholesky of an n x n matrix performs
//! n (n^2 - 1) / 6 MACs and the two triangular solves n (n - 1). The
//! structured solver tallies its skipped and performed MACs itself.

use nalgebra::SMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::hessian::{dense_cholesky_macs, dense_substitute_macs, StructuredHessian};
use crate::backend::pattern::build_pattern;
use crate::backend::track_store::{flat_bits, two_stage_bits};
use crate::error::VioError;
use crate::geometry::STATE_DOF;

use super::{CompressionMode, PipelineConfig};

/// Memory and operation counts for one configuration, with the dense
/// baseline next to each optimized figure.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MemoryReport {
    /// Raw frame buffer, 8 bits per pixel.
    pub frame_raw_bytes: usize,
    /// Compressed frame buffer at the configured code size.
    pub frame_compressed_bytes: usize,
    /// Raw over compressed frame bits.
    pub frame_ratio: f64,
    /// Track storage as one flat location-indexed array, bits.
    pub track_flat_bits: usize,
    /// Track storage split into address stage and payload stage, bits.
    pub track_two_stage_bits: usize,
    /// Flat over two-stage bits.
    pub track_ratio: f64,
    /// Upper-triangle elements of a dense Hessian at window dimension.
    pub hessian_dense_elems: usize,
    /// Elements inside the band storage envelope.
    pub hessian_envelope_elems: usize,
    /// Dense over envelope element counts.
    pub hessian_ratio: f64,
    /// MACs a dense factorize-and-solve performs at window dimension.
    pub solver_dense_macs: u64,
    /// MACs the structured zero-skipping solver performed on the seeded
    /// system.
    pub solver_performed_macs: u64,
    /// MACs the structured solver skipped on zero operands.
    pub solver_skipped_macs: u64,
    /// Dense over performed MACs.
    pub solver_ratio: f64,
}

/// Bits one encoded block occupies for a compression mode, with the
/// production code at 26 bits per 4x4 block.
fn bits_per_block(mode: &CompressionMode) -> Option<(usize, usize)> {
    match mode {
        CompressionMode::Off => None,
        CompressionMode::On => Some((4, 26)),
        CompressionMode::Sweep {
            block,
            truncate_bits,
        } => Some((*block, block * block + 2 * (8 - *truncate_bits as usize))),
    }
}

/// Builds a seeded positive-definite system on the window's block pattern
/// with the value structure of a smoother Hessian: dense diagonal and
/// adjacent blocks where inertial factors land, pose-only 6x6 content
/// elsewhere in the band.
fn seeded_system(n: usize, age: usize, seed: u64) -> Result<StructuredHessian, VioError> {
    let pattern = build_pattern(n, age.min(n))?;
    let mut h = StructuredHessian::new(pattern.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        for j in i..n {
            if !pattern.in_pattern(i, j) {
                continue;
            }
            let mut m = SMatrix::<f64, STATE_DOF, STATE_DOF>::zeros();
            let dense = j <= i + 1;
            let rows = if dense { STATE_DOF } else { 6 };
            for r in 0..rows {
                for c in 0..rows {
                    m[(r, c)] = rng.random_range(-1.0..1.0);
                }
            }
            if i == j {
                m = (m + m.transpose()) * 0.5;
            }
            h.accumulate_block(i, j, &m)?;
        }
    }
    // Diagonal dominance makes the system positive definite without
    // disturbing the off-diagonal zero structure.
    let dim = h.dim();
    for bi in 0..n {
        let mut d = SMatrix::<f64, STATE_DOF, STATE_DOF>::zeros();
        for r in 0..STATE_DOF {
            let row = bi * STATE_DOF + r;
            let mut sum = 1.0;
            for c in pattern.band_start_row(row)..=pattern.band_end(row).min(dim - 1) {
                if c != row {
                    sum += h.get(row, c).abs();
                }
            }
            d[(r, r)] = sum;
        }
        h.accumulate_block(bi, bi, &d)?;
    }
    Ok(h)
}

/// Computes the full memory and operation model for one configuration and
/// frame geometry.
pub fn model_report(
    cfg: &PipelineConfig,
    width: usize,
    height: usize,
) -> Result<MemoryReport, VioError> {
    let raw_bits = width * height * 8;
    let compressed_bits = match bits_per_block(&cfg.compression) {
        Some((block, bits)) => {
            if !width.is_multiple_of(block) || !height.is_multiple_of(block) {
                return Err(VioError::Config(format!(
                    "frame {width}x{height} not divisible into {block}x{block} blocks"
                )));
            }
            (width / block) * (height / block) * bits
        }
        None => raw_bits,
    };

    let flat = flat_bits(cfg.horizon, cfg.vfe.max_features, cfg.feature_age);
    let two_stage = two_stage_bits(
        cfg.horizon,
        cfg.vfe.max_features,
        cfg.feature_age,
        cfg.max_tracks,
    );

    let pattern = build_pattern(cfg.horizon, cfg.feature_age.min(cfg.horizon))?;
    let dense_elems = pattern.dense_upper_elements();
    let envelope_elems = pattern.envelope_elements();

    let dim = (cfg.horizon * STATE_DOF) as u64;
    let dense_macs = dense_cholesky_macs(dim) + dense_substitute_macs(dim);
    let mut system = seeded_system(cfg.horizon, cfg.feature_age, cfg.seed)?;
    let (_, ops) = system.solve()?;

    Ok(MemoryReport {
        frame_raw_bytes: raw_bits / 8,
        frame_compressed_bytes: compressed_bits.div_ceil(8),
        frame_ratio: raw_bits as f64 / compressed_bits as f64,
        track_flat_bits: flat,
        track_two_stage_bits: two_stage,
        track_ratio: flat as f64 / two_stage as f64,
        hessian_dense_elems: dense_elems,
        hessian_envelope_elems: envelope_elems,
        hessian_ratio: dense_elems as f64 / envelope_elems as f64,
        solver_dense_macs: dense_macs,
        solver_performed_macs: ops.performed,
        solver_skipped_macs: ops.skipped,
        solver_ratio: dense_macs as f64 / ops.performed as f64,
    })
}
