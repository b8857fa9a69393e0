//! Compression design-space sweep.
//!
//! The production frame code fixes a 4x4 block and 3 truncated bits. This
//! module generalizes the same scheme to a B x B block with t truncated
//! bits, at B^2 + 2 (8 - t) bits per block:
//!
//!   bits/pixel = 1 + 2 (8 - t) / B^2,
//!
//! so the production point costs 1 + 10/16 = 1.625 bits per pixel. A
//! sweep runs the full pipeline once per design point with stereo
//! matching reading through that code, and reports trajectory error
//! against bits per pixel. Tracking and detection always read the
//! uncompressed stream, matching the memory architecture where only the
//! stereo buffers hold compressed frames.

use crate::dataset::SequenceData;
use crate::error::VioError;
use crate::vfe::GrayImage;

use super::{run_sequence, CompressionMode, PipelineConfig};

/// One generalized code: block edge length and truncated bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct CodecParams {
    pub block: usize,
    pub truncate_bits: u32,
}

impl CodecParams {
    pub fn bits_per_block(&self) -> usize {
        self.block * self.block + 2 * (8 - self.truncate_bits as usize)
    }

    pub fn bits_per_pixel(&self) -> f64 {
        self.bits_per_block() as f64 / (self.block * self.block) as f64
    }
}

/// Encodes and immediately decodes one image through the generalized
/// code, returning the two-level-per-block reconstruction the matcher
/// would read. The production parameters (4, 3) reproduce the frame codec
/// bit for bit.
pub fn degrade_image(img: &GrayImage, p: &CodecParams) -> Result<GrayImage, VioError> {
    let (w, h) = (img.width(), img.height());
    if w % p.block != 0 || h % p.block != 0 {
        return Err(VioError::Config(format!(
            "image {w}x{h} not divisible into {0}x{0} blocks",
            p.block
        )));
    }
    if !(1..=7).contains(&p.truncate_bits) {
        return Err(VioError::Config(format!(
            "truncation of {} bits leaves no quantization levels",
            p.truncate_bits
        )));
    }
    let t = p.truncate_bits;
    let level_max = (1u32 << (8 - t)) - 1;
    let trunc = |x: usize, y: usize| {
        (img.at(x as isize, y as isize).round().clamp(0.0, 255.0) as u32) >> t
    };
    let mut data = vec![0f32; w * h];
    for by in (0..h).step_by(p.block) {
        for bx in (0..w).step_by(p.block) {
            let mut lo = u32::MAX;
            let mut hi = 0u32;
            for y in by..by + p.block {
                for x in bx..bx + p.block {
                    let v = trunc(x, y);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            let threshold = (lo + hi) / 2;
            let level1 = (2 * threshold).saturating_sub(lo).min(level_max);
            for y in by..by + p.block {
                for x in bx..bx + p.block {
                    let level = if trunc(x, y) > threshold { level1 } else { lo };
                    data[y * w + x] = (level << t) as f32;
                }
            }
        }
    }
    Ok(GrayImage::new(w, h, data))
}

/// Accuracy figures for one design point.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SweepPoint {
    pub block: usize,
    pub truncate_bits: u32,
    pub bits_per_pixel: f64,
    pub ate_rmse_m: f64,
    pub normalized_pct: f64,
}

/// Runs the pipeline once per design point and evaluates each trajectory
/// against the sequence ground truth.
pub fn sweep_compression(
    data: &SequenceData,
    base: &PipelineConfig,
    params: &[CodecParams],
) -> Result<Vec<SweepPoint>, VioError> {
    let mut out = Vec::with_capacity(params.len());
    for p in params {
        let cfg = PipelineConfig {
            compression: CompressionMode::Sweep {
                block: p.block,
                truncate_bits: p.truncate_bits,
            },
            ..base.clone()
        };
        let run = run_sequence(data, &cfg, None)?;
        let eval = run.report.eval.ok_or_else(|| {
            VioError::Config("compression sweep needs ground truth to evaluate against".into())
        })?;
        out.push(SweepPoint {
            block: p.block,
            truncate_bits: p.truncate_bits,
            bits_per_pixel: p.bits_per_pixel(),
            ate_rmse_m: eval.ate_rmse_yaw,
            normalized_pct: eval.normalized_pct,
        });
    }
    Ok(out)
}

/// CSV with one line per design point.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("block,truncate_bits,bits_per_pixel,ate_rmse_m,normalized_pct\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.block, p.truncate_bits, p.bits_per_pixel, p.ate_rmse_m, p.normalized_pct
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framecodec::{encode_frame, Frame};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn production_point_costs_26_bits_per_16_pixels() {
        let p = CodecParams {
            block: 4,
            truncate_bits: 3,
        };
        assert_eq!(p.bits_per_block(), 26);
        assert!((p.bits_per_pixel() - 1.625).abs() < 1e-15);
    }

    #[test]
    fn generalized_code_at_production_parameters_matches_the_frame_codec() {
        let (w, h) = (32, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pixels: Vec<u8> = (0..w * h).map(|_| rng.random()).collect();
        let frame = Frame::new(w, h, pixels.clone()).unwrap();
        let compressed = encode_frame(&frame);

        let img = GrayImage::from_frame(&frame);
        let degraded = degrade_image(
            &img,
            &CodecParams {
                block: 4,
                truncate_bits: 3,
            },
        )
        .unwrap();
        for y in 0..h {
            for x in 0..w {
                assert_eq!(
                    degraded.at(x as isize, y as isize) as u32,
                    compressed.decode_pixel(x, y) as u32,
                    "pixel ({x}, {y})"
                );
            }
        }
    }

    #[test]
    fn uniform_image_survives_any_code_exactly_up_to_truncation() {
        let img = GrayImage::new(16, 16, vec![200.0; 256]);
        for (block, t) in [(4, 1), (8, 2), (16, 4)] {
            let d = degrade_image(
                &img,
                &CodecParams {
                    block,
                    truncate_bits: t,
                },
            )
            .unwrap();
            let expected = ((200u32 >> t) << t) as f32;
            assert_eq!(d.at(5, 5), expected, "block {block} t {t}");
        }
    }

    #[test]
    fn coarser_blocks_lose_more_of_a_gradient() {
        let (w, h) = (48, 48);
        let mut data = vec![0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = (x * 4 + y) as f32;
            }
        }
        let img = GrayImage::new(w, h, data);
        let err = |block: usize| {
            let d = degrade_image(
                &img,
                &CodecParams {
                    block,
                    truncate_bits: 3,
                },
            )
            .unwrap();
            let mut sum = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    sum +=
                        f64::from((d.at(x as isize, y as isize) - img.at(x as isize, y as isize)).abs());
                }
            }
            sum / (w * h) as f64
        };
        let (e4, e16) = (err(4), err(16));
        assert!(
            e16 > e4 + 1.0,
            "16x16 blocks must lose more than 4x4: {e16} vs {e4}"
        );
    }

    #[test]
    fn misaligned_image_is_a_config_error() {
        let img = GrayImage::new(30, 16, vec![0.0; 480]);
        let r = degrade_image(
            &img,
            &CodecParams {
                block: 8,
                truncate_bits: 2,
            },
        );
        assert!(matches!(r, Err(VioError::Config(_))));
    }

    #[test]
    fn csv_lists_one_line_per_point() {
        let pts = vec![SweepPoint {
            block: 4,
            truncate_bits: 3,
            bits_per_pixel: 1.625,
            ate_rmse_m: 0.01,
            normalized_pct: 0.1,
        }];
        let csv = sweep_csv(&pts);
        assert_eq!(
            csv,
            "block,truncate_bits,bits_per_pixel,ate_rmse_m,normalized_pct\n4,3,1.625,0.01,0.1\n"
        );
    }
}
