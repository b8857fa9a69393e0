//! Block-truncation frame compression at 26 bits per 4x4 block.
//!
//! Each 8-bit pixel is first truncated to its 5 most significant bits. A 4x4
//! block then stores:
//!
//! * a 16-bit bitmap, one bit per pixel, row-major within the block;
//! * a 5-bit threshold `floor((min + max) / 2)` of the truncated values;
//! * the 5-bit truncated minimum.
//!
//! A pixel's bit is 1 iff its truncated value exceeds the threshold. Decoding
//! maps bit 0 to `min` and bit 1 to `min(2 * threshold - min, 31)`, then scales
//! back by 8. At 26 bits per 16 pixels the stream is 128/26 ~= 4.92x smaller
//! than the raw 8-bit frame.
//!
//! The serialized format is a little-endian `u16` width and height followed by
//! the blocks row-major, bit-packed MSB-first with no per-block padding:
//! bitmap (16 bits), threshold (5), minimum (5).

use crate::error::VioError;

pub const BLOCK_DIM: usize = 4;
pub const BITS_PER_BLOCK: usize = 26;
pub const MAX_WIDTH: usize = 752;
pub const MAX_HEIGHT: usize = 480;

/// 8-bit grayscale frame with row-major pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, VioError> {
        if width > MAX_WIDTH || height > MAX_HEIGHT {
            return Err(VioError::FrameTooLarge {
                width,
                height,
                max_width: MAX_WIDTH,
                max_height: MAX_HEIGHT,
            });
        }
        if !width.is_multiple_of(BLOCK_DIM) || !height.is_multiple_of(BLOCK_DIM) || width == 0 || height == 0 {
            return Err(VioError::BlockAlignment { width, height });
        }
        assert_eq!(pixels.len(), width * height);
        Ok(Frame {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// One encoded 4x4 block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block26 {
    /// Bit 15 is pixel (0,0), descending row-major to bit 0 at (3,3).
    pub bitmap: u16,
    /// 5-bit threshold of truncated values.
    pub threshold: u8,
    /// 5-bit truncated block minimum.
    pub min: u8,
}

impl Block26 {
    /// Reconstructs the truncated 5-bit value for a bit.
    fn level(&self, bit: bool) -> u8 {
        if bit {
            (2 * self.threshold as u16 - self.min as u16).min(31) as u8
        } else {
            self.min
        }
    }
}

/// Compressed frame: block grid plus dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedFrame {
    width: usize,
    height: usize,
    blocks: Vec<Block26>,
}

impl CompressedFrame {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn blocks(&self) -> &[Block26] {
        &self.blocks
    }

    pub fn blocks_x(&self) -> usize {
        self.width / BLOCK_DIM
    }

    pub fn blocks_y(&self) -> usize {
        self.height / BLOCK_DIM
    }

    /// Serialized payload size in bytes, excluding the 4-byte header.
    pub fn payload_bytes(&self) -> usize {
        (self.blocks.len() * BITS_PER_BLOCK).div_ceil(8)
    }

    /// Decodes a single pixel without expanding the frame.
    pub fn decode_pixel(&self, x: usize, y: usize) -> u8 {
        let block = &self.blocks[(y / BLOCK_DIM) * self.blocks_x() + x / BLOCK_DIM];
        let idx = (y % BLOCK_DIM) * BLOCK_DIM + x % BLOCK_DIM;
        let bit = block.bitmap >> (15 - idx) & 1 == 1;
        block.level(bit) << 3
    }
}

/// Encodes a frame block by block.
pub fn encode_frame(frame: &Frame) -> CompressedFrame {
    let bx = frame.width / BLOCK_DIM;
    let by = frame.height / BLOCK_DIM;
    let mut blocks = Vec::with_capacity(bx * by);
    for block_y in 0..by {
        for block_x in 0..bx {
            let mut trunc = [0u8; 16];
            for dy in 0..BLOCK_DIM {
                for dx in 0..BLOCK_DIM {
                    trunc[dy * BLOCK_DIM + dx] =
                        frame.pixel(block_x * BLOCK_DIM + dx, block_y * BLOCK_DIM + dy) >> 3;
                }
            }
            let min = *trunc.iter().min().unwrap();
            let max = *trunc.iter().max().unwrap();
            let threshold = (min + max) / 2;
            let mut bitmap = 0u16;
            for (idx, &t) in trunc.iter().enumerate() {
                if t > threshold {
                    bitmap |= 1 << (15 - idx);
                }
            }
            blocks.push(Block26 {
                bitmap,
                threshold,
                min,
            });
        }
    }
    CompressedFrame {
        width: frame.width,
        height: frame.height,
        blocks,
    }
}

/// Expands a compressed frame back to 8-bit pixels.
pub fn decode_frame(compressed: &CompressedFrame) -> Frame {
    let mut pixels = vec![0u8; compressed.width * compressed.height];
    for y in 0..compressed.height {
        for x in 0..compressed.width {
            pixels[y * compressed.width + x] = compressed.decode_pixel(x, y);
        }
    }
    Frame {
        width: compressed.width,
        height: compressed.height,
        pixels,
    }
}

/// MSB-first bit cursor over a byte sink.
struct BitWriter {
    bytes: Vec<u8>,
    used: u8,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            bytes: Vec::new(),
            used: 8,
        }
    }

    fn push(&mut self, value: u32, width: u8) {
        for i in (0..width).rev() {
            if self.used == 8 {
                self.bytes.push(0);
                self.used = 0;
            }
            let bit = (value >> i & 1) as u8;
            let last = self.bytes.last_mut().unwrap();
            *last |= bit << (7 - self.used);
            self.used += 1;
        }
    }
}

/// MSB-first bit cursor over a byte source.
struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn pull(&mut self, width: u8) -> Option<u32> {
        let mut out = 0u32;
        for _ in 0..width {
            let byte = *self.bytes.get(self.pos / 8)?;
            out = out << 1 | (byte >> (7 - self.pos % 8) & 1) as u32;
            self.pos += 1;
        }
        Some(out)
    }
}

/// Serializes header plus tightly packed blocks.
pub fn serialize(compressed: &CompressedFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + compressed.payload_bytes());
    out.extend_from_slice(&(compressed.width as u16).to_le_bytes());
    out.extend_from_slice(&(compressed.height as u16).to_le_bytes());
    let mut writer = BitWriter::new();
    for block in &compressed.blocks {
        writer.push(block.bitmap as u32, 16);
        writer.push(block.threshold as u32, 5);
        writer.push(block.min as u32, 5);
    }
    out.extend_from_slice(&writer.bytes);
    out
}

/// Inverse of [`serialize`].
pub fn deserialize(bytes: &[u8]) -> Result<CompressedFrame, VioError> {
    if bytes.len() < 4 {
        return Err(VioError::Codec("missing 4-byte header".into()));
    }
    let width = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
    let height = u16::from_le_bytes([bytes[2], bytes[3]]) as usize;
    if !width.is_multiple_of(BLOCK_DIM) || !height.is_multiple_of(BLOCK_DIM) || width == 0 || height == 0 {
        return Err(VioError::Codec(format!(
            "header dimensions {width}x{height} not block-aligned"
        )));
    }
    if width > MAX_WIDTH || height > MAX_HEIGHT {
        return Err(VioError::Codec(format!(
            "header dimensions {width}x{height} exceed {MAX_WIDTH}x{MAX_HEIGHT}"
        )));
    }
    let count = (width / BLOCK_DIM) * (height / BLOCK_DIM);
    let expected = 4 + (count * BITS_PER_BLOCK).div_ceil(8);
    if bytes.len() != expected {
        return Err(VioError::Codec(format!(
            "expected {expected} bytes for {width}x{height}, got {}",
            bytes.len()
        )));
    }
    let mut reader = BitReader {
        bytes: &bytes[4..],
        pos: 0,
    };
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let bitmap = reader.pull(16).ok_or_else(truncated)? as u16;
        let threshold = reader.pull(5).ok_or_else(truncated)? as u8;
        let min = reader.pull(5).ok_or_else(truncated)? as u8;
        if min > threshold {
            return Err(VioError::Codec(format!(
                "block minimum {min} above threshold {threshold}"
            )));
        }
        blocks.push(Block26 {
            bitmap,
            threshold,
            min,
        });
    }
    Ok(CompressedFrame {
        width,
        height,
        blocks,
    })
}

fn truncated() -> VioError {
    VioError::Codec("bit stream truncated".into())
}

/// Raw bits for one frame before compression (8 bits per pixel).
pub fn raw_bits(width: usize, height: usize) -> usize {
    width * height * 8
}

/// Compressed bits for one frame (26 per block, header excluded).
pub fn compressed_bits(width: usize, height: usize) -> usize {
    (width / BLOCK_DIM) * (height / BLOCK_DIM) * BITS_PER_BLOCK
}
