use super::{AnnotationError, BinaryMask};

/// Row-major run-length encoding. Runs alternate background/foreground and
/// the first run always counts background, so it is zero for masks whose
/// first pixel is foreground.
pub fn rle_encode(mask: &BinaryMask) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &bit in mask.bits() {
        if bit != current {
            runs.push(len);
            len = 0;
            current = bit;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

pub fn rle_decode(rle: &[u32], width: u32, height: u32) -> Result<BinaryMask, AnnotationError> {
    let expected = width as u64 * height as u64;
    let actual: u64 = rle.iter().map(|&r| r as u64).sum();
    if actual != expected {
        return Err(AnnotationError::SumMismatch {
            expected,
            actual,
            width,
            height,
        });
    }
    let mut bits = Vec::with_capacity(expected as usize);
    let mut value = false;
    for &run in rle {
        bits.extend(std::iter::repeat_n(value, run as usize));
        value = !value;
    }
    Ok(BinaryMask::from_bits(width, height, bits))
}
