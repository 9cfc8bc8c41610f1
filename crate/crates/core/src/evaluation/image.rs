use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::checkpoint::write_atomic;
use crate::synthcorpus::FrameMatrix;

/// Binary PGM (P5) of `frames`: one column per frame, one row per channel
/// with channel 0 at the bottom, min-max scaled to 0..=255. A constant input
/// maps to mid-gray.
pub fn encode_pgm(frames: &FrameMatrix) -> Result<Vec<u8>> {
    if !frames.is_finite() {
        return Err(Error::NonFinite { op: "mel image" });
    }
    let (t, d) = (frames.frames(), frames.channels());
    let (lo, hi) = frames.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo) as f64;
    let mut out = format!("P5\n{t} {d}\n255\n").into_bytes();
    for c in (0..d).rev() {
        for r in 0..t {
            let v = frames.row(r)[c];
            let px = if span > 0.0 { (((v - lo) as f64 / span) * 255.0).round() as u8 } else { 128 };
            out.push(px);
        }
    }
    Ok(out)
}

pub fn dump_mel_image(frames: &FrameMatrix, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pgm(frames)?)
}
