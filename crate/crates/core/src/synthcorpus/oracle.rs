use super::profiles::{default_profiles, DialectProfile, NUM_DIALECTS};
use super::render::FrameMatrix;

/// Offset, in band widths, of the flanking channels used by the band score.
const FLANK: f64 = 1.6;

/// Per-dialect band scores of an utterance: the log mean energy at each
/// dialect's emphasized channel minus the average log energy of its two
/// flanks. Linear trends across channels (tilt) cancel exactly.
pub fn band_scores(frames: &FrameMatrix) -> [f64; NUM_DIALECTS] {
    let d = frames.channels();
    let mean = frames.mean_frame();
    let log_at = |x: f64| {
        // Linear interpolation between neighbouring channels.
        let x = x.clamp(0.0, (d - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(d - 1);
        let w = x - lo as f64;
        ((1.0 - w) * mean[lo] + w * mean[hi]).max(1e-12).ln()
    };
    let flank = FLANK * DialectProfile::band_width(d);
    let profiles = default_profiles([1.0; 3]);
    std::array::from_fn(|k| {
        let c = profiles[k].band_center_channel(d);
        log_at(c) - 0.5 * (log_at(c - flank) + log_at(c + flank))
    })
}

/// Recovers the generating dialect from band statistics alone.
pub fn dialect_oracle(frames: &FrameMatrix) -> usize {
    let s = band_scores(frames);
    (0..NUM_DIALECTS).max_by(|&a, &b| s[a].total_cmp(&s[b])).expect("three dialects")
}
