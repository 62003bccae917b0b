//! Clip extraction and augmentation.
//!
//! Training draws one window of `t_fixed` frames starting at a uniformly
//! random index; evaluation tiles the video with back-to-back windows,
//! clamping the final one so it ends exactly at the last frame. Videos
//! shorter than the window are zero-padded at the tail. The zoom-in
//! augmentation crops a fixed top-centered window and resizes it back.

use rand::Rng as _;

use crate::error::Result;
use crate::synth::Video;
use crate::tensor::Tensor;
use crate::Rng;

/// A fixed-length window of frames cut from one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    /// T_fixed×H×W frames; the trailing `pad_count` frames are exactly zero.
    pub frames: Tensor,
    pub source_id: u64,
    /// Offset of the window into the source video.
    pub start_index: usize,
    /// Number of zero-padded trailing frames.
    pub pad_count: usize,
}

impl Clip {
    pub fn t_fixed(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Frames that carry real content.
    pub fn real_frames(&self) -> usize {
        self.t_fixed() - self.pad_count
    }
}

fn cut(video: &Video, source_id: u64, start: usize, t_fixed: usize) -> Clip {
    let (t_total, h, w) = (video.t_total(), video.height(), video.width());
    let frame = h * w;
    let take = t_fixed.min(t_total.saturating_sub(start));
    let mut data = vec![0.0; t_fixed * frame];
    data[..take * frame]
        .copy_from_slice(&video.frames.data()[start * frame..(start + take) * frame]);
    Clip {
        frames: Tensor::from_raw(vec![t_fixed, h, w], data),
        source_id,
        start_index: start,
        pad_count: t_fixed - take,
    }
}

/// Uniformly random training window. When the video is shorter than the
/// window, a single zero-padded clip starting at 0 is returned.
pub fn sample_train_clip(video: &Video, source_id: u64, t_fixed: usize, rng: &mut Rng) -> Clip {
    let t_total = video.t_total();
    if t_total <= t_fixed {
        return cut(video, source_id, 0, t_fixed);
    }
    let start = rng.random_range(0..=t_total - t_fixed);
    cut(video, source_id, start, t_fixed)
}

/// Back-to-back test windows starting at 0; if the last window would
/// overshoot, its start is clamped to `t_total − t_fixed` so it overlaps the
/// previous one. A too-short video yields one zero-padded clip.
pub fn make_test_clips(video: &Video, source_id: u64, t_fixed: usize) -> Vec<Clip> {
    let t_total = video.t_total();
    if t_total <= t_fixed {
        return vec![cut(video, source_id, 0, t_fixed)];
    }
    let mut clips = Vec::new();
    let mut start = 0;
    while start + t_fixed <= t_total {
        clips.push(cut(video, source_id, start, t_fixed));
        start += t_fixed;
    }
    if start < t_total {
        clips.push(cut(video, source_id, t_total - t_fixed, t_fixed));
    }
    clips
}

/// Crop window of a zoom at the given frame size: height scaled by 90/112,
/// width by 72/112 (rounded to nearest), flush with the top edge and
/// horizontally centered.
pub fn zoom_crop_window(height: usize, width: usize) -> (usize, usize, usize) {
    let crop_h = ((height as f64 * 90.0 / 112.0).round() as usize).clamp(1, height);
    let crop_w = ((width as f64 * 72.0 / 112.0).round() as usize).clamp(1, width);
    let col0 = (width - crop_w) / 2;
    (crop_h, crop_w, col0)
}

/// With the given probability, crops the top-centered zoom window from every
/// frame and bilinearly resizes it back to H×W; otherwise returns the clip
/// unchanged.
pub fn zoom_augment(clip: &Clip, rng: &mut Rng, probability: f64) -> Result<Clip> {
    let draw: f64 = rng.random_range(0.0..1.0);
    if draw >= probability {
        return Ok(clip.clone());
    }
    Ok(apply_zoom(clip))
}

/// Unconditional zoom, shared by the augmentation and its tests.
pub fn apply_zoom(clip: &Clip) -> Clip {
    let (t, h, w) = (
        clip.frames.shape()[0],
        clip.frames.shape()[1],
        clip.frames.shape()[2],
    );
    let (crop_h, crop_w, col0) = zoom_crop_window(h, w);
    let src = clip.frames.data();
    let mut out = vec![0.0; t * h * w];
    // corner-aligned bilinear sampling from the crop back to full size
    let sy = if h > 1 {
        (crop_h - 1) as f64 / (h - 1) as f64
    } else {
        0.0
    };
    let sx = if w > 1 {
        (crop_w - 1) as f64 / (w - 1) as f64
    } else {
        0.0
    };
    for ti in 0..t {
        let f0 = ti * h * w;
        for oy in 0..h {
            let y = oy as f64 * sy;
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(crop_h - 1);
            let fy = y - y0 as f64;
            for ox in 0..w {
                let x = ox as f64 * sx;
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(crop_w - 1);
                let fx = x - x0 as f64;
                let at = |yy: usize, xx: usize| src[f0 + yy * w + col0 + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[f0 + oy * w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Clip {
        frames: Tensor::from_raw(vec![t, h, w], out),
        ..clip.clone()
    }
}
