//! Grayscale conversion, resizing and frame stacking.

use std::collections::VecDeque;

use crate::error::RlError;
use crate::network::Shape3;
use crate::rl::env::Frame;

pub const STACK: usize = 4;

/// Luma in `[0, 1]` with weights 0.299, 0.587, 0.114.
fn gray(frame: &Frame) -> Vec<f64> {
    frame
        .pixels
        .chunks_exact(3)
        .map(|p| (299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32) as f64 / 255_000.0)
        .collect()
}

/// Area-average resize. Identity when the sizes already match.
fn resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let mut out = vec![0.0; out_h * out_w];
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    for oy in 0..out_h {
        let (y0, y1) = (oy as f64 * sy, (oy + 1) as f64 * sy);
        for ox in 0..out_w {
            let (x0, x1) = (ox as f64 * sx, (ox + 1) as f64 * sx);
            let (mut acc, mut area) = (0.0, 0.0);
            for y in y0.floor() as usize..(y1.ceil() as usize).min(h) {
                let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                for x in x0.floor() as usize..(x1.ceil() as usize).min(w) {
                    let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                    acc += wy * wx * src[y * w + x];
                    area += wy * wx;
                }
            }
            out[oy * out_w + ox] = acc / area;
        }
    }
    out
}

fn check(frame: &Frame) -> Result<(), RlError> {
    if frame.height == 0 || frame.width == 0 || frame.pixels.len() != frame.height * frame.width * 3 {
        return Err(RlError::MalformedFrame(format!(
            "{} bytes for a {}x{} RGB frame",
            frame.pixels.len(),
            frame.height,
            frame.width
        )));
    }
    Ok(())
}

/// Builds an `(out_h, out_w, 4)` state from the most recent frames, oldest
/// channel first. Fewer than four frames are padded by repeating the first.
pub fn preprocess(frames: &[Frame], out_h: usize, out_w: usize) -> Result<Vec<f32>, RlError> {
    if frames.is_empty() {
        return Err(RlError::MalformedFrame("no frames".into()));
    }
    let recent = &frames[frames.len().saturating_sub(STACK)..];
    let planes = recent
        .iter()
        .map(|f| {
            check(f)?;
            Ok(resize(&gray(f), f.height, f.width, out_h, out_w))
        })
        .collect::<Result<Vec<_>, RlError>>()?;
    Ok(interleave(&planes, out_h * out_w))
}

fn interleave(planes: &[Vec<f64>], n: usize) -> Vec<f32> {
    let pad = STACK - planes.len();
    let mut out = vec![0.0f32; n * STACK];
    for i in 0..n {
        for t in 0..STACK {
            let src = &planes[t.saturating_sub(pad)];
            out[i * STACK + t] = src[i].clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Rolling frame stack for an episode.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    out_h: usize,
    out_w: usize,
    planes: VecDeque<Vec<f64>>,
}

impl Preprocessor {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Preprocessor { out_h, out_w, planes: VecDeque::with_capacity(STACK) }
    }

    pub fn shape(&self) -> Shape3 {
        Shape3::new(self.out_h, self.out_w, STACK)
    }

    /// Clears the history and returns the state for the first frame.
    pub fn reset(&mut self, frame: &Frame) -> Result<Vec<f32>, RlError> {
        self.planes.clear();
        self.push(frame)
    }

    /// Appends a frame, dropping the oldest beyond four, and returns the state.
    pub fn push(&mut self, frame: &Frame) -> Result<Vec<f32>, RlError> {
        check(frame)?;
        if self.planes.len() == STACK {
            self.planes.pop_front();
        }
        self.planes.push_back(resize(&gray(frame), frame.height, frame.width, self.out_h, self.out_w));
        let planes: Vec<Vec<f64>> = self.planes.iter().cloned().collect();
        Ok(interleave(&planes, self.out_h * self.out_w))
    }
}
