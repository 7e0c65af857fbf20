//! Prediction dumps for visual inspection: binary PGM masks and a
//! side-by-side PPM strip (image | gt mask | pred mask | gt height |
//! pred height). Heights map through a fixed linear 0-50 m color ramp so
//! files from different runs are directly comparable.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub const HEIGHT_CAP_M: f64 = 50.0;
pub const MASK_THRESHOLD: f64 = 0.5;
const GUTTER_PX: usize = 2;

// dark-violet -> teal -> bright-yellow anchors, interpolated linearly
const RAMP: [[f64; 3]; 3] = [
    [0.267, 0.005, 0.329],
    [0.128, 0.567, 0.551],
    [0.993, 0.906, 0.144],
];

fn as_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Color for a height in meters on the fixed 0-50 m ramp (clamped outside).
pub fn height_color(h: f64) -> [u8; 3] {
    let t = (h / HEIGHT_CAP_M).clamp(0.0, 1.0) * 2.0;
    let (lo, hi, f) = if t <= 1.0 { (RAMP[0], RAMP[1], t) } else { (RAMP[1], RAMP[2], t - 1.0) };
    [
        as_byte(lo[0] + f * (hi[0] - lo[0])),
        as_byte(lo[1] + f * (hi[1] - lo[1])),
        as_byte(lo[2] + f * (hi[2] - lo[2])),
    ]
}

/// View a tensor as a single [H,W] plane, tolerating leading 1-extents
/// (accepts [H,W], [1,H,W], [1,1,H,W]).
fn plane(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    let (lead, rest) = s.split_at(s.len().saturating_sub(2));
    if rest.len() != 2 || lead.iter().any(|&e| e != 1) {
        return Err(Error::invalid("render", format!("{} must be a single plane, got {:?}", what, s)));
    }
    Ok((rest[0], rest[1]))
}

fn expect_hw(t: &Tensor, what: &str, h: usize, w: usize) -> Result<()> {
    let (th, tw) = plane(t, what)?;
    if (th, tw) != (h, w) {
        return Err(Error::ShapeMismatch { op: "render", left: vec![h, w], right: vec![th, tw] });
    }
    Ok(())
}

/// RGB strip of five panels separated by white gutters. Returns
/// (pixels, strip width, strip height).
pub fn render_panels(
    image: &Tensor,
    gt_mask: &Tensor,
    pred_mask: &Tensor,
    gt_height: &Tensor,
    pred_height: &Tensor,
) -> Result<(Vec<u8>, usize, usize)> {
    let s = image.shape();
    let (lead, rest) = s.split_at(s.len().saturating_sub(3));
    if rest.len() != 3 || rest[0] != 3 || lead.iter().any(|&e| e != 1) {
        return Err(Error::invalid("render", format!("image must be [3,H,W], got {:?}", s)));
    }
    let (h, w) = (rest[1], rest[2]);
    expect_hw(gt_mask, "gt mask", h, w)?;
    expect_hw(pred_mask, "pred mask", h, w)?;
    expect_hw(gt_height, "gt height", h, w)?;
    expect_hw(pred_height, "pred height", h, w)?;

    let panels = 5;
    let total_w = panels * w + (panels - 1) * GUTTER_PX;
    let mut rgb = vec![255u8; total_w * h * 3];
    let img = image.data();
    let mut put = |panel: usize, row: usize, col: usize, px: [u8; 3]| {
        let x = panel * (w + GUTTER_PX) + col;
        let o = (row * total_w + x) * 3;
        rgb[o..o + 3].copy_from_slice(&px);
    };
    let mask_px = |v: f64| if v > MASK_THRESHOLD { [255, 255, 255] } else { [0, 0, 0] };
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            put(0, r, c, [as_byte(img[i]), as_byte(img[h * w + i]), as_byte(img[2 * h * w + i])]);
            put(1, r, c, mask_px(gt_mask.data()[i]));
            put(2, r, c, mask_px(pred_mask.data()[i]));
            put(3, r, c, height_color(gt_height.data()[i]));
            put(4, r, c, height_color(pred_height.data()[i]));
        }
    }
    Ok((rgb, total_w, h))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

/// Binary PPM (P6).
pub fn write_ppm(path: &Path, rgb: &[u8], w: usize, h: usize) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::invalid("render", format!("pixel buffer {} != {}x{}x3", rgb.len(), w, h)));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    bytes.extend_from_slice(rgb);
    write_bytes(path, &bytes)
}

/// Binary PGM (P5) of a mask plane thresholded at 0.5.
pub fn write_pgm_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = plane(mask, "mask")?;
    let mut bytes = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    bytes.extend(mask.data().iter().map(|&v| if v > MASK_THRESHOLD { 255u8 } else { 0 }));
    write_bytes(path, &bytes)
}
