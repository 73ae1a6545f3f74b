//! Adapter activation heatmaps and portable pixmap I/O.
//!
//! A heatmap shows where one task's adapter responds on one image: the
//! tapped activation is reduced to a per-token l2 norm, arranged on the
//! token grid, min-max normalized to `[0, 1]`, and bilinearly upsampled
//! to image resolution.

use crate::autodiff::{Element, Tensor};
use crate::dataset::CHANNELS;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::peft::PeftKind;
use crate::task::Task;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

/// Where inside the adapter to tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationTap {
    /// After the down-projection (`[., r]`).
    Down,
    /// After the internal LayerNorm (`[., r]`).
    Norm,
    /// The pre-residual delta after the up-projection (`[., d]`).
    Up,
}

impl ActivationTap {
    pub fn name(self) -> &'static str {
        match self {
            ActivationTap::Down => "down",
            ActivationTap::Norm => "norm",
            ActivationTap::Up => "up",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "down" => Ok(ActivationTap::Down),
            "norm" => Ok(ActivationTap::Norm),
            "up" => Ok(ActivationTap::Up),
            other => Err(Error::input(format!(
                "unknown tap {other:?}; expected down, norm, or up"
            ))),
        }
    }
}

/// One task's normalized activation map on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub task: Task,
    pub layer: usize,
    pub tap: ActivationTap,
    /// Token-grid side length.
    pub side: usize,
    /// `side x side` values in `[0, 1]`.
    pub grid: Vec<f64>,
    /// Upsampled to `image_size x image_size`.
    pub image_size: usize,
    pub upsampled: Vec<f64>,
    /// True when the raw map was constant and normalization degenerate;
    /// the map is then all zeros rather than an arbitrary rescale.
    pub degenerate: bool,
}

/// Per-token l2 norm over channels: `[rows, c] -> [rows]`.
fn row_l2<E: Element>(t: &Tensor<E>) -> Result<Vec<f64>> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(Error::input(format!(
            "l2 reduce needs a matrix, got {shape:?}"
        )));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let data = t.data();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let s: f64 = data[r * cols..(r + 1) * cols]
            .iter()
            .map(|&v| {
                let x = v.to_f64();
                x * x
            })
            .sum();
        out.push(s.sqrt());
    }
    Ok(out)
}

/// Min-max normalize into `[0, 1]`; a constant input maps to all zeros
/// and is flagged as degenerate.
fn normalize(values: &[f64]) -> (Vec<f64>, bool) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() || hi - lo < 1e-12 {
        return (vec![0.0; values.len()], true);
    }
    (values.iter().map(|v| (v - lo) / (hi - lo)).collect(), false)
}

/// Bilinear upsample of a square map, corners aligned.
fn bilinear_upsample(src: &[f64], side: usize, dst_side: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dst_side * dst_side);
    if side == 1 {
        return vec![src[0]; dst_side * dst_side];
    }
    let scale = (side - 1) as f64 / (dst_side - 1).max(1) as f64;
    for y in 0..dst_side {
        let fy = y as f64 * scale;
        let y0 = (fy.floor() as usize).min(side - 2);
        let ty = fy - y0 as f64;
        for x in 0..dst_side {
            let fx = x as f64 * scale;
            let x0 = (fx.floor() as usize).min(side - 2);
            let tx = fx - x0 as f64;
            let v00 = src[y0 * side + x0];
            let v01 = src[y0 * side + x0 + 1];
            let v10 = src[(y0 + 1) * side + x0];
            let v11 = src[(y0 + 1) * side + x0 + 1];
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            out.push(top + (bot - top) * ty);
        }
    }
    out
}

/// Compute one task's activation map for a single image `[1, H, W, 3]`.
///
/// Only adapter models expose an MLP-side bottleneck to tap; LoRA
/// models are rejected with a config error.
pub fn activation_map<E: Element>(
    model: &Model<E>,
    image: &Tensor<E>,
    task: Task,
    layer: usize,
    tap: ActivationTap,
) -> Result<ActivationMap> {
    if model.peft.kind() != PeftKind::Adapter {
        return Err(Error::config(
            "activation heatmaps tap the adapter bottleneck; this model uses LoRA",
        ));
    }
    let shape = image.shape();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::input(format!(
            "expected a single image [1,H,W,3], got {shape:?}"
        )));
    }
    let bb = &model.backbone;
    let cfg = bb.config();
    if !cfg.branch_layers().contains(&layer) {
        return Err(Error::config(format!(
            "layer {layer} has no adapters; insertion layers are {:?}",
            cfg.branch_layers()
        )));
    }
    // Replay the branch up to the adapter's input at `layer`.
    let mut x = bb.forward_trunk(image)?;
    for idx in cfg.trunk_len()..layer {
        x = bb.block(idx).forward_with_peft(&x, 1, &model.peft, task)?;
    }
    let block = bb.block(layer);
    let x = block.attn_half(&x, 1, None)?;
    let pre = block.mlp_pre_adapter(&x)?;
    let act = model.peft.adapter(task, layer)?.tap(&pre, tap)?;

    let norms = row_l2(&act)?;
    let side = (norms.len() as f64).sqrt().round() as usize;
    if side * side != norms.len() {
        return Err(Error::input(format!(
            "{} tokens do not form a square grid",
            norms.len()
        )));
    }
    let (grid, degenerate) = normalize(&norms);
    let image_size = cfg.image_size;
    let upsampled = bilinear_upsample(&grid, side, image_size);
    Ok(ActivationMap {
        task,
        layer,
        tap,
        side,
        grid,
        image_size,
        upsampled,
        degenerate,
    })
}

// ── portable pixmap I/O ──────────────────────────────────────────────

/// Write a grayscale map (`values` in `[0, 1]`, row-major `w x h`)
/// as binary PGM (P5).
pub fn write_pgm(path: &Path, values: &[f64], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::input(format!(
            "{} values for {width} x {height} PGM",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(20 + values.len());
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    out.extend(
        values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Write an RGB image (`[0, 1]` floats, row-major `h x w x 3`) as
/// binary PPM (P6).
pub fn write_ppm(path: &Path, rgb: &[f32], width: usize, height: usize) -> Result<()> {
    if rgb.len() != width * height * CHANNELS {
        return Err(Error::input(format!(
            "{} values for {width} x {height} x {CHANNELS} PPM",
            rgb.len()
        )));
    }
    let mut out = Vec::with_capacity(20 + rgb.len());
    out.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    out.extend(
        rgb.iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read a binary PPM (P6, maxval 255) into `[0, 1]` floats plus
/// `(width, height)`.
pub fn read_ppm(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut fields = Vec::new();
    let mut line = String::new();
    // Header: "P6", width, height, maxval; '#' starts a comment.
    while fields.len() < 4 {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::format("truncated PPM header"));
        }
        let content = line.split('#').next().unwrap_or("");
        fields.extend(content.split_whitespace().map(str::to_string));
    }
    if fields[0] != "P6" {
        return Err(Error::format(format!(
            "expected P6 magic, got {:?}",
            fields[0]
        )));
    }
    let parse = |s: &String| {
        s.parse::<usize>()
            .map_err(|_| Error::format(format!("bad PPM header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format(format!("unsupported PPM maxval {maxval}")));
    }
    let mut bytes = vec![0u8; width * height * CHANNELS];
    reader.read_exact(&mut bytes).map_err(|_| {
        Error::format(format!(
            "PPM data truncated; expected {} bytes",
            bytes.len()
        ))
    })?;
    Ok((
        bytes.into_iter().map(|b| b as f32 / 255.0).collect(),
        width,
        height,
    ))
}
