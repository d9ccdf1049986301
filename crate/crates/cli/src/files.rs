//! Input file handling: tensors (JSON), rasters (PNG or grayscale tensor
//! files), pair lists, and gamma-schedule strings.

use anyhow::{anyhow, Context, Result};
use bilrp::codec::{tensor_from_json, TensorRepr};
use bilrp::lrp::GammaSchedule;
use bilrp::render::{png_to_gray, Raster};
use bilrp::Tensor;
use serde::Deserialize;
use std::path::Path;

const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

fn is_png(bytes: &[u8]) -> bool {
    bytes.len() >= 8 && bytes[..8] == PNG_MAGIC
}

/// Loads a model input: a tensor file, or a PNG converted to intensities.
/// The result is reshaped to `want_shape` when the element counts agree.
pub fn load_input(path: &Path, want_shape: &[usize]) -> Result<Tensor> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let t = if is_png(&bytes) {
        png_to_gray(&bytes)?
    } else {
        tensor_from_json(&bytes)?
    };
    if t.shape() == want_shape {
        return Ok(t);
    }
    let want: usize = want_shape.iter().product();
    if t.len() == want {
        return Ok(t.reshape(want_shape)?);
    }
    Err(anyhow!(
        "{}: {} values do not fit the model input shape {:?}",
        path.display(),
        t.len(),
        want_shape
    ))
}

/// Loads a display raster: PNG bytes pass through verbatim, tensor files
/// become grayscale grids.
pub fn load_raster(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if is_png(&bytes) {
        return Ok(Raster::Png(bytes));
    }
    let t = tensor_from_json(&bytes)?;
    let t = match t.rank() {
        2 => t,
        3 if t.shape()[0] == 1 => {
            let shape = [t.shape()[1], t.shape()[2]];
            t.reshape(&shape)?
        }
        _ => {
            return Err(anyhow!(
                "{}: raster tensors must be rank-2 (or rank-3 with one channel)",
                path.display()
            ))
        }
    };
    Ok(Raster::Gray(t))
}

#[derive(Deserialize)]
struct PairsFile {
    pairs: Vec<PairEntry>,
}

#[derive(Deserialize)]
struct PairEntry {
    x: TensorRepr,
    xprime: TensorRepr,
}

/// Loads `{"pairs": [{"x": tensor, "xprime": tensor}, ...]}`.
pub fn load_pairs(path: &Path, want_shape: &[usize]) -> Result<Vec<(Tensor, Tensor)>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let file: PairsFile = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing pairs file {}", path.display()))?;
    let want: usize = want_shape.iter().product();
    let mut out = Vec::with_capacity(file.pairs.len());
    for (i, entry) in file.pairs.iter().enumerate() {
        let fit = |repr: &TensorRepr, which: &str| -> Result<Tensor> {
            let t = repr.to_tensor(&format!("pairs[{i}].{which}"))?;
            if t.shape() == want_shape {
                Ok(t)
            } else if t.len() == want {
                Ok(t.reshape(want_shape)?)
            } else {
                Err(anyhow!(
                    "pairs[{i}].{which}: {} values do not fit input shape {:?}",
                    t.len(),
                    want_shape
                ))
            }
        };
        out.push((fit(&entry.x, "x")?, fit(&entry.xprime, "xprime")?));
    }
    Ok(out)
}

/// Parses `--gamma-schedule`: a bare number applies one gamma everywhere,
/// `index:gamma` pairs set per-layer values (default 0 elsewhere).
pub fn parse_gamma_schedule(spec: &str) -> Result<GammaSchedule> {
    let spec = spec.trim();
    if !spec.contains(':') {
        let g: f64 = spec
            .parse()
            .map_err(|e| anyhow!("bad gamma `{spec}`: {e}"))?;
        let schedule = GammaSchedule::uniform(g);
        schedule.validate()?;
        return Ok(schedule);
    }
    let mut schedule = GammaSchedule::uniform(0.0);
    for part in spec.split(',') {
        let (idx, g) = part
            .split_once(':')
            .ok_or_else(|| anyhow!("bad schedule entry `{part}`; expected `layer:gamma`"))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|e| anyhow!("bad layer index `{idx}`: {e}"))?;
        let g: f64 = g.trim().parse().map_err(|e| anyhow!("bad gamma `{g}`: {e}"))?;
        schedule = schedule.with_layer(idx, g);
    }
    schedule.validate()?;
    Ok(schedule)
}
