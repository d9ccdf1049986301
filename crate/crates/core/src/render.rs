//! Rendering of pairwise explanations as deterministic vector graphics.
//!
//! [`render`] turns a dense explanation into a [`ConnectionList`]: the
//! explanation is pooled onto square super-pixels, normalized by the fourth
//! root of its mean fourth power, soft-thresholded at `l` (sparsification),
//! clipped to `[-(h-l), h-l]` and divided by `h - l` (saturation), and the
//! surviving entries become red (positive) or blue (negative) connections
//! with opacity `|R|^p`.
//!
//! [`emit_svg`] draws the two input rasters side by side and one line per
//! connection between super-pixel centers. Identical inputs produce
//! byte-identical documents.

use crate::error::{Error, Result};
use crate::explain::{coarse_grain, PairwiseExplanation, Partition};
use crate::tensor::Tensor;
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use std::fmt::Write as _;

/// Parameters of the rendering pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderParams {
    /// Super-pixel side length in input pixels.
    pub pool: usize,
    /// Sparsification level; scores in `[-l, l]` are dropped.
    pub l: f64,
    /// Saturation level; scores at `|h|` and beyond map to full color.
    pub h: f64,
    /// Opacity exponent.
    pub p: f64,
}

impl RenderParams {
    pub fn new(pool: usize, l: f64, h: f64, p: f64) -> Result<Self> {
        let params = RenderParams { pool, l, h, p };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool == 0 {
            return Err(Error::InvalidArgument("pool size must be positive".into()));
        }
        if !(self.l >= 0.0 && self.h > self.l) {
            return Err(Error::InvalidArgument(format!(
                "need h > l >= 0, got l = {}, h = {}",
                self.l, self.h
            )));
        }
        if !(self.p >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "opacity exponent must be >= 1, got {}",
                self.p
            )));
        }
        Ok(())
    }

    /// Parses the comma-separated tuple `pool,l,h,p`.
    pub fn parse_tuple(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "expected `pool,l,h,p`, got `{s}`"
            )));
        }
        let pool = parts[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::InvalidArgument(format!("bad pool `{}`: {e}", parts[0])))?;
        let num = |p: &str| -> Result<f64> {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad number `{p}`: {e}")))
        };
        RenderParams::new(pool, num(parts[1])?, num(parts[2])?, num(parts[3])?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConnectionColor {
    Red,
    Blue,
}

/// One super-pixel-to-super-pixel connection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Connection {
    pub group_a: usize,
    pub group_b: usize,
    pub color: ConnectionColor,
    pub opacity: f64,
}

/// Connections sorted by `(group_a, group_b)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConnectionList {
    pub entries: Vec<Connection>,
}

fn grid_dims(extent: usize, pool: usize) -> usize {
    extent.div_ceil(pool)
}

fn superpixel_partition(height: usize, width: usize, pool: usize) -> Partition {
    let (gr, gc) = (grid_dims(height, pool), grid_dims(width, pool));
    let mut groups = Vec::with_capacity(gr * gc);
    for by in 0..gr {
        for bx in 0..gc {
            let mut group = Vec::new();
            for y in (by * pool)..((by + 1) * pool).min(height) {
                for x in (bx * pool)..((bx + 1) * pool).min(width) {
                    group.push(y * width + x);
                }
            }
            groups.push(group);
        }
    }
    Partition::new(groups).expect("blocks are disjoint")
}

fn opacity_power(v: f64, p: f64) -> f64 {
    if p == 1.0 {
        v
    } else if p == 2.0 {
        v * v
    } else {
        v.powf(p)
    }
}

/// Runs the rendering pipeline on a dense explanation over two spatial maps
/// of shapes `shape_a`/`shape_b` (`(height, width)` each).
pub fn render(
    explanation: &PairwiseExplanation,
    params: &RenderParams,
    shape_a: (usize, usize),
    shape_b: (usize, usize),
) -> Result<ConnectionList> {
    params.validate()?;
    let (d, dp) = explanation.dims();
    if d != shape_a.0 * shape_a.1 {
        return Err(Error::InvalidArgument(format!(
            "explanation rows {} do not match raster {}x{}",
            d, shape_a.0, shape_a.1
        )));
    }
    if dp != shape_b.0 * shape_b.1 {
        return Err(Error::InvalidArgument(format!(
            "explanation columns {} do not match raster {}x{}",
            dp, shape_b.0, shape_b.1
        )));
    }
    let pa = superpixel_partition(shape_a.0, shape_a.1, params.pool);
    let pb = superpixel_partition(shape_b.0, shape_b.1, params.pool);
    let mut pooled = coarse_grain(explanation, &pa, &pb)?.values();

    // normalization by the fourth root of the mean fourth power
    let e4 = pooled.data().iter().map(|v| v * v * v * v).sum::<f64>() / pooled.len() as f64;
    if e4 == 0.0 {
        return Ok(ConnectionList::default());
    }
    let norm = e4.sqrt().sqrt();
    for v in pooled.data_mut() {
        *v /= norm;
    }
    // sparsification (soft threshold at l), then saturation at h - l
    let delta = params.h - params.l;
    let mut entries = Vec::new();
    let gb = pb.len();
    for (idx, &raw) in pooled.data().iter().enumerate() {
        let shrunk = raw - raw.clamp(-params.l, params.l);
        let scaled = shrunk.clamp(-delta, delta) / delta;
        if scaled == 0.0 {
            continue;
        }
        entries.push(Connection {
            group_a: idx / gb,
            group_b: idx % gb,
            color: if scaled > 0.0 {
                ConnectionColor::Red
            } else {
                ConnectionColor::Blue
            },
            opacity: opacity_power(scaled.abs(), params.p),
        });
    }
    Ok(ConnectionList { entries })
}

/// Raster image accompanying an explanation: either ready PNG bytes (embedded
/// verbatim) or a grayscale intensity grid (encoded to PNG deterministically).
#[derive(Clone, Debug)]
pub enum Raster {
    Png(Vec<u8>),
    Gray(Tensor),
}

impl Raster {
    pub fn dims(&self) -> Result<(usize, usize)> {
        match self {
            Raster::Png(bytes) => {
                let img = image::load_from_memory(bytes)
                    .map_err(|e| Error::parse("png image", e.to_string()))?;
                Ok((img.height() as usize, img.width() as usize))
            }
            Raster::Gray(t) => {
                if t.rank() != 2 {
                    return Err(Error::InvalidArgument(
                        "grayscale raster must be rank-2".into(),
                    ));
                }
                Ok((t.shape()[0], t.shape()[1]))
            }
        }
    }

    fn png_bytes(&self) -> Result<Vec<u8>> {
        match self {
            Raster::Png(bytes) => Ok(bytes.clone()),
            Raster::Gray(t) => {
                let (h, w) = (t.shape()[0], t.shape()[1]);
                let (lo, hi) = t
                    .data()
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    });
                let span = hi - lo;
                let pixels: Vec<u8> = t
                    .data()
                    .iter()
                    .map(|&v| {
                        if span == 0.0 {
                            128
                        } else {
                            (255.0 * (v - lo) / span).round() as u8
                        }
                    })
                    .collect();
                let mut out = Vec::new();
                PngEncoder::new(&mut out)
                    .write_image(&pixels, w as u32, h as u32, ExtendedColorType::L8)
                    .map_err(|e| Error::parse("png encoding", e.to_string()))?;
                Ok(out)
            }
        }
    }
}

/// Decodes PNG bytes to a grayscale `[h, w]` tensor with intensities in
/// `[0, 1]`.
pub fn png_to_gray(bytes: &[u8]) -> Result<Tensor> {
    let img =
        image::load_from_memory(bytes).map_err(|e| Error::parse("png image", e.to_string()))?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data: Vec<f64> = gray.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new(vec![h, w], data)
}

/// Geometry shared between [`render`] and [`emit_svg`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderLayout {
    pub shape_a: (usize, usize),
    pub shape_b: (usize, usize),
    pub pool: usize,
}

const MARGIN: f64 = 16.0;
const GAP: f64 = 24.0;

/// Center of super-pixel `group` on a `height x width` raster.
fn group_center(group: usize, height: usize, width: usize, pool: usize) -> Result<(f64, f64)> {
    let (gr, gc) = (grid_dims(height, pool), grid_dims(width, pool));
    if group >= gr * gc {
        return Err(Error::InvalidArgument(format!(
            "group index {group} out of range for a {gr}x{gc} grid"
        )));
    }
    let by = group / gc;
    let bx = group % gc;
    let y0 = by * pool;
    let y1 = ((by + 1) * pool).min(height);
    let x0 = bx * pool;
    let x1 = ((bx + 1) * pool).min(width);
    Ok(((y0 + y1) as f64 / 2.0, (x0 + x1) as f64 / 2.0))
}

/// Draws the two rasters side by side with one line per connection.
pub fn emit_svg(
    connections: &ConnectionList,
    image_a: &Raster,
    image_b: &Raster,
    layout: &RenderLayout,
) -> Result<String> {
    if image_a.dims()? != layout.shape_a || image_b.dims()? != layout.shape_b {
        return Err(Error::InvalidArgument(
            "raster dimensions do not match the layout".into(),
        ));
    }
    let (ha, wa) = layout.shape_a;
    let (hb, wb) = layout.shape_b;
    let bx = MARGIN + wa as f64 + GAP;
    let width = bx + wb as f64 + MARGIN;
    let height = 2.0 * MARGIN + ha.max(hb) as f64;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for (raster, x, w, h) in [
        (image_a, MARGIN, wa, ha),
        (image_b, bx, wb, hb),
    ] {
        let data = STANDARD.encode(raster.png_bytes()?);
        let _ = writeln!(
            svg,
            r#"<image x="{x}" y="{MARGIN}" width="{w}" height="{h}" image-rendering="pixelated" href="data:image/png;base64,{data}"/>"#
        );
    }
    let _ = writeln!(svg, r#"<g stroke-width="1">"#);
    for c in &connections.entries {
        let (ya, xa) = group_center(c.group_a, ha, wa, layout.pool)?;
        let (yb, xb) = group_center(c.group_b, hb, wb, layout.pool)?;
        let color = match c.color {
            ConnectionColor::Red => "red",
            ConnectionColor::Blue => "blue",
        };
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-opacity="{}"/>"#,
            MARGIN + xa,
            MARGIN + ya,
            bx + xb,
            MARGIN + yb,
            c.opacity
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests;
