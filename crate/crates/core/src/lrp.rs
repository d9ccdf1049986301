//! First-order layer-wise relevance propagation.
//!
//! [`lrp_explain`] redistributes every output unit's activation back to the
//! input, producing a `(d x h)` factor matrix: entry `(i, m)` is the relevance
//! of input feature `i` for output unit `m`. All `h` columns are propagated
//! together in one batched backward sweep (chunked when intermediate layers
//! are large), with a fixed within-column reduction order so results do not
//! depend on chunking.
//!
//! Rule dispatch per layer:
//! * weighted layers (dense, conv, projection) use the gamma rule
//!   `R_j = sum_k a_j rho(w_jk) / (sum_j a_j rho(w_jk)) R_k` with
//!   `rho(w) = w + gamma w^+`, regardless of whether a ReLU follows;
//! * ReLU passes relevance through unchanged (its rule is fused into the
//!   preceding weighted layer);
//! * pools, branch-max and shift redistribute along the forward selection:
//!   winner-take-all for max/min, activation-proportional for sum-pools,
//!   identity along the translation for shift.
//!
//! When a redistribution denominator is exactly zero the incoming relevance
//! is dropped rather than stabilized with an epsilon (an epsilon would break
//! the exact factored/direct equivalence), and the event is counted in
//! [`LrpDiagnostics`].

use crate::error::{Error, Result};
use crate::network::{
    conv_spatial, dense_forward, extreme_cell, for_each_pool_window, for_each_shift_pair, Layer,
    NetworkGraph,
};
use crate::tensor::{matmul, Tensor};
use std::collections::BTreeMap;

/// Input-layer rule selection.
#[derive(Clone, Debug, PartialEq)]
pub enum InputRule {
    /// Treat the first layer like any other weighted layer.
    Default,
    /// Box-constraint rule for bounded input domains: relevance of the first
    /// weighted layer is redistributed with numerators
    /// `x_j w_jk - l_j w_jk^+ - h_j w_jk^-`.
    ZB { lower: Tensor, upper: Tensor },
}

/// Per-layer gamma values plus the input-layer rule.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaSchedule {
    default_gamma: f64,
    per_layer: BTreeMap<usize, f64>,
    input_rule: InputRule,
}

impl Default for GammaSchedule {
    fn default() -> Self {
        Self::uniform(0.0)
    }
}

impl GammaSchedule {
    /// Same gamma at every weighted layer.
    pub fn uniform(gamma: f64) -> Self {
        GammaSchedule {
            default_gamma: gamma,
            per_layer: BTreeMap::new(),
            input_rule: InputRule::Default,
        }
    }

    /// Overrides gamma for one layer index.
    pub fn with_layer(mut self, layer_index: usize, gamma: f64) -> Self {
        self.per_layer.insert(layer_index, gamma);
        self
    }

    pub fn with_input_rule(mut self, rule: InputRule) -> Self {
        self.input_rule = rule;
        self
    }

    pub fn gamma_for(&self, layer_index: usize) -> f64 {
        *self
            .per_layer
            .get(&layer_index)
            .unwrap_or(&self.default_gamma)
    }

    pub fn input_rule(&self) -> &InputRule {
        &self.input_rule
    }

    pub fn default_gamma(&self) -> f64 {
        self.default_gamma
    }

    pub fn per_layer(&self) -> &BTreeMap<usize, f64> {
        &self.per_layer
    }

    pub fn validate(&self) -> Result<()> {
        let all_ok = self.default_gamma >= 0.0
            && self.per_layer.values().all(|&g| g >= 0.0)
            && self.default_gamma.is_finite()
            && self.per_layer.values().all(|g| g.is_finite());
        if !all_ok {
            return Err(Error::InvalidArgument(
                "gamma values must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Counters for relevance dropped at exactly-zero denominators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LrpDiagnostics {
    /// Number of (unit, column) relevance entries that were nonzero but could
    /// not be redistributed.
    pub zero_denominator_drops: u64,
}

/// Factored relevance: one column per output unit.
#[derive(Clone, Debug)]
pub struct RelevanceFactors {
    values: Tensor,
    diagnostics: LrpDiagnostics,
}

impl RelevanceFactors {
    /// The `(d x h)` factor matrix.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn diagnostics(&self) -> LrpDiagnostics {
        self.diagnostics
    }

    /// Sum of column `m`, i.e. the total relevance attributed for unit `m`.
    pub fn column_sum(&self, m: usize) -> f64 {
        let (d, h) = (self.values.shape()[0], self.values.shape()[1]);
        (0..d).map(|i| self.values.data()[i * h + m]).sum()
    }
}

/// `rho(w) = w + gamma * max(w, 0)`.
fn rho(weight: &Tensor, gamma: f64) -> Tensor {
    if gamma == 0.0 {
        weight.clone()
    } else {
        weight.map(|w| w + gamma * w.max(0.0))
    }
}

/// Divides each relevance row by its denominator, dropping rows with an
/// exactly-zero denominator.
fn stabilize_rows(cols: &Tensor, z: &[f64], diag: &mut LrpDiagnostics) -> Tensor {
    let ncols = cols.shape()[1];
    let mut s = cols.clone();
    for (k, &zk) in z.iter().enumerate() {
        let row = &mut s.data_mut()[k * ncols..(k + 1) * ncols];
        if zk == 0.0 {
            for v in row.iter_mut() {
                if *v != 0.0 {
                    diag.zero_denominator_drops += 1;
                    *v = 0.0;
                }
            }
        } else {
            for v in row.iter_mut() {
                *v /= zk;
            }
        }
    }
    s
}

fn scale_rows_by(cols: &mut Tensor, a: &[f64]) {
    let ncols = cols.shape()[1];
    for (j, &aj) in a.iter().enumerate() {
        for v in &mut cols.data_mut()[j * ncols..(j + 1) * ncols] {
            *v *= aj;
        }
    }
}

/// Gamma-rule propagation through a weighted layer, batched over columns.
fn propagate_weighted(
    layer: &Layer,
    a_in: &Tensor,
    cols: &Tensor,
    gamma: f64,
    diag: &mut LrpDiagnostics,
) -> Result<Tensor> {
    let ncols = cols.shape()[1];
    match layer {
        Layer::Dense { weight, .. } | Layer::LinearProjection { weight } => {
            let rw = rho(weight, gamma);
            let mut z = vec![0.0; weight.shape()[1]];
            dense_forward(&rw, None, a_in.data(), &mut z);
            let s = stabilize_rows(cols, &z, diag);
            let mut low = matmul(&rw, &s)?;
            scale_rows_by(&mut low, a_in.data());
            Ok(low)
        }
        Layer::Conv2D { weight, stride, .. } => {
            let rw = rho(weight, gamma);
            let out_shape = layer.output_shape(a_in.shape())?;
            let mut z = Tensor::zeros(&out_shape);
            conv_apply(&rw, a_in, &mut z, *stride);
            let s = stabilize_rows(cols, z.data(), diag);
            let mut low = Tensor::zeros(&[a_in.len(), ncols]);
            conv_transpose_apply(&rw, a_in.shape(), &out_shape, *stride, &s, &mut low);
            scale_rows_by(&mut low, a_in.data());
            Ok(low)
        }
        _ => Err(Error::InvalidArgument(format!(
            "gamma rule applies to weighted layers, not `{}`",
            layer.kind_name()
        ))),
    }
}

/// Forward weighted sum without bias (used for rule denominators).
fn conv_apply(weight: &Tensor, input: &Tensor, out: &mut Tensor, stride: (usize, usize)) {
    let ws = weight.shape();
    let (c_out, c_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = (out.shape()[1], out.shape()[2]);
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    conv_spatial((h, w), (oh, ow), stride, (ky, kx), |osp, isp| {
                        out.data_mut()[co * oh * ow + osp] += wv * input.data()[ci * h * w + isp];
                    });
                }
            }
        }
    }
}

/// Transpose application: accumulates `w * s[out_row]` onto `low[in_row]`.
fn conv_transpose_apply(
    weight: &Tensor,
    in_shape: &[usize],
    out_shape: &[usize],
    stride: (usize, usize),
    s: &Tensor,
    low: &mut Tensor,
) {
    let ws = weight.shape();
    let (c_out, c_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (h, w) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let ncols = s.shape()[1];
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    conv_spatial((h, w), (oh, ow), stride, (ky, kx), |osp, isp| {
                        crate::network::axpy_row(
                            low.data_mut(),
                            ci * h * w + isp,
                            s.data(),
                            co * oh * ow + osp,
                            wv,
                            ncols,
                        );
                    });
                }
            }
        }
    }
}

/// Pool-style propagation (Eq.-of-motion: relevance follows the forward
/// selection gradient), batched over columns.
fn propagate_pool(
    layer: &Layer,
    a_in: &Tensor,
    cols: &Tensor,
    diag: &mut LrpDiagnostics,
) -> Result<Tensor> {
    let ncols = cols.shape()[1];
    let mut low = Tensor::zeros(&[a_in.len(), ncols]);
    match layer {
        Layer::MaxPool { window, stride } | Layer::MinPool { window, stride } => {
            let max = matches!(layer, Layer::MaxPool { .. });
            let mut scratch = Vec::new();
            for_each_pool_window(a_in.shape(), window, stride, &mut scratch, |k, cells| {
                let j = extreme_cell(a_in.data(), cells, max);
                if a_in.data()[j] == 0.0 {
                    count_dropped(cols, k, ncols, diag);
                } else {
                    copy_add_row(low.data_mut(), j, cols.data(), k, ncols);
                }
            });
        }
        Layer::SumPool { window, stride } => {
            let mut scratch = Vec::new();
            for_each_pool_window(a_in.shape(), window, stride, &mut scratch, |k, cells| {
                let z: f64 = cells.iter().map(|&j| a_in.data()[j]).sum();
                if z == 0.0 {
                    count_dropped(cols, k, ncols, diag);
                    return;
                }
                for &j in cells {
                    let ratio = a_in.data()[j] / z;
                    if ratio == 0.0 {
                        continue;
                    }
                    crate::network::axpy_row(low.data_mut(), j, cols.data(), k, ratio, ncols);
                }
            });
        }
        Layer::BranchMax { branches } => {
            let block: usize = a_in.shape()[1..].iter().product();
            let groups = a_in.shape()[0] / branches;
            for q in 0..groups {
                for r in 0..block {
                    let mut win = 0usize;
                    for t in 1..*branches {
                        if a_in.data()[(q * branches + t) * block + r]
                            > a_in.data()[(q * branches + win) * block + r]
                        {
                            win = t;
                        }
                    }
                    let j = (q * branches + win) * block + r;
                    let k = q * block + r;
                    if a_in.data()[j] == 0.0 {
                        count_dropped(cols, k, ncols, diag);
                    } else {
                        copy_add_row(low.data_mut(), j, cols.data(), k, ncols);
                    }
                }
            }
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "pool rule applies to pooling layers, not `{}`",
                layer.kind_name()
            )))
        }
    }
    Ok(low)
}

fn propagate_shift(
    offset: &[isize],
    a_in: &Tensor,
    cols: &Tensor,
    diag: &mut LrpDiagnostics,
) -> Tensor {
    let ncols = cols.shape()[1];
    let mut low = Tensor::zeros(&[a_in.len(), ncols]);
    let mut sourced = vec![false; cols.shape()[0]];
    for_each_shift_pair(a_in.shape(), offset, |dst, src| {
        sourced[dst] = true;
        if a_in.data()[src] == 0.0 {
            count_dropped(cols, dst, ncols, diag);
        } else {
            copy_add_row(low.data_mut(), src, cols.data(), dst, ncols);
        }
    });
    for (dst, &has_src) in sourced.iter().enumerate() {
        if !has_src {
            count_dropped(cols, dst, ncols, diag);
        }
    }
    low
}

fn count_dropped(cols: &Tensor, row: usize, ncols: usize, diag: &mut LrpDiagnostics) {
    for &v in &cols.data()[row * ncols..(row + 1) * ncols] {
        if v != 0.0 {
            diag.zero_denominator_drops += 1;
        }
    }
}

fn copy_add_row(dst: &mut [f64], dst_row: usize, src: &[f64], src_row: usize, ncols: usize) {
    let d = &mut dst[dst_row * ncols..(dst_row + 1) * ncols];
    let s = &src[src_row * ncols..(src_row + 1) * ncols];
    for (dv, &sv) in d.iter_mut().zip(s) {
        *dv += sv;
    }
}

/// Box-constraint propagation through the first weighted layer.
fn propagate_zb(
    layer: &Layer,
    x: &Tensor,
    lower: &Tensor,
    upper: &Tensor,
    cols: &Tensor,
    diag: &mut LrpDiagnostics,
) -> Result<Tensor> {
    let ncols = cols.shape()[1];
    let (weight, stride) = match layer {
        Layer::Dense { weight, .. } => (weight, None),
        Layer::Conv2D { weight, stride, .. } => (weight, Some(*stride)),
        _ => {
            return Err(Error::InvalidArgument(
                "the box-constraint input rule requires the first layer to be dense or conv"
                    .into(),
            ))
        }
    };
    let w_pos = weight.map(|w| w.max(0.0));
    let w_neg = weight.map(|w| w.min(0.0));

    let out_shape = layer.output_shape(x.shape())?;
    let n_out: usize = out_shape.iter().product();
    let apply = |wt: &Tensor, input: &Tensor| -> Tensor {
        let mut out = Tensor::zeros(&out_shape);
        match stride {
            None => dense_forward(wt, None, input.data(), out.data_mut()),
            Some(st) => conv_apply(wt, input, &mut out, st),
        }
        out
    };
    let zx = apply(weight, x);
    let zl = apply(&w_pos, lower);
    let zh = apply(&w_neg, upper);
    let mut z = vec![0.0; n_out];
    for k in 0..n_out {
        z[k] = zx.data()[k] - zl.data()[k] - zh.data()[k];
    }
    let s = stabilize_rows(cols, &z, diag);

    let transpose = |wt: &Tensor| -> Tensor {
        let mut low = Tensor::zeros(&[x.len(), ncols]);
        match stride {
            None => {
                low = matmul(wt, &s).expect("validated shapes");
            }
            Some(st) => conv_transpose_apply(wt, x.shape(), &out_shape, st, &s, &mut low),
        }
        low
    };
    let tx = transpose(weight);
    let tl = transpose(&w_pos);
    let th = transpose(&w_neg);
    let mut low = Tensor::zeros(&[x.len(), ncols]);
    for j in 0..x.len() {
        let (xj, lj, hj) = (x.data()[j], lower.data()[j], upper.data()[j]);
        for c in 0..ncols {
            low.data_mut()[j * ncols + c] = xj * tx.data()[j * ncols + c]
                - lj * tl.data()[j * ncols + c]
                - hj * th.data()[j * ncols + c];
        }
    }
    Ok(low)
}

fn validate_zb(x: &Tensor, lower: &Tensor, upper: &Tensor) -> Result<()> {
    if lower.shape() != x.shape() || upper.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            context: "zb bounds",
            expected: x.shape().to_vec(),
            found: lower.shape().to_vec(),
        });
    }
    for j in 0..x.len() {
        let (lj, hj, xj) = (lower.data()[j], upper.data()[j], x.data()[j]);
        if !(lj < hj) {
            return Err(Error::BoundViolation(format!(
                "degenerate box at feature {j}: lower {lj} must be < upper {hj}"
            )));
        }
        if !(lj <= xj && xj <= hj) {
            return Err(Error::BoundViolation(format!(
                "input feature {j} = {xj} outside [{lj}, {hj}]"
            )));
        }
    }
    Ok(())
}

/// One backward step through `layer` at position `layer_index`.
fn propagate_layer(
    layer: &Layer,
    layer_index: usize,
    a_in: &Tensor,
    cols: Tensor,
    schedule: &GammaSchedule,
    diag: &mut LrpDiagnostics,
) -> Result<Tensor> {
    if layer_index == 0 {
        if let InputRule::ZB { lower, upper } = schedule.input_rule() {
            return propagate_zb(layer, a_in, lower, upper, &cols, diag);
        }
    }
    match layer {
        Layer::ReLU => Ok(cols),
        Layer::Dense { .. } | Layer::Conv2D { .. } | Layer::LinearProjection { .. } => {
            propagate_weighted(layer, a_in, &cols, schedule.gamma_for(layer_index), diag)
        }
        Layer::MaxPool { .. }
        | Layer::MinPool { .. }
        | Layer::SumPool { .. }
        | Layer::BranchMax { .. } => propagate_pool(layer, a_in, &cols, diag),
        Layer::Shift { offset } => Ok(propagate_shift(offset, a_in, &cols, diag)),
    }
}

/// Element budget for one in-flight column block (bounds peak memory when
/// intermediate layers are much wider than the output).
const CHUNK_BUDGET_ELEMS: usize = 16 << 20;

/// Propagates every output unit's relevance to the input, returning the
/// `(d x h)` factor matrix.
pub fn lrp_explain(
    net: &NetworkGraph,
    x: &Tensor,
    schedule: &GammaSchedule,
) -> Result<RelevanceFactors> {
    schedule.validate()?;
    if let InputRule::ZB { lower, upper } = schedule.input_rule() {
        validate_zb(x, lower, upper)?;
        match net.layers().first() {
            Some(Layer::Dense { .. }) | Some(Layer::Conv2D { .. }) => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "the box-constraint input rule requires the first layer to be dense or conv"
                        .into(),
                ))
            }
        }
    }
    let acts = net.forward(x)?;
    let h = net.output_len();
    let d = x.len();
    let top = acts.last().unwrap();

    let max_units = acts.iter().map(Tensor::len).max().unwrap_or(1);
    let chunk = (CHUNK_BUDGET_ELEMS / max_units).clamp(1, h);

    let mut values = Tensor::zeros(&[d, h]);
    let mut diag = LrpDiagnostics::default();
    let mut start = 0;
    while start < h {
        let width = chunk.min(h - start);
        let mut cols = Tensor::zeros(&[h, width]);
        for m in start..start + width {
            cols.data_mut()[m * width + (m - start)] = top.data()[m];
        }
        for (l, layer) in net.layers().iter().enumerate().rev() {
            cols = propagate_layer(layer, l, &acts[l], cols, schedule, &mut diag)?;
        }
        for i in 0..d {
            for c in 0..width {
                values.data_mut()[i * h + start + c] = cols.data()[i * width + c];
            }
        }
        start += width;
    }
    Ok(RelevanceFactors {
        values,
        diagnostics: diag,
    })
}

/// Gamma-rule redistribution through one weighted layer for a single
/// relevance map shaped like the layer output.
pub fn lrp_dense_gamma(
    a: &Tensor,
    layer: &Layer,
    r_upper: &Tensor,
    gamma: f64,
) -> Result<Tensor> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(Error::InvalidArgument("gamma must be non-negative".into()));
    }
    let out_shape = layer.output_shape(a.shape())?;
    if r_upper.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            context: "lrp relevance",
            expected: out_shape,
            found: r_upper.shape().to_vec(),
        });
    }
    let cols = r_upper.reshape(&[r_upper.len(), 1])?;
    let mut diag = LrpDiagnostics::default();
    let low = propagate_weighted(layer, a, &cols, gamma, &mut diag)?;
    low.reshape(a.shape())
}

/// Pool-rule redistribution for a single relevance map.
pub fn lrp_pool(a: &Tensor, layer: &Layer, r_upper: &Tensor) -> Result<Tensor> {
    let out_shape = layer.output_shape(a.shape())?;
    if r_upper.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            context: "lrp relevance",
            expected: out_shape,
            found: r_upper.shape().to_vec(),
        });
    }
    let cols = r_upper.reshape(&[r_upper.len(), 1])?;
    let mut diag = LrpDiagnostics::default();
    let low = propagate_pool(layer, a, &cols, &mut diag)?;
    low.reshape(a.shape())
}

/// Box-constraint redistribution through the first weighted layer for a
/// single relevance map.
pub fn lrp_input_zb(
    x: &Tensor,
    layer: &Layer,
    r_upper: &Tensor,
    bounds: (&Tensor, &Tensor),
) -> Result<Tensor> {
    let (lower, upper) = bounds;
    validate_zb(x, lower, upper)?;
    let out_shape = layer.output_shape(x.shape())?;
    if r_upper.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            context: "lrp relevance",
            expected: out_shape,
            found: r_upper.shape().to_vec(),
        });
    }
    let cols = r_upper.reshape(&[r_upper.len(), 1])?;
    let mut diag = LrpDiagnostics::default();
    let low = propagate_zb(layer, x, lower, upper, &cols, &mut diag)?;
    low.reshape(x.shape())
}
