//! Second-order explanations of similarity scores.
//!
//! The main entry point is [`bilrp`]: it runs first-order relevance
//! propagation on each branch of the similarity model and combines the two
//! `(d x h)` factor matrices into a pairwise explanation
//! `R_{ii'} = sum_m F_x[i, m] F_x'[i', m]` attributing the predicted
//! similarity to pairs of input features.
//!
//! [`bilrp_direct`] propagates the full pairwise relevance array layer by
//! layer instead, one explicit redistribution matrix per layer and branch.
//! It is quadratic in the layer widths and capped at [`DIRECT_UNIT_CAP`]
//! units per layer; it exists as an independent oracle for the factored
//! path, not as a production method.
//!
//! Baselines: [`hessian_product`] (the exact interaction decomposition for
//! positively homogeneous maps, computed as a sum of outer products of
//! gradient-times-input vectors), [`saliency`] and [`curvature`].

mod format;
#[cfg(test)]
mod tests;

pub use format::{load_explanation, save_explanation, EXPLANATION_FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::lrp::{lrp_explain, GammaSchedule, InputRule};
use crate::network::{input_jacobian, model_hash, Layer, SimilarityModel};
use crate::tensor::{matmul, outer_accumulate, Tensor};

/// Explanation method tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    BiLrp,
    HessianProduct,
    Saliency,
    Curvature,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::BiLrp => "bilrp",
            Method::HessianProduct => "hp",
            Method::Saliency => "saliency",
            Method::Curvature => "curvature",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Ok(match tag {
            "bilrp" => Method::BiLrp,
            "hp" => Method::HessianProduct,
            "saliency" => Method::Saliency,
            "curvature" => Method::Curvature,
            other => return Err(Error::UnsupportedKind(other.to_string())),
        })
    }
}

/// Provenance carried alongside an explanation.
#[derive(Clone, Debug)]
pub struct ExplanationMeta {
    pub method: Method,
    pub shape_x: Vec<usize>,
    pub shape_xp: Vec<usize>,
    pub model_hash: Option<String>,
    pub gamma: Option<GammaSchedule>,
    pub input_ids: Option<(String, String)>,
    pub similarity: Option<f64>,
}

#[derive(Clone, Debug)]
enum Body {
    Dense(Tensor),
    Factored { fx: Tensor, fxp: Tensor },
}

/// A `(d x d')` attribution of a similarity score to feature pairs.
///
/// Explanations produced by the factored path keep the two `(d x h)` factor
/// blocks (much smaller than `d x d'` for large inputs); the dense matrix is
/// materialized on demand.
#[derive(Clone, Debug)]
pub struct PairwiseExplanation {
    body: Body,
    meta: ExplanationMeta,
}

impl PairwiseExplanation {
    pub fn from_dense(values: Tensor, meta: ExplanationMeta) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::InvalidArgument(
                "a pairwise explanation must be rank-2".into(),
            ));
        }
        Ok(PairwiseExplanation {
            body: Body::Dense(values),
            meta,
        })
    }

    pub fn from_factors(fx: Tensor, fxp: Tensor, meta: ExplanationMeta) -> Result<Self> {
        if fx.rank() != 2 || fxp.rank() != 2 || fx.shape()[1] != fxp.shape()[1] {
            return Err(Error::InvalidArgument(
                "factors must be rank-2 with a shared feature dimension".into(),
            ));
        }
        Ok(PairwiseExplanation {
            body: Body::Factored { fx, fxp },
            meta,
        })
    }

    pub fn meta(&self) -> &ExplanationMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut ExplanationMeta {
        &mut self.meta
    }

    /// `(d, d')`.
    pub fn dims(&self) -> (usize, usize) {
        match &self.body {
            Body::Dense(t) => (t.shape()[0], t.shape()[1]),
            Body::Factored { fx, fxp } => (fx.shape()[0], fxp.shape()[0]),
        }
    }

    pub fn is_factored(&self) -> bool {
        matches!(self.body, Body::Factored { .. })
    }

    pub fn factors(&self) -> Option<(&Tensor, &Tensor)> {
        match &self.body {
            Body::Factored { fx, fxp } => Some((fx, fxp)),
            Body::Dense(_) => None,
        }
    }

    /// The dense `(d x d')` matrix, materializing the factor product if
    /// needed. The reduction over the feature dimension runs in a fixed
    /// order, so results are deterministic.
    pub fn values(&self) -> Tensor {
        match &self.body {
            Body::Dense(t) => t.clone(),
            Body::Factored { fx, fxp } => {
                matmul(fx, &fxp.transpose().expect("rank-2 factor")).expect("conforming factors")
            }
        }
    }

    /// Total attributed relevance. For factored explanations this uses
    /// `sum_m (sum_i F_x) (sum_i' F_x')` and never materializes the dense
    /// matrix.
    pub fn total(&self) -> f64 {
        match &self.body {
            Body::Dense(t) => t.sum(),
            Body::Factored { fx, fxp } => {
                let h = fx.shape()[1];
                let col_sums = |f: &Tensor| -> Vec<f64> {
                    let (n, h) = (f.shape()[0], f.shape()[1]);
                    let mut s = vec![0.0; h];
                    for i in 0..n {
                        for m in 0..h {
                            s[m] += f.data()[i * h + m];
                        }
                    }
                    s
                };
                let sx = col_sums(fx);
                let sxp = col_sums(fxp);
                (0..h).map(|m| sx[m] * sxp[m]).sum()
            }
        }
    }
}

fn base_meta(method: Method, model: &SimilarityModel, x: &Tensor, xp: &Tensor) -> ExplanationMeta {
    ExplanationMeta {
        method,
        shape_x: x.shape().to_vec(),
        shape_xp: xp.shape().to_vec(),
        model_hash: Some(model_hash(model.graph())),
        gamma: None,
        input_ids: None,
        similarity: None,
    }
}

/// Factored second-order explanation: relevance propagation per branch, then
/// the factor product over the feature dimension.
pub fn bilrp(
    model: &SimilarityModel,
    x: &Tensor,
    xp: &Tensor,
    schedule: &GammaSchedule,
) -> Result<PairwiseExplanation> {
    let net = model.graph();
    let fx = lrp_explain(net, x, schedule)?;
    let fxp = lrp_explain(net, xp, schedule)?;
    let mut meta = base_meta(Method::BiLrp, model, x, xp);
    meta.gamma = Some(schedule.clone());
    meta.similarity = Some(model.similarity(x, xp)?);
    PairwiseExplanation::from_factors(fx.into_values(), fxp.into_values(), meta)
}

/// Maximum units per layer (input and output included) for [`bilrp_direct`].
pub const DIRECT_UNIT_CAP: usize = 64;

/// Direct (unfactored) second-order propagation.
///
/// Starts from `R_{kk'} = a_k a_{k'} [k = k']` at the top and pulls the full
/// pairwise array through one redistribution matrix per layer and branch.
/// Results match [`bilrp`] up to floating-point reassociation.
pub fn bilrp_direct(
    model: &SimilarityModel,
    x: &Tensor,
    xp: &Tensor,
    schedule: &GammaSchedule,
) -> Result<PairwiseExplanation> {
    schedule.validate()?;
    let net = model.graph();
    if !matches!(schedule.input_rule(), InputRule::Default)
        && !matches!(
            net.layers().first(),
            Some(Layer::Dense { .. }) | Some(Layer::Conv2D { .. })
        )
    {
        return Err(Error::InvalidArgument(
            "the box-constraint input rule requires the first layer to be dense or conv".into(),
        ));
    }
    for l in 0..=net.layers().len() {
        let units: usize = net.shape_at(l).iter().product();
        if units > DIRECT_UNIT_CAP {
            return Err(Error::SizeCapExceeded {
                units,
                cap: DIRECT_UNIT_CAP,
            });
        }
    }
    let acts_x = net.forward(x)?;
    let acts_xp = net.forward(xp)?;
    let h = net.output_len();

    let ax = acts_x.last().unwrap();
    let axp = acts_xp.last().unwrap();
    let mut pair = Tensor::zeros(&[h, h]);
    for k in 0..h {
        pair.data_mut()[k * h + k] = ax.data()[k] * axp.data()[k];
    }

    for (l, layer) in net.layers().iter().enumerate().rev() {
        let px = redistribution_matrix(layer, l, &acts_x[l], schedule)?;
        let pxp = redistribution_matrix(layer, l, &acts_xp[l], schedule)?;
        pair = matmul(&matmul(&px, &pair)?, &pxp.transpose()?)?;
    }
    let mut meta = base_meta(Method::BiLrp, model, x, xp);
    meta.gamma = Some(schedule.clone());
    meta.similarity = Some(ax.dot(axp)?);
    PairwiseExplanation::from_dense(pair, meta)
}

/// Explicit `(n_in x n_out)` redistribution matrix for one layer and branch:
/// column `k` holds the shares of `R_k` assigned to each input unit. Columns
/// with an exactly-zero denominator are zero (dropped relevance).
fn redistribution_matrix(
    layer: &Layer,
    layer_index: usize,
    a_in: &Tensor,
    schedule: &GammaSchedule,
) -> Result<Tensor> {
    let n_in = a_in.len();
    let out_shape = layer.output_shape(a_in.shape())?;
    let n_out: usize = out_shape.iter().product();

    if matches!(layer, Layer::ReLU) {
        let mut p = Tensor::zeros(&[n_in, n_out]);
        for j in 0..n_in {
            p.data_mut()[j * n_out + j] = 1.0;
        }
        return Ok(p);
    }

    // Contribution matrix C[j, k]; the column-normalized form is the
    // redistribution matrix.
    let mut contrib = Tensor::zeros(&[n_in, n_out]);
    let zb = layer_index == 0 && !matches!(schedule.input_rule(), InputRule::Default);
    match layer {
        Layer::Dense { weight, .. } | Layer::LinearProjection { weight } => {
            if zb {
                let mut entries = Vec::with_capacity(n_in * n_out);
                for j in 0..n_in {
                    for k in 0..n_out {
                        entries.push((j, k, weight.data()[j * n_out + k]));
                    }
                }
                apply_zb_entries(&entries, a_in, schedule, &mut contrib)?;
            } else {
                let gamma = schedule.gamma_for(layer_index);
                for j in 0..n_in {
                    let aj = a_in.data()[j];
                    for k in 0..n_out {
                        let w = weight.data()[j * n_out + k];
                        contrib.data_mut()[j * n_out + k] = aj * (w + gamma * w.max(0.0));
                    }
                }
            }
        }
        Layer::Conv2D { weight, stride, .. } => {
            let gamma = schedule.gamma_for(layer_index);
            let ws = weight.shape();
            let (c_out, c_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
            let (hh, ww) = (a_in.shape()[1], a_in.shape()[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let mut entries: Vec<(usize, usize, f64)> = Vec::new();
            for co in 0..c_out {
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let w = weight.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                            crate::network::conv_spatial(
                                (hh, ww),
                                (oh, ow),
                                *stride,
                                (ky, kx),
                                |osp, isp| {
                                    entries.push((ci * hh * ww + isp, co * oh * ow + osp, w));
                                },
                            );
                        }
                    }
                }
            }
            if zb {
                apply_zb_entries(&entries, a_in, schedule, &mut contrib)?;
            } else {
                for (j, k, w) in entries {
                    contrib.data_mut()[j * n_out + k] +=
                        a_in.data()[j] * (w + gamma * w.max(0.0));
                }
            }
        }
        Layer::MaxPool { window, stride } | Layer::MinPool { window, stride } => {
            let max = matches!(layer, Layer::MaxPool { .. });
            let mut scratch = Vec::new();
            crate::network::for_each_pool_window(
                a_in.shape(),
                window,
                stride,
                &mut scratch,
                |k, cells| {
                    let j = crate::network::extreme_cell(a_in.data(), cells, max);
                    contrib.data_mut()[j * n_out + k] = a_in.data()[j];
                },
            );
        }
        Layer::SumPool { window, stride } => {
            let mut scratch = Vec::new();
            crate::network::for_each_pool_window(
                a_in.shape(),
                window,
                stride,
                &mut scratch,
                |k, cells| {
                    for &j in cells {
                        contrib.data_mut()[j * n_out + k] += a_in.data()[j];
                    }
                },
            );
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
                    contrib.data_mut()[j * n_out + q * block + r] = a_in.data()[j];
                }
            }
        }
        Layer::Shift { offset } => {
            crate::network::for_each_shift_pair(a_in.shape(), offset, |dst, src| {
                contrib.data_mut()[src * n_out + dst] = a_in.data()[src];
            });
        }
        Layer::ReLU => unreachable!(),
    }

    // Column-normalize; zero columns drop their relevance.
    let mut p = contrib;
    for k in 0..n_out {
        let z: f64 = (0..n_in).map(|j| p.data()[j * n_out + k]).sum();
        if z == 0.0 {
            for j in 0..n_in {
                p.data_mut()[j * n_out + k] = 0.0;
            }
        } else {
            for j in 0..n_in {
                p.data_mut()[j * n_out + k] /= z;
            }
        }
    }
    Ok(p)
}

fn apply_zb_entries(
    entries: &[(usize, usize, f64)],
    x: &Tensor,
    schedule: &GammaSchedule,
    contrib: &mut Tensor,
) -> Result<()> {
    let InputRule::ZB { lower, upper } = schedule.input_rule() else {
        unreachable!()
    };
    let n_out = contrib.shape()[1];
    for &(j, k, w) in entries {
        contrib.data_mut()[j * n_out + k] +=
            x.data()[j] * w - lower.data()[j] * w.max(0.0) - upper.data()[j] * w.min(0.0);
    }
    Ok(())
}

/// Interaction-term baseline: `R_{ii'} = [d^2 y]_{ii'} x_i x'_{i'}`, computed
/// as a sum over feature units of outer products of gradient-times-input
/// vectors. Requires a zero-bias (positively homogeneous) model.
pub fn hessian_product(
    model: &SimilarityModel,
    x: &Tensor,
    xp: &Tensor,
) -> Result<PairwiseExplanation> {
    require_zero_bias(model, "hessian_product")?;
    let net = model.graph();
    let acts_x = net.forward(x)?;
    let acts_xp = net.forward(xp)?;
    let jx = input_jacobian(net, &acts_x)?;
    let jxp = input_jacobian(net, &acts_xp)?;
    let h = net.output_len();
    let (d, dp) = (x.len(), xp.len());

    let mut acc = Tensor::zeros(&[d, dp]);
    let mut u = Tensor::zeros(&[d]);
    let mut v = Tensor::zeros(&[dp]);
    for m in 0..h {
        for i in 0..d {
            u.data_mut()[i] = jx.data()[i * h + m] * x.data()[i];
        }
        for i in 0..dp {
            v.data_mut()[i] = jxp.data()[i * h + m] * xp.data()[i];
        }
        outer_accumulate(&u, &v, &mut acc)?;
    }
    let mut meta = base_meta(Method::HessianProduct, model, x, xp);
    meta.similarity = Some(model.similarity(x, xp)?);
    PairwiseExplanation::from_dense(acc, meta)
}

/// Model-free baseline: `R_{ii'} = (x_i x'_{i'})^2`.
pub fn saliency(x: &Tensor, xp: &Tensor) -> PairwiseExplanation {
    let (d, dp) = (x.len(), xp.len());
    let mut out = Tensor::zeros(&[d, dp]);
    for i in 0..d {
        for ip in 0..dp {
            let v = x.data()[i] * xp.data()[ip];
            out.data_mut()[i * dp + ip] = v * v;
        }
    }
    PairwiseExplanation {
        body: Body::Dense(out),
        meta: ExplanationMeta {
            method: Method::Saliency,
            shape_x: x.shape().to_vec(),
            shape_xp: xp.shape().to_vec(),
            model_hash: None,
            gamma: None,
            input_ids: None,
            similarity: None,
        },
    }
}

/// Squared-Hessian baseline: `R_{ii'} = ([d^2 y]_{ii'})^2`, with the Hessian
/// computed exactly as the gradient outer-product sum.
pub fn curvature(
    model: &SimilarityModel,
    x: &Tensor,
    xp: &Tensor,
) -> Result<PairwiseExplanation> {
    require_zero_bias(model, "curvature")?;
    let net = model.graph();
    let acts_x = net.forward(x)?;
    let acts_xp = net.forward(xp)?;
    let jx = input_jacobian(net, &acts_x)?;
    let jxp = input_jacobian(net, &acts_xp)?;
    let hess = matmul(&jx, &jxp.transpose()?)?;
    let squared = hess.map(|v| v * v);
    let mut meta = base_meta(Method::Curvature, model, x, xp);
    meta.similarity = Some(model.similarity(x, xp)?);
    PairwiseExplanation::from_dense(squared, meta)
}

fn require_zero_bias(model: &SimilarityModel, what: &str) -> Result<()> {
    if !model.graph().zero_bias() {
        return Err(Error::InvalidArgument(format!(
            "{what} requires a zero-bias (positively homogeneous) model"
        )));
    }
    Ok(())
}

/// Disjoint, exhaustive grouping of feature indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    groups: Vec<Vec<usize>>,
}

impl Partition {
    /// Builds a partition; groups must be non-empty and pairwise disjoint.
    /// Exhaustiveness is checked against a dimension at use time.
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for g in &groups {
            if g.is_empty() {
                return Err(Error::InvalidPartition("empty group".into()));
            }
            for &i in g {
                if !seen.insert(i) {
                    return Err(Error::InvalidPartition(format!(
                        "index {i} appears in more than one group"
                    )));
                }
            }
        }
        Ok(Partition { groups })
    }

    pub fn singletons(d: usize) -> Self {
        Partition {
            groups: (0..d).map(|i| vec![i]).collect(),
        }
    }

    /// Contiguous blocks of `block` indices; the trailing block may be short.
    pub fn contiguous_blocks(d: usize, block: usize) -> Result<Self> {
        if block == 0 {
            return Err(Error::InvalidPartition("block size must be positive".into()));
        }
        let groups = (0..d)
            .step_by(block)
            .map(|start| (start..(start + block).min(d)).collect())
            .collect();
        Ok(Partition { groups })
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Checks that the groups exactly cover `0..d`.
    pub fn validate_for(&self, d: usize) -> Result<()> {
        let covered: usize = self.groups.iter().map(Vec::len).sum();
        if covered != d {
            return Err(Error::InvalidPartition(format!(
                "groups cover {covered} of {d} indices"
            )));
        }
        if let Some(&bad) = self.groups.iter().flatten().find(|&&i| i >= d) {
            return Err(Error::InvalidPartition(format!(
                "index {bad} out of range for dimension {d}"
            )));
        }
        Ok(())
    }
}

/// Sums a pairwise explanation over two partitions, producing the
/// `(|p| x |p'|)` coarse-grained matrix.
///
/// Dense explanations are accumulated entry by entry in group order. For
/// factored explanations the factor rows are pooled first and then
/// multiplied, which never materializes the `d x d'` matrix; the two routes
/// agree up to floating-point reassociation.
pub fn coarse_grain(
    r: &PairwiseExplanation,
    p: &Partition,
    pp: &Partition,
) -> Result<PairwiseExplanation> {
    let (d, dp) = r.dims();
    p.validate_for(d)?;
    pp.validate_for(dp)?;
    let out = match &r.body {
        Body::Dense(dense) => {
            let mut out = Tensor::zeros(&[p.len(), pp.len()]);
            for (gi, group_a) in p.groups().iter().enumerate() {
                for (gj, group_b) in pp.groups().iter().enumerate() {
                    let mut acc = 0.0;
                    for &i in group_a {
                        for &ip in group_b {
                            acc += dense.data()[i * dp + ip];
                        }
                    }
                    out.data_mut()[gi * pp.len() + gj] = acc;
                }
            }
            out
        }
        Body::Factored { fx, fxp } => {
            let pool_rows = |f: &Tensor, part: &Partition| {
                let h = f.shape()[1];
                let mut out = Tensor::zeros(&[part.len(), h]);
                for (gi, group) in part.groups().iter().enumerate() {
                    for &i in group {
                        for m in 0..h {
                            out.data_mut()[gi * h + m] += f.data()[i * h + m];
                        }
                    }
                }
                out
            };
            let fa = pool_rows(fx, p);
            let fb = pool_rows(fxp, pp);
            matmul(&fa, &fb.transpose()?)?
        }
    };
    PairwiseExplanation::from_dense(out, r.meta.clone())
}

/// Mean cosine similarity between flattened explanations and ground truths.
/// All-zero explanations contribute 0; all-zero ground truths are rejected.
pub fn acs(explanations: &[PairwiseExplanation], ground_truths: &[Tensor]) -> Result<f64> {
    if explanations.is_empty() {
        return Err(Error::InvalidArgument(
            "acs requires at least one explanation".into(),
        ));
    }
    if explanations.len() != ground_truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} explanations vs {} ground truths",
            explanations.len(),
            ground_truths.len()
        )));
    }
    let mut total = 0.0;
    for (expl, gt) in explanations.iter().zip(ground_truths) {
        let r = expl.values();
        if r.len() != gt.len() {
            return Err(Error::ShapeMismatch {
                context: "acs",
                expected: gt.shape().to_vec(),
                found: r.shape().to_vec(),
            });
        }
        let gt_norm = gt.dot(gt)?.sqrt();
        if gt_norm == 0.0 {
            return Err(Error::InvalidArgument(
                "acs ground truth must be nonzero".into(),
            ));
        }
        let r_norm = r.dot(&r)?.sqrt();
        if r_norm == 0.0 {
            continue;
        }
        total += r.dot(gt)? / (r_norm * gt_norm);
    }
    Ok(total / explanations.len() as f64)
}
