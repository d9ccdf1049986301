//! Explanation file format.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "method": "bilrp",
//!   "shape_x": [60], "shape_xprime": [60],
//!   "gamma_schedule": {"default": 0.09, "per_layer": {}, "input_rule": "default"},
//!   "factors": {"fx": {"shape": [60, 50], "data": "..."}, "fxprime": {...}},
//!   "dense": null,
//!   "similarity_value": 3.0,
//!   "model_hash": "..."
//! }
//! ```
//!
//! Exactly one of `factors` and `dense` is present. Blobs are little-endian
//! `f64`, base64-encoded.

use super::{ExplanationMeta, Method, PairwiseExplanation};
use crate::codec::TensorRepr;
use crate::error::{Error, Result};
use crate::lrp::{GammaSchedule, InputRule};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const EXPLANATION_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ExplanationFile {
    format_version: u32,
    method: String,
    shape_x: Vec<usize>,
    shape_xprime: Vec<usize>,
    gamma_schedule: Option<ScheduleRepr>,
    factors: Option<FactorsRepr>,
    dense: Option<TensorRepr>,
    similarity_value: Option<f64>,
    model_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct FactorsRepr {
    fx: TensorRepr,
    fxprime: TensorRepr,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    default: f64,
    per_layer: BTreeMap<usize, f64>,
    input_rule: InputRuleRepr,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum InputRuleRepr {
    Default,
    Zb {
        lower: TensorRepr,
        upper: TensorRepr,
    },
}

fn schedule_to_repr(s: &GammaSchedule) -> ScheduleRepr {
    ScheduleRepr {
        default: s.default_gamma(),
        per_layer: s.per_layer().clone(),
        input_rule: match s.input_rule() {
            InputRule::Default => InputRuleRepr::Default,
            InputRule::ZB { lower, upper } => InputRuleRepr::Zb {
                lower: TensorRepr::from_tensor(lower),
                upper: TensorRepr::from_tensor(upper),
            },
        },
    }
}

fn schedule_from_repr(r: ScheduleRepr) -> Result<GammaSchedule> {
    let mut s = GammaSchedule::uniform(r.default);
    for (idx, g) in r.per_layer {
        s = s.with_layer(idx, g);
    }
    if let InputRuleRepr::Zb { lower, upper } = r.input_rule {
        s = s.with_input_rule(InputRule::ZB {
            lower: lower.to_tensor("gamma_schedule.input_rule.lower")?,
            upper: upper.to_tensor("gamma_schedule.input_rule.upper")?,
        });
    }
    s.validate()?;
    Ok(s)
}

/// Serializes an explanation, keeping the factored form when available.
pub fn save_explanation(expl: &PairwiseExplanation) -> Vec<u8> {
    let meta = expl.meta();
    let (factors, dense) = match expl.factors() {
        Some((fx, fxp)) => (
            Some(FactorsRepr {
                fx: TensorRepr::from_tensor(fx),
                fxprime: TensorRepr::from_tensor(fxp),
            }),
            None,
        ),
        None => (None, Some(TensorRepr::from_tensor(&expl.values()))),
    };
    let file = ExplanationFile {
        format_version: EXPLANATION_FORMAT_VERSION,
        method: meta.method.tag().to_string(),
        shape_x: meta.shape_x.clone(),
        shape_xprime: meta.shape_xp.clone(),
        gamma_schedule: meta.gamma.as_ref().map(schedule_to_repr),
        factors,
        dense,
        similarity_value: meta.similarity,
        model_hash: meta.model_hash.clone(),
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("serializable");
    out.push(b'\n');
    out
}

/// Parses an explanation file.
pub fn load_explanation(bytes: &[u8]) -> Result<PairwiseExplanation> {
    let value: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| Error::parse("explanation file", e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| {
            Error::parse("explanation file", "missing or non-integer `format_version`")
        })?;
    if version != EXPLANATION_FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion(version as u32));
    }
    let file: ExplanationFile = serde_json::from_value(value)
        .map_err(|e| Error::parse("explanation file", e.to_string()))?;
    let method = Method::from_tag(&file.method)?;
    let meta = ExplanationMeta {
        method,
        shape_x: file.shape_x,
        shape_xp: file.shape_xprime,
        model_hash: file.model_hash,
        gamma: file.gamma_schedule.map(schedule_from_repr).transpose()?,
        input_ids: None,
        similarity: file.similarity_value,
    };
    match (file.factors, file.dense) {
        (Some(f), None) => PairwiseExplanation::from_factors(
            f.fx.to_tensor("factors.fx")?,
            f.fxprime.to_tensor("factors.fxprime")?,
            meta,
        ),
        (None, Some(d)) => PairwiseExplanation::from_dense(d.to_tensor("dense")?, meta),
        _ => Err(Error::parse(
            "explanation file",
            "exactly one of `factors` and `dense` must be present",
        )),
    }
}
