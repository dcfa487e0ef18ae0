use serde::{Deserialize, Serialize};

use super::CsprError;
use crate::config::TrainConfig;
use crate::corpus::{Modality, VideoRecord};
use crate::nn::{self, linear_specs, mlp_specs, ParamSpec};
use crate::numerics::{ParamStore, ParamVars, Tape, Tensor, Var};

/// A video's narrative vector and its three modality-aware projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticPrimitive {
    pub s: Vec<f64>,
    pub s_v: Vec<f64>,
    pub s_t: Vec<f64>,
    pub s_a: Vec<f64>,
}

impl SemanticPrimitive {
    pub fn component(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Visual => &self.s_v,
            Modality::Text => &self.s_t,
            Modality::Audio => &self.s_a,
        }
    }
}

pub fn param_specs(cfg: &TrainConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    v.extend(linear_specs("cspr.in_v", cfg.d_v, cfg.d_attn, true));
    v.extend(linear_specs("cspr.in_t", cfg.d_t, cfg.d_attn, true));
    v.extend(linear_specs("cspr.in_a", cfg.d_a, cfg.d_attn, true));
    v.extend(linear_specs("cspr.q", cfg.d_attn, cfg.d_attn, false));
    v.extend(linear_specs("cspr.k", cfg.d_attn, cfg.d_attn, false));
    v.extend(linear_specs("cspr.v", cfg.d_attn, cfg.d_attn, false));
    v.extend(mlp_specs("cspr.sem", cfg.d_attn, cfg.d_s, cfg.d_s));
    v.extend(linear_specs("cspr.dec_v", cfg.d_s, cfg.d_s, false));
    v.extend(linear_specs("cspr.dec_t", cfg.d_s, cfg.d_s, false));
    v.extend(linear_specs("cspr.dec_a", cfg.d_s, cfg.d_s, false));
    v
}

/// Records the parser on `tape` for a batch of rows.
///
/// The projected text feature queries a two-token sequence made of the
/// projected visual and audio features; the attention output is added to
/// the query token and mapped to the primitive. Returns `[s, s_v, s_t, s_a]`.
pub fn parse_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &TrainConfig,
    f_v: Var,
    f_t: Var,
    f_a: Var,
) -> Result<[Var; 4], CsprError> {
    let tv = nn::linear(tape, vars, "cspr.in_v", f_v, true)?;
    let tt = nn::linear(tape, vars, "cspr.in_t", f_t, true)?;
    let ta = nn::linear(tape, vars, "cspr.in_a", f_a, true)?;
    let n = tape.value(tt).rows();
    let q = nn::linear(tape, vars, "cspr.q", tt, false)?;
    let pair = tape.concat_cols(&[tv, ta])?;
    let tokens = tape.reshape(pair, &[2 * n, cfg.d_attn])?;
    let k = nn::linear(tape, vars, "cspr.k", tokens, false)?;
    let v = nn::linear(tape, vars, "cspr.v", tokens, false)?;
    let scores = tape.group_dot(q, k, 2)?;
    let scores = tape.scale(scores, 1.0 / (cfg.d_attn as f64).sqrt())?;
    let weights = tape.row_softmax(scores)?;
    let attended = tape.group_weighted_sum(weights, v, 2)?;
    let h = tape.add(tt, attended)?;
    let s = nn::mlp(tape, vars, "cspr.sem", h)?;
    let s_v = nn::linear(tape, vars, "cspr.dec_v", s, false)?;
    let s_t = nn::linear(tape, vars, "cspr.dec_t", s, false)?;
    let s_a = nn::linear(tape, vars, "cspr.dec_a", s, false)?;
    Ok([s, s_v, s_t, s_a])
}

fn stack(rows: &[&[f64]], dim: usize, what: &'static str) -> Result<Tensor, CsprError> {
    for r in rows {
        if r.len() != dim {
            return Err(CsprError::Dimension {
                what,
                expected: dim,
                actual: r.len(),
            });
        }
    }
    Ok(Tensor::from_rows(rows)?)
}

/// Primitives for a batch of records, evaluated on a throwaway tape.
pub fn parse_batch(
    params: &ParamStore,
    cfg: &TrainConfig,
    records: &[&VideoRecord],
) -> Result<Vec<SemanticPrimitive>, CsprError> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let fv: Vec<&[f64]> = records.iter().map(|r| r.visual.as_slice()).collect();
    let ft: Vec<&[f64]> = records.iter().map(|r| r.textual.as_slice()).collect();
    let fa: Vec<&[f64]> = records.iter().map(|r| r.audio.as_slice()).collect();
    parse_rows(params, cfg, &fv, &ft, &fa)
}

fn parse_rows(
    params: &ParamStore,
    cfg: &TrainConfig,
    fv: &[&[f64]],
    ft: &[&[f64]],
    fa: &[&[f64]],
) -> Result<Vec<SemanticPrimitive>, CsprError> {
    let mut tape = Tape::new();
    let vars = nn::bind_prefixed(&mut tape, params, &["cspr."]);
    let v = tape.constant(stack(fv, cfg.d_v, "visual feature")?);
    let t = tape.constant(stack(ft, cfg.d_t, "text feature")?);
    let a = tape.constant(stack(fa, cfg.d_a, "audio feature")?);
    let out = parse_on_tape(&mut tape, &vars, cfg, v, t, a)?;
    let vals: Vec<&Tensor> = out.iter().map(|x| tape.value(*x)).collect();
    Ok((0..fv.len())
        .map(|i| SemanticPrimitive {
            s: vals[0].row(i).to_vec(),
            s_v: vals[1].row(i).to_vec(),
            s_t: vals[2].row(i).to_vec(),
            s_a: vals[3].row(i).to_vec(),
        })
        .collect())
}

/// Primitive of a single video.
pub fn parse_semantic(
    params: &ParamStore,
    cfg: &TrainConfig,
    f_v: &[f64],
    f_t: &[f64],
    f_a: &[f64],
) -> Result<SemanticPrimitive, CsprError> {
    Ok(parse_rows(params, cfg, &[f_v], &[f_t], &[f_a])?.remove(0))
}
