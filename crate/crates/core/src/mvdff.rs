//! Report-guided enhancement, raw-feature consistency view, gated fusion and
//! the classification head.

use crate::config::TrainConfig;
use crate::corpus::Modality;
use crate::nn::{self, linear_specs, mlp_specs, ParamSpec};
use crate::numerics::{NumericsError, ParamVars, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum MvdffError {
    #[error("{modality} feature dimension {dim} is not divisible by {tokens} tokens")]
    Indivisible {
        modality: &'static str,
        dim: usize,
        tokens: usize,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub fn enh_prefix(m: Modality) -> String {
    format!("mvdff.enh_{}", m.key())
}

fn dim(cfg: &TrainConfig, m: Modality) -> usize {
    cfg.feature_dims().get(m)
}

fn chunk(cfg: &TrainConfig, m: Modality) -> Result<usize, MvdffError> {
    let d = dim(cfg, m);
    if cfg.tokens == 0 || d % cfg.tokens != 0 {
        return Err(MvdffError::Indivisible {
            modality: m.key(),
            dim: d,
            tokens: cfg.tokens,
        });
    }
    Ok(d / cfg.tokens)
}

/// Enhancement, consistency and gate parameters.
pub fn fusion_specs(cfg: &TrainConfig) -> Result<Vec<ParamSpec>, MvdffError> {
    let mut v = Vec::new();
    for m in Modality::ALL {
        let p = enh_prefix(m);
        let c = chunk(cfg, m)?;
        v.extend(linear_specs(&format!("{p}.q"), cfg.d_align, cfg.d_attn, false));
        v.extend(linear_specs(&format!("{p}.k"), c, cfg.d_attn, false));
        v.extend(linear_specs(&format!("{p}.v"), c, cfg.d_attn, false));
        v.extend(linear_specs(&format!("{p}.o"), cfg.d_attn, dim(cfg, m), false));
        v.extend(mlp_specs(&format!("{p}.mlp"), dim(cfg, m), cfg.d_h, cfg.d_h));
    }
    for m in Modality::ALL {
        v.extend(linear_specs(&format!("mvdff.cons.proj_{}", m.key()), dim(cfg, m), cfg.d_c, false));
    }
    v.extend(mlp_specs("mvdff.cons.mlp", 3 * cfg.d_c + 3, cfg.d_h, cfg.d_h));
    v.extend(mlp_specs("mvdff.gate.mlp", cfg.d_h, cfg.d_h, 3 * cfg.d_h));
    Ok(v)
}

/// Concatenation baseline: raw and parsing features through one tanh layer.
pub fn concat_specs(cfg: &TrainConfig) -> Vec<ParamSpec> {
    let input = cfg.d_v + cfg.d_t + cfg.d_a + 3 * cfg.d_p;
    linear_specs("concat.fuse", input, 3 * cfg.d_h, true)
}

pub fn classifier_specs(cfg: &TrainConfig) -> Vec<ParamSpec> {
    mlp_specs("cls.mlp", 3 * cfg.d_h, cfg.d_h, 1)
}

/// `f + W_o attention(q, tokens(f))` where `query` is the projected parsing
/// feature and `f` is split into `tokens` equal chunks. With `query = None`
/// the attention term is dropped and `f` passes unchanged.
pub fn enhanced_feature(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &TrainConfig,
    m: Modality,
    f: Var,
    query: Option<Var>,
) -> Result<Var, MvdffError> {
    let Some(query) = query else { return Ok(f) };
    let p = enh_prefix(m);
    let c = chunk(cfg, m)?;
    let n = tape.value(f).rows();
    let tokens = tape.reshape(f, &[n * cfg.tokens, c])?;
    let q = nn::linear(tape, vars, &format!("{p}.q"), query, false)?;
    let k = nn::linear(tape, vars, &format!("{p}.k"), tokens, false)?;
    let v = nn::linear(tape, vars, &format!("{p}.v"), tokens, false)?;
    let scores = tape.group_dot(q, k, cfg.tokens)?;
    let scores = tape.scale(scores, 1.0 / (cfg.d_attn as f64).sqrt())?;
    let w = tape.row_softmax(scores)?;
    let att = tape.group_weighted_sum(w, v, cfg.tokens)?;
    let back = nn::linear(tape, vars, &format!("{p}.o"), att, false)?;
    Ok(tape.add(f, back)?)
}

/// Enhanced view `h_m` of one modality, `n x d_h`.
pub fn enhance(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &TrainConfig,
    m: Modality,
    f: Var,
    query: Option<Var>,
) -> Result<Var, MvdffError> {
    let fh = enhanced_feature(tape, vars, cfg, m, f, query)?;
    Ok(nn::mlp(tape, vars, &format!("{}.mlp", enh_prefix(m)), fh)?)
}

/// Consistency view `n x d_h` and the pairwise cosines `n x 3` ordered
/// (text-visual, text-audio, visual-audio).
pub fn consistency(tape: &mut Tape, vars: &ParamVars, raw: [Var; 3]) -> Result<(Var, Var), MvdffError> {
    let mut proj = Vec::with_capacity(3);
    for m in Modality::ALL {
        proj.push(nn::linear(tape, vars, &format!("mvdff.cons.proj_{}", m.key()), raw[m.index()], false)?);
    }
    let (v, t, a) = (proj[0], proj[1], proj[2]);
    let s_tv = tape.row_cosine(t, v)?;
    let s_ta = tape.row_cosine(t, a)?;
    let s_va = tape.row_cosine(v, a)?;
    let sims = tape.concat_cols(&[s_tv, s_ta, s_va])?;
    let x = tape.concat_cols(&[v, t, a, sims])?;
    let h = nn::mlp(tape, vars, "mvdff.cons.mlp", x)?;
    Ok((h, sims))
}

/// Gated mix of the enhanced views and the consistency view.
///
/// The gate reads the element-wise mean of the four `d_h` views; `h_cons` is
/// tiled three times to match the concatenated enhanced views. Returns
/// `(h_final, g)`.
pub fn gate_fuse(tape: &mut Tape, vars: &ParamVars, enh: [Var; 3], cons: Var) -> Result<(Var, Var), MvdffError> {
    let mut pool = tape.add(enh[0], enh[1])?;
    pool = tape.add(pool, enh[2])?;
    pool = tape.add(pool, cons)?;
    let pool = tape.scale(pool, 0.25)?;
    let logits = nn::mlp(tape, vars, "mvdff.gate.mlp", pool)?;
    let g = tape.sigmoid(logits)?;
    let e = tape.concat_cols(&enh)?;
    let tiled = tape.concat_cols(&[cons, cons, cons])?;
    let diff = tape.sub(e, tiled)?;
    let gated = tape.mul(g, diff)?;
    Ok((tape.add(tiled, gated)?, g))
}

/// Concatenation baseline representation, `n x 3 d_h`.
pub fn concat_fuse(tape: &mut Tape, vars: &ParamVars, raw: [Var; 3], parsing: [Var; 3]) -> Result<Var, MvdffError> {
    let x = tape.concat_cols(&[raw[0], raw[1], raw[2], parsing[0], parsing[1], parsing[2]])?;
    let h = nn::linear(tape, vars, "concat.fuse", x, true)?;
    Ok(tape.tanh(h)?)
}

/// Probability of the fake class, `n x 1`.
pub fn classify(tape: &mut Tape, vars: &ParamVars, h_final: Var) -> Result<Var, MvdffError> {
    let logit = nn::mlp(tape, vars, "cls.mlp", h_final)?;
    Ok(tape.sigmoid(logit)?)
}
