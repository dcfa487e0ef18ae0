//! Parameter layout helpers and the two layer shapes every stage uses.

use rand::Rng;

use crate::numerics::{NumericsError, ParamStore, ParamVars, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Xavier,
    Zeros,
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// `{prefix}.w` (`[input x output]`) and, with `bias`, `{prefix}.b`.
pub fn linear_specs(prefix: &str, input: usize, output: usize, bias: bool) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::new(format!("{prefix}.w"), &[input, output], Init::Xavier)];
    if bias {
        v.push(ParamSpec::new(format!("{prefix}.b"), &[output], Init::Zeros));
    }
    v
}

/// Two affine layers with a tanh in between.
pub fn mlp_specs(prefix: &str, input: usize, hidden: usize, output: usize) -> Vec<ParamSpec> {
    let mut v = linear_specs(&format!("{prefix}.l1"), input, hidden, true);
    v.extend(linear_specs(&format!("{prefix}.l2"), hidden, output, true));
    v
}

/// Initializes every spec in order from one RNG stream.
pub fn init_store<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> ParamStore {
    let mut store = ParamStore::new();
    for s in specs {
        match s.init {
            Init::Xavier => store.init_xavier(&s.name, s.shape[0], s.shape[1], rng),
            Init::Zeros => store.init_zeros(&s.name, &s.shape),
            Init::Uniform(b) => store.init_uniform(&s.name, &s.shape, b, rng),
        }
    }
    store
}

pub fn linear(tape: &mut Tape, vars: &ParamVars, prefix: &str, x: Var, bias: bool) -> Result<Var, NumericsError> {
    let w = vars.get(&format!("{prefix}.w"))?;
    let b = if bias {
        Some(vars.get(&format!("{prefix}.b"))?)
    } else {
        None
    };
    tape.linear(x, w, b)
}

pub fn mlp(tape: &mut Tape, vars: &ParamVars, prefix: &str, x: Var) -> Result<Var, NumericsError> {
    let h = linear(tape, vars, &format!("{prefix}.l1"), x, true)?;
    let h = tape.tanh(h)?;
    linear(tape, vars, &format!("{prefix}.l2"), h, true)
}

/// Binds only the parameters whose names start with one of `prefixes`.
pub fn bind_prefixed(tape: &mut Tape, store: &ParamStore, prefixes: &[&str]) -> ParamVars {
    let mut sub = ParamStore::new();
    for (k, v) in store.iter() {
        if prefixes.iter().any(|p| k.starts_with(p)) {
            sub.insert(k.clone(), v.clone());
        }
    }
    tape.bind(&sub)
}
