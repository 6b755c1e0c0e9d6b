//! Soft prompts, the frozen text-encoder stand-in, and the visual disentanglers.
//!
//! The text encoder mean-pools prompt tokens, applies a fixed seeded
//! projection and L2-normalizes. It is never trained; gradients flow through
//! it into the context vectors and primitive tokens.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::CompositionSpace;
use crate::error::{DuplexError, Result};
use crate::kernel::{axpy, dot, normalize, normalize_backward, Matrix, Mlp2, Mlp2Trace, ParamTensor};

const CONTEXT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    Composition,
    State,
    Object,
}

/// Learnable context vectors for the three prompt families plus the primitive tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub composition_ctx: ParamTensor,
    pub state_ctx: ParamTensor,
    pub object_ctx: ParamTensor,
    pub state_tokens: ParamTensor,
    pub object_tokens: ParamTensor,
}

impl PromptBank {
    /// Context vectors ~ N(0, 0.02²); primitive tokens ~ N(0, 1/d_tok) unless given.
    pub fn init<R: Rng>(
        states: usize,
        objects: usize,
        prompt_len: usize,
        token_dim: usize,
        rng: &mut R,
        state_tokens: Option<&Matrix>,
        object_tokens: Option<&Matrix>,
    ) -> Result<Self> {
        if prompt_len == 0 {
            return Err(DuplexError::InvalidArgument("prompt length must be ≥ 1".into()));
        }
        if token_dim == 0 {
            return Err(DuplexError::InvalidArgument("token dim must be ≥ 1".into()));
        }
        let ctx = |rng: &mut R| ParamTensor::new(Matrix::gaussian(prompt_len, token_dim, CONTEXT_INIT_STD, rng));
        let composition_ctx = ctx(rng);
        let state_ctx = ctx(rng);
        let object_ctx = ctx(rng);
        let tok_std = 1.0 / (token_dim as f64).sqrt();
        let tokens = |given: Option<&Matrix>, rows: usize, rng: &mut R| -> Result<ParamTensor> {
            let random = Matrix::gaussian(rows, token_dim, tok_std, rng);
            match given {
                None => Ok(ParamTensor::new(random)),
                Some(m) if m.shape() == (rows, token_dim) => Ok(ParamTensor::new(m.clone())),
                Some(m) => Err(DuplexError::DimensionMismatch {
                    op: "primitive token initialization",
                    left: m.shape(),
                    right: (rows, token_dim),
                }),
            }
        };
        let state_tokens = tokens(state_tokens, states, rng)?;
        let object_tokens = tokens(object_tokens, objects, rng)?;
        Ok(PromptBank {
            composition_ctx,
            state_ctx,
            object_ctx,
            state_tokens,
            object_tokens,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.composition_ctx.value.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.composition_ctx.value.cols()
    }

    pub fn num_states(&self) -> usize {
        self.state_tokens.value.rows()
    }

    pub fn num_objects(&self) -> usize {
        self.object_tokens.value.rows()
    }
}

/// Token matrix for one prompt: `[ctx; ρ_state; ρ_object]`, `[ctx; ρ_state]` or `[ctx; ρ_object]`.
pub fn compose_prompt(kind: PromptKind, state: Option<usize>, object: Option<usize>, bank: &PromptBank) -> Result<Matrix> {
    let need_state = || {
        let m = state.ok_or_else(|| DuplexError::InvalidArgument(format!("{kind:?} prompt needs a state index")))?;
        if m >= bank.num_states() {
            return Err(DuplexError::InvalidArgument(format!("state index {m} out of range")));
        }
        Ok(m)
    };
    let need_object = || {
        let n = object.ok_or_else(|| DuplexError::InvalidArgument(format!("{kind:?} prompt needs an object index")))?;
        if n >= bank.num_objects() {
            return Err(DuplexError::InvalidArgument(format!("object index {n} out of range")));
        }
        Ok(n)
    };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(bank.prompt_len() + 2);
    let push_ctx = |ctx: &ParamTensor, rows: &mut Vec<Vec<f64>>| {
        for k in 0..ctx.value.rows() {
            rows.push(ctx.value.row(k).to_vec());
        }
    };
    match kind {
        PromptKind::Composition => {
            let (m, n) = (need_state()?, need_object()?);
            push_ctx(&bank.composition_ctx, &mut rows);
            rows.push(bank.state_tokens.value.row(m).to_vec());
            rows.push(bank.object_tokens.value.row(n).to_vec());
        }
        PromptKind::State => {
            let m = need_state()?;
            push_ctx(&bank.state_ctx, &mut rows);
            rows.push(bank.state_tokens.value.row(m).to_vec());
        }
        PromptKind::Object => {
            let n = need_object()?;
            push_ctx(&bank.object_ctx, &mut rows);
            rows.push(bank.object_tokens.value.row(n).to_vec());
        }
    }
    Matrix::from_rows(&rows)
}

/// Fixed `d_tok × d` projection standing in for a pretrained text encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTextEncoder {
    projection: Matrix,
    seed: u64,
}

impl FrozenTextEncoder {
    pub fn new(token_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = Matrix::gaussian(token_dim, dim, 1.0 / (token_dim as f64).sqrt(), &mut rng);
        FrozenTextEncoder { projection, seed }
    }

    pub fn from_parts(projection: Matrix, seed: u64) -> Self {
        FrozenTextEncoder { projection, seed }
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoding {
    pub unit: Vec<f64>,
    pub norm: f64,
    pub tokens: usize,
}

pub fn encode_text(tokens: &Matrix, encoder: &FrozenTextEncoder) -> Result<TextEncoding> {
    if tokens.cols() != encoder.token_dim() {
        return Err(DuplexError::DimensionMismatch {
            op: "encode_text",
            left: tokens.shape(),
            right: encoder.projection.shape(),
        });
    }
    if tokens.rows() == 0 {
        return Err(DuplexError::Empty("prompt"));
    }
    let mut pooled = vec![0.0; tokens.cols()];
    for r in 0..tokens.rows() {
        axpy(1.0, tokens.row(r), &mut pooled);
    }
    let inv = 1.0 / tokens.rows() as f64;
    pooled.iter_mut().for_each(|x| *x *= inv);
    let projected = Matrix::from_vec(1, pooled.len(), pooled)?.matmul(&encoder.projection)?;
    let (unit, norm) = normalize(projected.as_slice(), "text encoding (degenerate prompt)")?;
    Ok(TextEncoding {
        unit,
        norm,
        tokens: tokens.rows(),
    })
}

/// Gradient w.r.t. each prompt token row (identical for every row after mean-pooling).
pub fn encode_text_backward(encoder: &FrozenTextEncoder, enc: &TextEncoding, d_unit: &[f64]) -> Vec<f64> {
    let dy = normalize_backward(&enc.unit, enc.norm, d_unit);
    let inv = 1.0 / enc.tokens as f64;
    (0..encoder.token_dim())
        .map(|i| dot(encoder.projection.row(i), &dy) * inv)
        .collect()
}

/// Text-side prototypes: compositions (`M·N × d`, composition-index order), states, objects.
#[derive(Clone, Debug)]
pub struct SemanticPrototypes {
    pub composition: Matrix,
    pub state: Matrix,
    pub object: Matrix,
    comp_enc: Vec<TextEncoding>,
    state_enc: Vec<TextEncoding>,
    object_enc: Vec<TextEncoding>,
    num_objects: usize,
}

fn stack(encs: &[TextEncoding], dim: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(encs.len() * dim);
    for e in encs {
        data.extend_from_slice(&e.unit);
    }
    Matrix::from_vec(encs.len(), dim, data)
}

pub fn semantic_prototypes(bank: &PromptBank, encoder: &FrozenTextEncoder, space: &CompositionSpace) -> Result<SemanticPrototypes> {
    let (m, n) = (space.num_states(), space.num_objects());
    if bank.num_states() != m || bank.num_objects() != n {
        return Err(DuplexError::DimensionMismatch {
            op: "semantic_prototypes vocabulary",
            left: (bank.num_states(), bank.num_objects()),
            right: (m, n),
        });
    }
    let d = encoder.dim();
    let mut comp_enc = Vec::with_capacity(m * n);
    for c in 0..m * n {
        let (s, o) = space.pair(c);
        comp_enc.push(encode_text(&compose_prompt(PromptKind::Composition, Some(s), Some(o), bank)?, encoder)?);
    }
    let state_enc = (0..m)
        .map(|s| encode_text(&compose_prompt(PromptKind::State, Some(s), None, bank)?, encoder))
        .collect::<Result<Vec<_>>>()?;
    let object_enc = (0..n)
        .map(|o| encode_text(&compose_prompt(PromptKind::Object, None, Some(o), bank)?, encoder))
        .collect::<Result<Vec<_>>>()?;
    Ok(SemanticPrototypes {
        composition: stack(&comp_enc, d)?,
        state: stack(&state_enc, d)?,
        object: stack(&object_enc, d)?,
        comp_enc,
        state_enc,
        object_enc,
        num_objects: n,
    })
}

fn add_to_all_rows(p: &mut ParamTensor, g: &[f64]) {
    for r in 0..p.grad.rows() {
        axpy(1.0, g, p.grad.row_mut(r));
    }
}

impl SemanticPrototypes {
    /// Accumulates prompt-bank gradients from prototype-row gradients.
    pub fn backward(&self, bank: &mut PromptBank, encoder: &FrozenTextEncoder, d_comp: &Matrix, d_state: &Matrix, d_object: &Matrix) {
        let nonzero = |r: &[f64]| r.iter().any(|&x| x != 0.0);
        for (c, enc) in self.comp_enc.iter().enumerate() {
            let dr = d_comp.row(c);
            if !nonzero(dr) {
                continue;
            }
            let g = encode_text_backward(encoder, enc, dr);
            let (s, o) = (c / self.num_objects, c % self.num_objects);
            add_to_all_rows(&mut bank.composition_ctx, &g);
            axpy(1.0, &g, bank.state_tokens.grad.row_mut(s));
            axpy(1.0, &g, bank.object_tokens.grad.row_mut(o));
        }
        for (s, enc) in self.state_enc.iter().enumerate() {
            let dr = d_state.row(s);
            if nonzero(dr) {
                let g = encode_text_backward(encoder, enc, dr);
                add_to_all_rows(&mut bank.state_ctx, &g);
                axpy(1.0, &g, bank.state_tokens.grad.row_mut(s));
            }
        }
        for (o, enc) in self.object_enc.iter().enumerate() {
            let dr = d_object.row(o);
            if nonzero(dr) {
                let g = encode_text_backward(encoder, enc, dr);
                add_to_all_rows(&mut bank.object_ctx, &g);
                axpy(1.0, &g, bank.object_tokens.grad.row_mut(o));
            }
        }
    }
}

/// Separate state and object MLPs applied to the global image embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Disentangler {
    pub state: Mlp2,
    pub object: Mlp2,
}

impl Disentangler {
    pub fn init<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let state = Mlp2::init(dim, hidden, rng);
        let object = Mlp2::init(dim, hidden, rng);
        Disentangler { state, object }
    }

    pub fn backward(&mut self, out: &Disentangled, d_state: &[f64], d_object: &[f64]) {
        let ds = normalize_backward(&out.state, out.state_norm, d_state);
        self.state.backward(&out.state_trace, &ds);
        let dobj = normalize_backward(&out.object, out.object_norm, d_object);
        self.object.backward(&out.object_trace, &dobj);
    }
}

/// Unit-norm state and object features for one image, with backward traces.
#[derive(Clone, Debug)]
pub struct Disentangled {
    pub state: Vec<f64>,
    pub object: Vec<f64>,
    state_norm: f64,
    object_norm: f64,
    state_trace: Mlp2Trace,
    object_trace: Mlp2Trace,
}

pub fn disentangle(z_cls: &[f64], disentangler: &Disentangler) -> Result<Disentangled> {
    let state_trace = disentangler.state.forward(z_cls)?;
    let object_trace = disentangler.object.forward(z_cls)?;
    let (state, state_norm) = normalize(&state_trace.output, "state disentangler output")?;
    let (object, object_norm) = normalize(&object_trace.output, "object disentangler output")?;
    Ok(Disentangled {
        state,
        object,
        state_norm,
        object_norm,
        state_trace,
        object_trace,
    })
}
