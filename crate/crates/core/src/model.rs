//! The full trainable model: prompt bank, frozen text encoder, disentanglers,
//! graph layer, fusion head and visual codebook.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{CompositionSpace, EmbeddingDataset};
use crate::encoders::{Disentangler, FrozenTextEncoder, PromptBank};
use crate::error::{DuplexError, Result};
use crate::kernel::{finite_diff_check, Matrix, ParamTensor};
use crate::objective::batch_losses;
use crate::prototypes::{init_codebook, init_node_features, FusionHead, GcnLayer, PrototypeCodebook};

/// Which prototype branches are trained and used at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Branch {
    /// Semantic and visual prototypes.
    #[default]
    Full,
    /// Semantic prototypes only: no codebook loss.
    Semantic,
    /// Visual prototypes only: no text composition loss, γ pinned to 1.
    Visual,
}

impl Branch {
    pub fn has_semantic(self) -> bool {
        self != Branch::Visual
    }

    pub fn has_visual(self) -> bool {
        self != Branch::Semantic
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Full => "full",
            Branch::Semantic => "sp",
            Branch::Visual => "vp",
        })
    }
}

impl FromStr for Branch {
    type Err = DuplexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Branch::Full),
            "sp" => Ok(Branch::Semantic),
            "vp" => Ok(Branch::Visual),
            other => Err(DuplexError::Config(format!("unknown branch {other:?} (full, sp, vp)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub prompt_len: usize,
    pub token_dim: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub tau: f64,
    pub branch: Branch,
    pub seed: u64,
}

/// Parameter groups in optimizer order.
pub const PARAM_NAMES: [&str; 15] = [
    "prompt.composition_ctx",
    "prompt.state_ctx",
    "prompt.object_ctx",
    "prompt.state_tokens",
    "prompt.object_tokens",
    "disentangler.state.w1",
    "disentangler.state.b1",
    "disentangler.state.w2",
    "disentangler.state.b2",
    "disentangler.object.w1",
    "disentangler.object.b1",
    "disentangler.object.w2",
    "disentangler.object.b2",
    "gcn.weight",
    "fusion.gamma",
];

#[derive(Clone, Debug, PartialEq)]
pub struct DuplexModel {
    pub bank: PromptBank,
    pub encoder: FrozenTextEncoder,
    pub disentangler: Disentangler,
    pub gcn: GcnLayer,
    pub fusion: FusionHead,
    pub codebook: PrototypeCodebook,
    pub branch: Branch,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl DuplexModel {
    pub fn init(
        cfg: &ModelConfig,
        dataset: &EmbeddingDataset,
        space: &CompositionSpace,
        state_tokens: Option<&Matrix>,
        object_tokens: Option<&Matrix>,
    ) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(DuplexError::Config("hidden must be ≥ 1".into()));
        }
        let (m, n, d) = (space.num_states(), space.num_objects(), dataset.dim());
        let bank = PromptBank::init(
            m,
            n,
            cfg.prompt_len,
            cfg.token_dim,
            &mut stream(cfg.seed, 1),
            state_tokens,
            object_tokens,
        )?;
        let disentangler = Disentangler::init(d, cfg.hidden, &mut stream(cfg.seed, 2));
        let encoder = FrozenTextEncoder::new(cfg.token_dim, d, stream(cfg.seed, 3).next_u64());
        let (init_s, init_o) = init_node_features(dataset, space)?;
        let h = init_codebook(m, n, d, stream(cfg.seed, 4).next_u64())?;
        let codebook = PrototypeCodebook::new(h, init_s, init_o, cfg.lambda)?;
        let gamma = if cfg.branch == Branch::Visual { 1.0 } else { cfg.gamma };
        Ok(DuplexModel {
            bank,
            encoder,
            disentangler,
            gcn: GcnLayer::identity(d),
            fusion: FusionHead::new(gamma, cfg.tau)?,
            codebook,
            branch: cfg.branch,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let b = &self.bank;
        let mut out = vec![&b.composition_ctx, &b.state_ctx, &b.object_ctx, &b.state_tokens, &b.object_tokens];
        out.extend(self.disentangler.state.params());
        out.extend(self.disentangler.object.params());
        out.push(&self.gcn.weight);
        out.push(&self.fusion.gamma);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let b = &mut self.bank;
        let mut out = vec![
            &mut b.composition_ctx,
            &mut b.state_ctx,
            &mut b.object_ctx,
            &mut b.state_tokens,
            &mut b.object_tokens,
        ];
        out.extend(self.disentangler.state.params_mut());
        out.extend(self.disentangler.object.params_mut());
        out.push(&mut self.gcn.weight);
        out.push(&mut self.fusion.gamma);
        out
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|p| p.shape()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Max relative error of the analytic total-loss gradient, per parameter group.
pub fn check_gradients(
    model: &DuplexModel,
    space: &CompositionSpace,
    embeddings: &[&[f64]],
    labels: &[(usize, usize)],
    eps: f64,
) -> Result<Vec<(&'static str, f64)>> {
    let mut analytic = model.clone();
    analytic.zero_grad();
    let forward = batch_losses(&analytic, space, embeddings, labels)?;
    forward.backward(&mut analytic);
    let grads: Vec<Vec<f64>> = analytic.params().iter().map(|p| p.grad.as_slice().to_vec()).collect();
    let mut out = Vec::with_capacity(PARAM_NAMES.len());
    for (g, name) in PARAM_NAMES.iter().enumerate() {
        if g == PARAM_NAMES.len() - 1 && model.branch == Branch::Visual {
            continue;
        }
        let err = finite_diff_check(grads[g].len(), &grads[g], eps, |i, h| {
            let mut probe = model.clone();
            probe.params_mut()[g].value.as_mut_slice()[i] += h;
            Ok(batch_losses(&probe, space, embeddings, labels)?.losses.total)
        })?;
        out.push((*name, err));
    }
    Ok(out)
}
