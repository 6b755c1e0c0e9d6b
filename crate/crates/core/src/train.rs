//! Training configuration, the deterministic training loop, evaluation and retrieval.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::data::{batches, target_space, CompositionSpace, LoadedDataset, Split, World};
use crate::error::{DuplexError, Result};
use crate::kernel::{adam_step, AdamConfig, AdamState};
use crate::kv;
use crate::metrics::{bias_sweep, summarize, topk, MetricsReport};
use crate::model::{Branch, DuplexModel, ModelConfig};
use crate::objective::{ablation_score, batch_losses, BatchForward, ScoreMode, Scorer};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub tau: f64,
    pub prompt_len: usize,
    pub dim: usize,
    pub token_dim: usize,
    pub hidden: usize,
    pub seed: u64,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub branch: Branch,
    pub manifest: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 15,
            lambda: 0.9,
            gamma: 0.3,
            tau: 0.01,
            prompt_len: 3,
            dim: 32,
            token_dim: 32,
            hidden: 64,
            seed: 0,
            decay_factor: 0.5,
            decay_period: 5,
            branch: Branch::Full,
            manifest: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DuplexError::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    /// Applies `key=value` overrides on top of `self`.
    pub fn apply(&mut self, entries: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in entries {
            match k.as_str() {
                "lr" => self.lr = parse_value(k, v)?,
                "batch_size" => self.batch_size = parse_value(k, v)?,
                "epochs" => self.epochs = parse_value(k, v)?,
                "lambda" => self.lambda = parse_value(k, v)?,
                "gamma" => self.gamma = parse_value(k, v)?,
                "tau" => self.tau = parse_value(k, v)?,
                "prompt_len" => self.prompt_len = parse_value(k, v)?,
                "dim" => self.dim = parse_value(k, v)?,
                "token_dim" => self.token_dim = parse_value(k, v)?,
                "hidden" => self.hidden = parse_value(k, v)?,
                "seed" => self.seed = parse_value(k, v)?,
                "decay_factor" => self.decay_factor = parse_value(k, v)?,
                "decay_period" => self.decay_period = parse_value(k, v)?,
                "branch" => self.branch = v.parse()?,
                "manifest" => self.manifest = Some(PathBuf::from(v)),
                other => return Err(DuplexError::Config(format!("unknown key {other:?}"))),
            }
        }
        Ok(())
    }

    /// Defaults overridden by a `key=value` text, then validated.
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply(&kv::parse(text, file)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DuplexError::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be > 0, got {}", self.lr));
        }
        if self.epochs == 0 {
            return fail("epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be > 0, got {}", self.tau));
        }
        if self.prompt_len == 0 || self.dim == 0 || self.token_dim == 0 || self.hidden == 0 {
            return fail("prompt_len, dim, token_dim and hidden must be ≥ 1".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_period == 0 {
            return fail("decay_period must be ≥ 1".into());
        }
        Ok(())
    }

    /// Learning rate in effect after `epoch` completed epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_period) as i32)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            prompt_len: self.prompt_len,
            token_dim: self.token_dim,
            hidden: self.hidden,
            lambda: self.lambda,
            gamma: self.gamma,
            tau: self.tau,
            branch: self.branch,
            seed: self.seed,
        }
    }

    /// Canonical `key=value` text; parses back to an equal config.
    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "lr={}\nbatch_size={}\nepochs={}\nlambda={}\ngamma={}\ntau={}\nprompt_len={}\ndim={}\ntoken_dim={}\nhidden={}\nseed={}\ndecay_factor={}\ndecay_period={}\nbranch={}\n",
            self.lr,
            self.batch_size,
            self.epochs,
            self.lambda,
            self.gamma,
            self.tau,
            self.prompt_len,
            self.dim,
            self.token_dim,
            self.hidden,
            self.seed,
            self.decay_factor,
            self.decay_period,
            self.branch
        );
        if let Some(m) = &self.manifest {
            out.push_str(&format!("manifest={}\n", m.display()));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub val_auc: Option<f64>,
    pub lr: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let auc = self.val_auc.unwrap_or(f64::NAN);
        write!(f, "epoch={} loss={} val_auc={} lr={}", self.epoch, self.loss, auc, self.lr)
    }
}

/// Model plus optimizer state, advanced one batch at a time.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: DuplexModel,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: &LoadedDataset) -> Result<Self> {
        config.validate()?;
        if data.dataset.dim() != config.dim {
            return Err(DuplexError::DimensionMismatch {
                op: "config dim vs dataset",
                left: (1, config.dim),
                right: (1, data.dataset.dim()),
            });
        }
        let model = DuplexModel::init(
            &config.model_config(),
            &data.dataset,
            &data.space,
            data.state_tokens.as_ref(),
            data.object_tokens.as_ref(),
        )?;
        let adam = AdamState::new(AdamConfig::with_lr(config.lr), &model.param_shapes());
        Ok(Trainer {
            config,
            model,
            adam,
            epoch: 0,
        })
    }

    /// Forward, backward, Adam update, γ clamp, codebook write-back.
    pub fn step(&mut self, data: &LoadedDataset, batch: &[usize]) -> Result<BatchForward> {
        let z: Vec<&[f64]> = batch.iter().map(|&i| data.dataset.embedding(i)).collect();
        let labels: Vec<(usize, usize)> = batch.iter().map(|&i| data.dataset.label(i)).collect();
        self.model.zero_grad();
        let forward = batch_losses(&self.model, &data.space, &z, &labels)?;
        forward.backward(&mut self.model);
        if self.model.params().iter().any(|p| !p.grad.is_finite()) {
            return Err(DuplexError::NonFinite(format!(
                "gradient at epoch {} (loss {:?})",
                self.epoch + 1,
                forward.losses
            )));
        }
        adam_step(&mut self.model.params_mut(), &mut self.adam)?;
        self.model.fusion.clamp_gamma();
        forward.commit(&mut self.model)?;
        Ok(forward)
    }

    /// One pass over the training split; returns the mean batch loss and the lr used.
    pub fn run_epoch(&mut self, data: &LoadedDataset) -> Result<(f64, f64)> {
        let lr = self.config.lr_at(self.epoch);
        self.adam.set_lr(lr);
        let order = batches(&data.dataset, self.config.batch_size, self.config.seed, self.epoch as u64)?;
        let mut sum = 0.0;
        for b in &order {
            sum += self.step(data, b)?.losses.total;
        }
        self.epoch += 1;
        Ok((sum / order.len() as f64, lr))
    }

    /// Snapshot with gradients cleared.
    pub fn checkpoint(&self, space: &CompositionSpace) -> Checkpoint {
        let mut model = self.model.clone();
        model.zero_grad();
        Checkpoint {
            config: self.config.clone(),
            states: space.states().to_vec(),
            objects: space.objects().to_vec(),
            model,
            adam: self.adam.clone(),
            epoch: self.epoch as u64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Highest validation AUC (the latest epoch when there is no usable validation split).
    pub best: Checkpoint,
    pub best_val_auc: Option<f64>,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn has_both_label_kinds(data: &LoadedDataset, split: Split) -> bool {
    let idx = data.dataset.indices(split);
    let seen = idx.iter().any(|&i| {
        let (s, o) = data.dataset.label(i);
        data.space.is_seen(s, o)
    });
    let unseen = idx.iter().any(|&i| {
        let (s, o) = data.dataset.label(i);
        !data.space.is_seen(s, o)
    });
    seen && unseen
}

pub fn train(config: TrainConfig, data: &LoadedDataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, data)?;
    let validate = has_both_label_kinds(data, Split::Val);
    let mut log = Vec::with_capacity(trainer.config.epochs);
    let mut best: Option<(Option<f64>, Checkpoint)> = None;
    for _ in 0..trainer.config.epochs {
        let (loss, lr) = trainer.run_epoch(data)?;
        if !loss.is_finite() {
            return Err(DuplexError::NonFinite(format!("epoch {} loss", trainer.epoch)));
        }
        let val_auc = if validate {
            Some(evaluate(&trainer.model, data, Split::Val, World::Closed, ScoreMode::Full)?.auc)
        } else {
            None
        };
        let entry = EpochLog {
            epoch: trainer.epoch,
            loss,
            val_auc,
            lr,
        };
        on_epoch(&entry);
        log.push(entry);
        let improved = match (&best, val_auc) {
            (None, _) | (_, None) => true,
            (Some((Some(b), _)), Some(v)) => v > *b,
            (Some((None, _)), Some(_)) => true,
        };
        if improved {
            best = Some((val_auc, trainer.checkpoint(&data.space)));
        }
    }
    let (best_val_auc, best) = best.expect("epochs ≥ 1 after validation");
    Ok(TrainOutcome {
        best,
        best_val_auc,
        last: trainer.checkpoint(&data.space),
        log,
    })
}

/// Checks that a model was trained on this dataset's vocabulary and dimension.
pub fn check_compatible(ckpt: &Checkpoint, data: &LoadedDataset) -> Result<()> {
    if ckpt.model.dim() != data.dataset.dim() {
        return Err(DuplexError::DimensionMismatch {
            op: "checkpoint dim vs dataset",
            left: (1, ckpt.model.dim()),
            right: (1, data.dataset.dim()),
        });
    }
    if ckpt.states != data.space.states() || ckpt.objects != data.space.objects() {
        return Err(DuplexError::InvalidArgument(
            "checkpoint vocabulary differs from the dataset's".into(),
        ));
    }
    Ok(())
}

/// Reports for several inference modes from a single pass of head computations.
pub fn evaluate_modes(
    model: &DuplexModel,
    data: &LoadedDataset,
    split: Split,
    world: World,
    modes: &[ScoreMode],
) -> Result<Vec<MetricsReport>> {
    if model.dim() != data.dataset.dim() {
        return Err(DuplexError::DimensionMismatch {
            op: "model dim vs dataset",
            left: (1, model.dim()),
            right: (1, data.dataset.dim()),
        });
    }
    let space = &data.space;
    let target = target_space(space, world);
    let mut column = vec![usize::MAX; space.num_compositions()];
    for (j, &c) in target.iter().enumerate() {
        column[c] = j;
    }
    let unseen: Vec<bool> = target.iter().map(|&c| {
        let (s, o) = space.pair(c);
        !space.is_seen(s, o)
    }).collect();
    // images whose pair lies outside the target space are not part of this protocol
    let images: Vec<usize> = data
        .dataset
        .indices(split)
        .into_iter()
        .filter(|&i| {
            let (s, o) = data.dataset.label(i);
            column[space.index(s, o)] != usize::MAX
        })
        .collect();
    if images.is_empty() {
        return Err(DuplexError::Empty("evaluation split"));
    }
    let scorer = Scorer::new(model, space, &target)?;
    let heads = images
        .iter()
        .map(|&i| scorer.heads(model, data.dataset.embedding(i)))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = images
        .iter()
        .map(|&i| {
            let (s, o) = data.dataset.label(i);
            column[space.index(s, o)]
        })
        .collect();
    modes
        .iter()
        .map(|&mode| {
            let mut data_rows = Vec::with_capacity(images.len() * target.len());
            for h in &heads {
                data_rows.extend(ablation_score(mode, h, scorer.pairs())?);
            }
            let scores = crate::kernel::Matrix::from_vec(images.len(), target.len(), data_rows)?;
            summarize(&bias_sweep(&scores, &labels, &unseen)?, world)
        })
        .collect()
}

pub fn evaluate(model: &DuplexModel, data: &LoadedDataset, split: Split, world: World, mode: ScoreMode) -> Result<MetricsReport> {
    Ok(evaluate_modes(model, data, split, world, &[mode])?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Query an image row, rank compositions.
    ImageToComposition,
    /// Query a composition, rank image rows.
    PrototypeToImage,
}

impl FromStr for Direction {
    type Err = DuplexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Direction::ImageToComposition),
            "prototype" => Ok(Direction::PrototypeToImage),
            other => Err(DuplexError::Config(format!("unknown direction {other:?} (image, prototype)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub id: usize,
    pub name: String,
    pub score: f64,
}

fn composition_id(space: &CompositionSpace, query: &str) -> Result<usize> {
    if let Ok(c) = query.parse::<usize>() {
        return if c < space.num_compositions() {
            Ok(c)
        } else {
            Err(DuplexError::UnknownId(format!("composition {c}")))
        };
    }
    (0..space.num_compositions())
        .find(|&c| space.composition_name(c) == query)
        .ok_or_else(|| DuplexError::UnknownId(format!("composition {query:?}")))
}

/// Top-k retrieval between images and prototypes of all compositions.
///
/// The prototype gallery is the fused visual one when the model has it, else the text one.
pub fn retrieve(model: &DuplexModel, data: &LoadedDataset, direction: Direction, query: &str, k: usize) -> Result<Vec<Hit>> {
    let space = &data.space;
    let all: Vec<usize> = (0..space.num_compositions()).collect();
    let scorer = Scorer::new(model, space, &all)?;
    let prototypes = scorer
        .visual_prototypes()
        .or(scorer.composition_prototypes())
        .ok_or(DuplexError::Empty("prototype gallery"))?;
    match direction {
        Direction::ImageToComposition => {
            let row: usize = query
                .parse()
                .map_err(|_| DuplexError::UnknownId(format!("image {query:?}")))?;
            if row >= data.dataset.len() {
                return Err(DuplexError::UnknownId(format!("image {row}")));
            }
            let z = data.dataset.embedding(row);
            Ok(topk(z, prototypes, k)?
                .into_iter()
                .map(|c| Hit {
                    id: c,
                    name: space.composition_name(c),
                    score: crate::kernel::dot(z, prototypes.row(c)),
                })
                .collect())
        }
        Direction::PrototypeToImage => {
            let c = composition_id(space, query)?;
            let p = prototypes.row(c);
            let gallery = data.dataset.embeddings();
            Ok(topk(p, gallery, k)?
                .into_iter()
                .map(|i| {
                    let (s, o) = data.dataset.label(i);
                    Hit {
                        id: i,
                        name: space.composition_name(space.index(s, o)),
                        score: crate::kernel::dot(gallery.row(i), p),
                    }
                })
                .collect())
        }
    }
}
