//! Training losses, their backward pass, and the fused inference rule.
//!
//! Four cross-entropy heads share one temperature τ:
//! composition against the text prototypes (`L_c`), composition against the
//! fused visual prototypes (`L_c'`), state (`L_s`) and object (`L_o`).
//! Training softmaxes over seen compositions only.

use std::fmt;
use std::str::FromStr;

use crate::data::CompositionSpace;
use crate::encoders::{disentangle, semantic_prototypes, Disentangled, SemanticPrototypes};
use crate::error::{DuplexError, Result};
use crate::kernel::{axpy, dot, softmax_cross_entropy, softmax_with_temperature, Matrix, SoftmaxCrossEntropy};
use crate::model::{Branch, DuplexModel};
use crate::prototypes::{batch_node_features, fuse, refresh_all, update_nodes, BatchNodes, Fused, NodeUpdate, Refreshed};

/// Dot product of `z` with every prototype row.
pub fn logits(z: &[f64], prototypes: &Matrix) -> Vec<f64> {
    (0..prototypes.rows()).map(|r| dot(z, prototypes.row(r))).collect()
}

pub fn class_probs(z: &[f64], prototypes: &Matrix, tau: f64) -> Result<Vec<f64>> {
    if z.len() != prototypes.cols() {
        return Err(DuplexError::DimensionMismatch {
            op: "class_probs",
            left: (1, z.len()),
            right: prototypes.shape(),
        });
    }
    softmax_with_temperature(&logits(z, prototypes), tau)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Losses {
    pub composition: f64,
    pub visual: f64,
    pub state: f64,
    pub object: f64,
    pub total: f64,
}

struct Head {
    out: Vec<SoftmaxCrossEntropy>,
}

impl Head {
    fn run(inputs: &[&[f64]], prototypes: &Matrix, targets: &[usize], tau: f64) -> Result<(Head, f64)> {
        let mut out = Vec::with_capacity(inputs.len());
        let mut sum = 0.0;
        for (z, &t) in inputs.iter().zip(targets) {
            let sce = softmax_cross_entropy(&logits(z, prototypes), t, tau)?;
            sum += sce.loss;
            out.push(sce);
        }
        Ok((Head { out }, sum / inputs.len() as f64))
    }

    fn probs(&self) -> Vec<Vec<f64>> {
        self.out.iter().map(|s| s.probs.clone()).collect()
    }
}

struct VisualTrace {
    nodes: BatchNodes,
    update: NodeUpdate,
    refreshed: Refreshed,
    fused: Fused,
    head: Head,
}

/// Everything one training batch computes, kept for the backward pass.
pub struct BatchForward {
    pub losses: Losses,
    embeddings: Vec<Vec<f64>>,
    labels: Vec<(usize, usize)>,
    seen: Vec<usize>,
    semantic: SemanticPrototypes,
    disentangled: Vec<Disentangled>,
    composition: Option<Head>,
    visual: Option<VisualTrace>,
    state: Head,
    object: Head,
}

pub fn batch_losses(
    model: &DuplexModel,
    space: &CompositionSpace,
    embeddings: &[&[f64]],
    labels: &[(usize, usize)],
) -> Result<BatchForward> {
    if embeddings.is_empty() {
        return Err(DuplexError::Empty("batch"));
    }
    if embeddings.len() != labels.len() {
        return Err(DuplexError::DimensionMismatch {
            op: "batch_losses",
            left: (embeddings.len(), 1),
            right: (labels.len(), 1),
        });
    }
    let tau = model.fusion.tau;
    let seen = space.seen_indices();
    let mut position = vec![usize::MAX; space.num_compositions()];
    for (j, &c) in seen.iter().enumerate() {
        position[c] = j;
    }
    let mut comp_targets = Vec::with_capacity(labels.len());
    for &(s, o) in labels {
        if s >= space.num_states() || o >= space.num_objects() || !space.is_seen(s, o) {
            return Err(DuplexError::UnseenLabel { state: s, object: o });
        }
        comp_targets.push(position[space.index(s, o)]);
    }
    let semantic = semantic_prototypes(&model.bank, &model.encoder, space)?;
    let disentangled = embeddings
        .iter()
        .map(|z| disentangle(z, &model.disentangler))
        .collect::<Result<Vec<_>>>()?;
    let zs: Vec<&[f64]> = disentangled.iter().map(|d| d.state.as_slice()).collect();
    let zo: Vec<&[f64]> = disentangled.iter().map(|d| d.object.as_slice()).collect();

    let mut losses = Losses::default();
    let composition = if model.branch.has_semantic() {
        let (head, loss) = Head::run(embeddings, &semantic.composition.select_rows(&seen), &comp_targets, tau)?;
        losses.composition = loss;
        Some(head)
    } else {
        None
    };
    let visual = if model.branch.has_visual() {
        let nodes = batch_node_features(&zs, &zo, labels, space.num_states(), space.num_objects())?;
        let update = update_nodes(&model.codebook, &nodes)?;
        let refreshed = refresh_all(model.codebook.prototypes(), &update.state, &update.object, &model.gcn)?;
        let fused = fuse(&refreshed.rows, &semantic.composition, model.fusion.gamma())?;
        let (head, loss) = Head::run(embeddings, &fused.rows.select_rows(&seen), &comp_targets, tau)?;
        losses.visual = loss;
        Some(VisualTrace {
            nodes,
            update,
            refreshed,
            fused,
            head,
        })
    } else {
        None
    };
    let s_targets: Vec<usize> = labels.iter().map(|l| l.0).collect();
    let o_targets: Vec<usize> = labels.iter().map(|l| l.1).collect();
    let (state, ls) = Head::run(&zs, &semantic.state, &s_targets, tau)?;
    let (object, lo) = Head::run(&zo, &semantic.object, &o_targets, tau)?;
    losses.state = ls;
    losses.object = lo;
    losses.total = losses.composition + losses.visual + losses.state + losses.object;
    if !losses.total.is_finite() {
        return Err(DuplexError::NonFinite(format!("batch loss {losses:?}")));
    }
    Ok(BatchForward {
        losses,
        embeddings: embeddings.iter().map(|z| z.to_vec()).collect(),
        labels: labels.to_vec(),
        seen,
        semantic,
        disentangled,
        composition,
        visual,
        state,
        object,
    })
}

impl BatchForward {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn labels(&self) -> &[(usize, usize)] {
        &self.labels
    }

    pub fn semantic(&self) -> &SemanticPrototypes {
        &self.semantic
    }

    pub fn disentangled(&self) -> &[Disentangled] {
        &self.disentangled
    }

    /// Seen-composition probabilities from the text prototypes, per image.
    pub fn composition_probs(&self) -> Option<Vec<Vec<f64>>> {
        self.composition.as_ref().map(Head::probs)
    }

    /// Seen-composition probabilities from the fused prototypes, per image.
    pub fn visual_probs(&self) -> Option<Vec<Vec<f64>>> {
        self.visual.as_ref().map(|v| v.head.probs())
    }

    pub fn state_probs(&self) -> Vec<Vec<f64>> {
        self.state.probs()
    }

    pub fn object_probs(&self) -> Vec<Vec<f64>> {
        self.object.probs()
    }

    pub fn batch_nodes(&self) -> Option<&BatchNodes> {
        self.visual.as_ref().map(|v| &v.nodes)
    }

    pub fn node_update(&self) -> Option<&NodeUpdate> {
        self.visual.as_ref().map(|v| &v.update)
    }

    /// Refreshed prototypes, all compositions.
    pub fn refreshed(&self) -> Option<&Matrix> {
        self.visual.as_ref().map(|v| &v.refreshed.rows)
    }

    /// Writes this step's node features and refreshed prototypes into the codebook.
    pub fn commit(&self, model: &mut DuplexModel) -> Result<()> {
        match &self.visual {
            Some(v) => model.codebook.commit(&v.update, &v.refreshed.rows),
            None => Ok(()),
        }
    }

    /// Accumulates the total-loss gradient into every parameter of `model`.
    pub fn backward(&self, model: &mut DuplexModel) {
        let b = self.len();
        let inv = 1.0 / b as f64;
        let d = self.semantic.composition.cols();
        let states = self.semantic.state.rows();
        let mut d_comp = Matrix::zeros(self.semantic.composition.rows(), d);
        let mut d_state = Matrix::zeros(states, d);
        let mut d_object = Matrix::zeros(self.semantic.object.rows(), d);
        let mut dzs = Matrix::zeros(b, d);
        let mut dzo = Matrix::zeros(b, d);

        if let Some(head) = &self.composition {
            for (i, sce) in head.out.iter().enumerate() {
                for (j, g) in sce.grad.iter().enumerate() {
                    axpy(g * inv, &self.embeddings[i], d_comp.row_mut(self.seen[j]));
                }
            }
        }
        if let Some(v) = &self.visual {
            let mut d_fused = Matrix::zeros(d_comp.rows(), d);
            for (i, sce) in v.head.out.iter().enumerate() {
                for (j, g) in sce.grad.iter().enumerate() {
                    axpy(g * inv, &self.embeddings[i], d_fused.row_mut(self.seen[j]));
                }
            }
            let (d_vis, d_sem, d_gamma) = v.fused.backward(&d_fused, &v.refreshed.rows, &self.semantic.composition);
            axpy(1.0, d_sem.as_slice(), d_comp.as_mut_slice());
            if model.branch != Branch::Visual {
                model.fusion.gamma.grad[(0, 0)] += d_gamma;
            }
            let (d_sn, d_on) = v.refreshed.backward(&d_vis, &mut model.gcn, states);
            let (ns, no) = v.update.backward(&v.nodes, &d_sn, &d_on, b);
            axpy(1.0, ns.as_slice(), dzs.as_mut_slice());
            axpy(1.0, no.as_slice(), dzo.as_mut_slice());
        }
        for (i, dis) in self.disentangled.iter().enumerate() {
            for (m, g) in self.state.out[i].grad.iter().enumerate() {
                axpy(g * inv, &dis.state, d_state.row_mut(m));
                axpy(g * inv, self.semantic.state.row(m), dzs.row_mut(i));
            }
            for (n, g) in self.object.out[i].grad.iter().enumerate() {
                axpy(g * inv, &dis.object, d_object.row_mut(n));
                axpy(g * inv, self.semantic.object.row(n), dzo.row_mut(i));
            }
        }
        for (i, dis) in self.disentangled.iter().enumerate() {
            model.disentangler.backward(dis, dzs.row(i), dzo.row(i));
        }
        self.semantic
            .backward(&mut model.bank, &model.encoder, &d_comp, &d_state, &d_object);
    }
}

/// `p(c'|x) + p(c|x) + p(s|x)·p(o|x)` over the target compositions.
pub fn fused_score(
    p_visual: &[f64],
    p_composition: &[f64],
    p_state: &[f64],
    p_object: &[f64],
    target_pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let k = target_pairs.len();
    if p_visual.len() != k || p_composition.len() != k {
        return Err(DuplexError::DimensionMismatch {
            op: "fused_score",
            left: (p_visual.len(), p_composition.len()),
            right: (k, k),
        });
    }
    let product = product_term(p_state, p_object, target_pairs)?;
    Ok((0..k).map(|i| p_visual[i] + p_composition[i] + product[i]).collect())
}

fn product_term(p_state: &[f64], p_object: &[f64], target_pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    target_pairs
        .iter()
        .map(|&(s, o)| match (p_state.get(s), p_object.get(o)) {
            (Some(a), Some(b)) => Ok(a * b),
            _ => Err(DuplexError::DimensionMismatch {
                op: "fused_score primitives",
                left: (s, o),
                right: (p_state.len(), p_object.len()),
            }),
        })
        .collect()
}

/// Target composition with the highest score; ties go to the smallest composition index.
pub fn predict(scores: &[f64], target: &[usize]) -> Result<usize> {
    if target.is_empty() {
        return Err(DuplexError::Empty("target space"));
    }
    if scores.len() != target.len() {
        return Err(DuplexError::DimensionMismatch {
            op: "predict",
            left: (scores.len(), 1),
            right: (target.len(), 1),
        });
    }
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] || (scores[i] == scores[best] && target[i] < target[best]) {
            best = i;
        }
    }
    Ok(target[best])
}

/// Inference formulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScoreMode {
    /// Every available composition head plus the primitive product.
    #[default]
    Full,
    /// `p(c)` alone.
    Composition,
    /// `p(c')` alone.
    Visual,
    /// `p(c') + p(c)`.
    Both,
    /// `p(s)·p(o)` alone.
    Primitives,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Full => "full",
            ScoreMode::Composition => "c",
            ScoreMode::Visual => "cprime",
            ScoreMode::Both => "cc",
            ScoreMode::Primitives => "so",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = DuplexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ScoreMode::Full),
            "c" => Ok(ScoreMode::Composition),
            "cprime" => Ok(ScoreMode::Visual),
            "cc" => Ok(ScoreMode::Both),
            "so" => Ok(ScoreMode::Primitives),
            other => Err(DuplexError::Config(format!(
                "unknown mode {other:?} (full, c, cprime, cc, so)"
            ))),
        }
    }
}

/// Per-image head probabilities over the target space and the primitive vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProbs {
    pub composition: Option<Vec<f64>>,
    pub visual: Option<Vec<f64>>,
    pub state: Vec<f64>,
    pub object: Vec<f64>,
}

fn require<'a>(head: &'a Option<Vec<f64>>, mode: ScoreMode, what: &str) -> Result<&'a [f64]> {
    head.as_deref().ok_or_else(|| {
        DuplexError::InvalidArgument(format!("mode {mode} needs the {what} head, which this model does not have"))
    })
}

pub fn ablation_score(mode: ScoreMode, heads: &HeadProbs, target_pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    match mode {
        ScoreMode::Full => match (&heads.visual, &heads.composition) {
            (Some(v), Some(c)) => fused_score(v, c, &heads.state, &heads.object, target_pairs),
            (Some(one), None) | (None, Some(one)) => {
                let product = product_term(&heads.state, &heads.object, target_pairs)?;
                if one.len() != product.len() {
                    return Err(DuplexError::DimensionMismatch {
                        op: "ablation_score",
                        left: (one.len(), 1),
                        right: (product.len(), 1),
                    });
                }
                Ok(one.iter().zip(&product).map(|(a, b)| a + b).collect())
            }
            (None, None) => Err(DuplexError::InvalidArgument("no composition head".into())),
        },
        ScoreMode::Composition => Ok(require(&heads.composition, mode, "composition")?.to_vec()),
        ScoreMode::Visual => Ok(require(&heads.visual, mode, "visual")?.to_vec()),
        ScoreMode::Both => {
            let v = require(&heads.visual, mode, "visual")?;
            let c = require(&heads.composition, mode, "composition")?;
            if v.len() != c.len() {
                return Err(DuplexError::DimensionMismatch {
                    op: "ablation_score",
                    left: (v.len(), 1),
                    right: (c.len(), 1),
                });
            }
            Ok(v.iter().zip(c).map(|(a, b)| a + b).collect())
        }
        ScoreMode::Primitives => product_term(&heads.state, &heads.object, target_pairs),
    }
}

/// Prototype matrices restricted to a target space, computed once per evaluation.
///
/// The visual side fuses the stored codebook with the text prototypes.
#[derive(Clone, Debug)]
pub struct Scorer {
    target: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    composition: Option<Matrix>,
    visual: Option<Matrix>,
    state: Matrix,
    object: Matrix,
    tau: f64,
}

impl Scorer {
    pub fn new(model: &DuplexModel, space: &CompositionSpace, target: &[usize]) -> Result<Self> {
        if target.is_empty() {
            return Err(DuplexError::Empty("target space"));
        }
        if let Some(&bad) = target.iter().find(|&&c| c >= space.num_compositions()) {
            return Err(DuplexError::UnknownId(format!("composition {bad}")));
        }
        let sem = semantic_prototypes(&model.bank, &model.encoder, space)?;
        let visual = if model.branch.has_visual() {
            let fused = fuse(model.codebook.prototypes(), &sem.composition, model.fusion.gamma())?;
            Some(fused.rows.select_rows(target))
        } else {
            None
        };
        let composition = model
            .branch
            .has_semantic()
            .then(|| sem.composition.select_rows(target));
        Ok(Scorer {
            target: target.to_vec(),
            pairs: target.iter().map(|&c| space.pair(c)).collect(),
            composition,
            visual,
            state: sem.state,
            object: sem.object,
            tau: model.fusion.tau,
        })
    }

    pub fn target(&self) -> &[usize] {
        &self.target
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Text prototypes of the target compositions.
    pub fn composition_prototypes(&self) -> Option<&Matrix> {
        self.composition.as_ref()
    }

    /// Fused visual prototypes of the target compositions.
    pub fn visual_prototypes(&self) -> Option<&Matrix> {
        self.visual.as_ref()
    }

    pub fn heads(&self, model: &DuplexModel, z: &[f64]) -> Result<HeadProbs> {
        let dis = disentangle(z, &model.disentangler)?;
        let probs = |m: &Option<Matrix>| m.as_ref().map(|p| class_probs(z, p, self.tau)).transpose();
        Ok(HeadProbs {
            composition: probs(&self.composition)?,
            visual: probs(&self.visual)?,
            state: class_probs(&dis.state, &self.state, self.tau)?,
            object: class_probs(&dis.object, &self.object, self.tau)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Split, SyntheticConfig};
    use crate::kernel::normalize;
    use crate::model::{check_gradients, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn class_probs_cases() {
        let protos = Matrix::from_rows(&[e(0, 3), e(1, 3), e(2, 3)]).unwrap();
        let z = vec![1.0 / 3f64.sqrt(); 3];
        let p = class_probs(&z, &protos, 0.01).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));

        let p = class_probs(&e(2, 3), &protos, 0.01).unwrap();
        assert!(p[2] > 0.999);

        let rows = vec![
            normalize(&[0.2, 0.5, -0.1], "r").unwrap().0,
            normalize(&[-0.3, 0.1, 0.9], "r").unwrap().0,
            normalize(&[0.6, -0.6, 0.2], "r").unwrap().0,
        ];
        let z = normalize(&[0.4, 0.4, 0.3], "z").unwrap().0;
        let p = class_probs(&z, &Matrix::from_rows(&rows).unwrap(), 1.0).unwrap();
        let ex: Vec<f64> = rows
            .iter()
            .map(|r| (r[0] * z[0] + r[1] * z[1] + r[2] * z[2]).exp())
            .collect();
        let sum: f64 = ex.iter().sum();
        for (a, b) in p.iter().zip(&ex) {
            assert!((a - b / sum).abs() < 1e-15);
        }
        assert!(class_probs(&z, &protos, 0.0).is_err());
    }

    #[test]
    fn fused_score_examples() {
        assert_eq!(fused_score(&[1.0], &[1.0], &[1.0], &[1.0], &[(0, 0)]).unwrap(), vec![3.0]);
        let s = fused_score(&[0.5, 0.5], &[0.9, 0.1], &[0.8, 0.2], &[1.0], &[(0, 0), (1, 0)]).unwrap();
        assert!((s[0] - 2.2).abs() < 1e-15 && (s[1] - 0.8).abs() < 1e-15);
        assert!(fused_score(&[0.5], &[0.9, 0.1], &[0.8, 0.2], &[1.0], &[(0, 0), (1, 0)]).is_err());
        assert!(fused_score(&[0.5], &[0.5], &[1.0], &[1.0], &[(1, 0)]).is_err());
    }

    #[test]
    fn predict_rules() {
        assert_eq!(predict(&[0.1, 0.9], &[0, 1]).unwrap(), 1);
        assert_eq!(predict(&[0.5, 0.5], &[3, 7]).unwrap(), 3);
        assert!(predict(&[], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let s: Vec<f64> = (0..5).map(|_| (rng.random_range(0..4) as f64) / 4.0).collect();
            let mut want = 0;
            for i in 0..5 {
                if s[i] > s[want] {
                    want = i;
                }
            }
            assert_eq!(predict(&s, &[0, 1, 2, 3, 4]).unwrap(), want);
        }
    }

    fn random_heads(rng: &mut ChaCha8Rng, m: usize, n: usize) -> (HeadProbs, Vec<(usize, usize)>) {
        let mut dist = |k: usize| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / z).collect::<Vec<_>>()
        };
        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
        (
            HeadProbs {
                composition: Some(dist(m * n)),
                visual: Some(dist(m * n)),
                state: dist(m),
                object: dist(n),
            },
            pairs,
        )
    }

    #[test]
    fn ablation_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (h, pairs) = random_heads(&mut rng, 3, 4);
            let full = ablation_score(ScoreMode::Full, &h, &pairs).unwrap();
            let direct = fused_score(
                h.visual.as_ref().unwrap(),
                h.composition.as_ref().unwrap(),
                &h.state,
                &h.object,
                &pairs,
            )
            .unwrap();
            assert_eq!(full, direct);
            let cc = ablation_score(ScoreMode::Both, &h, &pairs).unwrap();
            let so = ablation_score(ScoreMode::Primitives, &h, &pairs).unwrap();
            for i in 0..pairs.len() {
                assert!((cc[i] - (full[i] - so[i])).abs() < 1e-15);
            }
            // the full product sums to 3
            assert!((full.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        }
        let uniform = HeadProbs {
            composition: None,
            visual: None,
            state: vec![0.5, 0.5],
            object: vec![0.25; 4],
        };
        let pairs: Vec<(usize, usize)> = (0..2).flat_map(|a| (0..4).map(move |b| (a, b))).collect();
        let so = ablation_score(ScoreMode::Primitives, &uniform, &pairs).unwrap();
        assert!(so.iter().all(|&x| x == so[0]));
        assert!(ablation_score(ScoreMode::Composition, &uniform, &pairs).is_err());
        assert!(ablation_score(ScoreMode::Full, &uniform, &pairs).is_err());
        for m in ["full", "c", "cprime", "cc", "so"] {
            assert_eq!(m.parse::<ScoreMode>().unwrap().to_string(), m);
        }
    }

    #[test]
    fn uniform_primitives_do_not_change_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let (mut h, pairs) = random_heads(&mut rng, 2, 3);
            h.state = vec![0.5; 2];
            h.object = vec![1.0 / 3.0; 3];
            let target: Vec<usize> = (0..6).collect();
            let full = ablation_score(ScoreMode::Full, &h, &pairs).unwrap();
            let cc = ablation_score(ScoreMode::Both, &h, &pairs).unwrap();
            assert_eq!(predict(&full, &target).unwrap(), predict(&cc, &target).unwrap());
        }
    }

    fn toy(seed: u64, branch: Branch) -> (crate::data::Synthetic, DuplexModel) {
        let syn = generate_synthetic(&SyntheticConfig {
            states: 2,
            objects: 2,
            dim: 8,
            noise: 0.1,
            seen_fraction: 0.75,
            train_per_pair: 2,
            val_per_pair: 0,
            test_per_pair: 1,
            seed,
        })
        .unwrap();
        let cfg = ModelConfig {
            prompt_len: 2,
            token_dim: 6,
            hidden: 10,
            lambda: 0.9,
            gamma: 0.3,
            tau: 0.01,
            branch,
            seed,
        };
        let model = DuplexModel::init(&cfg, &syn.dataset, &syn.space, None, None).unwrap();
        (syn, model)
    }

    fn train_batch(syn: &crate::data::Synthetic) -> (Vec<&[f64]>, Vec<(usize, usize)>) {
        let idx = syn.dataset.indices(Split::Train);
        (
            idx.iter().map(|&i| syn.dataset.embedding(i)).collect(),
            idx.iter().map(|&i| syn.dataset.label(i)).collect(),
        )
    }

    #[test]
    fn probabilities_are_normalized_and_losses_sum() {
        let (syn, model) = toy(3, Branch::Full);
        let (z, l) = train_batch(&syn);
        let f = batch_losses(&model, &syn.space, &z, &l).unwrap();
        let lo = f.losses;
        assert_eq!(lo.total, lo.composition + lo.visual + lo.state + lo.object);
        assert!(lo.composition >= 0.0 && lo.visual >= 0.0 && lo.state >= 0.0 && lo.object >= 0.0);
        for rows in [
            f.composition_probs().unwrap(),
            f.visual_probs().unwrap(),
            f.state_probs(),
            f.object_probs(),
        ] {
            for r in rows {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unseen_label_rejected() {
        let (syn, model) = toy(3, Branch::Full);
        let (m, n) = syn.space.unseen_closed_pairs().next().unwrap();
        let z = syn.dataset.embedding(0);
        assert!(matches!(
            batch_losses(&model, &syn.space, &[z], &[(m, n)]),
            Err(DuplexError::UnseenLabel { .. })
        ));
    }

    #[test]
    fn uniform_heads_give_log_counts() {
        // every prototype equals the same unit vector, so all four heads are uniform
        let (syn, mut model) = toy(4, Branch::Full);
        model.bank.composition_ctx.value.fill(0.0);
        model.bank.state_ctx.value.fill(0.0);
        model.bank.object_ctx.value.fill(0.0);
        model.bank.state_tokens.value.fill(1.0);
        model.bank.object_tokens.value.fill(1.0);
        model.fusion.gamma.value[(0, 0)] = 0.0;
        let (z, l) = train_batch(&syn);
        let space = crate::data::CompositionSpace::new(
            syn.space.states().to_vec(),
            syn.space.objects().to_vec(),
            [(0, 0), (0, 1), (1, 0), (1, 1)],
            [],
        )
        .unwrap();
        let f = batch_losses(&model, &space, &z, &l).unwrap();
        let want = 2.0 * 4f64.ln() + 2.0 * 2f64.ln();
        assert!((f.losses.total - want).abs() < 1e-9, "{}", f.losses.total);
        assert!((want - 4.159).abs() < 1e-3);
    }

    #[test]
    fn gradient_matches_finite_differences_every_group() {
        for branch in [Branch::Full, Branch::Semantic, Branch::Visual] {
            let (syn, model) = toy(5, branch);
            let (z, l) = train_batch(&syn);
            for (name, err) in check_gradients(&model, &syn.space, &z, &l, 1e-5).unwrap() {
                assert!(err < 1e-4, "{branch}: {name} rel err {err}");
            }
        }
    }

    #[test]
    fn branch_heads() {
        let (syn, sp) = toy(6, Branch::Semantic);
        let (z, l) = train_batch(&syn);
        let f = batch_losses(&sp, &syn.space, &z, &l).unwrap();
        assert!(f.visual_probs().is_none() && f.losses.visual == 0.0);
        let (_, vp) = toy(6, Branch::Visual);
        let f = batch_losses(&vp, &syn.space, &z, &l).unwrap();
        assert!(f.composition_probs().is_none() && f.losses.composition == 0.0);
        let mut vp2 = vp.clone();
        f.backward(&mut vp2);
        assert_eq!(vp2.fusion.gamma.grad[(0, 0)], 0.0);
    }

    #[test]
    fn scorer_heads_are_distributions() {
        let (syn, model) = toy(7, Branch::Full);
        let target: Vec<usize> = (0..4).collect();
        let sc = Scorer::new(&model, &syn.space, &target).unwrap();
        let h = sc.heads(&model, syn.dataset.embedding(0)).unwrap();
        for p in [h.composition.as_ref().unwrap(), h.visual.as_ref().unwrap(), &h.state, &h.object] {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let full = ablation_score(ScoreMode::Full, &h, sc.pairs()).unwrap();
        assert!((full.iter().sum::<f64>() - 3.0).abs() < 1e-9);
        let closed = Scorer::new(&model, &syn.space, &[0, 2]).unwrap();
        let h = closed.heads(&model, syn.dataset.embedding(0)).unwrap();
        let full = ablation_score(ScoreMode::Full, &h, closed.pairs()).unwrap();
        assert!(full.iter().sum::<f64>() <= 3.0 + 1e-12);
    }
}
