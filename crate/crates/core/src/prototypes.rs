//! Visual prototype codebook refreshed by a one-layer GCN over 3-node star graphs.
//!
//! Each composition `(m, n)` is the center of a star whose two leaves are the
//! current state node `ν^s_m` and object node `ν^o_n`. With self-loops and
//! symmetric normalization the center row of `Â` is `[1/3, 1/√6, 1/√6]`, so
//!
//! ```text
//! ĥ_c = normalize((h_c/3 + ν^s_m/√6 + ν^o_n/√6) · W_g)
//! ```
//!
//! Node features mix a fixed dataset-level initialization with the current
//! batch: `ν ← normalize(λ·ν_init + (1−λ)·ν̂_batch)` for primitives present in
//! the batch. The stored codebook is a detached copy of the last refresh.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{CompositionSpace, EmbeddingDataset, Split};
use crate::error::{DuplexError, Result};
use crate::kernel::{axpy, dot, l2_norm, normalize, normalize_backward, Matrix, ParamTensor};

/// Center self-weight of the normalized star adjacency.
pub const STAR_SELF: f64 = 1.0 / 3.0;

/// Center-to-leaf weight, `1/√(3·2)`.
pub fn star_neighbor() -> f64 {
    1.0 / 6f64.sqrt()
}

const UNIT_TOL: f64 = 1e-9;

fn check_unit_rows(m: &Matrix, what: &str) -> Result<()> {
    for i in 0..m.rows() {
        let n = l2_norm(m.row(i));
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(DuplexError::InvalidArgument(format!("{what} row {i} has norm {n}")));
        }
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(DuplexError::InvalidArgument(format!("lambda {lambda} outside [0, 1]")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeCodebook {
    prototypes: Matrix,
    init_state_nodes: Matrix,
    init_object_nodes: Matrix,
    state_nodes: Matrix,
    object_nodes: Matrix,
    lambda: f64,
}

impl PrototypeCodebook {
    /// Current node features start equal to their initialization.
    pub fn new(prototypes: Matrix, init_state_nodes: Matrix, init_object_nodes: Matrix, lambda: f64) -> Result<Self> {
        let state_nodes = init_state_nodes.clone();
        let object_nodes = init_object_nodes.clone();
        Self::from_parts(prototypes, init_state_nodes, init_object_nodes, state_nodes, object_nodes, lambda)
    }

    pub fn from_parts(
        prototypes: Matrix,
        init_state_nodes: Matrix,
        init_object_nodes: Matrix,
        state_nodes: Matrix,
        object_nodes: Matrix,
        lambda: f64,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        let d = prototypes.cols();
        let m = init_state_nodes.rows();
        let n = init_object_nodes.rows();
        if prototypes.rows() != m * n
            || [&init_state_nodes, &init_object_nodes, &state_nodes, &object_nodes]
                .iter()
                .any(|x| x.cols() != d)
            || state_nodes.rows() != m
            || object_nodes.rows() != n
        {
            return Err(DuplexError::DimensionMismatch {
                op: "PrototypeCodebook",
                left: prototypes.shape(),
                right: (m, n),
            });
        }
        check_unit_rows(&prototypes, "prototype")?;
        check_unit_rows(&init_state_nodes, "initial state node")?;
        check_unit_rows(&init_object_nodes, "initial object node")?;
        check_unit_rows(&state_nodes, "state node")?;
        check_unit_rows(&object_nodes, "object node")?;
        Ok(PrototypeCodebook {
            prototypes,
            init_state_nodes,
            init_object_nodes,
            state_nodes,
            object_nodes,
            lambda,
        })
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn init_state_nodes(&self) -> &Matrix {
        &self.init_state_nodes
    }

    pub fn init_object_nodes(&self) -> &Matrix {
        &self.init_object_nodes
    }

    pub fn state_nodes(&self) -> &Matrix {
        &self.state_nodes
    }

    pub fn object_nodes(&self) -> &Matrix {
        &self.object_nodes
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    /// Stores the step's node features and a detached copy of the refreshed prototypes.
    pub fn commit(&mut self, nodes: &NodeUpdate, refreshed: &Matrix) -> Result<()> {
        if refreshed.shape() != self.prototypes.shape()
            || nodes.state.shape() != self.state_nodes.shape()
            || nodes.object.shape() != self.object_nodes.shape()
        {
            return Err(DuplexError::DimensionMismatch {
                op: "PrototypeCodebook::commit",
                left: refreshed.shape(),
                right: self.prototypes.shape(),
            });
        }
        self.prototypes = refreshed.clone();
        self.state_nodes = nodes.state.clone();
        self.object_nodes = nodes.object.clone();
        Ok(())
    }
}

/// `M·N` random unit rows, deterministic in `seed`.
pub fn init_codebook(states: usize, objects: usize, dim: usize, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Matrix::gaussian(states * objects, dim, 1.0 / (dim as f64).sqrt(), &mut rng);
    let mut out = Matrix::zeros(states * objects, dim);
    for i in 0..raw.rows() {
        out.row_mut(i).copy_from_slice(&normalize(raw.row(i), "codebook row")?.0);
    }
    Ok(out)
}

/// Normalized mean training embedding per state and per object.
pub fn init_node_features(dataset: &EmbeddingDataset, space: &CompositionSpace) -> Result<(Matrix, Matrix)> {
    let d = dataset.dim();
    let (m, n) = (space.num_states(), space.num_objects());
    let mut state_sum = Matrix::zeros(m, d);
    let mut object_sum = Matrix::zeros(n, d);
    let mut state_count = vec![0usize; m];
    let mut object_count = vec![0usize; n];
    for i in dataset.indices(Split::Train) {
        let (s, o) = dataset.label(i);
        axpy(1.0, dataset.embedding(i), state_sum.row_mut(s));
        axpy(1.0, dataset.embedding(i), object_sum.row_mut(o));
        state_count[s] += 1;
        object_count[o] += 1;
    }
    let finish = |sum: &Matrix, count: &[usize], kind: &str, names: &[String]| -> Result<Matrix> {
        let mut out = Matrix::zeros(sum.rows(), d);
        for (r, &c) in count.iter().enumerate() {
            if c == 0 {
                return Err(DuplexError::InvalidArgument(format!(
                    "{kind} {:?} has no training images",
                    names[r]
                )));
            }
            let mean: Vec<f64> = sum.row(r).iter().map(|x| x / c as f64).collect();
            out.row_mut(r).copy_from_slice(&normalize(&mean, "initial node feature")?.0);
        }
        Ok(out)
    };
    Ok((
        finish(&state_sum, &state_count, "state", space.states())?,
        finish(&object_sum, &object_count, "object", space.objects())?,
    ))
}

/// Per-primitive batch means of disentangled features.
#[derive(Clone, Debug)]
pub struct BatchNodes {
    pub state: Matrix,
    pub state_present: Vec<bool>,
    pub object: Matrix,
    pub object_present: Vec<bool>,
    state_members: Vec<Vec<usize>>,
    object_members: Vec<Vec<usize>>,
    state_norms: Vec<f64>,
    object_norms: Vec<f64>,
}

fn group_means(features: &[&[f64]], keys: &[usize], groups: usize, dim: usize) -> Result<(Matrix, Vec<bool>, Vec<Vec<usize>>, Vec<f64>)> {
    let mut members = vec![Vec::new(); groups];
    for (i, &k) in keys.iter().enumerate() {
        members[k].push(i);
    }
    let mut means = Matrix::zeros(groups, dim);
    let mut norms = vec![0.0; groups];
    for (g, mem) in members.iter().enumerate() {
        if mem.is_empty() {
            continue;
        }
        let mut sum = vec![0.0; dim];
        for &i in mem {
            axpy(1.0, features[i], &mut sum);
        }
        let inv = 1.0 / mem.len() as f64;
        sum.iter_mut().for_each(|x| *x *= inv);
        let (unit, norm) = normalize(&sum, "batch node feature")?;
        means.row_mut(g).copy_from_slice(&unit);
        norms[g] = norm;
    }
    let present = members.iter().map(|m| !m.is_empty()).collect();
    Ok((means, present, members, norms))
}

/// Batch node features from disentangled state/object features and their labels.
pub fn batch_node_features(
    state_features: &[&[f64]],
    object_features: &[&[f64]],
    labels: &[(usize, usize)],
    states: usize,
    objects: usize,
) -> Result<BatchNodes> {
    if labels.is_empty() {
        return Err(DuplexError::Empty("batch"));
    }
    if state_features.len() != labels.len() || object_features.len() != labels.len() {
        return Err(DuplexError::DimensionMismatch {
            op: "batch_node_features",
            left: (state_features.len(), object_features.len()),
            right: (labels.len(), labels.len()),
        });
    }
    let dim = state_features[0].len();
    let s_keys: Vec<usize> = labels.iter().map(|l| l.0).collect();
    let o_keys: Vec<usize> = labels.iter().map(|l| l.1).collect();
    let (state, state_present, state_members, state_norms) = group_means(state_features, &s_keys, states, dim)?;
    let (object, object_present, object_members, object_norms) = group_means(object_features, &o_keys, objects, dim)?;
    Ok(BatchNodes {
        state,
        state_present,
        object,
        object_present,
        state_members,
        object_members,
        state_norms,
        object_norms,
    })
}

/// Node features after the λ-mixed update, with what the backward pass needs.
#[derive(Clone, Debug)]
pub struct NodeUpdate {
    pub state: Matrix,
    pub object: Matrix,
    lambda: f64,
    state_mixed: Vec<Option<f64>>,
    object_mixed: Vec<Option<f64>>,
}

fn mix(
    init: &Matrix,
    current: &Matrix,
    batch: &Matrix,
    present: &[bool],
    lambda: f64,
) -> Result<(Matrix, Vec<Option<f64>>)> {
    let mut out = current.clone();
    let mut norms = vec![None; present.len()];
    for (r, &p) in present.iter().enumerate() {
        if !p {
            continue;
        }
        if lambda == 1.0 {
            out.row_mut(r).copy_from_slice(init.row(r));
        } else if lambda == 0.0 {
            out.row_mut(r).copy_from_slice(batch.row(r));
        } else {
            let w: Vec<f64> = init
                .row(r)
                .iter()
                .zip(batch.row(r))
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                .collect();
            let (unit, norm) = normalize(&w, "mixed node feature")?;
            out.row_mut(r).copy_from_slice(&unit);
            norms[r] = Some(norm);
        }
    }
    Ok((out, norms))
}

/// `ν ← normalize(λ·ν_init + (1−λ)·ν̂)` for present primitives; absent ones keep their value.
pub fn update_nodes(codebook: &PrototypeCodebook, batch: &BatchNodes) -> Result<NodeUpdate> {
    let lambda = codebook.lambda;
    check_lambda(lambda)?;
    let (state, state_mixed) = mix(
        &codebook.init_state_nodes,
        &codebook.state_nodes,
        &batch.state,
        &batch.state_present,
        lambda,
    )?;
    let (object, object_mixed) = mix(
        &codebook.init_object_nodes,
        &codebook.object_nodes,
        &batch.object,
        &batch.object_present,
        lambda,
    )?;
    Ok(NodeUpdate {
        state,
        object,
        lambda,
        state_mixed,
        object_mixed,
    })
}

impl NodeUpdate {
    /// Maps node-feature gradients back to per-image disentangled-feature gradients.
    ///
    /// Returns `(d z^s, d z^o)` indexed like the batch.
    pub fn backward(&self, batch: &BatchNodes, d_state: &Matrix, d_object: &Matrix, batch_len: usize) -> (Matrix, Matrix) {
        let dim = self.state.cols();
        let mut dzs = Matrix::zeros(batch_len, dim);
        let mut dzo = Matrix::zeros(batch_len, dim);
        let lambda = self.lambda;
        let run = |nodes: &Matrix,
                       d_nodes: &Matrix,
                       mixed: &[Option<f64>],
                       present: &[bool],
                       batch_means: &Matrix,
                       batch_norms: &[f64],
                       members: &[Vec<usize>],
                       out: &mut Matrix| {
            if lambda == 1.0 {
                return;
            }
            for r in 0..present.len() {
                if !present[r] {
                    continue;
                }
                let dn = d_nodes.row(r);
                if dn.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let d_batch: Vec<f64> = match mixed[r] {
                    Some(norm) => normalize_backward(nodes.row(r), norm, dn)
                        .into_iter()
                        .map(|g| (1.0 - lambda) * g)
                        .collect(),
                    None => dn.to_vec(),
                };
                let d_mean = normalize_backward(batch_means.row(r), batch_norms[r], &d_batch);
                let inv = 1.0 / members[r].len() as f64;
                for &i in &members[r] {
                    axpy(inv, &d_mean, out.row_mut(i));
                }
            }
        };
        run(
            &self.state,
            d_state,
            &self.state_mixed,
            &batch.state_present,
            &batch.state,
            &batch.state_norms,
            &batch.state_members,
            &mut dzs,
        );
        run(
            &self.object,
            d_object,
            &self.object_mixed,
            &batch.object_present,
            &batch.object,
            &batch.object_norms,
            &batch.object_members,
            &mut dzo,
        );
        (dzs, dzo)
    }
}

/// Learnable `d × d` graph weight, initialized to the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayer {
    pub weight: ParamTensor,
}

impl GcnLayer {
    pub fn identity(dim: usize) -> Self {
        GcnLayer {
            weight: ParamTensor::new(Matrix::identity(dim)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StarRefresh {
    pub unit: Vec<f64>,
    norm: f64,
    aggregated: Vec<f64>,
}

/// Refreshes one prototype from its star graph.
pub fn gcn_refresh(center: &[f64], state_node: &[f64], object_node: &[f64], weight: &Matrix) -> Result<StarRefresh> {
    let d = center.len();
    if state_node.len() != d || object_node.len() != d || weight.shape() != (d, d) {
        return Err(DuplexError::DimensionMismatch {
            op: "gcn_refresh",
            left: (1, d),
            right: weight.shape(),
        });
    }
    let nb = star_neighbor();
    let aggregated: Vec<f64> = (0..d)
        .map(|i| STAR_SELF * center[i] + nb * state_node[i] + nb * object_node[i])
        .collect();
    let mut q = vec![0.0; d];
    for (i, &g) in aggregated.iter().enumerate() {
        axpy(g, weight.row(i), &mut q);
    }
    let (unit, norm) = normalize(&q, "graph refresh")?;
    Ok(StarRefresh { unit, norm, aggregated })
}

/// Refreshed prototypes for every composition, seen or not.
#[derive(Clone, Debug)]
pub struct Refreshed {
    pub rows: Matrix,
    stars: Vec<StarRefresh>,
    objects: usize,
}

pub fn refresh_all(codebook: &Matrix, state_nodes: &Matrix, object_nodes: &Matrix, gcn: &GcnLayer) -> Result<Refreshed> {
    let (m, n) = (state_nodes.rows(), object_nodes.rows());
    if codebook.rows() != m * n {
        return Err(DuplexError::DimensionMismatch {
            op: "refresh_all",
            left: codebook.shape(),
            right: (m, n),
        });
    }
    let mut stars = Vec::with_capacity(m * n);
    let mut rows = Matrix::zeros(m * n, codebook.cols());
    for c in 0..m * n {
        let s = gcn_refresh(codebook.row(c), state_nodes.row(c / n), object_nodes.row(c % n), &gcn.weight.value)?;
        rows.row_mut(c).copy_from_slice(&s.unit);
        stars.push(s);
    }
    Ok(Refreshed { rows, stars, objects: n })
}

impl Refreshed {
    /// Accumulates `W_g` gradients and returns gradients for the state and object nodes.
    pub fn backward(&self, d_rows: &Matrix, gcn: &mut GcnLayer, states: usize) -> (Matrix, Matrix) {
        let d = self.rows.cols();
        let n = self.objects;
        let nb = star_neighbor();
        let mut d_state = Matrix::zeros(states, d);
        let mut d_object = Matrix::zeros(n, d);
        for (c, star) in self.stars.iter().enumerate() {
            let dr = d_rows.row(c);
            if dr.iter().all(|&x| x == 0.0) {
                continue;
            }
            let dq = normalize_backward(&star.unit, star.norm, dr);
            for (i, &g) in star.aggregated.iter().enumerate() {
                axpy(g, &dq, gcn.weight.grad.row_mut(i));
            }
            let dg: Vec<f64> = (0..d).map(|i| dot(gcn.weight.value.row(i), &dq)).collect();
            axpy(nb, &dg, d_state.row_mut(c / n));
            axpy(nb, &dg, d_object.row_mut(c % n));
        }
        (d_state, d_object)
    }
}

/// Scalar semantic/visual mixing weight γ ∈ [0, 1] and the softmax temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    pub gamma: ParamTensor,
    pub tau: f64,
}

impl FusionHead {
    pub fn new(gamma: f64, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(DuplexError::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(DuplexError::InvalidArgument(format!("tau must be positive, got {tau}")));
        }
        Ok(FusionHead {
            gamma: ParamTensor::new(Matrix::from_vec(1, 1, vec![gamma])?),
            tau,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.value[(0, 0)]
    }

    pub fn clamp_gamma(&mut self) {
        let g = &mut self.gamma.value[(0, 0)];
        *g = g.clamp(0.0, 1.0);
    }
}

#[derive(Clone, Debug)]
pub struct Fused {
    pub rows: Matrix,
    norms: Vec<f64>,
    gamma: f64,
}

/// Row `c` = `normalize(γ·ĥ_c + (1−γ)·t_c)`; γ = 0 and γ = 1 return the inputs exactly.
pub fn fuse(visual: &Matrix, semantic: &Matrix, gamma: f64) -> Result<Fused> {
    if visual.shape() != semantic.shape() {
        return Err(DuplexError::DimensionMismatch {
            op: "fuse",
            left: visual.shape(),
            right: semantic.shape(),
        });
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(DuplexError::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
    }
    let k = visual.rows();
    if gamma == 1.0 || gamma == 0.0 {
        let src = if gamma == 1.0 { visual } else { semantic };
        let norms = (0..k).map(|i| l2_norm(src.row(i))).collect();
        return Ok(Fused {
            rows: src.clone(),
            norms,
            gamma,
        });
    }
    let mut rows = Matrix::zeros(k, visual.cols());
    let mut norms = Vec::with_capacity(k);
    for i in 0..k {
        let f: Vec<f64> = visual
            .row(i)
            .iter()
            .zip(semantic.row(i))
            .map(|(h, t)| gamma * h + (1.0 - gamma) * t)
            .collect();
        let (unit, norm) = normalize(&f, "prototype fusion")?;
        rows.row_mut(i).copy_from_slice(&unit);
        norms.push(norm);
    }
    Ok(Fused { rows, norms, gamma })
}

impl Fused {
    /// Returns `(d visual, d semantic, d γ)`.
    pub fn backward(&self, d_rows: &Matrix, visual: &Matrix, semantic: &Matrix) -> (Matrix, Matrix, f64) {
        let (k, d) = self.rows.shape();
        let mut dv = Matrix::zeros(k, d);
        let mut ds = Matrix::zeros(k, d);
        let mut dgamma = 0.0;
        for i in 0..k {
            let dr = d_rows.row(i);
            if dr.iter().all(|&x| x == 0.0) {
                continue;
            }
            let df = normalize_backward(self.rows.row(i), self.norms[i], dr);
            axpy(self.gamma, &df, dv.row_mut(i));
            axpy(1.0 - self.gamma, &df, ds.row_mut(i));
            dgamma += df
                .iter()
                .zip(visual.row(i).iter().zip(semantic.row(i)))
                .map(|(g, (h, t))| g * (h - t))
                .sum::<f64>();
        }
        (dv, ds, dgamma)
    }
}
