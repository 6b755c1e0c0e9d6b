use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::space::CompositionSpace;
use crate::error::{DuplexError, Result};
use crate::kernel::{l2_norm, normalize, Matrix};

/// Tolerance on row norms of stored embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DuplexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DuplexError::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Global image embeddings with their (state, object) labels and split.
///
/// `embeddings` rows are unit-norm and are what the model consumes.
/// `stored` is the 32-bit form written to disk; keeping it lets a loaded
/// dataset be written back byte for byte.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    embeddings: Matrix,
    stored: Vec<f32>,
    labels: Vec<(usize, usize)>,
    splits: Vec<Split>,
}

impl EmbeddingDataset {
    /// Builds a dataset from unit-norm `f64` rows.
    pub fn new(
        embeddings: Matrix,
        labels: Vec<(usize, usize)>,
        splits: Vec<Split>,
        space: &CompositionSpace,
    ) -> Result<Self> {
        for i in 0..embeddings.rows() {
            let n = l2_norm(embeddings.row(i));
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(DuplexError::InvalidArgument(format!(
                    "embedding row {i} has norm {n}, expected 1"
                )));
            }
        }
        let stored = embeddings.as_slice().iter().map(|&x| x as f32).collect();
        let ds = EmbeddingDataset {
            embeddings,
            stored,
            labels,
            splits,
        };
        ds.validate(space)?;
        Ok(ds)
    }

    /// Builds a dataset from 32-bit rows, promoting and re-normalizing them.
    pub fn from_stored(
        stored: Vec<f32>,
        dim: usize,
        labels: Vec<(usize, usize)>,
        splits: Vec<Split>,
        space: &CompositionSpace,
    ) -> Result<Self> {
        if dim == 0 || !stored.len().is_multiple_of(dim) {
            return Err(DuplexError::DimensionMismatch {
                op: "EmbeddingDataset::from_stored",
                left: (stored.len(), 1),
                right: (0, dim),
            });
        }
        let rows = stored.len() / dim;
        let mut data = Vec::with_capacity(stored.len());
        for r in 0..rows {
            let row: Vec<f64> = stored[r * dim..(r + 1) * dim].iter().map(|&x| x as f64).collect();
            let (unit, _) = normalize(&row, "stored embedding row")?;
            data.extend(unit);
        }
        let ds = EmbeddingDataset {
            embeddings: Matrix::from_vec(rows, dim, data)?,
            stored,
            labels,
            splits,
        };
        ds.validate(space)?;
        Ok(ds)
    }

    fn validate(&self, space: &CompositionSpace) -> Result<()> {
        let n = self.embeddings.rows();
        if self.labels.len() != n || self.splits.len() != n {
            return Err(DuplexError::DimensionMismatch {
                op: "EmbeddingDataset labels",
                left: (n, self.embeddings.cols()),
                right: (self.labels.len(), self.splits.len()),
            });
        }
        if !self.embeddings.is_finite() {
            return Err(DuplexError::NonFinite("embeddings".into()));
        }
        for (&(m, o), &split) in self.labels.iter().zip(&self.splits) {
            if m >= space.num_states() || o >= space.num_objects() {
                return Err(DuplexError::InvalidArgument(format!(
                    "label ({m}, {o}) outside vocabulary"
                )));
            }
            if split == Split::Train && !space.is_seen(m, o) {
                return Err(DuplexError::UnseenLabel { state: m, object: o });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn stored(&self) -> &[f32] {
        &self.stored
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    pub fn label(&self, i: usize) -> (usize, usize) {
        self.labels[i]
    }

    pub fn labels(&self) -> &[(usize, usize)] {
        &self.labels
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Row indices belonging to `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Shuffled training-row batches for one epoch. The last short batch is kept.
pub fn batches(dataset: &EmbeddingDataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(DuplexError::InvalidArgument("batch size must be ≥ 1".into()));
    }
    let mut train = dataset.indices(Split::Train);
    if train.is_empty() {
        return Err(DuplexError::Empty("train split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    train.shuffle(&mut rng);
    Ok(train.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> CompositionSpace {
        CompositionSpace::new(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into()],
            [(0, 0), (1, 1), (0, 1)],
            [(1, 0)],
        )
        .unwrap()
    }

    fn toy(n: usize) -> EmbeddingDataset {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| normalize(&[1.0, i as f64, 0.5], "t").unwrap().0)
            .collect();
        EmbeddingDataset::new(
            Matrix::from_rows(&rows).unwrap(),
            vec![(0, 0); n],
            vec![Split::Train; n],
            &space(),
        )
        .unwrap()
    }

    #[test]
    fn batch_sizes_keep_short_tail() {
        let b = batches(&toy(10), 4, 7, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn batches_are_deterministic_permutations() {
        let ds = toy(23);
        let a = batches(&ds, 5, 99, 3).unwrap();
        assert_eq!(a, batches(&ds, 5, 99, 3).unwrap());
        assert_ne!(a, batches(&ds, 5, 99, 4).unwrap());
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn empty_train_split_and_zero_batch_rejected() {
        let ds = toy(3);
        assert!(batches(&ds, 0, 1, 0).is_err());
        let test_only = EmbeddingDataset::new(
            ds.embeddings().clone(),
            ds.labels().to_vec(),
            vec![Split::Test; 3],
            &space(),
        )
        .unwrap();
        assert!(matches!(batches(&test_only, 2, 1, 0), Err(DuplexError::Empty(_))));
    }

    #[test]
    fn unseen_training_label_rejected() {
        let ds = toy(1);
        let err = EmbeddingDataset::new(ds.embeddings().clone(), vec![(1, 0)], vec![Split::Train], &space());
        assert!(matches!(err, Err(DuplexError::UnseenLabel { state: 1, object: 0 })));
        // the same pair is fine at test time
        EmbeddingDataset::new(ds.embeddings().clone(), vec![(1, 0)], vec![Split::Test], &space()).unwrap();
    }

    #[test]
    fn non_unit_rows_rejected() {
        let m = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(EmbeddingDataset::new(m, vec![(0, 0)], vec![Split::Test], &space()).is_err());
    }
}
