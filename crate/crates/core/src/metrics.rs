//! Seen/unseen bias sweep (S, U, HM, AUC) and top-k retrieval.
//!
//! The calibration bias is added to unseen-class scores. An image predicts an
//! unseen class at bias `b` when `b > max_seen − max_unseen`; at equality the
//! usual argmax tie rule (smaller class index) decides. Every achievable
//! (seen acc, unseen acc) pair is therefore realized at one of the per-image
//! thresholds, a midpoint between consecutive thresholds, or ±∞.

use std::fmt::Write as _;

use crate::data::World;
use crate::error::{DuplexError, Result};
use crate::kernel::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

/// Sweep points sorted by bias.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCurve {
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub world: World,
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
    pub auc: f64,
    pub curve: EvalCurve,
}

/// Best seen and best unseen class of one score row: `(value, index)` each.
#[derive(Clone, Copy, Debug)]
struct RowSplit {
    seen: (f64, usize),
    unseen: (f64, usize),
}

impl RowSplit {
    fn new(row: &[f64], unseen: &[bool]) -> Self {
        let mut s = (f64::NEG_INFINITY, usize::MAX);
        let mut u = (f64::NEG_INFINITY, usize::MAX);
        for (c, (&v, &is_unseen)) in row.iter().zip(unseen).enumerate() {
            let slot = if is_unseen { &mut u } else { &mut s };
            if slot.1 == usize::MAX || v > slot.0 {
                *slot = (v, c);
            }
        }
        RowSplit { seen: s, unseen: u }
    }

    fn threshold(&self) -> f64 {
        self.seen.0 - self.unseen.0
    }

    fn predict(&self, bias: f64) -> usize {
        let t = self.threshold();
        if bias > t || (bias == t && self.unseen.1 < self.seen.1) {
            self.unseen.1
        } else {
            self.seen.1
        }
    }
}

fn check_mask(scores: &Matrix, unseen: &[bool]) -> Result<()> {
    if unseen.len() != scores.cols() {
        return Err(DuplexError::DimensionMismatch {
            op: "unseen mask",
            left: scores.shape(),
            right: (1, unseen.len()),
        });
    }
    if unseen.iter().all(|&u| u) {
        return Err(DuplexError::InvalidArgument("target space has no seen classes".into()));
    }
    if unseen.iter().all(|&u| !u) {
        return Err(DuplexError::InvalidArgument("target space has no unseen classes".into()));
    }
    if !scores.is_finite() {
        return Err(DuplexError::NonFinite("score matrix".into()));
    }
    Ok(())
}

fn splits(scores: &Matrix, unseen: &[bool]) -> Vec<RowSplit> {
    (0..scores.rows()).map(|i| RowSplit::new(scores.row(i), unseen)).collect()
}

fn candidates_from(rows: &[RowSplit]) -> Vec<f64> {
    let mut t: Vec<f64> = rows.iter().map(RowSplit::threshold).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    let mut out = Vec::with_capacity(2 * t.len() + 1);
    out.push(f64::NEG_INFINITY);
    for (i, &x) in t.iter().enumerate() {
        if i > 0 {
            let mid = t[i - 1] + (x - t[i - 1]) / 2.0;
            if mid > t[i - 1] && mid < x {
                out.push(mid);
            }
        }
        out.push(x);
    }
    out.push(f64::INFINITY);
    out
}

/// Sorted biases covering every distinct sweep state, with ±∞ sentinels.
pub fn candidate_biases(scores: &Matrix, unseen: &[bool]) -> Result<Vec<f64>> {
    check_mask(scores, unseen)?;
    Ok(candidates_from(&splits(scores, unseen)))
}

/// Seen and unseen accuracy at every candidate bias.
///
/// `labels[i]` is the true class (column) of image `i`; the image counts
/// toward unseen accuracy when that class is unseen.
pub fn bias_sweep(scores: &Matrix, labels: &[usize], unseen: &[bool]) -> Result<EvalCurve> {
    check_mask(scores, unseen)?;
    if labels.len() != scores.rows() {
        return Err(DuplexError::DimensionMismatch {
            op: "bias_sweep labels",
            left: scores.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= scores.cols()) {
        return Err(DuplexError::InvalidArgument(format!("label {bad} outside {} classes", scores.cols())));
    }
    let n_unseen = labels.iter().filter(|&&l| unseen[l]).count();
    let n_seen = labels.len() - n_unseen;
    if n_seen == 0 {
        return Err(DuplexError::InvalidArgument("no images with seen labels".into()));
    }
    if n_unseen == 0 {
        return Err(DuplexError::InvalidArgument("no images with unseen labels".into()));
    }
    let rows = splits(scores, unseen);
    let points = candidates_from(&rows)
        .into_iter()
        .map(|bias| {
            let (mut hit_s, mut hit_u) = (0usize, 0usize);
            for (r, &l) in rows.iter().zip(labels) {
                if r.predict(bias) == l {
                    if unseen[l] {
                        hit_u += 1;
                    } else {
                        hit_s += 1;
                    }
                }
            }
            CurvePoint {
                bias,
                seen_acc: hit_s as f64 / n_seen as f64,
                unseen_acc: hit_u as f64 / n_unseen as f64,
            }
        })
        .collect();
    Ok(EvalCurve { points })
}

fn harmonic(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Trapezoidal area under the upper envelope of `(seen, unseen)` points.
pub fn envelope_auc(points: &[(f64, f64)]) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    // walk from the largest seen accuracy down, keeping the running best unseen
    let mut env: Vec<(f64, f64)> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for &(s, u) in pts.iter().rev() {
        best = best.max(u);
        match env.last_mut() {
            Some(last) if last.0 == s => last.1 = best,
            _ => env.push((s, best)),
        }
    }
    env.reverse();
    env.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

pub fn summarize(curve: &EvalCurve, world: World) -> Result<MetricsReport> {
    let (first, last) = match (curve.points.first(), curve.points.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(DuplexError::Empty("curve")),
    };
    let hm = curve
        .points
        .iter()
        .map(|p| harmonic(p.seen_acc, p.unseen_acc))
        .fold(0.0, f64::max);
    let pairs: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.seen_acc, p.unseen_acc)).collect();
    Ok(MetricsReport {
        world,
        seen: first.seen_acc,
        unseen: last.unseen_acc,
        hm,
        auc: envelope_auc(&pairs),
        curve: curve.clone(),
    })
}

impl MetricsReport {
    /// `metric=value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "world={}\nS={}\nU={}\nHM={}\nAUC={}\n",
            self.world, self.seen, self.unseen, self.hm, self.auc
        )
    }
}

impl EvalCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bias,seen_acc,unseen_acc\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.bias, p.seen_acc, p.unseen_acc);
        }
        out
    }
}

/// Indices of the `k` gallery rows with the largest dot product, best first; ties by smaller index.
pub fn topk(query: &[f64], gallery: &Matrix, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > gallery.rows() {
        return Err(DuplexError::InvalidArgument(format!(
            "k={k} outside 1..={}",
            gallery.rows()
        )));
    }
    if query.len() != gallery.cols() {
        return Err(DuplexError::DimensionMismatch {
            op: "topk",
            left: (1, query.len()),
            right: gallery.shape(),
        });
    }
    let scores: Vec<f64> = (0..gallery.rows()).map(|r| dot(query, gallery.row(r))).collect();
    let mut idx: Vec<usize> = (0..gallery.rows()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_image_candidates() {
        let c = candidate_biases(&m(&[&[0.7, 0.2]]), &[false, true]).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[0], f64::NEG_INFINITY);
        assert_eq!(c[2], f64::INFINITY);
        let dup = candidate_biases(&m(&[&[0.7, 0.2], &[0.7, 0.2]]), &[false, true]).unwrap();
        assert_eq!(dup, c);
    }

    #[test]
    fn degenerate_masks_rejected() {
        let s = m(&[&[0.1, 0.2]]);
        assert!(candidate_biases(&s, &[true, true]).is_err());
        assert!(candidate_biases(&s, &[false, false]).is_err());
        assert!(bias_sweep(&s, &[0], &[false, true]).is_err());
    }

    #[test]
    fn hand_instance_matches_intervals() {
        // classes 0,1 seen, 2 unseen
        let scores = m(&[&[0.9, 0.1, 0.5], &[0.2, 0.6, 0.3], &[0.4, 0.1, 0.2]]);
        let labels = [0, 1, 2];
        let unseen = [false, false, true];
        let curve = bias_sweep(&scores, &labels, &unseen).unwrap();
        // thresholds: 0.4, 0.3, 0.2; image 2 flips to unseen for b > 0.2
        let at = |b: f64| {
            let p = curve.points.iter().find(|p| p.bias == b).unwrap();
            (p.seen_acc, p.unseen_acc)
        };
        assert_eq!(at(f64::NEG_INFINITY), (1.0, 0.0));
        assert_eq!(at(f64::INFINITY), (0.0, 1.0));
        let mid = curve.points.iter().find(|p| p.bias > 0.2 && p.bias < 0.3).unwrap();
        assert_eq!((mid.seen_acc, mid.unseen_acc), (1.0, 1.0));
        let r = summarize(&curve, World::Closed).unwrap();
        assert_eq!((r.seen, r.unseen, r.hm, r.auc), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn perfect_and_wrong() {
        let unseen = [false, false, true, true];
        let labels = [0, 1, 2, 3];
        let mut perfect = Matrix::zeros(4, 4);
        for i in 0..4 {
            perfect[(i, i)] = 1.0;
        }
        let r = summarize(&bias_sweep(&perfect, &labels, &unseen).unwrap(), World::Open).unwrap();
        assert_eq!((r.seen, r.unseen, r.hm, r.auc), (1.0, 1.0, 1.0, 1.0));
        let mut wrong = Matrix::zeros(4, 4);
        for (i, w) in [1, 0, 3, 2].into_iter().enumerate() {
            wrong[(i, w)] = 1.0;
        }
        let r = summarize(&bias_sweep(&wrong, &labels, &unseen).unwrap(), World::Open).unwrap();
        assert_eq!((r.seen, r.unseen, r.hm, r.auc), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn candidates_cover_dense_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, k) = (20, 12);
        let mut scores = Matrix::zeros(n, k);
        for x in scores.as_mut_slice() {
            *x = rng.random_range(0..16) as f64 / 16.0;
        }
        let unseen: Vec<bool> = (0..k).map(|c| c % 3 == 0).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i * 5) % k).collect();
        let curve = bias_sweep(&scores, &labels, &unseen).unwrap();
        let mut from_candidates: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.seen_acc, p.unseen_acc)).collect();
        from_candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        from_candidates.dedup();
        // 10^5 biases on a dyadic grid that contains every threshold exactly
        let mut grid: Vec<(f64, f64)> = Vec::new();
        for j in 0..100_000 {
            let b = -1.5 + j as f64 / 32768.0;
            let hits = |want_unseen: bool| {
                let idx: Vec<usize> = (0..n).filter(|&i| unseen[labels[i]] == want_unseen).collect();
                let ok = idx
                    .iter()
                    .filter(|&&i| {
                        let row: Vec<f64> = (0..k).map(|c| scores[(i, c)] + if unseen[c] { b } else { 0.0 }).collect();
                        let mut best = 0;
                        for c in 1..k {
                            if row[c] > row[best] {
                                best = c;
                            }
                        }
                        best == labels[i]
                    })
                    .count();
                ok as f64 / idx.len() as f64
            };
            grid.push((hits(false), hits(true)));
        }
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        grid.dedup();
        assert_eq!(grid, from_candidates);
    }

    #[test]
    fn topk_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Matrix::gaussian(6, 4, 1.0, &mut rng);
        let q = g.row(3).to_vec();
        assert_eq!(topk(&q, &g, 1).unwrap()[0], topk(&q, &g, 6).unwrap()[0]);
        let mut all = topk(&q, &g, 6).unwrap();
        let mut oracle: Vec<(f64, usize)> = (0..6).map(|r| (-dot(&q, g.row(r)), r)).collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(all, oracle.iter().map(|x| x.1).collect::<Vec<_>>());
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert!(topk(&q, &g, 0).is_err() && topk(&q, &g, 7).is_err());
        let ties = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(topk(&[1.0, 0.0], &ties, 2).unwrap(), vec![0, 2]);
    }

    #[test]
    fn report_text_layout() {
        let curve = EvalCurve {
            points: vec![
                CurvePoint { bias: f64::NEG_INFINITY, seen_acc: 0.5, unseen_acc: 0.0 },
                CurvePoint { bias: f64::INFINITY, seen_acc: 0.0, unseen_acc: 0.25 },
            ],
        };
        let r = summarize(&curve, World::Closed).unwrap();
        assert_eq!(r.to_text(), "world=closed\nS=0.5\nU=0.25\nHM=0\nAUC=0.0625\n");
        assert_eq!(curve.to_csv(), "bias,seen_acc,unseen_acc\n-inf,0.5,0\ninf,0,0.25\n");
    }

    fn instance() -> impl Strategy<Value = (Matrix, Vec<usize>, Vec<bool>)> {
        (2usize..8, 2usize..20).prop_flat_map(|(k, n)| {
            (
                proptest::collection::vec(0u8..8, n * k),
                proptest::collection::vec(0..k, n),
                proptest::collection::vec(any::<bool>(), k),
            )
                .prop_filter_map("needs seen and unseen", move |(raw, labels, mut unseen)| {
                    unseen[0] = false;
                    unseen[k - 1] = true;
                    let seen_lab = labels.iter().any(|&l| !unseen[l]);
                    let unseen_lab = labels.iter().any(|&l| unseen[l]);
                    (seen_lab && unseen_lab).then(|| {
                        let scores = Matrix::from_vec(n, k, raw.iter().map(|&x| x as f64 / 8.0).collect()).unwrap();
                        (scores, labels, unseen)
                    })
                })
        })
    }

    proptest! {
        #[test]
        fn sweep_is_monotone((scores, labels, unseen) in instance()) {
            let c = bias_sweep(&scores, &labels, &unseen).unwrap();
            for w in c.points.windows(2) {
                prop_assert!(w[0].bias < w[1].bias);
                prop_assert!(w[1].seen_acc <= w[0].seen_acc);
                prop_assert!(w[1].unseen_acc >= w[0].unseen_acc);
            }
            let r = summarize(&c, World::Closed).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.auc));
            prop_assert!(r.hm <= 1.0);
        }

        #[test]
        fn scaling_scores_leaves_report_unchanged((scores, labels, unseen) in instance()) {
            let base = summarize(&bias_sweep(&scores, &labels, &unseen).unwrap(), World::Open).unwrap();
            let mut scaled = scores.clone();
            scaled.as_mut_slice().iter_mut().for_each(|x| *x *= 2.0);
            let r = summarize(&bias_sweep(&scaled, &labels, &unseen).unwrap(), World::Open).unwrap();
            prop_assert_eq!((base.seen, base.unseen, base.hm, base.auc), (r.seen, r.unseen, r.hm, r.auc));
            for (a, b) in base.curve.points.iter().zip(&r.curve.points) {
                prop_assert_eq!(a.bias * 2.0, b.bias);
            }
        }

        #[test]
        fn dominated_curve_has_smaller_auc(pts in proptest::collection::vec((0u8..=10, 0u8..=10, 0u8..=10), 1..12)) {
            let upper: Vec<(f64, f64)> = pts.iter().map(|&(s, u, _)| (s as f64 / 10.0, u as f64 / 10.0)).collect();
            let lower: Vec<(f64, f64)> = pts
                .iter()
                .map(|&(s, u, d)| (s as f64 / 10.0, (u.saturating_sub(d)) as f64 / 10.0))
                .collect();
            prop_assert!(envelope_auc(&lower) <= envelope_auc(&upper) + 1e-15);
        }
    }
}
