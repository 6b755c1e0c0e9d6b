//! Datasets produced by an outside exporter: files written byte by byte here,
//! without going through the crate's own writer.

use std::fs;
use std::path::Path;

use duplex_core::data::{load_dataset, Split};
use duplex_core::train::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn dupx(rows: u32, cols: u32, values: &[f32]) -> Vec<u8> {
    let mut out = b"DUPX".to_vec();
    out.extend(1u16.to_le_bytes());
    out.extend(rows.to_le_bytes());
    out.extend(cols.to_le_bytes());
    out.extend([0, 0]);
    for v in values {
        out.extend(v.to_le_bytes());
    }
    out
}

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let v: Vec<f64> = (0..cols).map(|_| rng.random::<f64>() - 0.5).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| (x / n) as f32));
    }
    out
}

fn write_export(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(768);
    let emb = dupx(3, 768, &unit_rows(3, 768, &mut rng));
    let st: Vec<f32> = (0..2 * 16).map(|_| rng.random::<f32>() - 0.5).collect();
    let ob: Vec<f32> = (0..2 * 16).map(|_| rng.random::<f32>() - 0.5).collect();
    let st = dupx(2, 16, &st);
    let ob = dupx(2, 16, &ob);
    let sha = |b: &[u8]| hex::encode(Sha256::digest(b));
    fs::write(dir.join("img.bin"), &emb).unwrap();
    fs::write(dir.join("st.bin"), &st).unwrap();
    fs::write(dir.join("ob.bin"), &ob).unwrap();
    fs::write(dir.join("states.txt"), "wet\ndry\n").unwrap();
    fs::write(dir.join("objects.txt"), "cat\ndog\n").unwrap();
    fs::write(dir.join("seen.tsv"), "wet\tcat\ndry\tdog\n").unwrap();
    fs::write(dir.join("unseen.tsv"), "wet\tdog\n").unwrap();
    // rows out of order and CRLF line endings, as another tool might write them
    fs::write(dir.join("labels.tsv"), "2\twet\tdog\ttest\r\n0\twet\tcat\ttrain\r\n1\tdry\tdog\ttrain\r\n").unwrap();
    fs::write(
        dir.join("export.manifest"),
        format!(
            "# written by an external exporter\nversion=1\ndim=768\nstates=states.txt\nobjects=objects.txt\n\
             seen_pairs=seen.tsv\nunseen_pairs=unseen.tsv\nlabels=labels.tsv\nembeddings=img.bin\n\
             embeddings_sha256={}\nstate_tokens=st.bin\nstate_tokens_sha256={}\nobject_tokens=ob.bin\n\
             object_tokens_sha256={}\n",
            sha(&emb),
            sha(&st),
            sha(&ob)
        ),
    )
    .unwrap();
}

#[test]
fn external_layout_loads_and_trains_one_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    write_export(tmp.path());
    let data = load_dataset(&tmp.path().join("export.manifest")).unwrap();
    assert_eq!(data.dataset.len(), 3);
    assert_eq!(data.dataset.dim(), 768);
    assert_eq!(data.dataset.label(2), (0, 1));
    assert_eq!(data.dataset.split(2), Split::Test);
    for i in 0..3 {
        let row = data.dataset.embedding(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        // consumed values stay within 1e-6 of what was exported
        let stored = &data.dataset.stored()[i * 768..(i + 1) * 768];
        let drift = row.iter().zip(stored).map(|(a, &b)| (a - b as f64).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-6, "row {i} drift {drift}");
    }
    assert_eq!(data.state_tokens.as_ref().unwrap().shape(), (2, 16));

    let cfg = TrainConfig {
        epochs: 1,
        dim: 768,
        token_dim: 16,
        ..TrainConfig::default()
    };
    let out = train(cfg, &data, |_| {}).unwrap();
    // no validation split, so the only epoch is kept
    assert_eq!(out.log.len(), 1);
    assert!(out.log[0].val_auc.is_none());
    assert!(out.log[0].loss.is_finite());
    assert_eq!(out.best_val_auc, None);
    assert_eq!(out.best.to_bytes(), out.last.to_bytes());
}

#[test]
fn token_width_must_match_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    write_export(tmp.path());
    let data = load_dataset(&tmp.path().join("export.manifest")).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        dim: 768,
        token_dim: 8,
        ..TrainConfig::default()
    };
    let err = train(cfg, &data, |_| {}).unwrap_err();
    assert_eq!(err.kind(), "dimension_mismatch");
}

#[test]
fn header_rows_shorter_than_labels_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    write_export(tmp.path());
    let emb = dupx(2, 768, &vec![0.0; 2 * 768]);
    fs::write(tmp.path().join("img.bin"), &emb).unwrap();
    let manifest = fs::read_to_string(tmp.path().join("export.manifest")).unwrap();
    let old = manifest.lines().find(|l| l.starts_with("embeddings_sha256=")).unwrap().to_string();
    let manifest = manifest.replace(&old, &format!("embeddings_sha256={}", hex::encode(Sha256::digest(&emb))));
    fs::write(tmp.path().join("export.manifest"), manifest).unwrap();
    let err = load_dataset(&tmp.path().join("export.manifest")).unwrap_err();
    assert_eq!(err.kind(), "parse", "{err}");
}
