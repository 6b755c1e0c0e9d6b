//! On-disk dataset layout.
//!
//! Embedding matrices use a 16-byte header followed by row-major little-endian
//! `f32` values:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DUPX"
//! 4       2     version (u16, currently 1)
//! 6       4     rows (u32)
//! 10      4     cols (u32)
//! 14      2     reserved (u16, zero)
//! ```
//!
//! A manifest (`key=value`) names the vocabulary, pair and label files plus the
//! embedding binary and its SHA-256. Paths are relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::dataset::{EmbeddingDataset, Split};
use super::space::CompositionSpace;
use crate::error::{DuplexError, Result};
use crate::kernel::Matrix;
use crate::kv;

pub const MATRIX_MAGIC: [u8; 4] = *b"DUPX";
pub const MATRIX_VERSION: u16 = 1;
pub const MATRIX_HEADER_LEN: usize = 16;
pub const MANIFEST_VERSION: u32 = 1;

/// Serializes a `rows × cols` matrix of `f32` in the DUPX layout.
pub fn encode_matrix_f32(rows: usize, cols: usize, values: &[f32]) -> Result<Vec<u8>> {
    if values.len() != rows * cols {
        return Err(DuplexError::DimensionMismatch {
            op: "encode_matrix_f32",
            left: (rows, cols),
            right: (values.len(), 1),
        });
    }
    let rows32 = u32::try_from(rows).map_err(|_| DuplexError::InvalidArgument("too many rows".into()))?;
    let cols32 = u32::try_from(cols).map_err(|_| DuplexError::InvalidArgument("too many cols".into()))?;
    let mut buf = Vec::with_capacity(MATRIX_HEADER_LEN + values.len() * 4);
    buf.extend_from_slice(&MATRIX_MAGIC);
    buf.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    buf.extend_from_slice(&rows32.to_le_bytes());
    buf.extend_from_slice(&cols32.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Parses a DUPX matrix, returning `(rows, cols, values)`.
pub fn decode_matrix_f32(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < MATRIX_HEADER_LEN {
        return Err(DuplexError::Truncated(format!(
            "matrix header needs {MATRIX_HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MATRIX_MAGIC {
        return Err(DuplexError::BadMagic {
            expected: MATRIX_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MATRIX_VERSION {
        return Err(DuplexError::VersionMismatch {
            found: version,
            expected: MATRIX_VERSION,
        });
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let want = rows * cols * 4;
    let body = &bytes[MATRIX_HEADER_LEN..];
    if body.len() < want {
        return Err(DuplexError::Truncated(format!(
            "{rows}×{cols} matrix needs {want} payload bytes, got {}",
            body.len()
        )));
    }
    if body.len() > want {
        return Err(DuplexError::InvalidArgument(format!(
            "{} trailing bytes after {rows}×{cols} matrix",
            body.len() - want
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((rows, cols, values))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A loaded dataset plus optional primitive token initializations.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub dataset: EmbeddingDataset,
    pub space: CompositionSpace,
    /// `M × d_tok` initial state token embeddings, if the manifest provides them.
    pub state_tokens: Option<Matrix>,
    /// `N × d_tok` initial object token embeddings.
    pub object_tokens: Option<Matrix>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(DuplexError::MissingFile(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| DuplexError::Parse {
        file: path.display().to_string(),
        line: 0,
        msg: "not valid UTF-8".into(),
    })
}

fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    Ok(read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .collect())
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    Ok(lines(path)?.into_iter().map(|(_, l)| l.trim().to_string()).collect())
}

fn read_pairs(path: &Path, states: &[String], objects: &[String]) -> Result<Vec<(usize, usize)>> {
    let find = |names: &[String], kind: &'static str, name: &str| {
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DuplexError::UnknownPrimitive {
                kind,
                name: name.to_string(),
            })
    };
    lines(path)?
        .into_iter()
        .map(|(no, l)| {
            let mut parts = l.split('\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(o), None) => Ok((find(states, "state", s)?, find(objects, "object", o)?)),
                _ => Err(DuplexError::Parse {
                    file: path.display().to_string(),
                    line: no,
                    msg: "expected state<TAB>object".into(),
                }),
            }
        })
        .collect()
}

fn manifest_get<'a>(m: &'a std::collections::BTreeMap<String, String>, key: &str, file: &Path) -> Result<&'a str> {
    m.get(key).map(String::as_str).ok_or_else(|| DuplexError::Parse {
        file: file.display().to_string(),
        line: 0,
        msg: format!("missing key {key:?}"),
    })
}

fn read_checked_binary(base: &Path, rel: &str, checksum: &str) -> Result<(PathBuf, Vec<u8>)> {
    let path = base.join(rel);
    let bytes = read_file(&path)?;
    let actual = sha256_hex(&bytes);
    if !actual.eq_ignore_ascii_case(checksum) {
        return Err(DuplexError::ChecksumMismatch {
            path,
            expected: checksum.to_string(),
            actual,
        });
    }
    Ok((path, bytes))
}

fn read_tokens(
    base: &Path,
    manifest: &std::collections::BTreeMap<String, String>,
    key: &str,
    manifest_path: &Path,
    expected_rows: usize,
) -> Result<Option<Matrix>> {
    let Some(rel) = manifest.get(key) else {
        return Ok(None);
    };
    let checksum = manifest_get(manifest, &format!("{key}_sha256"), manifest_path)?;
    let (path, bytes) = read_checked_binary(base, rel, checksum)?;
    let (rows, cols, values) = decode_matrix_f32(&bytes)?;
    if rows != expected_rows {
        return Err(DuplexError::DimensionMismatch {
            op: "token binary rows vs vocabulary",
            left: (rows, cols),
            right: (expected_rows, cols),
        });
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(DuplexError::NonFinite(path.display().to_string()));
    }
    Ok(Some(Matrix::from_vec(rows, cols, values.into_iter().map(f64::from).collect())?))
}

/// Reads a dataset manifest and everything it references.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset> {
    let text = read_text(manifest_path)?;
    let manifest = kv::parse(&text, &manifest_path.display().to_string())?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mp = manifest_path;

    let version: u32 = manifest_get(&manifest, "version", mp)?
        .parse()
        .map_err(|_| DuplexError::Config("manifest version is not an integer".into()))?;
    if version != MANIFEST_VERSION {
        return Err(DuplexError::VersionMismatch {
            found: version as u16,
            expected: MANIFEST_VERSION as u16,
        });
    }
    let dim: usize = manifest_get(&manifest, "dim", mp)?
        .parse()
        .map_err(|_| DuplexError::Config("manifest dim is not an integer".into()))?;

    let states = read_names(&base.join(manifest_get(&manifest, "states", mp)?))?;
    let objects = read_names(&base.join(manifest_get(&manifest, "objects", mp)?))?;
    let seen = read_pairs(&base.join(manifest_get(&manifest, "seen_pairs", mp)?), &states, &objects)?;
    let unseen = read_pairs(&base.join(manifest_get(&manifest, "unseen_pairs", mp)?), &states, &objects)?;
    let space = CompositionSpace::new(states, objects, seen, unseen)?;

    let (emb_path, emb_bytes) = read_checked_binary(
        base,
        manifest_get(&manifest, "embeddings", mp)?,
        manifest_get(&manifest, "embeddings_sha256", mp)?,
    )?;
    let (rows, cols, values) = decode_matrix_f32(&emb_bytes)?;
    if cols != dim {
        return Err(DuplexError::HeaderDimMismatch {
            path: emb_path,
            manifest: dim,
            header: cols,
        });
    }

    let labels_path = base.join(manifest_get(&manifest, "labels", mp)?);
    let mut labels: Vec<Option<((usize, usize), Split)>> = vec![None; rows];
    for (no, line) in lines(&labels_path)? {
        let parse_err = |msg: String| DuplexError::Parse {
            file: labels_path.display().to_string(),
            line: no,
            msg,
        };
        let parts: Vec<&str> = line.split('\t').collect();
        let [row, s, o, split] = parts[..] else {
            return Err(parse_err("expected row<TAB>state<TAB>object<TAB>split".into()));
        };
        let row: usize = row.parse().map_err(|_| parse_err(format!("bad row index {row:?}")))?;
        if row >= rows {
            return Err(parse_err(format!("row {row} beyond {rows} embeddings")));
        }
        if labels[row].is_some() {
            return Err(parse_err(format!("row {row} labelled twice")));
        }
        let pair = (space.state_index(s)?, space.object_index(o)?);
        labels[row] = Some((pair, split.parse().map_err(|e: DuplexError| parse_err(e.to_string()))?));
    }
    let mut pairs = Vec::with_capacity(rows);
    let mut splits = Vec::with_capacity(rows);
    for (i, l) in labels.into_iter().enumerate() {
        let (p, s) = l.ok_or_else(|| DuplexError::Parse {
            file: labels_path.display().to_string(),
            line: 0,
            msg: format!("embedding row {i} has no label"),
        })?;
        pairs.push(p);
        splits.push(s);
    }
    let dataset = EmbeddingDataset::from_stored(values, dim, pairs, splits, &space)?;

    let state_tokens = read_tokens(base, &manifest, "state_tokens", mp, space.num_states())?;
    let object_tokens = read_tokens(base, &manifest, "object_tokens", mp, space.num_objects())?;
    if let (Some(s), Some(o)) = (&state_tokens, &object_tokens) {
        if s.cols() != o.cols() {
            return Err(DuplexError::DimensionMismatch {
                op: "state vs object token width",
                left: s.shape(),
                right: o.shape(),
            });
        }
    }
    Ok(LoadedDataset {
        dataset,
        space,
        state_tokens,
        object_tokens,
    })
}

fn f32_matrix(m: &Matrix) -> Vec<f32> {
    m.as_slice().iter().map(|&x| x as f32).collect()
}

/// Writes `data` into `dir` with a manifest named `manifest_name`; returns the manifest path.
pub fn write_dataset(dir: &Path, manifest_name: &str, data: &LoadedDataset) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let LoadedDataset {
        dataset,
        space,
        state_tokens,
        object_tokens,
    } = data;

    let mut names = space.states().join("\n");
    names.push('\n');
    fs::write(dir.join("states.txt"), names)?;
    let mut names = space.objects().join("\n");
    names.push('\n');
    fs::write(dir.join("objects.txt"), names)?;

    let pair_lines = |pairs: Vec<(usize, usize)>| {
        pairs
            .into_iter()
            .map(|(m, n)| format!("{}\t{}\n", space.states()[m], space.objects()[n]))
            .collect::<String>()
    };
    fs::write(dir.join("seen_pairs.tsv"), pair_lines(space.seen_pairs().collect()))?;
    fs::write(dir.join("unseen_pairs.tsv"), pair_lines(space.unseen_closed_pairs().collect()))?;

    let labels: String = (0..dataset.len())
        .map(|i| {
            let (m, n) = dataset.label(i);
            format!(
                "{i}\t{}\t{}\t{}\n",
                space.states()[m],
                space.objects()[n],
                dataset.split(i)
            )
        })
        .collect();
    fs::write(dir.join("labels.tsv"), labels)?;

    let emb = encode_matrix_f32(dataset.len(), dataset.dim(), dataset.stored())?;
    fs::write(dir.join("embeddings.bin"), &emb)?;

    let mut manifest = format!(
        "version={MANIFEST_VERSION}\ndim={}\nstates=states.txt\nobjects=objects.txt\n\
         seen_pairs=seen_pairs.tsv\nunseen_pairs=unseen_pairs.tsv\nlabels=labels.tsv\n\
         embeddings=embeddings.bin\nembeddings_sha256={}\n",
        dataset.dim(),
        sha256_hex(&emb)
    );
    for (key, tokens) in [("state_tokens", state_tokens), ("object_tokens", object_tokens)] {
        if let Some(t) = tokens {
            let bytes = encode_matrix_f32(t.rows(), t.cols(), &f32_matrix(t))?;
            let file = format!("{key}.bin");
            fs::write(dir.join(&file), &bytes)?;
            manifest.push_str(&format!("{key}={file}\n{key}_sha256={}\n", sha256_hex(&bytes)));
        }
    }
    let path = dir.join(manifest_name);
    fs::write(&path, manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_sixteen_bytes() {
        let b = encode_matrix_f32(2, 3, &[1.0; 6]).unwrap();
        assert_eq!(b.len(), 16 + 24);
        assert_eq!(&b[0..4], b"DUPX");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[10..14].try_into().unwrap()), 3);
        assert_eq!(&b[14..16], &[0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
    }

    #[test]
    fn decode_errors() {
        let good = encode_matrix_f32(1, 2, &[0.5, -0.5]).unwrap();
        assert!(matches!(decode_matrix_f32(&good[..good.len() - 1]), Err(DuplexError::Truncated(_))));
        assert!(matches!(decode_matrix_f32(&good[..10]), Err(DuplexError::Truncated(_))));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_matrix_f32(&bad), Err(DuplexError::BadMagic { .. })));
        let mut bad = good;
        bad[4] = 9;
        assert!(matches!(decode_matrix_f32(&bad), Err(DuplexError::VersionMismatch { found: 9, .. })));
    }

    proptest! {
        #[test]
        fn matrix_codec_round_trips(rows in 0usize..6, cols in 1usize..6, seed in any::<u32>()) {
            let values: Vec<f32> = (0..rows * cols)
                .map(|i| ((seed as usize).wrapping_mul(31).wrapping_add(i * 7919) % 1000) as f32 / 17.0 - 20.0)
                .collect();
            let bytes = encode_matrix_f32(rows, cols, &values).unwrap();
            let (r, c, v) = decode_matrix_f32(&bytes).unwrap();
            prop_assert_eq!((r, c), (rows, cols));
            prop_assert_eq!(v, values);
        }
    }
}
