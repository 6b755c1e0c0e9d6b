//! Binary checkpoint format.
//!
//! ```text
//! "DUPC" | version u16 | section count u32 | sections...
//! section = name_len u16 | name | kind u8 | payload_len u64 | payload
//! ```
//!
//! Kinds: 0 matrix (`rows u64, cols u64, f64…`), 1 UTF-8 text, 2 f64, 3 u64.
//! All integers and floats are little-endian. Gradients are not stored.

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoders::{Disentangler, FrozenTextEncoder, PromptBank};
use crate::error::{DuplexError, Result};
use crate::kernel::{AdamConfig, AdamState, Matrix, Mlp2, ParamTensor};
use crate::model::{DuplexModel, PARAM_NAMES};
use crate::prototypes::{FusionHead, GcnLayer, PrototypeCodebook};
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DUPC";
pub const CHECKPOINT_VERSION: u16 = 1;

const KIND_MATRIX: u8 = 0;
const KIND_TEXT: u8 = 1;
const KIND_F64: u8 = 2;
const KIND_U64: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub states: Vec<String>,
    pub objects: Vec<String>,
    pub model: DuplexModel,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
}

struct Writer {
    buf: Vec<u8>,
    count: u32,
}

impl Writer {
    fn section(&mut self, name: &str, kind: u8, payload: &[u8]) {
        self.buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(kind);
        self.buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(payload);
        self.count += 1;
    }

    fn matrix(&mut self, name: &str, m: &Matrix) {
        let mut p = Vec::with_capacity(16 + 8 * m.len());
        p.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        p.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for x in m.as_slice() {
            p.extend_from_slice(&x.to_le_bytes());
        }
        self.section(name, KIND_MATRIX, &p);
    }

    fn text(&mut self, name: &str, s: &str) {
        self.section(name, KIND_TEXT, s.as_bytes());
    }

    fn f64(&mut self, name: &str, x: f64) {
        self.section(name, KIND_F64, &x.to_le_bytes());
    }

    fn u64(&mut self, name: &str, x: u64) {
        self.section(name, KIND_U64, &x.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(DuplexError::Truncated(format!(
                "checkpoint ends inside {what} (offset {}, need {n} bytes)",
                self.pos
            ))),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Sections<'a> {
    map: BTreeMap<String, (u8, &'a [u8])>,
}

fn corrupt(msg: String) -> DuplexError {
    DuplexError::InvalidArgument(format!("checkpoint: {msg}"))
}

impl<'a> Sections<'a> {
    fn get(&self, name: &str, kind: u8) -> Result<&'a [u8]> {
        match self.map.get(name) {
            Some(&(k, p)) if k == kind => Ok(p),
            Some(&(k, _)) => Err(corrupt(format!("section {name:?} has kind {k}, expected {kind}"))),
            None => Err(corrupt(format!("missing section {name:?}"))),
        }
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let p = self.get(name, KIND_MATRIX)?;
        if p.len() < 16 {
            return Err(corrupt(format!("matrix {name:?} payload too short")));
        }
        let rows = u64::from_le_bytes(p[..8].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(p[8..16].try_into().unwrap()) as usize;
        let body = &p[16..];
        if rows.checked_mul(cols).and_then(|n| n.checked_mul(8)) != Some(body.len()) {
            return Err(corrupt(format!("matrix {name:?} is {rows}×{cols} but carries {} bytes", body.len())));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    fn param(&self, name: &str) -> Result<ParamTensor> {
        Ok(ParamTensor::new(self.matrix(name)?))
    }

    fn text(&self, name: &str) -> Result<&'a str> {
        std::str::from_utf8(self.get(name, KIND_TEXT)?).map_err(|_| corrupt(format!("section {name:?} is not UTF-8")))
    }

    fn f64(&self, name: &str) -> Result<f64> {
        let p = self.get(name, KIND_F64)?;
        p.try_into()
            .map(f64::from_le_bytes)
            .map_err(|_| corrupt(format!("scalar {name:?} has {} bytes", p.len())))
    }

    fn u64(&self, name: &str) -> Result<u64> {
        let p = self.get(name, KIND_U64)?;
        p.try_into()
            .map(u64::from_le_bytes)
            .map_err(|_| corrupt(format!("integer {name:?} has {} bytes", p.len())))
    }
}

fn lines(text: &str) -> Vec<String> {
    text.lines().map(str::to_string).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { buf: Vec::new(), count: 0 };
        w.text("config", &self.config.to_kv());
        w.text("vocab.states", &self.states.join("\n"));
        w.text("vocab.objects", &self.objects.join("\n"));
        w.u64("epoch", self.epoch);
        let m = &self.model;
        w.text("branch", &m.branch.to_string());
        for (name, p) in PARAM_NAMES.iter().zip(m.params()) {
            w.matrix(name, &p.value);
        }
        w.matrix("encoder.projection", m.encoder.projection());
        w.u64("encoder.seed", m.encoder.seed());
        w.f64("fusion.tau", m.fusion.tau);
        let cb = &m.codebook;
        w.matrix("codebook.prototypes", cb.prototypes());
        w.matrix("codebook.init_state_nodes", cb.init_state_nodes());
        w.matrix("codebook.init_object_nodes", cb.init_object_nodes());
        w.matrix("codebook.state_nodes", cb.state_nodes());
        w.matrix("codebook.object_nodes", cb.object_nodes());
        w.f64("codebook.lambda", cb.lambda());
        let a = &self.adam;
        w.u64("adam.step", a.step);
        w.f64("adam.lr", a.config.lr);
        w.f64("adam.beta1", a.config.beta1);
        w.f64("adam.beta2", a.config.beta2);
        w.f64("adam.eps", a.config.eps);
        w.u64("adam.groups", a.first.len() as u64);
        for (i, (m1, m2)) in a.first.iter().zip(&a.second).enumerate() {
            w.matrix(&format!("adam.first.{i}"), m1);
            w.matrix(&format!("adam.second.{i}"), m2);
        }
        let mut out = Vec::with_capacity(w.buf.len() + 10);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&w.count.to_le_bytes());
        out.extend_from_slice(&w.buf);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(DuplexError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = c.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(DuplexError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = c.u32("section count")?;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let len = c.u16("section name length")? as usize;
            let name = std::str::from_utf8(c.take(len, "section name")?)
                .map_err(|_| corrupt("section name is not UTF-8".into()))?
                .to_string();
            let kind = c.take(1, "section kind")?[0];
            let plen = c.u64("section length")?;
            let payload = c.take(usize::try_from(plen).unwrap_or(usize::MAX), &name)?;
            if map.insert(name.clone(), (kind, payload)).is_some() {
                return Err(corrupt(format!("duplicate section {name:?}")));
            }
        }
        if c.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - c.pos)));
        }
        let s = Sections { map };

        let config = TrainConfig::parse(s.text("config")?, "checkpoint config")?;
        let mut p = PARAM_NAMES.iter().map(|n| s.param(n)).collect::<Result<Vec<_>>>()?.into_iter();
        let mut next = || p.next().expect("PARAM_NAMES length");
        let bank = PromptBank {
            composition_ctx: next(),
            state_ctx: next(),
            object_ctx: next(),
            state_tokens: next(),
            object_tokens: next(),
        };
        let mut mlp = || Mlp2 {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let disentangler = Disentangler {
            state: mlp(),
            object: mlp(),
        };
        let gcn = GcnLayer { weight: next() };
        let gamma = next();
        if gamma.shape() != (1, 1) {
            return Err(corrupt(format!("gamma has shape {:?}", gamma.shape())));
        }
        let mut fusion = FusionHead::new(gamma.value[(0, 0)], s.f64("fusion.tau")?)?;
        fusion.gamma = gamma;
        let codebook = PrototypeCodebook::from_parts(
            s.matrix("codebook.prototypes")?,
            s.matrix("codebook.init_state_nodes")?,
            s.matrix("codebook.init_object_nodes")?,
            s.matrix("codebook.state_nodes")?,
            s.matrix("codebook.object_nodes")?,
            s.f64("codebook.lambda")?,
        )?;
        let model = DuplexModel {
            bank,
            encoder: FrozenTextEncoder::from_parts(s.matrix("encoder.projection")?, s.u64("encoder.seed")?),
            disentangler,
            gcn,
            fusion,
            codebook,
            branch: s.text("branch")?.parse()?,
        };
        let groups = s.u64("adam.groups")? as usize;
        if groups != PARAM_NAMES.len() {
            return Err(corrupt(format!("{groups} optimizer groups, expected {}", PARAM_NAMES.len())));
        }
        let adam = AdamState {
            config: AdamConfig {
                lr: s.f64("adam.lr")?,
                beta1: s.f64("adam.beta1")?,
                beta2: s.f64("adam.beta2")?,
                eps: s.f64("adam.eps")?,
            },
            step: s.u64("adam.step")?,
            first: (0..groups).map(|i| s.matrix(&format!("adam.first.{i}"))).collect::<Result<_>>()?,
            second: (0..groups).map(|i| s.matrix(&format!("adam.second.{i}"))).collect::<Result<_>>()?,
        };
        Ok(Checkpoint {
            config,
            states: lines(s.text("vocab.states")?),
            objects: lines(s.text("vocab.objects")?),
            model,
            adam,
            epoch: s.u64("epoch")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DuplexError::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}
