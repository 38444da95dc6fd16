//! Binary checkpoint of the global model, the anchors and the round.
//!
//! Layout, all integers `u64` little-endian and all floats `f64`
//! little-endian bit patterns:
//!
//! ```text
//! magic  "FFACKPT1"           8 bytes
//! version                     = 1
//! round
//! layer count L
//! per layer: d_out, d_in, weight (d_out·d_in, row-major), bias (d_out)
//! classes C, feature dim d, proxies (C·d, row-major)
//! anchors flag (0 or 1); if 1: anchor round, C, d, anchors (C·d)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::model::{Classifier, Extractor, Layer, ModelParams};
use crate::numerics::Matrix;

const MAGIC: &[u8; 8] = b"FFACKPT1";
const VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: usize,
    pub model: ModelParams,
    pub anchors: Option<AnchorSet>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_usize(out: &mut Vec<u8>, v: usize) {
    put_u64(out, v as u64);
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Reader<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.into(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail(format!("count {v} does not fit")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| self.fail(format!("{rows}x{cols} matrix exceeds file size")))?;
        let bytes = self.take(n * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u64(&mut out, VERSION);
        put_usize(&mut out, self.round);
        let layers = &self.model.extractor.layers;
        put_usize(&mut out, layers.len());
        for l in layers {
            put_usize(&mut out, l.weight.rows());
            put_usize(&mut out, l.weight.cols());
            put_f64s(&mut out, l.weight.as_slice());
            put_f64s(&mut out, &l.bias);
        }
        let phi = &self.model.classifier.proxies;
        put_usize(&mut out, phi.rows());
        put_usize(&mut out, phi.cols());
        put_f64s(&mut out, phi.as_slice());
        match &self.anchors {
            None => put_u64(&mut out, 0),
            Some(a) => {
                put_u64(&mut out, 1);
                put_usize(&mut out, a.round);
                put_usize(&mut out, a.anchors.rows());
                put_usize(&mut out, a.anchors.cols());
                put_f64s(&mut out, a.anchors.as_slice());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(8)? != MAGIC {
            r.pos = 0;
            return Err(r.fail("bad magic"));
        }
        let version = r.u64()?;
        if version != VERSION {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let round = r.usize()?;
        let count = r.usize()?;
        let mut layers = Vec::new();
        for _ in 0..count {
            let d_out = r.usize()?;
            let d_in = r.usize()?;
            let weight = r.matrix(d_out, d_in)?;
            let bias = r.matrix(1, d_out)?.into_vec();
            layers.push(Layer { weight, bias });
        }
        let classes = r.usize()?;
        let dim = r.usize()?;
        let proxies = r.matrix(classes, dim)?;
        let anchors = match r.u64()? {
            0 => None,
            1 => {
                let a_round = r.usize()?;
                let c = r.usize()?;
                let d = r.usize()?;
                Some(AnchorSet {
                    anchors: r.matrix(c, d)?,
                    round: a_round,
                })
            }
            f => return Err(r.fail(format!("bad anchors flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(r.fail("trailing bytes"));
        }
        let model = ModelParams::new(Extractor::new(layers)?, Classifier { proxies })?;
        Ok(Checkpoint { round, model, anchors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, &path.display().to_string())
    }
}
