//! Binary model record.
//!
//! ```text
//! b"FSLM"            magic
//! u32 LE             format version (1)
//! u32 LE             header length in bytes
//! header             JSON: kind, label set, encoder, scale or l2, shape
//! f32 LE payload     row-major; LT: label_matrix then init_matrix,
//!                    LR: weights then bias
//! ```

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{FewShotModel, LabelTuningModel, LogRegModel, ModelKind};
use crate::corpus::LabelSet;
use crate::encoder::EncoderDescriptor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FSLM";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    label_set: LabelSet,
    encoder: EncoderDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    l2: Option<f64>,
    rows: usize,
    cols: usize,
}

fn push_f32s<'a>(out: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub(super) fn encode(model: &FewShotModel) -> Vec<u8> {
    let (header, matrices): (Header, Vec<Vec<f64>>) = match model {
        FewShotModel::LabelTuning(m) => (
            Header {
                kind: ModelKind::LabelTuning,
                label_set: m.label_set.clone(),
                encoder: m.encoder.clone(),
                scale: Some(m.scale),
                l2: None,
                rows: m.label_matrix.nrows(),
                cols: m.label_matrix.ncols(),
            },
            vec![
                m.label_matrix.iter().copied().collect(),
                m.init_matrix.iter().copied().collect(),
            ],
        ),
        FewShotModel::LogisticRegression(m) => (
            Header {
                kind: ModelKind::LogisticRegression,
                label_set: m.label_set.clone(),
                encoder: m.encoder.clone(),
                scale: None,
                l2: Some(m.l2),
                rows: m.weights.nrows(),
                cols: m.weights.ncols(),
            },
            vec![
                m.weights.iter().copied().collect(),
                m.bias.to_vec(),
            ],
        ),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for m in matrices {
        push_f32s(&mut out, m.iter());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::invalid("model record is truncated")
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n.checked_mul(4).ok_or_else(|| Error::invalid("model shape overflows"))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<FewShotModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::invalid("not a model record"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Unsupported(format!("model format version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)?;
    if header.rows != header.label_set.len() || header.cols != header.encoder.dim {
        return Err(Error::invalid("model shape does not match its label set and encoder"));
    }
    let shape = (header.rows, header.cols);
    let size = header.rows * header.cols;
    let model = match header.kind {
        ModelKind::LabelTuning => {
            let label_matrix = Array2::from_shape_vec(shape, r.f32s(size)?).expect("shape checked");
            let init_matrix = Array2::from_shape_vec(shape, r.f32s(size)?).expect("shape checked");
            FewShotModel::LabelTuning(LabelTuningModel {
                label_set: header.label_set,
                label_matrix,
                init_matrix,
                scale: header.scale.ok_or_else(|| Error::invalid("label tuning record lacks scale"))?,
                encoder: header.encoder,
            })
        }
        ModelKind::LogisticRegression => {
            let weights = Array2::from_shape_vec(shape, r.f32s(size)?).expect("shape checked");
            let bias = Array1::from(r.f32s(header.rows)?);
            FewShotModel::LogisticRegression(LogRegModel {
                label_set: header.label_set,
                weights,
                bias,
                l2: header.l2.ok_or_else(|| Error::invalid("logistic regression record lacks l2"))?,
                encoder: header.encoder,
            })
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::invalid("trailing bytes after model record"));
    }
    Ok(model)
}
