//! Weight and attention analysis of trained models.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::matrix::{BinaryMatrix, Matrix};
use crate::model::{HeadArchitecture, MtpModel, TokenBatch, TransferKind};
use crate::simplified::SimplifiedParams;

/// How a logit-space transfer matrix is turned into a node-by-node matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    /// The `M x M` transfer matrix itself (it already maps logits to logits).
    #[default]
    Raw,
    /// `W_t W_o T`: token embedding, output head, then transfer.
    Composed,
}

/// Node-indexed view of the `step`-th transfer (`1` maps step-1 to step-2
/// logits). Transformer transfers are nonlinear and have no matrix form.
pub fn project_transfer(model: &MtpModel, step: usize, projection: Projection) -> Result<Matrix> {
    let cfg = &model.config;
    if cfg.mtp_steps < 2 || cfg.head_arch != HeadArchitecture::SharedHeadTransfer {
        return Err(Error::Unsupported("model has no shared-head transfer layer".into()));
    }
    if let TransferKind::Transformer { .. } = cfg.transfer {
        return Err(Error::Unsupported(
            "Transformer transfer layers have no matrix projection".into(),
        ));
    }
    if step == 0 || step >= cfg.mtp_steps {
        return Err(Error::InvalidArgument(format!(
            "transfer step {step} outside 1..{}",
            cfg.mtp_steps
        )));
    }
    let m = cfg.vocab_size;
    let t = Matrix::from_vec(m, m, model.param(&format!("transfer{step}.matrix"))?.data().to_vec())?;
    match projection {
        Projection::Raw => Ok(t),
        Projection::Composed => {
            let d = cfg.dim;
            let wt = Matrix::from_vec(m, d, model.param("tok_emb")?.data().to_vec())?;
            let wo = Matrix::from_vec(d, m, model.param("head.out")?.data().to_vec())?;
            wt.matmul(&wo)?.matmul(&t)
        }
    }
}

/// The simplified model has identity embedding and head, so its projection is
/// `W^T` itself.
pub fn project_simplified(p: &SimplifiedParams) -> Matrix {
    p.wt.clone()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub name: String,
    pub mean: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryStats {
    /// Masks in the order given, then `other` for the unmasked remainder.
    pub categories: Vec<CategoryStats>,
}

impl EntryStats {
    pub fn get(&self, name: &str) -> Option<&CategoryStats> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.get(name).filter(|c| c.count > 0).map(|c| c.mean)
    }

    /// `mean(a) - mean(b)`.
    pub fn gap(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.mean(a)? - self.mean(b)?)
    }
}

/// Category means over the top-left `n x n` region, `n` being the mask size.
/// Empty categories report mean 0 and count 0.
pub fn entry_stats(matrix: &Matrix, masks: &[(&str, &BinaryMatrix)]) -> Result<EntryStats> {
    let Some(n) = masks.first().map(|m| m.1.size()) else {
        return Err(Error::InvalidArgument("entry_stats needs at least one mask".into()));
    };
    if masks.iter().any(|m| m.1.size() != n) || matrix.rows() < n || matrix.cols() < n {
        return Err(Error::shape(
            "entry_stats",
            "masks must share a size no larger than the matrix",
        ));
    }
    let mut sums = vec![0.0; masks.len() + 1];
    let mut counts = vec![0usize; masks.len() + 1];
    for i in 0..n {
        for k in 0..n {
            let hits: Vec<usize> = (0..masks.len()).filter(|&c| masks[c].1.get(i, k)).collect();
            let c = match hits.as_slice() {
                [] => masks.len(),
                [c] => *c,
                [a, b, ..] => {
                    return Err(Error::InvalidArgument(format!(
                        "masks {:?} and {:?} overlap at ({i}, {k})",
                        masks[*a].0, masks[*b].0
                    )))
                }
            };
            sums[c] += matrix[(i, k)];
            counts[c] += 1;
        }
    }
    let names = masks.iter().map(|m| m.0).chain(["other"]);
    Ok(EntryStats {
        categories: names
            .zip(sums.iter().zip(&counts))
            .map(|(name, (&s, &c))| CategoryStats {
                name: name.to_string(),
                mean: if c > 0 { s / c as f64 } else { 0.0 },
                count: c,
            })
            .collect(),
    })
}

/// Mean attention per layer and head over sequences cut to the shortest
/// common length; `maps[layer][head]` is `L x L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaps {
    pub length: usize,
    pub sequences: usize,
    pub maps: Vec<Vec<Matrix>>,
}

impl AttentionMaps {
    /// Column holding the largest mean attention of each row (0-based).
    pub fn row_argmax(&self, layer: usize, head: usize) -> Vec<usize> {
        let a = &self.maps[layer][head];
        (0..a.rows())
            .map(|r| {
                let row = a.row(r);
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect()
    }
}

const ATTENTION_CHUNK: usize = 256;

pub fn average_attention(model: &MtpModel, seqs: &[Vec<usize>]) -> Result<AttentionMaps> {
    let Some(len) = seqs.iter().map(Vec::len).min() else {
        return Err(Error::InvalidArgument("no sequences".into()));
    };
    if len == 0 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    let len = len.min(model.config.max_seq_len);
    let (depth, heads) = (model.config.depth, model.config.heads);
    let mut sums = vec![vec![vec![0.0; len * len]; heads]; depth];
    let pad = model.config.vocab_size - 1;
    for chunk in seqs.chunks(ATTENTION_CHUNK) {
        let cut: Vec<Vec<usize>> = chunk.iter().map(|s| s[..len].to_vec()).collect();
        let batch = TokenBatch::new(&cut, pad)?;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let out = model.forward(&mut tape, &p, &batch)?;
        for (l, layer) in out.attention.iter().enumerate() {
            for (h, &a) in layer.iter().enumerate() {
                for block in tape.value(a).data().chunks(len * len) {
                    for (s, v) in sums[l][h].iter_mut().zip(block) {
                        *s += v;
                    }
                }
            }
        }
    }
    let count = seqs.len() as f64;
    let maps = sums
        .into_iter()
        .map(|layer| {
            layer
                .into_iter()
                .map(|s| Matrix::from_vec(len, len, s.into_iter().map(|v| v / count).collect()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionMaps {
        length: len,
        sequences: seqs.len(),
        maps,
    })
}

/// Writes `{root}/{run_id}/{name}.csv` and returns the path.
pub fn export_csv(root: &Path, run_id: &str, name: &str, csv: &str) -> Result<PathBuf> {
    let dir = root.join(run_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{name}.csv"));
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn export_json<T: Serialize>(root: &Path, run_id: &str, name: &str, value: &T) -> Result<PathBuf> {
    let dir = root.join(run_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(n: usize, cells: &[(usize, usize)]) -> BinaryMatrix {
        let mut m = BinaryMatrix::zeros(n);
        for &(i, j) in cells {
            m.set(i, j, true);
        }
        m
    }

    #[test]
    fn constant_matrix_has_equal_means() {
        let w = Matrix::filled(4, 4, 0.7);
        let a = mask(3, &[(0, 1), (1, 2)]);
        let b = mask(3, &[(2, 0)]);
        let s = entry_stats(&w, &[("a", &a), ("b", &b)]).unwrap();
        for c in &s.categories {
            assert!((c.mean - 0.7).abs() < 1e-15);
        }
        let counts: Vec<usize> = s.categories.iter().map(|c| c.count).collect();
        assert_eq!(counts, vec![2, 1, 6]);
        assert!(s.gap("a", "other").unwrap().abs() < 1e-15);
    }

    #[test]
    fn overlapping_masks_are_rejected() {
        let w = Matrix::zeros(2, 2);
        let a = mask(2, &[(0, 1)]);
        let b = mask(2, &[(0, 1), (1, 0)]);
        assert!(entry_stats(&w, &[("a", &a), ("b", &b)]).is_err());
    }

    #[test]
    fn mask_order_does_not_change_means() {
        let w = Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64);
        let a = mask(3, &[(0, 1), (2, 2)]);
        let b = mask(3, &[(1, 0)]);
        let ab = entry_stats(&w, &[("a", &a), ("b", &b)]).unwrap();
        let ba = entry_stats(&w, &[("b", &b), ("a", &a)]).unwrap();
        for name in ["a", "b", "other"] {
            assert_eq!(ab.get(name), ba.get(name));
        }
        assert_eq!(ab.mean("a"), Some(4.5));
    }

    #[test]
    fn simplified_projection_is_transfer() {
        let mut p = SimplifiedParams::zeros(3);
        p.wt = Matrix::from_fn(3, 3, |i, j| 0.1 * i as f64 - 0.37 * j as f64);
        assert_eq!(project_simplified(&p), p.wt);
    }
}
