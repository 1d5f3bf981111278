//! Cross-modal retrieval: embedding banks, Recall@K, top-k queries and CSV
//! exports.
//!
//! Rankings sort by dot product, descending; exact ties go to the lower
//! corpus index.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataio::{Modality, PairedRecord};
use crate::error::{Error, Result};
use crate::numkit::{self, Matrix};
use crate::projector::ProjectionHead;

const UNIT_TOL: f64 = 1e-9;

/// Immutable set of unit-norm embeddings with identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    ids: Vec<String>,
    vectors: Matrix,
    modality: Modality,
}

impl EmbeddingBank {
    pub fn new(ids: Vec<String>, vectors: Matrix, modality: Modality) -> Result<Self> {
        if ids.len() != vectors.rows() {
            return Err(Error::Shape(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.rows()
            )));
        }
        for i in 0..vectors.rows() {
            let n = numkit::norm(vectors.row(i));
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Validation(format!(
                    "embedding {:?} has norm {n}",
                    ids[i]
                )));
            }
        }
        Ok(Self {
            ids,
            vectors,
            modality,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

/// Embeds one modality of `records` with `head`, preserving order.
pub fn embed_bank(
    head: &ProjectionHead,
    records: &[PairedRecord],
    modality: Modality,
) -> Result<EmbeddingBank> {
    let rows: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| head.embed(r.tokens(modality), None).map(|p| p.0))
        .collect::<Result<_>>()?;
    let vectors = if rows.is_empty() {
        Matrix::zeros(0, head.dim())
    } else {
        Matrix::from_rows(&rows)?
    };
    let ids = records.iter().map(|r| r.id.clone()).collect();
    EmbeddingBank::new(ids, vectors, modality)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub k_values: Vec<usize>,
    pub recall: Vec<f64>,
    pub n_queries: usize,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.k_values
            .iter()
            .position(|&x| x == k)
            .map(|i| self.recall[i])
    }

    /// `k,recall` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,recall\n");
        for (k, r) in self.k_values.iter().zip(&self.recall) {
            let _ = writeln!(out, "{k},{r:.6}");
        }
        out
    }
}

fn check_k_values(k_values: &[usize]) -> Result<()> {
    if k_values.is_empty() || k_values.contains(&0) {
        return Err(Error::Config(format!(
            "k values must be non-empty and positive, got {k_values:?}"
        )));
    }
    Ok(())
}

fn check_dims(a: &EmbeddingBank, b: &EmbeddingBank) -> Result<()> {
    if a.dim() != b.dim() && !a.is_empty() && !b.is_empty() {
        return Err(Error::Shape(format!(
            "embedding widths differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// 0-based rank of corpus item `target` among all corpus items for `query`.
fn rank_of(query: &[f64], corpus: &EmbeddingBank, target: usize) -> usize {
    let target_score = numkit::dot(query, corpus.vector(target));
    (0..corpus.len())
        .filter(|&j| {
            let s = numkit::dot(query, corpus.vector(j));
            s > target_score || (s == target_score && j < target)
        })
        .count()
}

/// Fraction of queries whose same-id corpus item ranks within the top `k`,
/// for each `k`.
pub fn recall_at_k(
    queries: &EmbeddingBank,
    corpus: &EmbeddingBank,
    k_values: &[usize],
) -> Result<RecallReport> {
    check_k_values(k_values)?;
    check_dims(queries, corpus)?;
    if queries.is_empty() {
        return Err(Error::Validation("no queries to evaluate".into()));
    }
    let index: HashMap<&str, usize> = corpus
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let ranks: Vec<usize> = queries
        .ids()
        .iter()
        .enumerate()
        .map(|(qi, id)| {
            let target = *index.get(id.as_str()).ok_or_else(|| {
                Error::Validation(format!("query {id:?} has no partner in the corpus"))
            })?;
            Ok(rank_of(queries.vector(qi), corpus, target))
        })
        .collect::<Result<_>>()?;
    let n = ranks.len() as f64;
    let recall = k_values
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n)
        .collect();
    Ok(RecallReport {
        k_values: k_values.to_vec(),
        recall,
        n_queries: ranks.len(),
    })
}

/// The `k` best corpus items for `query` as `(id, score)`. A `k` larger than
/// the corpus is clamped to the corpus size.
pub fn top_k(query: &[f64], corpus: &EmbeddingBank, k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if !corpus.is_empty() && query.len() != corpus.dim() {
        return Err(Error::Shape(format!(
            "query width {} vs corpus width {}",
            query.len(),
            corpus.dim()
        )));
    }
    let mut scored: Vec<(usize, f64)> = (0..corpus.len())
        .map(|j| (j, numkit::dot(query, corpus.vector(j))))
        .collect();
    // stable sort keeps ascending index among equal scores; partial_cmp
    // (not total_cmp) so that -0.0 and 0.0 tie
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("unit vectors give finite scores")
    });
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(j, s)| (corpus.ids()[j].clone(), s))
        .collect())
}

/// Statistics of a query × corpus similarity matrix. The diagonal is the
/// set of same-id pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilaritySummary {
    pub mean_diagonal: f64,
    /// `None` when there are no mismatched pairs.
    pub mean_off_diagonal: Option<f64>,
}

impl SimilaritySummary {
    /// Mean diagonal minus mean off-diagonal.
    pub fn margin(&self) -> Option<f64> {
        self.mean_off_diagonal.map(|off| self.mean_diagonal - off)
    }

    pub fn line(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
        format!(
            "mean_diagonal={:.6} mean_off_diagonal={} dominance_margin={}",
            self.mean_diagonal,
            fmt(self.mean_off_diagonal),
            fmt(self.margin())
        )
    }
}

/// Writes the all-pairs cosine similarity matrix as CSV: a header row
/// `id,<corpus ids...>` then one row per query, six decimals per entry.
pub fn export_similarity(
    queries: &EmbeddingBank,
    corpus: &EmbeddingBank,
    path: &Path,
) -> Result<SimilaritySummary> {
    let (csv, summary) = similarity_csv(queries, corpus)?;
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    Ok(summary)
}

pub fn similarity_csv(
    queries: &EmbeddingBank,
    corpus: &EmbeddingBank,
) -> Result<(String, SimilaritySummary)> {
    if queries.is_empty() || corpus.is_empty() {
        return Err(Error::Validation(
            "similarity export needs non-empty banks".into(),
        ));
    }
    check_dims(queries, corpus)?;
    let sim = numkit::matmul_transpose_b(queries.vectors(), corpus.vectors())?;
    let mut out = String::from("id");
    for id in corpus.ids() {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    let (mut diag, mut n_diag, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
    for (i, qid) in queries.ids().iter().enumerate() {
        out.push_str(qid);
        for (j, cid) in corpus.ids().iter().enumerate() {
            let v = sim.get(i, j);
            let _ = write!(out, ",{v:.6}");
            if qid == cid {
                diag += v;
                n_diag += 1;
            } else {
                off += v;
                n_off += 1;
            }
        }
        out.push('\n');
    }
    if n_diag == 0 {
        return Err(Error::Validation(
            "no query shares an id with the corpus".into(),
        ));
    }
    let summary = SimilaritySummary {
        mean_diagonal: diag / n_diag as f64,
        mean_off_diagonal: (n_off > 0).then(|| off / n_off as f64),
    };
    Ok((out, summary))
}

/// Writes `id,modality,d0..d{D-1}` rows for every bank, 17 significant
/// digits per coordinate.
pub fn export_embeddings(banks: &[&EmbeddingBank], path: &Path) -> Result<()> {
    let dim = banks.iter().find(|b| !b.is_empty()).map_or(0, |b| b.dim());
    if banks.iter().any(|b| !b.is_empty() && b.dim() != dim) {
        return Err(Error::Shape("banks have different widths".into()));
    }
    let mut out = String::from("id,modality");
    for c in 0..dim {
        let _ = write!(out, ",d{c}");
    }
    out.push('\n');
    for bank in banks {
        for (i, id) in bank.ids().iter().enumerate() {
            out.push_str(id);
            out.push(',');
            out.push_str(bank.modality().name());
            for v in bank.vector(i) {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`export_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<Vec<(String, Modality, Vec<f64>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty embeddings file".into()))?;
    let dim = header.split(',').count().saturating_sub(2);
    lines
        .map(|line| {
            let mut fields = line.split(',');
            let id = fields.next().unwrap_or_default().to_string();
            let modality = match fields.next() {
                Some("sequence") => Modality::Sequence,
                Some("structure") => Modality::Structure,
                other => return Err(Error::Format(format!("unknown modality {other:?}"))),
            };
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad value {f:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != dim {
                return Err(Error::Format(format!(
                    "row {id:?} has {} values",
                    values.len()
                )));
            }
            Ok((id, modality, values))
        })
        .collect()
}
