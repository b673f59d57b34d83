//! Guideline corpus, embeddings and exact top-k retrieval.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{BackendError, Error, Result};

/// Number of retrieved rules used when a config does not override it.
pub const DEFAULT_TOP_K: usize = 8;

/// Guideline identifier, `G<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GuidelineId(pub u32);

impl fmt::Display for GuidelineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.0)
    }
}

impl FromStr for GuidelineId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s
            .strip_prefix('G')
            .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
            .ok_or_else(|| Error::Ingest(format!("invalid guideline id {s:?}")))?;
        digits
            .parse()
            .map(GuidelineId)
            .map_err(|_| Error::Ingest(format!("invalid guideline id {s:?}")))
    }
}

impl TryFrom<String> for GuidelineId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GuidelineId> for String {
    fn from(id: GuidelineId) -> Self {
        id.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guideline {
    pub id: GuidelineId,
    pub text: String,
    #[serde(default)]
    pub summary: String,
}

/// Parses a corpus document. JSON arrays of `{id, text, summary}` are taken
/// as-is; anything else is treated as plain text with one rule per
/// non-blank line and ids assigned from `G0`.
pub fn ingest(document: &str) -> Result<Vec<Guideline>> {
    let trimmed = document.trim_start();
    let guidelines = if trimmed.starts_with('[') {
        serde_json::from_str::<Vec<Guideline>>(trimmed)
            .map_err(|e| Error::Ingest(format!("invalid guideline JSON: {e}")))?
    } else {
        document
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, line)| Guideline {
                id: GuidelineId(i as u32),
                text: line.to_string(),
                summary: summarize(line),
            })
            .collect()
    };
    if guidelines.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for g in &guidelines {
        if g.text.trim().is_empty() {
            return Err(Error::Ingest(format!("{} has empty text", g.id)));
        }
        if !seen.insert(g.id) {
            return Err(Error::Ingest(format!("duplicate guideline id {}", g.id)));
        }
    }
    Ok(guidelines)
}

fn summarize(line: &str) -> String {
    const MAX: usize = 80;
    if line.chars().count() <= MAX {
        return line.to_string();
    }
    let mut out = String::new();
    for word in line.split_whitespace() {
        if out.chars().count() + word.chars().count() + 1 > MAX {
            break;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out.push('…');
    out
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// L2-normalizes `raw`. Zero or non-finite vectors are rejected.
    pub fn normalized(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() || raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("embedding has no finite components".into()));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Validation("embedding is the zero vector".into()));
        }
        Ok(Self(raw.into_iter().map(|v| v / norm).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        // stored vectors must already be unit norm; kept bit-for-bit
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v.is_empty() || !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Format(format!("stored vector has norm {norm}")));
        }
        Ok(Self(v))
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(e: EmbeddingVector) -> Self {
        e.0
    }
}

/// Text embedding model.
pub trait Embedder: Send + Sync {
    /// Identity written into persisted indexes; indexes only load against an
    /// embedder with the same tag.
    fn tag(&self) -> String;
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

/// Deterministic bag-of-words embedder: each lowercase alphanumeric token is
/// hashed (FNV-1a) into one of `dim` buckets.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Embedder for HashEmbedder {
    fn tag(&self) -> String {
        format!("hash-bow-{}", self.dim)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        let mut any = false;
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            v[(fnv1a(token.as_bytes()) % self.dim as u64) as usize] += 1.0;
            any = true;
        }
        if !any {
            return Err(BackendError::Malformed("text has no tokens".into()));
        }
        Ok(v)
    }
}

/// Read-only exact-scan index over a guideline corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidelineIndex {
    embedder_tag: String,
    dim: usize,
    entries: Vec<(Guideline, EmbeddingVector)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: GuidelineId,
    pub vector: EmbeddingVector,
}

/// On-disk form of a [`GuidelineIndex`]; rule text stays in the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexFile {
    pub embedder_tag: String,
    pub dim: usize,
    pub entries: Vec<IndexEntry>,
}

pub fn embed_text(embedder: &dyn Embedder, text: &str) -> Result<EmbeddingVector> {
    let raw = embedder.embed(text).map_err(|e| Error::Embedding {
        id: "query".into(),
        message: e.to_string(),
    })?;
    EmbeddingVector::normalized(raw)
}

pub fn build_index(guidelines: &[Guideline], embedder: &dyn Embedder) -> Result<GuidelineIndex> {
    if guidelines.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut entries = Vec::with_capacity(guidelines.len());
    let mut dim = None;
    for g in guidelines {
        let embed_err = |message: String| Error::Embedding {
            id: g.id.to_string(),
            message,
        };
        let raw = embedder.embed(&g.text).map_err(|e| embed_err(e.to_string()))?;
        let v = EmbeddingVector::normalized(raw).map_err(|e| embed_err(e.to_string()))?;
        match dim {
            None => dim = Some(v.dim()),
            Some(d) if d != v.dim() => {
                return Err(embed_err(format!("dimension {} != {}", v.dim(), d)));
            }
            _ => {}
        }
        entries.push((g.clone(), v));
    }
    Ok(GuidelineIndex {
        embedder_tag: embedder.tag(),
        dim: dim.unwrap_or(0),
        entries,
    })
}

impl GuidelineIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedder_tag(&self) -> &str {
        &self.embedder_tag
    }

    pub fn entries(&self) -> &[(Guideline, EmbeddingVector)] {
        &self.entries
    }

    pub fn guideline(&self, id: GuidelineId) -> Option<&Guideline> {
        self.entries.iter().map(|(g, _)| g).find(|g| g.id == id)
    }

    /// Ranks by cosine similarity, descending, ties broken by ascending id.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<(Guideline, f64)>> {
        if k == 0 {
            return Err(Error::Validation("k must be at least 1".into()));
        }
        if query.dim() != self.dim {
            return Err(Error::Shape(format!(
                "query dimension {} does not match index dimension {}",
                query.dim(),
                self.dim
            )));
        }
        let mut scored: Vec<(&Guideline, f64)> = self
            .entries
            .iter()
            .map(|(g, v)| (g, v.dot(query)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.id.cmp(&b.0.id)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(g, s)| (g.clone(), s))
            .collect())
    }

    pub fn to_file(&self) -> IndexFile {
        IndexFile {
            embedder_tag: self.embedder_tag.clone(),
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|(g, v)| IndexEntry {
                    id: g.id,
                    vector: v.clone(),
                })
                .collect(),
        }
    }

    /// Reassembles an index from its persisted vectors and the corpus it was
    /// built from. Ids and order must match exactly.
    pub fn from_file(file: IndexFile, guidelines: &[Guideline]) -> Result<Self> {
        if file.entries.len() != guidelines.len() {
            return Err(Error::Format(format!(
                "index has {} entries but corpus has {} rules",
                file.entries.len(),
                guidelines.len()
            )));
        }
        let mut entries = Vec::with_capacity(guidelines.len());
        for (entry, g) in file.entries.into_iter().zip(guidelines) {
            if entry.id != g.id {
                return Err(Error::Format(format!(
                    "index entry {} does not match corpus rule {}",
                    entry.id, g.id
                )));
            }
            if entry.vector.dim() != file.dim {
                return Err(Error::Format(format!("{} has the wrong dimension", entry.id)));
            }
            entries.push((g.clone(), entry.vector));
        }
        Ok(Self {
            embedder_tag: file.embedder_tag,
            dim: file.dim,
            entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Basis;

    impl Embedder for Basis {
        fn tag(&self) -> String {
            "basis".into()
        }
        fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
            let i: usize = text.parse().map_err(|_| BackendError::Malformed(text.into()))?;
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            Ok(v)
        }
    }

    fn corpus(texts: &[&str]) -> Vec<Guideline> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Guideline {
                id: GuidelineId(i as u32),
                text: t.to_string(),
                summary: String::new(),
            })
            .collect()
    }

    #[test]
    fn ingest_json_single_rule() {
        let doc = r#"[{"id":"G0","text":"People riding kick scooters, segways, skateboards, etc. are labeled as pedestrians","summary":"riders are pedestrians"}]"#;
        let g = ingest(doc).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].id, GuidelineId(0));
        assert_eq!(g[0].summary, "riders are pedestrians");
    }

    #[test]
    fn ingest_plain_text_assigns_sequential_ids() {
        let doc: String = (0..11).map(|i| format!("rule number {i}\n")).collect();
        let g = ingest(&doc).unwrap();
        assert_eq!(g.len(), 11);
        for (i, rule) in g.iter().enumerate() {
            assert_eq!(rule.id.to_string(), format!("G{i}"));
            assert_eq!(rule.text, format!("rule number {i}"));
        }
    }

    #[test]
    fn ingest_rejects_duplicates_and_empty() {
        let dup = r#"[{"id":"G3","text":"a","summary":""},{"id":"G3","text":"b","summary":""}]"#;
        assert!(matches!(ingest(dup), Err(Error::Ingest(m)) if m.contains("duplicate")));
        assert!(matches!(ingest("  \n\n"), Err(Error::EmptyCorpus)));
        assert!(matches!(ingest("[]"), Err(Error::EmptyCorpus)));
        assert!(ingest(r#"[{"id":"X1","text":"a"}]"#).is_err());
        assert!(ingest(r#"[{"id":"G1","text":"  "}]"#).is_err());
    }

    #[test]
    fn index_of_eleven_unit_vectors() {
        let g = corpus(&[
            "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota",
            "kappa", "lambda",
        ]);
        let emb = HashEmbedder::new(16);
        let idx = build_index(&g, &emb).unwrap();
        assert_eq!(idx.len(), 11);
        assert_eq!(idx.dim(), 16);
        for (_, v) in idx.entries() {
            let n: f64 = v.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
        }
        assert_eq!(idx, build_index(&g, &emb).unwrap());
    }

    #[test]
    fn orthogonal_basis_retrieval() {
        let idx = build_index(&corpus(&["0", "1", "2"]), &Basis).unwrap();
        let q = EmbeddingVector::normalized(vec![0.0, 0.0, 1.0]).unwrap();
        let hits = idx.top_k(&q, 3).unwrap();
        assert_eq!(hits[0].0.id, GuidelineId(2));
        assert_eq!(hits[0].1, 1.0);
        // remaining scores tie at 0; ascending id order
        assert_eq!(hits[1].0.id, GuidelineId(0));
        assert_eq!(hits[2].0.id, GuidelineId(1));
        assert!(hits[1..].iter().all(|(_, s)| *s == 0.0));
        assert_eq!(idx.top_k(&q, 10).unwrap().len(), 3);
    }

    #[test]
    fn top_k_errors() {
        let idx = build_index(&corpus(&["0", "1"]), &Basis).unwrap();
        let wrong = EmbeddingVector::normalized(vec![1.0, 0.0]).unwrap();
        assert!(matches!(idx.top_k(&wrong, 1), Err(Error::Shape(_))));
        let q = EmbeddingVector::normalized(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(idx.top_k(&q, 0).is_err());
    }

    #[test]
    fn embedder_failure_names_guideline() {
        let err = build_index(&corpus(&["0", "oops"]), &Basis).unwrap_err();
        assert!(matches!(err, Error::Embedding { id, .. } if id == "G1"));
    }

    #[test]
    fn ties_order_numerically() {
        let g = corpus(&["same", "same", "same", "same", "same", "same", "same", "same", "same", "same", "same"]);
        let idx = build_index(&g, &HashEmbedder::default()).unwrap();
        let q = embed_text(&HashEmbedder::default(), "same").unwrap();
        let ids: Vec<u32> = idx.top_k(&q, 11).unwrap().iter().map(|(g, _)| g.id.0).collect();
        assert_eq!(ids, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn index_file_round_trip() {
        let g = corpus(&["umbrellas are part of the pedestrian", "mannequins are excluded"]);
        let idx = build_index(&g, &HashEmbedder::default()).unwrap();
        let json = serde_json::to_string(&idx.to_file()).unwrap();
        let file: IndexFile = serde_json::from_str(&json).unwrap();
        assert_eq!(GuidelineIndex::from_file(file.clone(), &g).unwrap(), idx);
        assert!(GuidelineIndex::from_file(file, &g[..1]).is_err());
    }
}
