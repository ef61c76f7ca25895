//! Exact top-K cosine retrieval over a knowledge base, with a small binary
//! persistence format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic   "ARAIDX1"                 7 bytes
//! dim     u32
//! count   u32
//! key     u8   0 = image embedding, 1 = caption embedding
//! count × record:
//!     id, image_uri, caption        u32 length + UTF-8 bytes each
//!     granularity                   u8   0 = coarse, 1 = fine
//!     has_parent                    u8   followed by a string when 1
//!     image_embedding               dim × f32
//!     caption_embedding             dim × f32
//! ```

use std::cmp::Ordering;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{l2_normalize, EmbeddingVector, Granularity, KnowledgeEntry};
use crate::error::{Error, Result};
use crate::exec::Execution;

const MAGIC: &[u8; 7] = b"ARAIDX1";

/// Below this many entries a parallel scan costs more than it saves.
const PARALLEL_SCAN_MIN: usize = 2048;
const SCAN_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyField {
    ImageEmbedding,
    CaptionEmbedding,
}

impl KeyField {
    pub fn select<'a>(&self, entry: &'a KnowledgeEntry) -> &'a EmbeddingVector {
        match self {
            Self::ImageEmbedding => &entry.image_embedding,
            Self::CaptionEmbedding => &entry.caption_embedding,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Self::ImageEmbedding => 0,
            Self::CaptionEmbedding => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredHit {
    pub entry: KnowledgeEntry,
    pub score: f64,
}

impl ScoredHit {
    pub fn id(&self) -> &str {
        &self.entry.id
    }
}

/// Exact brute-force cosine index. Immutable after build.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    entries: Vec<KnowledgeEntry>,
    dim: usize,
    key_field: KeyField,
    /// Normalized keys, `dim` floats per entry.
    keys: Vec<f32>,
    key_norms: Vec<f64>,
    execution: Execution,
}

impl VectorIndex {
    pub fn build(entries: Vec<KnowledgeEntry>, key_field: KeyField) -> Result<Self> {
        let first = entries.first().ok_or(Error::EmptyKnowledgeBase)?;
        let dim = first.image_embedding.dim();
        let mut snapped = Vec::with_capacity(entries.len());
        let mut keys = Vec::with_capacity(entries.len() * dim);
        let mut key_norms = Vec::with_capacity(entries.len());
        for entry in entries {
            for e in [&entry.image_embedding, &entry.caption_embedding] {
                if e.dim() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, actual: e.dim() });
                }
            }
            let entry = KnowledgeEntry {
                image_embedding: entry.image_embedding.to_f32_precision(),
                caption_embedding: entry.caption_embedding.to_f32_precision(),
                ..entry
            };
            let unit = l2_normalize(key_field.select(&entry))?;
            let start = keys.len();
            keys.extend(unit.values().iter().map(|&v| v as f32));
            let norm = keys[start..].iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            key_norms.push(norm);
            snapped.push(entry);
        }
        Ok(Self { entries: snapped, dim, key_field, keys, key_norms, execution: Execution::default() })
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn key_field(&self) -> KeyField {
        self.key_field
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    /// The single granularity shared by all entries, if there is one.
    pub fn granularity(&self) -> Option<Granularity> {
        let g = self.entries.first()?.granularity;
        self.entries.iter().all(|e| e.granularity == g).then_some(g)
    }

    fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine of `query` against every entry, in build order.
    pub fn scores(&self, query: &EmbeddingVector) -> Result<Vec<f64>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: query.dim() });
        }
        let q = query.values();
        let qn = query.norm();
        if qn == 0.0 {
            return Err(Error::ZeroVector);
        }
        let score = |i: usize| {
            let dot: f64 = q.iter().zip(self.key(i)).map(|(a, &b)| a * b as f64).sum();
            // +0.0 folds a negative zero so it ties with positive zero.
            (dot / (qn * self.key_norms[i])).clamp(-1.0, 1.0) + 0.0
        };
        let n = self.entries.len();
        if n >= PARALLEL_SCAN_MIN && self.execution.is_parallel() {
            let chunks: Vec<usize> = (0..n).step_by(SCAN_CHUNK).collect();
            let parts = self
                .execution
                .map(&chunks, |&start| (start..(start + SCAN_CHUNK).min(n)).map(score).collect::<Vec<_>>());
            Ok(parts.concat())
        } else {
            Ok((0..n).map(score).collect())
        }
    }

    /// Exact top-`k` by cosine, ties broken by build position.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<ScoredHit>> {
        let scores = self.scores(query)?;
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| -> Ordering { b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)) };
        let k = k.min(ranked.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < ranked.len() {
            ranked.select_nth_unstable_by(k - 1, by_rank);
            ranked.truncate(k);
        }
        ranked.sort_unstable_by(by_rank);
        Ok(ranked.into_iter().map(|(i, score)| ScoredHit { entry: self.entries[i].clone(), score }).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.push(self.key_field.tag());
        for e in &self.entries {
            put_str(&mut out, &e.id);
            put_str(&mut out, &e.image_uri);
            put_str(&mut out, &e.caption);
            out.push(match e.granularity {
                Granularity::Coarse => 0,
                Granularity::Fine => 1,
            });
            match &e.parent_image_uri {
                Some(p) => {
                    out.push(1);
                    put_str(&mut out, p);
                }
                None => out.push(0),
            }
            for v in e.image_embedding.values().iter().chain(e.caption_embedding.values()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(|_| Error::FormatVersionMismatch("file too short for header".into()))?;
        if &magic != MAGIC {
            return Err(Error::FormatVersionMismatch(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let dim = get_u32(&mut r)? as usize;
        let count = get_u32(&mut r)? as usize;
        let key_field = match get_u8(&mut r)? {
            0 => KeyField::ImageEmbedding,
            1 => KeyField::CaptionEmbedding,
            t => return Err(Error::FormatVersionMismatch(format!("unknown key field tag {t}"))),
        };
        if dim == 0 {
            return Err(Error::FormatVersionMismatch("zero dimension".into()));
        }
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = get_str(&mut r)?;
            let image_uri = get_str(&mut r)?;
            let caption = get_str(&mut r)?;
            let granularity = match get_u8(&mut r)? {
                0 => Granularity::Coarse,
                1 => Granularity::Fine,
                t => return Err(Error::FormatVersionMismatch(format!("unknown granularity tag {t}"))),
            };
            let parent_image_uri = match get_u8(&mut r)? {
                0 => None,
                1 => Some(get_str(&mut r)?),
                t => return Err(Error::FormatVersionMismatch(format!("bad parent flag {t}"))),
            };
            let image_embedding = EmbeddingVector::new(get_f32s(&mut r, dim)?)?;
            let caption_embedding = EmbeddingVector::new(get_f32s(&mut r, dim)?)?;
            entries.push(KnowledgeEntry {
                id,
                image_uri,
                caption,
                image_embedding,
                caption_embedding,
                granularity,
                parent_image_uri,
            });
        }
        if !r.is_empty() {
            return Err(Error::FormatVersionMismatch(format!("{} trailing bytes", r.len())));
        }
        Self::build(entries, key_field)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_u8(r: &mut &[u8]) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let len = get_u32(r)? as usize;
    if len > r.len() {
        return Err(Error::Io(std::io::ErrorKind::UnexpectedEof.into()));
    }
    let (s, rest) = r.split_at(len);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|e| Error::FormatVersionMismatch(e.to_string()))
}

fn get_f32s(r: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        out.push(f32::from_le_bytes(b) as f64);
    }
    Ok(out)
}

/// Reads a line-delimited JSON knowledge base. Blank lines are skipped.
pub fn load_knowledge_base(path: impl AsRef<Path>) -> Result<Vec<KnowledgeEntry>> {
    let path = path.as_ref();
    let file = fs::File::open(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: KnowledgeEntry =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        entry.validate()?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_knowledge_base(path: impl AsRef<Path>, entries: &[KnowledgeEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).map_err(|e| Error::Parse(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::cosine_similarity;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(id: &str, img: Vec<f64>, cap: Vec<f64>) -> KnowledgeEntry {
        KnowledgeEntry {
            id: id.into(),
            image_uri: format!("img://{id}"),
            caption: format!("caption {id}"),
            image_embedding: EmbeddingVector::new(img).unwrap(),
            caption_embedding: EmbeddingVector::new(cap).unwrap(),
            granularity: Granularity::Coarse,
            parent_image_uri: None,
        }
    }

    fn random_entries(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<KnowledgeEntry> {
        (0..n)
            .map(|i| {
                let img = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let cap = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                entry(&format!("e{i}"), img, cap)
            })
            .collect()
    }

    fn oracle(entries: &[KnowledgeEntry], query: &EmbeddingVector, k: usize) -> Vec<String> {
        let mut all: Vec<(usize, f64)> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, cosine_similarity(query, &e.image_embedding).unwrap()))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.into_iter().take(k).map(|(i, _)| entries[i].id.clone()).collect()
    }

    #[test]
    fn build_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = VectorIndex::build(random_entries(&mut rng, 3, 4), KeyField::ImageEmbedding).unwrap();
        assert_eq!((idx.dim(), idx.len()), (4, 3));
        let bad = vec![entry("a", vec![1.0; 4], vec![1.0; 4]), entry("b", vec![1.0; 5], vec![1.0; 5])];
        assert!(matches!(VectorIndex::build(bad, KeyField::ImageEmbedding), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(VectorIndex::build(vec![], KeyField::ImageEmbedding), Err(Error::EmptyKnowledgeBase)));
    }

    #[test]
    fn self_match_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let entries = random_entries(&mut rng, 20, 8);
        let target = entries[7].image_embedding.clone();
        let idx = VectorIndex::build(entries, KeyField::ImageEmbedding).unwrap();
        let hits = idx.top_k(&target, 3).unwrap();
        assert_eq!(hits[0].id(), "e7");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn k_larger_than_count_returns_all_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx = VectorIndex::build(random_entries(&mut rng, 5, 4), KeyField::CaptionEmbedding).unwrap();
        let q = EmbeddingVector::new(vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let hits = idx.top_k(&q, 50).unwrap();
        assert_eq!(hits.len(), 5);
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn matches_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let entries = random_entries(&mut rng, 100, 16);
        let idx = VectorIndex::build(entries.clone(), KeyField::ImageEmbedding).unwrap();
        for _ in 0..20 {
            let q = EmbeddingVector::new((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let got: Vec<String> = idx.top_k(&q, 5).unwrap().iter().map(|h| h.id().to_owned()).collect();
            assert_eq!(got, oracle(&entries, &q, 5));
        }
    }

    #[test]
    fn ties_break_by_position() {
        let entries = vec![
            entry("a", vec![0.0, 1.0], vec![1.0, 0.0]),
            entry("b", vec![1.0, 0.0], vec![1.0, 0.0]),
            entry("c", vec![2.0, 0.0], vec![1.0, 0.0]),
            entry("d", vec![0.0, -1.0], vec![1.0, 0.0]),
        ];
        let idx = VectorIndex::build(entries, KeyField::ImageEmbedding).unwrap();
        let q = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let ids: Vec<_> = idx.top_k(&q, 4).unwrap().iter().map(|h| h.id().to_owned()).collect();
        assert_eq!(ids, ["b", "c", "a", "d"]);
    }

    #[test]
    fn query_dimension_checked() {
        let idx =
            VectorIndex::build(vec![entry("a", vec![1.0, 0.0], vec![1.0, 0.0])], KeyField::ImageEmbedding).unwrap();
        let q = EmbeddingVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(idx.top_k(&q, 1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn persistence_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut entries = random_entries(&mut rng, 3, 6);
        entries[1].granularity = Granularity::Fine;
        entries[1].parent_image_uri = Some("img://parent".into());
        let idx = VectorIndex::build(entries, KeyField::CaptionEmbedding).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.idx"), dir.path().join("b.idx"));
        idx.save(&p1).unwrap();
        let loaded = VectorIndex::load(&p1).unwrap();
        assert_eq!(loaded.entries(), idx.entries());
        for _ in 0..10 {
            let q = EmbeddingVector::new((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            assert_eq!(idx.top_k(&q, 3).unwrap(), loaded.top_k(&q, 3).unwrap());
            let (a, b) = (idx.scores(&q).unwrap(), loaded.scores(&q).unwrap());
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_or_foreign_files_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bytes = VectorIndex::build(random_entries(&mut rng, 3, 4), KeyField::ImageEmbedding).unwrap().to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = VectorIndex::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::FormatVersionMismatch(_) | Error::Io(_)), "{err:?}");
        }
        let mut foreign = bytes.clone();
        foreign[6] = b'9';
        assert!(matches!(VectorIndex::from_bytes(&foreign), Err(Error::FormatVersionMismatch(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(VectorIndex::from_bytes(&extra), Err(Error::FormatVersionMismatch(_))));
    }

    #[test]
    fn knowledge_base_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"image_uri\":\"u\",\"caption\":\"a cat\",\"image_embedding\":[1,0],\
             \"caption_embedding\":[0,1],\"granularity\":\"fine\",\"parent_image_uri\":\"p\"}\n\n",
        )
        .unwrap();
        let kb = load_knowledge_base(&path).unwrap();
        assert_eq!(kb.len(), 1);
        assert_eq!(kb[0].granularity, Granularity::Fine);
        let out = dir.path().join("out.jsonl");
        write_knowledge_base(&out, &kb).unwrap();
        assert_eq!(load_knowledge_base(&out).unwrap(), kb);
        fs::write(&path, "{\"id\":\"a\"}\n").unwrap();
        assert!(matches!(load_knowledge_base(&path), Err(Error::Parse(_))));
    }

    proptest! {
        #[test]
        fn truncation_is_monotone(seed in 0u64..500, k in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = VectorIndex::build(random_entries(&mut rng, 15, 5), KeyField::ImageEmbedding).unwrap();
            let q = EmbeddingVector::new((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let short = idx.top_k(&q, k).unwrap();
            let long = idx.top_k(&q, k + 1).unwrap();
            prop_assert_eq!(&long[..short.len()], &short[..]);
            prop_assert!(long.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}
