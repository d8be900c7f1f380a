//! Knowledge base of confidence-weighted quadruples.
//!
//! Assertions arrive as KB-TSV (`subject<TAB>relation<TAB>object<TAB>weight`).
//! Relations are folded onto the twenty retained names, weights are clamped
//! into `[0.1, 2.0]`, and every quadruple is indexed under the prototype of
//! each word of its subject.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text_prep::prototype;

pub const MIN_CONFIDENCE: f64 = 0.1;
pub const MAX_CONFIDENCE: f64 = 2.0;

/// The retained relation names, in table order.
pub const RETAINED_RELATIONS: [&str; 20] = [
    "locate",
    "can",
    "causes",
    "product",
    "desires",
    "antonym",
    "situation",
    "is",
    "entails",
    "isa",
    "disable",
    "unnecessary",
    "have",
    "relatedto",
    "field",
    "capital",
    "influence",
    "occupation",
    "language",
    "leader",
];

/// Raw relation names folded onto a retained name.
pub const RELATION_SYNONYMS: [(&str, &str); 20] = [
    ("atlocation", "locate"),
    ("locatednear", "locate"),
    ("capableof", "can"),
    ("causesdesire", "desires"),
    ("notdesires", "desires"),
    ("madeof", "product"),
    ("createdby", "product"),
    ("partof", "have"),
    ("hasa", "have"),
    ("hassubevent", "entails"),
    ("hasprerequisite", "entails"),
    ("usedfor", "situation"),
    ("hascontext", "field"),
    ("instanceof", "isa"),
    ("definedas", "is"),
    ("sameas", "is"),
    ("notcapableof", "disable"),
    ("distinctfrom", "antonym"),
    ("motivatedbygoal", "causes"),
    ("receivesaction", "situation"),
];

#[derive(Debug, Error)]
pub enum KbError {
    #[error("line {line}: {reason}")]
    Ingest { line: usize, reason: String },
    #[error("negative weight {0}")]
    NegativeWeight(f64),
    #[error("knowledge index has not been built")]
    NotBuilt,
    #[error("knowledge index is already built and immutable")]
    AlreadyBuilt,
    #[error("bad retrieval query: {0}")]
    Query(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// An assertion as it appears in the dump, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAssertion {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub weight: f64,
}

impl RawAssertion {
    pub fn parse_line(line: &str, line_no: usize) -> Result<Self, KbError> {
        let err = |reason: String| KbError::Ingest { line: line_no, reason };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let weight: f64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| err(format!("unparsable weight {:?}", fields[3])))?;
        if !weight.is_finite() || weight < 0.0 {
            return Err(err(format!("weight must be a non-negative number, got {weight}")));
        }
        if fields[0].is_empty() || fields[2].is_empty() {
            return Err(err("empty subject or object".into()));
        }
        Ok(Self {
            subject: fields[0].to_string(),
            relation: fields[1].to_string(),
            object: fields[2].to_string(),
            weight,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeQuadruple {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub confidence: f64,
}

impl KnowledgeQuadruple {
    /// The padding quadruple: empty fields, confidence exactly zero.
    pub fn null() -> Self {
        Self {
            subject: String::new(),
            relation: String::new(),
            object: String::new(),
            confidence: 0.0,
        }
    }

    pub fn is_null(&self) -> bool {
        self.subject.is_empty() && self.relation.is_empty() && self.object.is_empty()
    }

    fn key(&self) -> (&str, &str, &str) {
        (&self.subject, &self.relation, &self.object)
    }

    /// Retrieval order: confidence descending, then `(subject, relation,
    /// object)` ascending, nulls last.
    pub fn rank_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.is_null()
            .cmp(&other.is_null())
            .then_with(|| other.confidence.total_cmp(&self.confidence))
            .then_with(|| self.key().cmp(&other.key()))
    }
}

impl fmt::Display for KnowledgeQuadruple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.subject, self.relation, self.object, self.confidence
        )
    }
}

/// Canonical relation for a raw name, or `None` when the relation is dropped.
pub fn merge_relations(raw: &str) -> Option<&'static str> {
    let folded = raw.trim().to_lowercase();
    if let Some(&(_, canon)) = RELATION_SYNONYMS.iter().find(|(name, _)| *name == folded) {
        return Some(canon);
    }
    RETAINED_RELATIONS.iter().copied().find(|name| *name == folded)
}

/// Clamps a source-scale weight into `[0.1, 2.0]`.
pub fn normalize_confidence(weight: f64) -> Result<f64, KbError> {
    if weight < 0.0 || weight.is_nan() {
        return Err(KbError::NegativeWeight(weight));
    }
    Ok(weight.clamp(MIN_CONFIDENCE, MAX_CONFIDENCE))
}

/// Prototypes of the underscore-separated words of a phrase.
pub fn phrase_prototypes(phrase: &str) -> Vec<String> {
    phrase.split('_').filter(|w| !w.is_empty()).map(prototype).collect()
}

/// Immutable retrieval index. Quadruples are stored in retrieval order, so a
/// smaller id always ranks higher.
#[derive(Debug, Clone, Default)]
pub struct KbIndex {
    quadruples: Vec<KnowledgeQuadruple>,
    by_subject_prototype: HashMap<String, Vec<u32>>,
    object_prototypes: Vec<Vec<String>>,
    relation_map: BTreeMap<String, String>,
}

impl KbIndex {
    fn build(store: HashMap<(String, String, String), f64>, relation_map: BTreeMap<String, String>) -> Self {
        let mut quadruples: Vec<KnowledgeQuadruple> = store
            .into_iter()
            .map(|((subject, relation, object), confidence)| KnowledgeQuadruple {
                subject,
                relation,
                object,
                confidence,
            })
            .collect();
        quadruples.sort_by(KnowledgeQuadruple::rank_cmp);
        let mut by_subject_prototype: HashMap<String, Vec<u32>> = HashMap::new();
        let mut object_prototypes = Vec::with_capacity(quadruples.len());
        for (id, q) in quadruples.iter().enumerate() {
            let mut protos = phrase_prototypes(&q.subject);
            protos.sort();
            protos.dedup();
            for p in protos {
                by_subject_prototype.entry(p).or_default().push(id as u32);
            }
            object_prototypes.push(phrase_prototypes(&q.object));
        }
        Self {
            quadruples,
            by_subject_prototype,
            object_prototypes,
            relation_map,
        }
    }

    pub fn len(&self) -> usize {
        self.quadruples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quadruples.is_empty()
    }

    pub fn quadruples(&self) -> &[KnowledgeQuadruple] {
        &self.quadruples
    }

    /// Raw relation names seen during ingestion and the canonical name each became.
    pub fn relation_map(&self) -> &BTreeMap<String, String> {
        &self.relation_map
    }

    /// The `k * n` best quadruples whose subject shares a prototype with the
    /// reference and whose object shares a prototype with any candidate,
    /// padded with null quadruples.
    pub fn retrieve<S: AsRef<str>>(
        &self,
        reference_prototypes: &[S],
        answer_prototypes: &[Vec<String>],
        k: usize,
        n: usize,
    ) -> Result<Vec<KnowledgeQuadruple>, KbError> {
        if k == 0 {
            return Err(KbError::Query("k must be positive".into()));
        }
        if n < 2 || answer_prototypes.len() != n {
            return Err(KbError::Query(format!(
                "expected n >= 2 candidate prototype lists, got n = {n} with {} lists",
                answer_prototypes.len()
            )));
        }
        let want = k * n;
        let answers: HashSet<&str> = answer_prototypes.iter().flatten().map(String::as_str).collect();

        let mut seen_lists = HashSet::new();
        let mut heap: BinaryHeap<Reverse<(u32, usize, usize)>> = BinaryHeap::new();
        let mut lists: Vec<&[u32]> = Vec::new();
        for p in reference_prototypes {
            let p = p.as_ref();
            if !seen_lists.insert(p) {
                continue;
            }
            if let Some(ids) = self.by_subject_prototype.get(p) {
                heap.push(Reverse((ids[0], lists.len(), 0)));
                lists.push(ids);
            }
        }

        let mut out = Vec::with_capacity(want);
        let mut last: Option<u32> = None;
        while let Some(Reverse((id, list, pos))) = heap.pop() {
            if let Some(&next) = lists[list].get(pos + 1) {
                heap.push(Reverse((next, list, pos + 1)));
            }
            if last == Some(id) {
                continue;
            }
            last = Some(id);
            let matches = self.object_prototypes[id as usize]
                .iter()
                .any(|p| answers.contains(p.as_str()));
            if matches {
                out.push(self.quadruples[id as usize].clone());
                if out.len() == want {
                    break;
                }
            }
        }
        out.resize_with(want, KnowledgeQuadruple::null);
        Ok(out)
    }

    /// Writes the normalized quadruples as KB-TSV plus a relation-map file.
    pub fn save_dir(&self, dir: &Path) -> Result<(), KbError> {
        fs::create_dir_all(dir)?;
        let mut f = io::BufWriter::new(fs::File::create(dir.join("quadruples.tsv"))?);
        for q in &self.quadruples {
            writeln!(f, "{}\t{}\t{}\t{}", q.subject, q.relation, q.object, q.confidence)?;
        }
        f.flush()?;
        let map = serde_json::to_string_pretty(&self.relation_map).map_err(io::Error::other)?;
        fs::write(dir.join("relation_map.json"), map + "\n")?;
        Ok(())
    }
}

/// Single-writer builder that turns into an immutable [`KbIndex`].
#[derive(Debug, Default)]
pub struct KbStore {
    pending: HashMap<(String, String, String), f64>,
    relation_map: BTreeMap<String, String>,
    index: Option<KbIndex>,
}

impl KbStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Ingests KB-TSV lines; returns how many assertions were stored (after
    /// relation filtering, before deduplication).
    pub fn ingest_assertions<R: BufRead>(&mut self, reader: R) -> Result<usize, KbError> {
        if self.index.is_some() {
            return Err(KbError::AlreadyBuilt);
        }
        let mut stored = 0;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let raw = RawAssertion::parse_line(line, i + 1)?;
            if self.insert(raw)? {
                stored += 1;
            }
        }
        Ok(stored)
    }

    /// Inserts one assertion, keeping the highest confidence among exact
    /// duplicates. Returns false when the relation is dropped.
    pub fn insert(&mut self, raw: RawAssertion) -> Result<bool, KbError> {
        if self.index.is_some() {
            return Err(KbError::AlreadyBuilt);
        }
        let Some(relation) = merge_relations(&raw.relation) else {
            return Ok(false);
        };
        self.relation_map
            .entry(raw.relation.clone())
            .or_insert_with(|| relation.to_string());
        let confidence = normalize_confidence(raw.weight)?;
        let slot = self
            .pending
            .entry((raw.subject, relation.to_string(), raw.object))
            .or_insert(confidence);
        *slot = slot.max(confidence);
        Ok(true)
    }

    pub fn build(&mut self) -> &KbIndex {
        if self.index.is_none() {
            let pending = std::mem::take(&mut self.pending);
            let map = std::mem::take(&mut self.relation_map);
            self.index = Some(KbIndex::build(pending, map));
        }
        self.index.as_ref().expect("index was just built")
    }

    pub fn index(&self) -> Result<&KbIndex, KbError> {
        self.index.as_ref().ok_or(KbError::NotBuilt)
    }

    pub fn into_index(mut self) -> KbIndex {
        self.build();
        self.index.take().expect("built")
    }

    pub fn retrieve<S: AsRef<str>>(
        &self,
        reference_prototypes: &[S],
        answer_prototypes: &[Vec<String>],
        k: usize,
        n: usize,
    ) -> Result<Vec<KnowledgeQuadruple>, KbError> {
        self.index()?.retrieve(reference_prototypes, answer_prototypes, k, n)
    }
}

/// Loads either a KB-TSV file or a directory written by [`KbIndex::save_dir`].
pub fn load_kb(path: &Path) -> Result<KbIndex, KbError> {
    let file = if path.is_dir() {
        path.join("quadruples.tsv")
    } else {
        path.to_path_buf()
    };
    let mut store = KbStore::new();
    store.ingest_assertions(io::BufReader::new(fs::File::open(file)?))?;
    Ok(store.into_index())
}

/// Builds an index from in-memory TSV text.
pub fn index_from_tsv(text: &str) -> Result<KbIndex, KbError> {
    let mut store = KbStore::new();
    store.ingest_assertions(text.as_bytes())?;
    Ok(store.into_index())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn protos(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| prototype(w)).collect()
    }

    #[test]
    fn worked_quadruple_is_clamped() {
        let mut store = KbStore::new();
        let n = store
            .ingest_assertions("doctor\tcan\thelp_sick_person\t4.472\n".as_bytes())
            .unwrap();
        assert_eq!(n, 1);
        let index = store.build();
        assert_eq!(
            index.quadruples()[0],
            KnowledgeQuadruple {
                subject: "doctor".into(),
                relation: "can".into(),
                object: "help_sick_person".into(),
                confidence: 2.0
            }
        );
    }

    #[test]
    fn empty_stream_stores_nothing() {
        let mut store = KbStore::new();
        assert_eq!(store.ingest_assertions("".as_bytes()).unwrap(), 0);
        assert!(store.build().is_empty());
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let mut store = KbStore::new();
        let err = store
            .ingest_assertions("a\tisa\tb\t1.0\nbroken line\n".as_bytes())
            .unwrap_err();
        assert!(matches!(err, KbError::Ingest { line: 2, .. }), "{err}");
        let mut store = KbStore::new();
        let err = store.ingest_assertions("a\tisa\tb\tlots\n".as_bytes()).unwrap_err();
        assert!(matches!(err, KbError::Ingest { line: 1, .. }));
    }

    #[test]
    fn relation_folding() {
        assert_eq!(merge_relations("relatedto"), Some("relatedto"));
        assert_eq!(merge_relations("RelatedTo"), Some("relatedto"));
        assert_eq!(merge_relations("AtLocation"), Some("locate"));
        assert_eq!(merge_relations("NotDesires"), Some("desires"));
        assert_eq!(merge_relations("ExternalURL"), None);
        assert_eq!(merge_relations("dbpedia/genre"), None);
        for name in RETAINED_RELATIONS {
            assert_eq!(merge_relations(name), Some(name));
        }
        for (_, canon) in RELATION_SYNONYMS {
            assert!(RETAINED_RELATIONS.contains(&canon));
        }
    }

    #[test]
    fn confidence_clamp() {
        assert_eq!(normalize_confidence(4.472).unwrap(), 2.0);
        assert_eq!(normalize_confidence(1.0).unwrap(), 1.0);
        assert_eq!(normalize_confidence(0.05).unwrap(), 0.1);
        assert!(matches!(normalize_confidence(-0.5), Err(KbError::NegativeWeight(_))));
    }

    #[test]
    fn duplicates_keep_max_confidence() {
        let index = index_from_tsv("a\tAtLocation\tb\t0.5\na\tLocatedNear\tb\t1.5\n").unwrap();
        assert_eq!(index.len(), 1);
        assert_eq!(index.quadruples()[0].confidence, 1.5);
    }

    #[test]
    fn retrieval_before_build_is_a_state_error() {
        let store = KbStore::new();
        let err = store.retrieve(&["doctor"], &[vec![], vec![]], 5, 2).unwrap_err();
        assert!(matches!(err, KbError::NotBuilt));
    }

    #[test]
    fn doctor_example_flows_through() {
        let index =
            index_from_tsv("doctor\tcan\thelp_sick_person\t4.472\ndoctor\tAtLocation\thospital\t1.0\n").unwrap();
        let reference = protos(&["the", "doctor", "arrived"]);
        let answers = vec![protos(&["helping"]), protos(&["singing"]), protos(&["flying"])];
        let got = index.retrieve(&reference, &answers, 5, 3).unwrap();
        assert_eq!(got.len(), 15);
        assert_eq!(got[0].object, "help_sick_person");
        assert!(got[1..].iter().all(KnowledgeQuadruple::is_null));
    }

    #[test]
    fn empty_kb_pads_with_nulls() {
        let index = KbIndex::default();
        let got = index
            .retrieve(&["x"], &[vec!["a".into()], vec![], vec![]], 5, 3)
            .unwrap();
        assert_eq!(got.len(), 15);
        assert!(got.iter().all(|q| q.is_null() && q.confidence == 0.0));
    }

    #[test]
    fn saved_directory_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let index = index_from_tsv("a_b\tRelatedTo\tc\t0.3\nd\tisa\te\t9\n").unwrap();
        index.save_dir(dir.path()).unwrap();
        let again = load_kb(dir.path()).unwrap();
        assert_eq!(index.quadruples(), again.quadruples());
    }
}
