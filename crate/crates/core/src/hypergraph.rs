//! Per-year hypergraph snapshots over concept or referenced-journal vocabularies,
//! plus negative sampling for the Poisson likelihood.

use crate::config::BuildConfig;
use crate::corpus::{Corpus, PaperRecord};
use crate::error::{Error, Result};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    /// Level-three concepts within the paper.
    Content,
    /// Journals in the paper's reference list.
    Context,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Content => "content",
            Channel::Context => "context",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(Channel::Content),
            "context" => Ok(Channel::Context),
            other => Err(Error::validation(format!("unknown channel '{other}'"))),
        }
    }
}

pub const RARE_NODE: &str = "__RARE__";

/// Dense node indexing shared by every snapshot of one channel.
/// Index 0 is the reserved RARE bucket.
#[derive(Debug, Clone)]
pub struct NodeVocab {
    pub ids: Vec<String>,
    index: HashMap<String, u32>,
}

impl NodeVocab {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn rare(&self) -> u32 {
        0
    }

    /// Maps unseen ids to the RARE bucket.
    pub fn index_of(&self, id: &str) -> u32 {
        *self.index.get(id).unwrap_or(&0)
    }

    pub fn id_of(&self, idx: u32) -> &str {
        &self.ids[idx as usize]
    }

    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        h.finalize().into()
    }
}

/// One year's hyperedges over one channel vocabulary.
#[derive(Debug, Clone)]
pub struct HypergraphSnapshot {
    pub year: i32,
    pub channel: Channel,
    pub vocab: Arc<NodeVocab>,
    /// (paper_id, sorted distinct node indices), each of cardinality >= 2.
    pub hyperedges: Vec<(String, Vec<u32>)>,
    /// Canonical (sorted) node set -> multiplicity within the year.
    pub edge_counts: BTreeMap<Vec<u32>, u32>,
}

#[derive(Debug, Clone)]
pub struct NegativeSampleSet {
    pub samples: Vec<Vec<u32>>,
    pub per_positive_ratio: u32,
}

/// Extract a paper's channel node ids: concepts for content, deduplicated
/// referenced journals for context.
pub fn channel_node_ids(paper: &PaperRecord, channel: Channel) -> BTreeSet<&str> {
    match channel {
        Channel::Content => paper.concept_ids_l3.iter().map(|s| s.as_str()).collect(),
        Channel::Context => paper
            .referenced_journal_ids
            .iter()
            .map(|s| s.as_str())
            .collect(),
    }
}

fn subsample_key(paper_id: &str, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(paper_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Map a paper to its canonical hyperedge node set. Returns None when fewer than
/// two distinct nodes survive the mapping (the paper is unscorable on this channel).
pub fn paper_nodes(
    paper: &PaperRecord,
    channel: Channel,
    vocab: &NodeVocab,
    config: &BuildConfig,
) -> Option<Vec<u32>> {
    let nodes: BTreeSet<u32> = channel_node_ids(paper, channel)
        .into_iter()
        .map(|id| vocab.index_of(id))
        .collect();
    if nodes.len() < 2 {
        return None;
    }
    let mut nodes: Vec<u32> = nodes.iter().copied().collect();
    if nodes.len() > config.max_edge_size {
        let mut rng = ChaCha8Rng::seed_from_u64(subsample_key(&paper.paper_id, config.subsample_seed));
        nodes.shuffle(&mut rng);
        nodes.truncate(config.max_edge_size);
        nodes.sort_unstable();
    }
    Some(nodes)
}

/// Build the channel vocabulary from node occurrences across the history window.
pub fn build_vocab(
    corpus: &Corpus,
    channel: Channel,
    years: Option<(i32, i32)>,
    config: &BuildConfig,
) -> NodeVocab {
    let mut freq: BTreeMap<&str, u32> = BTreeMap::new();
    for paper in &corpus.papers {
        if let Some((lo, hi)) = years {
            if paper.year < lo || paper.year > hi {
                continue;
            }
        }
        for id in channel_node_ids(paper, channel) {
            *freq.entry(id).or_insert(0) += 1;
        }
    }
    let mut ids = vec![RARE_NODE.to_string()];
    for (id, n) in &freq {
        if *n >= config.min_node_freq {
            ids.push((*id).to_string());
        }
    }
    let index = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), i as u32))
        .collect();
    NodeVocab { ids, index }
}

/// One snapshot per year over a shared vocabulary.
pub fn build_snapshots(
    corpus: &Corpus,
    channel: Channel,
    years: std::ops::RangeInclusive<i32>,
    config: &BuildConfig,
) -> Vec<HypergraphSnapshot> {
    let vocab = Arc::new(build_vocab(corpus, channel, None, config));
    years
        .map(|year| build_snapshot_with_vocab(corpus, channel, year, Arc::clone(&vocab), config))
        .collect()
}

pub fn build_snapshot_with_vocab(
    corpus: &Corpus,
    channel: Channel,
    year: i32,
    vocab: Arc<NodeVocab>,
    config: &BuildConfig,
) -> HypergraphSnapshot {
    let mut hyperedges = Vec::new();
    let mut edge_counts: BTreeMap<Vec<u32>, u32> = BTreeMap::new();
    for paper in &corpus.papers {
        if paper.year != year {
            continue;
        }
        if let Some(nodes) = paper_nodes(paper, channel, &vocab, config) {
            *edge_counts.entry(nodes.clone()).or_insert(0) += 1;
            hyperedges.push((paper.paper_id.clone(), nodes));
        }
    }
    hyperedges.sort_by(|a, b| a.0.cmp(&b.0));
    HypergraphSnapshot {
        year,
        channel,
        vocab,
        hyperedges,
        edge_counts,
    }
}

/// Merge the per-year snapshots whose year falls in `[from, upto]` into one
/// training snapshot labeled with the target year `upto`.
pub fn merge_history(snapshots: &[HypergraphSnapshot], upto: i32, window: Option<u32>) -> Result<HypergraphSnapshot> {
    let from = window.map_or(i32::MIN, |w| upto - w as i32 + 1);
    let mut selected: Vec<&HypergraphSnapshot> = snapshots
        .iter()
        .filter(|s| s.year >= from && s.year <= upto)
        .collect();
    selected.sort_by_key(|s| s.year);
    let first = selected
        .first()
        .ok_or_else(|| Error::validation(format!("no snapshots in history through {upto}")))?;
    let vocab = Arc::clone(&first.vocab);
    let mut hyperedges = Vec::new();
    let mut edge_counts: BTreeMap<Vec<u32>, u32> = BTreeMap::new();
    for snap in &selected {
        if !Arc::ptr_eq(&snap.vocab, &vocab) && snap.vocab.hash() != vocab.hash() {
            return Err(Error::validation(
                "cannot merge snapshots with different vocabularies".to_string(),
            ));
        }
        for (set, n) in &snap.edge_counts {
            *edge_counts.entry(set.clone()).or_insert(0) += n;
        }
        hyperedges.extend(snap.hyperedges.iter().cloned());
    }
    Ok(HypergraphSnapshot {
        year: upto,
        channel: first.channel,
        vocab,
        hyperedges,
        edge_counts,
    })
}

/// Draw `ratio` negatives per observed combination, matching the observed
/// cardinality distribution and node marginals, rejecting observed combinations.
pub fn draw_negatives(
    snapshot: &HypergraphSnapshot,
    ratio: u32,
    seed: u64,
) -> Result<NegativeSampleSet> {
    if ratio < 1 {
        return Err(Error::validation("negative ratio must be >= 1".to_string()));
    }
    let positives: HashSet<&Vec<u32>> = snapshot.edge_counts.keys().collect();
    let n_positive = snapshot.edge_counts.len();
    let n_nodes = snapshot.vocab.len();

    // Count-weighted node marginals and cardinality pool.
    let mut weights = vec![0.0f64; n_nodes];
    let mut cards: Vec<usize> = Vec::with_capacity(n_positive);
    for (set, count) in &snapshot.edge_counts {
        cards.push(set.len());
        for &i in set {
            weights[i as usize] += *count as f64;
        }
    }
    if cards.is_empty() {
        return Ok(NegativeSampleSet {
            samples: Vec::new(),
            per_positive_ratio: ratio,
        });
    }
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::Numeric(format!("degenerate node marginals: {e}")))?;
    let n_weighted = weights.iter().filter(|w| **w > 0.0).count();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_positive * ratio as usize);
    for _ in 0..n_positive * ratio as usize {
        let k = cards[rng.gen_range(0..cards.len())];
        if k > n_weighted {
            return Err(Error::validation(
                "vocabulary too small for negative sampling".to_string(),
            ));
        }
        let mut accepted = None;
        for _ in 0..1000 {
            let mut set: BTreeSet<u32> = BTreeSet::new();
            let mut inner_tries = 0;
            while set.len() < k && inner_tries < 10_000 {
                set.insert(dist.sample(&mut rng) as u32);
                inner_tries += 1;
            }
            if set.len() < k {
                continue;
            }
            let set: Vec<u32> = set.into_iter().collect();
            if !positives.contains(&set) {
                accepted = Some(set);
                break;
            }
        }
        match accepted {
            Some(set) => samples.push(set),
            None => {
                return Err(Error::validation(
                    "vocabulary too small to avoid collisions with observed combinations"
                        .to_string(),
                ))
            }
        }
    }
    Ok(NegativeSampleSet {
        samples,
        per_positive_ratio: ratio,
    })
}

// --- versioned binary snapshot cache ---

const SNAP_MAGIC: &[u8; 4] = b"NVSN";
const SNAP_VERSION: u32 = 1;

fn w_u32(out: &mut impl Write, v: u32) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn w_i32(out: &mut impl Write, v: i32) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn w_str(out: &mut impl Write, s: &str) -> std::io::Result<()> {
    w_u32(out, s.len() as u32)?;
    out.write_all(s.as_bytes())
}

fn r_u32(inp: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    inp.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn r_i32(inp: &mut impl Read) -> std::io::Result<i32> {
    let mut b = [0u8; 4];
    inp.read_exact(&mut b)?;
    Ok(i32::from_le_bytes(b))
}

fn r_str(inp: &mut impl Read) -> std::io::Result<String> {
    let n = r_u32(inp)? as usize;
    let mut buf = vec![0u8; n];
    inp.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Cache key fields stored alongside the snapshot payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotKey {
    pub corpus_hash: String,
    pub config_hash: String,
}

pub fn write_snapshot(path: &Path, snap: &HypergraphSnapshot, key: &SnapshotKey) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    (|| -> std::io::Result<()> {
        out.write_all(SNAP_MAGIC)?;
        w_u32(&mut out, SNAP_VERSION)?;
        w_str(&mut out, &key.corpus_hash)?;
        w_str(&mut out, &key.config_hash)?;
        out.write_all(&[match snap.channel {
            Channel::Content => 0u8,
            Channel::Context => 1u8,
        }])?;
        w_i32(&mut out, snap.year)?;
        w_u32(&mut out, snap.vocab.len() as u32)?;
        for id in &snap.vocab.ids {
            w_str(&mut out, id)?;
        }
        w_u32(&mut out, snap.hyperedges.len() as u32)?;
        for (pid, nodes) in &snap.hyperedges {
            w_str(&mut out, pid)?;
            w_u32(&mut out, nodes.len() as u32)?;
            for &n in nodes {
                w_u32(&mut out, n)?;
            }
        }
        w_u32(&mut out, snap.edge_counts.len() as u32)?;
        for (set, count) in &snap.edge_counts {
            w_u32(&mut out, set.len() as u32)?;
            for &n in set {
                w_u32(&mut out, n)?;
            }
            w_u32(&mut out, *count)?;
        }
        out.flush()
    })()
    .map_err(io)
}

pub fn read_snapshot(path: &Path) -> Result<(HypergraphSnapshot, SnapshotKey)> {
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut inp = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic).map_err(io)?;
    if &magic != SNAP_MAGIC {
        return Err(Error::validation(format!(
            "{}: not a snapshot cache file",
            path.display()
        )));
    }
    let version = r_u32(&mut inp).map_err(io)?;
    if version != SNAP_VERSION {
        return Err(Error::StaleCache(format!(
            "{}: snapshot cache version {version}, expected {SNAP_VERSION}",
            path.display()
        )));
    }
    (|| -> std::io::Result<(HypergraphSnapshot, SnapshotKey)> {
        let corpus_hash = r_str(&mut inp)?;
        let config_hash = r_str(&mut inp)?;
        let mut ch = [0u8; 1];
        inp.read_exact(&mut ch)?;
        let channel = if ch[0] == 0 { Channel::Content } else { Channel::Context };
        let year = r_i32(&mut inp)?;
        let n_vocab = r_u32(&mut inp)? as usize;
        let mut ids = Vec::with_capacity(n_vocab);
        for _ in 0..n_vocab {
            ids.push(r_str(&mut inp)?);
        }
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        let vocab = Arc::new(NodeVocab { ids, index });
        let n_edges = r_u32(&mut inp)? as usize;
        let mut hyperedges = Vec::with_capacity(n_edges);
        for _ in 0..n_edges {
            let pid = r_str(&mut inp)?;
            let k = r_u32(&mut inp)? as usize;
            let mut nodes = Vec::with_capacity(k);
            for _ in 0..k {
                nodes.push(r_u32(&mut inp)?);
            }
            hyperedges.push((pid, nodes));
        }
        let n_counts = r_u32(&mut inp)? as usize;
        let mut edge_counts = BTreeMap::new();
        for _ in 0..n_counts {
            let k = r_u32(&mut inp)? as usize;
            let mut set = Vec::with_capacity(k);
            for _ in 0..k {
                set.push(r_u32(&mut inp)?);
            }
            let count = r_u32(&mut inp)?;
            edge_counts.insert(set, count);
        }
        Ok((
            HypergraphSnapshot {
                year,
                channel,
                vocab,
                hyperedges,
                edge_counts,
            },
            SnapshotKey {
                corpus_hash,
                config_hash,
            },
        ))
    })()
    .map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::IngestConfig;
    use crate::corpus::AuthorRecord;

    fn paper(id: &str, year: i32, concepts: &[&str], refs: &[&str]) -> PaperRecord {
        PaperRecord {
            paper_id: id.into(),
            year,
            journal_id: None,
            concept_ids_l3: concepts.iter().map(|s| s.to_string()).collect(),
            field_ids_l1: Default::default(),
            discipline_ids_l0: Default::default(),
            referenced_journal_ids: refs.iter().map(|s| s.to_string()).collect(),
            author_ids: vec!["a".into()],
            institution_id: None,
            open_access: false,
            jif_2y: None,
            jif_5y: None,
            n_grants: None,
        }
    }

    fn corpus_of(papers: Vec<PaperRecord>) -> Corpus {
        Corpus::from_parts(papers, Vec::<AuthorRecord>::new(), vec![], IngestConfig::default())
    }

    fn cfg() -> BuildConfig {
        BuildConfig {
            min_node_freq: 1,
            ..BuildConfig::default()
        }
    }

    #[test]
    fn content_hyperedge_from_concepts() {
        let c = corpus_of(vec![paper("p1", 2005, &["a", "b", "c"], &[])]);
        let snaps = build_snapshots(&c, Channel::Content, 2005..=2005, &cfg());
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].hyperedges.len(), 1);
        assert_eq!(snaps[0].hyperedges[0].1.len(), 3);
    }

    #[test]
    fn context_hyperedge_dedups_references() {
        let c = corpus_of(vec![paper("p1", 2005, &[], &["J1", "J1", "J2"])]);
        let snaps = build_snapshots(&c, Channel::Context, 2005..=2005, &cfg());
        assert_eq!(snaps[0].hyperedges[0].1.len(), 2);
    }

    #[test]
    fn single_node_paper_is_excluded() {
        let c = corpus_of(vec![paper("p1", 2005, &["a"], &[]), paper("p2", 2005, &["a", "b"], &[])]);
        let snaps = build_snapshots(&c, Channel::Content, 2005..=2005, &cfg());
        assert_eq!(snaps[0].hyperedges.len(), 1);
        assert_eq!(snaps[0].hyperedges[0].0, "p2");
    }

    #[test]
    fn rare_nodes_bucket_together() {
        let mut papers = vec![];
        for i in 0..5 {
            papers.push(paper(&format!("p{i}"), 2005, &["common1", "common2"], &[]));
        }
        papers.push(paper("px", 2005, &["common1", "rare_x", "rare_y"], &[]));
        let c = corpus_of(papers);
        let config = BuildConfig {
            min_node_freq: 5,
            ..BuildConfig::default()
        };
        let snaps = build_snapshots(&c, Channel::Content, 2005..=2005, &config);
        let vocab = &snaps[0].vocab;
        assert_eq!(vocab.index_of("rare_x"), vocab.rare());
        assert_eq!(vocab.index_of("rare_y"), vocab.rare());
        assert_ne!(vocab.index_of("common1"), vocab.rare());
        // px maps to {common1, RARE}
        let px = snaps[0].hyperedges.iter().find(|(id, _)| id == "px").unwrap();
        assert_eq!(px.1.len(), 2);
        assert!(px.1.contains(&vocab.rare()));
    }

    #[test]
    fn snapshot_build_is_deterministic() {
        let c = corpus_of(vec![
            paper("p1", 2005, &["a", "b"], &[]),
            paper("p2", 2005, &["b", "c"], &[]),
        ]);
        let s1 = build_snapshots(&c, Channel::Content, 2005..=2005, &cfg());
        let s2 = build_snapshots(&c, Channel::Content, 2005..=2005, &cfg());
        assert_eq!(s1[0].vocab.ids, s2[0].vocab.ids);
        assert_eq!(s1[0].hyperedges, s2[0].hyperedges);
        assert_eq!(s1[0].edge_counts, s2[0].edge_counts);
    }

    #[test]
    fn cardinality_sum_matches_paper_counts() {
        let c = corpus_of(vec![
            paper("p1", 2005, &["a", "b", "c"], &[]),
            paper("p2", 2005, &["a", "b"], &[]),
            paper("p3", 2005, &["a"], &[]), // excluded
        ]);
        let snaps = build_snapshots(&c, Channel::Content, 2005..=2005, &cfg());
        let sum: usize = snaps[0].hyperedges.iter().map(|(_, n)| n.len()).sum();
        assert_eq!(sum, 5);
    }

    #[test]
    fn oversize_edges_are_subsampled_deterministically() {
        let concepts: Vec<String> = (0..40).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = concepts.iter().map(|s| s.as_str()).collect();
        let c = corpus_of(vec![paper("p1", 2005, &refs, &[]), paper("p2", 2005, &refs, &[])]);
        let snaps1 = build_snapshots(&c, Channel::Content, 2005..=2005, &cfg());
        let snaps2 = build_snapshots(&c, Channel::Content, 2005..=2005, &cfg());
        let e1 = &snaps1[0].hyperedges[0].1;
        assert_eq!(e1.len(), 32);
        assert_eq!(e1, &snaps2[0].hyperedges[0].1);
    }

    fn toy_snapshot() -> HypergraphSnapshot {
        let mut papers = vec![];
        for i in 0..20 {
            let a = format!("n{}", i % 6);
            let b = format!("n{}", (i + 1) % 6);
            let cc = format!("n{}", (i + 3) % 6);
            papers.push(paper(&format!("p{i}"), 2005, &[&a, &b, &cc], &[]));
        }
        let c = corpus_of(papers);
        build_snapshots(&c, Channel::Content, 2005..=2005, &cfg()).remove(0)
    }

    #[test]
    fn negatives_have_requested_cardinality_and_count() {
        let snap = toy_snapshot();
        let neg = draw_negatives(&snap, 5, 42).unwrap();
        assert_eq!(neg.samples.len(), snap.edge_counts.len() * 5);
    }

    #[test]
    fn negatives_are_deterministic_and_disjoint_from_positives() {
        let snap = toy_snapshot();
        let n1 = draw_negatives(&snap, 3, 7).unwrap();
        let n2 = draw_negatives(&snap, 3, 7).unwrap();
        assert_eq!(n1.samples, n2.samples);
        let positives: HashSet<_> = snap.edge_counts.keys().collect();
        for s in &n1.samples {
            assert!(!positives.contains(s));
        }
    }

    #[test]
    fn snapshot_cache_round_trips() {
        let snap = toy_snapshot();
        let key = SnapshotKey {
            corpus_hash: "abc".into(),
            config_hash: "def".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.bin");
        write_snapshot(&path, &snap, &key).unwrap();
        let (back, key2) = read_snapshot(&path).unwrap();
        assert_eq!(key2, key);
        assert_eq!(back.year, snap.year);
        assert_eq!(back.channel, snap.channel);
        assert_eq!(back.vocab.ids, snap.vocab.ids);
        assert_eq!(back.hyperedges, snap.hyperedges);
        assert_eq!(back.edge_counts, snap.edge_counts);
    }

    #[test]
    fn merge_history_sums_counts() {
        let c = corpus_of(vec![
            paper("p1", 2004, &["a", "b"], &[]),
            paper("p2", 2005, &["a", "b"], &[]),
            paper("p3", 2005, &["b", "c"], &[]),
        ]);
        let snaps = build_snapshots(&c, Channel::Content, 2004..=2005, &cfg());
        let merged = merge_history(&snaps, 2005, None).unwrap();
        assert_eq!(merged.hyperedges.len(), 3);
        let ab = vec![merged.vocab.index_of("a"), merged.vocab.index_of("b")];
        let mut ab_sorted = ab.clone();
        ab_sorted.sort_unstable();
        assert_eq!(merged.edge_counts[&ab_sorted], 2);
    }
}
