//! Citation-graph reward metrics: disruption, two-step credit, outside-subject
//! citation share, forward citations, and author past citations.

use crate::corpus::{CitationEdge, Corpus};
use crate::error::{Error, Result};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

/// Simple citation digraph with per-edge years and per-paper publication years
/// where known.
#[derive(Debug, Clone, Default)]
pub struct CitationGraph {
    /// citing -> [(cited, citing_year)]
    out_edges: HashMap<String, Vec<(String, i32)>>,
    /// cited -> [(citing, citing_year)]
    in_edges: HashMap<String, Vec<(String, i32)>>,
    /// publication year of papers known to the corpus
    years: HashMap<String, i32>,
}

impl CitationGraph {
    pub fn new(edges: &[CitationEdge], years: impl IntoIterator<Item = (String, i32)>) -> Self {
        let mut g = CitationGraph::default();
        for (id, y) in years {
            g.years.insert(id, y);
        }
        for e in edges {
            g.out_edges
                .entry(e.citing_id.clone())
                .or_default()
                .push((e.cited_id.clone(), e.citing_year));
            g.in_edges
                .entry(e.cited_id.clone())
                .or_default()
                .push((e.citing_id.clone(), e.citing_year));
        }
        g
    }

    pub fn from_corpus(corpus: &Corpus) -> Self {
        CitationGraph::new(
            &corpus.citations,
            corpus.papers.iter().map(|p| (p.paper_id.clone(), p.year)),
        )
    }

    pub fn year_of(&self, paper: &str) -> Option<i32> {
        self.years.get(paper).copied()
    }

    pub fn citers(&self, paper: &str) -> &[(String, i32)] {
        self.in_edges.get(paper).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn references(&self, paper: &str) -> &[(String, i32)] {
        self.out_edges.get(paper).map(|v| v.as_slice()).unwrap_or(&[])
    }

    fn require_focal(&self, focal: &str) -> Result<i32> {
        self.year_of(focal)
            .ok_or_else(|| Error::validation(format!("unknown focal paper '{focal}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub paper_id: String,
    pub disruption_5y: Option<f64>,
    pub disruption_3y: Option<f64>,
    pub two_step_credit: Option<f64>,
    pub outside_subject_share: Option<f64>,
    pub cites_2y: u64,
}

/// CD index over papers citing the focal paper and/or its references within
/// `window_years` of publication:
/// (n_i - n_j) / (n_i + n_j + n_k). None when no in-window paper qualifies.
pub fn disruption(graph: &CitationGraph, focal: &str, window_years: i32) -> Result<Option<f64>> {
    let focal_year = graph.require_focal(focal)?;
    let cutoff = focal_year + window_years;
    let refs: HashSet<&str> = graph.references(focal).iter().map(|(r, _)| r.as_str()).collect();

    let cites_focal: HashSet<&str> = graph
        .citers(focal)
        .iter()
        .filter(|(_, y)| *y <= cutoff)
        .map(|(c, _)| c.as_str())
        .collect();
    let mut cites_refs: HashSet<&str> = HashSet::new();
    for r in &refs {
        for (c, y) in graph.citers(r) {
            if *y <= cutoff && c != focal {
                cites_refs.insert(c.as_str());
            }
        }
    }

    let mut n_i = 0i64;
    let mut n_j = 0i64;
    for c in &cites_focal {
        if cites_refs.contains(c) {
            n_j += 1;
        } else {
            n_i += 1;
        }
    }
    let n_k = cites_refs.iter().filter(|c| !cites_focal.contains(**c)).count() as i64;

    let total = n_i + n_j + n_k;
    if total == 0 {
        return Ok(None);
    }
    Ok(Some((n_i - n_j) as f64 / total as f64))
}

/// Fraction of papers two citation steps downstream that also cite the focal
/// paper directly. None unless strictly more than `min_two_step` such papers.
pub fn two_step_credit(
    graph: &CitationGraph,
    focal: &str,
    min_two_step: usize,
) -> Result<Option<f64>> {
    graph.require_focal(focal)?;
    let level1: HashSet<&str> = graph.citers(focal).iter().map(|(c, _)| c.as_str()).collect();
    let mut level2: BTreeSet<&str> = BTreeSet::new();
    for l1 in &level1 {
        for (c, _) in graph.citers(l1) {
            if c != focal {
                level2.insert(c.as_str());
            }
        }
    }
    if level2.len() <= min_two_step {
        return Ok(None);
    }
    let direct = level2.iter().filter(|p| level1.contains(**p)).count();
    Ok(Some(direct as f64 / level2.len() as f64))
}

/// Fraction of citing papers (with known subjects) sharing no subject with the
/// focal paper.
pub fn outside_subject_share(
    graph: &CitationGraph,
    focal: &str,
    subjects: &HashMap<String, BTreeSet<String>>,
) -> Result<Option<f64>> {
    graph.require_focal(focal)?;
    let focal_subjects = match subjects.get(focal) {
        Some(s) if !s.is_empty() => s,
        _ => return Ok(None),
    };
    let mut known = 0u64;
    let mut outside = 0u64;
    for (c, _) in graph.citers(focal) {
        if let Some(cs) = subjects.get(c) {
            if cs.is_empty() {
                continue;
            }
            known += 1;
            if cs.is_disjoint(focal_subjects) {
                outside += 1;
            }
        }
    }
    if known == 0 {
        return Ok(None);
    }
    Ok(Some(outside as f64 / known as f64))
}

/// Citations received within `horizon_years` of publication (boundary inclusive).
pub fn forward_citations(graph: &CitationGraph, focal: &str, horizon_years: i32) -> Result<u64> {
    let focal_year = graph.require_focal(focal)?;
    Ok(graph
        .citers(focal)
        .iter()
        .filter(|(_, y)| *y <= focal_year + horizon_years)
        .count() as u64)
}

/// Total citations to all of the author's papers strictly before `year`.
pub fn past_citations(graph: &CitationGraph, author_papers: &[&str], year: i32) -> u64 {
    author_papers
        .iter()
        .map(|p| graph.citers(p).iter().filter(|(_, y)| *y < year).count() as u64)
        .sum()
}

/// Compute the full metrics table over a corpus.
pub fn metrics_for_corpus(
    corpus: &Corpus,
    graph: &CitationGraph,
    disruption_windows: &[i32],
    two_step_min: usize,
    forward_horizon: i32,
) -> Result<Vec<MetricsRow>> {
    let subjects: HashMap<String, BTreeSet<String>> = corpus
        .papers
        .iter()
        .map(|p| (p.paper_id.clone(), p.field_ids_l1.clone()))
        .collect();
    let w5 = disruption_windows.first().copied().unwrap_or(5);
    let w3 = disruption_windows.get(1).copied().unwrap_or(3);
    let mut rows = Vec::with_capacity(corpus.papers.len());
    for p in &corpus.papers {
        rows.push(MetricsRow {
            paper_id: p.paper_id.clone(),
            disruption_5y: disruption(graph, &p.paper_id, w5)?,
            disruption_3y: disruption(graph, &p.paper_id, w3)?,
            two_step_credit: two_step_credit(graph, &p.paper_id, two_step_min)?,
            outside_subject_share: outside_subject_share(graph, &p.paper_id, &subjects)?,
            cites_2y: forward_citations(graph, &p.paper_id, forward_horizon)?,
        });
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    (|| -> std::io::Result<()> {
        out.write_all(b"paper_id,disruption_5y,disruption_3y,two_step_credit,outside_share,cites_2y\n")?;
        for r in rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.paper_id,
                fmt_opt(r.disruption_5y),
                fmt_opt(r.disruption_3y),
                fmt_opt(r.two_step_credit),
                fmt_opt(r.outside_subject_share),
                r.cites_2y,
            )?;
        }
        out.flush()
    })()
    .map_err(io)
}
