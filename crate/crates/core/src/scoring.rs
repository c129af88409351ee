//! Raw surprise and prescience per paper and channel, within-field percentile
//! ranks, and the per-paper maximum rank used by the analyses.

use crate::config::BuildConfig;
use crate::corpus::{Corpus, PaperRecord};
use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::hypergraph::{paper_nodes, Channel};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub paper_id: String,
    pub channel: Channel,
    pub raw_surprise_t0: Option<f64>,
    pub raw_surprise_t2: Option<f64>,
    pub raw_prescience: Option<f64>,
    pub pct_surprise: Option<f64>,
    pub pct_prescience: Option<f64>,
}

/// Negative log-coherence of the paper's channel node combination.
/// None when fewer than two distinct nodes survive vocabulary mapping.
pub fn surprise(
    model: &EmbeddingModel,
    paper: &PaperRecord,
    build: &BuildConfig,
) -> Option<f64> {
    let nodes = paper_nodes(paper, model.channel, &model.vocab, build)?;
    // in-vocabulary by construction (unknown ids map to RARE)
    Some(-model.log_coherence(&nodes).expect("nodes in vocabulary"))
}

/// Decrease in surprise between the publication-year and follow-up models.
pub fn prescience(
    model_t0: &EmbeddingModel,
    model_t2: &EmbeddingModel,
    paper: &PaperRecord,
    horizon: i32,
    build: &BuildConfig,
) -> Result<Option<f64>> {
    if model_t2.year != model_t0.year + horizon {
        return Err(Error::validation(format!(
            "horizon mismatch: models are {} and {}, expected a gap of {horizon}",
            model_t0.year, model_t2.year
        )));
    }
    let s0 = surprise(model_t0, paper, build);
    let s2 = surprise(model_t2, paper, build);
    Ok(match (s0, s2) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    })
}

/// Percentile ranks with average ranks on ties, scaled so the minimum maps to 0
/// and the maximum to 1. None when fewer than two values.
pub fn percentile_rank(values: &[f64]) -> Option<Vec<f64>> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0; // 1-based
        for &idx in &order[i..j] {
            ranks[idx] = (avg_rank - 1.0) / (n - 1) as f64;
        }
        i = j;
    }
    Some(ranks)
}

/// Rank of `value` within a sorted distribution it belongs to, on the same
/// average-rank scale as [`percentile_rank`].
pub fn rank_in_sorted(sorted: &[f64], value: f64) -> Option<f64> {
    let n = sorted.len();
    if n < 2 {
        return None;
    }
    let less = sorted.partition_point(|&v| v < value);
    let leq = sorted.partition_point(|&v| v <= value);
    let eq = leq.saturating_sub(less).max(1);
    let avg_rank = less as f64 + (eq as f64 + 1.0) / 2.0;
    Some((avg_rank - 1.0) / (n - 1) as f64)
}

/// Maximum within-field rank of a raw score across the paper's fields.
/// Fields with fewer than two observations are skipped.
pub fn field_max_rank(
    fields: &BTreeSet<String>,
    raw: f64,
    field_distributions: &HashMap<String, Vec<f64>>,
) -> Option<f64> {
    let mut best: Option<f64> = None;
    for f in fields {
        if let Some(dist) = field_distributions.get(f) {
            if let Some(rank) = rank_in_sorted(dist, raw) {
                best = Some(best.map_or(rank, |b: f64| b.max(rank)));
            }
        }
    }
    best
}

/// Score every paper on every channel covered by `models`.
///
/// The publication-year model is required (missing years are an error);
/// the horizon model is optional and its absence yields missing prescience.
pub fn score_corpus(
    corpus: &Corpus,
    models: &BTreeMap<(i32, Channel), EmbeddingModel>,
    horizon: i32,
    build: &BuildConfig,
    threads: usize,
) -> Result<Vec<ScoreRow>> {
    let channels: BTreeSet<Channel> = models.keys().map(|&(_, c)| c).collect();
    if channels.is_empty() {
        return Err(Error::validation("no models supplied".to_string()));
    }

    // publication years must all be covered per channel
    let mut missing: BTreeSet<(i32, Channel)> = BTreeSet::new();
    for p in &corpus.papers {
        for &ch in &channels {
            if !models.contains_key(&(p.year, ch)) {
                missing.insert((p.year, ch));
            }
        }
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing
            .iter()
            .map(|(y, c)| format!("{y}/{}", c.as_str()))
            .collect();
        return Err(Error::validation(format!(
            "missing models for required years: {}",
            list.join(", ")
        )));
    }

    let score_one = |paper: &PaperRecord, ch: Channel| -> Result<ScoreRow> {
        let m0 = &models[&(paper.year, ch)];
        let s0 = surprise(m0, paper, build);
        let (s2, presc) = match models.get(&(paper.year + horizon, ch)) {
            Some(m2) => {
                let s2 = surprise(m2, paper, build);
                let p = match (s0, s2) {
                    (Some(a), Some(b)) => Some(a - b),
                    _ => None,
                };
                (s2, p)
            }
            None => (None, None),
        };
        Ok(ScoreRow {
            paper_id: paper.paper_id.clone(),
            channel: ch,
            raw_surprise_t0: s0,
            raw_surprise_t2: s2,
            raw_prescience: presc,
            pct_surprise: None,
            pct_prescience: None,
        })
    };

    let channels_vec: Vec<Channel> = channels.iter().copied().collect();
    let mut rows: Vec<ScoreRow> = if threads > 1 && corpus.papers.len() > 256 {
        let chunk = corpus.papers.len().div_ceil(threads);
        let results: Vec<Result<Vec<ScoreRow>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = corpus
                .papers
                .chunks(chunk)
                .map(|papers| {
                    let channels_vec = &channels_vec;
                    let score_one = &score_one;
                    scope.spawn(move || {
                        let mut out = Vec::with_capacity(papers.len() * channels_vec.len());
                        for p in papers {
                            for &ch in channels_vec {
                                out.push(score_one(p, ch)?);
                            }
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut rows = Vec::new();
        for r in results {
            rows.extend(r?);
        }
        rows
    } else {
        let mut rows = Vec::with_capacity(corpus.papers.len() * channels_vec.len());
        for p in &corpus.papers {
            for &ch in &channels_vec {
                rows.push(score_one(p, ch)?);
            }
        }
        rows
    };

    // Field distributions over the full ingested corpus, per channel.
    let mut surprise_dists: HashMap<(Channel, String), Vec<f64>> = HashMap::new();
    let mut prescience_dists: HashMap<(Channel, String), Vec<f64>> = HashMap::new();
    for (row, paper) in rows.iter().zip(paper_iter(corpus, channels_vec.len())) {
        for f in &paper.field_ids_l1 {
            if let Some(s) = row.raw_surprise_t0 {
                surprise_dists
                    .entry((row.channel, f.clone()))
                    .or_default()
                    .push(s);
            }
            if let Some(p) = row.raw_prescience {
                prescience_dists
                    .entry((row.channel, f.clone()))
                    .or_default()
                    .push(p);
            }
        }
    }
    for dist in surprise_dists.values_mut().chain(prescience_dists.values_mut()) {
        dist.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }

    for (row, paper) in rows.iter_mut().zip(paper_iter(corpus, channels_vec.len())) {
        let by_field = |dists: &HashMap<(Channel, String), Vec<f64>>, raw: f64| -> Option<f64> {
            let mut best: Option<f64> = None;
            for f in &paper.field_ids_l1 {
                if let Some(d) = dists.get(&(row.channel, f.clone())) {
                    if let Some(rank) = rank_in_sorted(d, raw) {
                        best = Some(best.map_or(rank, |b: f64| b.max(rank)));
                    }
                }
            }
            best
        };
        row.pct_surprise = row.raw_surprise_t0.and_then(|s| by_field(&surprise_dists, s));
        row.pct_prescience = row.raw_prescience.and_then(|p| by_field(&prescience_dists, p));
    }

    Ok(rows)
}

// rows are emitted paper-major, channel-minor; this mirrors that order
fn paper_iter(corpus: &Corpus, n_channels: usize) -> impl Iterator<Item = &PaperRecord> {
    corpus
        .papers
        .iter()
        .flat_map(move |p| std::iter::repeat(p).take(n_channels))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

/// `scores.csv`: missing values as empty fields, LF line endings.
pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    (|| -> std::io::Result<()> {
        out.write_all(b"paper_id,channel,raw_surprise,raw_prescience,pct_surprise,pct_prescience\n")?;
        for r in rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.paper_id,
                r.channel.as_str(),
                fmt_opt(r.raw_surprise_t0),
                fmt_opt(r.raw_prescience),
                fmt_opt(r.pct_surprise),
                fmt_opt(r.pct_prescience),
            )?;
        }
        out.flush()
    })()
    .map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn percentile_rank_simple() {
        assert_eq!(percentile_rank(&[5.0, 10.0, 15.0]).unwrap(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn percentile_rank_tie_rule() {
        let r = percentile_rank(&[5.0, 5.0, 10.0]).unwrap();
        assert_eq!(r, vec![0.25, 0.25, 1.0]);
    }

    #[test]
    fn percentile_rank_all_equal() {
        let r = percentile_rank(&[3.0, 3.0, 3.0, 3.0]).unwrap();
        assert!(r.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn percentile_rank_needs_two_values() {
        assert!(percentile_rank(&[1.0]).is_none());
    }

    #[test]
    fn rank_in_sorted_matches_percentile_rank() {
        let values = vec![2.0, 7.0, 7.0, 9.0, 1.0, 4.0];
        let ranks = percentile_rank(&values).unwrap();
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (v, r) in values.iter().zip(ranks.iter()) {
            assert_abs_diff_eq!(rank_in_sorted(&sorted, *v).unwrap(), *r, epsilon = 1e-12);
        }
    }

    #[test]
    fn field_max_rank_takes_the_maximum() {
        let mut dists = HashMap::new();
        dists.insert("A".to_string(), vec![0.0, 1.0, 2.0, 3.0, 10.0]);
        dists.insert("B".to_string(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        dists.insert("tiny".to_string(), vec![2.0]);
        let fields: BTreeSet<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        let got = field_max_rank(&fields, 2.0, &dists).unwrap();
        // rank in A is 0.5, in B is 1.0
        assert_abs_diff_eq!(got, 1.0, epsilon = 1e-12);
        // undersized distributions are skipped
        let only_tiny: BTreeSet<String> = ["tiny".to_string()].into_iter().collect();
        assert!(field_max_rank(&only_tiny, 2.0, &dists).is_none());
    }

    #[test]
    fn ranks_invariant_under_increasing_transform() {
        let values = vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let transformed: Vec<f64> = values.iter().map(|v| 2.0 * v + 1.0).collect();
        assert_eq!(
            percentile_rank(&values).unwrap(),
            percentile_rank(&transformed).unwrap()
        );
    }
}
