//! Corpus ingestion: publications, authors, citations, and the name table,
//! plus gender resolution and the author/paper covariates derived from them.

use crate::config::IngestConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
    Unknown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PaperRecord {
    pub paper_id: String,
    pub year: i32,
    pub journal_id: Option<String>,
    pub concept_ids_l3: BTreeSet<String>,
    pub field_ids_l1: BTreeSet<String>,
    pub discipline_ids_l0: BTreeSet<String>,
    /// Multiset: one entry per reference, deduplicated only at hyperedge build.
    pub referenced_journal_ids: Vec<String>,
    pub author_ids: Vec<String>,
    pub institution_id: Option<String>,
    pub open_access: bool,
    pub jif_2y: Option<f64>,
    pub jif_5y: Option<f64>,
    pub n_grants: Option<u32>,
}

impl PaperRecord {
    pub fn is_solo(&self) -> bool {
        self.author_ids.len() == 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuthorRecord {
    pub author_id: String,
    pub first_name: Option<String>,
    pub middle_name: Option<String>,
    pub resolved_gender: Gender,
    pub first_pub_year: Option<i32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NameEvidence {
    pub name: String,
    pub inferred_gender: Gender,
    pub probability: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CitationEdge {
    pub citing_id: String,
    pub cited_id: String,
    pub citing_year: i32,
}

/// Input file locations for one corpus.
#[derive(Debug, Clone)]
pub struct IngestPaths {
    pub papers: PathBuf,
    pub authors: PathBuf,
    pub citations: PathBuf,
    pub names: PathBuf,
}

impl IngestPaths {
    pub fn in_dir(dir: &Path) -> Self {
        IngestPaths {
            papers: dir.join("papers.jsonl"),
            authors: dir.join("authors.jsonl"),
            citations: dir.join("citations.jsonl"),
            names: dir.join("names.tsv"),
        }
    }
}

/// Immutable, indexed corpus. Built once by [`ingest_corpus`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub papers: Vec<PaperRecord>,
    pub authors: BTreeMap<String, AuthorRecord>,
    pub citations: Vec<CitationEdge>,
    pub warnings: u64,
    pub config: IngestConfig,
    #[serde(skip)]
    paper_index: HashMap<String, usize>,
    #[serde(skip)]
    author_papers: HashMap<String, Vec<usize>>,
    #[serde(skip)]
    dept_counts: HashMap<(String, i32, String), u32>,
}

// serde skips the indexes; rebuild them after deserialization.
impl Corpus {
    pub fn from_parts(
        papers: Vec<PaperRecord>,
        authors: Vec<AuthorRecord>,
        citations: Vec<CitationEdge>,
        config: IngestConfig,
    ) -> Self {
        let mut c = Corpus {
            papers,
            authors: authors
                .into_iter()
                .map(|a| (a.author_id.clone(), a))
                .collect(),
            citations,
            warnings: 0,
            config,
            paper_index: HashMap::new(),
            author_papers: HashMap::new(),
            dept_counts: HashMap::new(),
        };
        c.rebuild_indexes();
        c
    }

    pub fn rebuild_indexes(&mut self) {
        self.paper_index = self
            .papers
            .iter()
            .enumerate()
            .map(|(i, p)| (p.paper_id.clone(), i))
            .collect();
        let mut by_author: HashMap<String, Vec<usize>> = HashMap::new();
        let mut dept: HashMap<(String, i32, String), u32> = HashMap::new();
        for (i, p) in self.papers.iter().enumerate() {
            for a in &p.author_ids {
                by_author.entry(a.clone()).or_default().push(i);
            }
            if let Some(inst) = &p.institution_id {
                for f in &p.field_ids_l1 {
                    *dept.entry((inst.clone(), p.year, f.clone())).or_insert(0) += 1;
                }
            }
        }
        self.author_papers = by_author;
        self.dept_counts = dept;
    }

    pub fn paper(&self, id: &str) -> Option<&PaperRecord> {
        self.paper_index.get(id).map(|&i| &self.papers[i])
    }

    pub fn papers_of_author(&self, author_id: &str) -> &[usize] {
        self.author_papers
            .get(author_id)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn year_range(&self) -> Option<(i32, i32)> {
        let min = self.papers.iter().map(|p| p.year).min()?;
        let max = self.papers.iter().map(|p| p.year).max()?;
        Some((min, max))
    }

    /// Years since the author's first publication, capped and cleaned per config.
    pub fn career_age(&self, author_id: &str, focal_year: i32) -> Option<i32> {
        let author = self.authors.get(author_id)?;
        let first = author.first_pub_year?;
        if self.papers_of_author(author_id).len() <= 1 {
            return None;
        }
        let age = focal_year - first;
        if age < 0 || age > self.config.career_age_cap {
            return None;
        }
        Some(age)
    }

    /// Publications from the focal paper's institution in the same year and field,
    /// maximized across the paper's fields.
    pub fn department_size(&self, paper: &PaperRecord) -> Option<u32> {
        let inst = paper.institution_id.as_ref()?;
        let mut best: Option<u32> = None;
        for f in &paper.field_ids_l1 {
            let mut n = *self
                .dept_counts
                .get(&(inst.clone(), paper.year, f.clone()))
                .unwrap_or(&0);
            if !self.config.dept_size_includes_focal {
                n = n.saturating_sub(1);
            }
            best = Some(best.map_or(n, |b| b.max(n)));
        }
        best
    }

    /// Share of women among team members with resolved gender, plus the count of
    /// unresolved members. None when no member resolves.
    pub fn female_share(&self, paper: &PaperRecord) -> (Option<f64>, usize) {
        let mut f = 0usize;
        let mut m = 0usize;
        let mut unknown = 0usize;
        for a in &paper.author_ids {
            match self.authors.get(a).map(|r| r.resolved_gender) {
                Some(Gender::Female) => f += 1,
                Some(Gender::Male) => m += 1,
                _ => unknown += 1,
            }
        }
        if f + m == 0 {
            (None, unknown)
        } else {
            (Some(f as f64 / (f + m) as f64), unknown)
        }
    }

    /// Cumulative share of women among resolved solo authors publishing in `field`
    /// through `year` (inclusive by default; see config).
    pub fn women_field_share(&self, field: &str, year: i32) -> Option<f64> {
        let mut f = 0usize;
        let mut m = 0usize;
        for p in &self.papers {
            let in_window = if self.config.women_share_inclusive {
                p.year <= year
            } else {
                p.year < year
            };
            if !in_window || !p.is_solo() || !p.field_ids_l1.contains(field) {
                continue;
            }
            match self
                .authors
                .get(&p.author_ids[0])
                .map(|r| r.resolved_gender)
            {
                Some(Gender::Female) => f += 1,
                Some(Gender::Male) => m += 1,
                _ => {}
            }
        }
        if f + m == 0 {
            None
        } else {
            Some(f as f64 / (f + m) as f64)
        }
    }
}

/// Lowercase and strip combining diacritics so name-table lookups are robust to
/// normalization differences between sources.
pub fn normalize_name(name: &str) -> String {
    use unicode_normalization::UnicodeNormalization;
    name.nfkd()
        .filter(|c| !('\u{0300}'..='\u{036f}').contains(c))
        .collect::<String>()
        .to_lowercase()
}

/// Single characters and initial-style names ("J", "J.") carry no usable signal.
pub fn is_initial_name(name: &str) -> bool {
    let chars: Vec<char> = name.chars().collect();
    match chars.len() {
        0 | 1 => true,
        2 => chars[1] == '.',
        _ => false,
    }
}

/// Combine first- and middle-name evidence into a resolved gender.
///
/// A name counts only when high-confidence (count or probability above the
/// configured thresholds). Two surviving names that disagree resolve to unknown.
pub fn resolve_gender(
    first: Option<&NameEvidence>,
    middle: Option<&NameEvidence>,
    config: &IngestConfig,
) -> Gender {
    let confident = |ev: &&NameEvidence| -> bool {
        (ev.count > config.name_count_threshold || ev.probability > config.name_prob_threshold)
            && ev.inferred_gender != Gender::Unknown
            && !is_initial_name(&ev.name)
    };
    let first = first.filter(confident);
    let middle = middle.filter(confident);
    match (first, middle) {
        (Some(a), Some(b)) if a.inferred_gender != b.inferred_gender => Gender::Unknown,
        (Some(a), _) => a.inferred_gender,
        (None, Some(b)) => b.inferred_gender,
        (None, None) => Gender::Unknown,
    }
}

struct LineCounter {
    total: u64,
    malformed: u64,
}

impl LineCounter {
    fn new() -> Self {
        LineCounter {
            total: 0,
            malformed: 0,
        }
    }

    fn check(&self, path: &Path, max_frac: f64) -> Result<()> {
        if self.total > 0 && self.malformed as f64 > max_frac * self.total as f64 {
            return Err(Error::validation(format!(
                "{}: {} of {} lines malformed",
                path.display(),
                self.malformed,
                self.total
            )));
        }
        Ok(())
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(BufReader::new(file).lines())
}

#[derive(Deserialize)]
struct RawAuthor {
    author_id: String,
    first_name: Option<String>,
    middle_name: Option<String>,
    first_pub_year: Option<i32>,
}

/// Stream the four input files into an indexed corpus.
///
/// Malformed lines are skipped with a warning count; a file where more than the
/// configured fraction of lines is malformed is rejected outright.
pub fn ingest_corpus(paths: &IngestPaths, config: &IngestConfig) -> Result<Corpus> {
    let mut warnings = 0u64;

    // Name table first: author gender resolution depends on it.
    let mut names: HashMap<String, NameEvidence> = HashMap::new();
    {
        let mut counter = LineCounter::new();
        for line in open_lines(&paths.names)? {
            let line = line.map_err(|e| Error::io(paths.names.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            counter.total += 1;
            match parse_name_line(&line) {
                Some(ev) => {
                    names.insert(normalize_name(&ev.name), ev);
                }
                None => {
                    counter.malformed += 1;
                    warnings += 1;
                }
            }
        }
        counter.check(&paths.names, config.max_malformed_frac)?;
    }

    let mut papers: Vec<PaperRecord> = Vec::new();
    let mut seen_papers: HashSet<String> = HashSet::new();
    {
        let mut counter = LineCounter::new();
        for line in open_lines(&paths.papers)? {
            let line = line.map_err(|e| Error::io(paths.papers.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            counter.total += 1;
            let rec: PaperRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(_) => {
                    counter.malformed += 1;
                    warnings += 1;
                    continue;
                }
            };
            if let Err(msg) = validate_paper(&rec, config) {
                counter.malformed += 1;
                warnings += 1;
                let _ = msg;
                continue;
            }
            if !seen_papers.insert(rec.paper_id.clone()) {
                warnings += 1; // duplicate id: keep the first occurrence
                continue;
            }
            papers.push(rec);
        }
        counter.check(&paths.papers, config.max_malformed_frac)?;
    }
    if papers.is_empty() {
        return Err(Error::validation("empty corpus".to_string()));
    }

    let mut authors: BTreeMap<String, AuthorRecord> = BTreeMap::new();
    {
        let mut counter = LineCounter::new();
        for line in open_lines(&paths.authors)? {
            let line = line.map_err(|e| Error::io(paths.authors.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            counter.total += 1;
            let raw: RawAuthor = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(_) => {
                    counter.malformed += 1;
                    warnings += 1;
                    continue;
                }
            };
            let lookup = |n: &Option<String>| -> Option<NameEvidence> {
                let n = n.as_ref()?;
                if is_initial_name(n) {
                    return None;
                }
                names.get(&normalize_name(n)).cloned()
            };
            let first_ev = lookup(&raw.first_name);
            let middle_ev = lookup(&raw.middle_name);
            let gender = resolve_gender(first_ev.as_ref(), middle_ev.as_ref(), config);
            if authors.contains_key(&raw.author_id) {
                warnings += 1;
                continue;
            }
            authors.insert(
                raw.author_id.clone(),
                AuthorRecord {
                    author_id: raw.author_id,
                    first_name: raw.first_name,
                    middle_name: raw.middle_name,
                    resolved_gender: gender,
                    first_pub_year: raw.first_pub_year,
                },
            );
        }
        counter.check(&paths.authors, config.max_malformed_frac)?;
    }

    let mut citations: Vec<CitationEdge> = Vec::new();
    let mut seen_edges: HashSet<(String, String)> = HashSet::new();
    {
        let mut counter = LineCounter::new();
        for line in open_lines(&paths.citations)? {
            let line = line.map_err(|e| Error::io(paths.citations.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            counter.total += 1;
            let edge: CitationEdge = match serde_json::from_str(&line) {
                Ok(e) => e,
                Err(_) => {
                    counter.malformed += 1;
                    warnings += 1;
                    continue;
                }
            };
            if edge.citing_id == edge.cited_id {
                warnings += 1; // self-citation dropped
                continue;
            }
            if !seen_edges.insert((edge.citing_id.clone(), edge.cited_id.clone())) {
                warnings += 1; // duplicate edge collapsed
                continue;
            }
            citations.push(edge);
        }
        counter.check(&paths.citations, config.max_malformed_frac)?;
    }

    let mut corpus = Corpus {
        papers,
        authors,
        citations,
        warnings,
        config: config.clone(),
        paper_index: HashMap::new(),
        author_papers: HashMap::new(),
        dept_counts: HashMap::new(),
    };
    corpus.rebuild_indexes();
    Ok(corpus)
}

fn parse_name_line(line: &str) -> Option<NameEvidence> {
    let mut parts = line.split('\t');
    let name = parts.next()?.to_string();
    let gender = match parts.next()? {
        "female" => Gender::Female,
        "male" => Gender::Male,
        _ => return None,
    };
    let probability: f64 = parts.next()?.parse().ok()?;
    let count: u64 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || !(0.0..=1.0).contains(&probability) {
        return None;
    }
    Some(NameEvidence {
        name,
        inferred_gender: gender,
        probability,
        count,
    })
}

fn validate_paper(rec: &PaperRecord, config: &IngestConfig) -> std::result::Result<(), String> {
    if rec.paper_id.is_empty() || rec.paper_id.len() > 256 {
        return Err("bad paper_id".into());
    }
    if let Some(min) = config.min_year {
        if rec.year < min {
            return Err("year below range".into());
        }
    }
    if let Some(max) = config.max_year {
        if rec.year > max {
            return Err("year above range".into());
        }
    }
    for jif in [rec.jif_2y, rec.jif_5y].into_iter().flatten() {
        if !jif.is_finite() || jif < 0.0 {
            return Err("negative jif".into());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(gender: Gender, probability: f64, count: u64) -> NameEvidence {
        NameEvidence {
            name: "test".into(),
            inferred_gender: gender,
            probability,
            count,
        }
    }

    fn cfg() -> IngestConfig {
        IngestConfig::default()
    }

    #[test]
    fn high_probability_first_name_resolves() {
        let g = resolve_gender(Some(&ev(Gender::Female, 0.95, 40)), None, &cfg());
        assert_eq!(g, Gender::Female);
    }

    #[test]
    fn disagreeing_confident_names_are_unknown() {
        let first = ev(Gender::Male, 0.6, 150);
        let middle = ev(Gender::Female, 0.99, 500);
        assert_eq!(resolve_gender(Some(&first), Some(&middle), &cfg()), Gender::Unknown);
    }

    #[test]
    fn initial_style_name_is_missing() {
        let mut first = ev(Gender::Male, 0.99, 1000);
        first.name = "J.".into();
        assert_eq!(resolve_gender(Some(&first), None, &cfg()), Gender::Unknown);
    }

    #[test]
    fn low_confidence_name_is_missing() {
        let first = ev(Gender::Male, 0.70, 50);
        assert_eq!(resolve_gender(Some(&first), None, &cfg()), Gender::Unknown);
    }

    #[test]
    fn thresholds_are_strict() {
        // exactly at the thresholds does not qualify
        let first = ev(Gender::Male, 0.90, 100);
        assert_eq!(resolve_gender(Some(&first), None, &cfg()), Gender::Unknown);
        let first = ev(Gender::Male, 0.90, 101);
        assert_eq!(resolve_gender(Some(&first), None, &cfg()), Gender::Male);
    }

    #[test]
    fn resolution_is_symmetric_in_argument_order() {
        let a = ev(Gender::Female, 0.95, 500);
        let b = ev(Gender::Female, 0.97, 200);
        assert_eq!(
            resolve_gender(Some(&a), Some(&b), &cfg()),
            resolve_gender(Some(&b), Some(&a), &cfg())
        );
        let c = ev(Gender::Male, 0.99, 900);
        assert_eq!(
            resolve_gender(Some(&a), Some(&c), &cfg()),
            resolve_gender(Some(&c), Some(&a), &cfg())
        );
    }

    #[test]
    fn name_normalization_folds_case_and_diacritics() {
        assert_eq!(normalize_name("José"), "jose");
        assert_eq!(normalize_name("ANNE"), "anne");
        assert_eq!(normalize_name("Zoë"), "zoe");
    }

    fn paper(id: &str, year: i32, inst: &str, fields: &[&str], authors: &[&str]) -> PaperRecord {
        PaperRecord {
            paper_id: id.into(),
            year,
            journal_id: Some("j1".into()),
            concept_ids_l3: BTreeSet::new(),
            field_ids_l1: fields.iter().map(|s| s.to_string()).collect(),
            discipline_ids_l0: BTreeSet::new(),
            referenced_journal_ids: vec![],
            author_ids: authors.iter().map(|s| s.to_string()).collect(),
            institution_id: if inst.is_empty() { None } else { Some(inst.into()) },
            open_access: false,
            jif_2y: None,
            jif_5y: None,
            n_grants: None,
        }
    }

    fn corpus_of(papers: Vec<PaperRecord>, authors: Vec<AuthorRecord>) -> Corpus {
        Corpus::from_parts(papers, authors, vec![], cfg())
    }

    fn author(id: &str, gender: Gender, first_pub: Option<i32>) -> AuthorRecord {
        AuthorRecord {
            author_id: id.into(),
            first_name: None,
            middle_name: None,
            resolved_gender: gender,
            first_pub_year: first_pub,
        }
    }

    #[test]
    fn career_age_basic_and_capped() {
        let c = corpus_of(
            vec![paper("p1", 2010, "i", &["f"], &["a"]), paper("p2", 2015, "i", &["f"], &["a"])],
            vec![author("a", Gender::Male, Some(2000))],
        );
        assert_eq!(c.career_age("a", 2010), Some(10));
        let c2 = corpus_of(
            vec![paper("p1", 2015, "i", &["f"], &["b"]), paper("p2", 2016, "i", &["f"], &["b"])],
            vec![author("b", Gender::Male, Some(1950))],
        );
        assert_eq!(c2.career_age("b", 2015), None); // 65 > 60
    }

    #[test]
    fn career_age_missing_for_single_paper_author() {
        let c = corpus_of(
            vec![paper("p1", 2010, "i", &["f"], &["a"])],
            vec![author("a", Gender::Male, Some(2000))],
        );
        assert_eq!(c.career_age("a", 2010), None);
    }

    #[test]
    fn department_size_counts_and_maximizes() {
        let mut papers = vec![
            paper("p1", 2005, "mit", &["f", "g"], &["a"]),
            paper("p2", 2005, "mit", &["f"], &["b"]),
        ];
        // field g: 7 papers total including focal
        for i in 0..6 {
            papers.push(paper(&format!("g{i}"), 2005, "mit", &["g"], &["x"]));
        }
        let c = corpus_of(papers, vec![]);
        let focal = c.paper("p1").unwrap();
        // f has 2, g has 7; maximum wins
        assert_eq!(c.department_size(focal), Some(7));
    }

    #[test]
    fn department_size_isolated_paper_counts_itself() {
        let c = corpus_of(vec![paper("p1", 2005, "mit", &["f"], &["a"])], vec![]);
        assert_eq!(c.department_size(c.paper("p1").unwrap()), Some(1));
        let c2 = corpus_of(vec![paper("p1", 2005, "", &["f"], &["a"])], vec![]);
        assert_eq!(c2.department_size(c2.paper("p1").unwrap()), None);
    }

    #[test]
    fn female_share_examples() {
        let c = corpus_of(
            vec![paper("p1", 2005, "i", &["f"], &["a", "b", "c"])],
            vec![
                author("a", Gender::Female, None),
                author("b", Gender::Male, None),
                author("c", Gender::Unknown, None),
            ],
        );
        let (share, unknown) = c.female_share(c.paper("p1").unwrap());
        assert_eq!(share, Some(0.5));
        assert_eq!(unknown, 1);
    }

    #[test]
    fn female_share_all_unknown_is_missing() {
        let c = corpus_of(
            vec![paper("p1", 2005, "i", &["f"], &["a", "b"])],
            vec![author("a", Gender::Unknown, None), author("b", Gender::Unknown, None)],
        );
        assert_eq!(c.female_share(c.paper("p1").unwrap()).0, None);
    }

    #[test]
    fn women_field_share_cumulative() {
        let c = corpus_of(
            vec![
                paper("p1", 2000, "i", &["f"], &["w1"]),
                paper("p2", 2001, "i", &["f"], &["w2"]),
                paper("p3", 2002, "i", &["f"], &["m1"]),
                paper("p4", 2003, "i", &["f"], &["w3"]),
            ],
            vec![
                author("w1", Gender::Female, None),
                author("w2", Gender::Female, None),
                author("m1", Gender::Male, None),
                author("w3", Gender::Female, None),
            ],
        );
        assert_eq!(c.women_field_share("f", 2002), Some(2.0 / 3.0));
        assert_eq!(c.women_field_share("f", 2003), Some(0.75));
        assert_eq!(c.women_field_share("g", 2003), None);
    }
}
