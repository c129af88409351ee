//! Synthetic corpora with known ground truth: latent-dimension journal and
//! concept clusters, Poisson combination counts, a calibrated gender gap in
//! combination surprise, and citation accrual tied to planted reward slopes.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_papers: usize,
    pub n_authors: usize,
    pub n_concepts: usize,
    pub n_journals: usize,
    pub year_min: i32,
    pub year_max: i32,
    /// Number of latent dimensions in the generating model.
    pub dim_true: usize,
    /// Weight a node puts on its home dimension (rest spread uniformly).
    pub primary_weight: f64,
    /// Half-width of the per-node uniform jitter around `primary_weight`;
    /// clamped so weights stay in (0.5, 1). Zero gives every node the same
    /// home weight, which makes the surprise bands discrete and widely
    /// separated — the easiest regime for downstream recovery.
    pub home_weight_jitter: f64,
    /// Probability that a candidate combination spans several dimensions.
    pub cross_mix: f64,
    /// Inclusive size range of candidate combinations.
    pub combo_size_min: usize,
    pub combo_size_max: usize,
    /// Marginal probability that an author is a woman.
    pub female_share: f64,
    /// Planted gender gap in the within-corpus percentile rank of reference
    /// (context) combination surprise.
    pub beta_female_ctx_surprise: f64,
    /// Same, for concept (content) combination surprise.
    pub beta_female_con_surprise: f64,
    /// Citation mean: base + lambda * rank + tau * female * rank.
    pub reward_base: f64,
    pub reward_lambda: f64,
    pub reward_tau: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_papers: 2000,
            n_authors: 2000,
            n_concepts: 150,
            n_journals: 120,
            year_min: 2000,
            year_max: 2003,
            dim_true: 4,
            primary_weight: 0.6,
            home_weight_jitter: 0.0,
            cross_mix: 0.5,
            combo_size_min: 2,
            combo_size_max: 3,
            female_share: 0.4,
            beta_female_ctx_surprise: 0.03,
            beta_female_con_surprise: 0.0,
            reward_base: 1.5,
            // kept small so measurement error in fitted ranks does not leak
            // into the reward interaction beyond its clustered SE
            reward_lambda: 0.3,
            reward_tau: 0.04,
            seed: 99,
        }
    }
}

/// Summary written to truth.json alongside the generated files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSummary {
    pub config: SynthConfig,
    /// Poisson intensity multiplier calibrated so E[papers] = n_papers.
    pub scale: f64,
    pub n_papers_realized: usize,
    pub n_citations: usize,
    /// Realized variance of the true context/content surprise ranks; the
    /// gender-assignment slope is calibrated against these.
    pub rank_var_ctx: f64,
    pub rank_var_con: f64,
}

/// Generator output kept in memory for validation; files carry the same data.
#[derive(Debug)]
pub struct SynthOutput {
    pub summary: TruthSummary,
    /// True surprise percentile ranks per paper, context and content channels.
    pub rank_ctx: Vec<f64>,
    pub rank_con: Vec<f64>,
    pub female: Vec<bool>,
    pub paper_ids: Vec<String>,
    /// Planted Poisson mean per distinct context combination, with its count.
    pub combo_means: Vec<(f64, u64)>,
    /// True home-dimension weight per journal node (index = journal number).
    pub journal_home_weight: Vec<f64>,
    /// True salience per journal node.
    pub journal_salience: Vec<f64>,
}

struct LatentModel {
    theta: Array2<f64>,
    salience: Vec<f64>,
}

impl LatentModel {
    fn draw(
        n_nodes: usize,
        dim: usize,
        primary_weight: f64,
        jitter: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut theta = Array2::zeros((n_nodes, dim));
        for i in 0..n_nodes {
            let spread = jitter.min(1.0 - primary_weight).min(primary_weight - 0.5).max(0.0);
            let w = if spread > 0.0 {
                primary_weight + rng.gen_range(-spread..=spread)
            } else {
                primary_weight
            };
            let off = (1.0 - w) / (dim as f64 - 1.0).max(1.0);
            let home = i % dim;
            for d in 0..dim {
                theta[[i, d]] = if d == home { w } else { off };
            }
        }
        let salience = (0..n_nodes).map(|_| rng.gen_range(0.5..1.5)).collect();
        LatentModel { theta, salience }
    }

    fn home_members(&self, dim: usize) -> Vec<usize> {
        let d_total = self.theta.ncols();
        (0..self.theta.nrows()).filter(|i| i % d_total == dim).collect()
    }

    fn coherence(&self, nodes: &[usize]) -> f64 {
        let d_total = self.theta.ncols();
        (0..d_total)
            .map(|d| nodes.iter().map(|&i| self.theta[[i, d]]).product::<f64>())
            .sum()
    }

    fn propensity(&self, nodes: &[usize]) -> f64 {
        self.coherence(nodes) * nodes.iter().map(|&i| self.salience[i]).product::<f64>()
    }

    /// One candidate combination: coherent (all nodes from one home cluster)
    /// or cross-dimensional (each node from a different cluster).
    fn draw_combo(&self, cross: bool, sizes: (usize, usize), rng: &mut ChaCha8Rng) -> Vec<usize> {
        let d_total = self.theta.ncols();
        let size = rng.gen_range(sizes.0..=sizes.1);
        let mut nodes: BTreeSet<usize> = BTreeSet::new();
        if cross {
            let mut dims: Vec<usize> = (0..d_total).collect();
            dims.shuffle(rng);
            for &d in dims.iter().take(size) {
                let members = self.home_members(d);
                nodes.insert(members[rng.gen_range(0..members.len())]);
            }
        } else {
            let d = rng.gen_range(0..d_total);
            let members = self.home_members(d);
            while nodes.len() < size.min(members.len()) {
                nodes.insert(members[rng.gen_range(0..members.len())]);
            }
        }
        nodes.into_iter().collect()
    }
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let positive = [
        ("n_papers", cfg.n_papers),
        ("n_authors", cfg.n_authors),
        ("n_concepts", cfg.n_concepts),
        ("n_journals", cfg.n_journals),
        ("dim_true", cfg.dim_true),
    ];
    for (name, v) in positive {
        if v == 0 {
            return Err(Error::validation(format!("synth: {name} must be positive")));
        }
    }
    if cfg.dim_true < 2 || cfg.dim_true > cfg.n_journals.min(cfg.n_concepts) {
        return Err(Error::validation(
            "synth: dim_true must be in [2, min(n_journals, n_concepts)]".to_string(),
        ));
    }
    if cfg.year_max < cfg.year_min {
        return Err(Error::validation("synth: empty year range".to_string()));
    }
    if !(0.0..1.0).contains(&cfg.female_share) || cfg.female_share <= 0.0 {
        return Err(Error::validation("synth: female_share must be in (0, 1)".to_string()));
    }
    for (name, v) in [
        ("beta_female_ctx_surprise", cfg.beta_female_ctx_surprise),
        ("beta_female_con_surprise", cfg.beta_female_con_surprise),
        ("reward_base", cfg.reward_base),
        ("reward_lambda", cfg.reward_lambda),
        ("reward_tau", cfg.reward_tau),
    ] {
        if !v.is_finite() {
            return Err(Error::validation(format!("synth: {name} must be finite")));
        }
    }
    // mean = base + lambda*u + tau*F*u over u in [0,1], F in {0,1}
    let worst = cfg.reward_base
        + 0f64.min(cfg.reward_lambda).min(cfg.reward_lambda + cfg.reward_tau);
    if cfg.reward_base < 0.0 || worst < 0.0 {
        return Err(Error::validation(
            "synth: citation mean can go negative under the planted reward slopes".to_string(),
        ));
    }
    if !(0.5..1.0).contains(&cfg.primary_weight) || !(0.0..=1.0).contains(&cfg.cross_mix) {
        return Err(Error::validation(
            "synth: primary_weight must be in [0.5, 1) and cross_mix in [0, 1]".to_string(),
        ));
    }
    if cfg.combo_size_min < 2
        || cfg.combo_size_max < cfg.combo_size_min
        || cfg.combo_size_max > cfg.dim_true
    {
        return Err(Error::validation(
            "synth: combination sizes must satisfy 2 <= min <= max <= dim_true".to_string(),
        ));
    }
    Ok(())
}

fn poisson_draw(mean: f64, rng: &mut ChaCha8Rng) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

struct WriterSet {
    papers: std::io::BufWriter<std::fs::File>,
    authors: std::io::BufWriter<std::fs::File>,
    citations: std::io::BufWriter<std::fs::File>,
}

/// Generate one corpus into `out_dir`: papers.jsonl, authors.jsonl,
/// citations.jsonl, names.tsv, truth.json. Byte-deterministic under the seed.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthOutput> {
    validate(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let journals = LatentModel::draw(cfg.n_journals, cfg.dim_true, cfg.primary_weight, cfg.home_weight_jitter, &mut rng);
    let concepts = LatentModel::draw(cfg.n_concepts, cfg.dim_true, cfg.primary_weight, cfg.home_weight_jitter, &mut rng);

    // Candidate pool of distinct context combinations; the corpus realizes
    // Poisson(scale * propensity) instances of each.
    let target_pool = cfg.n_papers.max(64);
    let mut ctx_pool: Vec<Vec<usize>> = Vec::new();
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    for _ in 0..target_pool * 50 {
        if ctx_pool.len() >= target_pool {
            break;
        }
        let cross = rng.gen_bool(cfg.cross_mix);
        let combo = journals.draw_combo(cross, (cfg.combo_size_min, cfg.combo_size_max), &mut rng);
        if combo.len() >= 2 && seen.insert(combo.clone()) {
            ctx_pool.push(combo);
        }
    }
    if ctx_pool.is_empty() {
        return Err(Error::validation("synth: no candidate combinations; widen the node pools".to_string()));
    }

    let total_propensity: f64 = ctx_pool.iter().map(|c| journals.propensity(c)).sum();
    if total_propensity <= 0.0 {
        return Err(Error::validation("synth: degenerate propensities".to_string()));
    }
    let scale = cfg.n_papers as f64 / total_propensity;

    // Instantiate papers; record planted means for goodness-of-fit checks.
    let mut combo_means: Vec<(f64, u64)> = Vec::with_capacity(ctx_pool.len());
    let mut paper_ctx: Vec<usize> = Vec::new(); // index into ctx_pool
    for (ci, combo) in ctx_pool.iter().enumerate() {
        let mean = scale * journals.propensity(combo);
        let count = poisson_draw(mean, &mut rng);
        combo_means.push((mean, count));
        for _ in 0..count {
            paper_ctx.push(ci);
        }
    }
    let n = paper_ctx.len();
    if n < 2 {
        return Err(Error::validation(
            "synth: realized corpus is empty; increase n_papers or loosen the model".to_string(),
        ));
    }

    // Per-paper concept combination: sampled from a content pool with
    // probability proportional to propensity (multinomial analog of the
    // context channel's Poisson law).
    let mut con_pool: Vec<Vec<usize>> = Vec::new();
    let mut seen_con: BTreeSet<Vec<usize>> = BTreeSet::new();
    for _ in 0..target_pool * 50 {
        if con_pool.len() >= target_pool {
            break;
        }
        let cross = rng.gen_bool(cfg.cross_mix);
        let combo = concepts.draw_combo(cross, (cfg.combo_size_min, cfg.combo_size_max), &mut rng);
        if combo.len() >= 2 && seen_con.insert(combo.clone()) {
            con_pool.push(combo);
        }
    }
    let con_weights: Vec<f64> = con_pool.iter().map(|c| concepts.propensity(c)).collect();
    let con_dist = rand::distributions::WeightedIndex::new(&con_weights)
        .map_err(|_| Error::validation("synth: degenerate content propensities".to_string()))?;
    let paper_con: Vec<usize> = (0..n).map(|_| con_dist.sample(&mut rng)).collect();

    let years: Vec<i32> = (0..n)
        .map(|_| rng.gen_range(cfg.year_min..=cfg.year_max))
        .collect();

    // True surprise and within-corpus percentile ranks. Quantize the surprise
    // so combinations with algebraically equal coherence tie exactly: the sum
    // over dimensions visits the home dimension at a cluster-dependent
    // position, and the rounding difference would otherwise split one planted
    // tie group into several spuriously distinct rank levels.
    let quantize = |s: f64| (s * 1e9).round() / 1e9;
    let s_ctx: Vec<f64> =
        paper_ctx.iter().map(|&ci| quantize(-journals.coherence(&ctx_pool[ci]).ln())).collect();
    let s_con: Vec<f64> =
        paper_con.iter().map(|&ci| quantize(-concepts.coherence(&con_pool[ci]).ln())).collect();
    let rank_ctx = crate::scoring::percentile_rank(&s_ctx)
        .ok_or_else(|| Error::validation("synth: too few papers to rank".to_string()))?;
    let rank_con = crate::scoring::percentile_rank(&s_con)
        .ok_or_else(|| Error::validation("synth: too few papers to rank".to_string()))?;
    let v_ctx = variance(&rank_ctx);
    let v_con = variance(&rank_con);

    // Authors: papers round-robin; gender probability tilted by the author's
    // mean true rank, with slope a_k = beta * k * (1 - pi) / (2 * var(rank))
    // so the paper-level rank gap between women and men equals beta exactly
    // in expectation.
    let n_authors = cfg.n_authors.min(n);
    let mut author_papers: Vec<Vec<usize>> = vec![Vec::new(); n_authors];
    for p in 0..n {
        author_papers[p % n_authors].push(p);
    }
    let pi = cfg.female_share;
    let slope = |beta: f64, k: usize, v: f64| -> f64 {
        if beta == 0.0 || v <= 0.0 {
            0.0
        } else {
            beta * k as f64 * (1.0 - pi) / (2.0 * v)
        }
    };
    let mut female_author: Vec<bool> = vec![false; n_authors];
    for (a, papers) in author_papers.iter().enumerate() {
        let k = papers.len();
        let mean_of = |r: &Vec<f64>| papers.iter().map(|&p| r[p]).sum::<f64>() / k as f64;
        let tilt = slope(cfg.beta_female_ctx_surprise, k, v_ctx) * (2.0 * mean_of(&rank_ctx) - 1.0)
            + slope(cfg.beta_female_con_surprise, k, v_con) * (2.0 * mean_of(&rank_con) - 1.0);
        let p_female = pi * (1.0 + tilt);
        if !(0.0..=1.0).contains(&p_female) {
            return Err(Error::validation(format!(
                "synth: infeasible planted effects; gender probability {p_female:.4} outside [0, 1] (reduce betas or n_papers/n_authors ratio)"
            )));
        }
        female_author[a] = rng.gen_bool(p_female);
    }
    let paper_author: Vec<usize> = {
        let mut map = vec![0usize; n];
        for (a, papers) in author_papers.iter().enumerate() {
            for &p in papers {
                map[p] = a;
            }
        }
        map
    };
    let female: Vec<bool> = (0..n).map(|p| female_author[paper_author[p]]).collect();

    // Citation accrual within two years of publication.
    let mut n_citations = 0usize;
    let mut citation_lines: Vec<String> = Vec::new();
    for p in 0..n {
        let f = if female[p] { 1.0 } else { 0.0 };
        let mean = cfg.reward_base
            + cfg.reward_lambda * rank_ctx[p]
            + cfg.reward_tau * f * rank_ctx[p];
        let c = poisson_draw(mean, &mut rng);
        for j in 0..c {
            let citing_year = years[p] + rng.gen_range(1..=2);
            citation_lines.push(format!(
                "{{\"citing_id\":\"cite{p:06}_{j}\",\"cited_id\":\"p{p:06}\",\"citing_year\":{citing_year}}}"
            ));
            n_citations += 1;
        }
    }

    // Emit files.
    let open = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
        let path = out_dir.join(name);
        Ok(std::io::BufWriter::new(
            std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?,
        ))
    };
    let io_err = |e: std::io::Error| Error::io(out_dir.display().to_string(), e);
    let mut w = WriterSet {
        papers: open("papers.jsonl")?,
        authors: open("authors.jsonl")?,
        citations: open("citations.jsonl")?,
    };

    let mut paper_ids = Vec::with_capacity(n);
    for p in 0..n {
        let paper_id = format!("p{p:06}");
        let refs: Vec<String> = ctx_pool[paper_ctx[p]].iter().map(|&j| format!("J{j:04}")).collect();
        let cons: Vec<String> = con_pool[paper_con[p]].iter().map(|&c| format!("C{c:04}")).collect();
        let record = serde_json::json!({
            "paper_id": paper_id,
            "year": years[p],
            "journal_id": refs[0],
            "concept_ids_l3": cons,
            "field_ids_l1": ["f1"],
            "discipline_ids_l0": ["d0"],
            "referenced_journal_ids": refs,
            "author_ids": [format!("a{:06}", paper_author[p])],
            "institution_id": format!("inst{}", p % 8),
            "open_access": false,
            "jif_2y": null,
            "jif_5y": null,
            "n_grants": null,
        });
        writeln!(w.papers, "{record}").map_err(io_err)?;
        paper_ids.push(paper_id);
    }
    for (a, papers) in author_papers.iter().enumerate() {
        let first_year = papers.iter().map(|&p| years[p]).min().unwrap_or(cfg.year_min);
        let first_name = if female_author[a] { "Femina" } else { "Masculo" };
        let record = serde_json::json!({
            "author_id": format!("a{a:06}"),
            "first_name": first_name,
            "middle_name": null,
            "first_pub_year": first_year,
        });
        writeln!(w.authors, "{record}").map_err(io_err)?;
    }
    for line in &citation_lines {
        writeln!(w.citations, "{line}").map_err(io_err)?;
    }
    w.papers.flush().map_err(io_err)?;
    w.authors.flush().map_err(io_err)?;
    w.citations.flush().map_err(io_err)?;

    let names_path = out_dir.join("names.tsv");
    std::fs::write(
        &names_path,
        "Femina\tfemale\t0.99\t10000\nMasculo\tmale\t0.99\t10000\n",
    )
    .map_err(|e| Error::io(names_path.display().to_string(), e))?;

    let summary = TruthSummary {
        config: cfg.clone(),
        scale,
        n_papers_realized: n,
        n_citations,
        rank_var_ctx: v_ctx,
        rank_var_con: v_con,
    };
    let truth_path = out_dir.join("truth.json");
    std::fs::write(
        &truth_path,
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::validation(format!("truth.json: {e}")))?,
    )
    .map_err(|e| Error::io(truth_path.display().to_string(), e))?;

    let journal_home_weight = (0..cfg.n_journals)
        .map(|i| journals.theta[[i, i % cfg.dim_true]])
        .collect();
    Ok(SynthOutput {
        summary,
        rank_ctx,
        rank_con,
        female,
        paper_ids,
        combo_means,
        journal_home_weight,
        journal_salience: journals.salience.clone(),
    })
}
