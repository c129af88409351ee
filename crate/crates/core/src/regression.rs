//! Least-squares harness: design-matrix construction with dummy expansion and
//! interactions, QR-based OLS, cluster-robust and HC1 sandwich covariance, and
//! covariate-averaged marginal predictions.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub enum Column {
    Num(Vec<Option<f64>>),
    Cat(Vec<Option<String>>),
}

impl Column {
    fn len(&self) -> usize {
        match self {
            Column::Num(v) => v.len(),
            Column::Cat(v) => v.len(),
        }
    }

    fn present(&self, row: usize) -> bool {
        match self {
            Column::Num(v) => v[row].is_some(),
            Column::Cat(v) => v[row].is_some(),
        }
    }
}

/// Column-oriented analysis table.
#[derive(Debug, Clone, Default)]
pub struct Table {
    n_rows: usize,
    cols: BTreeMap<String, Column>,
}

impl Table {
    pub fn new(n_rows: usize) -> Self {
        Table {
            n_rows,
            cols: BTreeMap::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn add_num(&mut self, name: &str, values: Vec<Option<f64>>) -> Result<()> {
        self.add(name, Column::Num(values))
    }

    pub fn add_cat(&mut self, name: &str, values: Vec<Option<String>>) -> Result<()> {
        self.add(name, Column::Cat(values))
    }

    fn add(&mut self, name: &str, col: Column) -> Result<()> {
        if col.len() != self.n_rows {
            return Err(Error::validation(format!(
                "column '{name}' has {} rows, table has {}",
                col.len(),
                self.n_rows
            )));
        }
        if self.cols.insert(name.to_string(), col).is_some() {
            return Err(Error::validation(format!("duplicate column '{name}'")));
        }
        Ok(())
    }

    pub fn column_names(&self) -> Vec<String> {
        self.cols.keys().cloned().collect()
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.cols
            .get(name)
            .ok_or_else(|| Error::validation(format!("no column '{name}'")))
    }

    fn num(&self, name: &str) -> Result<&Vec<Option<f64>>> {
        match self.column(name)? {
            Column::Num(v) => Ok(v),
            Column::Cat(_) => Err(Error::validation(format!(
                "column '{name}' is categorical, expected numeric"
            ))),
        }
    }

}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Term {
    Main { col: String },
    Squared { col: String },
    Categorical { col: String, baseline: String },
    Interaction { cols: Vec<String> },
}

impl Term {
    fn columns(&self) -> Vec<&str> {
        match self {
            Term::Main { col } | Term::Squared { col } | Term::Categorical { col, .. } => {
                vec![col.as_str()]
            }
            Term::Interaction { cols } => cols.iter().map(|s| s.as_str()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum FilterOp {
    Ge,
    Le,
    Gt,
    Lt,
    Eq,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Filter {
    pub col: String,
    pub op: FilterOp,
    pub value: f64,
}

impl Filter {
    fn keep(&self, v: f64) -> bool {
        match self.op {
            FilterOp::Ge => v >= self.value,
            FilterOp::Le => v <= self.value,
            FilterOp::Gt => v > self.value,
            FilterOp::Lt => v < self.value,
            FilterOp::Eq => v == self.value,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeType {
    #[default]
    Clustered,
    Heteroskedastic,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub outcome: String,
    pub terms: Vec<Term>,
    #[serde(default)]
    pub filter: Option<Filter>,
    #[serde(default)]
    pub cluster_col: Option<String>,
    #[serde(default)]
    pub se_type: SeType,
}

impl ModelSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::validation(format!("{}: bad model spec: {e}", path.display())))
    }
}

/// Fully expanded design: intercept first, dummies without their baseline,
/// interactions as elementwise products.
#[derive(Debug, Clone)]
pub struct Design {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub names: Vec<String>,
    pub clusters: Option<Vec<String>>,
    /// Indices of retained table rows, after listwise deletion and filtering.
    pub rows: Vec<usize>,
}

// expanded (name, values-over-kept-rows) factors for one term component
fn expand_component(table: &Table, col: &str, rows: &[usize], baseline: Option<&str>) -> Result<Vec<(String, Vec<f64>)>> {
    match table.column(col)? {
        Column::Num(v) => Ok(vec![(
            col.to_string(),
            rows.iter().map(|&r| v[r].unwrap()).collect(),
        )]),
        Column::Cat(v) => {
            let mut levels: BTreeSet<&str> =
                rows.iter().map(|&r| v[r].as_deref().unwrap()).collect();
            let baseline = baseline.ok_or_else(|| {
                Error::validation(format!(
                    "categorical column '{col}' used without a declared baseline"
                ))
            })?;
            levels.remove(baseline);
            Ok(levels
                .into_iter()
                .map(|lvl| {
                    (
                        format!("{col}_{lvl}"),
                        rows.iter()
                            .map(|&r| if v[r].as_deref() == Some(lvl) { 1.0 } else { 0.0 })
                            .collect(),
                    )
                })
                .collect())
        }
    }
}

pub fn build_design(table: &Table, spec: &ModelSpec) -> Result<Design> {
    build_design_impl(table, spec, true)
}

// margins rebuilds the design with a variable pinned to a constant, which is
// deliberately collinear with the intercept; only prediction needs that matrix,
// so the rank check is skipped there.
fn build_design_impl(table: &Table, spec: &ModelSpec, check_rank: bool) -> Result<Design> {
    // referenced columns
    let mut needed: Vec<&str> = vec![spec.outcome.as_str()];
    for t in &spec.terms {
        needed.extend(t.columns());
    }
    if let Some(f) = &spec.filter {
        needed.push(&f.col);
    }
    if let Some(c) = &spec.cluster_col {
        needed.push(c);
    }
    for name in &needed {
        table.column(name)?;
    }

    // listwise deletion + filter
    let filter_vals = spec.filter.as_ref().map(|f| table.num(&f.col)).transpose()?;
    let rows: Vec<usize> = (0..table.n_rows)
        .filter(|&r| {
            needed.iter().all(|name| table.cols[*name].present(r))
                && match (&spec.filter, filter_vals) {
                    (Some(f), Some(vals)) => vals[r].map(|v| f.keep(v)).unwrap_or(false),
                    _ => true,
                }
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::validation(
            "no observations remain after filtering and listwise deletion".to_string(),
        ));
    }

    let mut names: Vec<String> = vec!["const".to_string()];
    let mut columns: Vec<Vec<f64>> = vec![vec![1.0; rows.len()]];
    let mut seen: HashSet<String> = HashSet::new();
    seen.insert("const".to_string());

    for term in &spec.terms {
        let expanded: Vec<(String, Vec<f64>)> = match term {
            Term::Main { col } => expand_component(table, col, &rows, None)?,
            Term::Squared { col } => {
                let v = table.num(col)?;
                vec![(
                    format!("{col}^2"),
                    rows.iter().map(|&r| v[r].unwrap().powi(2)).collect(),
                )]
            }
            Term::Categorical { col, baseline } => {
                expand_component(table, col, &rows, Some(baseline))?
            }
            Term::Interaction { cols } => {
                if !(2..=3).contains(&cols.len()) {
                    return Err(Error::validation(
                        "interactions must involve 2 or 3 columns".to_string(),
                    ));
                }
                let mut acc: Vec<(String, Vec<f64>)> = vec![(String::new(), vec![1.0; rows.len()])];
                for col in cols {
                    let parts = expand_component(table, col, &rows, None)?;
                    let mut next = Vec::with_capacity(acc.len() * parts.len());
                    for (an, av) in &acc {
                        for (pn, pv) in &parts {
                            let name = if an.is_empty() {
                                pn.clone()
                            } else {
                                format!("{an}×{pn}")
                            };
                            let vals = av.iter().zip(pv).map(|(a, b)| a * b).collect();
                            next.push((name, vals));
                        }
                    }
                    acc = next;
                }
                acc
            }
        };
        for (name, vals) in expanded {
            if !seen.insert(name.clone()) {
                return Err(Error::validation(format!(
                    "duplicate expanded column '{name}'"
                )));
            }
            names.push(name);
            columns.push(vals);
        }
    }

    let n = rows.len();
    let k = columns.len();
    let mut x = Array2::zeros((n, k));
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    let yv = table.num(&spec.outcome)?;
    let y = Array1::from_iter(rows.iter().map(|&r| yv[r].unwrap()));
    let clusters = match &spec.cluster_col {
        Some(c) => {
            let vals = match table.column(c)? {
                Column::Cat(v) => rows
                    .iter()
                    .map(|&r| v[r].clone().unwrap())
                    .collect::<Vec<_>>(),
                Column::Num(v) => rows
                    .iter()
                    .map(|&r| format!("{}", v[r].unwrap()))
                    .collect(),
            };
            Some(vals)
        }
        None => None,
    };

    if check_rank {
        let qr = householder(&x);
        if let Some(j) = qr.deficient_column() {
            return Err(Error::validation(format!(
                "design is rank deficient; column '{}' is collinear with earlier columns",
                names[j]
            )));
        }
    }

    Ok(Design {
        x,
        y,
        names,
        clusters,
        rows,
    })
}

/// Economy Householder QR; R is stored as a k x k upper triangle.
struct Qr {
    /// transformed copy of [X | extra] after applying the reflections
    a: Array2<f64>,
    k: usize,
    col_scale: f64,
}

fn householder(x: &Array2<f64>) -> Qr {
    householder_with(x, None)
}

fn householder_with(x: &Array2<f64>, rhs: Option<&Array1<f64>>) -> Qr {
    let (n, k) = x.dim();
    let extra = usize::from(rhs.is_some());
    let mut a = Array2::zeros((n, k + extra));
    a.slice_mut(ndarray::s![.., ..k]).assign(x);
    if let Some(y) = rhs {
        for i in 0..n {
            a[[i, k]] = y[i];
        }
    }
    let col_scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for j in 0..k.min(n) {
        // Householder vector for column j below the diagonal
        let mut norm = 0.0;
        for i in j..n {
            norm += a[[i, j]] * a[[i, j]];
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a[[j, j]] >= 0.0 { -norm } else { norm };
        let mut v = vec![0.0; n - j];
        v[0] = a[[j, j]] - alpha;
        for i in (j + 1)..n {
            v[i - j] = a[[i, j]];
        }
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv == 0.0 {
            continue;
        }
        for c in j..(k + extra) {
            let mut dot = 0.0;
            for i in j..n {
                dot += v[i - j] * a[[i, c]];
            }
            let f = 2.0 * dot / vtv;
            for i in j..n {
                a[[i, c]] -= f * v[i - j];
            }
        }
        a[[j, j]] = alpha;
        for i in (j + 1)..n {
            a[[i, j]] = 0.0;
        }
    }
    Qr { a, k, col_scale }
}

impl Qr {
    fn r_diag(&self, j: usize) -> f64 {
        self.a[[j, j]]
    }

    fn deficient_column(&self) -> Option<usize> {
        let tol = 1e-10 * self.col_scale.max(1e-300) * (self.a.nrows() as f64).sqrt();
        (0..self.k).find(|&j| self.r_diag(j).abs() < tol)
    }

    /// Solve R beta = (Q^T y)[..k] by back substitution.
    fn solve(&self) -> Array1<f64> {
        let k = self.k;
        let mut beta = Array1::zeros(k);
        for j in (0..k).rev() {
            let mut s = self.a[[j, k]];
            for c in (j + 1)..k {
                s -= self.a[[j, c]] * beta[c];
            }
            beta[j] = s / self.a[[j, j]];
        }
        beta
    }

    /// (X^T X)^{-1} = R^{-1} R^{-T}.
    fn xtx_inverse(&self) -> Array2<f64> {
        let k = self.k;
        // R^{-1} by back substitution against the identity
        let mut rinv = Array2::zeros((k, k));
        for col in 0..k {
            for j in (0..=col).rev() {
                let mut s = if j == col { 1.0 } else { 0.0 };
                for c in (j + 1)..=col {
                    s -= self.a[[j, c]] * rinv[[c, col]];
                }
                rinv[[j, col]] = s / self.a[[j, j]];
            }
        }
        rinv.dot(&rinv.t())
    }
}

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coef: Array1<f64>,
    pub residuals: Array1<f64>,
    xtx_inv: Array2<f64>,
}

/// OLS via Householder QR.
pub fn fit_ols(x: &Array2<f64>, y: &Array1<f64>) -> Result<OlsFit> {
    if x.nrows() != y.len() {
        return Err(Error::validation("design/outcome length mismatch".to_string()));
    }
    if x.nrows() < x.ncols() {
        return Err(Error::validation(
            "fewer observations than parameters".to_string(),
        ));
    }
    let qr = householder_with(x, Some(y));
    if let Some(j) = qr.deficient_column() {
        return Err(Error::validation(format!(
            "design is rank deficient at column {j}"
        )));
    }
    let coef = qr.solve();
    let residuals = y - &x.dot(&coef);
    Ok(OlsFit {
        coef,
        residuals,
        xtx_inv: qr.xtx_inverse(),
    })
}

/// Sandwich covariance: cluster-robust with the G/(G-1) * (n-1)/(n-k) factor,
/// or HC1 when no clusters are given.
pub fn robust_cov(
    x: &Array2<f64>,
    fit: &OlsFit,
    clusters: Option<&[String]>,
) -> Result<Array2<f64>> {
    let (n, k) = x.dim();
    let u = &fit.residuals;
    let meat = match clusters {
        Some(ids) => {
            if ids.len() != n {
                return Err(Error::validation("cluster vector length mismatch".to_string()));
            }
            let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, id) in ids.iter().enumerate() {
                groups.entry(id.as_str()).or_default().push(i);
            }
            let g = groups.len();
            if g < 2 {
                return Err(Error::validation(
                    "clustered covariance requires at least two clusters".to_string(),
                ));
            }
            let mut meat = Array2::zeros((k, k));
            for rows in groups.values() {
                let mut score = Array1::<f64>::zeros(k);
                for &i in rows {
                    for j in 0..k {
                        score[j] += x[[i, j]] * u[i];
                    }
                }
                for a in 0..k {
                    for b in 0..k {
                        meat[[a, b]] += score[a] * score[b];
                    }
                }
            }
            let factor =
                (g as f64 / (g as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - k as f64));
            meat * factor
        }
        None => {
            // HC1
            let mut meat = Array2::zeros((k, k));
            for i in 0..n {
                let u2 = u[i] * u[i];
                for a in 0..k {
                    for b in 0..k {
                        meat[[a, b]] += u2 * x[[i, a]] * x[[i, b]];
                    }
                }
            }
            meat * (n as f64 / (n as f64 - k as f64))
        }
    };
    Ok(fit.xtx_inv.dot(&meat).dot(&fit.xtx_inv))
}

#[derive(Debug, Clone)]
pub struct RegressionResult {
    pub spec_name: String,
    pub names: Vec<String>,
    pub coef: Array1<f64>,
    pub cov: Array2<f64>,
    pub se: Array1<f64>,
    pub t_stats: Array1<f64>,
    pub p_values: Array1<f64>,
    pub n_obs: usize,
    pub n_clusters: Option<usize>,
}

impl RegressionResult {
    pub fn coef_named(&self, name: &str) -> Option<(f64, f64, f64)> {
        let i = self.names.iter().position(|n| n == name)?;
        Some((self.coef[i], self.se[i], self.t_stats[i]))
    }
}

/// Build the design, fit, and attach robust inference for one model spec.
pub fn fit_model(table: &Table, spec: &ModelSpec) -> Result<RegressionResult> {
    let design = build_design(table, spec)?;
    let fit = fit_ols(&design.x, &design.y)?;
    let clusters = match spec.se_type {
        SeType::Clustered => {
            let c = design.clusters.as_deref().ok_or_else(|| {
                Error::validation("clustered SEs requested without a cluster column".to_string())
            })?;
            Some(c)
        }
        SeType::Heteroskedastic => None,
    };
    let cov = robust_cov(&design.x, &fit, clusters)?;
    let k = design.names.len();
    let mut se = Array1::zeros(k);
    let mut t = Array1::zeros(k);
    let mut p = Array1::zeros(k);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for j in 0..k {
        se[j] = cov[[j, j]].max(0.0).sqrt();
        t[j] = if se[j] > 0.0 { fit.coef[j] / se[j] } else { f64::NAN };
        p[j] = if t[j].is_finite() {
            2.0 * (1.0 - normal.cdf(t[j].abs()))
        } else {
            f64::NAN
        };
    }
    let n_clusters = clusters.map(|c| c.iter().collect::<BTreeSet<_>>().len());
    Ok(RegressionResult {
        spec_name: spec.name.clone(),
        names: design.names,
        coef: fit.coef,
        cov,
        se,
        t_stats: t,
        p_values: p,
        n_obs: design.y.len(),
        n_clusters,
    })
}

/// Covariate-averaged predictions at fixed values of one variable, with
/// delta-method standard errors from the robust covariance.
pub fn margins(
    table: &Table,
    spec: &ModelSpec,
    result: &RegressionResult,
    var: &str,
    values: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let base = build_design(table, spec)?;
    let observed = table.num(var)?;
    let (lo, hi) = base.rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
        let v = observed[r].unwrap_or(f64::NAN);
        (lo.min(v), hi.max(v))
    });

    // freeze the retained rows, then rebuild with the grid variable overridden
    let mut frozen = Table::new(base.rows.len());
    for (name, col) in &table.cols {
        match col {
            Column::Num(v) => frozen.add_num(name, base.rows.iter().map(|&r| v[r]).collect())?,
            Column::Cat(v) => {
                frozen.add_cat(name, base.rows.iter().map(|&r| v[r].clone()).collect())?
            }
        }
    }
    let mut frozen_spec = spec.clone();
    frozen_spec.filter = None;

    let mut out = Vec::with_capacity(values.len());
    for &value in values {
        if value < lo || value > hi {
            eprintln!("warning: margins grid value {value} for '{var}' lies outside the observed support [{lo}, {hi}]");
        }
        let mut t = frozen.clone();
        if let Some(Column::Num(v)) = t.cols.get_mut(var) {
            for cell in v.iter_mut() {
                *cell = Some(value);
            }
        } else {
            return Err(Error::validation(format!(
                "margins variable '{var}' must be numeric"
            )));
        }
        let d = build_design_impl(&t, &frozen_spec, false)?;
        if d.names != result.names {
            return Err(Error::validation(
                "margins design does not match the fitted model".to_string(),
            ));
        }
        let preds = d.x.dot(&result.coef);
        let mean = preds.mean().unwrap();
        let g = d.x.mean_axis(ndarray::Axis(0)).unwrap();
        let var_hat = g.dot(&result.cov.dot(&g));
        out.push((mean, var_hat.max(0.0).sqrt()));
    }
    Ok(out)
}

/// CSV report: `term,estimate,se,t,p` with an n_obs/n_clusters footer.
pub fn write_report_csv(path: &Path, result: &RegressionResult) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    (|| -> std::io::Result<()> {
        out.write_all(b"term,estimate,se,t,p\n")?;
        for j in 0..result.names.len() {
            writeln!(
                out,
                "{},{:.10e},{:.10e},{:.6},{:.6}",
                result.names[j], result.coef[j], result.se[j], result.t_stats[j], result.p_values[j]
            )?;
        }
        writeln!(
            out,
            "__footer__,n_obs={},n_clusters={},,",
            result.n_obs,
            result.n_clusters.map(|n| n.to_string()).unwrap_or_default()
        )?;
        out.flush()
    })()
    .map_err(io)
}

/// Plain-text table in the usual journal layout.
pub fn format_text_table(result: &RegressionResult) -> String {
    let mut s = String::new();
    s.push_str(&format!("Model: {}\n", result.spec_name));
    s.push_str(&format!("{:<28} {:>12} {:>12} {:>8} {:>8}\n", "term", "estimate", "se", "t", "p"));
    for j in 0..result.names.len() {
        s.push_str(&format!(
            "{:<28} {:>12.5} {:>12.5} {:>8.3} {:>8.3}\n",
            result.names[j], result.coef[j], result.se[j], result.t_stats[j], result.p_values[j]
        ));
    }
    s.push_str(&format!(
        "n = {}{}\n",
        result.n_obs,
        result
            .n_clusters
            .map(|g| format!(", clusters = {g}"))
            .unwrap_or_default()
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn num(vals: &[f64]) -> Vec<Option<f64>> {
        vals.iter().map(|&v| Some(v)).collect()
    }

    fn cat(vals: &[&str]) -> Vec<Option<String>> {
        vals.iter().map(|v| Some(v.to_string())).collect()
    }

    #[test]
    fn exact_line_is_recovered() {
        let x = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0]).unwrap();
        let y = Array1::from_vec(vec![1.0, 2.0, 3.0]);
        let fit = fit_ols(&x, &y).unwrap();
        assert_abs_diff_eq!(fit.coef[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.coef[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_outcome_has_zero_slopes() {
        let x = Array2::from_shape_vec(
            (4, 2),
            vec![1.0, 0.3, 1.0, 1.7, 1.0, 2.9, 1.0, -1.0],
        )
        .unwrap();
        let y = Array1::from_vec(vec![5.0; 4]);
        let fit = fit_ols(&x, &y).unwrap();
        assert_abs_diff_eq!(fit.coef[0], 5.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.coef[1], 0.0, epsilon = 1e-10);
    }

    // naive Gauss-Jordan inverse for the normal-equations oracle
    fn invert(m: &Array2<f64>) -> Array2<f64> {
        let k = m.nrows();
        let mut a = m.clone();
        let mut inv = Array2::eye(k);
        for col in 0..k {
            let pivot = (col..k)
                .max_by(|&i, &j| a[[i, col]].abs().partial_cmp(&a[[j, col]].abs()).unwrap())
                .unwrap();
            if pivot != col {
                for c in 0..k {
                    a.swap([pivot, c], [col, c]);
                    inv.swap([pivot, c], [col, c]);
                }
            }
            let d = a[[col, col]];
            for c in 0..k {
                a[[col, c]] /= d;
                inv[[col, c]] /= d;
            }
            for r in 0..k {
                if r != col {
                    let f = a[[r, col]];
                    for c in 0..k {
                        a[[r, c]] -= f * a[[col, c]];
                        inv[[r, c]] -= f * inv[[col, c]];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn random_system_matches_normal_equations() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 50;
        let k = 4;
        let mut x = Array2::zeros((n, k));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            x[[i, 0]] = 1.0;
            for j in 1..k {
                x[[i, j]] = rng.gen_range(-2.0..2.0);
            }
            y[i] = 0.5 + x[[i, 1]] - 2.0 * x[[i, 2]] + rng.gen_range(-0.5..0.5);
        }
        let fit = fit_ols(&x, &y).unwrap();
        let xtx = x.t().dot(&x);
        let beta_oracle = invert(&xtx).dot(&x.t().dot(&y));
        for j in 0..k {
            assert_abs_diff_eq!(fit.coef[j], beta_oracle[j], epsilon = 1e-8);
        }
        // residual orthogonality
        let xtu = x.t().dot(&fit.residuals);
        let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for j in 0..k {
            assert!(xtu[j].abs() < 1e-8 * scale.max(1.0) * n as f64);
        }
    }

    #[test]
    fn coefficients_scale_inversely_with_regressor_scale() {
        let x = Array2::from_shape_vec(
            (5, 2),
            vec![1.0, 1.0, 1.0, 2.0, 1.0, 3.5, 1.0, -1.0, 1.0, 0.25],
        )
        .unwrap();
        let y = Array1::from_vec(vec![2.0, 3.0, 5.5, 0.1, 1.7]);
        let fit1 = fit_ols(&x, &y).unwrap();
        let mut x10 = x.clone();
        for i in 0..5 {
            x10[[i, 1]] *= 10.0;
        }
        let fit2 = fit_ols(&x10, &y).unwrap();
        assert_abs_diff_eq!(fit2.coef[1], fit1.coef[1] / 10.0, epsilon = 1e-10);
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let x = Array2::from_shape_vec((4, 3), vec![
            1.0, 1.0, 2.0,
            1.0, 2.0, 4.0,
            1.0, 3.0, 6.0,
            1.0, 4.0, 8.0,
        ])
        .unwrap();
        let y = Array1::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert!(fit_ols(&x, &y).is_err());
    }

    fn toy_table() -> Table {
        let mut t = Table::new(6);
        t.add_num("y", num(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        t.add_num("female", num(&[0.0, 1.0, 0.0, 1.0, 0.0, 1.0])).unwrap();
        t.add_num("surprise", num(&[0.1, 0.9, 0.4, 0.6, 0.2, 0.8])).unwrap();
        t.add_cat("field", cat(&["A", "B", "C", "A", "B", "C"])).unwrap();
        t.add_cat("author", cat(&["u", "v", "w", "u", "v", "w"])).unwrap();
        t
    }

    #[test]
    fn dummy_expansion_omits_baseline() {
        let spec = ModelSpec {
            name: "m".into(),
            outcome: "y".into(),
            terms: vec![
                Term::Main { col: "female".into() },
                Term::Categorical { col: "field".into(), baseline: "A".into() },
            ],
            filter: None,
            cluster_col: None,
            se_type: SeType::Heteroskedastic,
        };
        let d = build_design(&toy_table(), &spec).unwrap();
        assert_eq!(d.names, vec!["const", "female", "field_B", "field_C"]);
    }

    #[test]
    fn interaction_is_a_product_column() {
        let spec = ModelSpec {
            name: "m".into(),
            outcome: "y".into(),
            terms: vec![
                Term::Main { col: "female".into() },
                Term::Main { col: "surprise".into() },
                Term::Interaction { cols: vec!["female".into(), "surprise".into()] },
            ],
            filter: None,
            cluster_col: None,
            se_type: SeType::Heteroskedastic,
        };
        let d = build_design(&toy_table(), &spec).unwrap();
        assert_eq!(d.names.last().unwrap(), "female×surprise");
        for i in 0..d.x.nrows() {
            assert_eq!(d.x[[i, 3]], d.x[[i, 1]] * d.x[[i, 2]]);
        }
    }

    #[test]
    fn filter_keeps_qualifying_rows() {
        let spec = ModelSpec {
            name: "m".into(),
            outcome: "y".into(),
            terms: vec![Term::Main { col: "female".into() }],
            filter: Some(Filter { col: "surprise".into(), op: FilterOp::Ge, value: 0.4 }),
            cluster_col: None,
            se_type: SeType::Heteroskedastic,
        };
        let d = build_design(&toy_table(), &spec).unwrap();
        assert_eq!(d.rows, vec![1, 2, 3, 5]);
    }

    #[test]
    fn one_obs_per_cluster_reduces_to_hc1_up_to_factor() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let mut x = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            x[[i, 0]] = 1.0;
            x[[i, 1]] = rng.gen_range(-1.0..1.0);
            y[i] = 1.0 + 2.0 * x[[i, 1]] + rng.gen_range(-1.0..1.0);
        }
        let fit = fit_ols(&x, &y).unwrap();
        let clusters: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let vc = robust_cov(&x, &fit, Some(&clusters)).unwrap();
        let vh = robust_cov(&x, &fit, None).unwrap();
        let g = n as f64;
        let k = 2.0;
        let cluster_factor = (g / (g - 1.0)) * ((n as f64 - 1.0) / (n as f64 - k));
        let hc1_factor = n as f64 / (n as f64 - k);
        for a in 0..2 {
            for b in 0..2 {
                assert_abs_diff_eq!(
                    vc[[a, b]] / cluster_factor,
                    vh[[a, b]] / hc1_factor,
                    epsilon = 1e-10 * vh[[a, b]].abs().max(1e-12)
                );
            }
        }
    }

    #[test]
    fn three_cluster_sandwich_matches_explicit_oracle() {
        let x = Array2::from_shape_vec(
            (6, 2),
            vec![1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0, 4.0, 1.0, 5.0],
        )
        .unwrap();
        let y = Array1::from_vec(vec![0.5, 1.9, 2.6, 4.4, 4.1, 6.3]);
        let clusters: Vec<String> =
            ["g1", "g1", "g2", "g2", "g3", "g3"].iter().map(|s| s.to_string()).collect();
        let fit = fit_ols(&x, &y).unwrap();
        let got = robust_cov(&x, &fit, Some(&clusters)).unwrap();

        // explicit oracle
        let xtx_inv = invert(&x.t().dot(&x));
        let mut meat = Array2::<f64>::zeros((2, 2));
        for rows in [[0usize, 1], [2, 3], [4, 5]] {
            let mut s = Array1::<f64>::zeros(2);
            for &i in &rows {
                for j in 0..2 {
                    s[j] += x[[i, j]] * fit.residuals[i];
                }
            }
            for a in 0..2 {
                for b in 0..2 {
                    meat[[a, b]] += s[a] * s[b];
                }
            }
        }
        let factor = (3.0 / 2.0) * (5.0 / 4.0);
        let oracle = xtx_inv.dot(&(meat * factor)).dot(&xtx_inv);
        for a in 0..2 {
            for b in 0..2 {
                assert_abs_diff_eq!(got[[a, b]], oracle[[a, b]], epsilon = 1e-10);
            }
        }
        // symmetry and nonnegative diagonal
        assert_abs_diff_eq!(got[[0, 1]], got[[1, 0]], epsilon = 1e-14);
        assert!(got[[0, 0]] >= 0.0 && got[[1, 1]] >= 0.0);
    }

    #[test]
    fn single_cluster_is_rejected() {
        let x = Array2::from_shape_vec((3, 1), vec![1.0, 1.0, 1.0]).unwrap();
        let y = Array1::from_vec(vec![1.0, 2.0, 3.0]);
        let fit = fit_ols(&x, &y).unwrap();
        let clusters = vec!["g".to_string(); 3];
        assert!(robust_cov(&x, &fit, Some(&clusters)).is_err());
    }

    #[test]
    fn margins_recover_closed_form_for_binary_regressor() {
        let spec = ModelSpec {
            name: "m".into(),
            outcome: "y".into(),
            terms: vec![Term::Main { col: "female".into() }],
            filter: None,
            cluster_col: None,
            se_type: SeType::Heteroskedastic,
        };
        let t = toy_table();
        let result = fit_model(&t, &spec).unwrap();
        let a = result.coef[0];
        let b = result.coef[1];
        let m = margins(&t, &spec, &result, "female", &[0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(m[0].0, a, epsilon = 1e-10);
        assert_abs_diff_eq!(m[1].0, a + b, epsilon = 1e-10);
    }

    #[test]
    fn margins_on_interaction_model_are_linear_in_the_grid() {
        let spec = ModelSpec {
            name: "m".into(),
            outcome: "y".into(),
            terms: vec![
                Term::Main { col: "female".into() },
                Term::Main { col: "surprise".into() },
                Term::Interaction { cols: vec!["female".into(), "surprise".into()] },
            ],
            filter: None,
            cluster_col: None,
            se_type: SeType::Heteroskedastic,
        };
        let t = toy_table();
        let result = fit_model(&t, &spec).unwrap();
        let m = margins(&t, &spec, &result, "surprise", &[0.2, 0.4, 0.6]).unwrap();
        // predictions averaged over covariates are linear in the grid variable
        let d1 = m[1].0 - m[0].0;
        let d2 = m[2].0 - m[1].0;
        assert_abs_diff_eq!(d1, d2, epsilon = 1e-10);
        // slope equals lambda + tau * mean(female)
        let lambda = result.coef_named("surprise").unwrap().0;
        let tau = result.coef_named("female×surprise").unwrap().0;
        assert_abs_diff_eq!(d1 / 0.2, lambda + tau * 0.5, epsilon = 1e-9);
    }

    #[test]
    fn clustered_model_reports_cluster_count() {
        let spec = ModelSpec {
            name: "m".into(),
            outcome: "y".into(),
            terms: vec![Term::Main { col: "surprise".into() }],
            filter: None,
            cluster_col: Some("author".into()),
            se_type: SeType::Clustered,
        };
        let result = fit_model(&toy_table(), &spec).unwrap();
        assert_eq!(result.n_clusters, Some(3));
        assert_eq!(result.n_obs, 6);
    }
}
