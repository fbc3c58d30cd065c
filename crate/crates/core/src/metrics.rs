//! Text-level evaluation of edited responses.
//!
//! * TE: containment of the new/old object.
//! * SE: entailment of the new/old knowledge by `query + " " + y_e`.
//! * TR: ROUGE-1 F1 between edited and original response, edit spans masked.
//! * SR: embedding cosine between the same pair.
//!
//! Every metric lowercases its text inputs on entry. For INS queries the
//! editing metrics reward the new object and penalize the old one; OOS
//! queries are mirrored.

use std::collections::HashMap;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::embedding::{similarity, EmbeddingProvider, SimilarityKind};
use crate::error::{Error, Result};
use crate::text::tokenize;
use crate::transport::{self, RetryPolicy};
use crate::types::{Edit, QueryType, Scope};

pub const MASK_TOKEN: &str = "mask";
pub const DEFAULT_ENTAIL_THRESHOLD: f64 = 0.5;

pub fn lowercase_normalize(text: &str) -> String {
    text.to_lowercase()
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Textual editing score; one of {0, 0.5, 1}.
pub fn te(edited: &str, scope: Scope, old_object: &str, new_object: &str) -> f64 {
    let edited = lowercase_normalize(edited);
    let has_old = indicator(edited.contains(&lowercase_normalize(old_object)));
    let has_new = indicator(edited.contains(&lowercase_normalize(new_object)));
    match scope {
        Scope::Ins => 0.5 * has_new + 0.5 * (1.0 - has_old),
        Scope::Oos => 0.5 * has_old + 0.5 * (1.0 - has_new),
    }
}

/// Replaces every literal occurrence of `span` with the mask token.
pub fn mask(text: &str, span: &str) -> String {
    let text = lowercase_normalize(text);
    let span = lowercase_normalize(span);
    if span.is_empty() {
        return text;
    }
    text.replace(&span, MASK_TOKEN)
}

/// ROUGE-1 F1 with clipped unigram counts.
pub fn rouge1_f1(hypothesis: &str, reference: &str) -> f64 {
    let hyp = tokenize(hypothesis);
    let reference = tokenize(reference);
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in &reference {
        *ref_counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &hyp {
        if let Some(c) = ref_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let p = overlap as f64 / hyp.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// The edited/original pair TR and SR compare.
fn retention_pair(
    scope: Scope,
    original: &str,
    edited: &str,
    old_object: &str,
    new_object: &str,
) -> (String, String) {
    match scope {
        Scope::Ins => (mask(edited, new_object), mask(original, old_object)),
        Scope::Oos => (lowercase_normalize(edited), lowercase_normalize(original)),
    }
}

pub fn tr(scope: Scope, original: &str, edited: &str, old_object: &str, new_object: &str) -> f64 {
    let (e, o) = retention_pair(scope, original, edited, old_object, new_object);
    rouge1_f1(&e, &o)
}

pub async fn sr(
    scope: Scope,
    original: &str,
    edited: &str,
    old_object: &str,
    new_object: &str,
    embedder: &dyn EmbeddingProvider,
) -> Result<f64> {
    let (e, o) = retention_pair(scope, original, edited, old_object, new_object);
    let (ve, vo) = if e == o {
        let v = embedder.embed(&e).await?;
        (v.clone(), v)
    } else {
        (embedder.embed(&e).await?, embedder.embed(&o).await?)
    };
    // Identical non-empty texts are exactly 1 regardless of rounding.
    if e == o && !ve.is_zero() {
        return Ok(1.0);
    }
    Ok(similarity(&ve, &vo, SimilarityKind::Cosine)?.clamp(0.0, 1.0))
}

/// Text renderings of the old knowledge, the new knowledge, and the
/// model's own answer `[x, y_o]`, all lowercased.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeText {
    pub k_old: String,
    pub k_new: String,
    pub k_self: String,
}

impl KnowledgeText {
    pub fn new(edit: &Edit, query: &str, original_response: &str) -> Self {
        Self {
            k_old: lowercase_normalize(&format!("{} {}", edit.prompt, edit.old_object)),
            k_new: lowercase_normalize(&format!("{} {}", edit.prompt, edit.new_object)),
            k_self: lowercase_normalize(&format!("{query} {original_response}")),
        }
    }
}

#[async_trait]
pub trait NliProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Entailment probability cut-off, for providers that score.
    fn threshold(&self) -> Option<f64> {
        None
    }

    async fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool>;
}

/// Offline stub: the premise entails the hypothesis iff it contains it.
#[derive(Clone, Copy, Debug, Default)]
pub struct SubstringNli;

#[async_trait]
impl NliProvider for SubstringNli {
    fn name(&self) -> &str {
        "substring-stub"
    }

    async fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool> {
        Ok(premise.contains(hypothesis))
    }
}

#[derive(Serialize)]
struct NliRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Deserialize)]
struct NliResponse {
    entail_probability: f64,
}

/// Client for a `{"premise", "hypothesis"} -> {"entail_probability"}` endpoint.
pub struct RemoteNli {
    client: reqwest::Client,
    url: String,
    token: Option<String>,
    threshold: f64,
    retry: RetryPolicy,
}

impl RemoteNli {
    pub fn new(url: impl Into<String>, token: Option<String>) -> Result<Self> {
        Ok(Self {
            client: transport::build_client(Duration::from_secs(30))?,
            url: url.into(),
            token,
            threshold: DEFAULT_ENTAIL_THRESHOLD,
            retry: RetryPolicy::default(),
        })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

}

#[async_trait]
impl NliProvider for RemoteNli {
    fn name(&self) -> &str {
        &self.url
    }

    fn threshold(&self) -> Option<f64> {
        Some(self.threshold)
    }

    async fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool> {
        let resp: NliResponse = transport::post_json(
            &self.client,
            &self.url,
            self.token.as_deref(),
            &NliRequest {
                premise,
                hypothesis,
            },
            &self.retry,
        )
        .await
        .map_err(|e| Error::NliUnavailable(e.to_string()))?;
        Ok(resp.entail_probability >= self.threshold)
    }
}

/// Semantic editing score; one of {0, 0.5, 1}.
pub async fn se(
    scope: Scope,
    query: &str,
    edited: &str,
    knowledge: &KnowledgeText,
    nli: &dyn NliProvider,
) -> Result<f64> {
    let premise = lowercase_normalize(&format!("{query} {edited}"));
    let ent_new = indicator(nli.entails(&premise, &knowledge.k_new).await?);
    Ok(match scope {
        Scope::Ins => {
            let ent_old = indicator(nli.entails(&premise, &knowledge.k_old).await?);
            0.5 * ent_new + 0.5 * (1.0 - ent_old)
        }
        Scope::Oos => {
            let ent_self = indicator(nli.entails(&premise, &knowledge.k_self).await?);
            0.5 * ent_self + 0.5 * (1.0 - ent_new)
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub te: f64,
    pub se: f64,
    pub tr: f64,
    pub sr: f64,
}

impl EvalScores {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Te => self.te,
            Metric::Se => self.se,
            Metric::Tr => self.tr,
            Metric::Sr => self.sr,
        }
    }
}

/// Scores one response pair with all four metrics.
pub struct Scorer<'a> {
    pub nli: &'a dyn NliProvider,
    pub embedder: &'a dyn EmbeddingProvider,
}

impl Scorer<'_> {
    pub async fn score(
        &self,
        edit: &Edit,
        query_type: QueryType,
        query: &str,
        original: &str,
        edited: &str,
    ) -> Result<EvalScores> {
        let scope = query_type.scope();
        let knowledge = KnowledgeText::new(edit, query, original);
        Ok(EvalScores {
            te: te(edited, scope, &edit.old_object, &edit.new_object),
            se: se(scope, query, edited, &knowledge, self.nli).await?,
            tr: tr(scope, original, edited, &edit.old_object, &edit.new_object),
            sr: sr(
                scope,
                original,
                edited,
                &edit.old_object,
                &edit.new_object,
                self.embedder,
            )
            .await?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Te,
    Se,
    Tr,
    Sr,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Te, Metric::Se, Metric::Tr, Metric::Sr];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Te => "TE",
            Metric::Se => "SE",
            Metric::Tr => "TR",
            Metric::Sr => "SR",
        }
    }
}

/// Two decimals, halves rounded up.
pub fn round2(x: f64) -> f64 {
    let scaled = x * 100.0;
    // Absorb binary representation error so that e.g. 0.125 -> 0.13.
    (scaled + scaled.abs() * 1e-12).round() / 100.0
}

/// AVG column: mean over the query types that have a value.
pub fn average_cells(cells: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = cells.iter().flatten().copied().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: Metric,
    pub simple: Option<f64>,
    pub rephrase: Option<f64>,
    pub oos: Option<f64>,
    pub avg: Option<f64>,
}

impl ReportRow {
    pub fn cells(&self) -> [Option<f64>; 4] {
        [self.simple, self.rephrase, self.oos, self.avg]
    }
}

/// Per-metric × per-type means scaled ×100 and rounded to two decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Mean of the TE and SE averages.
    pub editing_score: Option<f64>,
    /// Mean of the TR and SR averages.
    pub retention_score: Option<f64>,
    pub counts: TypeCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCounts {
    pub simple: usize,
    pub rephrase: usize,
    pub oos: usize,
}

impl Report {
    pub fn row(&self, metric: Metric) -> &ReportRow {
        self.rows
            .iter()
            .find(|r| r.metric == metric)
            .expect("report has all metrics")
    }

    pub const HEADER: &'static str = "metric\tsimple\trephrase\toos\tavg";

    /// Tab-separated rows (without header).
    pub fn tsv_rows(&self) -> Vec<String> {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |v| format!("{v:.2}"));
        let mut lines: Vec<String> = self
            .rows
            .iter()
            .map(|r| {
                let cells: Vec<String> = r.cells().into_iter().map(fmt).collect();
                format!("{}\t{}", r.metric.as_str(), cells.join("\t"))
            })
            .collect();
        lines.push(format!("EDITING\t\t\t\t{}", fmt(self.editing_score)));
        lines.push(format!("RETENTION\t\t\t\t{}", fmt(self.retention_score)));
        lines
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for line in self.tsv_rows() {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Aggregates per-record scores into the report table.
pub fn aggregate(records: &[(QueryType, EvalScores)]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut counts = TypeCounts::default();
    for (t, _) in records {
        match t {
            QueryType::Simple => counts.simple += 1,
            QueryType::Rephrase => counts.rephrase += 1,
            QueryType::Oos => counts.oos += 1,
        }
    }
    let type_mean = |metric: Metric, qt: QueryType| -> Option<f64> {
        let values: Vec<f64> = records
            .iter()
            .filter(|(t, _)| *t == qt)
            .map(|(_, s)| s.get(metric))
            .collect();
        (!values.is_empty()).then(|| 100.0 * values.iter().sum::<f64>() / values.len() as f64)
    };

    let mut rows = Vec::with_capacity(4);
    let mut avgs = HashMap::new();
    for metric in Metric::ALL {
        let cells = QueryType::ALL.map(|qt| type_mean(metric, qt));
        let avg = average_cells(&cells);
        avgs.insert(metric, avg);
        rows.push(ReportRow {
            metric,
            simple: cells[0].map(round2),
            rephrase: cells[1].map(round2),
            oos: cells[2].map(round2),
            avg: avg.map(round2),
        });
    }
    let pair_mean = |a: Metric, b: Metric| Some((avgs[&a]? + avgs[&b]?) / 2.0);
    Ok(Report {
        rows,
        editing_score: pair_mean(Metric::Te, Metric::Se).map(round2),
        retention_score: pair_mean(Metric::Tr, Metric::Sr).map(round2),
        counts,
    })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::Precondition("pearson needs at least two points".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(Error::ZeroVariance);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
