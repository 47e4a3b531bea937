//! Tag statistics, vocabulary selection and top-k training-set construction
//! over photo metadata.
//!
//! Metadata lines carry `photo_id, user_id, title, description, tags`
//! separated by tabs. Text fields and tags are percent-encoded; tags are
//! comma-separated.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use percent_encoding::percent_decode_str;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TagError {
    #[error("conflicting overrides: `{0}` is both kept and dropped")]
    ConflictingOverride(String),
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("k must be at least 1")]
    BadK,
    #[error("n must be at least 1")]
    BadN,
    #[error("invalid number pattern `{pattern}`: {source}")]
    Pattern { pattern: String, source: regex::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TagError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhotoRecord {
    pub photo_id: String,
    pub user_id: String,
    pub title: String,
    pub description: String,
    pub tags: Vec<String>,
}

/// Lowercased, trimmed, inner whitespace runs joined with `+`.
pub fn normalize_tag(raw: &str) -> String {
    let decoded = percent_decode_str(raw).decode_utf8_lossy();
    decoded.trim().to_lowercase().split_whitespace().collect::<Vec<_>>().join("+")
}

fn decode_text(raw: &str) -> String {
    percent_decode_str(&raw.replace('+', " ")).decode_utf8_lossy().into_owned()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub records: usize,
    pub malformed: usize,
    /// 1-based line numbers of skipped lines.
    pub malformed_lines: Vec<usize>,
}

fn parse_line(line: &str) -> Option<PhotoRecord> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 5 || f[0].trim().is_empty() || f[1].trim().is_empty() {
        return None;
    }
    let mut seen = HashSet::new();
    let tags = f[4]
        .split(',')
        .map(normalize_tag)
        .filter(|t| !t.is_empty() && seen.insert(t.clone()))
        .collect();
    Some(PhotoRecord {
        photo_id: f[0].trim().to_string(),
        user_id: f[1].trim().to_string(),
        title: decode_text(f[2]),
        description: decode_text(f[3]),
        tags,
    })
}

/// Reads metadata lines. Malformed lines and repeated photo ids are
/// counted and skipped.
pub fn ingest_metadata(reader: impl BufRead) -> Result<(Vec<PhotoRecord>, IngestReport)> {
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
    let parsed: Vec<Option<PhotoRecord>> = lines
        .par_iter()
        .map(|l| if l.trim().is_empty() { None } else { parse_line(l.trim_end_matches('\r')) })
        .collect();
    let mut report = IngestReport::default();
    let mut ids = HashSet::new();
    let mut records = Vec::new();
    for (i, (line, rec)) in lines.iter().zip(parsed).enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match rec {
            Some(r) if ids.insert(r.photo_id.clone()) => records.push(r),
            _ => {
                report.malformed += 1;
                report.malformed_lines.push(i + 1);
            }
        }
    }
    if report.malformed > 0 {
        log::warn!("skipped {} malformed metadata lines", report.malformed);
    }
    report.records = records.len();
    Ok((records, report))
}

pub fn ingest_file(path: &Path) -> Result<(Vec<PhotoRecord>, IngestReport)> {
    ingest_metadata(std::io::BufReader::new(fs::File::open(path)?))
}

fn encode_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            ' ' => out.push('+'),
            '%' | '+' | ',' | '\t' | '\n' | '\r' => out.push_str(&format!("%{:02X}", ch as u32)),
            _ => out.push(ch),
        }
    }
    out
}

/// One metadata line; the inverse of ingestion for normalized records.
pub fn format_record(r: &PhotoRecord) -> String {
    let tags: Vec<String> = r
        .tags
        .iter()
        .map(|t| t.replace('%', "%25").replace(',', "%2C").replace('\t', "%09"))
        .collect();
    format!(
        "{}\t{}\t{}\t{}\t{}",
        r.photo_id,
        r.user_id,
        encode_field(&r.title),
        encode_field(&r.description),
        tags.join(",")
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagCount {
    pub photo_count: usize,
    pub user_count: usize,
}

pub type TagStats = BTreeMap<String, TagCount>;

pub fn compute_tag_stats(records: &[PhotoRecord]) -> TagStats {
    type Partial<'a> = HashMap<&'a str, (usize, HashSet<&'a str>)>;
    let merged: Partial = records
        .par_iter()
        .fold(Partial::new, |mut acc, r| {
            let distinct: HashSet<&str> = r.tags.iter().map(String::as_str).collect();
            for t in distinct {
                let e = acc.entry(t).or_default();
                e.0 += 1;
                e.1.insert(&r.user_id);
            }
            acc
        })
        .reduce(Partial::new, |mut a, b| {
            for (t, (n, users)) in b {
                let e = a.entry(t).or_default();
                e.0 += n;
                e.1.extend(users);
            }
            a
        });
    merged
        .into_iter()
        .map(|(t, (n, users))| (t.to_string(), TagCount { photo_count: n, user_count: users.len() }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RankKey {
    PhotoCount,
    UserCount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedTag {
    pub rank: usize,
    pub tag: String,
    pub photo_count: usize,
    pub user_count: usize,
}

/// Top `n` tags by `key`, ties broken lexicographically. Ranks start at 1.
pub fn rank_tags(stats: &TagStats, key: RankKey, n: usize) -> Result<Vec<RankedTag>> {
    if n == 0 {
        return Err(TagError::BadN);
    }
    let value = |c: &TagCount| match key {
        RankKey::PhotoCount => c.photo_count,
        RankKey::UserCount => c.user_count,
    };
    let mut all: Vec<(&String, &TagCount)> = stats.iter().collect();
    all.sort_by(|a, b| value(b.1).cmp(&value(a.1)).then_with(|| a.0.cmp(b.0)));
    Ok(all
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(i, (tag, c))| RankedTag { rank: i + 1, tag: tag.clone(), photo_count: c.photo_count, user_count: c.user_count })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    Number,
    Location,
    NonEnglish,
    Sensitive,
    ManualDrop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Kept,
    /// Kept by the manual keep list although `overridden` rules matched.
    KeptByOverride { overridden: Vec<ExclusionReason> },
    Excluded { reason: ExclusionReason },
}

#[derive(Debug, Clone)]
pub struct ExclusionRules {
    pub number_patterns: Vec<Regex>,
    pub locations: BTreeSet<String>,
    pub nonenglish: BTreeSet<String>,
    pub sensitive: BTreeSet<String>,
    pub keep: BTreeSet<String>,
    pub drop: BTreeSet<String>,
}

pub const DEFAULT_NUMBER_PATTERN: &str = r"^[0-9]{1,4}$";

impl Default for ExclusionRules {
    fn default() -> Self {
        ExclusionRules {
            number_patterns: vec![Regex::new(DEFAULT_NUMBER_PATTERN).expect("valid pattern")],
            locations: BTreeSet::new(),
            nonenglish: BTreeSet::new(),
            sensitive: BTreeSet::new(),
            keep: BTreeSet::new(),
            drop: BTreeSet::new(),
        }
    }
}

/// Term-list lines: one tag each, `#` comments and blanks ignored.
pub fn parse_term_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(normalize_tag)
        .collect()
}

impl ExclusionRules {
    /// Loads `numbers.txt`, `locations.txt`, `nonenglish.txt`,
    /// `sensitive.txt`, `keep.txt` and `drop.txt` from `dir`; any may be
    /// missing. Patterns in `numbers.txt` are added to the default one.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            match fs::read_to_string(dir.join(name)) {
                Ok(s) => Ok(s),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(String::new()),
                Err(e) => Err(e.into()),
            }
        };
        let mut rules = ExclusionRules::default();
        for line in read("numbers.txt")?.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let re = Regex::new(line).map_err(|source| TagError::Pattern { pattern: line.to_string(), source })?;
            rules.number_patterns.push(re);
        }
        rules.locations = parse_term_list(&read("locations.txt")?);
        rules.nonenglish = parse_term_list(&read("nonenglish.txt")?);
        rules.sensitive = parse_term_list(&read("sensitive.txt")?);
        rules.keep = parse_term_list(&read("keep.txt")?);
        rules.drop = parse_term_list(&read("drop.txt")?);
        rules.check()?;
        Ok(rules)
    }

    pub fn check(&self) -> Result<()> {
        match self.keep.intersection(&self.drop).next() {
            Some(t) => Err(TagError::ConflictingOverride(t.clone())),
            None => Ok(()),
        }
    }

    /// Every rule matching `tag`, in reason order.
    pub fn matches(&self, tag: &str) -> Vec<ExclusionReason> {
        let mut out = Vec::new();
        if self.number_patterns.iter().any(|re| re.is_match(tag)) {
            out.push(ExclusionReason::Number);
        }
        if self.locations.contains(tag) {
            out.push(ExclusionReason::Location);
        }
        if self.nonenglish.contains(tag) {
            out.push(ExclusionReason::NonEnglish);
        }
        if self.sensitive.contains(tag) {
            out.push(ExclusionReason::Sensitive);
        }
        out
    }

    pub fn decide(&self, tag: &str) -> Decision {
        let matched = self.matches(tag);
        if self.keep.contains(tag) {
            return if matched.is_empty() { Decision::Kept } else { Decision::KeptByOverride { overridden: matched } };
        }
        if self.drop.contains(tag) {
            return Decision::Excluded { reason: ExclusionReason::ManualDrop };
        }
        match matched.first() {
            Some(&reason) => Decision::Excluded { reason },
            None => Decision::Kept,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagDecision {
    #[serde(flatten)]
    pub tag: RankedTag,
    #[serde(flatten)]
    pub decision: Decision,
}

/// Retained tags in ranking order, with the decision taken for every
/// ranked tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tags: Vec<String>,
    pub decisions: Vec<TagDecision>,
}

pub fn apply_exclusions(ranking: &[RankedTag], rules: &ExclusionRules) -> Result<Vocabulary> {
    rules.check()?;
    let decisions: Vec<TagDecision> =
        ranking.iter().map(|t| TagDecision { tag: t.clone(), decision: rules.decide(&t.tag) }).collect();
    let tags = decisions
        .iter()
        .filter(|d| !matches!(d.decision, Decision::Excluded { .. }))
        .map(|d| d.tag.tag.clone())
        .collect();
    Ok(Vocabulary { tags, decisions })
}

pub fn provenance_path(vocab_path: &Path) -> PathBuf {
    let mut name = vocab_path.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    vocab_path.with_file_name(name)
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Writes one tag per line and the decisions to a sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tags {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text)?;
        fs::write(provenance_path(path), serde_json::to_string_pretty(&self.decisions)?)?;
        Ok(())
    }

    /// Reads a vocabulary file; the sidecar is loaded when present.
    pub fn read(path: &Path) -> Result<Self> {
        let tags: Vec<String> = parse_vocab_lines(&fs::read_to_string(path)?);
        let sidecar = provenance_path(path);
        let decisions = if sidecar.exists() { serde_json::from_str(&fs::read_to_string(sidecar)?)? } else { Vec::new() };
        Ok(Vocabulary { tags, decisions })
    }
}

fn parse_vocab_lines(text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    text.lines().map(normalize_tag).filter(|t| !t.is_empty() && seen.insert(t.clone())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldWeights {
    pub title: f64,
    pub description: f64,
    pub tags: f64,
}

impl Default for FieldWeights {
    fn default() -> Self {
        FieldWeights { title: 0.5, description: 0.25, tags: 1.0 }
    }
}

impl FieldWeights {
    fn as_array(&self) -> [f64; 3] {
        [self.title, self.description, self.tags]
    }

    pub fn validate(&self) -> Result<(), String> {
        let w = self.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().all(|v| *v == 0.0) {
            return Err("field weights must be non-negative, finite and not all zero".into());
        }
        Ok(())
    }
}

/// Lowercased alphanumeric runs of free text.
pub fn text_tokens(text: &str) -> Vec<String> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

/// Token lists of one record: title, description, tags.
fn field_tokens(r: &PhotoRecord) -> [Vec<String>; 3] {
    [text_tokens(&r.title), text_tokens(&r.description), r.tags.clone()]
}

/// Per-field document frequencies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusIndex {
    pub documents: usize,
    pub df: [HashMap<String, usize>; 3],
}

impl CorpusIndex {
    pub fn build(records: &[PhotoRecord]) -> Self {
        let df = records
            .par_iter()
            .fold(<[HashMap<String, usize>; 3]>::default, |mut acc, r| {
                for (f, tokens) in field_tokens(r).into_iter().enumerate() {
                    for t in tokens.into_iter().collect::<HashSet<_>>() {
                        *acc[f].entry(t).or_default() += 1;
                    }
                }
                acc
            })
            .reduce(<[HashMap<String, usize>; 3]>::default, |mut a, b| {
                for (f, m) in b.into_iter().enumerate() {
                    for (t, n) in m {
                        *a[f].entry(t).or_default() += n;
                    }
                }
                a
            });
        CorpusIndex { documents: records.len(), df }
    }

    /// `ln((N + 1) / (df + 1)) + 1`.
    pub fn idf(&self, field: usize, token: &str) -> f64 {
        let df = self.df[field].get(token).copied().unwrap_or(0);
        ((self.documents as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
    }
}

fn score_tokens(index: &CorpusIndex, fields: &[Vec<String>; 3], tag: &str, weights: &FieldWeights) -> f64 {
    let w = weights.as_array();
    let mut score = 0.0;
    for f in 0..3 {
        let tf = fields[f].iter().filter(|t| *t == tag).count();
        if tf > 0 {
            score += w[f] * tf as f64 * index.idf(f, tag);
        }
    }
    score
}

/// Relative gap under which two scores count as tied. Scores that are equal
/// in exact arithmetic but summed in a different order can differ in the
/// last bits, and which one comes out larger depends on the field weights.
const TIE_TOLERANCE: f64 = 1e-9;

/// Best first; runs of tied scores are ordered by photo id.
fn order_by_score(scored: &mut [(&str, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut start = 0;
    while start < scored.len() {
        let lead = scored[start].1;
        let run = scored[start..].iter().take_while(|(_, s)| lead - s <= lead.abs() * TIE_TOLERANCE).count();
        scored[start..start + run].sort_by(|a, b| a.0.cmp(b.0));
        start += run;
    }
}

/// Weighted sum over fields of raw term count times idf. The tag is
/// matched as a single token.
pub fn tfidf_score(index: &CorpusIndex, record: &PhotoRecord, tag: &str, weights: &FieldWeights) -> f64 {
    score_tokens(index, &field_tokens(record), tag, weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSelection {
    pub tag: String,
    /// `(photo_id, score)`, best first.
    pub photos: Vec<(String, f64)>,
    /// Fewer than `k` photos matched the tag.
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub k: usize,
    pub weights: FieldWeights,
    pub selections: Vec<TagSelection>,
}

/// For each vocabulary tag the `k` best-scoring photos outside
/// `excluded_ids`, ties broken by photo id. Photos with score 0 are not
/// candidates.
pub fn build_training_set(
    records: &[PhotoRecord],
    vocab: &[String],
    k: usize,
    excluded_ids: &HashSet<String>,
    weights: &FieldWeights,
) -> Result<TrainingSet> {
    if vocab.is_empty() {
        return Err(TagError::EmptyVocabulary);
    }
    if k == 0 {
        return Err(TagError::BadK);
    }
    let index = CorpusIndex::build(records);
    let tokens: Vec<[Vec<String>; 3]> = records.par_iter().map(field_tokens).collect();
    let wanted: HashSet<&str> = vocab.iter().map(String::as_str).collect();
    let mut postings: HashMap<&str, BTreeSet<usize>> = HashMap::new();
    for (i, (r, fields)) in records.iter().zip(&tokens).enumerate() {
        if excluded_ids.contains(&r.photo_id) {
            continue;
        }
        for t in fields.iter().flatten() {
            if wanted.contains(t.as_str()) {
                postings.entry(wanted.get(t.as_str()).copied().expect("present")).or_default().insert(i);
            }
        }
    }
    let selections = vocab
        .par_iter()
        .map(|tag| {
            let mut scored: Vec<(&str, f64)> = postings
                .get(tag.as_str())
                .into_iter()
                .flatten()
                .map(|&i| (records[i].photo_id.as_str(), score_tokens(&index, &tokens[i], tag, weights)))
                .filter(|(_, s)| *s > 0.0)
                .collect();
            order_by_score(&mut scored);
            let shortfall = scored.len() < k;
            scored.truncate(k);
            TagSelection {
                tag: tag.clone(),
                photos: scored.into_iter().map(|(id, s)| (id.to_string(), s)).collect(),
                shortfall,
            }
        })
        .collect();
    Ok(TrainingSet { k, weights: *weights, selections })
}

impl TrainingSet {
    /// `tag, rank, photo_id, score` lines.
    pub fn write_tsv(&self, mut out: impl Write) -> std::io::Result<()> {
        for s in &self.selections {
            for (rank, (id, score)) in s.photos.iter().enumerate() {
                writeln!(out, "{}\t{}\t{}\t{}", s.tag, rank + 1, id, score)?;
            }
        }
        Ok(())
    }

    pub fn shortfall_tags(&self) -> Vec<&str> {
        self.selections.iter().filter(|s| s.shortfall).map(|s| s.tag.as_str()).collect()
    }
}
