//! Posterior calibration backend: per-tag logit index, calibration table,
//! judgment journal, bias suggestion and the HTTP API.
//!
//! The posterior of an item with logit `s` under bias `b` is
//! `1 / (1 + exp(-s - b))`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagefolder::{valid_photo_id, ImageFolder};
use crate::multilabel::{logit, posterior};
use crate::network::{crop_view, Dataset, Network};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
    #[error("tag `{0}` is disabled")]
    Disabled(String),
    #[error("unknown photo `{0}`")]
    UnknownPhoto(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{have} judgments for `{tag}`, need at least {need}")]
    InsufficientJudgments { tag: String, have: usize, need: usize },
    #[error("network has {classes} classes but the vocabulary has {vocab} tags")]
    ClassCount { classes: usize, vocab: usize },
    #[error("calibration table version {0} is newer than this build reads")]
    FutureVersion(u32),
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CalibError> = std::result::Result<T, E>;

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Per-tag `(photo_id, logit)` lists, highest logit first, equal logits by
/// photo id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreIndex {
    lists: BTreeMap<String, Vec<(String, f64)>>,
}

impl ScoreIndex {
    /// Builds the index from one logit row per photo, columns in `tags`
    /// order.
    pub fn from_rows(tags: &[String], rows: &[(String, Vec<f64>)]) -> Result<Self> {
        let mut lists: BTreeMap<String, Vec<(String, f64)>> = tags.iter().map(|t| (t.clone(), Vec::new())).collect();
        if lists.len() != tags.len() {
            return Err(CalibError::Invalid("duplicate tag".into()));
        }
        for (id, row) in rows {
            if row.len() != tags.len() {
                return Err(CalibError::Invalid(format!("photo `{id}` has {} logits for {} tags", row.len(), tags.len())));
            }
            for (tag, &s) in tags.iter().zip(row) {
                if !s.is_finite() {
                    return Err(CalibError::Invalid(format!("non-finite logit for `{id}`/`{tag}`")));
                }
                lists.get_mut(tag).expect("present").push((id.clone(), s));
            }
        }
        let mut index = ScoreIndex { lists };
        index.sort();
        Ok(index)
    }

    fn sort(&mut self) {
        for list in self.lists.values_mut() {
            list.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        }
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.lists.keys().map(String::as_str)
    }

    pub fn list(&self, tag: &str) -> Result<&[(String, f64)]> {
        self.lists.get(tag).map(Vec::as_slice).ok_or_else(|| CalibError::UnknownTag(tag.to_string()))
    }

    pub fn logit_of(&self, tag: &str, photo_id: &str) -> Result<f64> {
        self.list(tag)?
            .iter()
            .find(|(id, _)| id == photo_id)
            .map(|(_, s)| *s)
            .ok_or_else(|| CalibError::UnknownPhoto(photo_id.to_string()))
    }

    /// `photo_id, tag, logit` lines.
    pub fn write(&self, mut out: impl Write) -> std::io::Result<()> {
        for (tag, list) in &self.lists {
            for (id, s) in list {
                writeln!(out, "{id}\t{tag}\t{s}")?;
            }
        }
        Ok(())
    }

    pub fn read(input: impl BufRead, name: &str) -> Result<Self> {
        let mut lists: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: &str| CalibError::Format { path: name.into(), line: i + 1, message: m.into() };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(err("expected `photo_id, tag, logit`"));
            }
            let s: f64 = f[2].trim().parse().map_err(|_| err("invalid logit"))?;
            if !s.is_finite() {
                return Err(err("non-finite logit"));
            }
            lists.entry(f[1].to_string()).or_default().push((f[0].to_string(), s));
        }
        let mut index = ScoreIndex { lists };
        index.sort();
        Ok(index)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?), &path.display().to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ScoreReport {
    pub scored: usize,
    pub unreadable: Vec<String>,
}

/// Forward pass over every image of `images` (center crop, inference mode).
/// Images that fail to decode are skipped and reported.
pub fn score_corpus(net: &Network, images: &ImageFolder, vocab: &[String], batch_size: usize) -> Result<(ScoreIndex, ScoreReport)> {
    if net.num_classes() != vocab.len() {
        return Err(CalibError::ClassCount { classes: net.num_classes(), vocab: vocab.len() });
    }
    let crop = net.input.height;
    let mut rows = Vec::with_capacity(images.len());
    let mut report = ScoreReport::default();
    let all: Vec<usize> = (0..images.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let loaded: Vec<(usize, Option<Tensor<f32>>)> = chunk
            .par_iter()
            .map(|&i| {
                let view = images.image(i).ok().and_then(|img| crop_view(&img, crop, 0).ok());
                (i, view)
            })
            .collect();
        let mut views = Vec::new();
        let mut ids = Vec::new();
        for (i, view) in loaded {
            match view {
                Some(v) => {
                    views.push(v);
                    ids.push(images.ids[i].clone());
                }
                None => report.unreadable.push(images.ids[i].clone()),
            }
        }
        if views.is_empty() {
            continue;
        }
        let logits = net.predict(Tensor::stack(&views).map_err(crate::network::NetworkError::from)?).map_err(crate::network::NetworkError::from)?;
        for (r, id) in ids.into_iter().enumerate() {
            rows.push((id, logits.row(r).iter().map(|&v| v as f64).collect()));
        }
    }
    if !report.unreadable.is_empty() {
        log::warn!("skipped {} unreadable images", report.unreadable.len());
    }
    report.scored = rows.len();
    Ok((ScoreIndex::from_rows(vocab, &rows)?, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub bias: f64,
    pub enabled: bool,
    /// Unix seconds of the last change; 0 when never changed.
    pub modified: u64,
}

impl Default for TableEntry {
    fn default() -> Self {
        TableEntry { bias: 0.0, enabled: true, modified: 0 }
    }
}

pub const TABLE_VERSION: u32 = 2;
const TABLE_MAGIC: &str = "tagkit-calibration";

/// Per-tag bias and enabled flag.
///
/// File layout: a `tagkit-calibration {version}` line, then one
/// tab-separated record per tag. Version 1 records are `tag, bias,
/// enabled`; version 2 appends the modification stamp.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationTable {
    pub entries: BTreeMap<String, TableEntry>,
}

impl CalibrationTable {
    pub fn for_tags<'a>(tags: impl IntoIterator<Item = &'a str>) -> Self {
        CalibrationTable { entries: tags.into_iter().map(|t| (t.to_string(), TableEntry::default())).collect() }
    }

    pub fn render(&self) -> String {
        let mut out = format!("{TABLE_MAGIC} {TABLE_VERSION}\n");
        for (tag, e) in &self.entries {
            // `{}` prints the shortest text that parses back to the same f64
            out.push_str(&format!("{tag}\t{}\t{}\t{}\n", e.bias, e.enabled, e.modified));
        }
        out
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let err = |line: usize, m: &str| CalibError::Format { path: name.into(), line, message: m.into() };
        let version: u32 = match lines.next() {
            Some((_, head)) => head
                .strip_prefix(TABLE_MAGIC)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| err(1, "missing calibration table header"))?,
            None => return Err(err(1, "empty file")),
        };
        if version > TABLE_VERSION {
            return Err(CalibError::FutureVersion(version));
        }
        let fields = if version == 1 { 3 } else { 4 };
        let mut entries = BTreeMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != fields {
                return Err(err(i + 1, &format!("expected {fields} fields")));
            }
            let bias: f64 = f[1].parse().map_err(|_| err(i + 1, "invalid bias"))?;
            if !bias.is_finite() {
                return Err(err(i + 1, "non-finite bias"));
            }
            let enabled: bool = f[2].parse().map_err(|_| err(i + 1, "invalid enabled flag"))?;
            let modified: u64 = if version == 1 { 0 } else { f[3].parse().map_err(|_| err(i + 1, "invalid stamp"))? };
            entries.insert(f[0].to_string(), TableEntry { bias, enabled, modified });
        }
        Ok(CalibrationTable { entries })
    }

    /// Writes through a temporary file and renames it over `path`.
    pub fn persist(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(self.render().as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub photo_id: String,
    pub tag: String,
    pub verdict: Verdict,
    pub timestamp: u64,
}

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JournalEvent {
    Judgment(Judgment),
    Bias { tag: String, bias: f64, timestamp: u64 },
    Enabled { tag: String, enabled: bool, timestamp: u64 },
}

/// Append-only JSON-lines log. Each event is one `write` of a complete
/// line on a file opened for appending.
#[derive(Debug)]
pub struct Journal {
    file: Mutex<File>,
    pub path: PathBuf,
}

impl Journal {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Journal { file: Mutex::new(file), path: path.to_path_buf() })
    }

    pub fn append(&self, event: &JournalEvent) -> Result<()> {
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        let mut f = self.file.lock();
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        Ok(())
    }

    /// Events in file order. A torn final line is ignored.
    pub fn replay(path: &Path) -> Result<Vec<JournalEvent>> {
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        let mut out = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(e) => out.push(e),
                Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => log::warn!("ignoring torn journal line {}", i + 1),
                Err(e) => {
                    return Err(CalibError::Format { path: path.display().to_string(), line: i + 1, message: e.to_string() })
                }
            }
        }
        Ok(out)
    }
}

/// Latest verdict per `(photo, tag)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JudgmentLog {
    by_tag: BTreeMap<String, BTreeMap<String, Verdict>>,
}

impl JudgmentLog {
    pub fn record(&mut self, tag: &str, photo_id: &str, verdict: Verdict) {
        self.by_tag.entry(tag.to_string()).or_default().insert(photo_id.to_string(), verdict);
    }

    pub fn for_tag(&self, tag: &str) -> impl Iterator<Item = (&str, Verdict)> {
        self.by_tag.get(tag).into_iter().flatten().map(|(id, v)| (id.as_str(), *v))
    }

    pub fn count(&self, tag: &str) -> usize {
        self.by_tag.get(tag).map_or(0, BTreeMap::len)
    }
}

/// Photos of `tag` whose posterior under `bias` is nearest `p`, nearest
/// first; equal distances keep index order.
pub fn around_posterior(list: &[(String, f64)], bias: f64, p: f64, n: usize) -> Vec<(String, f64, f64)> {
    let dist = |i: usize| (posterior(list[i].1, bias) - p).abs();
    // first index whose logit is below the point where the posterior is p
    let target = logit(p) - bias;
    let split = list.partition_point(|(_, s)| *s >= target);
    let (mut up, mut down) = (split, split);
    let mut out = Vec::with_capacity(n.min(list.len()));
    while out.len() < n && (up > 0 || down < list.len()) {
        let take_up = match (up > 0, down < list.len()) {
            (true, true) => dist(up - 1) <= dist(down),
            (true, false) => true,
            _ => false,
        };
        let i = if take_up {
            up -= 1;
            up
        } else {
            down += 1;
            down - 1
        };
        out.push(i);
    }
    // take every item tied with the farthest one so index order decides
    if let Some(&last) = out.last() {
        let d = dist(last);
        while up > 0 && dist(up - 1) == d {
            up -= 1;
            out.push(up);
        }
        while down < list.len() && dist(down) == d {
            out.push(down);
            down += 1;
        }
    }
    // restore index order among equal distances
    out.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
    out.truncate(n);
    out.into_iter().map(|i| (list[i].0.clone(), list[i].1, posterior(list[i].1, bias))).collect()
}

pub const MIN_JUDGMENTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub bias: f64,
    /// Fraction of judged items in the window that are correct.
    pub window_precision: f64,
    /// Mean posterior of the judged items in the window.
    pub window_posterior: f64,
    pub judged_in_window: usize,
    /// The judgments never cross the target, so the bias sits at the end
    /// of the scanned range.
    pub unconstrained: bool,
}

/// Judged items sorted by logit with a running count of correct verdicts.
struct Judged {
    logits: Vec<f64>,
    correct_before: Vec<usize>,
    lo: f64,
    hi: f64,
}

impl Judged {
    /// Index range of items whose posterior under `b` lies in the window.
    fn members(&self, b: f64) -> std::ops::Range<usize> {
        let start = self.logits.partition_point(|&s| s < self.lo - b);
        let end = self.logits.partition_point(|&s| s <= self.hi - b);
        start..end.max(start)
    }

    fn precision(&self, r: &std::ops::Range<usize>) -> f64 {
        (self.correct_before[r.end] - self.correct_before[r.start]) as f64 / r.len() as f64
    }

    fn mean_posterior(&self, r: &std::ops::Range<usize>, b: f64) -> f64 {
        self.logits[r.clone()].iter().map(|&s| posterior(s, b)).sum::<f64>() / r.len() as f64
    }

    fn summary(&self, b: f64, unconstrained: bool) -> Suggestion {
        let r = self.members(b);
        let (prec, post) = if r.is_empty() { (0.0, 0.0) } else { (self.precision(&r), self.mean_posterior(&r, b)) };
        Suggestion { bias: b, window_precision: prec, window_posterior: post, judged_in_window: r.len(), unconstrained }
    }
}

/// Bias at which the judged items inside the posterior window
/// `[p - width, p + width]` are correct as often as their posteriors say.
///
/// Window membership changes only where an item's logit crosses a window
/// edge, so the scan visits each interval between those breakpoints. Within
/// an interval the correct fraction is fixed and the mean posterior rises
/// with the bias; a crossing inside an interval is located by bisection.
pub fn suggest_bias(judged: &[(f64, Verdict)], p: f64, width: f64) -> Result<Suggestion> {
    if !(width > 0.0 && p - width > 0.0 && p + width < 1.0) {
        return Err(CalibError::Invalid(format!("window {p} ± {width} must lie inside (0, 1)")));
    }
    if judged.len() < MIN_JUDGMENTS {
        return Err(CalibError::InsufficientJudgments { tag: String::new(), have: judged.len(), need: MIN_JUDGMENTS });
    }
    if judged.iter().any(|(s, _)| !s.is_finite()) {
        return Err(CalibError::Invalid("non-finite logit".into()));
    }
    let mut items: Vec<(f64, bool)> = judged.iter().map(|(s, v)| (*s, *v == Verdict::Correct)).collect();
    items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut correct_before = vec![0];
    for (_, ok) in &items {
        correct_before.push(correct_before.last().expect("non-empty") + *ok as usize);
    }
    let j = Judged {
        logits: items.iter().map(|i| i.0).collect(),
        correct_before,
        lo: logit(p - width),
        hi: logit(p + width),
    };
    let mut breaks: Vec<f64> = j.logits.iter().flat_map(|s| [j.lo - s, j.hi - s]).collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let (b_min, b_max) = (breaks[0], *breaks.last().expect("non-empty"));
    let correct = j.correct_before[items.len()];
    if correct == items.len() {
        return Ok(j.summary(b_max, true));
    }
    if correct == 0 {
        return Ok(j.summary(b_min, true));
    }
    let mut roots: Vec<(usize, f64)> = Vec::new();
    let mut closest: Option<(f64, usize, f64)> = None;
    for w in breaks.windows(2) {
        let (a, c) = (w[0], w[1]);
        let mid = 0.5 * (a + c);
        let r = j.members(mid);
        if r.is_empty() {
            continue;
        }
        let prec = j.precision(&r);
        let gap = |b: f64| prec - j.mean_posterior(&r, b);
        if gap(a) >= 0.0 && gap(c) <= 0.0 {
            let (mut lo, mut hi) = (a, c);
            for _ in 0..100 {
                let m = 0.5 * (lo + hi);
                if gap(m) > 0.0 {
                    lo = m;
                } else {
                    hi = m;
                }
            }
            roots.push((r.len(), 0.5 * (lo + hi)));
        }
        let g = gap(mid).abs();
        if closest.is_none_or(|(best, n, _)| g < best || (g == best && r.len() > n)) {
            closest = Some((g, r.len(), mid));
        }
    }
    // the crossing seen by the most judged items, lowest bias on ties
    let chosen = roots.iter().max_by(|x, y| x.0.cmp(&y.0).then(y.1.total_cmp(&x.1))).map(|r| r.1);
    let b = chosen.or(closest.map(|c| c.2)).expect("both verdicts present so some window is non-empty");
    Ok(j.summary(b, false))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Half-width of the posterior window used for suggestions.
    pub window: f64,
    pub default_n: usize,
    pub max_n: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { window: 0.05, default_n: 20, max_n: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPhoto {
    pub photo_id: String,
    pub logit: f64,
    pub posterior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub tag: String,
    pub bias: f64,
    pub enabled: bool,
    pub modified: u64,
    pub photos: usize,
    pub judgments: usize,
}

/// Shared state behind the HTTP API. Each tag's entry has its own lock;
/// the table file is rewritten after every change.
pub struct CalibrationService {
    index: ScoreIndex,
    entries: BTreeMap<String, RwLock<TableEntry>>,
    judgments: RwLock<JudgmentLog>,
    persist_lock: Mutex<()>,
    pub table_path: Option<PathBuf>,
    journal: Option<Journal>,
    pub photo_root: Option<PathBuf>,
    pub config: ServiceConfig,
}

impl CalibrationService {
    /// Tags in `table` that are not in `index` are dropped; tags missing
    /// from `table` get the default entry.
    pub fn new(index: ScoreIndex, table: CalibrationTable, config: ServiceConfig) -> Self {
        let entries = index
            .tags()
            .map(|t| (t.to_string(), RwLock::new(table.entries.get(t).copied().unwrap_or_default())))
            .collect();
        CalibrationService {
            index,
            entries,
            judgments: RwLock::new(JudgmentLog::default()),
            persist_lock: Mutex::new(()),
            table_path: None,
            journal: None,
            photo_root: None,
            config,
        }
    }

    /// Opens the table at `table_path` (created if absent) and replays the
    /// journal at `journal_path` for judgments.
    pub fn open(index: ScoreIndex, table_path: &Path, journal_path: &Path, config: ServiceConfig) -> Result<Self> {
        let table = if table_path.exists() { CalibrationTable::load(table_path)? } else { CalibrationTable::default() };
        let mut svc = CalibrationService::new(index, table, config);
        {
            let mut log = svc.judgments.write();
            for event in Journal::replay(journal_path)? {
                if let JournalEvent::Judgment(j) = event {
                    if svc.entries.contains_key(&j.tag) {
                        log.record(&j.tag, &j.photo_id, j.verdict);
                    }
                }
            }
        }
        svc.journal = Some(Journal::open(journal_path)?);
        svc.table_path = Some(table_path.to_path_buf());
        svc.persist()?;
        Ok(svc)
    }

    pub fn with_photo_root(mut self, root: Option<PathBuf>) -> Self {
        self.photo_root = root;
        self
    }

    fn entry(&self, tag: &str) -> Result<&RwLock<TableEntry>> {
        self.entries.get(tag).ok_or_else(|| CalibError::UnknownTag(tag.to_string()))
    }

    fn enabled_entry(&self, tag: &str) -> Result<TableEntry> {
        let e = *self.entry(tag)?.read();
        if !e.enabled {
            return Err(CalibError::Disabled(tag.to_string()));
        }
        Ok(e)
    }

    pub fn table(&self) -> CalibrationTable {
        CalibrationTable { entries: self.entries.iter().map(|(t, e)| (t.clone(), *e.read())).collect() }
    }

    pub fn persist(&self) -> Result<()> {
        if let Some(path) = &self.table_path {
            let _guard = self.persist_lock.lock();
            self.table().persist(path)?;
        }
        Ok(())
    }

    fn journal(&self, event: JournalEvent) -> Result<()> {
        match &self.journal {
            Some(j) => j.append(&event),
            None => Ok(()),
        }
    }

    pub fn classes(&self) -> Vec<ClassInfo> {
        let log = self.judgments.read();
        self.entries
            .iter()
            .map(|(tag, e)| {
                let e = *e.read();
                ClassInfo {
                    tag: tag.clone(),
                    bias: e.bias,
                    enabled: e.enabled,
                    modified: e.modified,
                    photos: self.index.list(tag).map_or(0, <[_]>::len),
                    judgments: log.count(tag),
                }
            })
            .collect()
    }

    fn check_n(&self, n: Option<usize>) -> Result<usize> {
        let n = n.unwrap_or(self.config.default_n);
        if n == 0 || n > self.config.max_n {
            return Err(CalibError::Invalid(format!("n must be in 1..={}", self.config.max_n)));
        }
        Ok(n)
    }

    /// Highest-logit photos; the order does not depend on the bias.
    pub fn top(&self, tag: &str, n: Option<usize>) -> Result<Vec<ScoredPhoto>> {
        let e = self.enabled_entry(tag)?;
        let n = self.check_n(n)?;
        Ok(self.index.list(tag)?
            .iter()
            .take(n)
            .map(|(id, s)| ScoredPhoto { photo_id: id.clone(), logit: *s, posterior: posterior(*s, e.bias) })
            .collect())
    }

    pub fn around(&self, tag: &str, p: f64, n: Option<usize>) -> Result<Vec<ScoredPhoto>> {
        let e = self.enabled_entry(tag)?;
        if !(p > 0.0 && p < 1.0) {
            return Err(CalibError::Invalid("p must be in (0, 1)".into()));
        }
        let n = self.check_n(n)?;
        Ok(around_posterior(self.index.list(tag)?, e.bias, p, n)
            .into_iter()
            .map(|(photo_id, logit, posterior)| ScoredPhoto { photo_id, logit, posterior })
            .collect())
    }

    pub fn set_bias(&self, tag: &str, bias: f64) -> Result<TableEntry> {
        if !bias.is_finite() {
            return Err(CalibError::Invalid("bias must be finite".into()));
        }
        let timestamp = now();
        let updated = {
            let mut e = self.entry(tag)?.write();
            e.bias = bias;
            e.modified = timestamp;
            *e
        };
        self.journal(JournalEvent::Bias { tag: tag.to_string(), bias, timestamp })?;
        self.persist()?;
        Ok(updated)
    }

    pub fn set_enabled(&self, tag: &str, enabled: bool) -> Result<TableEntry> {
        let timestamp = now();
        let updated = {
            let mut e = self.entry(tag)?.write();
            e.enabled = enabled;
            e.modified = timestamp;
            *e
        };
        self.journal(JournalEvent::Enabled { tag: tag.to_string(), enabled, timestamp })?;
        self.persist()?;
        Ok(updated)
    }

    pub fn judge(&self, tag: &str, photo_id: &str, verdict: Verdict) -> Result<Judgment> {
        self.entry(tag)?;
        self.index.logit_of(tag, photo_id)?;
        let j = Judgment { photo_id: photo_id.to_string(), tag: tag.to_string(), verdict, timestamp: now() };
        self.journal(JournalEvent::Judgment(j.clone()))?;
        self.judgments.write().record(tag, photo_id, verdict);
        Ok(j)
    }

    pub fn suggest(&self, tag: &str, p: f64) -> Result<Suggestion> {
        self.entry(tag)?;
        let list = self.index.list(tag)?;
        let logits: HashMap<&str, f64> = list.iter().map(|(id, s)| (id.as_str(), *s)).collect();
        let judged: Vec<(f64, Verdict)> =
            self.judgments.read().for_tag(tag).filter_map(|(id, v)| logits.get(id).map(|s| (*s, v))).collect();
        suggest_bias(&judged, p, self.config.window).map_err(|e| match e {
            CalibError::InsufficientJudgments { have, need, .. } => {
                CalibError::InsufficientJudgments { tag: tag.to_string(), have, need }
            }
            e => e,
        })
    }

    /// Encoded image bytes and content type for `photo_id`.
    pub fn photo(&self, photo_id: &str) -> Result<(Vec<u8>, &'static str)> {
        let root = self.photo_root.as_ref().ok_or_else(|| CalibError::UnknownPhoto(photo_id.to_string()))?;
        if !valid_photo_id(photo_id) {
            return Err(CalibError::UnknownPhoto(photo_id.to_string()));
        }
        let path = crate::imagefolder::find_image(root, photo_id).ok_or_else(|| CalibError::UnknownPhoto(photo_id.to_string()))?;
        let kind = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) { "image/png" } else { "image/jpeg" };
        Ok((fs::read(path)?, kind))
    }
}

pub mod http {
    //! JSON routes over [`CalibrationService`].

    use super::*;
    use axum::extract::{Path as UrlPath, Query, State};
    use axum::http::{header, StatusCode};
    use axum::response::{IntoResponse, Response};
    use axum::routing::{get, post};
    use axum::{Json, Router};

    impl IntoResponse for CalibError {
        fn into_response(self) -> Response {
            let status = match &self {
                CalibError::UnknownTag(_) | CalibError::UnknownPhoto(_) => StatusCode::NOT_FOUND,
                CalibError::Disabled(_) => StatusCode::CONFLICT,
                CalibError::Invalid(_) => StatusCode::BAD_REQUEST,
                CalibError::InsufficientJudgments { .. } => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            };
            (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
        }
    }

    type Svc = State<Arc<CalibrationService>>;

    #[derive(Deserialize)]
    struct TopQuery {
        n: Option<usize>,
    }

    #[derive(Deserialize)]
    struct AroundQuery {
        p: f64,
        n: Option<usize>,
    }

    #[derive(Deserialize)]
    struct SuggestQuery {
        p: Option<f64>,
    }

    #[derive(Deserialize)]
    struct BiasBody {
        bias: f64,
    }

    #[derive(Deserialize)]
    struct EnabledBody {
        flag: bool,
    }

    #[derive(Deserialize)]
    struct JudgmentBody {
        photo_id: String,
        verdict: Verdict,
    }

    #[derive(Serialize)]
    struct EntryReply {
        tag: String,
        #[serde(flatten)]
        entry: TableEntry,
    }

    async fn classes(State(s): Svc) -> Json<Vec<ClassInfo>> {
        Json(s.classes())
    }

    async fn top(State(s): Svc, UrlPath(tag): UrlPath<String>, Query(q): Query<TopQuery>) -> Result<Json<Vec<ScoredPhoto>>> {
        s.top(&tag, q.n).map(Json)
    }

    async fn around(State(s): Svc, UrlPath(tag): UrlPath<String>, Query(q): Query<AroundQuery>) -> Result<Json<Vec<ScoredPhoto>>> {
        s.around(&tag, q.p, q.n).map(Json)
    }

    async fn bias(State(s): Svc, UrlPath(tag): UrlPath<String>, Json(b): Json<BiasBody>) -> Result<Json<EntryReply>> {
        let entry = s.set_bias(&tag, b.bias)?;
        Ok(Json(EntryReply { tag, entry }))
    }

    async fn enabled(State(s): Svc, UrlPath(tag): UrlPath<String>, Json(b): Json<EnabledBody>) -> Result<Json<EntryReply>> {
        let entry = s.set_enabled(&tag, b.flag)?;
        Ok(Json(EntryReply { tag, entry }))
    }

    async fn judgments(State(s): Svc, UrlPath(tag): UrlPath<String>, Json(b): Json<JudgmentBody>) -> Result<Json<Judgment>> {
        s.judge(&tag, &b.photo_id, b.verdict).map(Json)
    }

    async fn suggest(State(s): Svc, UrlPath(tag): UrlPath<String>, Query(q): Query<SuggestQuery>) -> Result<Json<Suggestion>> {
        let p = q.p.unwrap_or(0.9);
        s.suggest(&tag, p).map(Json)
    }

    async fn photo(State(s): Svc, UrlPath(id): UrlPath<String>) -> Result<Response> {
        let (bytes, kind) = s.photo(&id)?;
        Ok(([(header::CONTENT_TYPE, kind)], bytes).into_response())
    }

    pub fn router(service: Arc<CalibrationService>) -> Router {
        Router::new()
            .route("/classes", get(classes))
            .route("/classes/{tag}/top", get(top))
            .route("/classes/{tag}/around", get(around))
            .route("/classes/{tag}/bias", post(bias))
            .route("/classes/{tag}/enabled", post(enabled))
            .route("/classes/{tag}/judgments", post(judgments))
            .route("/classes/{tag}/suggest", get(suggest))
            .route("/photos/{id}", get(photo))
            .with_state(service)
    }
}
