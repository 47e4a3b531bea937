//! Average precision and mAP.
//!
//! AP is the non-interpolated form: rank items by descending score (equal
//! scores keep their input order) and average the precision at the rank of
//! each relevant item. Tags without any relevant item are left out of mAP.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no relevant items")]
    NoRelevant,
    #[error("scores and relevance differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("non-finite score")]
    NonFinite,
    #[error("k must be in 1..={max}, got {k}")]
    BadK { k: usize, max: usize },
    #[error("no tag with relevant items to average over")]
    EmptyTagSet,
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error("duplicate score for item `{item}` and tag `{tag}`")]
    Duplicate { item: String, tag: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps input order among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

fn check(scores: &[f64], relevance: &[bool]) -> Result<(), EvalError> {
    if scores.len() != relevance.len() {
        return Err(EvalError::Length(scores.len(), relevance.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(())
}

pub fn average_precision(scores: &[f64], relevance: &[bool]) -> Result<f64, EvalError> {
    check(scores, relevance)?;
    let total = relevance.iter().filter(|&&r| r).count();
    average_precision_with_total(scores, relevance, total)
}

/// AP where `total_relevant` may exceed the relevant items present in the
/// list; unscored relevant items contribute zero precision.
pub fn average_precision_with_total(scores: &[f64], relevance: &[bool], total_relevant: usize) -> Result<f64, EvalError> {
    check(scores, relevance)?;
    if total_relevant == 0 {
        return Err(EvalError::NoRelevant);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, idx) in ranking(scores).into_iter().enumerate() {
        if relevance[idx] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total_relevant as f64)
}

pub fn precision_at_k(scores: &[f64], relevance: &[bool], k: usize) -> Result<f64, EvalError> {
    check(scores, relevance)?;
    if k == 0 || k > scores.len() {
        return Err(EvalError::BadK { k, max: scores.len() });
    }
    let hits = ranking(scores).into_iter().take(k).filter(|&i| relevance[i]).count();
    Ok(hits as f64 / k as f64)
}

/// Scores per tag plus ground-truth positives per tag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedPredictions {
    pub scores: BTreeMap<String, Vec<(String, f64)>>,
    pub truth: BTreeMap<String, BTreeSet<String>>,
}

impl RankedPredictions {
    pub fn add_score(&mut self, item: &str, tag: &str, score: f64) {
        self.scores.entry(tag.to_string()).or_default().push((item.to_string(), score));
    }

    pub fn add_truth(&mut self, item: &str, tag: &str) {
        self.truth.entry(tag.to_string()).or_default().insert(item.to_string());
    }

    /// AP of one tag, `None` when the tag has no positives.
    pub fn tag_ap(&self, tag: &str) -> Result<Option<f64>, EvalError> {
        let positives = match self.truth.get(tag) {
            Some(p) if !p.is_empty() => p,
            _ => return Ok(None),
        };
        let list = self.scores.get(tag).map(Vec::as_slice).unwrap_or(&[]);
        let scores: Vec<f64> = list.iter().map(|(_, s)| *s).collect();
        let relevance: Vec<bool> = list.iter().map(|(item, _)| positives.contains(item)).collect();
        average_precision_with_total(&scores, &relevance, positives.len()).map(Some)
    }

    /// Per-tag AP for every tag with at least one positive.
    pub fn per_tag_ap(&self, subset: Option<&BTreeSet<String>>) -> Result<BTreeMap<String, f64>, EvalError> {
        let tags: Vec<&String> = match subset {
            Some(s) => {
                for tag in s {
                    if !self.scores.contains_key(tag) && !self.truth.contains_key(tag) {
                        return Err(EvalError::UnknownTag(tag.clone()));
                    }
                }
                s.iter().collect()
            }
            None => self.scores.keys().chain(self.truth.keys()).collect::<BTreeSet<_>>().into_iter().collect(),
        };
        let mut out = BTreeMap::new();
        for tag in tags {
            if let Some(ap) = self.tag_ap(tag)? {
                out.insert(tag.clone(), ap);
            }
        }
        Ok(out)
    }
}

/// Unweighted mean of per-tag AP over tags with positives, optionally
/// restricted to `subset`.
pub fn mean_ap(preds: &RankedPredictions, subset: Option<&BTreeSet<String>>) -> Result<f64, EvalError> {
    let aps = preds.per_tag_ap(subset)?;
    if aps.is_empty() {
        return Err(EvalError::EmptyTagSet);
    }
    Ok(aps.values().sum::<f64>() / aps.len() as f64)
}

/// mAP over a dense score matrix (`scores[item][class]`) and label sets.
pub fn dense_mean_ap(scores: &[Vec<f64>], truth: &[Vec<bool>]) -> Result<f64, EvalError> {
    let classes = scores.first().map_or(0, Vec::len);
    let mut sum = 0.0;
    let mut used = 0;
    for c in 0..classes {
        let col: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let rel: Vec<bool> = truth.iter().map(|row| row[c]).collect();
        match average_precision(&col, &rel) {
            Ok(ap) => {
                sum += ap;
                used += 1;
            }
            Err(EvalError::NoRelevant) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(EvalError::EmptyTagSet);
    }
    Ok(sum / used as f64)
}

fn fields(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// Reads `item tag score` lines (tab or whitespace separated; `#` starts a
/// comment line) and `item tag` ground-truth lines.
pub fn read_predictions(
    pred: impl BufRead,
    pred_name: &str,
    truth: impl BufRead,
    truth_name: &str,
) -> Result<RankedPredictions, EvalError> {
    let mut out = RankedPredictions::default();
    let mut seen: HashMap<(String, String), ()> = HashMap::new();
    for (i, line) in pred.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f = fields(&line);
        let err = |message: &str| EvalError::Format { path: pred_name.into(), line: i + 1, message: message.into() };
        if f.len() != 3 {
            return Err(err("expected `item tag score`"));
        }
        let score: f64 = f[2].parse().map_err(|_| err("invalid score"))?;
        if !score.is_finite() {
            return Err(err("non-finite score"));
        }
        if seen.insert((f[0].to_string(), f[1].to_string()), ()).is_some() {
            return Err(EvalError::Duplicate { item: f[0].into(), tag: f[1].into() });
        }
        out.add_score(f[0], f[1], score);
    }
    for (i, line) in truth.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f = fields(&line);
        if f.len() != 2 {
            return Err(EvalError::Format { path: truth_name.into(), line: i + 1, message: "expected `item tag`".into() });
        }
        out.add_truth(f[0], f[1]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_mixed_rankings() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.5, 0.1], &[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.3], &[true]).unwrap(), 1.0);
        assert!(matches!(average_precision(&[0.3], &[false]), Err(EvalError::NoRelevant)));
        assert!(matches!(average_precision(&[0.3], &[]), Err(EvalError::Length(1, 0))));
    }

    #[test]
    fn ties_follow_input_order() {
        // relevant item listed second among equals ranks second
        let ap = average_precision(&[0.5, 0.5], &[false, true]).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn precision_at_k_cases() {
        let s = [0.9, 0.2, 0.5, 0.1];
        let r = [true, false, false, true];
        assert_eq!(precision_at_k(&s, &r, 1).unwrap(), 1.0);
        assert_eq!(precision_at_k(&s, &r, 4).unwrap(), 0.5);
        assert_eq!(precision_at_k(&s, &r, 2).unwrap(), 0.5);
        assert!(precision_at_k(&s, &r, 0).is_err());
        assert!(precision_at_k(&s, &r, 5).is_err());
    }

    #[test]
    fn mean_ap_cases() {
        let mut p = RankedPredictions::default();
        p.add_score("a", "cat", 0.9);
        p.add_score("b", "cat", 0.1);
        p.add_truth("a", "cat");
        assert_eq!(mean_ap(&p, None).unwrap(), 1.0);
        p.add_score("a", "dog", 0.9);
        p.add_score("b", "dog", 0.1);
        p.add_truth("b", "dog");
        assert_eq!(mean_ap(&p, None).unwrap(), 0.75);
        let only_dog: BTreeSet<String> = ["dog".to_string()].into();
        assert_eq!(mean_ap(&p, Some(&only_dog)).unwrap(), 0.5);
        // a tag without positives is excluded
        p.add_score("a", "owl", 0.3);
        assert_eq!(mean_ap(&p, None).unwrap(), 0.75);
        let owl: BTreeSet<String> = ["owl".to_string()].into();
        assert!(matches!(mean_ap(&p, Some(&owl)), Err(EvalError::EmptyTagSet)));
        let ghost: BTreeSet<String> = ["ghost".to_string()].into();
        assert!(matches!(mean_ap(&p, Some(&ghost)), Err(EvalError::UnknownTag(_))));
    }

    #[test]
    fn unscored_positive_counts_against_ap() {
        let mut p = RankedPredictions::default();
        p.add_score("a", "cat", 0.9);
        p.add_truth("a", "cat");
        p.add_truth("z", "cat");
        assert_eq!(mean_ap(&p, None).unwrap(), 0.5);
    }

    #[test]
    fn reads_files() {
        let pred = "a\tcat\t0.9\nb\tcat\t0.2\n# comment\n\nb dog 0.4\n";
        let truth = "a\tcat\nb dog\n";
        let p = read_predictions(pred.as_bytes(), "pred", truth.as_bytes(), "truth").unwrap();
        assert_eq!(mean_ap(&p, None).unwrap(), 1.0);
        let bad = read_predictions("a cat x\n".as_bytes(), "pred", "".as_bytes(), "truth");
        assert!(matches!(bad, Err(EvalError::Format { line: 1, .. })));
        let dup = read_predictions("a cat 1\na cat 2\n".as_bytes(), "pred", "".as_bytes(), "truth");
        assert!(matches!(dup, Err(EvalError::Duplicate { .. })));
    }
}
