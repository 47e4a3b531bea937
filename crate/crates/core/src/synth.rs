//! Generated corpora: a multilabel shapes image set for desk-scale training
//! and photo metadata records for the tag pipeline.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calibsvc::Verdict;
use crate::multilabel::{posterior, LabelSet};
use crate::network::{rgb_to_tensor, Dataset, Result};
use crate::tagselect::PhotoRecord;
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 8] = ["disk", "square", "triangle", "ring", "plus", "hbar", "vbar", "frame"];

/// RGB images with the set of shape classes drawn on each.
#[derive(Debug, Clone)]
pub struct ShapesCorpus {
    pub size: usize,
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<LabelSet>,
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    class: usize,
    cy: f64,
    cx: f64,
    r: f64,
}

fn inside(s: &Placed, y: f64, x: f64) -> bool {
    let (dy, dx) = (y - s.cy, x - s.cx);
    let r = s.r;
    match s.class {
        0 => dy * dy + dx * dx <= r * r,
        1 => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
        2 => {
            // apex up, base at cy + r
            let t = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        3 => {
            let d = dy * dy + dx * dx;
            d <= r * r && d >= (0.55 * r) * (0.55 * r)
        }
        4 => (dy.abs() <= 0.3 * r && dx.abs() <= r) || (dx.abs() <= 0.3 * r && dy.abs() <= r),
        5 => dy.abs() <= 0.4 * r && dx.abs() <= r,
        6 => dx.abs() <= 0.4 * r && dy.abs() <= r,
        _ => {
            let (ay, ax) = (dy.abs(), dx.abs());
            ay <= r * 0.85 && ax <= r * 0.85 && (ay >= r * 0.5 || ax >= r * 0.5)
        }
    }
}

#[cfg(test)]
fn contrast(a: [u8; 3], b: [u8; 3]) -> u32 {
    a.iter().zip(&b).map(|(&x, &y)| (x as i32 - y as i32).unsigned_abs()).sum()
}

impl ShapesCorpus {
    /// `count` images of `size×size` with one or two distinct shapes each.
    pub fn generate(count: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let classes: Vec<usize> = (0..SHAPE_NAMES.len()).collect();
        for _ in 0..count {
            let n = rng.gen_range(1..=2);
            let chosen: Vec<usize> = classes.choose_multiple(&mut rng, n).copied().collect();
            let bg = [rng.gen_range(0..90), rng.gen_range(0..90), rng.gen_range(0..90)];
            let min_r = size as f64 * 0.21;
            let max_r = size as f64 * 0.29;
            let margin = size as f64 * 0.02;
            let mut placed: Vec<(Placed, [u8; 3])> = Vec::new();
            for &class in &chosen {
                let mut best = None;
                for _ in 0..30 {
                    let r = rng.gen_range(min_r..max_r);
                    let lo = r + margin;
                    let hi = size as f64 - r - margin;
                    let s = Placed { class, cy: rng.gen_range(lo..hi), cx: rng.gen_range(lo..hi), r };
                    let clear = placed.iter().all(|(p, _)| {
                        let d = ((p.cy - s.cy).powi(2) + (p.cx - s.cx).powi(2)).sqrt();
                        d >= p.r + s.r
                    });
                    best = Some(s);
                    if clear {
                        break;
                    }
                }
                let fg = [rng.gen_range(150..=255), rng.gen_range(150..=255), rng.gen_range(150..=255)];
                placed.push((best.expect("at least one attempt"), fg));
            }
            let mut img = vec![0u8; size * size * 3];
            for y in 0..size {
                for x in 0..size {
                    let mut px = bg;
                    for (s, fg) in &placed {
                        if inside(s, y as f64 + 0.5, x as f64 + 0.5) {
                            px = *fg;
                        }
                    }
                    let o = (y * size + x) * 3;
                    img[o..o + 3].copy_from_slice(&px);
                }
            }
            images.push(img);
            labels.push(LabelSet::new(chosen));
        }
        ShapesCorpus { size, images, labels }
    }

    /// A copy whose positives are each deleted with probability `drop`.
    pub fn with_missing_labels(&self, drop: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = self.labels.iter().map(|l| l.thin(drop, &mut rng)).collect();
        ShapesCorpus { size: self.size, images: self.images.clone(), labels }
    }
}

impl Dataset for ShapesCorpus {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn image(&self, i: usize) -> Result<Tensor<f32>> {
        Ok(rgb_to_tensor(&self.images[i], self.size, self.size)?)
    }

    fn labels(&self, i: usize) -> &LabelSet {
        &self.labels[i]
    }
}

/// Common tags, most popular first.
const COMMON_TAGS: [&str; 16] = [
    "sunset", "beach", "water", "sky", "nature", "clouds", "tree", "flower",
    "snow", "dog", "cat", "bird", "park", "bridge", "night", "portrait",
];

/// Tags the rule fixtures exclude, one per category plus a manual drop.
const RULE_TAGS: [&str; 6] = ["2014", "london", "chien", "nsfw", "iphone", "2013"];

const FILLER: [&str; 10] = ["my", "the", "a", "trip", "day", "view", "lovely", "old", "new", "with"];

/// Photo metadata where a handful of accounts post most square-format
/// photos, so `square` leads by photo count while common tags lead by user
/// count.
pub fn metadata_records(count: usize, seed: u64) -> Vec<PhotoRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heavy = ["u9001", "u9002", "u9003"];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut tags: Vec<String> = Vec::new();
        let user = if i % 10 < 3 {
            tags.push("square".into());
            tags.push("square+format".into());
            heavy[rng.gen_range(0..heavy.len())].to_string()
        } else {
            format!("u{:04}", rng.gen_range(0..400))
        };
        for _ in 0..rng.gen_range(1..=3) {
            // popularity falls off with the index
            let k = (rng.gen::<f64>().powf(1.3) * COMMON_TAGS.len() as f64) as usize;
            tags.push(COMMON_TAGS[k].into());
        }
        if rng.gen_bool(0.15) {
            tags.push(RULE_TAGS[rng.gen_range(0..RULE_TAGS.len())].into());
        }
        let mut seen = std::collections::HashSet::new();
        tags.retain(|t| seen.insert(t.clone()));
        let words = |n: usize, rng: &mut ChaCha8Rng| -> String {
            (0..n)
                .map(|_| if rng.gen_bool(0.4) { tags[rng.gen_range(0..tags.len())].replace('+', " ") } else { FILLER[rng.gen_range(0..FILLER.len())].to_string() })
                .collect::<Vec<_>>()
                .join(" ")
        };
        let title = words(rng.gen_range(1..=4), &mut rng);
        let description = if rng.gen_bool(0.5) { words(rng.gen_range(3..=10), &mut rng) } else { String::new() };
        out.push(PhotoRecord { photo_id: format!("{}", 100_000 + i), user_id: user, title, description, tags });
    }
    out.shuffle(&mut rng);
    out
}

/// Judged items with logits evenly spaced on `[lo, hi]` whose verdicts
/// follow the posterior under `bias`: error diffusion makes every run of
/// consecutive items correct in proportion to its mean posterior, give or
/// take one item.
pub fn calibrated_judgments(count: usize, lo: f64, hi: f64, bias: f64) -> Vec<(f64, Verdict)> {
    let mut carry = 0.0;
    (0..count)
        .map(|i| {
            let s = lo + (hi - lo) * i as f64 / (count - 1).max(1) as f64;
            carry += posterior(s, bias);
            let verdict = if carry >= 0.5 {
                carry -= 1.0;
                Verdict::Correct
            } else {
                Verdict::Incorrect
            };
            (s, verdict)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labelled() {
        let a = ShapesCorpus::generate(20, 32, 4);
        let b = ShapesCorpus::generate(20, 32, 4);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert!(a.labels.iter().all(|l| (1..=2).contains(&l.len())));
    }

    #[test]
    fn shapes_are_visible() {
        let c = ShapesCorpus::generate(10, 48, 9);
        for img in &c.images {
            let first = &img[..3];
            let differing = img.chunks(3).filter(|p| contrast([p[0], p[1], p[2]], [first[0], first[1], first[2]]) > 100).count();
            assert!(differing > 48 * 48 / 50);
        }
    }

    #[test]
    fn thinning_drops_about_half() {
        let c = ShapesCorpus::generate(400, 16, 1);
        let t = c.with_missing_labels(0.5, 2);
        let before: usize = c.labels.iter().map(LabelSet::len).sum();
        let after: usize = t.labels.iter().map(LabelSet::len).sum();
        let frac = after as f64 / before as f64;
        assert!((0.42..0.58).contains(&frac), "{frac}");
        assert!(t.labels.iter().zip(&c.labels).all(|(a, b)| a.positives().iter().all(|p| b.contains(*p))));
    }
}
