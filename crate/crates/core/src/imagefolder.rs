//! Images on disk named `{photo_id}.{png,jpg,jpeg}`, optionally labelled
//! from a training-set or tag-list file.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use crate::multilabel::LabelSet;
use crate::network::{rgb_to_tensor, Dataset, NetworkError, Result};
use crate::tensor::Tensor;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Photo ids may only use these characters, so an id never names a path
/// outside the corpus directory.
pub fn valid_photo_id(id: &str) -> bool {
    !id.is_empty() && !id.starts_with('.') && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

/// Path of the image for `id` under `root`, if one exists.
pub fn find_image(root: &Path, id: &str) -> Option<PathBuf> {
    if !valid_photo_id(id) {
        return None;
    }
    IMAGE_EXTENSIONS.iter().map(|ext| root.join(format!("{id}.{ext}"))).find(|p| p.is_file())
}

/// Decodes `path` and resizes it to `size×size` RGB.
pub fn load_rgb(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| NetworkError::Image { path: path.display().to_string(), message: e.to_string() })?;
    let rgb = image::imageops::resize(&img.to_rgb8(), size as u32, size as u32, image::imageops::FilterType::Triangle);
    Ok(rgb_to_tensor(rgb.as_raw(), size, size)?)
}

#[derive(Debug, Clone)]
pub struct ImageFolder {
    pub root: PathBuf,
    /// Side length images are resized to before cropping.
    pub base: usize,
    pub ids: Vec<String>,
    paths: Vec<PathBuf>,
    labels: Vec<LabelSet>,
}

impl ImageFolder {
    /// Every image in `root`, sorted by photo id, unlabelled.
    pub fn open(root: &Path, base: usize) -> Result<Self> {
        let mut found: BTreeMap<String, PathBuf> = BTreeMap::new();
        for entry in fs::read_dir(root)? {
            let path = entry?.path();
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            let stem = path.file_stem().and_then(|s| s.to_str()).map(str::to_string);
            if let (Some(ext), Some(stem)) = (ext, stem) {
                if IMAGE_EXTENSIONS.contains(&ext.as_str()) && valid_photo_id(&stem) {
                    found.entry(stem).or_insert(path);
                }
            }
        }
        let (ids, paths): (Vec<String>, Vec<PathBuf>) = found.into_iter().unzip();
        let labels = vec![LabelSet::default(); ids.len()];
        Ok(ImageFolder { root: root.to_path_buf(), base, ids, paths, labels })
    }

    /// Attaches labels. `text` holds either `tag, rank, photo_id, score`
    /// lines (a built training set) or `photo_id, tag[,tag...]` lines; tags
    /// outside `vocab` are ignored.
    pub fn with_labels(mut self, text: &str, vocab: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let mut per_photo: HashMap<String, Vec<usize>> = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let (photo, tags): (&str, Vec<&str>) = match f.len() {
                4 => (f[2], vec![f[0]]),
                2 => (f[0], f[1].split(',').collect()),
                _ => return Err(NetworkError::Config(format!("labels line {}: expected 2 or 4 tab-separated fields", n + 1))),
            };
            let entry = per_photo.entry(photo.trim().to_string()).or_default();
            entry.extend(tags.into_iter().filter_map(|t| index.get(crate::tagselect::normalize_tag(t).as_str()).copied()));
        }
        for (i, id) in self.ids.iter().enumerate() {
            if let Some(tags) = per_photo.get(id) {
                self.labels[i] = LabelSet::new(tags.iter().copied());
            }
        }
        Ok(self)
    }

    pub fn path(&self, i: usize) -> &Path {
        &self.paths[i]
    }

    pub fn labelled(&self) -> usize {
        self.labels.iter().filter(|l| !l.is_empty()).count()
    }
}

impl Dataset for ImageFolder {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn image(&self, i: usize) -> Result<Tensor<f32>> {
        load_rgb(&self.paths[i], self.base)
    }

    fn labels(&self, i: usize) -> &LabelSet {
        &self.labels[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, value: u8) {
        image::RgbImage::from_pixel(8, 6, image::Rgb([value, 0, 0])).save(path).unwrap();
    }

    #[test]
    fn lists_and_labels_images() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("b2.png"), 10);
        write_png(&dir.path().join("a1.png"), 255);
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let vocab = vec!["cat".to_string(), "dog".to_string()];
        let folder = ImageFolder::open(dir.path(), 4)
            .unwrap()
            .with_labels("dog\t1\tb2\t0.5\ncat\t1\tb2\t0.7\na1\tCat,owl\n", &vocab)
            .unwrap();
        assert_eq!(folder.ids, ["a1", "b2"]);
        assert_eq!(folder.labels(0).positives(), [0]);
        assert_eq!(folder.labels(1).positives(), [0, 1]);
        let img = folder.image(0).unwrap();
        assert_eq!(img.shape(), [3, 4, 4]);
        assert!((img.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ids_cannot_escape_root() {
        assert!(!valid_photo_id("../etc/passwd"));
        assert!(!valid_photo_id(".hidden"));
        assert!(!valid_photo_id(""));
        assert!(valid_photo_id("12345_b.x"));
        assert!(find_image(Path::new("/"), "..").is_none());
    }
}
