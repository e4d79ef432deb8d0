//! On-disk datasets: `images/NNNN.png` (RGB), `labels/NNNN.png` (class ids
//! as 8-bit gray) and `manifest.tsv`. Edge masks are derived on load.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::config::DataConfig;
use crate::error::{config_err, Error, Result};
use crate::synthetic::{dataset_manifest, render_manifest, ManifestEntry, Sample, Split, NUM_CLASSES};
use crate::tensor::{LabelMap, Tensor};

const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "index\tseed\tsplit\texpression";

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn file_name(index: usize) -> String {
    format!("{index:04}.png")
}

/// `1 x 3 x H x W` tensor in [0, 1] to an 8-bit RGB image.
pub fn tensor_to_rgb(t: &Tensor) -> RgbImage {
    let plane = t.plane_len();
    RgbImage::from_fn(t.w as u32, t.h as u32, |x, y| {
        let i = y as usize * t.w + x as usize;
        let px = |c: usize| (t.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(1, 3, h, w);
    let plane = h * w;
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            t.data[c * plane + i] = p.0[c] as f64 / 255.0;
        }
    }
    t
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(labels.w as u32, labels.h as u32, labels.data.clone())
        .expect("label buffer matches its dimensions");
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn load_labels(path: &Path, classes: usize) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw();
    if let Some(bad) = data.iter().find(|&&v| v as usize >= classes) {
        return Err(Error::Validation(format!(
            "{}: label {bad} is outside 0..{classes}",
            path.display()
        )));
    }
    LabelMap::from_vec(h, w, data)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write samples and their manifest under `dir`.
pub fn write_dataset(dir: &Path, entries: &[ManifestEntry], samples: &[Sample]) -> Result<()> {
    if entries.len() != samples.len() {
        return Err(config_err!("{} manifest entries for {} samples", entries.len(), samples.len()));
    }
    let (images, labels) = (dir.join("images"), dir.join("labels"));
    create_dir(&images)?;
    create_dir(&labels)?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (i, (e, s)) in entries.iter().zip(samples).enumerate() {
        save_rgb(&tensor_to_rgb(&s.image), &images.join(file_name(i)))?;
        save_labels(&s.labels, &labels.join(file_name(i)))?;
        manifest.push_str(&format!("{i}\t{}\t{}\t{:?}\n", e.seed, e.split.as_str(), e.expression));
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Generate a synthetic dataset on disk and return its manifest.
pub fn generate_dataset(dir: &Path, train: usize, val: usize, seed: u64, size: usize) -> Result<Vec<ManifestEntry>> {
    let entries = dataset_manifest(train, val, seed);
    let samples = render_manifest(&entries, size)?;
    write_dataset(dir, &entries, &samples)?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<(usize, ManifestEntry)>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |no: usize, detail: &str| Error::Format {
        path: path.clone(),
        detail: format!("line {}: {detail}", no + 1),
    };
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if no == 0 {
            if line.trim() != MANIFEST_HEADER {
                return Err(bad(no, "unexpected header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(no, "expected 4 tab-separated columns"));
        }
        let index = cols[0].parse().map_err(|_| bad(no, "bad index"))?;
        let seed = cols[1].parse().map_err(|_| bad(no, "bad seed"))?;
        let split = Split::parse(cols[2]).ok_or_else(|| bad(no, "bad split"))?;
        let expression = cols[3].parse().map_err(|_| bad(no, "bad expression"))?;
        out.push((index, ManifestEntry { seed, split, expression }));
    }
    Ok(out)
}

/// Load the samples of one split (or all of them) from `dir`.
pub fn load_dataset(dir: &Path, split: Option<Split>) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .into_iter()
        .filter(|(_, e)| split.is_none_or(|s| s == e.split))
        .map(|(i, _)| {
            let image = load_image(&dir.join("images").join(file_name(i)))?;
            let labels = load_labels(&dir.join("labels").join(file_name(i)), NUM_CLASSES)?;
            if (labels.h, labels.w) != (image.h, image.w) {
                return Err(Error::Validation(format!("sample {i}: image and label sizes differ")));
            }
            Ok(Sample::new(image, labels))
        })
        .collect()
}

/// Train and val samples as configured: loaded from `data.dir` when set,
/// otherwise generated in memory from `data.seed`.
pub fn load_splits(data: &DataConfig, image_size: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    match &data.dir {
        Some(dir) => {
            let train = load_dataset(dir, Some(Split::Train))?;
            let val = load_dataset(dir, Some(Split::Val))?;
            if let Some(s) = train.iter().chain(&val).find(|s| s.image.h != image_size || s.image.w != image_size) {
                return Err(config_err!(
                    "dataset images are {}x{} but the model expects {image_size}",
                    s.image.h,
                    s.image.w
                ));
            }
            Ok((train, val))
        }
        None => {
            let entries = dataset_manifest(data.train, data.val, data.seed);
            let mut samples = render_manifest(&entries, image_size)?;
            let val = samples.split_off(data.train);
            Ok((samples, val))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_load_round_trips_labels() {
        let dir = tempfile::tempdir().unwrap();
        let entries = generate_dataset(dir.path(), 3, 2, 9, 48).unwrap();
        assert_eq!(entries.len(), 5);
        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.iter().map(|(_, e)| e.clone()).collect::<Vec<_>>(), entries);

        let samples = render_manifest(&entries, 48).unwrap();
        let train = load_dataset(dir.path(), Some(Split::Train)).unwrap();
        let val = load_dataset(dir.path(), Some(Split::Val)).unwrap();
        assert_eq!((train.len(), val.len()), (3, 2));
        for (a, b) in train.iter().chain(&val).zip(&samples) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.edge, b.edge);
            let err = a.image.data.iter().zip(&b.image.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn out_of_range_labels_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        save_labels(&LabelMap::from_vec(1, 2, vec![0, 11]).unwrap(), &path).unwrap();
        assert!(matches!(load_labels(&path, 11), Err(Error::Validation(_))));
        assert!(matches!(load_dataset(&dir.path().join("none"), None), Err(Error::Io { .. })));
    }

    #[test]
    fn in_memory_splits() {
        let data = DataConfig {
            train: 2,
            val: 1,
            ..DataConfig::default()
        };
        let (t, v) = load_splits(&data, 48).unwrap();
        assert_eq!((t.len(), v.len()), (2, 1));
    }
}
