//! Dataset types, synthetic data generation and manifest I/O.

pub mod config;
pub mod netpbm;

pub use netpbm::{load_pgm, load_ppm, save_pgm, save_ppm, ByteImage};

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::Preproc;
use crate::error::{Error, Result};
use crate::ops::local_contrast_normalize;
use crate::scalar::Float;
use crate::tensor::{Shape, Tensor};

/// Single-channel label image with values in [0, K) plus an optional ignore
/// id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<LabelMap> {
        if data.len() != h * w {
            return Err(Error::invalid(
                "label_map",
                format!("payload {} does not match {h}x{w}", data.len()),
            ));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn validate_range(&self, num_classes: usize, ignore: Option<u8>, context: &str) -> Result<()> {
        for &v in &self.data {
            if Some(v) != ignore && (v as usize) >= num_classes {
                return Err(Error::InvalidLabel {
                    value: v,
                    num_classes,
                    context: context.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// An image/label pair as stored on disk.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub image: ByteImage,
    pub labels: LabelMap,
    pub id: String,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub split: Split,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
}

/// Line-based dataset index: header `K=<int> ignore=<int>`, then one
/// `split<TAB>image<TAB>label` record per line, paths relative to the
/// manifest's directory.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub num_classes: usize,
    pub ignore_label: u8,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = format!("K={} ignore={}\n", self.num_classes, self.ignore_label);
        for e in &self.entries {
            text.push_str(&format!(
                "{}\t{}\t{}\n",
                e.split.name(),
                e.image_path.display(),
                e.label_path.display()
            ));
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DatasetManifest> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(&*path_str, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Config {
            path: path_str.clone(),
            line: 1,
            msg: "empty manifest".to_string(),
        })?;
        let mut num_classes = None;
        let mut ignore = None;
        for tok in header.split_whitespace() {
            if let Some(v) = tok.strip_prefix("K=") {
                num_classes = v.parse::<usize>().ok();
            } else if let Some(v) = tok.strip_prefix("ignore=") {
                ignore = v.parse::<u8>().ok();
            }
        }
        let (num_classes, ignore_label) = match (num_classes, ignore) {
            (Some(k), Some(i)) if k >= 2 => (k, i),
            _ => {
                return Err(Error::Config {
                    path: path_str,
                    line: 1,
                    msg: "header must be `K=<int> ignore=<int>` with K >= 2".to_string(),
                })
            }
        };

        let mut entries = Vec::new();
        let mut seen: HashMap<String, Split> = HashMap::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Config {
                    path: path_str,
                    line: idx + 1,
                    msg: "expected `split<TAB>image<TAB>label`".to_string(),
                });
            }
            let split = Split::from_name(parts[0]).ok_or_else(|| Error::Config {
                path: path_str.clone(),
                line: idx + 1,
                msg: format!("unknown split '{}'", parts[0]),
            })?;
            for p in &parts[1..] {
                match seen.get(*p) {
                    Some(prev) if *prev != split => {
                        return Err(Error::Config {
                            path: path_str,
                            line: idx + 1,
                            msg: format!("'{p}' is referenced by both {prev} and {split}"),
                        })
                    }
                    _ => {
                        seen.insert(p.to_string(), split);
                    }
                }
                let full = root.join(p);
                if !full.exists() {
                    return Err(Error::Config {
                        path: path_str,
                        line: idx + 1,
                        msg: format!("referenced file '{p}' does not exist"),
                    });
                }
            }
            entries.push(ManifestEntry {
                split,
                image_path: PathBuf::from(parts[1]),
                label_path: PathBuf::from(parts[2]),
            });
        }
        Ok(DatasetManifest { root, num_classes, ignore_label, entries })
    }

    /// Load all records of one split, validating shapes and label ranges.
    pub fn load_split(&self, split: Split) -> Result<Vec<SampleRecord>> {
        let mut out = Vec::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            let image = load_ppm(self.root.join(&e.image_path))?;
            let (h, w, data) = load_pgm(self.root.join(&e.label_path))?;
            let labels = LabelMap::new(h, w, data)?;
            if labels.h != image.h || labels.w != image.w {
                return Err(Error::invalid(
                    "manifest",
                    format!(
                        "{}: image {}x{} vs labels {}x{}",
                        e.image_path.display(),
                        image.h,
                        image.w,
                        labels.h,
                        labels.w
                    ),
                ));
            }
            labels.validate_range(
                self.num_classes,
                Some(self.ignore_label),
                &e.label_path.display().to_string(),
            )?;
            out.push(SampleRecord {
                image,
                labels,
                id: e.image_path.display().to_string(),
            });
        }
        Ok(out)
    }
}

/// Scale a byte image to [0, 1] and apply the model's input preprocessing.
pub fn image_to_input<T: Float>(image: &ByteImage, preproc: &Preproc) -> Tensor<T> {
    let (h, w) = (image.h, image.w);
    let mut data = vec![T::ZERO; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data[ch * h * w + y * w + x] =
                    T::from_f64(image.data[(y * w + x) * 3 + ch] as f64 / 255.0);
            }
        }
    }
    let t = Tensor::from_vec(data, Shape::new(1, 3, h, w)).unwrap();
    if preproc.lcn {
        local_contrast_normalize(&t, preproc.lcn_window, preproc.lcn_sigma)
    } else {
        t
    }
}

/// Synthetic dataset: colored shapes on a textured background.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// > 1 skews per-class pixel mass toward low class ids (long tail).
    pub skew: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 6,
            height: 64,
            width: 64,
            train: 200,
            val: 50,
            test: 50,
            skew: 4.0,
            seed: 7,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [((r + m) * 255.0) as u8, ((g + m) * 255.0) as u8, ((b + m) * 255.0) as u8]
}

/// Shape classes that differ only in geometry share a hue, so telling them
/// apart requires spatial structure rather than a per-pixel color lookup.
fn class_palette(num_classes: usize) -> Vec<[u8; 3]> {
    let mut palette = vec![[52u8, 58, 48]]; // muted background
    let shapes = num_classes - 1;
    let hues = shapes.div_ceil(2).max(1);
    for c in 1..num_classes {
        let hue = ((c - 1) % hues) as f64 / hues as f64 * 330.0;
        palette.push(hsv_to_rgb(hue, 0.72, 0.85));
    }
    palette
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
    ThinBar,
}

impl ShapeKind {
    fn for_class(class: usize) -> ShapeKind {
        match (class - 1) % 4 {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Disk,
            2 => ShapeKind::Triangle,
            _ => ShapeKind::ThinBar,
        }
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn draw_shape(
    labels: &mut [u8],
    h: usize,
    w: usize,
    class: usize,
    size: f64,
    rng: &mut ChaCha8Rng,
) {
    let cy = rng.random_range(0..h) as f64;
    let cx = rng.random_range(0..w) as f64;
    let kind = ShapeKind::for_class(class);
    let horizontal = rng.random::<bool>();
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let inside = match kind {
                ShapeKind::Rectangle => dy.abs() <= size * 0.6 && dx.abs() <= size * 0.9,
                ShapeKind::Disk => dy * dy + dx * dx <= size * size * 0.64,
                ShapeKind::Triangle => {
                    // apex up, height ~1.4*size
                    dy >= -size * 0.7
                        && dy <= size * 0.7
                        && dx.abs() <= (dy + size * 0.7) * 0.6
                }
                ShapeKind::ThinBar => {
                    let bar_w = (size / 6.0).max(1.4);
                    if horizontal {
                        dy.abs() <= bar_w / 2.0 && dx.abs() <= size * 1.4
                    } else {
                        dx.abs() <= bar_w / 2.0 && dy.abs() <= size * 1.4
                    }
                }
            };
            if inside {
                labels[y * w + x] = class as u8;
            }
        }
    }
}

fn render_sample(
    spec: &SynthSpec,
    global_index: usize,
) -> (ByteImage, LabelMap) {
    let (h, w, k) = (spec.height, spec.width, spec.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(global_index as u64 + 1);
    let palette = class_palette(k);

    let mut labels = vec![0u8; h * w];
    // round-robin forced class keeps every class present in every split
    let forced = 1 + global_index % (k - 1);
    let extra = rng.random_range(2..=4);
    let mut shape_classes = vec![forced];
    for _ in 0..extra {
        shape_classes.push(rng.random_range(1..k));
    }
    let s_max = h.min(w) as f64 / 3.2;
    for &c in &shape_classes {
        let rel = if k > 2 { (c - 1) as f64 / (k - 2) as f64 } else { 0.0 };
        let size = s_max * spec.skew.powf(-rel);
        draw_shape(&mut labels, h, w, c, size, &mut rng);
    }

    // background texture phases
    let tau = std::f64::consts::TAU;
    let (py, px) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau));
    let mut image = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let class = labels[y * w + x] as usize;
            let base = palette[class];
            let texture = if class == 0 {
                10.0 * ((y as f64 * 0.21 + py).sin() + (x as f64 * 0.17 + px).sin())
            } else {
                0.0
            };
            for ch in 0..3 {
                let noise = rng.random_range(-9.0..9.0);
                image[(y * w + x) * 3 + ch] = clamp_u8(base[ch] as f64 + texture + noise);
            }
        }
    }
    (
        ByteImage { h, w, data: image },
        LabelMap { h, w, data: labels },
    )
}

/// Generate the dataset tree (`images/`, `labels/`, `manifest.tsv`) under
/// `out_dir`. Deterministic for a fixed spec. The ignore id is 255.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if spec.num_classes < 2 || spec.num_classes > 200 {
        return Err(Error::invalid("gen-data", "classes must be in [2, 200]"));
    }
    if spec.train < spec.num_classes - 1 {
        return Err(Error::invalid(
            "gen-data",
            format!(
                "{} training images cannot cover {} shape classes",
                spec.train,
                spec.num_classes - 1
            ),
        ));
    }
    if spec.height < 16 || spec.width < 16 {
        return Err(Error::invalid("gen-data", "images must be at least 16x16"));
    }
    let out_dir = out_dir.as_ref();
    for sub in ["images", "labels"] {
        std::fs::create_dir_all(out_dir.join(sub))
            .map_err(|e| Error::io(out_dir.join(sub).display().to_string(), e))?;
    }

    let mut entries = Vec::new();
    let mut train_class_pixels = vec![0u64; spec.num_classes];
    let mut global_index = 0usize;
    for (split, count) in
        [(Split::Train, spec.train), (Split::Val, spec.val), (Split::Test, spec.test)]
    {
        for i in 0..count {
            let (image, labels) = render_sample(spec, global_index);
            global_index += 1;
            if split == Split::Train {
                for &v in &labels.data {
                    train_class_pixels[v as usize] += 1;
                }
            }
            let stem = format!("{}_{i:04}", split.name());
            let image_path = PathBuf::from(format!("images/{stem}.ppm"));
            let label_path = PathBuf::from(format!("labels/{stem}.pgm"));
            save_ppm(out_dir.join(&image_path), &image)?;
            save_pgm(out_dir.join(&label_path), labels.h, labels.w, &labels.data)?;
            entries.push(ManifestEntry { split, image_path, label_path });
        }
    }

    // empirical checks: full class coverage, background-dominated skew
    if let Some(missing) = train_class_pixels.iter().position(|&p| p == 0) {
        return Err(Error::invalid(
            "gen-data",
            format!("class {missing} absent from the generated training split"),
        ));
    }
    if spec.skew > 1.0 {
        let bg = train_class_pixels[0];
        if let Some((c, _)) =
            train_class_pixels.iter().enumerate().skip(1).find(|(_, &p)| p >= bg)
        {
            return Err(Error::invalid(
                "gen-data",
                format!("shape class {c} outweighs the background; skew generation failed"),
            ));
        }
    }

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        num_classes: spec.num_classes,
        ignore_label: 255,
        entries,
    };
    manifest.save(out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            num_classes: 5,
            height: 32,
            width: 32,
            train: 12,
            val: 4,
            test: 4,
            skew: 4.0,
            seed: 9,
        }
    }

    fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((
                        p.strip_prefix(dir).unwrap().display().to_string(),
                        std::fs::read(&p).unwrap(),
                    ));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn generation_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic(&tiny_spec(), d1.path()).unwrap();
        generate_synthetic(&tiny_spec(), d2.path()).unwrap();
        assert_eq!(tree_bytes(d1.path()), tree_bytes(d2.path()));
    }

    #[test]
    fn generated_labels_are_in_range_and_background_dominates() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(&tiny_spec(), dir.path()).unwrap();
        let records = manifest.load_split(Split::Train).unwrap();
        assert_eq!(records.len(), 12);
        let mut hist = vec![0u64; 5];
        for r in &records {
            for &v in &r.labels.data {
                assert!(v < 5);
                hist[v as usize] += 1;
            }
        }
        assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
        let bg = hist[0];
        assert!(hist[1..].iter().all(|&c| c < bg), "{hist:?}");
    }

    #[test]
    fn manifest_round_trip_and_split_loading() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(&tiny_spec(), dir.path()).unwrap();
        let loaded = DatasetManifest::load(dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(loaded.num_classes, manifest.num_classes);
        assert_eq!(loaded.ignore_label, 255);
        assert_eq!(loaded.entries.len(), manifest.entries.len());
        assert_eq!(loaded.load_split(Split::Val).unwrap().len(), 4);
        assert_eq!(loaded.load_split(Split::Test).unwrap().len(), 4);
    }

    #[test]
    fn manifest_rejects_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&tiny_spec(), dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.tsv");
        std::fs::remove_file(dir.path().join("images/train_0000.ppm")).unwrap();
        match DatasetManifest::load(&manifest_path) {
            Err(Error::Config { msg, .. }) => assert!(msg.contains("does not exist"), "{msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn image_to_input_scales_and_shapes() {
        let img = ByteImage::new(2, 2, vec![255; 12]).unwrap();
        let no_lcn = Preproc { lcn: false, ..Preproc::default() };
        let t = image_to_input::<f32>(&img, &no_lcn);
        assert_eq!(t.shape(), Shape::new(1, 3, 2, 2));
        assert!(t.iter().all(|&v| v == 1.0));
    }
}
