//! Class-folder ingestion and Crack500-style corpus preparation.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::inpaint::{synthesize_normal, MaskedCrackImage};
use super::manifest::{to_slash, CorpusManifest, ManifestEntry, NORMAL};
use super::split::{half_half, stratified};
use crate::error::{Error, Result};
use crate::patches::{resize_to, Split};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
pub const MASK_SUFFIX: &str = "_mask";

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn is_mask(path: &Path) -> bool {
    path.file_stem()
        .and_then(|s| s.to_str())
        .is_some_and(|s| s.ends_with(MASK_SUFFIX))
}

/// Sorted image files directly inside `dir`, masks excluded.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && is_image(&path) && !is_mask(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::ImageFile {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}

#[derive(Clone, Debug)]
pub struct IngestReport {
    pub manifest: CorpusManifest,
    /// Files whose header could not be decoded, with the reason.
    pub quarantined: Vec<(PathBuf, String)>,
}

impl IngestReport {
    pub fn quarantine_tsv(&self) -> String {
        self.quarantined
            .iter()
            .map(|(p, why)| format!("{}\t{}\n", p.display(), why.replace(['\t', '\n'], " ")))
            .collect()
    }
}

/// Builds a manifest from `root/<class>/<image>` with a seeded, stratified
/// `(train, test)` split. `normal`, if present, gets index 0 and the other
/// classes follow in name order.
pub fn ingest(root: &Path, ratios: (f64, f64), seed: u64) -> Result<IngestReport> {
    let (train, test) = ratios;
    if !(train >= 0.0 && test >= 0.0 && (train + test - 1.0).abs() < 1e-9) {
        return Err(Error::InvalidConfig(format!(
            "split ratios must be nonnegative and sum to 1, got ({train}, {test})"
        )));
    }
    let mut classes: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::Ingestion(format!("{}: {e}", root.display())))? {
        let path = entry?.path();
        if path.is_dir() {
            classes.push(path.file_name().expect("directory name").to_string_lossy().into_owned());
        }
    }
    classes.sort_by(|a, b| (a != NORMAL).cmp(&(b != NORMAL)).then(a.cmp(b)));
    if classes.is_empty() {
        return Err(Error::Ingestion(format!("{} has no class directories", root.display())));
    }
    let mut entries = Vec::new();
    let mut per_class = Vec::new();
    let mut quarantined = Vec::new();
    for class in &classes {
        let mut ids = Vec::new();
        for path in list_images(&root.join(class))? {
            if let Err(e) = image::image_dimensions(&path) {
                log::warn!("quarantined {}: {e}", path.display());
                quarantined.push((path, e.to_string()));
                continue;
            }
            ids.push(entries.len());
            entries.push(ManifestEntry {
                path: to_slash(path.strip_prefix(root).expect("listed under root")),
                class: class.clone(),
                split: Split::Train,
            });
        }
        if ids.is_empty() {
            return Err(Error::Ingestion(format!("class directory {class:?} has no readable images")));
        }
        per_class.push(ids);
    }
    for (id, split) in stratified(&per_class, train, seed) {
        entries[id].split = split;
    }
    Ok(IngestReport {
        manifest: CorpusManifest::new(root, seed, classes, entries)?,
        quarantined,
    })
}

/// The mask stored next to `image` as `<stem>_mask.<ext>`, if any.
pub fn find_mask(image: &Path) -> Option<PathBuf> {
    let stem = image.file_stem()?.to_str()?;
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| image.with_file_name(format!("{stem}{MASK_SUFFIX}.{ext}")))
        .find(|p| p.is_file())
}

fn load_mask(path: &Path) -> Result<GrayImage> {
    let mut m = load_gray(path)?;
    m.pixels_mut().for_each(|p| *p = Luma([if p[0] > 127 { 255 } else { 0 }]));
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct Crack500Spec {
    pub normals: usize,
    pub dims: (u32, u32),
    pub seed: u64,
    pub replicas: usize,
}

impl Default for Crack500Spec {
    fn default() -> Self {
        Self {
            normals: 286,
            dims: (1200, 900),
            seed: 0,
            replicas: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Crack500Output {
    /// One manifest per half/half replica, written as `split_<k>.tsv`.
    pub manifests: Vec<CorpusManifest>,
    pub cracks: usize,
    pub normals: usize,
    /// Images skipped for lack of a mask.
    pub skipped: Vec<PathBuf>,
}

impl Crack500Output {
    pub fn detection_usable(&self) -> bool {
        self.normals > 0
    }
}

/// Converts mask-annotated crack images into a crack/normal corpus: every
/// crack image is kept, a seeded subset is additionally erased into normal
/// images, and everything is resized and converted to gray.
pub fn prepare_crack500_pdd(crack_dir: &Path, out_dir: &Path, spec: &Crack500Spec) -> Result<Crack500Output> {
    if spec.replicas == 0 || spec.dims.0 == 0 || spec.dims.1 == 0 {
        return Err(Error::InvalidConfig("replicas and dimensions must be positive".into()));
    }
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for image in list_images(crack_dir).map_err(|e| Error::Ingestion(format!("{}: {e}", crack_dir.display())))? {
        match find_mask(&image) {
            Some(mask) => pairs.push((image, mask)),
            None => {
                log::warn!("skipping {}: no mask", image.display());
                skipped.push(image);
            }
        }
    }
    if spec.normals > pairs.len() {
        return Err(Error::InvalidConfig(format!(
            "{} normals requested from {} masked crack images",
            spec.normals,
            pairs.len()
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut erase = vec![false; pairs.len()];
    for &i in &order[..spec.normals] {
        erase[i] = true;
    }

    std::fs::create_dir_all(out_dir.join("crack"))?;
    if spec.normals > 0 {
        std::fs::create_dir_all(out_dir.join(NORMAL))?;
    }
    let mut entries = Vec::new();
    let mut per_class: Vec<Vec<usize>> = if spec.normals > 0 { vec![vec![], vec![]] } else { vec![vec![]] };
    let crack_class = per_class.len() - 1;
    for (i, (image_path, mask_path)) in pairs.iter().enumerate() {
        let stem = image_path.file_stem().expect("file name").to_string_lossy().into_owned();
        let image = load_gray(image_path)?;
        resize_to(&image, spec.dims).save(out_dir.join("crack").join(format!("{stem}.png")))?;
        per_class[crack_class].push(entries.len());
        entries.push(ManifestEntry {
            path: format!("crack/{stem}.png"),
            class: "crack".into(),
            split: Split::Train,
        });
        if erase[i] {
            let crack = MaskedCrackImage::new(image, load_mask(mask_path)?)?;
            let normal = synthesize_normal(&crack)?;
            resize_to(&normal, spec.dims).save(out_dir.join(NORMAL).join(format!("{stem}.png")))?;
            per_class[0].push(entries.len());
            entries.push(ManifestEntry {
                path: format!("{NORMAL}/{stem}.png"),
                class: NORMAL.into(),
                split: Split::Train,
            });
        }
    }
    let classes: Vec<String> = if spec.normals > 0 {
        vec![NORMAL.into(), "crack".into()]
    } else {
        vec!["crack".into()]
    };
    let mut manifests = Vec::new();
    for k in 0..spec.replicas {
        let seed = spec.seed + k as u64;
        let mut es = entries.clone();
        for (id, split) in half_half(&per_class, seed) {
            es[id].split = split;
        }
        let m = CorpusManifest::new(out_dir, seed, classes.clone(), es)?;
        m.write(&out_dir.join(format!("split_{k}.tsv")))?;
        manifests.push(m);
    }
    Ok(Crack500Output {
        manifests,
        cracks: pairs.len(),
        normals: spec.normals,
        skipped,
    })
}

/// Copy of `manifest` without normal entries or the normal class.
pub fn distressed_only(manifest: &CorpusManifest) -> Result<CorpusManifest> {
    let classes: Vec<String> = manifest.classes.iter().filter(|c| *c != NORMAL).cloned().collect();
    let entries = manifest.entries.iter().filter(|e| e.class != NORMAL).cloned().collect();
    CorpusManifest::new(manifest.root.clone(), manifest.seed, classes, entries)
}
