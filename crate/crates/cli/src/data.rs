//! Dataset plumbing shared by the commands: manifests on disk, image
//! loading with the manifest's spacing, and training-pair
//! construction.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lesiontrack::error::Result;
use lesiontrack::geometry::BoundingBox;
use lesiontrack::image::Image;
use lesiontrack::sampling::{
    enumerate_pairs, extract_search, extract_template, read_manifest, LesionType, Manifest,
    PairRef, PatchPair, TimePoint,
};
use lesiontrack::Error;

use crate::config::RunConfig;

/// A manifest and the directory its image paths are relative to.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Strict load: every referenced image file must exist. Training
    /// wants to fail fast here rather than mid-epoch.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = read_manifest(&dir.join("manifest.json"))?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    /// Lenient load: the manifest must be structurally valid, but a
    /// missing image file is tolerated so tracking can record it as a
    /// per-pair failure and keep going (evaluation never reads
    /// images at all).
    pub fn load_lenient(dir: &Path) -> Result<Dataset> {
        let path = dir.join("manifest.json");
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Schema {
            context: format!("manifest {}", path.display()),
            message: e.to_string(),
        })?;
        manifest.validate(None)?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn image_path(&self, tp: &TimePoint) -> PathBuf {
        self.dir.join(&tp.image)
    }

    pub fn load_image(&self, tp: &TimePoint) -> Result<Image> {
        Image::read_pgm(&self.image_path(tp))?.with_spacing(self.manifest.spacing_mm)
    }

    pub fn lesion_type(&self, pr: &PairRef) -> LesionType {
        self.manifest.cases[pr.case].lesion_type
    }

    fn timepoint(&self, pr: &PairRef, which: Which) -> &TimePoint {
        let view = &self.manifest.cases[pr.case].views[pr.view];
        match which {
            Which::Template => &view.timepoints[pr.template_tp],
            Which::Search => &view.timepoints[pr.search_tp],
        }
    }
}

#[derive(Clone, Copy)]
enum Which {
    Template,
    Search,
}

/// Both exams of one pair, loaded and annotated in the full-image
/// frame.
pub struct ExamPair {
    pub id: String,
    pub lesion_type: LesionType,
    pub template: Image,
    pub template_box: BoundingBox,
    pub search: Image,
    pub search_box: BoundingBox,
}

/// Image cache so views with several time points load each file
/// once.
#[derive(Default)]
pub struct ImageCache {
    images: HashMap<PathBuf, Image>,
}

impl ImageCache {
    pub fn get(&mut self, ds: &Dataset, tp: &TimePoint) -> Result<Image> {
        let path = ds.image_path(tp);
        if let Some(img) = self.images.get(&path) {
            return Ok(img.clone());
        }
        let img = ds.load_image(tp)?;
        self.images.insert(path, img.clone());
        Ok(img)
    }
}

/// Load one enumerated pair (template and search exams with their
/// ground-truth boxes).
pub fn load_exam_pair(ds: &Dataset, cache: &mut ImageCache, pr: &PairRef) -> Result<ExamPair> {
    let ttp = ds.timepoint(pr, Which::Template);
    let stp = ds.timepoint(pr, Which::Search);
    Ok(ExamPair {
        id: pr.id(&ds.manifest),
        lesion_type: ds.lesion_type(pr),
        template: cache.get(ds, ttp)?,
        template_box: ttp.lesion_box.to_box()?,
        search: cache.get(ds, stp)?,
        search_box: stp.lesion_box.to_box()?,
    })
}

/// Build tracker/refiner training pairs from a dataset: the template
/// patch under the configured variant, and the search patch centred
/// on the true search-exam lesion plus a seeded jitter (without it
/// the network would learn that lesions sit at the patch center).
/// Pairs are ordered as enumerated, so the result is deterministic
/// per seed.
pub fn build_training_pairs(ds: &Dataset, cfg: &RunConfig, seed: u64) -> Result<Vec<PatchPair>> {
    let refs = enumerate_pairs(&ds.manifest, cfg.orientation);
    if refs.is_empty() {
        return Err(Error::EmptyInput("dataset contains no exam pairs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = ImageCache::default();
    let jitter_px = cfg.center_jitter * cfg.patch.search_crop_px();
    let mut pairs = Vec::with_capacity(refs.len());
    for pr in &refs {
        let exams = load_exam_pair(ds, &mut cache, pr)?;
        let tf = extract_template(&exams.template, &exams.template_box, &cfg.patch, cfg.variant)?;
        let center = (
            exams.search_box.cx + rng.gen_range(-jitter_px..=jitter_px),
            exams.search_box.cy + rng.gen_range(-jitter_px..=jitter_px),
        );
        let sf = extract_search(&exams.search, center, Some(&exams.search_box), &cfg.patch)?;
        pairs.push(PatchPair::assemble(tf, sf));
    }
    Ok(pairs)
}
