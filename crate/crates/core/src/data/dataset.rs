//! On-disk labelled patch sets: `root/class_<k>/patch_<i>.ppm` plus
//! `root/manifest.json`, and slide sets written by `gen-data`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{atomic_write, read_file};
use super::ppm::{load_ppm, load_rgb8, save_ppm, save_rgb8, Rgb8};
use super::slide::{generate_slide_with, slide_seed, SyntheticSlide, TextureParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const MANIFEST: &str = "manifest.json";
pub const SLIDES_MANIFEST: &str = "slides.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: usize,
    pub mpp: f64,
    pub fov: f64,
    pub patch_px: usize,
    pub count: usize,
    pub seed: u64,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| Error::Config(e.to_string()))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

fn read_json<V: serde::de::DeserializeOwned>(path: &Path) -> Result<V> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn class_dir(root: &Path, class: usize) -> PathBuf {
    root.join(format!("class_{class}"))
}

/// Writes labelled `[3, h, w]` images, numbering patches per class in
/// input order.
pub fn write_dataset<T: Scalar>(root: &Path, items: &[(Tensor<T>, usize)], manifest: &Manifest) -> Result<()> {
    create_dir(root)?;
    for k in 0..manifest.classes {
        create_dir(&class_dir(root, k))?;
    }
    let mut next = vec![0usize; manifest.classes];
    let mut jobs = Vec::with_capacity(items.len());
    for (img, k) in items {
        if *k >= manifest.classes {
            return Err(Error::Parameter(format!("label {k} exceeds {} classes", manifest.classes)));
        }
        jobs.push((class_dir(root, *k).join(format!("patch_{}.ppm", next[*k])), img));
        next[*k] += 1;
    }
    jobs.par_iter().try_for_each(|(path, img)| save_ppm(path, *img))?;
    let manifest = Manifest {
        count: items.len(),
        ..manifest.clone()
    };
    write_json(&root.join(MANIFEST), &manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    read_json(&root.join(MANIFEST))
}

/// Index `i` of a `patch_i.ppm` file name.
pub fn patch_index(name: &str) -> Option<usize> {
    name.strip_prefix("patch_")?.strip_suffix(".ppm")?.parse().ok()
}

/// Reads a labelled patch set, ordered by class then patch index.
pub fn read_dataset<T: Scalar>(root: &Path) -> Result<(Vec<(Tensor<T>, usize)>, Manifest)> {
    let manifest = read_manifest(root)?;
    let mut files = Vec::new();
    for k in 0..manifest.classes {
        let dir = class_dir(root, k);
        if !dir.exists() {
            continue;
        }
        let mut entries: Vec<(usize, PathBuf)> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                patch_index(&name).map(|i| (i, e.path()))
            })
            .collect();
        entries.sort();
        files.extend(entries.into_iter().map(|(_, p)| (p, k)));
    }
    let items: Vec<(Tensor<T>, usize)> = files
        .par_iter()
        .map(|(p, k)| Ok((load_ppm(p)?, *k)))
        .collect::<Result<_>>()?;
    if items.len() != manifest.count {
        return Err(Error::Contract(format!(
            "{} lists {} patches but {} were found",
            root.join(MANIFEST).display(),
            manifest.count,
            items.len()
        )));
    }
    Ok((items, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideSetManifest {
    pub classes: usize,
    pub slides_per_class: usize,
    pub seed: u64,
    pub mpp: f64,
    pub extent: usize,
}

impl SlideSetManifest {
    pub fn slide_name(class: usize, index: usize) -> String {
        format!("slide_c{class}_{index}.ppm")
    }
}

/// Generates and writes every slide of a slide set.
pub fn write_slide_set(root: &Path, m: &SlideSetManifest) -> Result<()> {
    create_dir(root)?;
    for k in 0..m.classes {
        TextureParams::nominal(k)?;
    }
    let jobs: Vec<(usize, usize)> = (0..m.classes)
        .flat_map(|k| (0..m.slides_per_class).map(move |j| (k, j)))
        .collect();
    jobs.iter().try_for_each(|&(k, j)| {
        let slide = generate_slide_with(k, slide_seed(m.seed, k, j), m.extent, m.mpp)?;
        let img = Rgb8 {
            width: slide.extent,
            height: slide.extent,
            pixels: slide.pixels,
        };
        save_rgb8(&root.join(SlideSetManifest::slide_name(k, j)), &img)
    })?;
    write_json(&root.join(SLIDES_MANIFEST), m)
}

/// One stored slide: raster plus provenance; the tissue mask is not stored
/// and is reported as all-tissue.
pub fn read_slide(root: &Path, m: &SlideSetManifest, class: usize, index: usize) -> Result<SyntheticSlide> {
    let path = root.join(SlideSetManifest::slide_name(class, index));
    let img = load_rgb8(&path)?;
    if img.width != img.height {
        return Err(Error::Contract(format!("{} is not square", path.display())));
    }
    let seed = slide_seed(m.seed, class, index);
    Ok(SyntheticSlide {
        class,
        seed,
        extent: img.width,
        mpp: m.mpp,
        params: TextureParams::draw(class, seed)?,
        tissue: vec![true; img.width * img.height],
        pixels: img.pixels,
    })
}

pub fn read_slide_manifest(root: &Path) -> Result<SlideSetManifest> {
    read_json(&root.join(SLIDES_MANIFEST))
}

/// Slide indices held out for testing: the last 20% of each class
/// (at least one when a class has two or more slides).
pub fn is_test_slide(index: usize, slides_per_class: usize) -> bool {
    let n_test = if slides_per_class >= 2 {
        ((slides_per_class as f64 * 0.2).round() as usize).max(1)
    } else {
        0
    };
    index >= slides_per_class - n_test
}

pub fn write_json_report(path: &Path, v: &impl Serialize) -> Result<()> {
    write_json(path, v)
}

pub fn read_json_file<V: serde::de::DeserializeOwned>(path: &Path) -> Result<V> {
    read_json(path)
}
