//! On-disk corpora: `img_XXXX.png` with a same-named `.txt` of polygons.

use std::path::{Path, PathBuf};

use super::imaging::{load_rgb, save_rgb};
use super::stream_rng;
use super::synth::{gen_synth_sample, SynthSceneSpec};
use crate::error::{Error, Result};
use crate::labels::{read_annotations, write_annotations, TextAnnotation};
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: FeatureMap,
    pub annots: Vec<TextAnnotation>,
}

pub fn sample_name(i: usize) -> String {
    format!("img_{i:04}")
}

/// Writes `count` scenes; scene `i` depends only on `(seed, i)`.
pub fn gen_corpus(spec: &SynthSceneSpec, count: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let (img, annots) = gen_synth_sample(spec, &mut stream_rng(seed, i as u64))?;
        let name = sample_name(i);
        let png = out.join(format!("{name}.png"));
        save_rgb(&img, &png)?;
        write_annotations(&out.join(format!("{name}.txt")), &annots)?;
        written.push(png);
    }
    Ok(written)
}

/// PNG files in `dir` sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    v.sort();
    Ok(v)
}

/// Loads every image with its annotations; a missing `.txt` is an error.
pub fn load_corpus(dir: &Path) -> Result<Vec<Sample>> {
    let images = list_images(dir)?;
    if images.is_empty() {
        return Err(Error::Invalid(format!("no .png images in {}", dir.display())));
    }
    images
        .into_iter()
        .map(|png| {
            let txt = png.with_extension("txt");
            if !txt.exists() {
                return Err(Error::Invalid(format!("{} has no annotation file", png.display())));
            }
            Ok(Sample {
                name: png.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                image: load_rgb(&png)?,
                annots: read_annotations(&txt)?,
            })
        })
        .collect()
}
