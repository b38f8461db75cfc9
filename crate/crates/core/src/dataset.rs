//! Referring-segmentation samples, synthetic generation and the on-disk layout.
//!
//! ```text
//! <dir>/scenes/<image>.ppm        P6 raster
//! <dir>/masks/<image>_<obj>.pbm   P4 ground truth
//! <dir>/samples.jsonl             one record per expression
//! <dir>/vocab.txt                 one token per line
//! ```

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::TemplateSet;
use crate::error::{Error, Result};
use crate::raster::{self, Mask, RgbImage};
use crate::synth::{resolve_expression, unique_descriptions, Scene, VOCABULARY};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

/// Scene attempts before generation gives up.
pub const MAX_SCENE_ATTEMPTS: usize = 100;

/// One expression referring to one object of one image.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    pub image_id: usize,
    pub object_id: usize,
    pub expression_id: usize,
    pub expression: String,
    pub token_ids: Vec<usize>,
    /// `H × W × 3` in `[0, 1]`.
    pub image: Arc<Tensor>,
    /// `H × W` with values in `{0, 1}`.
    pub target: Arc<Tensor>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Record {
    id: usize,
    image_id: usize,
    object_id: usize,
    expression_id: usize,
    expression: String,
    image: String,
    mask: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub images: Vec<RgbImage>,
    /// Indexed by image, then object.
    pub masks: Vec<Vec<Mask>>,
    pub samples: Vec<Sample>,
    /// Scene specifications; empty for datasets read from disk.
    pub scenes: Vec<Scene>,
}

/// The closed vocabulary shared by every generated dataset.
pub fn grammar_vocabulary() -> Vocabulary {
    Vocabulary::new(VOCABULARY)
}

fn image_path(image: usize) -> String {
    format!("scenes/{image:06}.ppm")
}

fn mask_path(image: usize, object: usize) -> String {
    format!("masks/{image:06}_{object}.pbm")
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mask(&self, sample: &Sample) -> &Mask {
        &self.masks[sample.image_id][sample.object_id]
    }

    /// Deterministic in `seed`; each scene draws from its own stream.
    pub fn generate(n_scenes: usize, seed: u64, image_size: usize, templates: TemplateSet) -> Result<Self> {
        if n_scenes == 0 {
            return Err(Error::Data("need at least one scene".into()));
        }
        let vocab = grammar_vocabulary();
        let mut ds = Dataset {
            vocab,
            images: Vec::with_capacity(n_scenes),
            masks: Vec::with_capacity(n_scenes),
            samples: Vec::new(),
            scenes: Vec::with_capacity(n_scenes),
        };
        for image_id in 0..n_scenes {
            let mut rng = crate::seeded_rng(seed, image_id as u64);
            let (scene, expressions) = (0..MAX_SCENE_ATTEMPTS)
                .find_map(|_| {
                    let scene = Scene::random(&mut rng, image_size);
                    let mut per_object = Vec::with_capacity(scene.objects.len());
                    for obj in 0..scene.objects.len() {
                        let mut cands = unique_descriptions(&scene, obj, templates);
                        if cands.len() < 2 {
                            return None;
                        }
                        cands.shuffle(&mut rng);
                        let k = rng.gen_range(2..=4).min(cands.len());
                        per_object.push(cands[..k].iter().map(|d| d.render()).collect::<Vec<_>>());
                    }
                    Some((scene, per_object))
                })
                .ok_or_else(|| {
                    Error::Data(format!(
                        "scene {image_id}: no unambiguous expressions after {MAX_SCENE_ATTEMPTS} attempts"
                    ))
                })?;
            let rgb = scene.render();
            let image = Arc::new(rgb.to_tensor());
            let masks: Vec<Mask> = scene.objects.iter().map(|o| o.rasterize(image_size)).collect();
            for (object_id, texts) in expressions.into_iter().enumerate() {
                let target = Arc::new(masks[object_id].to_tensor());
                for (expression_id, text) in texts.into_iter().enumerate() {
                    let resolved = resolve_expression(&scene, &text)?;
                    if resolved != object_id {
                        return Err(Error::Data(format!("`{text}` resolves to object {resolved}, not {object_id}")));
                    }
                    ds.samples.push(Sample {
                        id: ds.samples.len(),
                        image_id,
                        object_id,
                        expression_id,
                        token_ids: ds.vocab.encode(&text),
                        expression: text,
                        image: Arc::clone(&image),
                        target: Arc::clone(&target),
                    });
                }
            }
            ds.images.push(rgb);
            ds.masks.push(masks);
            ds.scenes.push(scene);
        }
        Ok(ds)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("scenes"))?;
        fs::create_dir_all(dir.join("masks"))?;
        for (i, img) in self.images.iter().enumerate() {
            fs::write(dir.join(image_path(i)), raster::encode_ppm(img))?;
            for (o, m) in self.masks[i].iter().enumerate() {
                fs::write(dir.join(mask_path(i, o)), raster::encode_pbm(m))?;
            }
        }
        let mut w = BufWriter::new(File::create(dir.join("samples.jsonl"))?);
        for s in &self.samples {
            let rec = Record {
                id: s.id,
                image_id: s.image_id,
                object_id: s.object_id,
                expression_id: s.expression_id,
                expression: s.expression.clone(),
                image: image_path(s.image_id),
                mask: mask_path(s.image_id, s.object_id),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        self.vocab.save(&dir.join("vocab.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let reader = BufReader::new(File::open(dir.join("samples.jsonl"))?);
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str::<Record>(&line)?);
            }
        }
        let n_images = records.iter().map(|r| r.image_id + 1).max().unwrap_or(0);
        let mut images: Vec<Option<(RgbImage, Arc<Tensor>)>> = vec![None; n_images];
        let mut masks: Vec<Vec<Option<Mask>>> = vec![Vec::new(); n_images];
        let mut targets: HashMap<(usize, usize), Arc<Tensor>> = HashMap::new();
        let mut samples = Vec::with_capacity(records.len());
        for (i, r) in records.into_iter().enumerate() {
            if r.id != i {
                return Err(Error::Data(format!("sample ids must be dense: record {i} has id {}", r.id)));
            }
            if images[r.image_id].is_none() {
                let img = raster::read_ppm(&dir.join(&r.image))?;
                let t = Arc::new(img.to_tensor());
                images[r.image_id] = Some((img, t));
            }
            let (img, image) = images[r.image_id].as_ref().expect("loaded above");
            let target = match targets.get(&(r.image_id, r.object_id)) {
                Some(t) => Arc::clone(t),
                None => {
                    let m = raster::read_pbm(&dir.join(&r.mask))?;
                    if (m.height, m.width) != (img.height, img.width) {
                        return Err(Error::Data(format!("{} does not match its image size", r.mask)));
                    }
                    let t = Arc::new(m.to_tensor());
                    let slot = &mut masks[r.image_id];
                    if slot.len() <= r.object_id {
                        slot.resize(r.object_id + 1, None);
                    }
                    slot[r.object_id] = Some(m);
                    targets.insert((r.image_id, r.object_id), Arc::clone(&t));
                    t
                }
            };
            samples.push(Sample {
                id: r.id,
                image_id: r.image_id,
                object_id: r.object_id,
                expression_id: r.expression_id,
                token_ids: vocab.encode(&r.expression),
                expression: r.expression,
                image: Arc::clone(image),
                target,
            });
        }
        let images = images
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.map(|(img, _)| img).ok_or_else(|| Error::Data(format!("image {i} has no samples"))))
            .collect::<Result<Vec<_>>>()?;
        let masks = masks
            .into_iter()
            .enumerate()
            .map(|(i, objs)| {
                objs.into_iter()
                    .enumerate()
                    .map(|(o, m)| m.ok_or_else(|| Error::Data(format!("object {o} of image {i} has no samples"))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            vocab,
            images,
            masks,
            samples,
            scenes: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn digest(ds: &Dataset) -> Vec<u8> {
        let mut h = Sha256::new();
        for img in &ds.images {
            h.update(&img.data);
        }
        for s in &ds.samples {
            h.update(s.expression.as_bytes());
            h.update([s.image_id as u8, s.object_id as u8, s.expression_id as u8]);
        }
        h.finalize().to_vec()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Dataset::generate(12, 7, 64, TemplateSet::All).unwrap();
        let b = Dataset::generate(12, 7, 64, TemplateSet::All).unwrap();
        let c = Dataset::generate(12, 8, 64, TemplateSet::All).unwrap();
        assert_eq!(digest(&a), digest(&b));
        assert_ne!(digest(&a), digest(&c));
    }

    #[test]
    fn every_object_has_two_to_four_expressions() {
        let ds = Dataset::generate(30, 1, 64, TemplateSet::All).unwrap();
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for s in &ds.samples {
            *counts.entry((s.image_id, s.object_id)).or_default() += 1;
        }
        assert!(counts.values().all(|&c| (2..=4).contains(&c)));
        let total_objects: usize = ds.scenes.iter().map(|s| s.objects.len()).sum();
        assert_eq!(counts.len(), total_objects);
    }

    #[test]
    fn vocabulary_is_closed_and_small() {
        let ds = Dataset::generate(20, 2, 64, TemplateSet::All).unwrap();
        assert!(ds.vocab.len() < 64);
        assert!(ds
            .samples
            .iter()
            .all(|s| s.token_ids.iter().all(|&t| t != crate::text::UNK)));
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(5, 3, 32, TemplateSet::All).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.masks, ds.masks);
        assert_eq!(back.vocab, ds.vocab);
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.expression, b.expression);
            assert_eq!(a.token_ids, b.token_ids);
            assert_eq!(a.image, b.image);
            assert_eq!(a.target, b.target);
        }
    }

    #[test]
    fn zero_scenes_is_an_error() {
        assert!(Dataset::generate(0, 0, 64, TemplateSet::All).is_err());
    }
}
