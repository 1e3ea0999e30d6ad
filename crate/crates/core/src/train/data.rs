//! Data plumbing for training: tensor/image conversion under the
//! symmetric value convention, a decode-once patch store, and uniform
//! minibatch sampling.

use crate::error::{Error, Result};
use crate::image::{io, Image};
use crate::synth::{DatasetManifest, ManifestRecord, Split};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

/// Stack images into a BCHW tensor mapped from `[0,1]` to `[-1,1]`.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::contract("empty image batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::contract(format!(
                "batch mixes sizes: {}x{} vs {h}x{w}",
                img.height(),
                img.width()
            )));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.get(y, x, c) * 2.0 - 1.0);
                }
            }
        }
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

/// Unstack a BCHW tensor back into `[0,1]` images (clamped).
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::contract(format!(
            "expected Bx3xHxW tensor, got {s:?}"
        )));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut img = Image::new(h, w);
        for c in 0..3 {
            let off = (bi * 3 + c) * plane;
            for y in 0..h {
                for x in 0..w {
                    let v = (t.data()[off + y * w + x] + 1.0) / 2.0;
                    let px = (y * w + x) * 3 + c;
                    img.data_mut()[px] = v.clamp(0.0, 1.0);
                }
            }
        }
        out.push(img);
    }
    Ok(out)
}

/// Decode-once cache over a manifest's images.
pub struct PatchStore {
    manifest: DatasetManifest,
    pairs: RefCell<HashMap<u64, Rc<(Image, Image)>>>,
    clean: RefCell<HashMap<usize, Rc<Image>>>,
}

impl PatchStore {
    pub fn new(manifest: DatasetManifest) -> Self {
        PatchStore {
            manifest,
            pairs: RefCell::new(HashMap::new()),
            clean: RefCell::new(HashMap::new()),
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// (degraded, groundtruth) for a record id.
    pub fn pair(&self, id: u64) -> Result<Rc<(Image, Image)>> {
        if let Some(p) = self.pairs.borrow().get(&id) {
            return Ok(Rc::clone(p));
        }
        let rec = self
            .manifest
            .records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::contract(format!("no record with id {id}")))?;
        let d = io::load_png(self.manifest.degraded_path(rec))?;
        let g = io::load_png(self.manifest.groundtruth_path(rec))?;
        let rc = Rc::new((d, g));
        self.pairs.borrow_mut().insert(id, Rc::clone(&rc));
        Ok(rc)
    }

    pub fn clean_len(&self) -> usize {
        self.manifest.clean_pool.len()
    }

    pub fn clean(&self, ix: usize) -> Result<Rc<Image>> {
        if let Some(img) = self.clean.borrow().get(&ix) {
            return Ok(Rc::clone(img));
        }
        let name = self
            .manifest
            .clean_pool
            .get(ix)
            .ok_or_else(|| Error::contract(format!("clean pool has no index {ix}")))?;
        let rc = Rc::new(io::load_png(self.manifest.clean_path(name))?);
        self.clean.borrow_mut().insert(ix, Rc::clone(&rc));
        Ok(rc)
    }
}

/// Uniform-with-replacement record draw from one split; deterministic for
/// a fixed rng state.
pub fn sample_records<'a>(
    manifest: &'a DatasetManifest,
    split: Split,
    batch: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<&'a ManifestRecord>> {
    let pool = manifest.split(split);
    if pool.is_empty() {
        return Err(Error::contract(format!("{split:?} split is empty")));
    }
    Ok((0..batch)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect())
}

/// Draw a batch and return the full-resolution (degraded, groundtruth)
/// tensor pair in the network value convention.
pub fn sample_minibatch(
    store: &PatchStore,
    split: Split,
    batch: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(Tensor, Tensor)> {
    let records = sample_records(store.manifest(), split, batch, rng)?;
    let pairs: Vec<Rc<(Image, Image)>> = records
        .iter()
        .map(|r| store.pair(r.id))
        .collect::<Result<_>>()?;
    let degraded: Vec<&Image> = pairs.iter().map(|p| &p.0).collect();
    let gts: Vec<&Image> = pairs.iter().map(|p| &p.1).collect();
    Ok((images_to_tensor(&degraded)?, images_to_tensor(&gts)?))
}
