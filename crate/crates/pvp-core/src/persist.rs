//! Dataset directory format.
//!
//! ```text
//! dataset/
//!   manifest.json        seed, config echo, counts, file digests, checksum
//!   universe.json        palette + objects
//!   train.jsonl          one sample record per line
//!   steerfit.jsonl
//!   eval.jsonl
//!   images/<id>.bin      u32 width, u32 height, then w*h*3 f32 LE (RGB)
//!   masks/<id>.bin       u32 width, u32 height, u32 n, then per mask:
//!                        u32 object id + packed row-major bits (LSB first)
//! ```
//!
//! The round trip is bit-exact: pixels live on the f32 grid in memory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetBundle, DatasetManifest, Sample, Split, UniverseFile};
use crate::digest::digest_file;
use crate::error::{PvpError, Result};
use crate::image::{CellImage, ObjectMask};
use crate::vocab::{PromptKind, Task, TokenId, Variant, Vocab};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    task: Task,
    prompt_kind: PromptKind,
    variant: Option<Variant>,
    tokens: Vec<TokenId>,
    wk_answer: TokenId,
    cf_answer: Option<TokenId>,
    object_ids: Vec<usize>,
    image: Option<String>,
    baseline_row: Option<usize>,
    pair_index: Option<usize>,
}

/// Write `bytes` to `path` atomically (temp file + rename).
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| PvpError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| PvpError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| PvpError::io(path, e))?;
    Ok(())
}

fn image_bytes(img: &CellImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + img.pixels.len() * 4);
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    for &p in &img.pixels {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

fn mask_bytes(img: &CellImage) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    out.extend_from_slice(&(img.masks.len() as u32).to_le_bytes());
    let n_bytes = (img.width * img.height).div_ceil(8);
    for mask in &img.masks {
        out.extend_from_slice(&(mask.object_id as u32).to_le_bytes());
        let mut packed = vec![0u8; n_bytes];
        for (i, &bit) in mask.bits.iter().enumerate() {
            if bit {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    out
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("slice of 4")))
        .ok_or_else(|| PvpError::Integrity(format!("truncated {what}")))
}

fn decode_image(bytes: &[u8], name: &str) -> Result<(usize, usize, Vec<f64>)> {
    let w = read_u32(bytes, 0, name)? as usize;
    let h = read_u32(bytes, 4, name)? as usize;
    let expected = 8 + w * h * 3 * 4;
    if bytes.len() != expected {
        return Err(PvpError::Integrity(format!(
            "{name}: expected {expected} bytes for {w}x{h}, got {}",
            bytes.len()
        )));
    }
    let pixels = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect();
    Ok((w, h, pixels))
}

fn decode_masks(bytes: &[u8], name: &str, w: usize, h: usize) -> Result<Vec<ObjectMask>> {
    let mw = read_u32(bytes, 0, name)? as usize;
    let mh = read_u32(bytes, 4, name)? as usize;
    if (mw, mh) != (w, h) {
        return Err(PvpError::Integrity(format!(
            "{name}: mask dims {mw}x{mh} do not match image {w}x{h}"
        )));
    }
    let n = read_u32(bytes, 8, name)? as usize;
    let n_bytes = (w * h).div_ceil(8);
    let mut offset = 12;
    let mut masks = Vec::with_capacity(n);
    for _ in 0..n {
        let object_id = read_u32(bytes, offset, name)? as usize;
        offset += 4;
        let packed = bytes
            .get(offset..offset + n_bytes)
            .ok_or_else(|| PvpError::Integrity(format!("truncated {name}")))?;
        offset += n_bytes;
        let bits = (0..w * h).map(|i| packed[i / 8] & (1 << (i % 8)) != 0).collect();
        masks.push(ObjectMask { object_id, bits });
    }
    if offset != bytes.len() {
        return Err(PvpError::Integrity(format!("{name}: trailing bytes")));
    }
    Ok(masks)
}

fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.label()))
}

/// Persist the dataset and return the manifest actually written (with file
/// digests and the integrity checksum filled in).
pub fn write_dataset(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images")).map_err(|e| PvpError::io(dir, e))?;
    fs::create_dir_all(dir.join("masks")).map_err(|e| PvpError::io(dir, e))?;

    let universe_file = UniverseFile {
        palette: bundle.palette.clone(),
        objects: bundle.universe.clone(),
    };
    let universe_json = serde_json::to_vec_pretty(&universe_file)
        .map_err(|e| PvpError::Generation(format!("universe encode: {e}")))?;
    atomic_write(dir.join("universe.json"), &universe_json)?;

    // Images and masks, each unique image written once.
    let mut written: BTreeMap<String, &Arc<CellImage>> = BTreeMap::new();
    for split in [Split::Train, Split::SteerFit, Split::Eval] {
        for s in bundle.split(split) {
            if let (Some(id), Some(img)) = (&s.image_id, &s.image) {
                written.entry(id.clone()).or_insert(img);
            }
        }
    }
    for (id, img) in &written {
        atomic_write(dir.join("images").join(format!("{id}.bin")), &image_bytes(img))?;
        atomic_write(dir.join("masks").join(format!("{id}.bin")), &mask_bytes(img))?;
    }

    // Sample records.
    for split in [Split::Train, Split::SteerFit, Split::Eval] {
        let mut lines = Vec::new();
        for s in bundle.split(split) {
            let record = SampleRecord {
                id: s.id.clone(),
                task: s.task,
                prompt_kind: s.prompt_kind,
                variant: s.variant,
                tokens: s.tokens.clone(),
                wk_answer: s.wk_answer,
                cf_answer: s.cf_answer,
                object_ids: s.object_ids.clone(),
                image: s.image_id.clone(),
                baseline_row: s.image.as_ref().and_then(|i| i.baseline_row),
                pair_index: s.pair_index,
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| PvpError::Generation(format!("record encode: {e}")))?;
            lines.push(line);
        }
        atomic_write(split_path(dir, split), (lines.join("\n") + "\n").as_bytes())?;
    }

    // Manifest with per-file digests and the integrity checksum.
    let mut manifest = bundle.manifest.clone();
    manifest.file_digests = BTreeMap::new();
    manifest
        .file_digests
        .insert("universe.json".into(), digest_file(dir.join("universe.json"))?);
    for split in [Split::Train, Split::SteerFit, Split::Eval] {
        let name = format!("{}.jsonl", split.label());
        manifest
            .file_digests
            .insert(name.clone(), digest_file(dir.join(&name))?);
    }
    manifest
        .file_digests
        .insert("images".into(), crate::digest::digest_dir(dir.join("images"))?);
    manifest
        .file_digests
        .insert("masks".into(), crate::digest::digest_dir(dir.join("masks"))?);
    manifest.integrity = manifest.compute_integrity();
    let manifest_json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| PvpError::Generation(format!("manifest encode: {e}")))?;
    atomic_write(dir.join("manifest.json"), &manifest_json)?;
    Ok(manifest)
}

/// Digest identifying a persisted dataset: the manifest file's digest.
pub fn dataset_digest(dir: impl AsRef<Path>) -> Result<String> {
    digest_file(dir.as_ref().join("manifest.json"))
}

fn load_split(
    dir: &Path,
    split: Split,
    images: &mut BTreeMap<String, Arc<CellImage>>,
) -> Result<Vec<Sample>> {
    let path = split_path(dir, split);
    let text = fs::read_to_string(&path).map_err(|e| PvpError::io(&path, e))?;
    let mut samples = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(line).map_err(|e| PvpError::Load {
            index,
            message: format!("{}: {e}", path.display()),
        })?;
        let image = match &record.image {
            Some(id) => Some(load_image(dir, id, record.baseline_row, images).map_err(|e| {
                PvpError::Load {
                    index,
                    message: format!("image `{id}`: {e}"),
                }
            })?),
            None => None,
        };
        if record.variant.is_some() && record.image.is_none() {
            return Err(PvpError::Load {
                index,
                message: format!("sample `{}`: WK/CF variants require an image", record.id),
            });
        }
        samples.push(Sample {
            id: record.id,
            task: record.task,
            prompt_kind: record.prompt_kind,
            variant: record.variant,
            tokens: record.tokens,
            wk_answer: record.wk_answer,
            cf_answer: record.cf_answer,
            object_ids: record.object_ids,
            image_id: record.image,
            image,
            pair_index: record.pair_index,
        });
    }
    Ok(samples)
}

fn load_image(
    dir: &Path,
    id: &str,
    baseline_row: Option<usize>,
    cache: &mut BTreeMap<String, Arc<CellImage>>,
) -> Result<Arc<CellImage>> {
    if let Some(img) = cache.get(id) {
        return Ok(img.clone());
    }
    let ipath = dir.join("images").join(format!("{id}.bin"));
    let ibytes = fs::read(&ipath).map_err(|e| PvpError::io(&ipath, e))?;
    let (w, h, pixels) = decode_image(&ibytes, &format!("images/{id}.bin"))?;
    let mpath = dir.join("masks").join(format!("{id}.bin"));
    let mbytes = fs::read(&mpath).map_err(|e| PvpError::io(&mpath, e))?;
    let masks = decode_masks(&mbytes, &format!("masks/{id}.bin"), w, h)?;
    let img = Arc::new(CellImage {
        width: w,
        height: h,
        pixels,
        masks,
        baseline_row,
    });
    cache.insert(id.to_string(), img.clone());
    Ok(img)
}

/// Load a persisted dataset, verifying every file digest and the manifest
/// integrity checksum.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let manifest_text = fs::read_to_string(&mpath).map_err(|e| PvpError::io(&mpath, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&manifest_text).map_err(|e| PvpError::Load {
            index: 0,
            message: format!("manifest.json: {e}"),
        })?;
    if manifest.schema_version != 1 {
        return Err(PvpError::Integrity(format!(
            "unsupported dataset schema version {}",
            manifest.schema_version
        )));
    }
    if manifest.integrity != manifest.compute_integrity() {
        return Err(PvpError::Integrity(
            "manifest integrity checksum does not match its contents".into(),
        ));
    }
    for (name, expected) in &manifest.file_digests {
        let actual = match name.as_str() {
            "images" | "masks" => crate::digest::digest_dir(dir.join(name))?,
            _ => digest_file(dir.join(name))?,
        };
        if &actual != expected {
            return Err(PvpError::Integrity(format!(
                "digest mismatch for {name}: manifest {expected}, disk {actual}"
            )));
        }
    }

    let upath = dir.join("universe.json");
    let universe_text = fs::read_to_string(&upath).map_err(|e| PvpError::io(&upath, e))?;
    let universe_file: UniverseFile =
        serde_json::from_str(&universe_text).map_err(|e| PvpError::Load {
            index: 0,
            message: format!("universe.json: {e}"),
        })?;
    let vocab = Vocab::build(&universe_file.palette, &universe_file.objects)?;

    let mut images = BTreeMap::new();
    let train = load_split(dir, Split::Train, &mut images)?;
    let steerfit = load_split(dir, Split::SteerFit, &mut images)?;
    let eval = load_split(dir, Split::Eval, &mut images)?;

    Ok(DatasetBundle {
        seed: manifest.seed,
        config: manifest.config.clone(),
        universe: universe_file.objects,
        palette: universe_file.palette,
        vocab,
        train,
        steerfit,
        eval,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetConfig};

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            n_objects: 8,
            n_eval_objects: 2,
            train_this_repeats: 1,
            train_most_repeats: 1,
            train_text_most_repeats: 1,
            steer_repeats: 1,
            eval_wk_repeats: 1,
            eval_cf_repeats: 1,
            size_this_repeats: 1,
            size_most_repeats: 1,
            size_text_most_repeats: 1,
            size_steer_repeats: 1,
            size_eval_wk_repeats: 1,
            size_eval_cf_repeats: 1,
            size_aux_pairs: 6,
            size_aux_repeats: 1,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bundle = generate_dataset(&small_config(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("a");
        write_dataset(&bundle, &d1).unwrap();
        let loaded = read_dataset(&d1).unwrap();

        // Writing the loaded bundle again produces identical digests.
        let d2 = dir.path().join("b");
        write_dataset(&loaded, &d2).unwrap();
        assert_eq!(dataset_digest(&d1).unwrap(), dataset_digest(&d2).unwrap());

        assert_eq!(loaded.train.len(), bundle.train.len());
        for (a, b) in bundle.eval.iter().zip(&loaded.eval) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.image.as_deref(), b.image.as_deref());
        }
    }

    #[test]
    fn truncated_split_file_is_a_load_error() {
        let bundle = generate_dataset(&small_config(), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = write_dataset(&bundle, dir.path()).unwrap();
        // Truncate eval.jsonl mid-record and refresh its digest so the load
        // reaches the parser.
        let path = dir.path().join("eval.jsonl");
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        manifest
            .file_digests
            .insert("eval.jsonl".into(), digest_file(&path).unwrap());
        manifest.integrity = manifest.compute_integrity();
        fs::write(
            dir.path().join("manifest.json"),
            serde_json::to_vec_pretty(&manifest).unwrap(),
        )
        .unwrap();
        let err = read_dataset(dir.path());
        assert!(matches!(err, Err(PvpError::Load { .. })), "{err:?}");
    }

    #[test]
    fn tampered_file_fails_digest_check() {
        let bundle = generate_dataset(&small_config(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&bundle, dir.path()).unwrap();
        let path = dir.path().join("train.jsonl");
        let mut text = fs::read_to_string(&path).unwrap();
        text.push('\n');
        fs::write(&path, text).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(PvpError::Integrity(_))
        ));
    }

    #[test]
    fn tampered_manifest_seed_fails_integrity() {
        let bundle = generate_dataset(&small_config(), 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&bundle, dir.path()).unwrap();
        let mut tampered = manifest.clone();
        tampered.seed += 1;
        fs::write(
            dir.path().join("manifest.json"),
            serde_json::to_vec_pretty(&tampered).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(PvpError::Integrity(_))
        ));
    }
}
