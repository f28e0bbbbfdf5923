//! Flat parameter storage with a declared tensor layout.
//!
//! All weights live in one `Vec<f64>`; the layout names every tensor and its
//! offset, which makes Adam updates, gradient clipping, digests, checkpoint
//! serialization and finite-difference probing uniform and order-stable.
//! Values are always kept on the f32 grid so the in-memory model and its
//! float32 checkpoint are behaviorally identical.

use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PvpError, Result};
use crate::model::config::ModelConfig;

const INIT_STD: f64 = 0.02;
const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Offset and shape of one tensor inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorDef {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    /// Gaussian-initialized projection (vs. a norm gain/shift).
    pub gaussian: bool,
}

impl TensorDef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Indices into the layout's tensor list for one transformer block.
#[derive(Debug, Clone, Copy)]
pub struct LayerRefs {
    pub ln1_gain: usize,
    pub ln1_shift: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_gain: usize,
    pub ln2_shift: usize,
    pub mlp_in: usize,
    pub mlp_out: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub defs: Vec<TensorDef>,
    pub tok_embed: usize,
    pub text_pos: usize,
    pub patch_proj: usize,
    pub img_pos: usize,
    pub blank_image: usize,
    pub layers: Vec<LayerRefs>,
    pub final_gain: usize,
    pub final_shift: usize,
    pub unembed: Option<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.d_model;
        let mut defs: Vec<TensorDef> = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, rows: usize, cols: usize, gaussian: bool| -> usize {
            let def = TensorDef {
                name,
                rows,
                cols,
                offset,
                gaussian,
            };
            offset += def.len();
            defs.push(def);
            defs.len() - 1
        };

        let tok_embed = push("tok_embed".into(), cfg.vocab_size, d, true);
        let text_pos = push("text_pos".into(), cfg.max_seq, d, true);
        let patch_proj = push("patch_proj".into(), cfg.patch_dim(), d, true);
        let img_pos = push("img_pos".into(), cfg.n_image_tokens, d, true);
        let blank_image = push("blank_image".into(), 1, d, true);

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            layers.push(LayerRefs {
                ln1_gain: push(format!("layer{l}.ln1_gain"), 1, d, false),
                ln1_shift: push(format!("layer{l}.ln1_shift"), 1, d, false),
                wq: push(format!("layer{l}.wq"), d, d, true),
                wk: push(format!("layer{l}.wk"), d, d, true),
                wv: push(format!("layer{l}.wv"), d, d, true),
                wo: push(format!("layer{l}.wo"), d, d, true),
                ln2_gain: push(format!("layer{l}.ln2_gain"), 1, d, false),
                ln2_shift: push(format!("layer{l}.ln2_shift"), 1, d, false),
                mlp_in: push(format!("layer{l}.mlp_in"), d, cfg.mlp_hidden, true),
                mlp_out: push(format!("layer{l}.mlp_out"), cfg.mlp_hidden, d, true),
            });
        }

        let final_gain = push("final_gain".into(), 1, d, false);
        let final_shift = push("final_shift".into(), 1, d, false);
        let unembed = if cfg.tie_unembedding {
            None
        } else {
            Some(push("unembed".into(), cfg.vocab_size, d, true))
        };

        Layout {
            defs,
            tok_embed,
            text_pos,
            patch_proj,
            img_pos,
            blank_image,
            layers,
            final_gain,
            final_shift,
            unembed,
            total: offset,
        }
    }
}

/// Model weights: config, layout and the flat value buffer.
#[derive(Debug, Clone)]
pub struct Params {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl Params {
    /// Gaussian init (std 0.02) for projections and embeddings, ones for norm
    /// gains, zeros for norm shifts. Values are snapped to the f32 grid.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Params> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut data = vec![0.0f64; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        for def in &layout.defs {
            let slice = &mut data[def.range()];
            if def.gaussian {
                for x in slice.iter_mut() {
                    *x = normal.sample(&mut rng) as f32 as f64;
                }
            } else if def.name.ends_with("gain") {
                slice.fill(1.0);
            }
        }
        Ok(Params {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Params> {
        config.validate()?;
        let layout = Layout::new(config);
        let data = vec![0.0f64; layout.total];
        Ok(Params {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn mat(&self, idx: usize) -> ArrayView2<'_, f64> {
        let def = &self.layout.defs[idx];
        ArrayView2::from_shape((def.rows, def.cols), &self.data[def.range()])
            .expect("layout ranges are consistent")
    }

    pub fn vec(&self, idx: usize) -> &[f64] {
        &self.data[self.layout.defs[idx].range()]
    }

    /// Snap every weight to the f32 grid. Training ends with this so the
    /// in-memory model matches its float32 checkpoint bit for bit.
    pub fn quantize_f32(&mut self) {
        for x in self.data.iter_mut() {
            *x = *x as f32 as f64;
        }
    }

    fn tensor_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for def in &self.layout.defs {
            for &x in &self.data[def.range()] {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        bytes
    }

    /// Hex SHA-256 over the float32 tensor stream in declared order.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.tensor_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    param_digest: String,
    /// Digest of the dataset the checkpoint was trained on, when known.
    trained_on: Option<String>,
}

/// Write `params` as a binary checkpoint: little-endian u32 header length,
/// JSON header, then float32 tensors in declared order.
pub fn checkpoint_save(
    params: &Params,
    trained_on: Option<&str>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: params.config.clone(),
        param_digest: params.digest(),
        trained_on: trained_on.map(str::to_string),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| PvpError::Integrity(format!("checkpoint header encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&params.tensor_bytes());
    let mut file = fs::File::create(path).map_err(|e| PvpError::io(path, e))?;
    file.write_all(&out).map_err(|e| PvpError::io(path, e))?;
    Ok(())
}

/// Load a checkpoint, verifying the embedded parameter digest.
/// Returns the params and the recorded dataset digest, if any.
pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<(Params, Option<String>)> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| PvpError::io(path, e))?;
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|e| PvpError::io(path, e))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|e| PvpError::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| PvpError::Integrity(format!("checkpoint header decode: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(PvpError::Integrity(format!(
            "unsupported checkpoint format version {}",
            header.format_version
        )));
    }
    header.config.validate()?;

    let layout = Layout::new(&header.config);
    let mut tensor_bytes = vec![0u8; layout.total * 4];
    file.read_exact(&mut tensor_bytes)
        .map_err(|e| PvpError::io(path, e))?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing).map_err(|e| PvpError::io(path, e))? != 0 {
        return Err(PvpError::Integrity(
            "checkpoint has trailing bytes after declared tensors".into(),
        ));
    }

    let mut data = vec![0.0f64; layout.total];
    for (i, chunk) in tensor_bytes.chunks_exact(4).enumerate() {
        data[i] = f32::from_le_bytes(chunk.try_into().expect("chunk of 4")) as f64;
    }
    let params = Params {
        config: header.config.clone(),
        layout,
        data,
    };
    let digest = params.digest();
    if digest != header.param_digest {
        return Err(PvpError::Integrity(format!(
            "checkpoint digest mismatch: header {} vs data {digest}",
            header.param_digest
        )));
    }
    Ok((params, header.trained_on))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            mlp_hidden: 32,
            vocab_size: 11,
            patch_px: 8,
            n_image_tokens: 4,
            max_seq: 16,
            tie_unembedding: true,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        let a = Params::init(&cfg, 7).unwrap();
        let b = Params::init(&cfg, 7).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = Params::init(&cfg, 8).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn norm_gains_start_at_one() {
        let cfg = tiny_config();
        let p = Params::init(&cfg, 1).unwrap();
        for l in &p.layout.layers {
            assert!(p.vec(l.ln1_gain).iter().all(|&x| x == 1.0));
            assert!(p.vec(l.ln2_gain).iter().all(|&x| x == 1.0));
            assert!(p.vec(l.ln1_shift).iter().all(|&x| x == 0.0));
        }
        assert!(p.vec(p.layout.final_gain).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = tiny_config();
        let p = Params::init(&cfg, 1).unwrap();
        let d = cfg.d_model;
        let expected = cfg.vocab_size * d          // token embeddings (tied unembedding)
            + cfg.max_seq * d                      // text positions
            + cfg.patch_dim() * d                  // patch projection
            + cfg.n_image_tokens * d               // image positions
            + d                                    // blank-image token
            + cfg.n_layers * (4 * d * d + 2 * d * cfg.mlp_hidden + 4 * d)
            + 2 * d; // final norm
        assert_eq!(p.n_params(), expected);

        let mut untied = cfg.clone();
        untied.tie_unembedding = false;
        let p2 = Params::init(&untied, 1).unwrap();
        assert_eq!(p2.n_params(), expected + cfg.vocab_size * d);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut cfg = tiny_config();
        cfg.d_model = 65;
        cfg.n_heads = 4;
        assert!(matches!(Params::init(&cfg, 0), Err(PvpError::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = Params::init(&tiny_config(), 3).unwrap();
        checkpoint_save(&p, Some("dataset-digest"), &path).unwrap();
        let (loaded, trained_on) = checkpoint_load(&path).unwrap();
        assert_eq!(trained_on.as_deref(), Some("dataset-digest"));
        assert_eq!(loaded.data, p.data);

        let path2 = dir.path().join("model2.ckpt");
        checkpoint_save(&loaded, Some("dataset-digest"), &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_checkpoint_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = Params::init(&tiny_config(), 3).unwrap();
        checkpoint_save(&p, None, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            checkpoint_load(&path),
            Err(PvpError::Integrity(_))
        ));
    }
}
