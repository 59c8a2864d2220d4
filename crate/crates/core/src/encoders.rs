//! Global visual and textual feature extractors.
//!
//! Two modes: a toy patch/token transformer pair trained end to end, and an
//! embedding-backed mode where features are looked up from a file and
//! receive no gradient.
//!
//! Embedding files are JSON:
//!
//! ```json
//! {"format": "propot-embeddings", "version": 1, "dim": 64,
//!  "entries": {"image:0": [0.1, ...], "text:0": [...]}}
//! ```
//!
//! Keys are `image:<corpus image index>` and `text:<corpus text index>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Raster, TokenSequence, IMAGE_CHANNELS, IMAGE_HEIGHT, IMAGE_WIDTH, TEXT_LEN};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, LayerNorm, Linear, ParamGroup, ParamStore, TransformerStack};

/// Average-pooling factor applied to the 384×128 input before patching.
pub const IMAGE_POOL: usize = 4;
/// Patch side on the pooled grid.
pub const PATCH: usize = 8;
pub const GRID_ROWS: usize = IMAGE_HEIGHT / IMAGE_POOL / PATCH;
pub const GRID_COLS: usize = IMAGE_WIDTH / IMAGE_POOL / PATCH;
/// Image token count including the class token.
pub const IMAGE_TOKENS: usize = GRID_ROWS * GRID_COLS + 1;

pub const EMBEDDING_FORMAT: &str = "propot-embeddings";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Toy,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mode: EncoderMode,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("encoder width {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        Ok(())
    }
}

/// A B×d feature block for one modality with per-row identity labels.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub modality: Modality,
}

impl EmbeddingBatch {
    pub fn rows(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.features.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }
}

/// Encoder outputs for one batch. Token features are absent in
/// embedding-backed mode.
#[derive(Debug, Clone)]
pub struct Features {
    pub global: Tensor,
    pub tokens: Option<Tensor>,
}

/// Stacks rasters into a B×384×128×3 tensor centred around zero.
pub fn images_to_tensor(images: &[Raster], dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * IMAGE_HEIGHT * IMAGE_WIDTH * IMAGE_CHANNELS);
    for img in images {
        if img.height != IMAGE_HEIGHT || img.width != IMAGE_WIDTH {
            return Err(Error::Shape(format!("image is {}×{}, expected {IMAGE_HEIGHT}×{IMAGE_WIDTH}", img.height, img.width)));
        }
        data.extend(img.data.iter().map(|v| v - 0.5));
    }
    Ok(Tensor::from_vec(data, (images.len(), IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Average-pools rasters by [`IMAGE_POOL`] and centres them around zero,
/// giving a B×96×32×3 tensor.
pub fn pool_images(images: &[Raster], dtype: DType) -> Result<Tensor> {
    let (ph, pw) = (IMAGE_HEIGHT / IMAGE_POOL, IMAGE_WIDTH / IMAGE_POOL);
    let scale = 1.0 / (IMAGE_POOL * IMAGE_POOL) as f32;
    let mut data = vec![0f32; images.len() * ph * pw * IMAGE_CHANNELS];
    for (img, out) in images.iter().zip(data.chunks_mut(ph * pw * IMAGE_CHANNELS)) {
        if img.height != IMAGE_HEIGHT || img.width != IMAGE_WIDTH {
            return Err(Error::Shape(format!("image is {}×{}, expected {IMAGE_HEIGHT}×{IMAGE_WIDTH}", img.height, img.width)));
        }
        for y in 0..IMAGE_HEIGHT {
            let row = &img.data[y * IMAGE_WIDTH * IMAGE_CHANNELS..(y + 1) * IMAGE_WIDTH * IMAGE_CHANNELS];
            let dst = &mut out[(y / IMAGE_POOL) * pw * IMAGE_CHANNELS..(y / IMAGE_POOL + 1) * pw * IMAGE_CHANNELS];
            for (x, px) in row.chunks_exact(IMAGE_CHANNELS).enumerate() {
                let o = (x / IMAGE_POOL) * IMAGE_CHANNELS;
                for c in 0..IMAGE_CHANNELS {
                    dst[o + c] += px[c];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * scale - 0.5);
    }
    Ok(Tensor::from_vec(data, (images.len(), ph, pw, IMAGE_CHANNELS), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Pooled patch embedding, class token, pre-norm transformer.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub patch: Linear,
    pub cls: Var,
    pub pos: Var,
    pub blocks: TransformerStack,
    pub ln_post: LayerNorm,
    pub proj: Linear,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        let g = ParamGroup::Backbone;
        let d = cfg.dim;
        Ok(Self {
            patch: Linear::new(store, "image.patch", g, PATCH * PATCH * IMAGE_CHANNELS, d, false)?,
            cls: store.normal("image.cls", g, &[d], 0.02)?,
            pos: store.normal("image.pos", g, &[IMAGE_TOKENS, d], 0.02)?,
            blocks: TransformerStack::new(store, "image.blocks", g, cfg.depth, d, cfg.heads, false)?,
            ln_post: LayerNorm::new(store, "image.ln_post", g, d)?,
            proj: Linear::new(store, "image.proj", g, d, d, false)?,
        })
    }

    /// `pixels` is B×384×128×3.
    pub fn encode(&self, pixels: &Tensor) -> Result<Features> {
        let (b, h, w, c) = pixels.dims4().map_err(|_| Error::Shape(format!("image batch has shape {:?}", pixels.dims())))?;
        if (h, w, c) != (IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS) {
            return Err(Error::Shape(format!("image batch has shape {:?}, expected (B, 384, 128, 3)", pixels.dims())));
        }
        let (ph, pw) = (h / IMAGE_POOL, w / IMAGE_POOL);
        let pooled = pixels.reshape((b, ph, IMAGE_POOL, pw, IMAGE_POOL * c))?.sum(2)?;
        let pooled = pooled.reshape((b, ph, pw, IMAGE_POOL, c))?.sum(3)?;
        self.encode_pooled(&(pooled / (IMAGE_POOL * IMAGE_POOL) as f64)?)
    }

    /// `pooled` is B×96×32×3, as produced by [`pool_images`].
    pub fn encode_pooled(&self, pooled: &Tensor) -> Result<Features> {
        let (b, ph, pw, c) = pooled.dims4()?;
        if (ph, pw, c) != (IMAGE_HEIGHT / IMAGE_POOL, IMAGE_WIDTH / IMAGE_POOL, IMAGE_CHANNELS) {
            return Err(Error::Shape(format!("pooled image batch has shape {:?}", pooled.dims())));
        }
        let patches = pooled
            .reshape((b, GRID_ROWS, PATCH, GRID_COLS, PATCH * c))?
            .permute((0, 1, 3, 2, 4))?
            .contiguous()?
            .reshape((b, GRID_ROWS * GRID_COLS, PATCH * PATCH * c))?;
        let d = self.cls.dims()[0];
        let tokens = self.patch.forward(&patches)?;
        let cls = self.cls.as_tensor().reshape((1, 1, d))?.broadcast_as((b, 1, d))?;
        let x = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(self.pos.as_tensor())?;
        let x = self.blocks.forward(&x, None, None)?;
        let x = self.proj.forward(&self.ln_post.forward(&x)?)?;
        Ok(Features { global: x.narrow(1, 0, 1)?.squeeze(1)?, tokens: Some(x) })
    }
}

/// Token embedding, causal pre-norm transformer, EOS pooling.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_embed: Var,
    pub pos: Var,
    pub blocks: TransformerStack,
    pub ln_final: LayerNorm,
    pub proj: Linear,
    mask: Tensor,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, vocab_size: usize) -> Result<Self> {
        let g = ParamGroup::Backbone;
        let d = cfg.dim;
        Ok(Self {
            token_embed: store.normal("text.token_embed", g, &[vocab_size, d], 0.02)?,
            pos: store.normal("text.pos", g, &[TEXT_LEN, d], 0.01)?,
            blocks: TransformerStack::new(store, "text.blocks", g, cfg.depth, d, cfg.heads, false)?,
            ln_final: LayerNorm::new(store, "text.ln_final", g, d)?,
            proj: Linear::new(store, "text.proj", g, d, d, false)?,
            mask: causal_mask(TEXT_LEN, store.dtype(), store.device())?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embed.dims()[0]
    }

    pub fn encode(&self, seqs: &[TokenSequence]) -> Result<Features> {
        self.encode_prefix(seqs, false)
    }

    /// With `compact`, runs only the first `max(eos) + 1` positions of the
    /// batch. Attention is causal, so the pooled feature and every token
    /// feature up to EOS are unchanged; token features come back B×L×d.
    pub fn encode_prefix(&self, seqs: &[TokenSequence], compact: bool) -> Result<Features> {
        let b = seqs.len();
        let vocab = self.vocab_size() as u32;
        let mut ids = Vec::with_capacity(b * TEXT_LEN);
        let mut eos = Vec::with_capacity(b);
        for (row, s) in seqs.iter().enumerate() {
            if s.ids.len() != TEXT_LEN {
                return Err(Error::Shape(format!("token sequence of length {}, expected {TEXT_LEN}", s.ids.len())));
            }
            if let Some(&bad) = s.ids.iter().find(|&&i| i >= vocab) {
                return Err(Error::Shape(format!("token id {bad} outside vocabulary of {vocab}")));
            }
            ids.extend_from_slice(&s.ids);
            eos.push((row * TEXT_LEN + s.eos_position()) as u32);
        }
        let d = self.pos.dims()[1];
        let len = if compact { seqs.iter().map(|s| s.eos_position() + 1).max().unwrap_or(1) } else { TEXT_LEN };
        let ids: Vec<u32> = ids.chunks(TEXT_LEN).flat_map(|row| row[..len].iter().copied()).collect();
        let eos: Vec<u32> = eos.iter().enumerate().map(|(row, &e)| (e as usize - row * TEXT_LEN + row * len) as u32).collect();
        let ids = Tensor::from_vec(ids, b * len, &Device::Cpu)?;
        let x = self.token_embed.as_tensor().index_select(&ids, 0)?.reshape((b, len, d))?;
        let x = x.broadcast_add(&self.pos.as_tensor().narrow(0, 0, len)?)?;
        let mask = if len == TEXT_LEN { self.mask.clone() } else { self.mask.narrow(0, 0, len)?.narrow(1, 0, len)?.contiguous()? };
        let x = self.blocks.forward(&x, None, Some(&mask))?;
        let x = self.proj.forward(&self.ln_final.forward(&x)?)?;
        let eos = Tensor::from_vec(eos, b, &Device::Cpu)?;
        let global = x.reshape((b * len, d))?.index_select(&eos, 0)?;
        Ok(Features { global, tokens: Some(x) })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingFileRepr {
    format: String,
    version: u32,
    dim: usize,
    entries: BTreeMap<String, Vec<f32>>,
}

/// Instance key → feature vector map.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<String, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, entries: BTreeMap<String, Vec<f32>>) -> Result<Self> {
        if let Some((k, v)) = entries.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::EmbeddingFile(format!("entry `{k}` has {} values, expected {dim}", v.len())));
        }
        if let Some((k, _)) = entries.iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::EmbeddingFile(format!("entry `{k}` is not finite")));
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.entries
    }

    pub fn load(path: &Path) -> Result<Self> {
        let repr: EmbeddingFileRepr = serde_json::from_str(&fs::read_to_string(path)?)?;
        if repr.format != EMBEDDING_FORMAT {
            return Err(Error::EmbeddingFile(format!("unexpected format tag `{}`", repr.format)));
        }
        if repr.version != EMBEDDING_VERSION {
            return Err(Error::EmbeddingFile(format!("unsupported version {}", repr.version)));
        }
        Self::new(repr.dim, repr.entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let repr = EmbeddingFileRepr {
            format: EMBEDDING_FORMAT.into(),
            version: EMBEDDING_VERSION,
            dim: self.dim,
            entries: self.entries.clone(),
        };
        fs::write(path, serde_json::to_string(&repr)?)?;
        Ok(())
    }

    pub fn lookup(&self, keys: &[String], dtype: DType) -> Result<Tensor> {
        let mut data = Vec::with_capacity(keys.len() * self.dim);
        for k in keys {
            let row = self.entries.get(k).ok_or_else(|| Error::UnknownInstance(k.clone()))?;
            data.extend_from_slice(row);
        }
        Ok(Tensor::from_vec(data, (keys.len(), self.dim), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// The encoder pair used by training and evaluation.
#[derive(Debug, Clone)]
pub enum Encoders {
    Toy { image: ImageEncoder, text: TextEncoder },
    Lookup { table: EmbeddingTable, dtype: DType },
}

impl Encoders {
    pub fn toy(store: &mut ParamStore, cfg: &EncoderConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let image = ImageEncoder::new(store, cfg)?;
        let text = TextEncoder::new(store, cfg, vocab_size)?;
        Ok(Encoders::Toy { image, text })
    }

    pub fn embedding_backed(table: EmbeddingTable, dtype: DType) -> Self {
        Encoders::Lookup { table, dtype }
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoders::Toy { image, .. } => image.cls.dims()[0],
            Encoders::Lookup { table, .. } => table.dim(),
        }
    }

    pub fn needs_pixels(&self) -> bool {
        matches!(self, Encoders::Toy { .. })
    }

    /// Encodes corpus images. `pixels` must be given in toy mode (the
    /// already loaded, possibly augmented rasters) and is ignored otherwise.
    pub fn encode_images(&self, images: &[usize], pixels: Option<&[Raster]>) -> Result<Features> {
        match self {
            Encoders::Toy { image, .. } => {
                let rasters = pixels.ok_or_else(|| Error::Shape("toy image encoder needs pixels".into()))?;
                if rasters.len() != images.len() {
                    return Err(Error::Shape(format!("{} rasters for {} images", rasters.len(), images.len())));
                }
                image.encode_pooled(&pool_images(rasters, image.cls.dtype())?)
            }
            Encoders::Lookup { table, dtype } => {
                let keys: Vec<String> = images.iter().map(|&i| Corpus::image_key(i)).collect();
                Ok(Features { global: table.lookup(&keys, *dtype)?, tokens: None })
            }
        }
    }

    pub fn encode_texts(&self, texts: &[usize], tokens: &[TokenSequence]) -> Result<Features> {
        self.encode_texts_prefix(texts, tokens, false)
    }

    /// [`Encoders::encode_texts`] with the batch-prefix shortcut of
    /// [`TextEncoder::encode_prefix`].
    pub fn encode_texts_prefix(&self, texts: &[usize], tokens: &[TokenSequence], compact: bool) -> Result<Features> {
        match self {
            Encoders::Toy { text, .. } => text.encode_prefix(tokens, compact),
            Encoders::Lookup { table, dtype } => {
                let keys: Vec<String> = texts.iter().map(|&i| Corpus::text_key(i)).collect();
                Ok(Features { global: table.lookup(&keys, *dtype)?, tokens: None })
            }
        }
    }
}
