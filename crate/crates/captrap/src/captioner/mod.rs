//! Victim caption model: a small convolutional encoder feeding a recurrent
//! decoder with additive attention over the feature grid.
//!
//! The encoder is trained from scratch so the toolkit stays download-free.
//! Defenses tap the mean-pooled final encoder grid as "the" activation
//! vector of a sample.

mod decode;
mod net;
mod train;

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::tokenize;
use crate::tensor::Tensor;

pub use decode::{capture_activations, DecodeMode, DecodeResult};
pub use train::train_captioner;

pub const MAX_CAPTION_LEN: usize = 30;

/// Encoder channel progression; each stage halves the spatial resolution,
/// so a 64-pixel image becomes a 4x4 grid of FEAT_DIM-dim cells.
pub(crate) const ENC_CHANNELS: [usize; 4] = [8, 16, 32, 32];
pub const FEAT_DIM: usize = ENC_CHANNELS[3];

#[derive(Debug, thiserror::Error)]
pub enum CaptionError {
    #[error("no training records")]
    NoData,
    #[error("non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("image is {got}px, model expects {want}px square")]
    BadInputSize { got: usize, want: usize },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token table with reserved start/end/unknown entries at fixed indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

pub const START: usize = 0;
pub const END: usize = 1;
pub const UNK: usize = 2;

impl Vocab {
    pub fn build<'a>(captions: impl Iterator<Item = &'a str>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for caption in captions {
            set.extend(tokenize(caption));
        }
        let mut tokens = vec!["<start>".to_string(), "<end>".to_string(), "<unk>".to_string()];
        tokens.extend(set);
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty() // never true: specials are always present
    }

    pub fn index(&self, token: &str) -> usize {
        self.tokens[3..].binary_search_by(|t| t.as_str().cmp(token)).map(|i| i + 3).unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    /// start + caption tokens + end, as indices.
    pub fn encode(&self, caption: &str) -> Vec<usize> {
        let mut ids = vec![START];
        ids.extend(tokenize(caption).iter().map(|t| self.index(t)));
        ids.push(END);
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionHyper {
    pub epochs: usize,
    pub embed: usize,
    pub hidden: usize,
    pub attn: usize,
    pub lr: f64,
    pub seed: u64,
}

impl CaptionHyper {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self { epochs, embed: 24, hidden: 48, attn: 32, lr: 2e-3, seed }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionModel {
    pub vocab: Vocab,
    pub hyper: CaptionHyper,
    pub image_size: usize,
    pub loss_trace: Vec<f64>,
    pub(crate) params: Vec<Tensor>,
}

// Parameter layout. Conv stages first, then decoder matrices; every matrix
// multiplies row vectors on the left, so shapes read [input, output].
pub(crate) const P_EMBED: usize = 8;
pub(crate) const P_W_INIT: usize = 9;
pub(crate) const P_B_INIT: usize = 10;
pub(crate) const P_W_ATT: usize = 11;
pub(crate) const P_U_ATT: usize = 12;
pub(crate) const P_B_ATT: usize = 13;
pub(crate) const P_V_ATT: usize = 14;
pub(crate) const P_GRU: usize = 15; // 9 tensors: (W,U,b) for z, r, n gates
pub(crate) const P_W_OUT: usize = 24;
pub(crate) const P_B_OUT: usize = 25;

impl CaptionModel {
    pub fn new(vocab: Vocab, hyper: CaptionHyper, image_size: usize) -> Self {
        assert!(image_size % 16 == 0, "encoder downsamples by 16");
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut params = Vec::new();

        let mut conv_in = 3;
        for out in ENC_CHANNELS {
            let lim = (6.0 / (conv_in * 9) as f64).sqrt();
            params.push(Tensor::new(
                &[out, conv_in, 3, 3],
                (0..out * conv_in * 9).map(|_| rng.gen_range(-lim..lim)).collect(),
            ));
            params.push(Tensor::zeros(&[out]));
            conv_in = out;
        }

        let (e, h, a, d) = (hyper.embed, hyper.hidden, hyper.attn, FEAT_DIM);
        let v = vocab.len();
        let mat = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let lim = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-lim..lim)).collect())
        };
        params.push(mat(v, e, &mut rng)); // embedding
        params.push(mat(d, h, &mut rng)); // hidden init from pooled features
        params.push(Tensor::zeros(&[h]));
        params.push(mat(h, a, &mut rng)); // attention on hidden state
        params.push(mat(d, a, &mut rng)); // attention on grid cells
        params.push(Tensor::zeros(&[a]));
        params.push(mat(a, 1, &mut rng)); // attention readout
        for _ in 0..3 {
            params.push(mat(e + d, h, &mut rng));
            params.push(mat(h, h, &mut rng));
            params.push(Tensor::zeros(&[h]));
        }
        params.push(mat(h + d, v, &mut rng)); // output projection
        params.push(Tensor::zeros(&[v]));

        Self { vocab, hyper, image_size, loss_trace: Vec::new(), params }
    }

    pub fn grid(&self) -> usize {
        self.image_size / 16
    }

    pub fn cells(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }

    const MAGIC: &'static [u8; 8] = b"CAPCAP01";

    /// Weights as a flat binary next to a JSON sidecar (same path plus
    /// `.json`) holding everything needed to rebuild the model.
    pub fn save(&self, path: &Path) -> Result<(), CaptionError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(Self::MAGIC)?;
        f.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            f.write_all(&(p.shape().len() as u32).to_le_bytes())?;
            for &d in p.shape() {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in p.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        let sidecar = serde_json::json!({
            "vocab": self.vocab,
            "hyper": self.hyper,
            "image_size": self.image_size,
            "loss_trace": self.loss_trace,
        });
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar).unwrap())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CaptionError> {
        let bad = |msg: &str| CaptionError::Checkpoint { path: path.to_path_buf(), msg: msg.into() };
        let side = fs::read_to_string(sidecar_path(path))?;
        let side: serde_json::Value =
            serde_json::from_str(&side).map_err(|e| bad(&e.to_string()))?;
        let vocab: Vocab =
            serde_json::from_value(side["vocab"].clone()).map_err(|e| bad(&e.to_string()))?;
        let hyper: CaptionHyper =
            serde_json::from_value(side["hyper"].clone()).map_err(|e| bad(&e.to_string()))?;
        let image_size = side["image_size"].as_u64().ok_or_else(|| bad("image_size"))? as usize;
        let loss_trace: Vec<f64> =
            serde_json::from_value(side["loss_trace"].clone()).map_err(|e| bad(&e.to_string()))?;

        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)?;
        let n = u32::from_le_bytes(u32buf) as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            f.read_exact(&mut u32buf)?;
            let ndim = u32::from_le_bytes(u32buf) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                f.read_exact(&mut u32buf)?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut f64buf = [0u8; 8];
            for _ in 0..len {
                f.read_exact(&mut f64buf)?;
                data.push(f64::from_le_bytes(f64buf));
            }
            params.push(Tensor::new(&shape, data));
        }
        let model = Self { vocab, hyper, image_size, loss_trace, params };
        let fresh = Self::new(model.vocab.clone(), model.hyper, model.image_size);
        for (a, b) in model.params.iter().zip(fresh.params.iter()) {
            if a.shape() != b.shape() {
                return Err(bad("parameter shapes do not match the sidecar hyperparameters"));
            }
        }
        Ok(model)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}
