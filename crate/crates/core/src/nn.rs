//! Configurable MLP classifiers, head doubling, and checkpoint I/O.
//!
//! A model owns one weight matrix and one bias vector per layer, ReLU
//! between layers, no activation on the output. A `Standard` head emits C
//! logits; doubling the last layer widens it to 2C while preserving the
//! original C output units bit-exactly, which is what lets dummy-class
//! training resume from a conventionally trained checkpoint.
//!
//! The dummy correspondence is an explicit permutation over classes: output
//! slot `C + perm[k]` is the dummy of class `k`. It defaults to the identity
//! and is persisted in checkpoints.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::rng::{derive_seed, Rng};
use crate::tensor::{Tensor, TensorError};

const CHECKPOINT_MAGIC: &[u8; 8] = b"DUCATCKP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum ModelError {
    DimensionMismatch { expected: usize, got: usize },
    AlreadyDoubled,
    NotDoubled,
    BadWidths(String),
    BadPermutation(String),
    BadMagic,
    UnsupportedVersion(u32),
    Truncated,
    Corrupt(String),
    Io(std::io::Error),
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::DimensionMismatch { expected, got } => {
                write!(f, "input dimension mismatch: expected {expected}, got {got}")
            }
            ModelError::AlreadyDoubled => write!(f, "last layer is already doubled"),
            ModelError::NotDoubled => write!(f, "model does not have a doubled head"),
            ModelError::BadWidths(msg) => write!(f, "bad layer widths: {msg}"),
            ModelError::BadPermutation(msg) => write!(f, "bad dummy permutation: {msg}"),
            ModelError::BadMagic => write!(f, "bad magic: not a checkpoint file"),
            ModelError::UnsupportedVersion(v) => write!(f, "unsupported checkpoint version {v}"),
            ModelError::Truncated => write!(f, "truncated checkpoint file"),
            ModelError::Corrupt(msg) => write!(f, "corrupt checkpoint: {msg}"),
            ModelError::Io(e) => write!(f, "io error: {e}"),
            ModelError::Tensor(e) => write!(f, "tensor error: {e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e)
    }
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Output-head layout: C logits, or 2C with dummy slots appended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Standard,
    Ducat,
}

/// Initialization for the new output units created by head doubling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DummyRowInit {
    /// Scaled-uniform fan-in draws, independent of the original units.
    Fresh,
    /// Copy of the paired original unit plus Gaussian noise.
    CopyWithNoise(f64),
}

/// Seeded initialization scheme. The same spec always produces the same
/// parameters.
#[derive(Debug, Clone)]
pub struct InitSpec {
    pub seed: u64,
    pub dummy_row_init: DummyRowInit,
}

impl InitSpec {
    pub fn new(seed: u64) -> Self {
        InitSpec {
            seed,
            dummy_row_init: DummyRowInit::Fresh,
        }
    }
}

struct Layer {
    /// `[fan_in, fan_out]`, row-major; output unit k is column k.
    weight: Tensor,
    bias: Tensor,
}

/// Feed-forward ReLU classifier.
pub struct MlpModel {
    widths: Vec<usize>,
    layers: Vec<Layer>,
    num_classes: usize,
    head_mode: HeadMode,
    dummy_perm: Vec<usize>,
}

fn uniform_fan_in(rng: &mut Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.range_f64(-bound, bound)).collect()
}

fn validate_perm(perm: &[usize], c: usize) -> ModelResult<()> {
    if perm.len() != c {
        return Err(ModelError::BadPermutation(format!(
            "length {} for {} classes",
            perm.len(),
            c
        )));
    }
    let mut seen = vec![false; c];
    for &p in perm {
        if p >= c || seen[p] {
            return Err(ModelError::BadPermutation(format!("not a permutation: {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(())
}

impl MlpModel {
    /// Standard-head model: `input_dim -> hidden... -> num_classes`.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        init: &InitSpec,
    ) -> ModelResult<MlpModel> {
        if input_dim == 0 || num_classes < 2 || hidden.iter().any(|&h| h == 0) {
            return Err(ModelError::BadWidths(format!(
                "input {input_dim}, hidden {hidden:?}, classes {num_classes}"
            )));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(num_classes);

        let mut rng = Rng::new(derive_seed(init.seed, "init", &[]));
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weight = Tensor::new(
                &[fan_in, fan_out],
                uniform_fan_in(&mut rng, fan_in, fan_in * fan_out),
            )?
            .requires_grad();
            let bias = Tensor::zeros(&[fan_out]).requires_grad();
            layers.push(Layer { weight, bias });
        }
        Ok(MlpModel {
            widths,
            layers,
            num_classes,
            head_mode: HeadMode::Standard,
            dummy_perm: (0..num_classes).collect(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn head_mode(&self) -> HeadMode {
        self.head_mode
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Class-to-dummy-slot permutation: class k pairs with slot
    /// `C + dummy_perm()[k]`.
    pub fn dummy_perm(&self) -> &[usize] {
        &self.dummy_perm
    }

    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// All parameter tensors in a stable order (weight, bias per layer).
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            out.push(layer.weight.clone());
            out.push(layer.bias.clone());
        }
        out
    }

    pub fn zero_grads(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    /// Logits for a `[B, input_dim]` batch.
    pub fn forward(&self, x: &Tensor) -> ModelResult<Tensor> {
        let shape = x.shape();
        let got = *shape.last().unwrap_or(&0);
        if shape.len() != 2 || got != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim(),
                got,
            });
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?.add_row(&layer.bias)?;
            if i != last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Widens the output layer from C to 2C units.
    ///
    /// The original C columns (and biases) are preserved bit-exactly, so the
    /// first C logits of the doubled model equal the source model's logits
    /// until training resumes. New units follow `init.dummy_row_init`; the
    /// optional permutation fixes the class-to-dummy pairing (identity by
    /// default).
    pub fn double_last_layer(
        &self,
        init: &InitSpec,
        perm: Option<Vec<usize>>,
    ) -> ModelResult<MlpModel> {
        if self.head_mode == HeadMode::Ducat {
            return Err(ModelError::AlreadyDoubled);
        }
        let c = self.num_classes;
        let perm = perm.unwrap_or_else(|| (0..c).collect());
        validate_perm(&perm, c)?;

        let fan_in = self.widths[self.widths.len() - 2];
        let old = self.layers.last().unwrap();
        let old_w = old.weight.items();
        let old_b = old.bias.items();

        let mut rng = Rng::new(derive_seed(init.seed, "dummy-head", &[]));
        // Column layout: slot C + j extends each weight row; for
        // CopyWithNoise, slot C + perm[k] starts from class k's column.
        let mut new_w = vec![0.0; fan_in * 2 * c];
        let mut new_b = vec![0.0; 2 * c];
        for r in 0..fan_in {
            new_w[r * 2 * c..r * 2 * c + c].copy_from_slice(&old_w[r * c..(r + 1) * c]);
        }
        new_b[..c].copy_from_slice(&old_b);
        match init.dummy_row_init {
            DummyRowInit::Fresh => {
                for r in 0..fan_in {
                    for j in 0..c {
                        new_w[r * 2 * c + c + j] = uniform_fan_in(&mut rng, fan_in, 1)[0];
                    }
                }
                // biases of fresh units start at zero, like `new`
            }
            DummyRowInit::CopyWithNoise(sigma) => {
                let mut inv = vec![0usize; c];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                for r in 0..fan_in {
                    for j in 0..c {
                        let src = inv[j];
                        new_w[r * 2 * c + c + j] = old_w[r * c + src] + sigma * rng.normal();
                    }
                }
                for (j, nb) in new_b[c..].iter_mut().enumerate() {
                    *nb = old_b[inv[j]] + sigma * rng.normal();
                }
            }
        }

        let mut widths = self.widths.clone();
        *widths.last_mut().unwrap() = 2 * c;
        let mut layers: Vec<Layer> = self
            .layers
            .iter()
            .take(self.layers.len() - 1)
            .map(|l| Layer {
                weight: Tensor::new(&l.weight.shape(), l.weight.items())
                    .unwrap()
                    .requires_grad(),
                bias: Tensor::new(&l.bias.shape(), l.bias.items())
                    .unwrap()
                    .requires_grad(),
            })
            .collect();
        layers.push(Layer {
            weight: Tensor::new(&[fan_in, 2 * c], new_w)?.requires_grad(),
            bias: Tensor::new(&[2 * c], new_b)?.requires_grad(),
        });
        Ok(MlpModel {
            widths,
            layers,
            num_classes: c,
            head_mode: HeadMode::Ducat,
            dummy_perm: perm,
        })
    }

    /// Deep copy with fresh parameter tensors (no shared state, no grads).
    pub fn clone_model(&self) -> MlpModel {
        MlpModel {
            widths: self.widths.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Tensor::new(&l.weight.shape(), l.weight.items())
                        .unwrap()
                        .requires_grad(),
                    bias: Tensor::new(&l.bias.shape(), l.bias.items())
                        .unwrap()
                        .requires_grad(),
                })
                .collect(),
            num_classes: self.num_classes,
            head_mode: self.head_mode,
            dummy_perm: self.dummy_perm.clone(),
        }
    }

    // ---- checkpoint format --------------------------------------------
    //
    // magic "DUCATCKP", version u32 LE, C u32, head_mode u8, perm C x u32,
    // width count u32, widths u32 each, then per layer the weight block
    // (row-major f64 LE) followed by the bias block.

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.push(match self.head_mode {
            HeadMode::Standard => 0,
            HeadMode::Ducat => 1,
        });
        for &p in &self.dummy_perm {
            out.extend_from_slice(&(p as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.widths.len() as u32).to_le_bytes());
        for &w in &self.widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for layer in &self.layers {
            for v in layer.weight.items() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in layer.bias.items() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> ModelResult<MlpModel> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        let c = cur.u32()? as usize;
        if c < 2 {
            return Err(ModelError::Corrupt(format!("num_classes {c}")));
        }
        let head_mode = match cur.take(1)?[0] {
            0 => HeadMode::Standard,
            1 => HeadMode::Ducat,
            m => return Err(ModelError::Corrupt(format!("head mode byte {m}"))),
        };
        let mut perm = Vec::with_capacity(c);
        for _ in 0..c {
            perm.push(cur.u32()? as usize);
        }
        validate_perm(&perm, c)?;
        let nwidths = cur.u32()? as usize;
        if nwidths < 2 {
            return Err(ModelError::Corrupt(format!("width count {nwidths}")));
        }
        let mut widths = Vec::with_capacity(nwidths);
        for _ in 0..nwidths {
            widths.push(cur.u32()? as usize);
        }
        let expected_out = match head_mode {
            HeadMode::Standard => c,
            HeadMode::Ducat => 2 * c,
        };
        if *widths.last().unwrap() != expected_out || widths.iter().any(|&w| w == 0) {
            return Err(ModelError::Corrupt(format!("widths {widths:?}")));
        }
        let mut layers = Vec::with_capacity(nwidths - 1);
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut wdata = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in * fan_out {
                wdata.push(cur.f64()?);
            }
            let mut bdata = Vec::with_capacity(fan_out);
            for _ in 0..fan_out {
                bdata.push(cur.f64()?);
            }
            layers.push(Layer {
                weight: Tensor::new(&[fan_in, fan_out], wdata)?.requires_grad(),
                bias: Tensor::new(&[fan_out], bdata)?.requires_grad(),
            });
        }
        if cur.pos != bytes.len() {
            return Err(ModelError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(MlpModel {
            widths,
            layers,
            num_classes: c,
            head_mode,
            dummy_perm: perm,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> ModelResult<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> ModelResult<MlpModel> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        MlpModel::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> ModelResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> ModelResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> ModelResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
