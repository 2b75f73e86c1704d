//! Model configuration, the named parameter store, and checkpoint I/O.
//!
//! Every learnable tensor lives in a [`ParameterStore`] under a dotted name,
//! tagged as belonging to the generative or inference network and optionally
//! frozen. The full shape table is derived from [`ModelConfig`] by
//! [`param_specs`], which is the single source of truth used by
//! initialization and by checkpoint validation.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;
use crate::error::{Result, VqagError};
use crate::tape::{Tape, Var};

const CKPT_MAGIC: &[u8; 8] = b"VQAGCKP1";
const CKPT_VERSION: u32 = 1;

/// Architecture hyperparameters. Defaults follow the reference configuration:
/// 300-d frozen word vectors, 32-d char embeddings with 100 CNN filters,
/// 300-d LSTM hidden states per direction, 200-d latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_vocab: usize,
    pub char_vocab: usize,
    pub d_word: usize,
    pub d_char: usize,
    pub char_filters: usize,
    pub char_filter_width: usize,
    pub word_len: usize,
    pub hidden: usize,
    pub latent: usize,
    pub dropout: f64,
    pub max_answer_len: usize,
    pub max_question_len: usize,
    pub logvar_clamp: f64,
}

impl ModelConfig {
    pub fn with_vocab(vocab: &Vocabulary) -> Self {
        ModelConfig {
            word_vocab: vocab.word_count(),
            char_vocab: vocab.char_count(),
            ..ModelConfig::default()
        }
    }

    /// Width of one embedded token: word vector plus char-CNN features.
    pub fn d_emb(&self) -> usize {
        self.d_word + self.char_filters
    }

    /// Attention hidden width (same as the LSTM hidden width).
    pub fn att_dim(&self) -> usize {
        self.hidden
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_vocab: 4,
            char_vocab: 2,
            d_word: 300,
            d_char: 32,
            char_filters: 100,
            char_filter_width: 5,
            word_len: 16,
            hidden: 300,
            latent: 200,
            dropout: 0.2,
            max_answer_len: 30,
            max_question_len: 20,
            logvar_clamp: 8.0,
        }
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamTag {
    Generative,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub tag: ParamTag,
    pub frozen: bool,
}

fn spec(name: &str, shape: Vec<usize>, tag: ParamTag, frozen: bool) -> ParamSpec {
    ParamSpec { name: name.to_string(), shape, tag, frozen }
}

fn bilstm_specs(prefix: &str, input: usize, hidden: usize, tag: ParamTag, out: &mut Vec<ParamSpec>) {
    for dir in ["fwd", "bwd"] {
        out.push(spec(&format!("{prefix}.{dir}.w_ih"), vec![4 * hidden, input], tag, false));
        out.push(spec(&format!("{prefix}.{dir}.w_hh"), vec![4 * hidden, hidden], tag, false));
        out.push(spec(&format!("{prefix}.{dir}.b"), vec![4 * hidden], tag, false));
    }
}

/// The complete parameter shape table for a configuration.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    use ParamTag::{Generative, Inference};
    let h = cfg.hidden;
    let k = cfg.latent;
    let att = cfg.att_dim();
    let d_emb = cfg.d_emb();
    let mut specs = vec![
        spec("embed.word", vec![cfg.word_vocab, cfg.d_word], Generative, true),
        spec("embed.char", vec![cfg.char_vocab, cfg.d_char], Generative, false),
        spec("charcnn.filters", vec![cfg.char_filter_width * cfg.d_char, cfg.char_filters], Generative, false),
        spec("charcnn.b", vec![cfg.char_filters], Generative, false),
    ];
    bilstm_specs("enc_ctx", d_emb, h, Generative, &mut specs);
    bilstm_specs("enc_q", d_emb, h, Inference, &mut specs);
    bilstm_specs("enc_ans", d_emb, h, Inference, &mut specs);
    bilstm_specs("enc_ca", 2 * h + 2, h, Generative, &mut specs);
    specs.extend([
        spec("latent.post_z.w", vec![2 * k, 4 * h], Inference, false),
        spec("latent.post_z.b", vec![2 * k], Inference, false),
        spec("latent.prior_z.w", vec![2 * k, 2 * h], Generative, false),
        spec("latent.prior_z.b", vec![2 * k], Generative, false),
        spec("latent.post_y.w", vec![2 * k, 4 * h], Inference, false),
        spec("latent.post_y.b", vec![2 * k], Inference, false),
        spec("latent.prior_y.w", vec![2 * k, 2 * h], Generative, false),
        spec("latent.prior_y.b", vec![2 * k], Generative, false),
        // pointer-network answer decoder
        spec("ans_dec.init.w", vec![h, k], Generative, false),
        spec("ans_dec.init.b", vec![h], Generative, false),
        spec("ans_dec.bos", vec![2 * h], Generative, false),
        spec("ans_dec.lstm.w_ih", vec![4 * h, 2 * h], Generative, false),
        spec("ans_dec.lstm.w_hh", vec![4 * h, h], Generative, false),
        spec("ans_dec.lstm.b", vec![4 * h], Generative, false),
        spec("ans_dec.att.w_enc", vec![att, 2 * h], Generative, false),
        spec("ans_dec.att.w_dec", vec![att, h], Generative, false),
        spec("ans_dec.att.b", vec![att], Generative, false),
        spec("ans_dec.att.v", vec![att], Generative, false),
        // question decoder with attention, copying, and a generation gate
        spec("q_dec.init.w", vec![h, k], Generative, false),
        spec("q_dec.init.b", vec![h], Generative, false),
        spec("q_dec.bos", vec![cfg.d_word], Generative, false),
        spec("q_dec.lstm.w_ih", vec![4 * h, cfg.d_word], Generative, false),
        spec("q_dec.lstm.w_hh", vec![4 * h, h], Generative, false),
        spec("q_dec.lstm.b", vec![4 * h], Generative, false),
        spec("q_dec.att.w_dec", vec![att, h], Generative, false),
        spec("q_dec.att.w_enc", vec![att, 2 * h], Generative, false),
        spec("q_dec.att.b", vec![att], Generative, false),
        spec("q_dec.att.v", vec![att], Generative, false),
        spec("q_dec.copy.w_dec", vec![att, h], Generative, false),
        spec("q_dec.copy.w_enc", vec![att, 2 * h], Generative, false),
        spec("q_dec.copy.b", vec![att], Generative, false),
        spec("q_dec.copy.v", vec![att], Generative, false),
        spec("q_dec.merge.w", vec![cfg.d_word, 3 * h], Generative, false),
        spec("q_dec.merge.b", vec![cfg.d_word], Generative, false),
        // output layer is tied to the frozen word embeddings; only a bias learns
        spec("q_dec.out.b", vec![cfg.word_vocab], Generative, false),
        spec("q_dec.gate.w", vec![1, h], Generative, false),
    ]);
    specs
}

#[derive(Debug, Clone)]
struct Tensor {
    value: ArrayD<f64>,
    tag: ParamTag,
    frozen: bool,
}

/// All learnable tensors of the model, addressable by name.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParameterStore {
    /// Xavier-uniform matrices, zero biases. The frozen word-embedding matrix
    /// is drawn from a scaled normal so toy runs work without vector files;
    /// [`ParameterStore::load_word_vectors`] overwrites rows with pretrained
    /// values.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut tensors = IndexMap::new();
        for spec in param_specs(cfg) {
            let value = match spec.name.as_str() {
                "embed.word" => {
                    ArrayD::from_shape_fn(IxDyn(&spec.shape), |_| {
                        0.1 * rand_distr::StandardNormal.sample_rng(rng)
                    })
                }
                "ans_dec.bos" | "q_dec.bos" => {
                    ArrayD::from_shape_fn(IxDyn(&spec.shape), |_| rng.gen_range(-0.1..0.1))
                }
                _ if spec.shape.len() == 2 => {
                    let (rows, cols) = (spec.shape[0], spec.shape[1]);
                    let a = (6.0 / (rows + cols) as f64).sqrt();
                    ArrayD::from_shape_fn(IxDyn(&spec.shape), |_| rng.gen_range(-a..a))
                }
                _ => ArrayD::zeros(IxDyn(&spec.shape)),
            };
            tensors.insert(spec.name.clone(), Tensor { value, tag: spec.tag, frozen: spec.frozen });
        }
        ParameterStore { tensors }
    }

    /// Loads a word-per-line text vector file ("word v1 v2 ... vD") into the
    /// frozen embedding matrix. Returns the number of vocabulary words found.
    pub fn load_word_vectors(&mut self, path: &Path, vocab: &Vocabulary) -> Result<usize> {
        let raw = fs::read_to_string(path).map_err(|source| VqagError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let d_word = self.get("embed.word").shape()[1];
        let mut found = 0;
        let mut matrix = self.get("embed.word").clone();
        for line in raw.lines() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            if !vocab.contains(word) {
                continue;
            }
            let id = vocab.word_id(word);
            let values: Vec<f64> = parts.map(|v| v.parse().unwrap_or(0.0)).collect();
            if values.len() != d_word {
                return Err(VqagError::Parse {
                    path: path.to_path_buf(),
                    message: format!("vector for {word:?} has {} dims, expected {d_word}", values.len()),
                });
            }
            for (j, v) in values.into_iter().enumerate() {
                matrix[[id, j]] = v;
            }
            found += 1;
        }
        self.set("embed.word", matrix);
        Ok(found)
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self.tensors.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        let t = self.tensors.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(t.value.shape(), value.shape(), "shape mismatch for {name}");
        t.value = value;
    }

    /// Mutable access for optimizers and finite-difference probes.
    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        &mut self.tensors.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.tensors[name].frozen
    }

    pub fn tag(&self, name: &str) -> ParamTag {
        self.tensors[name].tag
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().filter(|(_, t)| !t.frozen).map(|(n, _)| n.as_str())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.value.iter().all(|x| x.is_finite()))
    }

    /// Name of the first tensor holding a non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| t.value.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n.as_str())
    }

    pub fn save(&self, path: &Path, cfg: &ModelConfig) -> Result<()> {
        let io_err = |source| VqagError::Io { path: path.to_path_buf(), source };
        let header = CkptHeader {
            format_version: CKPT_VERSION,
            config: cfg.clone(),
            config_hash: cfg.config_hash(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| CkptTensor {
                    name: name.clone(),
                    shape: t.value.shape().to_vec(),
                    tag: t.tag,
                    frozen: t.frozen,
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
        w.write_all(CKPT_MAGIC).map_err(io_err)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(&header_json).map_err(io_err)?;
        for t in self.tensors.values() {
            for x in t.value.iter() {
                w.write_all(&x.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    /// Loads a checkpoint and validates its shape table against the shapes
    /// implied by the stored configuration.
    pub fn load(path: &Path) -> Result<(Self, ModelConfig)> {
        let io_err = |source| VqagError::Io { path: path.to_path_buf(), source };
        let mut r = std::io::BufReader::new(fs::File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != CKPT_MAGIC {
            return Err(VqagError::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes).map_err(io_err)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        r.read_exact(&mut header_json).map_err(io_err)?;
        let header: CkptHeader = serde_json::from_slice(&header_json)
            .map_err(|e| VqagError::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
        if header.format_version != CKPT_VERSION {
            return Err(VqagError::Checkpoint(format!(
                "{}: unsupported format version {}",
                path.display(),
                header.format_version
            )));
        }

        let specs = param_specs(&header.config);
        let expected: HashMap<&str, &ParamSpec> =
            specs.iter().map(|s| (s.name.as_str(), s)).collect();
        if expected.len() != header.tensors.len() {
            return Err(VqagError::Checkpoint(format!(
                "{}: tensor table has {} entries, config implies {}",
                path.display(),
                header.tensors.len(),
                expected.len()
            )));
        }

        let mut tensors = IndexMap::new();
        for ct in &header.tensors {
            let spec = expected.get(ct.name.as_str()).ok_or_else(|| {
                VqagError::Checkpoint(format!("{}: unexpected tensor {}", path.display(), ct.name))
            })?;
            if spec.shape != ct.shape {
                return Err(VqagError::Checkpoint(format!(
                    "{}: tensor {} has shape {:?}, config implies {:?}",
                    path.display(),
                    ct.name,
                    ct.shape,
                    spec.shape
                )));
            }
            let n: usize = ct.shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(io_err)?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = ArrayD::from_shape_vec(IxDyn(&ct.shape), data)
                .map_err(|e| VqagError::Checkpoint(format!("{}: {e}", path.display())))?;
            tensors.insert(ct.name.clone(), Tensor { value, tag: ct.tag, frozen: ct.frozen });
        }
        Ok((ParameterStore { tensors }, header.config))
    }
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    format_version: u32,
    config: ModelConfig,
    config_hash: String,
    tensors: Vec<CkptTensor>,
}

#[derive(Serialize, Deserialize)]
struct CkptTensor {
    name: String,
    shape: Vec<usize>,
    tag: ParamTag,
    frozen: bool,
}

// rand_distr's Distribution::sample takes &mut R; this tiny adapter keeps the
// closure in `init` readable.
trait SampleRng {
    fn sample_rng<R: Rng>(&self, rng: &mut R) -> f64;
}

impl SampleRng for rand_distr::StandardNormal {
    fn sample_rng<R: Rng>(&self, rng: &mut R) -> f64 {
        use rand_distr::Distribution;
        self.sample(rng)
    }
}

/// Parameters bound to one tape: each named tensor becomes a single leaf, so
/// weights used in several places (tied embeddings) accumulate gradients on
/// one node.
pub struct BoundParams<'a> {
    tape: &'a Tape,
    store: &'a ParameterStore,
    vars: std::cell::RefCell<HashMap<String, Var>>,
}

impl<'a> BoundParams<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParameterStore) -> Self {
        BoundParams { tape, store, vars: std::cell::RefCell::new(HashMap::new()) }
    }

    pub fn var(&self, name: &str) -> Var {
        if let Some(v) = self.vars.borrow().get(name) {
            return *v;
        }
        let value = self.store.get(name).clone();
        let v = if self.store.is_frozen(name) {
            self.tape.constant(value)
        } else {
            self.tape.leaf(value)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn store(&self) -> &'a ParameterStore {
        self.store
    }

    /// Harvests the gradient of every trainable parameter after `backward`.
    pub fn harvest(&self, grads: &crate::tape::Gradients) -> HashMap<String, ArrayD<f64>> {
        let mut out = HashMap::new();
        for (name, var) in self.vars.borrow().iter() {
            if self.store.is_frozen(name) {
                continue;
            }
            if let Some(g) = grads.get(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}
