//! Two-channel encoders, decoders, fusion and the linear classifier.
//!
//! Parameters live in plain [`Matrix`] values on [`MtdModel`]. A forward pass
//! binds them onto a [`Tape`] (as leaves for training, as constants for
//! inference) and returns handles to every intermediate the losses need.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_payload, read_u32, write_payload};
use crate::tensor::{Activation, Matrix, Tape, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channels {
    /// Shared and view-proprietary encoders per view.
    #[default]
    Two,
    /// One encoder per view; `Z` is the fused shared feature.
    Single,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// `Z = sigmoid(Ō) ⊙ S̄`, width `d_e`.
    #[default]
    Gated,
    /// `[S̄, Ō]`, width `2·d_e`.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Hidden widths of each encoder; decoders use them reversed.
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub channels: Channels,
    pub classifier_input: ClassifierInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            hidden: vec![512, 512],
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
            channels: Channels::Two,
            classifier_input: ClassifierInput::Gated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths…, output width.
    pub widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Contract(format!(
                "an MLP needs at least one layer of positive widths, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Mlp {
    fn init(spec: &MlpSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = glorot_bound(fan_in, fan_out);
                Linear {
                    weight: Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound)),
                    bias: Matrix::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self {
            layers,
            hidden_activation: spec.hidden_activation,
            output_activation: spec.output_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let mut put = |m: &Matrix| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
        MlpVars {
            layers: self.layers.iter().map(|l| (put(&l.weight), put(&l.bias))).collect(),
        }
    }

    fn forward(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.input_dim() {
            return Err(Error::dim("mlp input", tape.shape(x), self.layers[0].weight.shape()));
        }
        let mut h = x;
        let last = vars.layers.len() - 1;
        for (k, &(w, b)) in vars.layers.iter().enumerate() {
            let a = tape.matmul(h, w)?;
            let a = tape.add(a, b)?;
            let act = if k == last { self.output_activation } else { self.hidden_activation };
            h = tape.activation(a, act);
        }
        Ok(h)
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Debug)]
struct MlpVars {
    layers: Vec<(Var, Var)>,
}

/// Tape handles for every model parameter.
#[derive(Clone, Debug)]
pub struct ModelVars {
    shared: Vec<MlpVars>,
    private: Vec<MlpVars>,
    decoders: Vec<MlpVars>,
    classifier_weight: Var,
    classifier_bias: Var,
}

impl ModelVars {
    /// Handles in checkpoint order, matching [`MtdModel::params`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for mlp in self.shared.iter().chain(&self.private).chain(&self.decoders) {
            for &(w, b) in &mlp.layers {
                out.push(w);
                out.push(b);
            }
        }
        out.push(self.classifier_weight);
        out.push(self.classifier_bias);
        out
    }
}

/// Handles to one forward pass' intermediates.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub shared: Vec<Var>,
    /// Empty for a single-channel model.
    pub private: Vec<Var>,
    pub shared_fused: Var,
    pub private_fused: Option<Var>,
    /// Classifier input: `Z`.
    pub fused: Var,
    pub reconstructions: Vec<Var>,
    pub predictions: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtdModel {
    config: ModelConfig,
    view_dims: Vec<usize>,
    num_labels: usize,
    pub shared_encoders: Vec<Mlp>,
    pub private_encoders: Vec<Mlp>,
    pub decoders: Vec<Mlp>,
    /// `classifier_in × c`
    pub classifier_weight: Matrix,
    /// `1 × c`, broadcast over rows.
    pub classifier_bias: Matrix,
}

impl MtdModel {
    /// Glorot-uniform weights and zero biases, deterministic per seed.
    pub fn init(view_dims: &[usize], num_labels: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        if view_dims.is_empty() || num_labels == 0 || config.embed_dim == 0 {
            return Err(Error::Contract("model needs views, labels and a positive embedding width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_spec = |d: usize| MlpSpec {
            widths: std::iter::once(d)
                .chain(config.hidden.iter().copied())
                .chain(std::iter::once(config.embed_dim))
                .collect(),
            hidden_activation: config.hidden_activation,
            output_activation: config.output_activation,
        };
        let dec_spec = |d: usize| MlpSpec {
            widths: std::iter::once(config.embed_dim)
                .chain(config.hidden.iter().rev().copied())
                .chain(std::iter::once(d))
                .collect(),
            hidden_activation: config.hidden_activation,
            output_activation: Activation::Identity,
        };
        let shared = view_dims
            .iter()
            .map(|&d| Mlp::init(&enc_spec(d), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let private = match config.channels {
            Channels::Two => view_dims
                .iter()
                .map(|&d| Mlp::init(&enc_spec(d), &mut rng))
                .collect::<Result<Vec<_>>>()?,
            Channels::Single => Vec::new(),
        };
        let decoders = view_dims
            .iter()
            .map(|&d| Mlp::init(&dec_spec(d), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let cin = classifier_in(config);
        let bound = glorot_bound(cin, num_labels);
        let classifier_weight = Matrix::from_fn(cin, num_labels, |_, _| rng.random_range(-bound..bound));
        Ok(Self {
            config: config.clone(),
            view_dims: view_dims.to_vec(),
            num_labels,
            shared_encoders: shared,
            private_encoders: private,
            decoders,
            classifier_weight,
            classifier_bias: Matrix::zeros(1, num_labels),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn view_dims(&self) -> &[usize] {
        &self.view_dims
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Parameters in checkpoint order: shared encoders by view, private
    /// encoders by view, decoders by view, classifier weight, classifier bias.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for mlp in self.shared_encoders.iter().chain(&self.private_encoders).chain(&self.decoders) {
            for l in &mlp.layers {
                out.push(&l.weight);
                out.push(&l.bias);
            }
        }
        out.push(&self.classifier_weight);
        out.push(&self.classifier_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for mlp in self
            .shared_encoders
            .iter_mut()
            .chain(self.private_encoders.iter_mut())
            .chain(self.decoders.iter_mut())
        {
            for l in &mut mlp.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|m| m.is_finite())
    }

    /// Places every parameter on `tape`; leaves when `trainable`, else constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let bind_all = |mlps: &[Mlp], tape: &mut Tape| mlps.iter().map(|m| m.bind(tape, trainable)).collect();
        let shared = bind_all(&self.shared_encoders, tape);
        let private = bind_all(&self.private_encoders, tape);
        let decoders = bind_all(&self.decoders, tape);
        let (w, b) = if trainable {
            (tape.leaf(self.classifier_weight.clone()), tape.leaf(self.classifier_bias.clone()))
        } else {
            (tape.constant(self.classifier_weight.clone()), tape.constant(self.classifier_bias.clone()))
        };
        ModelVars {
            shared,
            private,
            decoders,
            classifier_weight: w,
            classifier_bias: b,
        }
    }

    fn check_views(&self, tape: &Tape, inputs: &[Var]) -> Result<()> {
        if inputs.len() != self.view_dims.len() {
            return Err(Error::dim("views", (inputs.len(), 0), (self.view_dims.len(), 0)));
        }
        for (&x, &d) in inputs.iter().zip(&self.view_dims) {
            if tape.shape(x).1 != d {
                return Err(Error::dim("view width", tape.shape(x), (tape.shape(x).0, d)));
            }
        }
        Ok(())
    }

    /// Per-view shared and proprietary embeddings `(S^(v), O^(v))`.
    pub fn encode(&self, tape: &mut Tape, vars: &ModelVars, inputs: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        self.check_views(tape, inputs)?;
        let shared = self
            .shared_encoders
            .iter()
            .zip(&vars.shared)
            .zip(inputs)
            .map(|((mlp, mv), &x)| mlp.forward(tape, mv, x))
            .collect::<Result<Vec<_>>>()?;
        let private = self
            .private_encoders
            .iter()
            .zip(&vars.private)
            .zip(inputs)
            .map(|((mlp, mv), &x)| mlp.forward(tape, mv, x))
            .collect::<Result<Vec<_>>>()?;
        Ok((shared, private))
    }

    /// `D_v(S^(v) + O^(v))`, or `D_v(S^(v))` for a single-channel model.
    pub fn decode(&self, tape: &mut Tape, vars: &ModelVars, shared: &[Var], private: &[Var]) -> Result<Vec<Var>> {
        if shared.len() != self.decoders.len() || !(private.is_empty() || private.len() == shared.len()) {
            return Err(Error::dim("decode", (shared.len(), private.len()), (self.decoders.len(), 0)));
        }
        self.decoders
            .iter()
            .zip(&vars.decoders)
            .enumerate()
            .map(|(v, (mlp, mv))| {
                let input = match private.get(v) {
                    Some(&o) => tape.add(shared[v], o)?,
                    None => shared[v],
                };
                mlp.forward(tape, mv, input)
            })
            .collect()
    }

    /// `P = sigmoid(Z·𝒲 + ℬ)`.
    pub fn classify(&self, tape: &mut Tape, vars: &ModelVars, z: Var) -> Result<Var> {
        let logits = tape.matmul(z, vars.classifier_weight)?;
        let logits = tape.add(logits, vars.classifier_bias)?;
        Ok(tape.sigmoid(logits))
    }

    /// Full pass on (possibly masked) `inputs` with view availability `w`.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, inputs: &[Var], w: &Matrix) -> Result<ForwardOutputs> {
        let (shared, private) = self.encode(tape, vars, inputs)?;
        let shared_fused = fuse(tape, &shared, w)?;
        let private_fused = if private.is_empty() {
            None
        } else {
            Some(fuse(tape, &private, w)?)
        };
        let fused = match (private_fused, self.config.classifier_input) {
            (None, _) => shared_fused,
            (Some(o), ClassifierInput::Gated) => gate_fuse(tape, shared_fused, o)?,
            (Some(o), ClassifierInput::Concat) => tape.concat_cols(&[shared_fused, o])?,
        };
        let reconstructions = self.decode(tape, vars, &shared, &private)?;
        let predictions = self.classify(tape, vars, fused)?;
        Ok(ForwardOutputs {
            shared,
            private,
            shared_fused,
            private_fused,
            fused,
            reconstructions,
            predictions,
        })
    }

    /// Inference on unmasked views.
    pub fn predict(&self, views: &[Matrix], w: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let inputs: Vec<Var> = views.iter().map(|x| tape.constant(x.clone())).collect();
        let out = self.forward(&mut tape, &vars, &inputs, w)?;
        Ok(tape.value(out.predictions).clone())
    }

    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<()> {
        let c = &self.config;
        let mut header = vec![
            CHECKPOINT_VERSION,
            self.view_dims.len() as u32,
            c.embed_dim as u32,
            self.num_labels as u32,
            match c.channels {
                Channels::Two => 2,
                Channels::Single => 1,
            },
            match c.classifier_input {
                ClassifierInput::Gated => 0,
                ClassifierInput::Concat => 1,
            },
            act_code(c.hidden_activation),
            act_code(c.output_activation),
            c.hidden.len() as u32,
        ];
        header.extend(c.hidden.iter().map(|&h| h as u32));
        header.extend(self.view_dims.iter().map(|&d| d as u32));
        let params = self.params();
        header.push(params.len() as u32);
        out.write_all(CHECKPOINT_MAGIC)?;
        for v in header {
            out.write_all(&v.to_le_bytes())?;
        }
        for p in params {
            write_payload(out, p)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("missing checkpoint magic: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(input)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let m = read_u32(input)? as usize;
        let embed_dim = read_u32(input)? as usize;
        let num_labels = read_u32(input)? as usize;
        let channels = match read_u32(input)? {
            2 => Channels::Two,
            1 => Channels::Single,
            x => return Err(Error::Format(format!("bad channel count {x}"))),
        };
        let classifier_input = match read_u32(input)? {
            0 => ClassifierInput::Gated,
            1 => ClassifierInput::Concat,
            x => return Err(Error::Format(format!("bad classifier input code {x}"))),
        };
        let hidden_activation = act_from(read_u32(input)?)?;
        let output_activation = act_from(read_u32(input)?)?;
        let nh = read_u32(input)? as usize;
        let hidden = (0..nh).map(|_| read_u32(input).map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
        let view_dims = (0..m).map(|_| read_u32(input).map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
        let count = read_u32(input)? as usize;
        let config = ModelConfig {
            embed_dim,
            hidden,
            hidden_activation,
            output_activation,
            channels,
            classifier_input,
        };
        let mut model = MtdModel::init(&view_dims, num_labels, &config, 0)?;
        let slots = model.params_mut();
        if slots.len() != count {
            return Err(Error::Format(format!("checkpoint lists {count} matrices, layout needs {}", slots.len())));
        }
        for (k, slot) in slots.into_iter().enumerate() {
            let p = read_payload(input)?;
            if p.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "parameter {k} has shape {:?}, expected {:?}",
                    p.shape(),
                    slot.shape()
                )));
            }
            *slot = p;
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Load {
            path: path.into(),
            msg: e.to_string(),
        })?;
        Self::read_checkpoint(&mut std::io::BufReader::new(f))
    }
}

fn classifier_in(config: &ModelConfig) -> usize {
    match (config.channels, config.classifier_input) {
        (Channels::Two, ClassifierInput::Concat) => 2 * config.embed_dim,
        _ => config.embed_dim,
    }
}

fn act_code(a: Activation) -> u32 {
    match a {
        Activation::Relu => 0,
        Activation::Sigmoid => 1,
        Activation::Identity => 2,
    }
}

fn act_from(code: u32) -> Result<Activation> {
    Ok(match code {
        0 => Activation::Relu,
        1 => Activation::Sigmoid,
        2 => Activation::Identity,
        x => return Err(Error::Format(format!("bad activation code {x}"))),
    })
}

/// Per-view availability weights `W[i,v] / Σ_u W[i,u]` as `b × 1` columns.
pub fn fusion_weights(w: &Matrix) -> Result<Vec<Matrix>> {
    let (b, m) = w.shape();
    let mut cols = vec![Matrix::zeros(b, 1); m];
    for i in 0..b {
        let avail: f64 = w.row(i).iter().sum();
        if avail < 1.0 {
            return Err(Error::Contract(format!("sample {i} has no available view to fuse")));
        }
        for (v, col) in cols.iter_mut().enumerate() {
            col.as_mut_slice()[i] = w.get(i, v) / avail;
        }
    }
    Ok(cols)
}

/// Availability-weighted mean of per-view embeddings.
pub fn fuse(tape: &mut Tape, per_view: &[Var], w: &Matrix) -> Result<Var> {
    if per_view.len() != w.cols() {
        return Err(Error::dim("fuse", (w.rows(), per_view.len()), w.shape()));
    }
    let weights = fusion_weights(w)?;
    let mut acc: Option<Var> = None;
    for (&x, wv) in per_view.iter().zip(weights) {
        if tape.shape(x).0 != w.rows() {
            return Err(Error::dim("fuse", tape.shape(x), w.shape()));
        }
        let wv = tape.constant(wv);
        let term = tape.scale_rows(x, wv)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::Contract("nothing to fuse".into()))
}

/// `Z = sigmoid(Ō) ⊙ S̄`.
pub fn gate_fuse(tape: &mut Tape, shared_fused: Var, private_fused: Var) -> Result<Var> {
    if tape.shape(shared_fused) != tape.shape(private_fused) {
        return Err(Error::dim("gate_fuse", tape.shape(shared_fused), tape.shape(private_fused)));
    }
    let gate = tape.sigmoid(private_fused);
    tape.mul(gate, shared_fused)
}
