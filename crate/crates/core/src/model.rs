//! Small classifier architectures, initialization, checkpoints and teacher
//! ensembles.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Fully connected ReLU network; the last width is the class count.
    Mlp { layer_widths: Vec<usize> },
    /// One conv layer (no bias), ReLU, one hidden dense layer, output layer.
    TinyConv {
        channels: usize,
        kernel: usize,
        hidden: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// `[d]` for an MLP, `[channels, height, width]` for the conv net.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut layer_widths = hidden.to_vec();
        layer_widths.push(num_classes);
        ModelSpec {
            arch: Architecture::Mlp { layer_widths },
            input_shape: vec![input_dim],
            num_classes,
        }
    }

    pub fn tiny_conv(input_shape: [usize; 3], channels: usize, kernel: usize, hidden: usize, num_classes: usize) -> Self {
        ModelSpec {
            arch: Architecture::TinyConv {
                channels,
                kernel,
                hidden,
            },
            input_shape: input_shape.to_vec(),
            num_classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "need at least 2 classes"));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::invalid("input_shape", "dimensions must be positive"));
        }
        match &self.arch {
            Architecture::Mlp { layer_widths } => {
                if self.input_shape.len() != 1 {
                    return Err(Error::invalid("input_shape", "mlp takes a flat input"));
                }
                if layer_widths.is_empty() || layer_widths.contains(&0) {
                    return Err(Error::invalid("layer_widths", "widths must be positive"));
                }
                if *layer_widths.last().unwrap() != self.num_classes {
                    return Err(Error::invalid("layer_widths", "last width must equal num_classes"));
                }
            }
            Architecture::TinyConv {
                channels,
                kernel,
                hidden,
            } => {
                let [_, h, w] = self.input_shape[..] else {
                    return Err(Error::invalid("input_shape", "tiny_conv needs [channels, height, width]"));
                };
                if *channels == 0 || *hidden == 0 || *kernel == 0 || *kernel > h || *kernel > w {
                    return Err(Error::invalid("tiny_conv", "channels/kernel/hidden out of range"));
                }
            }
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` of every parameter tensor in forward order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let dense = |out: &mut Vec<_>, idx: usize, fan_in: usize, width: usize| {
            out.push((format!("dense{idx}.weight"), vec![fan_in, width], fan_in));
            out.push((format!("dense{idx}.bias"), vec![width], fan_in));
        };
        match &self.arch {
            Architecture::Mlp { layer_widths } => {
                let mut fan_in = self.input_shape[0];
                for (i, &w) in layer_widths.iter().enumerate() {
                    dense(&mut out, i, fan_in, w);
                    fan_in = w;
                }
            }
            Architecture::TinyConv {
                channels,
                kernel,
                hidden,
            } => {
                let (c, h, w) = (self.input_shape[0], self.input_shape[1], self.input_shape[2]);
                out.push(("conv.weight".into(), vec![*channels, c, *kernel, *kernel], c * kernel * kernel));
                let flat = channels * (h - kernel + 1) * (w - kernel + 1);
                dense(&mut out, 0, flat, *hidden);
                dense(&mut out, 1, *hidden, self.num_classes);
            }
        }
        out
    }
}

/// Named parameter tensors plus the seed they were initialized from.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub seed: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Params {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.is_finite())
    }

    /// SHA-256 over names and little-endian values.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Deterministic fan-in uniform initialization, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<Params> {
    spec.validate()?;
    let mut rng = seed::rng(seed, &[seed::INIT]);
    let tensors = spec
        .layout()
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::from_parts(shape, data)
            };
            (name, t)
        })
        .collect();
    Ok(Params { seed, tensors })
}

/// A spec together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Params,
}

impl Model {
    pub fn new(spec: ModelSpec, params: Params) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if layout.len() != params.tensors.len()
            || layout
                .iter()
                .zip(&params.tensors)
                .any(|((n, s, _), (pn, t))| n != pn || s.as_slice() != t.shape())
        {
            return Err(Error::invalid("params", "tensors do not match the model spec"));
        }
        Ok(Model { spec, params })
    }

    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = init_params(&spec, seed)?;
        Ok(Model { spec, params })
    }

    /// Inserts the parameters into `g`; `trainable` marks them for gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect()
    }

    /// Logits for a flat `[n, input_dim]` batch.
    pub fn logits(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.spec.input_dim() {
            return Err(Error::Shape {
                op: "model_input",
                lhs: xs,
                rhs: vec![self.spec.input_dim()],
            });
        }
        let n = xs[0];
        let dense = |g: &mut Graph, h: Var, w: Var, b: Var| -> Result<Var> {
            let z = g.matmul(h, w)?;
            g.add(z, b)
        };
        match &self.spec.arch {
            Architecture::Mlp { layer_widths } => {
                let mut h = x;
                for i in 0..layer_widths.len() {
                    h = dense(g, h, params[2 * i], params[2 * i + 1])?;
                    if i + 1 < layer_widths.len() {
                        h = g.relu(h)?;
                    }
                }
                Ok(h)
            }
            Architecture::TinyConv { .. } => {
                let mut shape = vec![n];
                shape.extend_from_slice(&self.spec.input_shape);
                let img = g.reshape(x, shape)?;
                let c = g.conv2d(img, params[0])?;
                let c = g.relu(c)?;
                let flat = g.value(c).len() / n;
                let c = g.reshape(c, vec![n, flat])?;
                let h = dense(g, c, params[1], params[2])?;
                let h = g.relu(h)?;
                dense(g, h, params[3], params[4])
            }
        }
    }

    /// Class probabilities (softmax of logits), one row per sample.
    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let z = self.logits(&mut g, &p, xv)?;
        let s = g.softmax(z)?;
        Ok(g.value(s).clone())
    }
}

pub fn predict_probs(params: &Params, spec: &ModelSpec, x: &Tensor) -> Result<Tensor> {
    Model::new(spec.clone(), params.clone())?.predict_probs(x)
}

/// Convex combination of member outputs.
#[derive(Clone, Debug)]
pub struct EnsembleTeacher {
    members: Vec<Model>,
    beta: Vec<f64>,
}

impl EnsembleTeacher {
    /// Validates `beta` strictly: nonnegative, one weight per member, summing to 1.
    pub fn new(members: Vec<Model>, beta: Vec<f64>) -> Result<Self> {
        validate_beta(&beta, members.len())?;
        let classes = members[0].spec.num_classes;
        let dim = members[0].spec.input_dim();
        if members
            .iter()
            .any(|m| m.spec.num_classes != classes || m.spec.input_dim() != dim)
        {
            return Err(Error::invalid("members", "ensemble members disagree on input or class count"));
        }
        Ok(EnsembleTeacher { members, beta })
    }

    pub fn uniform(members: Vec<Model>) -> Result<Self> {
        let m = members.len().max(1);
        EnsembleTeacher::new(members, vec![1.0 / m as f64; m])
    }

    pub fn single(model: Model) -> Self {
        EnsembleTeacher {
            members: vec![model],
            beta: vec![1.0],
        }
    }

    pub fn members(&self) -> &[Model] {
        &self.members
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].spec.num_classes
    }

    pub fn with_beta(&self, beta: Vec<f64>) -> Result<Self> {
        EnsembleTeacher::new(self.members.clone(), beta)
    }

    pub fn probs(&self, x: &Tensor) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (m, &b) in self.members.iter().zip(&self.beta) {
            let p = m.predict_probs(x)?;
            match acc.as_mut() {
                None => {
                    let mut p = p;
                    p.data_mut().iter_mut().for_each(|v| *v *= b);
                    acc = Some(p);
                }
                Some(a) => a.data_mut().iter_mut().zip(p.data()).for_each(|(s, v)| *s += b * v),
            }
        }
        Ok(acc.expect("ensemble has at least one member"))
    }
}

pub fn ensemble_probs(ens: &EnsembleTeacher, x: &Tensor) -> Result<Tensor> {
    ens.probs(x)
}

pub fn validate_beta(beta: &[f64], members: usize) -> Result<()> {
    if members == 0 {
        return Err(Error::invalid("members", "empty ensemble"));
    }
    if beta.len() != members {
        return Err(Error::invalid("beta", format!("{} weights for {} members", beta.len(), members)));
    }
    if beta.iter().any(|b| !b.is_finite() || *b < 0.0) {
        return Err(Error::invalid("beta", "weights must be nonnegative"));
    }
    let total: f64 = beta.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("beta", format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

// --- checkpoints ---------------------------------------------------------

const MAGIC: &[u8; 4] = b"AKDC";
const VERSION: u8 = 1;

/// Contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Number of completed training epochs (0 for a fresh init).
    pub epoch: usize,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    seed: u64,
    epoch: usize,
    config_hash: String,
}

/// Layout: magic, version byte, length-prefixed JSON header (spec, seed,
/// epoch, config hash), tensor count, then per tensor its name, dims and
/// little-endian `f64` values, closed by a SHA-256 of everything before it.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let header = Header {
        spec: ckpt.model.spec.clone(),
        seed: ckpt.model.params.seed,
        epoch: ckpt.epoch,
        config_hash: ckpt.config_hash.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(64 + header.len() + ckpt.model.params.num_values() * 8);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(ckpt.model.params.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.model.params.tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err("unexpected end of data".into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < MAGIC.len() + 1 + 32 {
        return Err(fail("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fail("checksum mismatch (truncated or corrupt)".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    let parse = |r: &mut Reader| -> std::result::Result<Checkpoint, String> {
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let hlen = r.u32()?;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| format!("header: {e}"))?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()?;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| e.to_string())?;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            tensors.push((name, t));
        }
        if r.pos != r.buf.len() {
            return Err("trailing bytes".into());
        }
        let params = Params {
            seed: header.seed,
            tensors,
        };
        let model = Model::new(header.spec, params).map_err(|e| e.to_string())?;
        Ok(Checkpoint {
            model,
            epoch: header.epoch,
            config_hash: header.config_hash,
        })
    };
    parse(&mut r).map_err(fail)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> ModelSpec {
        ModelSpec::mlp(2, &[8, 8], 2)
    }

    fn zero_model(spec: ModelSpec) -> Model {
        let mut m = Model::init(spec, 0).unwrap();
        for (_, t) in &mut m.params.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_params(&toy_spec(), 11).unwrap();
        let b = init_params(&toy_spec(), 11).unwrap();
        let c = init_params(&toy_spec(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tensors, c.tensors);
        for (name, t) in &a.tensors {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let bound = (6.0 / t.shape()[0] as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = toy_spec();
        s.num_classes = 3;
        assert!(s.validate().is_err());
        assert!(ModelSpec::mlp(2, &[4], 1).validate().is_err());
        assert!(ModelSpec::tiny_conv([1, 4, 4], 2, 5, 8, 2).validate().is_err());
        assert!(ModelSpec::tiny_conv([1, 4, 4], 2, 3, 8, 2).validate().is_ok());
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let m = zero_model(ModelSpec::mlp(3, &[4], 5));
        let x = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![9.0, 1.0, 0.0]]).unwrap();
        let p = m.predict_probs(&x).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn single_row_matches_batch_row() {
        let m = Model::init(toy_spec(), 3).unwrap();
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.2, 1.0 - i as f64 * 0.1]).collect();
        let batch = m.predict_probs(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let one = m.predict_probs(&Tensor::from_rows(&[r.clone()]).unwrap()).unwrap();
            for (a, b) in one.data().iter().zip(batch.row(i)) {
                assert!((a - b).abs() <= 1e-12);
            }
            assert!((batch.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn input_shape_mismatch() {
        let m = Model::init(toy_spec(), 3).unwrap();
        assert!(matches!(m.predict_probs(&Tensor::zeros(&[2, 3])), Err(Error::Shape { .. })));
    }

    #[test]
    fn tiny_conv_forward_rows_are_distributions() {
        let spec = ModelSpec::tiny_conv([1, 5, 5], 3, 3, 6, 2);
        let m = Model::init(spec, 1).unwrap();
        let x = Tensor::new(vec![2, 25], (0..50).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let p = m.predict_probs(&x).unwrap();
        assert_eq!(p.shape(), &[2, 2]);
        for i in 0..2 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ensemble_examples() {
        let a = Model::init(toy_spec(), 1).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.9], vec![0.5, 0.5]]).unwrap();
        let single = EnsembleTeacher::single(a.clone()).probs(&x).unwrap();
        assert_eq!(single, a.predict_probs(&x).unwrap());

        let four = EnsembleTeacher::uniform(vec![a.clone(); 4]).unwrap().probs(&x).unwrap();
        assert!(four.max_abs_diff(&single) < 1e-15);

        assert!(EnsembleTeacher::new(vec![], vec![]).is_err());
        assert!(EnsembleTeacher::new(vec![a.clone(); 4], vec![0.25, 0.25, 0.25, 0.15]).is_err());
        assert!(EnsembleTeacher::new(vec![a.clone(); 2], vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn ensemble_of_opposite_members_averages() {
        // Output layer bias of ±50 saturates each member onto one class.
        let mut m0 = zero_model(ModelSpec::mlp(2, &[2], 2));
        let mut m1 = m0.clone();
        let bias = |m: &mut Model, b: [f64; 2]| {
            let (_, t) = m.params.tensors.iter_mut().find(|(n, _)| n == "dense1.bias").unwrap();
            t.data_mut().copy_from_slice(&b);
        };
        bias(&mut m0, [50.0, -50.0]);
        bias(&mut m1, [-50.0, 50.0]);
        let ens = EnsembleTeacher::new(vec![m0, m1], vec![0.5, 0.5]).unwrap();
        let p = ens.probs(&Tensor::from_rows(&[vec![0.2, 0.3]]).unwrap()).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-12);
        assert!((p.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher_ep3.ckpt");
        let ckpt = Checkpoint {
            model: Model::init(ModelSpec::tiny_conv([1, 4, 4], 2, 3, 5, 2), 9).unwrap(),
            epoch: 3,
            config_hash: "abc".into(),
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.model.params.checksum(), ckpt.model.params.checksum());

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));

        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        fs::write(&path, &flipped).unwrap();
        assert!(load_checkpoint(&path).is_err());

        let missing = dir.path().join("nope.ckpt");
        match load_checkpoint(&missing) {
            Err(Error::Checkpoint { path, .. }) => assert_eq!(path, missing),
            other => panic!("unexpected {other:?}"),
        }
    }
}
