use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Bindings, Gradients, Graph, NodeId, ParamId, Tensor};
use crate::error::{Error, Result};
use crate::mi::Encoder;
use crate::seeded_rng;

pub const ENC_W1: ParamId = ParamId(0);
pub const ENC_B1: ParamId = ParamId(1);
pub const ENC_W2: ParamId = ParamId(2);
pub const ENC_B2: ParamId = ParamId(3);
pub const DEC_W1: ParamId = ParamId(4);
pub const DEC_B1: ParamId = ParamId(5);
pub const DEC_W2: ParamId = ParamId(6);
pub const DEC_B2: ParamId = ParamId(7);
pub const CLS_W: ParamId = ParamId(8);
pub const CLS_B: ParamId = ParamId(9);

pub const ENCODER: [ParamId; 4] = [ENC_W1, ENC_B1, ENC_W2, ENC_B2];
pub const DECODER: [ParamId; 4] = [DEC_W1, DEC_B1, DEC_W2, DEC_B2];
pub const CLASSIFIER: [ParamId; 2] = [CLS_W, CLS_B];

const MAGIC: &[u8; 8] = b"OTDGMDL\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub decoder: bool,
}

/// Encoder `d → hidden → d′` (ReLU between), optional mirrored decoder and a
/// linear classifier on the features.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub params: Bindings,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::matrix(
        fan_in,
        fan_out,
        (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-r..r))
            .collect(),
    )
    .expect("shape")
}

impl Model {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let Architecture {
            input_dim: d,
            hidden: h,
            feature_dim: f,
            classes: c,
            decoder,
        } = arch;
        if d == 0 || h == 0 || f == 0 || c < 2 {
            return Err(Error::invalid(
                "model needs positive widths and at least two classes",
            ));
        }
        let mut rng = seeded_rng(seed);
        let mut p = Bindings::new();
        p.insert(ENC_W1, glorot(&mut rng, d, h));
        p.insert(ENC_B1, Tensor::zeros(&[h]));
        p.insert(ENC_W2, glorot(&mut rng, h, f));
        p.insert(ENC_B2, Tensor::zeros(&[f]));
        p.insert(CLS_W, glorot(&mut rng, f, c));
        p.insert(CLS_B, Tensor::zeros(&[c]));
        if decoder {
            p.insert(DEC_W1, glorot(&mut rng, f, h));
            p.insert(DEC_B1, Tensor::zeros(&[h]));
            p.insert(DEC_W2, glorot(&mut rng, h, d));
            p.insert(DEC_B2, Tensor::zeros(&[d]));
        }
        Ok(Self { arch, params: p })
    }

    fn dense(g: &mut Graph, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let w = g.param(w);
        let b = g.param(b);
        let xw = g.matmul(x, w);
        g.add(xw, b)
    }

    pub fn decode(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        if !self.arch.decoder {
            return Err(Error::invalid("model has no decoder"));
        }
        let h = Self::dense(g, z, DEC_W1, DEC_B1);
        let h = g.relu(h);
        Ok(Self::dense(g, h, DEC_W2, DEC_B2))
    }

    pub fn logits(&self, g: &mut Graph, z: NodeId) -> NodeId {
        Self::dense(g, z, CLS_W, CLS_B)
    }

    /// Class scores for a batch, computed directly.
    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let z = self.encode(&mut g, xn);
        let out = self.logits(&mut g, z);
        g.evaluate(&self.params, out)
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let z = self.encode(&mut g, xn);
        g.evaluate(&self.params, z)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let l = self.predict_logits(x)?;
        Ok((0..l.rows())
            .map(|i| {
                let row = l.row(i);
                // first maximum wins
                (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::invalid("accuracy of an empty set"));
        }
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let a = &self.arch;
        w.write_all(MAGIC)?;
        w.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
        for v in [
            a.input_dim,
            a.hidden,
            a.feature_dim,
            a.classes,
            a.decoder as usize,
        ] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (id, t) in &self.params {
            w.write_all(&(id.0 as u64).to_le_bytes())?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for s in t.shape() {
                w.write_all(&(*s as u64).to_le_bytes())?;
            }
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::invalid("not an otdg model file (bad magic)"));
        }
        let mut v4 = [0u8; 4];
        r.read_exact(&mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model format version {version}"
            )));
        }
        let arch = Architecture {
            input_dim: read_size(&mut r)?,
            hidden: read_size(&mut r)?,
            feature_dim: read_size(&mut r)?,
            classes: read_size(&mut r)?,
            decoder: read_size(&mut r)? != 0,
        };
        let count = read_size(&mut r)?;
        if count > 16 {
            return Err(Error::invalid("corrupt model file (parameter count)"));
        }
        let mut params = Bindings::new();
        for _ in 0..count {
            let id = ParamId(read_size(&mut r)?);
            let rank = read_size(&mut r)?;
            if rank > 4 {
                return Err(Error::invalid("corrupt model file (tensor rank)"));
            }
            let shape = (0..rank)
                .map(|_| read_size(&mut r))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, s| acc.checked_mul(*s))
                .filter(|n| *n <= 1 << 28);
            let n = n.ok_or_else(|| Error::invalid("corrupt model file (tensor size)"))?;
            let data = (0..n)
                .map(|_| read_f64(&mut r))
                .collect::<Result<Vec<_>>>()?;
            params.insert(id, Tensor::new(shape, data)?);
        }
        if [arch.input_dim, arch.hidden, arch.feature_dim, arch.classes]
            .iter()
            .any(|v| *v > 1 << 20)
        {
            return Err(Error::invalid("corrupt model file (architecture)"));
        }
        let expected = Model::new(arch, 0)?;
        let shapes_match = expected.params.len() == params.len()
            && expected
                .params
                .iter()
                .all(|(id, t)| params.get(id).is_some_and(|p| p.shape() == t.shape()));
        if !shapes_match {
            return Err(Error::invalid(
                "model file parameters do not match its architecture",
            ));
        }
        Ok(Self { arch, params })
    }
}

fn read_size(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b))
        .map_err(|_| Error::invalid("size does not fit in memory"))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

impl Encoder for Model {
    fn encode(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = Self::dense(g, x, ENC_W1, ENC_B1);
        let h = g.relu(h);
        Self::dense(g, h, ENC_W2, ENC_B2)
    }

    fn parameters(&self) -> Bindings {
        self.params.clone()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// First-order update rule with per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    step: i32,
    m: Bindings,
    v: Bindings,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: Bindings::new(),
            v: Bindings::new(),
        }
    }

    /// Updates every parameter that has an entry in `grads`.
    pub fn apply(&mut self, params: &mut Bindings, grads: &Gradients) -> Result<()> {
        self.step += 1;
        for (id, gr) in grads {
            let p = params
                .get_mut(id)
                .ok_or_else(|| Error::invalid(format!("no parameter {}", id.0)))?;
            if p.shape() != gr.shape() {
                return Err(Error::invalid(format!(
                    "gradient shape mismatch for parameter {}",
                    id.0
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, g) in p.data_mut().iter_mut().zip(gr.data()) {
                        *x -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .m
                        .entry(*id)
                        .or_insert_with(|| Tensor::zeros(gr.shape()));
                    let v = self
                        .v
                        .entry(*id)
                        .or_insert_with(|| Tensor::zeros(gr.shape()));
                    let c1 = 1.0 - BETA1.powi(self.step);
                    let c2 = 1.0 - BETA2.powi(self.step);
                    let (md, vd, data) = (m.data_mut(), v.data_mut(), p.data_mut());
                    for (k, g) in gr.data().iter().enumerate() {
                        md[k] = BETA1 * md[k] + (1.0 - BETA1) * g;
                        vd[k] = BETA2 * vd[k] + (1.0 - BETA2) * g * g;
                        data[k] -= self.lr * (md[k] / c1) / ((vd[k] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
