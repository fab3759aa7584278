//! Named parameters, Adam state and the on-disk checkpoint format.
//!
//! A checkpoint is a directory holding `manifest.txt` and `params.bin`. The
//! manifest has one line per tensor, `name rows cols offset`, where `offset`
//! counts 64-bit floats into the little-endian payload. Optimizer moments are
//! stored as ordinary entries under `adam/m/` and `adam/v/`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal samples redrawn until they fall within two standard deviations.
    TruncatedNormal { std: f64 },
    Zeros,
    Constant(f64),
}

pub const WEIGHT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    adam: AdamConfig,
}

/// Sparse per-parameter gradient buffer.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.add_assign(g),
            None => {
                self.grads.insert(id, g.clone());
            }
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (&id, g) in &other.grads {
            self.accumulate(id, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.scale_in_place(s);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn sample_init<R: Rng + ?Sized>(init: Init, rows: usize, cols: usize, rng: &mut R) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(rows, cols),
        Init::Constant(c) => Tensor::full(rows, cols, c),
        Init::TruncatedNormal { std } => {
            let data = (0..rows * cols)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect();
            Tensor::from_vec(rows, cols, data)
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_adam(adam: AdamConfig) -> Self {
        Self {
            adam,
            ..Self::default()
        }
    }

    /// Registers a new parameter. Names must be unique.
    pub fn register<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_owned(),
            value: sample_init(init, rows, cols, rng),
            init,
        });
        self.m.push(Tensor::zeros(rows, cols));
        self.v.push(Tensor::zeros(rows, cols));
        self.index.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn parameter(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Zeroes the Adam moments and the step counter, keeping values.
    pub fn reset_optimizer(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        self.step = 0;
    }

    /// One Adam update with bias correction.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, g) in grads.iter() {
            let i = id.0;
            let m = self.m[i].data_mut();
            for (mv, &gv) in m.iter_mut().zip(g.data()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
            }
            let v = self.v[i].data_mut();
            for (vv, &gv) in v.iter_mut().zip(g.data()) {
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            }
            let (m, v) = (&self.m[i], &self.v[i]);
            for ((p, &mv), &vv) in self.params[i]
                .value
                .data_mut()
                .iter_mut()
                .zip(m.data())
                .zip(v.data())
            {
                *p -= lr * (mv / c1) / ((vv / c2).sqrt() + eps);
            }
        }
    }

    /// Writes `manifest.txt` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("# formnet checkpoint v1\nstep {}\n", self.step);
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        let mut emit = |name: &str, t: &Tensor, manifest: &mut String| {
            manifest.push_str(&format!("{name} {} {} {offset}\n", t.rows(), t.cols()));
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            offset += t.len();
        };
        for (i, p) in self.params.iter().enumerate() {
            emit(&p.name, &p.value, &mut manifest);
            emit(&format!("adam/m/{}", p.name), &self.m[i], &mut manifest);
            emit(&format!("adam/v/{}", p.name), &self.v[i], &mut manifest);
        }
        let mpath = dir.join("manifest.txt");
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join("params.bin");
        let mut f = fs::File::create(&bpath).map_err(|e| Error::io(&bpath, e))?;
        f.write_all(&payload).map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }

    /// Overwrites every registered parameter (and its Adam moments, when
    /// present) from a checkpoint. Shapes must match exactly.
    pub fn load(&mut self, dir: &Path) -> Result<()> {
        let entries = read_checkpoint(dir)?;
        let step = entries.step;
        for i in 0..self.params.len() {
            let name = self.params[i].name.clone();
            let t = entries
                .tensors
                .get(&name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            let expected = self.params[i].value.shape();
            if t.shape() != expected {
                return Err(Error::CheckpointShape {
                    name,
                    expected,
                    found: t.shape(),
                });
            }
            self.params[i].value = t.clone();
            let zero = Tensor::zeros(expected.0, expected.1);
            self.m[i] = entries
                .tensors
                .get(&format!("adam/m/{name}"))
                .cloned()
                .unwrap_or_else(|| zero.clone());
            self.v[i] = entries
                .tensors
                .get(&format!("adam/v/{name}"))
                .cloned()
                .unwrap_or(zero);
        }
        self.step = step;
        Ok(())
    }
}

pub struct CheckpointContents {
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn read_checkpoint(dir: &Path) -> Result<CheckpointContents> {
    let mpath = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join("params.bin");
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse {
            path: bpath,
            key: "payload".into(),
            message: "length is not a multiple of 8".into(),
        });
    }
    let floats: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let bad = |key: &str, message: &str| Error::Parse {
        path: mpath.clone(),
        key: key.to_owned(),
        message: message.to_owned(),
    };
    let mut step = 0;
    let mut tensors = BTreeMap::new();
    for line in manifest.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["step", s] => step = s.parse().map_err(|_| bad("step", "not an integer"))?,
            [name, r, c, off] => {
                let r: usize = r.parse().map_err(|_| bad(name, "bad row count"))?;
                let c: usize = c.parse().map_err(|_| bad(name, "bad column count"))?;
                let off: usize = off.parse().map_err(|_| bad(name, "bad offset"))?;
                let data = floats
                    .get(off..off + r * c)
                    .ok_or_else(|| bad(name, "payload too short"))?;
                tensors.insert((*name).to_owned(), Tensor::from_vec(r, c, data.to_vec()));
            }
            _ => return Err(bad(line, "expected `name rows cols offset`")),
        }
    }
    Ok(CheckpointContents { step, tensors })
}
