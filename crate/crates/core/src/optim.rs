//! Optimizers for the pipeline stages: Nadam for the adaptive phases and SGD
//! with Nesterov momentum and weight decay for fine-tuning.
//!
//! State is keyed per parameter tensor so freeze masks can change between
//! stages without corrupting slot alignment. Frozen parameters are bypassed
//! entirely: no decay, no velocity update.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// Multiplicative shrink applied to weights before the gradient step.
    Decoupled,
    /// Classic L2: decay added to the gradient before momentum.
    Coupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub decay_mode: WeightDecayMode,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: true,
            decay_mode: WeightDecayMode::Decoupled,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NadamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Sgd(SgdConfig),
    Nadam(NadamConfig),
}

/// Stable identity of a parameter tensor across steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub node: usize,
    pub half: ParamHalf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamHalf {
    Weights,
    Bias,
}

#[derive(Clone, Debug)]
struct SlotState {
    /// SGD velocity, or Nadam first moment.
    a: Tensor,
    /// Nadam second moment; unused by SGD.
    b: Option<Tensor>,
}

/// A stateful optimizer instance. One instance owns one model's state; steps
/// are serialized.
#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimizerSpec,
    slots: HashMap<ParamKey, SlotState>,
    t: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Self {
            spec,
            slots: HashMap::new(),
            t: 0,
        }
    }

    pub fn spec(&self) -> OptimizerSpec {
        self.spec
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Starts a new optimizer step (advances the shared step counter).
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Updates one parameter tensor within the current step. Frozen
    /// parameters must simply not be passed; their state is left untouched.
    pub fn update_slot(&mut self, key: ParamKey, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "optimizer step: param {:?} vs grad {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        match self.spec {
            OptimizerSpec::Sgd(cfg) => {
                let slot = self.slots.entry(key).or_insert_with(|| SlotState {
                    a: Tensor::zeros(grad.shape()),
                    b: None,
                });
                sgd_update(&cfg, param, grad, &mut slot.a);
            }
            OptimizerSpec::Nadam(cfg) => {
                let slot = self.slots.entry(key).or_insert_with(|| SlotState {
                    a: Tensor::zeros(grad.shape()),
                    b: Some(Tensor::zeros(grad.shape())),
                });
                nadam_update(&cfg, self.t, param, grad, &mut slot.a, slot.b.as_mut().unwrap());
            }
        }
        Ok(())
    }

    /// Applies one update over the given `(key, param, grad)` entries.
    pub fn step(&mut self, entries: &mut [(ParamKey, &mut Tensor, &Tensor)]) -> Result<()> {
        self.begin_step();
        for (key, param, grad) in entries.iter_mut() {
            self.update_slot(*key, param, grad)?;
        }
        Ok(())
    }

    /// Serializes the moment/velocity state so a run can resume mid-stage.
    pub fn state_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.t.to_le_bytes());
        let mut keys: Vec<&ParamKey> = self.slots.keys().collect();
        keys.sort();
        out.extend_from_slice(&(keys.len() as u32).to_le_bytes());
        for key in keys {
            let slot = &self.slots[key];
            out.extend_from_slice(&(key.node as u32).to_le_bytes());
            out.push(match key.half {
                ParamHalf::Weights => 0,
                ParamHalf::Bias => 1,
            });
            out.push(slot.b.is_some() as u8);
            let write = |out: &mut Vec<u8>, t: &Tensor| {
                out.extend_from_slice(&(t.len() as u32).to_le_bytes());
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            };
            write(&mut out, &slot.a);
            if let Some(b) = &slot.b {
                write(&mut out, b);
            }
        }
        out
    }

    /// Restores state written by [`Optimizer::state_blob`]. Tensor shapes are
    /// recovered lazily as flat vectors; the next `step` validates them
    /// against the live parameters.
    pub fn load_state_blob(&mut self, blob: &[u8]) -> Result<()> {
        let mut cur = std::io::Cursor::new(blob);
        use std::io::Read;
        let mut u64buf = [0u8; 8];
        let mut u32buf = [0u8; 4];
        let mut u8buf = [0u8; 1];
        let truncated = || Error::Manifest("optimizer state blob truncated".into());

        cur.read_exact(&mut u64buf).map_err(|_| truncated())?;
        self.t = u64::from_le_bytes(u64buf);
        cur.read_exact(&mut u32buf).map_err(|_| truncated())?;
        let count = u32::from_le_bytes(u32buf) as usize;
        self.slots.clear();
        for _ in 0..count {
            cur.read_exact(&mut u32buf).map_err(|_| truncated())?;
            let node = u32::from_le_bytes(u32buf) as usize;
            cur.read_exact(&mut u8buf).map_err(|_| truncated())?;
            let half = match u8buf[0] {
                0 => ParamHalf::Weights,
                1 => ParamHalf::Bias,
                x => return Err(Error::Manifest(format!("bad param half tag {x}"))),
            };
            cur.read_exact(&mut u8buf).map_err(|_| truncated())?;
            let has_b = u8buf[0] != 0;
            let read_tensor = |cur: &mut std::io::Cursor<&[u8]>| -> Result<Tensor> {
                let mut u32buf = [0u8; 4];
                cur.read_exact(&mut u32buf).map_err(|_| truncated())?;
                let len = u32::from_le_bytes(u32buf) as usize;
                let mut data = vec![0f32; len];
                let mut f32buf = [0u8; 4];
                for v in &mut data {
                    cur.read_exact(&mut f32buf).map_err(|_| truncated())?;
                    *v = f32::from_le_bytes(f32buf);
                }
                Tensor::from_vec(&[len], data)
            };
            let a = read_tensor(&mut cur)?;
            let b = if has_b { Some(read_tensor(&mut cur)?) } else { None };
            self.slots.insert(ParamKey { node, half }, SlotState { a, b });
        }
        Ok(())
    }
}

fn sgd_update(cfg: &SgdConfig, param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor) {
    if velocity.shape() != grad.shape() {
        // Shapes may have been flattened by a state reload.
        *velocity = velocity.clone().reshaped(grad.shape()).expect("velocity size");
    }
    let lr = cfg.lr as f32;
    let mu = cfg.momentum as f32;
    let lambda = cfg.weight_decay as f32;
    let w = param.data_mut();
    let g = grad.data();
    let v = velocity.data_mut();

    match cfg.decay_mode {
        WeightDecayMode::Decoupled => {
            if lambda != 0.0 {
                let shrink = 1.0 - lr * lambda;
                for wi in w.iter_mut() {
                    *wi *= shrink;
                }
            }
            for i in 0..g.len() {
                v[i] = mu * v[i] + g[i];
                let step = if cfg.nesterov { g[i] + mu * v[i] } else { v[i] };
                w[i] -= lr * step;
            }
        }
        WeightDecayMode::Coupled => {
            for i in 0..g.len() {
                let gi = g[i] + lambda * w[i];
                v[i] = mu * v[i] + gi;
                let step = if cfg.nesterov { gi + mu * v[i] } else { v[i] };
                w[i] -= lr * step;
            }
        }
    }
}

fn nadam_update(
    cfg: &NadamConfig,
    t: u64,
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
) {
    if m.shape() != grad.shape() {
        *m = m.clone().reshaped(grad.shape()).expect("moment size");
    }
    if v.shape() != grad.shape() {
        *v = v.clone().reshaped(grad.shape()).expect("moment size");
    }
    let lr = cfg.lr as f32;
    let b1 = cfg.beta1 as f32;
    let b2 = cfg.beta2 as f32;
    let eps = cfg.epsilon as f32;
    let bc1 = (1.0 - (cfg.beta1).powi(t as i32)) as f32;
    let bc2 = (1.0 - (cfg.beta2).powi(t as i32)) as f32;

    let w = param.data_mut();
    let g = grad.data();
    let md = m.data_mut();
    let vd = v.data_mut();
    for i in 0..g.len() {
        md[i] = b1 * md[i] + (1.0 - b1) * g[i];
        vd[i] = b2 * vd[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = md[i] / bc1;
        let v_hat = vd[i] / bc2;
        let m_bar = b1 * m_hat + (1.0 - b1) * g[i] / bc1;
        w[i] -= lr * m_bar / (v_hat.sqrt() + eps);
    }
}
