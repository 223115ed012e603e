use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{CaptureBuffer, Model, NamedTensorStore};
use crate::awq::{awq_quantize, select_scales, unscale_columns, AwqScales, ChannelStats};
use crate::calibkit::{derive_seed, CalibrationSet};
use crate::error::{QlabError, Result};
use crate::gptq::{gptq_quantize, proxy_error, HessianAccumulator};
use crate::numerics::Matrix;
use crate::quantgrid::{dequantize, rtn_quantize, Method, QuantSpec, QuantizedTensor};

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    Dense(Matrix),
    Quantized(QuantizedTensor),
}

impl StoredTensor {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            StoredTensor::Dense(m) => m.shape(),
            StoredTensor::Quantized(q) => (q.rows, q.cols),
        }
    }

    /// Weights in the original parameterization (`deq(Q)·diag(s)⁻¹` for AWQ).
    pub fn to_original(&self) -> Result<Matrix> {
        match self {
            StoredTensor::Dense(m) => Ok(m.clone()),
            StoredTensor::Quantized(q) => {
                let deq = dequantize(q)?;
                Ok(match &q.channel_scales {
                    Some(s) => unscale_columns(&deq, s),
                    None => deq,
                })
            }
        }
    }
}

/// Model weights with quantized projections and full-precision everything else.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantizedStore {
    tensors: BTreeMap<String, StoredTensor>,
}

impl QuantizedStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: StoredTensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &StoredTensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Dense store in the original parameterization.
    pub fn to_dense(&self) -> Result<NamedTensorStore> {
        let mut out = NamedTensorStore::new();
        for (name, t) in &self.tensors {
            out.insert(name.clone(), t.to_original()?);
        }
        Ok(out)
    }

    /// Runnable model: projections use `deq(Q)` with runtime `x ⊘ s` for AWQ.
    pub fn to_model(&self) -> Result<Model> {
        let mut stored = NamedTensorStore::new();
        for (name, t) in &self.tensors {
            let m = match t {
                StoredTensor::Dense(m) => m.clone(),
                StoredTensor::Quantized(q) => dequantize(q)?,
            };
            stored.insert(name.clone(), m);
        }
        let mut model = Model::from_store(&stored)?;
        for (name, t) in &self.tensors {
            if let StoredTensor::Quantized(QuantizedTensor {
                channel_scales: Some(s),
                ..
            }) = t
            {
                model.projection_mut(name)?.input_scales = Some(s.clone());
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Clone)]
pub struct QuantizeOutcome {
    pub store: QuantizedStore,
    /// `tr((W - Ŵ) H (W - Ŵ)ᵀ)` per projection; empty when no calibration ran.
    pub proxy_errors: BTreeMap<String, f64>,
    pub awq_scales: BTreeMap<String, AwqScales>,
    pub capture: Option<CaptureBuffer>,
}

/// Runs calibration forward passes, then quantizes every layer projection.
/// Embeddings, norms and `lm_head` stay full precision.
pub fn quantize_model(
    store: &NamedTensorStore,
    calib: Option<&CalibrationSet>,
    spec: &QuantSpec,
) -> Result<QuantizeOutcome> {
    spec.validate()?;
    let cfg = store.validate()?;
    if calib.is_none() && spec.method != Method::Rtn {
        return Err(QlabError::config(
            "/calib",
            format!("{} needs a calibration set", spec.method),
        ));
    }
    let capture = match calib {
        Some(set) => Some(capture_activations(store, set, spec)?),
        None => None,
    };

    let names = cfg.projection_names();
    type Quantized = (QuantizedTensor, Option<f64>, Option<AwqScales>);
    let results: Vec<Result<Quantized>> = names
        .par_iter()
        .map(|name| {
            let w = store.get(name).expect("validated");
            let hessian = match &capture {
                Some(buf) => {
                    if buf.columns(name) == 0 {
                        return Err(QlabError::DegenerateCalibration("no activations captured"));
                    }
                    let x = buf.matrix(name)?;
                    let mut acc = HessianAccumulator::new(x.rows(), spec.damping);
                    acc.accumulate(&x)?;
                    Some((x, acc.finalize()?))
                }
                None => None,
            };
            let (q, scales) = match spec.method {
                Method::Rtn => (rtn_quantize(w, spec)?, None),
                Method::Gptq => {
                    let (_, h) = hessian.as_ref().expect("calibrated");
                    (gptq_quantize(w, h, spec)?.quantized, None)
                }
                Method::Awq => {
                    let (x, _) = hessian.as_ref().expect("calibrated");
                    let mut stats = ChannelStats::new(x.rows());
                    stats.collect(x)?;
                    let s = select_scales(&stats, w, &spec.awq)?;
                    (awq_quantize(w, &s, spec)?, Some(s))
                }
            };
            let proxy = match &hessian {
                Some((_, h)) => {
                    let w_hat = StoredTensor::Quantized(q.clone()).to_original()?;
                    Some(proxy_error(w, &w_hat, h)?)
                }
                None => None,
            };
            Ok((q, proxy, scales))
        })
        .collect();

    let mut out = QuantizedStore::new();
    for (name, m) in store.iter() {
        if !names.contains(name) {
            out.insert(name.clone(), StoredTensor::Dense(m.clone()));
        }
    }
    let mut proxy_errors = BTreeMap::new();
    let mut awq_scales = BTreeMap::new();
    for (name, res) in names.into_iter().zip(results) {
        let (q, proxy, scales) = res?;
        if let Some(p) = proxy {
            proxy_errors.insert(name.clone(), p);
        }
        if let Some(s) = scales {
            awq_scales.insert(name.clone(), s);
        }
        out.insert(name, StoredTensor::Quantized(q));
    }
    Ok(QuantizeOutcome {
        store: out,
        proxy_errors,
        awq_scales,
        capture,
    })
}

/// Forward passes over the calibration set in batches of `spec.batch_size`,
/// capturing every projection input. Examples longer than the context are
/// split into context-sized windows.
pub fn capture_activations(
    store: &NamedTensorStore,
    calib: &CalibrationSet,
    spec: &QuantSpec,
) -> Result<CaptureBuffer> {
    let cfg = store.config()?;
    match calib.tokenizer.vocab_size() {
        Some(v) if v == cfg.vocab_size => {}
        other => {
            return Err(QlabError::VocabMismatch {
                calib: other.unwrap_or(0),
                model: cfg.vocab_size,
            })
        }
    }
    let model = Model::from_store(store)?;
    let mut buf = CaptureBuffer::new(
        cfg.projection_names(),
        spec.capture_cap,
        derive_seed(spec.seed, "capture"),
    );
    for batch in calib.examples.chunks(spec.batch_size) {
        for ex in batch {
            for window in ex.ids.chunks(cfg.context_length) {
                model.forward(window, Some(&mut buf))?;
            }
        }
    }
    Ok(buf)
}
