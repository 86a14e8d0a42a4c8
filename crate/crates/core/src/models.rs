//! Knob-conditioned model architectures.
//!
//! Two families: a feed-forward WaveNet whose gated layers mix a dilated
//! convolution of the trunk, a 1x1 convolution of the (fixed) local condition
//! c = x, and a per-layer linear map of the knob vector broadcast over time;
//! and an LSTM that sees the knob vector concatenated onto every input
//! sample. Both are causal and differentiable with respect to parameters,
//! input, and knobs.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, Tensor, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("knob vector has {got} components but the model expects {expected}")]
    KnobCount { expected: usize, got: usize },
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unrecognized model file {0} (bad magic)")]
    BadMagic(String),
    #[error("unsupported model format version {0}")]
    BadVersion(u32),
    #[error("corrupt model file {path}: {detail}")]
    Corrupt { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaveNetSpec {
    pub channels: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub skip_channels: usize,
    pub knobs: usize,
}

impl WaveNetSpec {
    /// Number of past input samples influencing one output sample.
    pub fn receptive_field(&self) -> usize {
        1 + self.dilations.iter().map(|d| d * (self.kernel_size - 1)).sum::<usize>()
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.channels == 0 || self.kernel_size == 0 || self.skip_channels == 0 || self.knobs == 0 {
            return Err(ModelError::BadSpec("channels, kernel_size, skip_channels, knobs must be >= 1".into()));
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|d| *d == 0) {
            return Err(ModelError::BadSpec("dilations must be non-empty and >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmSpec {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub knobs: usize,
}

impl LstmSpec {
    pub fn input_size(&self) -> usize {
        1 + self.knobs
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_size == 0 || self.num_layers == 0 || self.knobs == 0 {
            return Err(ModelError::BadSpec("hidden_size, num_layers, knobs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelSpec {
    WaveNet(WaveNetSpec),
    Lstm(LstmSpec),
}

impl ModelSpec {
    pub fn knobs(&self) -> usize {
        match self {
            ModelSpec::WaveNet(s) => s.knobs,
            ModelSpec::Lstm(s) => s.knobs,
        }
    }

    /// Samples of past context a forward pass needs before its first valid
    /// output; used when slicing training segments.
    pub fn context_samples(&self) -> usize {
        match self {
            ModelSpec::WaveNet(s) => s.receptive_field() - 1,
            ModelSpec::Lstm(_) => 0,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        match self {
            ModelSpec::WaveNet(s) => s.validate(),
            ModelSpec::Lstm(s) => s.validate(),
        }
    }
}

/// Named parameter tensors in a fixed, reproducible order.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    entries: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Sum of squared differences over all values; both sides must have the
    /// same names and shapes.
    pub fn squared_distance(&self, other: &ModelParams) -> f64 {
        assert_eq!(self.entries.len(), other.entries.len());
        self.entries
            .iter()
            .zip(other.entries.iter())
            .map(|((na, ta), (nb, tb))| {
                assert_eq!(na, nb);
                ta.values()
                    .iter()
                    .zip(tb.values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    }
}

/// A spec paired with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

/// Parameter leaves registered on one graph, in `ModelParams` order.
pub struct BoundModel {
    ids: Vec<TensorId>,
}

impl BoundModel {
    pub fn param_ids(&self) -> &[TensorId] {
        &self.ids
    }
}

impl Model {
    pub fn new(spec: ModelSpec, params: ModelParams) -> Self {
        Model { spec, params }
    }

    /// Fresh parameters for `spec`: weights uniform in +-sqrt(3/fan_in)
    /// (std 1/sqrt(fan_in)), biases zero except LSTM forget gates at 1.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::default();
        let weight = |rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize| {
            let a = (3.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
            Tensor::new(vals, shape).expect("finite init")
        };
        match &spec {
            ModelSpec::WaveNet(s) => {
                let (c, k, sk, nk) = (s.channels, s.kernel_size, s.skip_channels, s.knobs);
                params.insert("input", weight(&mut rng, vec![c, 1, 1], 1));
                for (i, _) in s.dilations.iter().enumerate() {
                    params.insert(format!("layer{i}.wf"), weight(&mut rng, vec![c, c, k], c * k));
                    params.insert(format!("layer{i}.wg"), weight(&mut rng, vec![c, c, k], c * k));
                    params.insert(format!("layer{i}.vf"), weight(&mut rng, vec![c, 1, 1], 1));
                    params.insert(format!("layer{i}.vg"), weight(&mut rng, vec![c, 1, 1], 1));
                    params.insert(format!("layer{i}.vpf"), weight(&mut rng, vec![c, nk], nk));
                    params.insert(format!("layer{i}.vpg"), weight(&mut rng, vec![c, nk], nk));
                    params.insert(format!("layer{i}.res"), weight(&mut rng, vec![c, c, 1], c));
                    params.insert(format!("layer{i}.skip"), weight(&mut rng, vec![sk, c, 1], c));
                }
                params.insert("head", weight(&mut rng, vec![1, sk, 1], sk));
            }
            ModelSpec::Lstm(s) => {
                let h = s.hidden_size;
                for l in 0..s.num_layers {
                    let input = if l == 0 { s.input_size() } else { h };
                    params.insert(format!("lstm{l}.wx"), weight(&mut rng, vec![4 * h, input], input));
                    params.insert(format!("lstm{l}.wh"), weight(&mut rng, vec![4 * h, h], h));
                    let mut bias = vec![0.0; 4 * h];
                    bias[h..2 * h].fill(1.0); // forget gates open at init
                    params.insert(format!("lstm{l}.b"), Tensor::new(bias, vec![4 * h]).unwrap());
                }
                params.insert("head.w", weight(&mut rng, vec![1, h], h));
                params.insert("head.b", Tensor::new(vec![0.0], vec![1]).unwrap());
            }
        }
        Ok(Model { spec, params })
    }

    /// Register all parameters as leaves on `g`.
    pub fn bind(&self, g: &mut Graph, require_grad: bool) -> BoundModel {
        let ids = self.params.iter().map(|(_, t)| g.insert(t, require_grad)).collect();
        BoundModel { ids }
    }

    /// Forward pass using previously bound parameters. `x` is a rank-1 signal
    /// [T]; `knobs` is the rank-1 knob vector [k]. Returns the rank-1 output.
    pub fn forward_bound(&self, g: &mut Graph, bound: &BoundModel, x: TensorId, knobs: TensorId) -> Result<TensorId, ModelError> {
        let k_expected = self.spec.knobs();
        match g.shape(knobs) {
            [k] if *k == k_expected => {}
            s => {
                return Err(ModelError::KnobCount {
                    expected: k_expected,
                    got: s.iter().product(),
                })
            }
        }
        let t = g.numel(x);
        let mut ids = bound.ids.iter().copied();
        let mut next = || ids.next().expect("bound params exhausted");

        match &self.spec {
            ModelSpec::WaveNet(s) => {
                let x2 = g.reshape(x, vec![1, t])?;
                let input_k = next();
                let mut trunk = g.conv1d_dilated(x2, input_k, 1, true)?;
                let mut skip_sum: Option<TensorId> = None;
                for (_, dil) in s.dilations.iter().enumerate() {
                    let (wf, wg, vf, vg, vpf, vpg, res, skip) =
                        (next(), next(), next(), next(), next(), next(), next(), next());
                    let f_conv = g.conv1d_dilated(trunk, wf, *dil, true)?;
                    let f_cond = g.conv1d_dilated(x2, vf, 1, true)?;
                    let f_knob = g.matmul(vpf, knobs)?;
                    let f_knob_t = g.broadcast_time(f_knob, t)?;
                    let f_sum = g.add(f_conv, f_cond)?;
                    let f_pre = g.add(f_sum, f_knob_t)?;
                    let f_act = g.tanh(f_pre)?;

                    let g_conv = g.conv1d_dilated(trunk, wg, *dil, true)?;
                    let g_cond = g.conv1d_dilated(x2, vg, 1, true)?;
                    let g_knob = g.matmul(vpg, knobs)?;
                    let g_knob_t = g.broadcast_time(g_knob, t)?;
                    let g_sum = g.add(g_conv, g_cond)?;
                    let g_pre = g.add(g_sum, g_knob_t)?;
                    let g_act = g.sigmoid(g_pre)?;

                    let z = g.mul(f_act, g_act)?;
                    let skip_out = g.conv1d_dilated(z, skip, 1, true)?;
                    skip_sum = Some(match skip_sum {
                        None => skip_out,
                        Some(acc) => g.add(acc, skip_out)?,
                    });
                    let res_out = g.conv1d_dilated(z, res, 1, true)?;
                    trunk = g.add(trunk, res_out)?;
                }
                let head = next();
                let mixed = g.conv1d_dilated(skip_sum.expect("at least one layer"), head, 1, true)?;
                Ok(g.reshape(mixed, vec![t])?)
            }
            ModelSpec::Lstm(s) => {
                let x2 = g.reshape(x, vec![1, t])?;
                let gb = g.broadcast_time(knobs, t)?;
                let mut h = g.concat_rows(&[x2, gb])?;
                for _ in 0..s.num_layers {
                    let (wx, wh, b) = (next(), next(), next());
                    h = g.lstm_seq(h, wx, wh, b, s.hidden_size)?;
                }
                let head_w = next();
                let head_b = next();
                let mixed = g.matmul(head_w, h)?;
                let bias_t = g.broadcast_time(head_b, t)?;
                let out = g.add(mixed, bias_t)?;
                Ok(g.reshape(out, vec![t])?)
            }
        }
    }

    /// Convenience one-shot forward: binds non-grad params, runs, returns values.
    pub fn predict(&self, x: &[f64], knobs: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let xt = g.leaf(x.to_vec(), vec![x.len()], false)?;
        let kt = g.leaf(knobs.to_vec(), vec![knobs.len()], false)?;
        let bound = self.bind(&mut g, false);
        let y = self.forward_bound(&mut g, &bound, xt, kt)?;
        Ok(g.values(y).to_vec())
    }
}

// ---- serialization ---------------------------------------------------------

const MAGIC: &[u8; 8] = b"AMPMODEL";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeaderParam {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    params: Vec<HeaderParam>,
}

/// Versioned container: magic, version, JSON header (spec + parameter
/// names/shapes), then all values as little-endian f32 in header order.
pub fn save_model(model: &Model, path: &Path) -> Result<(), ModelError> {
    let name = path.display().to_string();
    let header = Header {
        spec: model.spec.clone(),
        params: model
            .params
            .iter()
            .map(|(n, t)| HeaderParam { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| ModelError::Corrupt { path: name.clone(), detail: e.to_string() })?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, t) in model.params.iter() {
        for v in t.values() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|source| ModelError::Io { path: name.clone(), source })?;
    f.write_all(&out).map_err(|source| ModelError::Io { path: name, source })
}

pub fn load_model(path: &Path) -> Result<Model, ModelError> {
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| ModelError::Io { path: name.clone(), source })?;
    if bytes.len() < 16 {
        return Err(ModelError::Corrupt { path: name, detail: "file shorter than fixed header".into() });
    }
    if &bytes[0..8] != MAGIC {
        return Err(ModelError::BadMagic(name));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ModelError::BadVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(ModelError::Corrupt { path: name, detail: "truncated header".into() });
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| ModelError::Corrupt { path: name.clone(), detail: format!("header: {e}") })?;
    header.spec.validate()?;

    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let payload = &bytes[16 + header_len..];
    if payload.len() != total * 4 {
        return Err(ModelError::Corrupt {
            path: name,
            detail: format!("payload has {} bytes, header implies {}", payload.len(), total * 4),
        });
    }
    let mut params = ModelParams::default();
    let mut off = 0usize;
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let vals: Vec<f64> = payload[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        off += 4 * n;
        let t = Tensor::new(vals, p.shape.clone())
            .map_err(|e| ModelError::Corrupt { path: name.clone(), detail: e.to_string() })?;
        params.insert(p.name.clone(), t);
    }
    Ok(Model { spec: header.spec, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcheck::{central_diff, norm_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_wavenet(knobs: usize) -> ModelSpec {
        ModelSpec::WaveNet(WaveNetSpec {
            channels: 3,
            kernel_size: 2,
            dilations: vec![1, 2],
            skip_channels: 2,
            knobs,
        })
    }

    fn small_lstm(knobs: usize) -> ModelSpec {
        ModelSpec::Lstm(LstmSpec { hidden_size: 3, num_layers: 1, knobs })
    }

    fn rand_signal(seed: u64, t: usize) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..t).map(|_| r.gen_range(-0.8..0.8)).collect()
    }

    #[test]
    fn receptive_field_formula() {
        let s = WaveNetSpec { channels: 8, kernel_size: 3, dilations: vec![1, 2, 4, 8], skip_channels: 8, knobs: 6 };
        assert_eq!(s.receptive_field(), 1 + 2 * (1 + 2 + 4 + 8));
    }

    #[test]
    fn wavenet_zero_head_zero_output() {
        let mut m = Model::init(small_wavenet(2), 3).unwrap();
        let head = m.params.get_mut("head").unwrap();
        head.values_mut().fill(0.0);
        let y = m.predict(&rand_signal(1, 64), &[0.3, 0.9]).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lstm_zero_params_constant_head_bias() {
        let mut m = Model::init(small_lstm(2), 3).unwrap();
        for (_, t) in m.params.iter_mut() {
            t.values_mut().fill(0.0);
        }
        m.params.get_mut("head.b").unwrap().values_mut()[0] = 0.25;
        let y = m.predict(&rand_signal(2, 32), &[0.1, 0.7]).unwrap();
        assert!(y.iter().all(|v| (*v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn knob_count_mismatch_rejected() {
        let m = Model::init(small_wavenet(6), 0).unwrap();
        let err = m.predict(&rand_signal(3, 16), &[0.5; 4]).unwrap_err();
        assert!(matches!(err, ModelError::KnobCount { expected: 6, got: 4 }));
    }

    // Hand-rolled evaluation of the gated equation for a single layer,
    // channels=1, kernel_size=2, dilation=1, with hand-set weights.
    #[test]
    fn wavenet_single_layer_matches_direct_evaluation() {
        let spec = ModelSpec::WaveNet(WaveNetSpec {
            channels: 1,
            kernel_size: 2,
            dilations: vec![1],
            skip_channels: 1,
            knobs: 2,
        });
        let mut m = Model::init(spec, 0).unwrap();
        let set = |m: &mut Model, name: &str, vals: &[f64]| {
            m.params.get_mut(name).unwrap().values_mut().copy_from_slice(vals);
        };
        set(&mut m, "input", &[0.9]);
        set(&mut m, "layer0.wf", &[0.4, -0.3]);
        set(&mut m, "layer0.wg", &[-0.2, 0.6]);
        set(&mut m, "layer0.vf", &[0.5]);
        set(&mut m, "layer0.vg", &[-0.4]);
        set(&mut m, "layer0.vpf", &[0.7, -0.1]);
        set(&mut m, "layer0.vpg", &[0.2, 0.3]);
        set(&mut m, "layer0.res", &[1.1]);
        set(&mut m, "layer0.skip", &[-0.8]);
        set(&mut m, "head", &[0.55]);

        let x = rand_signal(7, 16);
        let knobs = [0.25, 0.8];
        let y = m.predict(&x, &knobs).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for t in 0..x.len() {
            let trunk = 0.9 * x[t];
            let trunk_prev = if t == 0 { 0.0 } else { 0.9 * x[t - 1] };
            let f_pre = 0.4 * trunk_prev - 0.3 * trunk + 0.5 * x[t] + 0.7 * knobs[0] - 0.1 * knobs[1];
            let g_pre = -0.2 * trunk_prev + 0.6 * trunk - 0.4 * x[t] + 0.2 * knobs[0] + 0.3 * knobs[1];
            let z = f_pre.tanh() * sig(g_pre);
            assert!(z > -1.0 && z < 1.0);
            let want = 0.55 * (-0.8 * z);
            assert!((y[t] - want).abs() < 1e-12, "t={t}: {} vs {want}", y[t]);
        }
    }

    // Full LSTM model vs a scalar-by-scalar recurrence, hidden 2, T = 3.
    #[test]
    fn lstm_matches_scalar_recurrence_oracle() {
        let spec = ModelSpec::Lstm(LstmSpec { hidden_size: 2, num_layers: 1, knobs: 2 });
        let m = Model::init(spec, 42).unwrap();
        let x = rand_signal(11, 3);
        let knobs = [0.3, 0.65];
        let got = m.predict(&x, &knobs).unwrap();

        let h = 2usize;
        let wx = m.params.get("lstm0.wx").unwrap().values();
        let wh = m.params.get("lstm0.wh").unwrap().values();
        let b = m.params.get("lstm0.b").unwrap().values();
        let hw = m.params.get("head.w").unwrap().values();
        let hb = m.params.get("head.b").unwrap().values()[0];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let inp = 3usize; // 1 + k
        let mut hp = [0.0; 2];
        let mut cp = [0.0; 2];
        for (t, xt) in x.iter().enumerate() {
            let cat = [*xt, knobs[0], knobs[1]];
            let mut pre = [0.0; 8];
            for (r, p) in pre.iter_mut().enumerate() {
                let mut acc = b[r];
                for c in 0..inp {
                    acc += wx[r * inp + c] * cat[c];
                }
                for u in 0..h {
                    acc += wh[r * h + u] * hp[u];
                }
                *p = acc;
            }
            let mut hn = [0.0; 2];
            for u in 0..h {
                let ig = sig(pre[u]);
                let fg = sig(pre[h + u]);
                let gg = pre[2 * h + u].tanh();
                let og = sig(pre[3 * h + u]);
                let c = fg * cp[u] + ig * gg;
                hn[u] = og * c.tanh();
                cp[u] = c;
            }
            hp = hn;
            let want = hw[0] * hp[0] + hw[1] * hp[1] + hb;
            assert!((got[t] - want).abs() < 1e-12, "t={t}: {} vs {want}", got[t]);
        }
    }

    #[test]
    fn causality_both_architectures() {
        for (spec, seed) in [(small_wavenet(3), 5u64), (small_lstm(3), 6u64)] {
            let m = Model::init(spec, seed).unwrap();
            let x = rand_signal(seed, 48);
            let knobs = [0.2, 0.5, 0.9];
            let y0 = m.predict(&x, &knobs).unwrap();
            for pos in [10usize, 31] {
                let mut xp = x.clone();
                xp[pos] += 0.3;
                let y1 = m.predict(&xp, &knobs).unwrap();
                for t in 0..pos {
                    assert_eq!(y0[t], y1[t], "t={t} pos={pos}");
                }
                assert_ne!(y0[pos], y1[pos]);
            }
        }
    }

    #[test]
    fn wavenet_translation_consistency() {
        let m = Model::init(small_wavenet(2), 9).unwrap();
        let rf = match &m.spec {
            ModelSpec::WaveNet(s) => s.receptive_field(),
            _ => unreachable!(),
        };
        let x = rand_signal(20, 96);
        let knobs = [0.4, 0.6];
        let y = m.predict(&x, &knobs).unwrap();
        let d = 7usize;
        let mut xd = vec![0.0; d];
        xd.extend_from_slice(&x[..x.len() - d]);
        let yd = m.predict(&xd, &knobs).unwrap();
        for t in (d + rf)..x.len() {
            assert!((yd[t] - y[t - d]).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn init_deterministic_and_seed_sensitive() {
        for spec in [small_wavenet(4), small_lstm(4)] {
            let a = Model::init(spec.clone(), 123).unwrap();
            let b = Model::init(spec.clone(), 123).unwrap();
            assert_eq!(a.params.squared_distance(&b.params), 0.0);
            let c = Model::init(spec, 124).unwrap();
            assert!(a.params.squared_distance(&c.params) > 0.0);
        }
    }

    #[test]
    fn init_fan_in_scaled_std() {
        let spec = ModelSpec::WaveNet(WaveNetSpec {
            channels: 16,
            kernel_size: 3,
            dilations: vec![1],
            skip_channels: 8,
            knobs: 6,
        });
        let m = Model::init(spec, 7).unwrap();
        let w = m.params.get("layer0.wf").unwrap();
        let vals = w.values();
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        let target = 1.0 / (16.0 * 3.0f64).sqrt();
        let std = var.sqrt();
        assert!(
            (std - target).abs() < 0.2 * target,
            "std {std} vs target {target}"
        );
    }

    #[test]
    fn knob_gradients_match_fd_both_archs() {
        for (spec, seed) in [(small_wavenet(3), 31u64), (small_lstm(3), 32u64)] {
            let m = Model::init(spec, seed).unwrap();
            let x = rand_signal(seed + 1, 40);
            let g0 = vec![0.35, 0.55, 0.75];
            // Scalar objective: mean of output.
            let eval = |kn: &[f64]| {
                let mut g = Graph::new();
                let xt = g.leaf(x.clone(), vec![x.len()], false).unwrap();
                let kt = g.leaf(kn.to_vec(), vec![kn.len()], false).unwrap();
                let bound = m.bind(&mut g, false);
                let y = m.forward_bound(&mut g, &bound, xt, kt).unwrap();
                let s = g.mean(y).unwrap();
                g.scalar_value(s)
            };
            let mut g = Graph::new();
            let xt = g.leaf(x.clone(), vec![x.len()], false).unwrap();
            let kt = g.leaf(g0.clone(), vec![3], true).unwrap();
            let bound = m.bind(&mut g, false);
            let y = m.forward_bound(&mut g, &bound, xt, kt).unwrap();
            let s = g.mean(y).unwrap();
            g.backward(s).unwrap();
            let analytic = g.grad(kt).unwrap().to_vec();
            assert!(analytic.iter().any(|v| v.abs() > 1e-8), "conditioning is dead");
            let fd = central_diff(eval, &g0, 1e-5);
            let err = norm_rel_err(&analytic, &fd);
            assert!(err < 1e-5, "rel err {err}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (spec, seed) in [(small_wavenet(6), 51u64), (small_lstm(6), 52u64)] {
            let m = Model::init(spec, seed).unwrap();
            let path = dir.path().join(format!("m{seed}.ampmodel"));
            save_model(&m, &path).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back.spec, m.spec);
            for ((na, ta), (nb, tb)) in m.params.iter().zip(back.params.iter()) {
                assert_eq!(na, nb);
                assert_eq!(ta.shape(), tb.shape());
            }
            // Probe output MSE under f32 quantization.
            let x = rand_signal(seed + 2, 256);
            let knobs = [0.1, 0.3, 0.5, 0.7, 0.9, 0.2];
            let y0 = m.predict(&x, &knobs).unwrap();
            let y1 = back.predict(&x, &knobs).unwrap();
            let mse: f64 = y0.iter().zip(&y1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y0.len() as f64;
            assert!(mse < 1e-10, "probe MSE {mse}");
        }
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::init(small_lstm(2), 1).unwrap();
        let path = dir.path().join("m.ampmodel");
        save_model(&m, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("unrecognized model file"), "{err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::init(small_lstm(2), 1).unwrap();
        let path = dir.path().join("m.ampmodel");
        save_model(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_model(&path), Err(ModelError::Corrupt { .. })));
    }
}
