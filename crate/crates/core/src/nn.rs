//! Parameter storage and the layer building blocks shared by every network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(default = "default_true")]
    pub trainable: bool,
}

fn default_true() -> bool {
    true
}

/// Flat, ordered table of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// Registers a tensor that is serialized with the model but never updated.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn trainable_at(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn to_named(&self) -> Vec<NamedParam> {
        self.names
            .iter()
            .zip(&self.values)
            .zip(&self.trainable)
            .map(|((name, v), &trainable)| NamedParam {
                name: name.clone(),
                shape: v.shape().to_vec(),
                values: v.data().to_vec(),
                trainable,
            })
            .collect()
    }

    /// Overwrites values from a named table. Every name and shape must match.
    pub fn load_named(&mut self, table: &[NamedParam]) -> Result<(), String> {
        if table.len() != self.len() {
            return Err(format!("parameter count mismatch: file has {}, model has {}", table.len(), self.len()));
        }
        for p in table {
            let id = self.find(&p.name).ok_or_else(|| format!("unknown parameter {}", p.name))?;
            if self.values[id.0].shape() != p.shape.as_slice() {
                return Err(format!(
                    "shape mismatch for {}: file {:?}, model {:?}",
                    p.name,
                    p.shape,
                    self.values[id.0].shape()
                ));
            }
            self.values[id.0] = Tensor::new(&p.shape, p.values.clone());
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Reshapes a rank-1 bias so it broadcasts against the last axis of `like`.
fn bias_view(g: &mut Graph, bias: Var, rank: usize) -> Var {
    let n = g.shape(bias)[0];
    let mut shape = vec![1; rank];
    shape[rank - 1] = n;
    g.reshape(bias, &shape)
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, &[in_dim, out_dim], bound));
        let b = store.add(format!("{name}.bias"), uniform(rng, &[out_dim], bound));
        Self { w, b: Some(b), in_dim, out_dim }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, &[in_dim, out_dim], bound));
        Self { w, b: None, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                let rank = g.shape(y).len();
                let bv = bias_view(g, b, rank);
                g.add(y, bv)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
struct GruLayer {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

/// Stacked GRU with zero initial state, gates ordered (reset, update, new).
#[derive(Clone, Debug)]
pub struct Gru {
    layers: Vec<GruLayer>,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, num_layers: usize, rng: &mut impl Rng) -> Self {
        assert!(num_layers >= 1);
        let bound = 1.0 / (hidden as f64).sqrt();
        let layers = (0..num_layers)
            .map(|l| {
                let fin = if l == 0 { input } else { hidden };
                GruLayer {
                    w_ih: store.add(format!("{name}.l{l}.w_ih"), uniform(rng, &[fin, 3 * hidden], bound)),
                    w_hh: store.add(format!("{name}.l{l}.w_hh"), uniform(rng, &[hidden, 3 * hidden], bound)),
                    b_ih: store.add(format!("{name}.l{l}.b_ih"), uniform(rng, &[3 * hidden], bound)),
                    b_hh: store.add(format!("{name}.l{l}.b_hh"), uniform(rng, &[3 * hidden], bound)),
                }
            })
            .collect();
        Self { layers, hidden }
    }

    /// `x [B, T, F] -> [B, T, H]` (top-layer hidden states at every step).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut seq = x;
        for layer in &self.layers {
            seq = self.layer_forward(g, store, layer, seq);
        }
        seq
    }

    fn layer_forward(&self, g: &mut Graph, store: &ParamStore, layer: &GruLayer, x: Var) -> Var {
        let (nb, t_len) = (g.shape(x)[0], g.shape(x)[1]);
        let h = self.hidden;
        let w_ih = g.param(store, layer.w_ih);
        let w_hh = g.param(store, layer.w_hh);
        let b_ih = g.param(store, layer.b_ih);
        let b_hh = g.param(store, layer.b_hh);
        let b_ih = bias_view(g, b_ih, 3);
        let b_hh = bias_view(g, b_hh, 2);
        // Input projections for all steps at once.
        let xw = g.matmul(x, w_ih);
        let xw = g.add(xw, b_ih);
        let mut state = g.input(Tensor::zeros(&[nb, h]));
        let mut outputs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = g.narrow(xw, 1, t, 1);
            let xt = g.reshape(xt, &[nb, 3 * h]);
            let hw = g.matmul(state, w_hh);
            let hw = g.add(hw, b_hh);
            let xr = g.narrow(xt, 1, 0, 2 * h);
            let hr = g.narrow(hw, 1, 0, 2 * h);
            let rz = g.add(xr, hr);
            let rz = g.sigmoid(rz);
            let r = g.narrow(rz, 1, 0, h);
            let z = g.narrow(rz, 1, h, h);
            let xn = g.narrow(xt, 1, 2 * h, h);
            let hn = g.narrow(hw, 1, 2 * h, h);
            let rhn = g.mul(r, hn);
            let n = g.add(xn, rhn);
            let n = g.tanh(n);
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let diff = g.sub(state, n);
            let zd = g.mul(z, diff);
            state = g.add(n, zd);
            outputs.push(g.reshape(state, &[nb, 1, h]));
        }
        g.concat(&outputs, 1)
    }
}

/// 1-D convolution layer over `[B, C, L]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    w: ParamId,
    b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, &[cout, cin, kernel], bound));
        let b = store.add(format!("{name}.bias"), uniform(rng, &[cout], bound));
        Self { w, b, stride, pad }
    }

    /// Same as [`Conv1d::new`] with weights and bias set to zero.
    pub fn zeros(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, pad: usize) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, kernel]));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, stride: 1, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv1d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed 1-D convolution layer over `[B, C, L]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    w: ParamId,
    b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((cout * kernel) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, &[cin, cout, kernel], bound));
        let b = store.add(format!("{name}.bias"), uniform(rng, &[cout], bound));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv_transpose1d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let groups = groups.min(channels);
        assert_eq!(channels % groups, 0, "{name}: {channels} channels not divisible into {groups} groups");
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, self.groups, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[features], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[features]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}
