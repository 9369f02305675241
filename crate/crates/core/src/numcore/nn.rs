//! Layers built on [`Graph`] and [`ParamStore`].

use rand::Rng;

use super::{Graph, NumError, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::None => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = store.add_uniform(format!("{name}.w"), inputs, outputs, inputs, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, outputs]));
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }

    /// Scale the initial weights, e.g. to start an output head near zero.
    pub fn scale_weights(&self, store: &mut ParamStore, factor: f64) {
        store.get_mut(self.w).data_mut().iter_mut().for_each(|v| *v *= factor);
    }
}

/// Feed-forward stack; the activation is applied after every layer but the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, hidden, output }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumError> {
        let mut h = x;
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h)?;
            h = if i + 1 < n { self.hidden.apply(g, h) } else { self.output.apply(g, h) };
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("empty mlp")
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[1, width], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, width]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NumError> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub heads: usize,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub ff: Mlp,
}

impl AttentionBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            heads,
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, rng),
            proj: Linear::new(store, &format!("{name}.proj"), width, width, rng),
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            ff: Mlp::new(
                store,
                &format!("{name}.ff"),
                &[width, ff_width, width],
                Activation::Relu,
                Activation::None,
                rng,
            ),
        }
    }

    /// `x` is `(batch * seq, width)`; `mask` marks real positions.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: &[bool],
        batch: usize,
        seq: usize,
    ) -> Result<Var, NumError> {
        let width = self.proj.outputs;
        let h = self.norm1.forward(g, store, x)?;
        let qkv = self.qkv.forward(g, store, h)?;
        let q = g.slice_cols(qkv, 0, width)?;
        let k = g.slice_cols(qkv, width, 2 * width)?;
        let v = g.slice_cols(qkv, 2 * width, 3 * width)?;
        let a = g.attention(q, k, v, mask, batch, seq, self.heads)?;
        let a = self.proj.forward(g, store, a)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        g.add(x, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Tanh,
}

impl std::str::FromStr for CellKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gru" => Ok(CellKind::Gru),
            "tanh" => Ok(CellKind::Tanh),
            other => Err(format!("unknown recurrent cell '{other}' (expected gru|tanh)")),
        }
    }
}

/// One recurrent layer. The GRU packs its reset/update/candidate gates side by side.
#[derive(Clone, Debug)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub hidden: usize,
    input_map: Linear,
    hidden_map: Linear,
}

impl RecurrentCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kind: CellKind,
        inputs: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let gates = match kind {
            CellKind::Gru => 3,
            CellKind::Tanh => 1,
        };
        Self {
            kind,
            hidden,
            input_map: Linear::new(store, &format!("{name}.in"), inputs, gates * hidden, rng),
            hidden_map: Linear::new(store, &format!("{name}.hid"), hidden, gates * hidden, rng),
        }
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var, NumError> {
        let xi = self.input_map.forward(g, store, x)?;
        let hh = self.hidden_map.forward(g, store, h)?;
        match self.kind {
            CellKind::Tanh => {
                let s = g.add(xi, hh)?;
                Ok(g.tanh(s))
            }
            CellKind::Gru => {
                let n = self.hidden;
                let xr = g.slice_cols(xi, 0, 2 * n)?;
                let hr = g.slice_cols(hh, 0, 2 * n)?;
                let gates = g.add(xr, hr)?;
                let gates = g.sigmoid(gates);
                let r = g.slice_cols(gates, 0, n)?;
                let u = g.slice_cols(gates, n, 2 * n)?;
                let xc = g.slice_cols(xi, 2 * n, 3 * n)?;
                let hc = g.slice_cols(hh, 2 * n, 3 * n)?;
                let rh = g.mul(r, hc)?;
                let c = g.add(xc, rh)?;
                let c = g.tanh(c);
                // h' = c + u * (h - c)
                let d = g.sub(h, c)?;
                let ud = g.mul(u, d)?;
                g.add(c, ud)
            }
        }
    }
}
