use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Segments, Tape, Tensor, Var};
use crate::dynamics::DynamicsModel;
use crate::environment::NeighborSet;
use crate::error::{Error, Result};
use crate::linalg;

/// Relative neighbor states `ȳ`, one neighbor per row (`K × n`).
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Observation {
    pub fn new(n: usize) -> Self {
        Self { n, data: Vec::new() }
    }

    pub fn from_rows(n: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut o = Self::new(n);
        for r in rows {
            o.push(r)?;
        }
        Ok(o)
    }

    pub fn push(&mut self, column: &[f64]) -> Result<()> {
        if column.len() != self.n {
            return Err(Error::dim("observation column", self.n, column.len()));
        }
        self.data.extend_from_slice(column);
        Ok(())
    }

    /// Number of columns `K`.
    pub fn len(&self) -> usize {
        self.data.len() / self.n.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.data[k * self.n..(k + 1) * self.n]
    }

    /// Agents contribute `xʲ − xⁱ`; obstacle points are treated as resting
    /// pseudo-agents at the nearest boundary point.
    pub fn from_neighbors(model: &DynamicsModel, x: &[f64], nbrs: &NeighborSet) -> Self {
        let n = model.state_dim();
        let mut data = Vec::with_capacity(nbrs.len() * n);
        for a in &nbrs.agents {
            data.extend_from_slice(&a.relative);
        }
        for o in &nbrs.obstacles {
            let rest = model.rest_state(&o.point);
            data.extend(rest.iter().zip(x).map(|(q, p)| q - p));
        }
        Self { n, data }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out × in`
    pub w: Tensor,
    /// `1 × out`
    pub b: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain * (6.0 / inputs.max(1) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            w: Tensor {
                rows: outputs,
                cols: inputs,
                data,
            },
            b: Tensor::zeros(1, outputs),
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.w.rows).map(|o| linalg::dot(self.w.row(o), x) + self.b.data[o]));
    }
}

/// ReLU multilayer perceptron with a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(sizes: &[usize], out_gain: f64, rng: &mut R) -> Self {
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(w[0], w[1], if i == last { out_gain } else { 1.0 }, rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.rows)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&a, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut a, &mut next);
        }
        a
    }
}

/// `ρ(ȳ) = RowMax(ReLU(W ȳ))`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderNet {
    /// `p × n`
    pub w: Tensor,
}

impl EncoderNet {
    pub fn new<R: Rng>(n: usize, p: usize, rng: &mut R) -> Self {
        Self {
            w: Linear::new(n, p, 1.0, rng).w,
        }
    }

    pub fn features(&self) -> usize {
        self.w.rows
    }
}

/// Pooled features; zero for an empty observation.
pub fn encode(encoder: &EncoderNet, obs: &Observation) -> Result<Vec<f64>> {
    if obs.n != encoder.w.cols {
        return Err(Error::dim("observation rows", encoder.w.cols, obs.n));
    }
    let p = encoder.w.rows;
    let mut pooled = vec![0.0; p];
    for k in 0..obs.len() {
        let col = obs.column(k);
        for (i, slot) in pooled.iter_mut().enumerate() {
            let z = linalg::dot(encoder.w.row(i), col);
            if z > *slot {
                *slot = z;
            }
        }
    }
    Ok(pooled)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    /// State dimension.
    pub n: usize,
    /// Control dimension.
    pub m: usize,
    /// Position dimension.
    pub d: usize,
    /// Encoder features.
    pub p: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl NetShape {
    pub fn for_model(model: &DynamicsModel) -> Self {
        Self {
            n: model.state_dim(),
            m: model.control_dim(),
            d: model.pos_dim(),
            p: 32,
            hidden: 64,
            depth: 3,
        }
    }

    fn trunk_sizes(&self, inputs: usize, outputs: usize) -> Vec<usize> {
        let mut sizes = vec![inputs];
        sizes.extend(std::iter::repeat(self.hidden).take(self.depth));
        sizes.push(outputs);
        sizes
    }
}

#[derive(Clone, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

/// Tape handles for one network's parameters, in `params()` order.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub encoder: Var,
    pub layers: Vec<LinearVars>,
}

impl NetVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.encoder];
        for l in &self.layers {
            v.push(l.w);
            v.push(l.b);
        }
        v
    }

    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.all().into_iter().map(|v| grads.wrt(tape, v)).collect()
    }
}

fn register(tape: &mut Tape, encoder: &EncoderNet, trunk: &Mlp) -> NetVars {
    NetVars {
        encoder: tape.leaf(encoder.w.clone()),
        layers: trunk
            .layers
            .iter()
            .map(|l| LinearVars {
                w: tape.leaf(l.w.clone()),
                b: tape.leaf(l.b.clone()),
            })
            .collect(),
    }
}

fn build_encoder(tape: &mut Tape, w: Var, obs: Var, segments: &[usize], obs_t: Option<Var>) -> (Var, Option<Var>) {
    let z = tape.matmul_t(obs, w);
    let a = tape.relu(z);
    let (pooled, picks) = tape.segment_max(a, segments);
    let tangent = obs_t.map(|ot| {
        let mask = relu_mask(tape.value(z));
        let zt = tape.matmul_t(ot, w);
        let at = tape.mask(zt, mask);
        tape.pick(at, picks)
    });
    (pooled, tangent)
}

fn build_mlp(tape: &mut Tape, layers: &[LinearVars], input: Var, tangent: Option<Var>) -> (Var, Option<Var>) {
    let mut a = input;
    let mut t = tangent;
    let last = layers.len() - 1;
    for (i, l) in layers.iter().enumerate() {
        let lin = tape.matmul_t(a, l.w);
        let z = tape.add_row(lin, l.b);
        let zt = t.map(|tv| tape.matmul_t(tv, l.w));
        if i < last {
            let mask = relu_mask(tape.value(z));
            a = tape.relu(z);
            t = zt.map(|tv| tape.mask(tv, mask));
        } else {
            a = z;
            t = zt;
        }
    }
    (a, t)
}

fn relu_mask(z: &Tensor) -> Vec<f64> {
    z.data.iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect()
}

fn params_of<'a>(encoder: &'a EncoderNet, trunk: &'a Mlp) -> Vec<&'a Tensor> {
    let mut v = vec![&encoder.w];
    for l in &trunk.layers {
        v.push(&l.w);
        v.push(&l.b);
    }
    v
}

fn params_of_mut<'a>(encoder: &'a mut EncoderNet, trunk: &'a mut Mlp) -> Vec<&'a mut Tensor> {
    let mut v = vec![&mut encoder.w];
    for l in &mut trunk.layers {
        v.push(&mut l.w);
        v.push(&mut l.b);
    }
    v
}

fn apply_step(params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("gradient list", params.len(), grads.len()));
    }
    for (p, g) in params.into_iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim("gradient tensor", p.data.len(), g.data.len()));
        }
        for (w, dw) in p.data.iter_mut().zip(&g.data) {
            *w -= lr * dw;
        }
    }
    Ok(())
}

/// Batched ICBF inputs: own states, stacked observations, controls.
#[derive(Clone, Debug)]
pub struct IcbfBatch {
    pub x: Tensor,
    pub obs: Tensor,
    pub segments: Segments,
    pub u: Tensor,
}

/// Certificate `h(x, u)`: trunk over `x ⊕ ρ(ȳ) ⊕ u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcbfNet {
    pub shape: NetShape,
    pub encoder: EncoderNet,
    pub trunk: Mlp,
}

impl IcbfNet {
    pub fn new<R: Rng>(shape: NetShape, rng: &mut R) -> Self {
        let encoder = EncoderNet::new(shape.n, shape.p, rng);
        let trunk = Mlp::new(&shape.trunk_sizes(shape.n + shape.p + shape.m, 1), 1.0, rng);
        Self { shape, encoder, trunk }
    }

    fn check(&self, x: &[f64], obs: &Observation, u: &[f64]) -> Result<()> {
        if x.len() != self.shape.n {
            return Err(Error::dim("icbf state input", self.shape.n, x.len()));
        }
        if u.len() != self.shape.m {
            return Err(Error::dim("icbf control input", self.shape.m, u.len()));
        }
        if obs.n != self.shape.n {
            return Err(Error::dim("observation rows", self.shape.n, obs.n));
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64], obs: &Observation, u: &[f64]) -> Result<f64> {
        self.check(x, obs, u)?;
        let pooled = encode(&self.encoder, obs)?;
        let mut input = Vec::with_capacity(self.trunk.input_dim());
        input.extend_from_slice(x);
        input.extend_from_slice(&pooled);
        input.extend_from_slice(u);
        Ok(self.trunk.forward(&input)[0])
    }

    pub fn params(&self) -> Vec<&Tensor> {
        params_of(&self.encoder, &self.trunk)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        params_of_mut(&mut self.encoder, &mut self.trunk)
    }

    pub fn register(&self, tape: &mut Tape) -> NetVars {
        register(tape, &self.encoder, &self.trunk)
    }

    /// `h` per row (`B × 1`) and, given tangents for `(x, ȳ, u)`, the
    /// directional derivative `∇h · δ` per row.
    pub fn build(
        &self,
        tape: &mut Tape,
        vars: &NetVars,
        x: Var,
        obs: Var,
        segments: &[usize],
        u: Var,
        tangent: Option<(Var, Var, Var)>,
    ) -> (Var, Option<Var>) {
        let (pooled, pooled_t) = build_encoder(tape, vars.encoder, obs, segments, tangent.map(|t| t.1));
        let input = tape.concat_cols(&[x, pooled, u]);
        let input_t = tangent.map(|(xt, _, ut)| {
            let pt = pooled_t.expect("tangent through encoder");
            tape.concat_cols(&[xt, pt, ut])
        });
        build_mlp(tape, &vars.layers, input, input_t)
    }

    /// Single-sample trace with `x` and `u` as leaves; observation columns
    /// follow `x` (neighbors held fixed).
    pub fn trace(&self, x: &[f64], obs: &Observation, u: &[f64]) -> Result<IcbfTrace> {
        self.check(x, obs, u)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.leaf(Tensor::row_vector(x));
        let uv = tape.leaf(Tensor::row_vector(u));
        let k = obs.len();
        let absolute: Vec<f64> = (0..k)
            .flat_map(|j| obs.column(j).iter().zip(x).map(|(r, xi)| r + xi).collect::<Vec<_>>())
            .collect();
        let abs_v = tape.leaf(Tensor::from_vec(k, self.shape.n, absolute)?);
        let own = tape.gather_rows(xv, &vec![0; k]);
        let obs_v = tape.sub(abs_v, own);
        let (h, _) = self.build(&mut tape, &vars, xv, obs_v, &[0, k], uv, None);
        let out = tape.sum(h);
        Ok(IcbfTrace {
            tape,
            vars,
            output: out,
            x: xv,
            u: uv,
        })
    }

    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        apply_step(self.params_mut(), grads, lr)
    }
}

/// Recorded single-sample evaluation of an [`IcbfNet`].
pub struct IcbfTrace {
    pub tape: Tape,
    pub vars: NetVars,
    pub output: Var,
    x: Var,
    u: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    X,
    U,
}

impl IcbfTrace {
    pub fn value(&self) -> f64 {
        self.tape.scalar(self.output)
    }

    pub fn grad_params(&self) -> Result<Vec<Tensor>> {
        let g = self.tape.backward(self.output)?;
        Ok(self.vars.gradients(&self.tape, &g))
    }

    /// `∇ₓh` (total, through the relative observation) or `∇ᵤh`.
    pub fn grad_inputs(&self, wrt: Wrt) -> Result<Vec<f64>> {
        let g = self.tape.backward(self.output)?;
        let leaf = match wrt {
            Wrt::X => self.x,
            Wrt::U => self.u,
        };
        Ok(g.wrt(&self.tape, leaf).data)
    }
}

/// Batched policy inputs.
#[derive(Clone, Debug)]
pub struct PolicyBatch {
    pub x: Tensor,
    pub obs: Tensor,
    pub segments: Segments,
    /// `goal − position`, `B × d`.
    pub goal_rel: Tensor,
    /// Nominal control `k(x)`, `B × m`.
    pub nominal: Tensor,
}

/// Residual controller `π = u_max ⊙ tanh((k(x) + NN(x, ρ(ȳ), goal − p)) ⊘ u_max)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub shape: NetShape,
    pub encoder: EncoderNet,
    pub trunk: Mlp,
    pub u_max: Vec<f64>,
}

impl PolicyNet {
    pub fn new<R: Rng>(shape: NetShape, u_max: Vec<f64>, rng: &mut R) -> Self {
        let encoder = EncoderNet::new(shape.n, shape.p, rng);
        let trunk = Mlp::new(&shape.trunk_sizes(shape.n + shape.p + shape.d, shape.m), 0.1, rng);
        Self {
            shape,
            encoder,
            trunk,
            u_max,
        }
    }

    /// Raw residual `NN(·)` before the nominal and the squashing.
    pub fn residual(&self, x: &[f64], obs: &Observation, goal_rel: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.shape.n {
            return Err(Error::dim("policy state input", self.shape.n, x.len()));
        }
        if goal_rel.len() != self.shape.d {
            return Err(Error::dim("policy goal input", self.shape.d, goal_rel.len()));
        }
        let pooled = encode(&self.encoder, obs)?;
        let mut input = Vec::with_capacity(self.trunk.input_dim());
        input.extend_from_slice(x);
        input.extend_from_slice(&pooled);
        input.extend_from_slice(goal_rel);
        Ok(self.trunk.forward(&input))
    }

    pub fn act(&self, x: &[f64], obs: &Observation, goal_rel: &[f64], nominal: &[f64]) -> Result<Vec<f64>> {
        if nominal.len() != self.shape.m {
            return Err(Error::dim("nominal control", self.shape.m, nominal.len()));
        }
        let nn = self.residual(x, obs, goal_rel)?;
        Ok(nn
            .iter()
            .zip(nominal)
            .zip(&self.u_max)
            .map(|((r, k), um)| um * ((k + r) / um).tanh())
            .collect())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        params_of(&self.encoder, &self.trunk)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        params_of_mut(&mut self.encoder, &mut self.trunk)
    }

    pub fn register(&self, tape: &mut Tape) -> NetVars {
        register(tape, &self.encoder, &self.trunk)
    }

    /// `π` per row (`B × m`).
    pub fn build(
        &self,
        tape: &mut Tape,
        vars: &NetVars,
        x: Var,
        obs: Var,
        segments: &[usize],
        goal_rel: Var,
        nominal: Var,
    ) -> Var {
        let (pooled, _) = build_encoder(tape, vars.encoder, obs, segments, None);
        let input = tape.concat_cols(&[x, pooled, goal_rel]);
        let (nn, _) = build_mlp(tape, &vars.layers, input, None);
        let pre = tape.add(nn, nominal);
        let inv: Vec<f64> = self.u_max.iter().map(|u| 1.0 / u).collect();
        let scaled = tape.mul_row(pre, &inv);
        let squashed = tape.tanh(scaled);
        tape.mul_row(squashed, &self.u_max)
    }

    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        apply_step(self.params_mut(), grads, lr)
    }
}
