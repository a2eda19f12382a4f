//! Online joint training of the certificate and the policy.
//!
//! The loss has three hinge terms over a batch:
//! - condition: `(γ − ḣ − λh)₊` at `u = π(x)`, where `ḣ` is the derivative
//!   of `h` along `(ẋ, u̇) = (f(x, π), φ(x, π) + π)` with neighbors held fixed;
//! - safe: `(γ − h)₊` on safe pairs;
//! - unsafe: `(γ + h)₊` on unsafe pairs.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{IcbfNet, NetShape, Observation, PolicyNet, Tape, Tensor};
use crate::dynamics::{AgentState, ControlInput, DynamicsModel, NominalController, PdGains};
use crate::environment::{SpatialIndex, World};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Safe,
    Unsafe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub x: AgentState,
    pub u: ControlInput,
    pub obs: Observation,
    /// Goal the nominal controller was tracking.
    pub goal: Vec<f64>,
    pub label: Label,
}

/// Distance from the agent to the closest observed neighbor or obstacle point.
pub fn observed_clearance(model: &DynamicsModel, obs: &Observation) -> f64 {
    (0..obs.len())
        .map(|k| linalg::norm(model.position(obs.column(k))))
        .fold(f64::INFINITY, f64::min)
}

/// Safe when clear of everything by `2r` and inside the input set; unsafe
/// when either fails. Clearances in `[2r, 2r(1 + band)]` get no label.
pub fn label_for(model: &DynamicsModel, obs: &Observation, u: &[f64], r: f64, band: f64) -> Option<Label> {
    let clearance = observed_clearance(model, obs);
    if clearance < 2.0 * r || !model.input_admissible(u, 0.0) {
        Some(Label::Unsafe)
    } else if clearance < 2.0 * r * (1.0 + band) {
        None
    } else {
        Some(Label::Safe)
    }
}

/// Fixed-capacity FIFO; pushing onto a full buffer drops the oldest entry.
#[derive(Clone, Debug)]
pub struct RingBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
}

impl<T> RingBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }
}

/// Safe and unsafe pairs kept apart so batches can draw from both.
#[derive(Clone, Debug)]
pub struct SampleBuffer {
    pub safe: RingBuffer<SamplePair>,
    pub unsafe_: RingBuffer<SamplePair>,
}

impl SampleBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            safe: RingBuffer::new(capacity),
            unsafe_: RingBuffer::new(capacity),
        }
    }

    pub fn push(&mut self, s: SamplePair) {
        match s.label {
            Label::Safe => self.safe.push(s),
            Label::Unsafe => self.unsafe_.push(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub total_steps: usize,
    /// Capacity of each labeled ring buffer.
    pub buffer_size: usize,
    /// Pairs per batch (`N_h`).
    pub batch_size: usize,
    /// Safe pairs per batch (`N_s`); the rest are unsafe.
    pub safe_batch: usize,
    /// `α(h) = λh`.
    pub lambda: f64,
    /// Hinge margin `γ`.
    pub margin: f64,
    /// Weight of `Σ‖π(x) − sat(k(x))‖²`, which keeps the policy tracking the goal.
    pub action_weight: f64,
    /// Label dead band as a fraction of `2r`.
    pub label_band: f64,
    /// Simulation steps collected before each gradient step.
    pub collect_steps: usize,
    /// Out-of-set controls injected per collected state.
    pub injected_inputs: usize,
    /// Simulation steps before starts and goals are resampled.
    pub episode_steps: usize,
    /// Minimum start spacing for resampled episodes, metres.
    pub start_spacing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            total_steps: 70_000,
            buffer_size: 4096,
            batch_size: 64,
            safe_batch: 32,
            lambda: 1.0,
            margin: 0.05,
            action_weight: 0.1,
            label_band: 0.1,
            collect_steps: 1,
            injected_inputs: 1,
            episode_steps: 300,
            start_spacing: 0.35,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("train.learning_rate must be finite and >= 0");
        }
        if !(0 < self.safe_batch && self.safe_batch < self.batch_size) {
            return bad("train requires 0 < safe_batch < batch_size");
        }
        if self.buffer_size == 0 || self.episode_steps == 0 {
            return bad("train.buffer_size and train.episode_steps must be >= 1");
        }
        if !(self.lambda > 0.0) || self.margin < 0.0 || self.label_band < 0.0 || !(self.action_weight >= 0.0) {
            return bad("train.lambda must be > 0; margin, action_weight and label_band >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub icbf_condition_term: f64,
    pub safe_barrier_term: f64,
    pub unsafe_barrier_term: f64,
    /// Weighted action-tracking term; not one of the three hinge terms.
    pub action_term: f64,
}

impl LossBreakdown {
    /// Sum of the three hinge terms.
    pub fn total(&self) -> f64 {
        self.icbf_condition_term + self.safe_barrier_term + self.unsafe_barrier_term
    }

    /// The minimized objective: hinge terms plus the action term.
    pub fn objective(&self) -> f64 {
        self.total() + self.action_term
    }
}

pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub icbf_grads: Vec<Tensor>,
    pub policy_grads: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams<'a> {
    pub model: &'a DynamicsModel,
    pub gains: &'a PdGains,
    pub lambda: f64,
    pub margin: f64,
    pub action_weight: f64,
}

struct Stacked {
    x: Tensor,
    obs: Tensor,
    segments: Vec<usize>,
    owner: Vec<usize>,
    u: Tensor,
}

fn stack(samples: &[&SamplePair], n: usize, m: usize) -> Result<Stacked> {
    let mut x = Vec::with_capacity(samples.len() * n);
    let mut u = Vec::with_capacity(samples.len() * m);
    let mut obs = Vec::new();
    let mut segments = vec![0];
    let mut owner = Vec::new();
    for (b, s) in samples.iter().enumerate() {
        x.extend_from_slice(&s.x);
        u.extend_from_slice(&s.u);
        obs.extend_from_slice(&s.obs.data);
        owner.extend(std::iter::repeat(b).take(s.obs.len()));
        segments.push(owner.len());
    }
    Ok(Stacked {
        x: Tensor::from_vec(samples.len(), n, x)?,
        obs: Tensor::from_vec(owner.len(), n, obs)?,
        segments,
        owner,
        u: Tensor::from_vec(samples.len(), m, u)?,
    })
}

/// Evaluates the three hinge terms, the action term and the parameter gradients.
pub fn loss(batch: &[SamplePair], icbf: &IcbfNet, policy: &PolicyNet, lp: LossParams) -> Result<LossOutput> {
    let safe: Vec<&SamplePair> = batch.iter().filter(|s| s.label == Label::Safe).collect();
    let unsafe_: Vec<&SamplePair> = batch.iter().filter(|s| s.label == Label::Unsafe).collect();
    if safe.is_empty() || unsafe_.is_empty() {
        return Err(Error::TrainingProtocol(format!(
            "batch needs both classes, got {} safe and {} unsafe",
            safe.len(),
            unsafe_.len()
        )));
    }
    let model = lp.model;
    let (n, m, d) = (model.state_dim(), model.control_dim(), model.pos_dim());
    let all: Vec<&SamplePair> = batch.iter().collect();
    let nominal = NominalController::new(model, lp.gains);

    let mut tape = Tape::new();
    let iv = icbf.register(&mut tape);
    let pv = policy.register(&mut tape);

    // condition term at u = π(x)
    let st = stack(&all, n, m)?;
    let bsz = all.len();
    let mut goal_rel = Vec::with_capacity(bsz * d);
    let mut k0 = Vec::with_capacity(bsz * m);
    let mut k_sat = Vec::with_capacity(bsz * m);
    let mut drift = Vec::with_capacity(bsz * n);
    let mut phi_c = Vec::with_capacity(bsz * m);
    let mut bmats = Vec::with_capacity(bsz);
    let mut dmats = Vec::with_capacity(bsz);
    for s in &all {
        goal_rel.extend(linalg::sub(&s.goal, model.position(&s.x)));
        let k = nominal.control(&s.x, &s.goal);
        k_sat.extend(k.iter().zip(&model.u_max).map(|(k, um)| um * (k / um).tanh()));
        k0.extend_from_slice(&k);
        drift.extend(model.drift(&s.x));
        let (c, dm) = nominal.phi_affine(&s.x, &s.goal);
        phi_c.extend(c);
        let mut dpi = dm;
        for i in 0..m {
            dpi[(i, i)] += 1.0;
        }
        bmats.push(mat_tensor(&model.input_matrix(&s.x)));
        dmats.push(mat_tensor(&dpi));
    }
    let xv = tape.leaf(st.x);
    let ov = tape.leaf(st.obs);
    let gv = tape.leaf(Tensor::from_vec(bsz, d, goal_rel)?);
    let kv = tape.leaf(Tensor::from_vec(bsz, m, k0)?);
    let pi = policy.build(&mut tape, &pv, xv, ov, &st.segments, gv, kv);
    let xdot = tape.row_affine(pi, &Tensor::from_vec(bsz, n, drift)?, bmats);
    let udot = tape.row_affine(pi, &Tensor::from_vec(bsz, m, phi_c)?, dmats);
    let own = tape.gather_rows(xdot, &st.owner);
    let odot = tape.scale(own, -1.0);
    let (h, hdot) = icbf.build(&mut tape, &iv, xv, ov, &st.segments, pi, Some((xdot, odot, udot)));
    let hdot = hdot.expect("tangent requested");
    let lh = tape.scale(h, lp.lambda);
    let cond = tape.add(hdot, lh);
    let neg = tape.scale(cond, -1.0);
    let shifted = shift(&mut tape, neg, lp.margin);
    let hinge = tape.relu(shifted);
    let term1 = tape.sum(hinge);
    let ks = tape.leaf(Tensor::from_vec(bsz, m, k_sat)?);
    let dev = tape.sub(pi, ks);
    let sq = tape.mul(dev, dev);
    let sq_sum = tape.sum(sq);
    let term4 = tape.scale(sq_sum, lp.action_weight);

    let class_term = |tape: &mut Tape, samples: &[&SamplePair], sign: f64| -> Result<_> {
        let st = stack(samples, n, m)?;
        let xv = tape.leaf(st.x);
        let ov = tape.leaf(st.obs);
        let uv = tape.leaf(st.u);
        let (h, _) = icbf.build(tape, &iv, xv, ov, &st.segments, uv, None);
        // safe: γ − h, unsafe: γ + h
        let sh = tape.scale(h, sign);
        let shifted = shift(tape, sh, lp.margin);
        let r = tape.relu(shifted);
        Ok(tape.sum(r))
    };
    let term2 = class_term(&mut tape, &safe, -1.0)?;
    let term3 = class_term(&mut tape, &unsafe_, 1.0)?;
    let t12 = tape.add(term1, term2);
    let t123 = tape.add(t12, term3);
    let total = tape.add(t123, term4);
    let grads = tape.backward(total)?;
    Ok(LossOutput {
        breakdown: LossBreakdown {
            icbf_condition_term: tape.scalar(term1),
            safe_barrier_term: tape.scalar(term2),
            unsafe_barrier_term: tape.scalar(term3),
            action_term: tape.scalar(term4),
        },
        icbf_grads: iv.gradients(&tape, &grads),
        policy_grads: pv.gradients(&tape, &grads),
    })
}

fn shift(tape: &mut Tape, a: crate::diffnet::Var, c: f64) -> crate::diffnet::Var {
    let rows = tape.value(a).rows;
    let off = tape.leaf(Tensor::full(rows, 1, c));
    tape.add(a, off)
}

fn mat_tensor(m: &Mat) -> Tensor {
    Tensor::from_vec(m.rows, m.cols, m.data.clone()).expect("matrix shape")
}

/// Observation of agent `i` from the current index.
pub fn observe(world: &World, index: &SpatialIndex, i: usize) -> Result<Observation> {
    let nb = index.neighbors(i, world)?;
    Ok(Observation::from_neighbors(&world.model, &world.states()[i], &nb))
}

/// Policy action for agent `i` tracking `goal`.
pub fn policy_action(
    world: &World,
    index: &SpatialIndex,
    policy: &PolicyNet,
    gains: &PdGains,
    i: usize,
    goal: &[f64],
) -> Result<(Observation, Vec<f64>)> {
    let obs = observe(world, index, i)?;
    let x = &world.states()[i];
    let k = NominalController::new(&world.model, gains).control(x, goal);
    let rel = linalg::sub(goal, world.model.position(x));
    let u = policy.act(x, &obs, &rel, &k)?;
    Ok((obs, u))
}

/// A control drawn uniformly by direction with `‖u ⊘ u_max‖ ∈ (1, 1.5]`.
pub fn sample_outside_input_set<R: Rng>(model: &DynamicsModel, rng: &mut R) -> Vec<f64> {
    let m = model.control_dim();
    let dir: Vec<f64> = loop {
        let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let len = linalg::norm(&v);
        if len > 1e-3 && len <= 1.0 {
            break v.iter().map(|c| c / len).collect();
        }
    };
    let scale = 1.0 + rng.gen_range(0.0..0.5) + 1e-9;
    dir.iter().zip(&model.u_max).map(|(c, b)| c * b * scale).collect()
}

/// Rolls the policy for `steps` synchronous steps, labels every agent's
/// pair and appends it to `buffer`; each state also yields `injected`
/// out-of-set controls labeled unsafe. Returns the number of pairs stored.
#[allow(clippy::too_many_arguments)]
pub fn collect<R: Rng>(
    world: &mut World,
    policy: &PolicyNet,
    gains: &PdGains,
    steps: usize,
    band: f64,
    injected: usize,
    buffer: &mut SampleBuffer,
    rng: &mut R,
) -> Result<usize> {
    let mut stored = 0;
    for _ in 0..steps {
        let index = world.build_index();
        let mut next = Vec::with_capacity(world.num_agents());
        for i in 0..world.num_agents() {
            let goal = world.goals()[i].clone();
            let (obs, u) = policy_action(world, &index, policy, gains, i, &goal)?;
            let x = world.states()[i].clone();
            if let Some(label) = label_for(&world.model, &obs, &u, world.r, band) {
                buffer.push(SamplePair {
                    x: x.clone(),
                    u: ControlInput(u.clone()),
                    obs: obs.clone(),
                    goal: goal.clone(),
                    label,
                });
                stored += 1;
            }
            for _ in 0..injected {
                buffer.push(SamplePair {
                    x: x.clone(),
                    u: ControlInput(sample_outside_input_set(&world.model, rng)),
                    obs: obs.clone(),
                    goal: goal.clone(),
                    label: Label::Unsafe,
                });
                stored += 1;
            }
            next.push(world.model.step(&x, &ControlInput(u))?);
        }
        world.set_states(next)?;
    }
    Ok(stored)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
}

pub struct TrainOutput {
    pub icbf: IcbfNet,
    pub policy: PolicyNet,
    pub curve: Vec<LossRecord>,
}

fn draw<'a, R: Rng>(ring: &'a RingBuffer<SamplePair>, k: usize, rng: &mut R) -> Vec<&'a SamplePair> {
    (0..k).map(|_| ring.get(rng.gen_range(0..ring.len())).expect("index in range")).collect()
}

fn reset_episode<R: Rng>(template: &World, agents: usize, spacing: f64, rng: &mut R) -> Result<World> {
    let mut w = World::new(template.model.clone(), template.r, template.sensing_radius)?;
    w.extent = template.extent.clone();
    w.obstacles = template.obstacles.clone();
    let clearance = 2.0 * template.r;
    let goal_spacing = spacing.max(4.0 * template.r);
    let starts = w.sample_free_points(agents, spacing, clearance, template.r, rng)?;
    let goals = w.sample_free_points(agents, goal_spacing, clearance, template.r, rng)?;
    for (s, g) in starts.into_iter().zip(goals) {
        let state = w.model.rest_state(&s);
        w.add_agent(state, g)?;
    }
    Ok(w)
}

/// Trains from fresh networks. The template world fixes the obstacles,
/// model, radii and agent count; starts and goals are resampled every
/// `episode_steps`, beginning with the template's own placement.
pub fn train(cfg: &TrainConfig, template: &World, gains: &PdGains) -> Result<TrainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = NetShape::for_model(&template.model);
    let icbf = IcbfNet::new(shape, &mut rng);
    let policy = PolicyNet::new(shape, template.model.u_max.clone(), &mut rng);
    train_from(cfg, template, gains, icbf, policy, 0, &mut rng)
}

/// Continues training existing networks; `start_step` numbers the curve.
pub fn train_from(
    cfg: &TrainConfig,
    template: &World,
    gains: &PdGains,
    mut icbf: IcbfNet,
    mut policy: PolicyNet,
    start_step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let agents = template.num_agents();
    if agents == 0 {
        return Err(Error::Config("training world has no agents".into()));
    }
    let mut world = template.clone();
    let mut buffer = SampleBuffer::new(cfg.buffer_size);
    let mut curve = Vec::with_capacity(cfg.total_steps);
    let mut sim_steps = 0;
    let lp = LossParams {
        model: &template.model,
        gains,
        lambda: cfg.lambda,
        margin: cfg.margin,
        action_weight: cfg.action_weight,
    };
    for step in start_step..start_step + cfg.total_steps {
        if sim_steps >= cfg.episode_steps {
            world = reset_episode(template, agents, cfg.start_spacing, rng)?;
            sim_steps = 0;
        }
        collect(
            &mut world,
            &policy,
            gains,
            cfg.collect_steps,
            cfg.label_band,
            cfg.injected_inputs,
            &mut buffer,
            rng,
        )?;
        sim_steps += cfg.collect_steps;
        if buffer.safe.is_empty() || buffer.unsafe_.is_empty() {
            return Err(Error::TrainingProtocol(format!(
                "step {step}: buffers hold {} safe and {} unsafe pairs",
                buffer.safe.len(),
                buffer.unsafe_.len()
            )));
        }
        let mut batch: Vec<SamplePair> = draw(&buffer.safe, cfg.safe_batch, rng).into_iter().cloned().collect();
        batch.extend(draw(&buffer.unsafe_, cfg.batch_size - cfg.safe_batch, rng).into_iter().cloned());
        batch.shuffle(rng);
        let out = loss(&batch, &icbf, &policy, lp)?;
        let b = out.breakdown;
        if !b.objective().is_finite() {
            return Err(Error::Divergence {
                step,
                diagnostic: format!(
                    "loss terms {} / {} / {}",
                    b.icbf_condition_term, b.safe_barrier_term, b.unsafe_barrier_term
                ),
            });
        }
        if cfg.learning_rate > 0.0 {
            icbf.sgd_step(&out.icbf_grads, cfg.learning_rate)?;
            policy.sgd_step(&out.policy_grads, cfg.learning_rate)?;
        }
        if icbf.params().iter().chain(policy.params().iter()).any(|t| !t.is_finite()) {
            return Err(Error::Divergence {
                step,
                diagnostic: "non-finite parameters after the update".into(),
            });
        }
        curve.push(LossRecord {
            step,
            term1: b.icbf_condition_term,
            term2: b.safe_barrier_term,
            term3: b.unsafe_barrier_term,
        });
    }
    Ok(TrainOutput { icbf, policy, curve })
}

pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,term1,term2,term3\n");
    for r in curve {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.term1, r.term2, r.term3));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Appends rows to an existing curve file, creating it with a header if absent.
pub fn append_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    if !path.exists() {
        return write_loss_csv(path, curve);
    }
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in curve {
        writeln!(f, "{},{},{},{}", r.step, r.term1, r.term2, r.term3).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ModelKind;

    fn di(u_max: f64) -> DynamicsModel {
        DynamicsModel::new(ModelKind::DoubleIntegrator2D, 0.05, vec![u_max, u_max]).unwrap()
    }

    fn tiny_shape() -> NetShape {
        NetShape {
            n: 4,
            m: 2,
            d: 2,
            p: 3,
            hidden: 5,
            depth: 2,
        }
    }

    fn pair(x: Vec<f64>, u: Vec<f64>, obs: Vec<Vec<f64>>, label: Label) -> SamplePair {
        SamplePair {
            x: AgentState(x),
            u: ControlInput(u),
            obs: Observation::from_rows(4, &obs).unwrap(),
            goal: vec![3.0, 2.0],
            label,
        }
    }

    fn zero_net(t: &mut [&mut Tensor]) {
        for p in t.iter_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn hand_built_velocity_certificate() {
        // h(x, u) = v_x, π ≈ (−1, 0), φ = 0.
        let shape = NetShape {
            n: 4,
            m: 2,
            d: 2,
            p: 2,
            hidden: 2,
            depth: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut icbf = IcbfNet::new(shape, &mut rng);
        zero_net(&mut icbf.params_mut());
        icbf.trunk.layers[0].w.data[2] = 1.0;
        icbf.trunk.layers[0].b.data[0] = 10.0;
        icbf.trunk.layers[1].w.data[0] = 1.0;
        icbf.trunk.layers[1].b.data[0] = -10.0;
        let mut policy = PolicyNet::new(shape, vec![1e6, 1e6], &mut rng);
        zero_net(&mut policy.params_mut());
        policy.trunk.layers[1].b.data[0] = -1.0;
        let model = di(1e6);
        let gains = PdGains {
            kp: 0.0,
            kd: 0.0,
            max_goal_error: None,
        };
        let batch = vec![
            pair(vec![0.0, 0.0, 0.5, 0.0], vec![0.0, 0.0], vec![], Label::Safe),
            pair(vec![5.0, 5.0, 2.0, 0.0], vec![0.0, 0.0], vec![], Label::Unsafe),
        ];
        let lp = LossParams {
            model: &model,
            gains: &gains,
            lambda: 1.0,
            margin: 0.0,
            action_weight: 0.0,
        };
        let out = loss(&batch, &icbf, &policy, lp).unwrap();
        let b = out.breakdown;
        assert!((b.icbf_condition_term - 0.5).abs() < 1e-9, "{b:?}");
        assert_eq!(b.safe_barrier_term, 0.0);
        assert!((b.unsafe_barrier_term - 2.0).abs() < 1e-12);
        assert!((b.total() - 2.5).abs() < 1e-9);
    }

    fn random_batch(rng: &mut ChaCha8Rng) -> Vec<SamplePair> {
        let mut v = Vec::new();
        for b in 0..6 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let k = rng.gen_range(0..3);
            let obs: Vec<Vec<f64>> = (0..k).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let label = if b % 2 == 0 { Label::Safe } else { Label::Unsafe };
            v.push(pair(x, u, obs, label));
        }
        v
    }

    fn total_loss(batch: &[SamplePair], icbf: &IcbfNet, policy: &PolicyNet, lp: LossParams) -> f64 {
        loss(batch, icbf, policy, lp).unwrap().breakdown.objective()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let model = di(1.0);
        let gains = PdGains::default();
        let lp = LossParams {
            model: &model,
            gains: &gains,
            lambda: 1.0,
            margin: 0.5,
            action_weight: 0.3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(&mut rng);
        let icbf = IcbfNet::new(tiny_shape(), &mut rng);
        let policy = PolicyNet::new(tiny_shape(), vec![1.0, 1.0], &mut rng);
        let out = loss(&batch, &icbf, &policy, lp).unwrap();
        let eps = 1e-6;
        let mut checked = 0;
        for (t, g) in out.icbf_grads.iter().enumerate() {
            for k in (0..g.data.len()).step_by(3) {
                let mut a = icbf.clone();
                let mut b = icbf.clone();
                a.params_mut()[t].data[k] += eps;
                b.params_mut()[t].data[k] -= eps;
                let fd = (total_loss(&batch, &a, &policy, lp) - total_loss(&batch, &b, &policy, lp)) / (2.0 * eps);
                assert!((fd - g.data[k]).abs() <= 1e-3 * fd.abs().max(1e-3), "icbf t={t} k={k}: {fd} vs {}", g.data[k]);
                checked += 1;
            }
        }
        for (t, g) in out.policy_grads.iter().enumerate() {
            for k in (0..g.data.len()).step_by(3) {
                let mut a = policy.clone();
                let mut b = policy.clone();
                a.params_mut()[t].data[k] += eps;
                b.params_mut()[t].data[k] -= eps;
                let fd = (total_loss(&batch, &icbf, &a, lp) - total_loss(&batch, &icbf, &b, lp)) / (2.0 * eps);
                assert!((fd - g.data[k]).abs() <= 1e-3 * fd.abs().max(1e-3), "policy t={t} k={k}: {fd} vs {}", g.data[k]);
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn small_steps_do_not_increase_batch_loss() {
        let model = di(1.0);
        let gains = PdGains::default();
        let lp = LossParams {
            model: &model,
            gains: &gains,
            lambda: 1.0,
            margin: 0.3,
            action_weight: 0.3,
        };
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let batch = random_batch(&mut rng);
            let mut icbf = IcbfNet::new(tiny_shape(), &mut rng);
            let mut policy = PolicyNet::new(tiny_shape(), vec![1.0, 1.0], &mut rng);
            let out = loss(&batch, &icbf, &policy, lp).unwrap();
            let before = out.breakdown.objective();
            assert!(out.breakdown.icbf_condition_term >= 0.0);
            assert!(out.breakdown.safe_barrier_term >= 0.0);
            assert!(out.breakdown.unsafe_barrier_term >= 0.0);
            icbf.sgd_step(&out.icbf_grads, 1e-6).unwrap();
            policy.sgd_step(&out.policy_grads, 1e-6).unwrap();
            let after = total_loss(&batch, &icbf, &policy, lp);
            assert!(after <= before + 1e-12, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn single_class_batch_is_rejected() {
        let model = di(1.0);
        let gains = PdGains::default();
        let lp = LossParams {
            model: &model,
            gains: &gains,
            lambda: 1.0,
            margin: 0.0,
            action_weight: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let icbf = IcbfNet::new(tiny_shape(), &mut rng);
        let policy = PolicyNet::new(tiny_shape(), vec![1.0, 1.0], &mut rng);
        let batch = vec![pair(vec![0.0; 4], vec![0.0; 2], vec![], Label::Safe)];
        assert!(matches!(loss(&batch, &icbf, &policy, lp), Err(Error::TrainingProtocol(_))));
    }

    #[test]
    fn ring_buffer_keeps_the_newest() {
        let mut r = RingBuffer::new(8);
        for i in 0..18 {
            r.push(i);
        }
        assert_eq!(r.len(), 8);
        assert_eq!(r.iter().copied().collect::<Vec<_>>(), (10..18).collect::<Vec<_>>());
    }

    #[test]
    fn labels_follow_clearance_and_input_set() {
        let m = di(1.0);
        let far = Observation::from_rows(4, &[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let near = Observation::from_rows(4, &[vec![0.2, 0.0, 0.0, 0.0]]).unwrap();
        let band = Observation::from_rows(4, &[vec![0.31, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(label_for(&m, &far, &[0.1, 0.1], 0.15, 0.1), Some(Label::Safe));
        assert_eq!(label_for(&m, &near, &[0.1, 0.1], 0.15, 0.1), Some(Label::Unsafe));
        assert_eq!(label_for(&m, &far, &[0.9, 0.9], 0.15, 0.1), Some(Label::Unsafe));
        assert_eq!(label_for(&m, &band, &[0.0, 0.0], 0.15, 0.1), None);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let u = sample_outside_input_set(&m, &mut rng);
            assert!(!m.input_admissible(&u, 0.0));
        }
    }

    fn zero_policy(model: &DynamicsModel) -> PolicyNet {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = PolicyNet::new(NetShape::for_model(model), model.u_max.clone(), &mut rng);
        zero_net(&mut p.params_mut());
        p
    }

    #[test]
    fn collection_labels_frozen_and_overlapping_agents() {
        let model = di(1.0);
        let still = PdGains {
            kp: 0.0,
            kd: 0.0,
            max_goal_error: None,
        };
        let policy = zero_policy(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let mut w = World::new(model.clone(), 0.15, 1.0).unwrap();
        w.add_agent(model.rest_state(&[1.0, 1.0]), vec![1.0, 1.0]).unwrap();
        w.add_agent(model.rest_state(&[1.8, 1.0]), vec![1.8, 1.0]).unwrap();
        let mut buf = SampleBuffer::new(64);
        collect(&mut w, &policy, &still, 3, 0.1, 0, &mut buf, &mut rng).unwrap();
        assert_eq!((buf.safe.len(), buf.unsafe_.len()), (6, 0));

        let mut w = World::new(model.clone(), 0.15, 1.0).unwrap();
        w.add_agent(model.rest_state(&[1.0, 1.0]), vec![1.0, 1.0]).unwrap();
        w.add_agent(model.rest_state(&[1.1, 1.0]), vec![5.0, 1.0]).unwrap();
        let mut buf = SampleBuffer::new(64);
        collect(&mut w, &policy, &still, 1, 0.1, 0, &mut buf, &mut rng).unwrap();
        assert_eq!((buf.safe.len(), buf.unsafe_.len()), (0, 2));
    }

    fn small_train_world() -> World {
        let model = di(1.0);
        let mut w = World::new(model.clone(), 0.15, 1.0).unwrap();
        w.extent = vec![3.0, 3.0];
        w.add_agent(model.rest_state(&[0.5, 0.5]), vec![2.5, 2.5]).unwrap();
        w.add_agent(model.rest_state(&[2.5, 2.5]), vec![0.5, 0.5]).unwrap();
        w
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            total_steps: 30,
            batch_size: 8,
            safe_batch: 4,
            episode_steps: 10,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let w = small_train_world();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick_cfg()
        };
        let out = train(&cfg, &w, &PdGains::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let shape = NetShape::for_model(&w.model);
        assert_eq!(out.icbf, IcbfNet::new(shape, &mut rng));
        assert_eq!(out.policy, PolicyNet::new(shape, w.model.u_max.clone(), &mut rng));
        assert_eq!(out.curve.len(), 30);
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let w = small_train_world();
        let a = train(&quick_cfg(), &w, &PdGains::default()).unwrap();
        let b = train(&quick_cfg(), &w, &PdGains::default()).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.icbf, b.icbf);
    }
}
