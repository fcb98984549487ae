//! Reinforced conservative controller.
//!
//! One recurrent encoder per action class reads the best architecture with
//! that class removed and proposes replacement values for it. The guider
//! picks which classes to rewrite, weighting each by the encoder's decision
//! entropy. Only the chosen encoders receive a policy-gradient step, and the
//! best architecture is replaced only on strict improvement.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::space::{subarchitecture, ActionClass, Architecture, Token, VOCAB_SIZE};
use crate::tensor::{adam_step, uniform_init, Activation, AdamConfig, AdamState, Tape, Tensor, Var};

/// Floor added to every entropy before guided sampling.
pub const GUIDE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub lr: f64,
    pub temperature: f64,
    pub tanh_const: f64,
    pub baseline_decay: f64,
    pub entropy_weight: f64,
    pub init_range: f64,
    /// Number of classes rewritten per proposal.
    pub s: usize,
    pub restart_slots: usize,
    pub n_layers: usize,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            lr: 3.5e-4,
            temperature: 5.0,
            tanh_const: 2.5,
            baseline_decay: 0.95,
            entropy_weight: 1e-4,
            init_range: 0.1,
            s: 1,
            restart_slots: 1,
            n_layers: 2,
            seed: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.s) {
            return Err(Error::InvalidArgument(format!("s = {} outside 1..=6", self.s)));
        }
        if self.restart_slots == 0 || self.n_layers == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument(String::from(
                "restart slots, layer count and hidden size must be positive",
            )));
        }
        if !(self.temperature > 0.0) || !(self.tanh_const > 0.0) {
            return Err(Error::InvalidArgument(String::from("temperature and tanh constant must be positive")));
        }
        Ok(())
    }
}

const ENC_EMBED: usize = 0;
const ENC_W_IH: usize = 1;
const ENC_W_HH: usize = 2;
const ENC_BIAS: usize = 3;
const ENC_PROJ_W: usize = 4;
const ENC_PROJ_B: usize = 5;
const ENC_TENSORS: [&str; 6] = ["embed", "w_ih", "w_hh", "bias", "proj_w", "proj_b"];

/// Result of running an encoder over one subarchitecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    /// Sampling distribution of each decoding step.
    pub distributions: Vec<Vec<f64>>,
}

/// Inputs and activations of one LSTM step, kept for the backward pass.
struct CellCache {
    token: usize,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Gate activations `[i, f, g, o]`.
    act: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
    c: Vec<f64>,
}

/// Embedding table, one-layer LSTM and output projection for one class.
///
/// LSTM gates are packed as `[input, forget, cell, output]` along the
/// columns of `w_ih`/`w_hh`/`bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEncoder {
    class: ActionClass,
    hidden: usize,
    params: Vec<Tensor>,
    adam: Vec<AdamState>,
    pub baseline: f64,
}

impl ClassEncoder {
    pub fn new(class: ActionClass, hidden: usize, init_range: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = class.cardinality();
        let mut params = vec![
            uniform_init(&[VOCAB_SIZE, hidden], init_range, &mut rng),
            uniform_init(&[hidden, 4 * hidden], init_range, &mut rng),
            uniform_init(&[hidden, 4 * hidden], init_range, &mut rng),
            Tensor::zeros(&[4 * hidden]),
            uniform_init(&[hidden, m], init_range, &mut rng),
            Tensor::zeros(&[m]),
        ];
        for v in &mut params[ENC_BIAS].data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        let adam = params.iter().map(|p| AdamState::new(p.len())).collect();
        Ok(Self {
            class,
            hidden,
            params,
            adam,
            baseline: 0.0,
        })
    }

    pub fn class(&self) -> ActionClass {
        self.class
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn check_tokens(&self, sub: &[Token]) -> Result<()> {
        for (i, t) in sub.iter().enumerate() {
            if t.id() >= VOCAB_SIZE {
                return Err(Error::UnknownToken {
                    position: i,
                    class: "vocabulary",
                    token: t.id().to_string(),
                });
            }
        }
        Ok(())
    }

    fn transform_logits(raw: &[f64], cfg: &ControllerConfig) -> Vec<f64> {
        raw.iter().map(|l| cfg.tanh_const * math::tanh(l / cfg.temperature)).collect()
    }

    fn softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| math::exp(l - max)).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    fn lstm_step(&self, token: usize, h: &mut [f64], c: &mut [f64]) {
        let cell = self.cell_forward(token, h, c);
        h.copy_from_slice(&cell.h);
        c.copy_from_slice(&cell.c);
    }

    fn cell_forward(&self, token: usize, h: &[f64], c: &[f64]) -> CellCache {
        let d = self.hidden;
        let emb = &self.params[ENC_EMBED].data()[token * d..(token + 1) * d];
        let mut gates = self.params[ENC_BIAS].data().to_vec();
        for (src, w) in [(emb, &self.params[ENC_W_IH]), (h, &self.params[ENC_W_HH])] {
            let w = w.data();
            for (k, &x) in src.iter().enumerate() {
                if x != 0.0 {
                    for (g, wv) in gates.iter_mut().zip(&w[k * 4 * d..(k + 1) * 4 * d]) {
                        *g += x * wv;
                    }
                }
            }
        }
        let mut act = vec![0.0; 4 * d];
        let (mut c2, mut tc, mut h2) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        for j in 0..d {
            let i = math::sigmoid(gates[j]);
            let f = math::sigmoid(gates[d + j]);
            let g = math::tanh(gates[2 * d + j]);
            let o = math::sigmoid(gates[3 * d + j]);
            c2[j] = f * c[j] + i * g;
            tc[j] = math::tanh(c2[j]);
            h2[j] = o * tc[j];
            act[j] = i;
            act[d + j] = f;
            act[2 * d + j] = g;
            act[3 * d + j] = o;
        }
        CellCache {
            token,
            h_prev: h.to_vec(),
            c_prev: c.to_vec(),
            act,
            tanh_c: tc,
            h: h2,
            c: c2,
        }
    }

    fn project(&self, h: &[f64]) -> Vec<f64> {
        let m = self.class.cardinality();
        let w = self.params[ENC_PROJ_W].data();
        let mut out = self.params[ENC_PROJ_B].data().to_vec();
        for (k, &x) in h.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(&w[k * m..(k + 1) * m]) {
                *o += x * wv;
            }
        }
        out
    }

    /// Reads `sub` then decodes `n` actions, sampling each step from
    /// `softmax(tanh_const · tanh(logits / temperature))` unless `forced`
    /// supplies the actions. The chosen action's token is fed back as the
    /// next input.
    pub fn decide<R: Rng + ?Sized>(
        &self,
        sub: &[Token],
        n: usize,
        forced: Option<&[usize]>,
        cfg: &ControllerConfig,
        rng: &mut R,
    ) -> Result<Decision> {
        self.check_tokens(sub)?;
        if let Some(f) = forced {
            if f.len() != n || f.iter().any(|&a| a >= self.class.cardinality()) {
                return Err(Error::InvalidArgument(format!("forced actions {:?} invalid for {}", f, self.class)));
            }
        }
        let d = self.hidden;
        let (mut h, mut c) = (vec![0.0; d], vec![0.0; d]);
        for t in sub {
            self.lstm_step(t.id(), &mut h, &mut c);
        }
        let mut out = Decision {
            actions: Vec::with_capacity(n),
            log_probs: Vec::with_capacity(n),
            distributions: Vec::with_capacity(n),
        };
        for step in 0..n {
            let logits = Self::transform_logits(&self.project(&h), cfg);
            let probs = Self::softmax(&logits);
            let action = match forced {
                Some(f) => f[step],
                None => sample_index(&probs, rng),
            };
            out.log_probs.push(math::ln(probs[action]));
            out.actions.push(action);
            out.distributions.push(probs);
            if step + 1 < n {
                self.lstm_step(Token::new(self.class, action).id(), &mut h, &mut c);
            }
        }
        Ok(out)
    }

    /// Records the teacher-forced pass on a tape and returns the variables
    /// for each parameter and each step's log-probability.
    fn taped(&self, tape: &mut Tape, sub: &[Token], actions: &[usize], cfg: &ControllerConfig) -> Result<(Vec<Var>, Vec<Var>)> {
        self.check_tokens(sub)?;
        let d = self.hidden;
        let p: Vec<Var> = self.params.iter().map(|t| tape.param(t)).collect();
        let mut h = tape.constant(Tensor::zeros(&[1, d]));
        let mut c = tape.constant(Tensor::zeros(&[1, d]));
        let cell = |tape: &mut Tape, token: usize, h: Var, c: Var| -> Result<(Var, Var)> {
            let x = tape.gather_rows(p[ENC_EMBED], alloc::sync::Arc::from(vec![token]))?;
            let a = tape.matmul(x, p[ENC_W_IH])?;
            let b = tape.matmul(h, p[ENC_W_HH])?;
            let gates = tape.add(a, b)?;
            let gates = tape.add_row(gates, p[ENC_BIAS])?;
            let slice = |tape: &mut Tape, k: usize, act| -> Result<Var> {
                let s = tape.slice_cols(gates, k * d, (k + 1) * d)?;
                Ok(tape.activation(s, act))
            };
            let i = slice(tape, 0, Activation::Sigmoid)?;
            let f = slice(tape, 1, Activation::Sigmoid)?;
            let g = slice(tape, 2, Activation::Tanh)?;
            let o = slice(tape, 3, Activation::Sigmoid)?;
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, g)?;
            let c2 = tape.add(fc, ig)?;
            let tc = tape.activation(c2, Activation::Tanh);
            Ok((tape.mul(o, tc)?, c2))
        };
        for t in sub {
            (h, c) = cell(tape, t.id(), h, c)?;
        }
        let m = self.class.cardinality();
        let mut log_probs = Vec::with_capacity(actions.len());
        for (step, &a) in actions.iter().enumerate() {
            let raw = tape.matmul(h, p[ENC_PROJ_W])?;
            let raw = tape.add_row(raw, p[ENC_PROJ_B])?;
            let scaled = tape.scale(raw, 1.0 / cfg.temperature);
            let squashed = tape.activation(scaled, Activation::Tanh);
            let logits = tape.scale(squashed, cfg.tanh_const);
            let lsm = tape.log_softmax_rows(logits);
            if a >= m {
                return Err(Error::InvalidArgument(format!("action {} out of range for {}", a, self.class)));
            }
            log_probs.push(tape.pick(lsm, vec![a])?);
            if step + 1 < actions.len() {
                (h, c) = cell(tape, Token::new(self.class, a).id(), h, c)?;
            }
        }
        Ok((p, log_probs))
    }

    /// Tape-recorded counterpart of [`Self::objective_gradient`], kept as an
    /// independent reference.
    pub fn taped_objective_gradient(
        &self,
        sub: &[Token],
        actions: &[usize],
        advantage: f64,
        cfg: &ControllerConfig,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let (p, lps) = self.taped(&mut tape, sub, actions, cfg)?;
        if lps.is_empty() {
            return Ok((0.0, self.params.iter().map(|t| vec![0.0; t.len()]).collect()));
        }
        let mut total = lps[0];
        for &lp in &lps[1..] {
            total = tape.add(total, lp)?;
        }
        let obj = tape.scale(total, advantage);
        let value = tape.value(obj).item();
        let mut grads = tape.backward(obj)?;
        let g = p
            .iter()
            .zip(&self.params)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((value, g))
    }

    /// `advantage · Σ_t log P(a_t)` and its gradient for every encoder tensor,
    /// by backpropagation through time.
    pub fn objective_gradient(
        &self,
        sub: &[Token],
        actions: &[usize],
        advantage: f64,
        cfg: &ControllerConfig,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_tokens(sub)?;
        let (d, m) = (self.hidden, self.class.cardinality());
        if let Some(&a) = actions.iter().find(|&&a| a >= m) {
            return Err(Error::InvalidArgument(format!("action {} out of range for {}", a, self.class)));
        }
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|t| vec![0.0; t.len()]).collect();
        if actions.is_empty() {
            return Ok((0.0, grads));
        }
        let mut cells: Vec<CellCache> = Vec::with_capacity(sub.len() + actions.len());
        let (mut h, mut c) = (vec![0.0; d], vec![0.0; d]);
        for t in sub {
            let cell = self.cell_forward(t.id(), &h, &c);
            (h, c) = (cell.h.clone(), cell.c.clone());
            cells.push(cell);
        }
        // (cell index feeding the projection, d objective / d raw logits)
        let mut heads: Vec<(usize, Vec<f64>)> = Vec::with_capacity(actions.len());
        let mut value = 0.0;
        for (step, &a) in actions.iter().enumerate() {
            let raw = self.project(&h);
            let squashed: Vec<f64> = raw.iter().map(|r| math::tanh(r / cfg.temperature)).collect();
            let logits: Vec<f64> = squashed.iter().map(|q| cfg.tanh_const * q).collect();
            let probs = Self::softmax(&logits);
            value += math::ln(probs[a]);
            let draw = probs
                .iter()
                .zip(&squashed)
                .enumerate()
                .map(|(k, (p, q))| {
                    let dl = advantage * (if k == a { 1.0 } else { 0.0 } - p);
                    dl * cfg.tanh_const * (1.0 - q * q) / cfg.temperature
                })
                .collect();
            heads.push((cells.len(), draw));
            if step + 1 < actions.len() {
                let cell = self.cell_forward(Token::new(self.class, a).id(), &h, &c);
                (h, c) = (cell.h.clone(), cell.c.clone());
                cells.push(cell);
            }
        }

        let w_proj = self.params[ENC_PROJ_W].data();
        let w_ih = self.params[ENC_W_IH].data();
        let w_hh = self.params[ENC_W_HH].data();
        let zeros = vec![0.0; d];
        let (mut dh, mut dc) = (vec![0.0; d], vec![0.0; d]);
        let mut dgates = vec![0.0; 4 * d];
        let mut pos = cells.len();
        for (at, draw) in heads.iter().rev() {
            // walk back to the projection point, then add its contribution
            while pos > *at {
                pos -= 1;
                self.cell_backward(&cells[pos], &mut dh, &mut dc, &mut dgates, w_ih, w_hh, &mut grads);
            }
            let h_at = if *at == 0 { &zeros[..] } else { &cells[*at - 1].h[..] };
            for k in 0..d {
                let row = &w_proj[k * m..(k + 1) * m];
                let g = &mut grads[ENC_PROJ_W][k * m..(k + 1) * m];
                let mut acc = 0.0;
                for j in 0..m {
                    g[j] += h_at[k] * draw[j];
                    acc += row[j] * draw[j];
                }
                dh[k] += acc;
            }
            for (g, v) in grads[ENC_PROJ_B].iter_mut().zip(draw) {
                *g += v;
            }
        }
        while pos > 0 {
            pos -= 1;
            self.cell_backward(&cells[pos], &mut dh, &mut dc, &mut dgates, w_ih, w_hh, &mut grads);
        }
        Ok((advantage * value, grads))
    }

    /// Consumes `dh`/`dc` for the cell's outputs and leaves the gradients
    /// for its inputs in their place.
    #[allow(clippy::too_many_arguments)]
    fn cell_backward(
        &self,
        cell: &CellCache,
        dh: &mut [f64],
        dc: &mut [f64],
        dgates: &mut [f64],
        w_ih: &[f64],
        w_hh: &[f64],
        grads: &mut [Vec<f64>],
    ) {
        let d = self.hidden;
        let a = &cell.act;
        for j in 0..d {
            let (i, f, g, o) = (a[j], a[d + j], a[2 * d + j], a[3 * d + j]);
            let tc = cell.tanh_c[j];
            let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
            dgates[j] = dcj * g * i * (1.0 - i);
            dgates[d + j] = dcj * cell.c_prev[j] * f * (1.0 - f);
            dgates[2 * d + j] = dcj * i * (1.0 - g * g);
            dgates[3 * d + j] = dh[j] * tc * o * (1.0 - o);
            dc[j] = dcj * f;
        }
        for (b, v) in grads[ENC_BIAS].iter_mut().zip(dgates.iter()) {
            *b += v;
        }
        let emb_off = cell.token * d;
        for k in 0..d {
            let e = self.params[ENC_EMBED].data()[emb_off + k];
            let hp = cell.h_prev[k];
            let (ih, hh) = (&w_ih[k * 4 * d..(k + 1) * 4 * d], &w_hh[k * 4 * d..(k + 1) * 4 * d]);
            let (mut de, mut dhp) = (0.0, 0.0);
            for j in 0..4 * d {
                de += ih[j] * dgates[j];
                dhp += hh[j] * dgates[j];
            }
            let gih = &mut grads[ENC_W_IH][k * 4 * d..(k + 1) * 4 * d];
            for (g, v) in gih.iter_mut().zip(dgates.iter()) {
                *g += e * v;
            }
            if hp != 0.0 {
                let ghh = &mut grads[ENC_W_HH][k * 4 * d..(k + 1) * 4 * d];
                for (g, v) in ghh.iter_mut().zip(dgates.iter()) {
                    *g += hp * v;
                }
            }
            grads[ENC_EMBED][emb_off + k] += de;
            dh[k] = dhp;
        }
    }

    /// One adaptive-moment ascent step on `advantage · Σ log P(actions)`.
    pub fn reinforce(&mut self, sub: &[Token], actions: &[usize], advantage: f64, cfg: &ControllerConfig) -> Result<()> {
        let (_, grads) = self.objective_gradient(sub, actions, advantage, cfg)?;
        let adam = AdamConfig::new(cfg.lr, 0.0);
        for ((p, g), st) in self.params.iter_mut().zip(grads).zip(self.adam.iter_mut()) {
            let descent: Vec<f64> = g.iter().map(|v| -v).collect();
            adam_step(p, &descent, st, &adam)?;
        }
        Ok(())
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Natural-log entropy summed over decoding steps.
pub fn decision_entropy(distributions: &[Vec<f64>]) -> f64 {
    distributions
        .iter()
        .flat_map(|d| d.iter())
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * math::ln(p))
        .sum()
}

/// Draws `s` distinct classes without replacement, each draw proportional to
/// `entropy + GUIDE_EPS` among the remaining classes.
pub fn guide_select<R: Rng + ?Sized>(entropies: &[f64; 6], s: usize, rng: &mut R) -> Result<Vec<ActionClass>> {
    if !(1..=6).contains(&s) {
        return Err(Error::InvalidArgument(format!("s = {} outside 1..=6", s)));
    }
    let mut remaining: Vec<usize> = (0..6).collect();
    let mut chosen = Vec::with_capacity(s);
    for _ in 0..s {
        let weights: Vec<f64> = remaining.iter().map(|&c| entropies[c].max(0.0) + GUIDE_EPS).collect();
        let pick = sample_index(&weights, rng);
        chosen.push(ActionClass::ALL[remaining.remove(pick)]);
    }
    chosen.sort_by_key(|c| c.index());
    Ok(chosen)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalKind {
    Guided,
    FullResample,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub kind: ProposalKind,
    pub offspring: Architecture,
    pub slot: usize,
    pub chosen_classes: Vec<ActionClass>,
    /// Decisions of all six encoders, in class order (empty for random).
    pub decisions: Vec<Decision>,
    pub entropies: [f64; 6],
    generation: u64,
}

/// Outcome of [`ControllerState::update`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateReport {
    pub reward: f64,
    pub replaced: bool,
}

#[derive(Clone, Debug)]
pub struct ControllerState {
    cfg: ControllerConfig,
    encoders: Vec<ClassEncoder>,
    best: Vec<Option<(Architecture, f64)>>,
    next_slot: usize,
    generation: u64,
    rng: ChaCha8Rng,
}

impl ControllerState {
    pub fn new(cfg: ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        let encoders = ActionClass::ALL
            .iter()
            .map(|&c| ClassEncoder::new(c, cfg.hidden, cfg.init_range, math::mix_seed(cfg.seed, 100 + c.index() as u64)))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            encoders,
            best: vec![None; cfg.restart_slots],
            next_slot: 0,
            generation: 0,
            rng: ChaCha8Rng::seed_from_u64(math::mix_seed(cfg.seed, 1)),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn encoders(&self) -> &[ClassEncoder] {
        &self.encoders
    }

    pub fn encoders_mut(&mut self) -> &mut [ClassEncoder] {
        &mut self.encoders
    }

    pub fn best(&self, slot: usize) -> Option<&(Architecture, f64)> {
        self.best.get(slot).and_then(Option::as_ref)
    }

    /// Best over all restart slots (first slot wins ties).
    pub fn overall_best(&self) -> Option<&(Architecture, f64)> {
        let mut out: Option<&(Architecture, f64)> = None;
        for b in self.best.iter().flatten() {
            if out.is_none_or(|o| b.1 > o.1) {
                out = Some(b);
            }
        }
        out
    }

    /// Slot that the next proposal will use.
    pub fn active_slot(&self) -> usize {
        self.next_slot
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Random starting architecture for `slot`, to be evaluated and passed to
    /// [`ControllerState::set_best`].
    pub fn initial_candidate(&mut self) -> Result<Architecture> {
        Architecture::random(self.cfg.n_layers, &mut self.rng)
    }

    pub fn set_best(&mut self, slot: usize, arch: Architecture, metric: f64) -> Result<()> {
        if arch.num_layers() != self.cfg.n_layers {
            return Err(Error::InvalidArgument(format!(
                "architecture has {} layers, controller expects {}",
                arch.num_layers(),
                self.cfg.n_layers
            )));
        }
        let entry = self
            .best
            .get_mut(slot)
            .ok_or_else(|| Error::InvalidArgument(format!("no restart slot {}", slot)))?;
        *entry = Some((arch, metric));
        Ok(())
    }

    fn propose_classes(&mut self, forced_all: bool) -> Result<Proposal> {
        let slot = self.next_slot;
        let (best, _) = self.best[slot].clone().ok_or(Error::Empty("best architecture for the active slot"))?;
        let n = self.cfg.n_layers;
        let mut decisions = Vec::with_capacity(6);
        let mut entropies = [0.0; 6];
        for (i, &class) in ActionClass::ALL.iter().enumerate() {
            let sub = subarchitecture(&best, class);
            let d = self.encoders[i].decide(&sub, n, None, &self.cfg, &mut self.rng)?;
            entropies[i] = decision_entropy(&d.distributions);
            decisions.push(d);
        }
        let s = if forced_all { 6 } else { self.cfg.s };
        let chosen = guide_select(&entropies, s, &mut self.rng)?;
        let mut offspring = best;
        for &c in &chosen {
            offspring = offspring.with_class_choices(c, &decisions[c.index()].actions)?;
        }
        Ok(Proposal {
            kind: if forced_all { ProposalKind::FullResample } else { ProposalKind::Guided },
            offspring,
            slot,
            chosen_classes: chosen,
            decisions,
            entropies,
            generation: self.generation,
        })
    }

    /// Rewrites the guider-selected classes of the active slot's best.
    pub fn propose(&mut self) -> Result<Proposal> {
        self.propose_classes(false)
    }

    /// Rewrites all six classes at once.
    pub fn propose_full_resample(&mut self) -> Result<Proposal> {
        self.propose_classes(true)
    }

    /// Uniform random architecture; encoders are not consulted.
    pub fn propose_random(&mut self) -> Result<Proposal> {
        let offspring = Architecture::random(self.cfg.n_layers, &mut self.rng)?;
        Ok(Proposal {
            kind: ProposalKind::Random,
            offspring,
            slot: self.next_slot,
            chosen_classes: ActionClass::ALL.to_vec(),
            decisions: Vec::new(),
            entropies: [0.0; 6],
            generation: self.generation,
        })
    }

    /// Applies the policy-gradient step for the chosen classes, refreshes
    /// their baselines, and keeps the offspring as the slot's best only if it
    /// strictly improves on it.
    pub fn update(&mut self, proposal: &Proposal, metric: f64) -> Result<UpdateReport> {
        if proposal.generation != self.generation || proposal.slot != self.next_slot {
            return Err(Error::StaleProposal);
        }
        let slot = proposal.slot;
        let incumbent = self.best[slot].as_ref().map(|b| b.1);
        let mut reward = 0.0;
        if proposal.kind != ProposalKind::Random {
            let m_b = incumbent.ok_or(Error::StaleProposal)?;
            let (best, _) = self.best[slot].clone().ok_or(Error::StaleProposal)?;
            let bonus: f64 = proposal.chosen_classes.iter().map(|c| proposal.entropies[c.index()]).sum();
            reward = (metric - m_b) + self.cfg.entropy_weight * bonus;
            for &c in &proposal.chosen_classes {
                let enc = &mut self.encoders[c.index()];
                let advantage = reward - enc.baseline;
                let sub = subarchitecture(&best, c);
                enc.reinforce(&sub, &proposal.decisions[c.index()].actions, advantage, &self.cfg)?;
                enc.baseline = self.cfg.baseline_decay * enc.baseline + (1.0 - self.cfg.baseline_decay) * reward;
            }
        }
        let replaced = incumbent.is_none_or(|m_b| metric > m_b);
        if replaced {
            self.best[slot] = Some((proposal.offspring.clone(), metric));
        }
        self.generation += 1;
        self.next_slot = (self.next_slot + 1) % self.cfg.restart_slots;
        Ok(UpdateReport { reward, replaced })
    }

    /// Every tensor and scalar needed to resume the search bit-exactly.
    pub fn export_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        let c = &self.cfg;
        out.push((
            String::from("config"),
            Tensor::new(
                &[11],
                vec![
                    c.hidden as f64,
                    c.lr,
                    c.temperature,
                    c.tanh_const,
                    c.baseline_decay,
                    c.entropy_weight,
                    c.init_range,
                    c.s as f64,
                    c.restart_slots as f64,
                    c.n_layers as f64,
                    0.0,
                ],
            )?,
        ));
        out.push((String::from("config.seed"), u64_tensor(&[c.seed])));
        out.push((String::from("generation"), u64_tensor(&[self.generation, self.next_slot as u64])));
        let seed = self.rng.get_seed();
        let mut words: Vec<u64> = seed.chunks(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let pos = self.rng.get_word_pos();
        words.push(pos as u64);
        words.push((pos >> 64) as u64);
        words.push(self.rng.get_stream());
        out.push((String::from("rng"), u64_tensor(&words)));
        for enc in &self.encoders {
            let key = enc.class.key();
            out.push((format!("enc.{}.baseline", key), Tensor::scalar(enc.baseline)));
            for (i, name) in ENC_TENSORS.iter().enumerate() {
                out.push((format!("enc.{}.{}", key, name), enc.params[i].clone()));
                let st = &enc.adam[i];
                out.push((format!("enc.{}.{}.adam_m", key, name), Tensor::new(enc.params[i].shape(), st.m.clone())?));
                out.push((format!("enc.{}.{}.adam_v", key, name), Tensor::new(enc.params[i].shape(), st.v.clone())?));
                out.push((format!("enc.{}.{}.adam_step", key, name), u64_tensor(&[st.step])));
            }
        }
        for (slot, b) in self.best.iter().enumerate() {
            if let Some((arch, metric)) = b {
                let tokens: Vec<f64> = crate::space::encode(arch).iter().map(|t| t.id() as f64).collect();
                out.push((format!("best.{}.tokens", slot), Tensor::new(&[tokens.len()], tokens)?));
                out.push((format!("best.{}.metric", slot), Tensor::scalar(*metric)));
            }
        }
        Ok(out)
    }

    /// Rebuilds a controller from [`ControllerState::export_tensors`] output.
    pub fn import_tensors(entries: &[(String, Tensor)]) -> Result<Self> {
        let get = |name: &str| -> Result<&Tensor> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks `{}`", name)))
        };
        let c = get("config")?.data();
        if c.len() != 11 {
            return Err(Error::InvalidArgument(String::from("malformed controller config record")));
        }
        let cfg = ControllerConfig {
            hidden: c[0] as usize,
            lr: c[1],
            temperature: c[2],
            tanh_const: c[3],
            baseline_decay: c[4],
            entropy_weight: c[5],
            init_range: c[6],
            s: c[7] as usize,
            restart_slots: c[8] as usize,
            n_layers: c[9] as usize,
            seed: tensor_u64(get("config.seed")?)?[0],
        };
        let mut state = Self::new(cfg)?;
        let gen = tensor_u64(get("generation")?)?;
        if gen.len() != 2 {
            return Err(Error::InvalidArgument(String::from("malformed generation record")));
        }
        state.generation = gen[0];
        state.next_slot = gen[1] as usize % cfg.restart_slots;
        let words = tensor_u64(get("rng")?)?;
        if words.len() != 7 {
            return Err(Error::InvalidArgument(String::from("malformed rng record")));
        }
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_mut(8).zip(&words[..4]) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(words[6]);
        rng.set_word_pos(u128::from(words[4]) | (u128::from(words[5]) << 64));
        state.rng = rng;
        for enc in &mut state.encoders {
            let key = enc.class.key();
            enc.baseline = get(&format!("enc.{}.baseline", key))?.item();
            for (i, name) in ENC_TENSORS.iter().enumerate() {
                let t = get(&format!("enc.{}.{}", key, name))?;
                if t.shape() != enc.params[i].shape() {
                    return Err(Error::Shape {
                        op: "controller_import",
                        detail: format!("enc.{}.{} has shape {:?}", key, name, t.shape()),
                    });
                }
                enc.params[i] = t.clone();
                let m = get(&format!("enc.{}.{}.adam_m", key, name))?;
                let v = get(&format!("enc.{}.{}.adam_v", key, name))?;
                if m.len() != t.len() || v.len() != t.len() {
                    return Err(Error::InvalidArgument(format!("optimizer state size mismatch for enc.{}.{}", key, name)));
                }
                enc.adam[i] = AdamState {
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                    step: tensor_u64(get(&format!("enc.{}.{}.adam_step", key, name))?)?[0],
                };
            }
        }
        for slot in 0..cfg.restart_slots {
            if let Ok(tokens) = get(&format!("best.{}.tokens", slot)) {
                let toks = tokens
                    .data()
                    .iter()
                    .map(|&v| Token::from_id(v as usize))
                    .collect::<Result<Vec<_>>>()?;
                let arch = crate::space::decode(&toks)?;
                let metric = get(&format!("best.{}.metric", slot))?.item();
                state.set_best(slot, arch, metric)?;
            }
        }
        Ok(state)
    }
}

/// Stores each `u64` as two exact 32-bit halves.
fn u64_tensor(words: &[u64]) -> Tensor {
    let data: Vec<f64> = words.iter().flat_map(|&w| [(w & 0xffff_ffff) as f64, (w >> 32) as f64]).collect();
    Tensor::new(&[data.len()], data).expect("length matches")
}

fn tensor_u64(t: &Tensor) -> Result<Vec<u64>> {
    let d = t.data();
    if d.len() % 2 != 0 || d.iter().any(|v| *v < 0.0 || *v > u32::MAX as f64 || math::trunc(*v) != *v) {
        return Err(Error::InvalidArgument(String::from("malformed integer record")));
    }
    Ok(d.chunks(2).map(|p| p[0] as u64 | ((p[1] as u64) << 32)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{encode, random_architecture};

    fn state(s: usize, n: usize) -> ControllerState {
        let mut st = ControllerState::new(ControllerConfig {
            s,
            n_layers: n,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let a = st.initial_candidate().unwrap();
        st.set_best(0, a, 0.5).unwrap();
        st
    }

    #[test]
    fn entropy_values() {
        assert_eq!(decision_entropy(&[vec![1.0, 0.0], vec![0.0, 1.0]]), 0.0);
        let u = vec![vec![1.0 / 8.0; 8]; 3];
        assert!((decision_entropy(&u) - 3.0 * math::ln(8.0)).abs() < 1e-12);
    }

    #[test]
    fn guide_select_floor_and_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(guide_select(&[0.0, 0.0, 0.0, 0.0, 0.0, 2.0], 1, &mut rng).unwrap(), vec![ActionClass::ALL[5]]);
        }
        assert_eq!(guide_select(&[0.3; 6], 6, &mut rng).unwrap(), ActionClass::ALL.to_vec());
        assert!(guide_select(&[0.3; 6], 0, &mut rng).is_err());
    }

    #[test]
    fn logits_bounded_and_all_actions_reachable() {
        let st = state(1, 3);
        let best = st.best(0).unwrap().0.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for enc in st.encoders() {
            let d = enc.decide(&subarchitecture(&best, enc.class()), 3, None, st.config(), &mut rng).unwrap();
            let m = enc.class().cardinality() as f64;
            let floor = math::exp(-5.0) / (m * math::exp(5.0));
            for dist in &d.distributions {
                assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(dist.iter().all(|&p| p >= floor));
            }
        }
    }

    #[test]
    fn proposal_changes_only_chosen_class() {
        let mut st = state(1, 3);
        let best = st.best(0).unwrap().0.clone();
        let p = st.propose().unwrap();
        assert_eq!(p.chosen_classes.len(), 1);
        let c = p.chosen_classes[0];
        for other in ActionClass::ALL {
            if other != c {
                assert_eq!(p.offspring.class_choices(other), best.class_choices(other));
            }
        }
        assert_eq!(p.offspring.class_choices(c), p.decisions[c.index()].actions);
    }

    #[test]
    fn update_replaces_only_on_strict_improvement() {
        let mut st = state(1, 2);
        let p = st.propose().unwrap();
        let r = st.update(&p, 0.5).unwrap();
        assert!(!r.replaced);
        let p = st.propose().unwrap();
        assert!(st.update(&p, 0.6).unwrap().replaced);
        assert_eq!(st.best(0).unwrap().1, 0.6);
        assert!(matches!(st.update(&p, 0.9), Err(Error::StaleProposal)));
    }

    #[test]
    fn taped_and_direct_passes_agree() {
        let st = state(1, 3);
        let best = st.best(0).unwrap().0.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for enc in st.encoders() {
            let sub = subarchitecture(&best, enc.class());
            let d = enc.decide(&sub, 3, None, st.config(), &mut rng).unwrap();
            let (val, grads) = enc.objective_gradient(&sub, &d.actions, 0.7, st.config()).unwrap();
            let (tval, tgrads) = enc.taped_objective_gradient(&sub, &d.actions, 0.7, st.config()).unwrap();
            let direct: f64 = 0.7 * d.log_probs.iter().sum::<f64>();
            assert!((val - direct).abs() < 1e-10, "{} vs {}", val, direct);
            assert!((tval - direct).abs() < 1e-10, "{} vs {}", tval, direct);
            for (g, t) in grads.iter().zip(&tgrads) {
                for (a, b) in g.iter().zip(t) {
                    assert!((a - b).abs() <= 1e-12 + 1e-9 * b.abs(), "{} vs {}", a, b);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let mut a = state(2, 2);
        for m in [0.4, 0.7] {
            let p = a.propose().unwrap();
            a.update(&p, m).unwrap();
        }
        let mut b = ControllerState::import_tensors(&a.export_tensors().unwrap()).unwrap();
        for m in [0.1, 0.9, 0.8] {
            let pa = a.propose().unwrap();
            let pb = b.propose().unwrap();
            assert_eq!(pa, pb);
            a.update(&pa, m).unwrap();
            b.update(&pb, m).unwrap();
        }
        assert_eq!(a.encoders(), b.encoders());
        assert_eq!(encode(&a.best(0).unwrap().0), encode(&b.best(0).unwrap().0));
    }

    #[test]
    fn random_proposals_ignore_best() {
        let mut st = ControllerState::new(ControllerConfig::default()).unwrap();
        let p = st.propose_random().unwrap();
        assert!(p.decisions.is_empty());
        assert!(st.update(&p, 0.3).unwrap().replaced);
        assert!(st.propose().is_ok());
        let _ = random_architecture(2, 0);
    }
}
