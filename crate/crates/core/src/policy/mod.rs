//! Recurrent token policy: embedding -> tanh RNN -> linear head.
//!
//! Decoding is restricted to the action space (action-role tokens and
//! EOS); every log-probability in the crate is taken under that masked
//! distribution.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenId, TokenSequence, Vocab, EOS};
use crate::diffmath::{kernels, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParameters {
    /// `[V, d]`
    pub embed: Tensor,
    /// `[h, d]`
    pub w_in: Tensor,
    /// `[h, h]`
    pub w_rec: Tensor,
    /// `[h]`
    pub b_rec: Tensor,
    /// `[V, h]`
    pub w_out: Tensor,
    /// `[V]`
    pub b_out: Tensor,
}

impl PolicyParameters {
    pub fn zeros(vocab_size: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        PolicyParameters {
            embed: Tensor::zeros(&[vocab_size, embed_dim]),
            w_in: Tensor::zeros(&[hidden_dim, embed_dim]),
            w_rec: Tensor::zeros(&[hidden_dim, hidden_dim]),
            b_rec: Tensor::zeros(&[hidden_dim]),
            w_out: Tensor::zeros(&[vocab_size, hidden_dim]),
            b_out: Tensor::zeros(&[vocab_size]),
        }
    }

    /// Embedding and recurrent weights uniform in `[-scale, scale]`; the
    /// head starts at zero, so the initial policy is uniform.
    pub fn init<R: Rng>(
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(vocab_size, embed_dim, hidden_dim);
        for t in [&mut p.embed, &mut p.w_in, &mut p.w_rec] {
            for v in t.data_mut() {
                *v = rng.gen_range(-scale..=scale);
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size(), self.embed_dim(), self.hidden_dim())
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_rec.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.embed,
            &self.w_in,
            &self.w_rec,
            &self.b_rec,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.embed,
            &mut self.w_in,
            &mut self.w_rec,
            &mut self.b_rec,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.sq_norm()).sum()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token as usize >= self.vocab_size() {
            return Err(Error::Index(format!(
                "token {token} outside vocabulary of size {}",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    pub fn initial_hidden(&self) -> Vec<f64> {
        vec![0.0; self.hidden_dim()]
    }

    /// One recurrent update: `tanh(W_in e + b + W_rec h)`.
    pub fn advance(&self, hidden: &[f64], token: TokenId) -> Result<Vec<f64>> {
        self.check_token(token)?;
        let (h, d) = (self.hidden_dim(), self.embed_dim());
        let e = self.embed.row(token as usize);
        let input = kernels::linear(self.w_in.data(), h, d, Some(self.b_rec.data()), e);
        let rec = kernels::linear(self.w_rec.data(), h, h, None, hidden);
        Ok(kernels::tanh(&kernels::add(&input, &rec)))
    }

    pub fn run(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let mut hidden = self.initial_hidden();
        self.run_from(&mut hidden, context)?;
        Ok(hidden)
    }

    pub fn run_from(&self, hidden: &mut Vec<f64>, tokens: &[TokenId]) -> Result<()> {
        for &t in tokens {
            *hidden = self.advance(hidden, t)?;
        }
        Ok(())
    }

    pub fn head(&self, hidden: &[f64]) -> Vec<f64> {
        kernels::linear(
            self.w_out.data(),
            self.vocab_size(),
            self.hidden_dim(),
            Some(self.b_out.data()),
            hidden,
        )
    }
}

/// Tokens the policy may emit, and the inverse map into that list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpace {
    tokens: Vec<TokenId>,
    slot: Vec<Option<usize>>,
}

impl ActionSpace {
    pub fn new(vocab: &Vocab) -> Self {
        let tokens = vocab.decodable();
        let mut slot = vec![None; vocab.size()];
        for (i, &t) in tokens.iter().enumerate() {
            slot[t as usize] = Some(i);
        }
        ActionSpace { tokens, slot }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn indices(&self) -> Vec<usize> {
        self.tokens.iter().map(|&t| t as usize).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn slot(&self, token: TokenId) -> Result<usize> {
        self.slot
            .get(token as usize)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Contract(format!("token {token} is not decodable")))
    }

    pub fn masked(&self, logits: &[f64]) -> Vec<f64> {
        self.tokens.iter().map(|&t| logits[t as usize]).collect()
    }

    pub fn log_probs(&self, logits: &[f64]) -> Vec<f64> {
        kernels::log_softmax(&self.masked(logits))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodingLimits {
    /// Upper bound on action length, EOS included.
    pub max_action_tokens: usize,
}

impl DecodingLimits {
    pub fn new(max_action_tokens: usize) -> Result<Self> {
        if max_action_tokens < 2 {
            return Err(Error::config("max_action_tokens", "must be at least 2"));
        }
        Ok(DecodingLimits { max_action_tokens })
    }
}

pub fn next_logits(params: &PolicyParameters, context: &[TokenId]) -> Result<Tensor> {
    Ok(Tensor::vector(params.head(&params.run(context)?)))
}

/// Draws one index from a log-probability vector by inverse CDF.
pub fn sample_index<R: Rng>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Samples one action after the context whose final hidden state is
/// `hidden`. The hidden state is advanced over the sampled tokens.
pub fn sample_action_from<R: Rng>(
    params: &PolicyParameters,
    space: &ActionSpace,
    hidden: &mut Vec<f64>,
    limits: DecodingLimits,
    rng: &mut R,
) -> Result<TokenSequence> {
    let mut action = Vec::with_capacity(limits.max_action_tokens);
    loop {
        if action.len() + 1 == limits.max_action_tokens {
            action.push(EOS);
            *hidden = params.advance(hidden, EOS)?;
            return Ok(action);
        }
        let lp = space.log_probs(&params.head(hidden));
        let tok = space.tokens()[sample_index(&lp, rng)];
        action.push(tok);
        *hidden = params.advance(hidden, tok)?;
        if tok == EOS {
            return Ok(action);
        }
    }
}

pub fn sample_action<R: Rng>(
    params: &PolicyParameters,
    space: &ActionSpace,
    context: &[TokenId],
    limits: DecodingLimits,
    rng: &mut R,
) -> Result<TokenSequence> {
    let mut hidden = params.run(context)?;
    sample_action_from(params, space, &mut hidden, limits, rng)
}

/// `log pi(action[t] | prefix + action[..t])` for each position `t`.
pub fn action_token_logprobs(
    params: &PolicyParameters,
    space: &ActionSpace,
    context_prefix: &[TokenId],
    action: &[TokenId],
) -> Result<Vec<f64>> {
    if action.last() != Some(&EOS) {
        return Err(Error::Contract("action must end with EOS".into()));
    }
    let mut hidden = params.run(context_prefix)?;
    let mut out = Vec::with_capacity(action.len());
    for &tok in action {
        let lp = space.log_probs(&params.head(&hidden));
        out.push(lp[space.slot(tok)?]);
        hidden = params.advance(&hidden, tok)?;
    }
    Ok(out)
}

/// `teacher <- (1 - rate) teacher + rate student`, elementwise.
pub fn ema_update(
    teacher: &PolicyParameters,
    student: &PolicyParameters,
    rate: f64,
) -> Result<PolicyParameters> {
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, student, rate)?;
    Ok(out)
}

pub fn ema_update_in_place(
    teacher: &mut PolicyParameters,
    student: &PolicyParameters,
    rate: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config("ema_rate", format!("{rate} outside [0, 1]")));
    }
    if !teacher.same_shape(student) {
        return Err(Error::Dimension("EMA between differently shaped policies".into()));
    }
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = (1.0 - rate) * *a + rate * b;
        }
    }
    Ok(())
}

/// Parameters registered as leaves on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub embed: Var,
    pub w_in: Var,
    pub w_rec: Var,
    pub b_rec: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &PolicyParameters) -> Self {
        ParamVars {
            embed: tape.param(params.embed.clone()),
            w_in: tape.param(params.w_in.clone()),
            w_rec: tape.param(params.w_rec.clone()),
            b_rec: tape.param(params.b_rec.clone()),
            w_out: tape.param(params.w_out.clone()),
            b_out: tape.param(params.b_out.clone()),
        }
    }

    fn all(&self) -> [Var; 6] {
        [
            self.embed, self.w_in, self.w_rec, self.b_rec, self.w_out, self.b_out,
        ]
    }

    /// Gathers parameter gradients; parameters the loss never touched get zeros.
    pub fn gradients(&self, grads: &Gradients, like: &PolicyParameters) -> PolicyParameters {
        let mut out = like.zeros_like();
        for (var, t) in self.all().into_iter().zip(out.tensors_mut()) {
            if let Some(g) = grads.get(var) {
                t.data_mut().copy_from_slice(g);
            }
        }
        out
    }
}

pub fn taped_initial_hidden(tape: &mut Tape, params: &PolicyParameters) -> Var {
    tape.constant(Tensor::vector(params.initial_hidden()))
}

pub fn taped_advance(tape: &mut Tape, vars: &ParamVars, hidden: Var, token: TokenId) -> Result<Var> {
    let e = tape.embed_lookup(vars.embed, token as usize)?;
    let input = tape.linear(vars.w_in, Some(vars.b_rec), e)?;
    let rec = tape.linear(vars.w_rec, None, hidden)?;
    let pre = tape.add(input, rec)?;
    Ok(tape.tanh(pre))
}

pub fn taped_run(tape: &mut Tape, vars: &ParamVars, mut hidden: Var, tokens: &[TokenId]) -> Result<Var> {
    for &t in tokens {
        hidden = taped_advance(tape, vars, hidden, t)?;
    }
    Ok(hidden)
}

/// Logits restricted to the action space.
pub fn taped_masked_logits(tape: &mut Tape, vars: &ParamVars, space: &ActionSpace, hidden: Var) -> Result<Var> {
    let logits = tape.linear(vars.w_out, Some(vars.b_out), hidden)?;
    tape.gather(logits, &space.indices())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Role;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Vocab with 10 observation tokens (ids 9..19) then `n_actions` actions.
    fn vocab(n_actions: usize) -> (Vocab, Vec<TokenId>) {
        let mut v = Vocab::new();
        for i in 0..11 {
            v.push(format!("o{i}"), Role::Observation);
        }
        let acts = (0..n_actions).map(|i| v.push(format!("a{i}"), Role::Action)).collect();
        (v, acts)
    }

    fn random_params(v: usize, seed: u64) -> PolicyParameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PolicyParameters::init(v, 6, 8, 0.5, &mut rng);
        for x in p.w_out.data_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
        p
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let (v, _) = vocab(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PolicyParameters::init(v.size(), 8, 16, 0.08, &mut rng);
        let l = next_logits(&p, &[10, 11, 12]).unwrap();
        assert!(l.data().iter().all(|x| *x == l.data()[0]));
        assert_eq!(next_logits(&p, &[]).unwrap().data(), p.b_out.data());
    }

    #[test]
    fn logits_pure_and_context_sensitive() {
        let (v, _) = vocab(4);
        let p = random_params(v.size(), 3);
        assert_eq!(next_logits(&p, &[10, 11]).unwrap(), next_logits(&p, &[10, 11]).unwrap());
        let a = next_logits(&p, &[10]).unwrap();
        let b = next_logits(&p, &[10, 11]).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 0.0);
        assert!(matches!(next_logits(&p, &[999]), Err(Error::Index(_))));
    }

    #[test]
    fn forced_sample_and_determinism() {
        let (v, acts) = vocab(4);
        let space = ActionSpace::new(&v);
        let mut p = PolicyParameters::zeros(v.size(), 4, 4);
        p.b_out.data_mut()[acts[0] as usize] = 100.0;
        let limits = DecodingLimits::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_action(&p, &space, &[10], limits, &mut rng).unwrap(), vec![acts[0], EOS]);

        let p = random_params(v.size(), 5);
        let limits = DecodingLimits::new(6).unwrap();
        let draw = |seed| sample_action(&p, &space, &[10, 11], limits, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(draw(9), draw(9));
        assert!(DecodingLimits::new(1).is_err());
    }

    #[test]
    fn sampling_frequency_matches_probability() {
        // Two decodable tokens (action, EOS): logit gap ln 3 gives p = 0.75.
        let (v, acts) = vocab(1);
        let space = ActionSpace::new(&v);
        let mut p = PolicyParameters::zeros(v.size(), 2, 2);
        p.b_out.data_mut()[acts[0] as usize] = 3f64.ln();
        let limits = DecodingLimits::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| sample_action(&p, &space, &[], limits, &mut rng).unwrap()[0] == acts[0])
            .count();
        let rate = hits as f64 / n as f64;
        // binomial sd = sqrt(.75 * .25 / 1e4) ~ 0.0043; 0.02 is > 4.6 sd
        assert!((rate - 0.75).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn sampling_only_emits_decodable_tokens() {
        let (v, _) = vocab(3);
        let space = ActionSpace::new(&v);
        let mut p = random_params(v.size(), 11);
        // push observation and control rows up hard; masking must win
        for t in 0..20 {
            p.b_out.data_mut()[t] = 50.0;
        }
        let limits = DecodingLimits::new(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = sample_action(&p, &space, &[10, 12], limits, &mut rng).unwrap();
            assert_eq!(*a.last().unwrap(), EOS);
            assert!(a.len() <= 5);
            assert!(a.iter().all(|&t| t == EOS || v.role(t) == Some(Role::Action)));
        }
    }

    #[test]
    fn uniform_logprobs() {
        let (v, acts) = vocab(4);
        let space = ActionSpace::new(&v);
        let p = PolicyParameters::zeros(v.size(), 4, 4);
        let lp = action_token_logprobs(&p, &space, &[10], &[acts[0], acts[2], EOS]).unwrap();
        for x in &lp {
            assert!((x + 5f64.ln()).abs() < 1e-12);
        }
        assert!(action_token_logprobs(&p, &space, &[10], &[acts[0]]).is_err());
        assert!(action_token_logprobs(&p, &space, &[10], &[10, EOS]).is_err());
    }

    #[test]
    fn length_two_enumeration_sums_to_one() {
        // V_a = 3. Every two-token continuation is either a complete action
        // of length <= 2 ([EOS] or [x, EOS]) or an unfinished pair (x, y);
        // their probabilities must partition the unit mass.
        let (v, acts) = vocab(3);
        let space = ActionSpace::new(&v);
        let p = random_params(v.size(), 17);
        let prefix = [10, 11, 12];
        let mut total = 0.0;
        for a in acts.iter().map(|&x| vec![x, EOS]).chain([vec![EOS]]) {
            total += action_token_logprobs(&p, &space, &prefix, &a)
                .unwrap()
                .iter()
                .sum::<f64>()
                .exp();
        }
        let h0 = p.run(&prefix).unwrap();
        let lp0 = space.log_probs(&p.head(&h0));
        for &x in &acts {
            let h1 = p.advance(&h0, x).unwrap();
            let lp1 = space.log_probs(&p.head(&h1));
            for &y in &acts {
                total += (lp0[space.slot(x).unwrap()] + lp1[space.slot(y).unwrap()]).exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-9, "total {total}");
    }

    #[test]
    fn logprob_chain_rule() {
        let (v, acts) = vocab(4);
        let space = ActionSpace::new(&v);
        let p = random_params(v.size(), 23);
        let action = [acts[1], acts[3], EOS];
        let lp = action_token_logprobs(&p, &space, &[10], &action).unwrap();
        let mut manual = 0.0;
        let mut ctx = vec![10];
        for &t in &action {
            let l = next_logits(&p, &ctx).unwrap();
            manual += space.log_probs(l.data())[space.slot(t).unwrap()];
            ctx.push(t);
        }
        assert!((lp.iter().sum::<f64>() - manual).abs() < 1e-12);
        assert!(lp.iter().all(|x| x.exp() > 0.0 && x.exp() <= 1.0));
    }

    #[test]
    fn ema_examples() {
        let mut t = PolicyParameters::zeros(3, 1, 1);
        let mut s = t.clone();
        t.b_out.data_mut()[0] = 2.0;
        s.b_out.data_mut()[0] = 4.0;
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), s);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), t);
        let u = ema_update(&t, &s, 0.001).unwrap();
        assert_eq!(u.b_out.data()[0], 0.999 * 2.0 + 0.001 * 4.0);
        assert!((u.b_out.data()[0] - 2.002).abs() < 1e-15);
        assert!(ema_update(&t, &PolicyParameters::zeros(4, 1, 1), 0.5).is_err());
        assert!(ema_update(&t, &s, 1.5).is_err());
    }

    #[test]
    fn ema_distance_non_increasing() {
        let s = random_params(30, 1);
        let mut t = random_params(30, 2);
        let mut last = t.distance(&s);
        for _ in 0..50 {
            ema_update_in_place(&mut t, &s, 0.1).unwrap();
            let d = t.distance(&s);
            assert!(d <= last);
            last = d;
        }
    }

    #[test]
    fn taped_forward_matches_plain() {
        let (v, acts) = vocab(4);
        let space = ActionSpace::new(&v);
        let p = random_params(v.size(), 8);
        let ctx = [10, 12, acts[1], EOS, 13];
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &p);
        let h0 = taped_initial_hidden(&mut tape, &p);
        let h = taped_run(&mut tape, &vars, h0, &ctx).unwrap();
        let m = taped_masked_logits(&mut tape, &vars, &space, h).unwrap();
        let plain = space.masked(next_logits(&p, &ctx).unwrap().data());
        assert_eq!(tape.value(m).data(), plain.as_slice());
    }
}
