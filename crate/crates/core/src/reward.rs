//! Pairwise-preference reward model: the preference dataset, swap
//! augmentation, class balancing, the Bradley–Terry pair probability and its
//! cross-entropy loss, and the CNN + bidirectional-LSTM reward predictor.

use alloc::vec;
use alloc::vec::Vec;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::Observation;
use crate::nn::{sigmoid, Adam, BnStats, ConvTrunk, Dense, InputNorm, Lstm, LstmCache, ParamLayout, Tensor4, TrunkCache};
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Training label of one comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preference {
    A,
    B,
    Equal,
}

impl Preference {
    pub const ALL: [Preference; 3] = [Preference::A, Preference::B, Preference::Equal];

    /// Label vector μ = (P[a preferred], P[b preferred]).
    pub fn mu(self) -> [f64; 2] {
        match self {
            Preference::A => [1.0, 0.0],
            Preference::B => [0.0, 1.0],
            Preference::Equal => [0.5, 0.5],
        }
    }

    pub fn from_mu(mu: [f64; 2]) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.mu() == mu)
    }

    /// Label after swapping the two clips.
    pub fn reversed(self) -> Self {
        match self {
            Preference::A => Preference::B,
            Preference::B => Preference::A,
            Preference::Equal => Preference::Equal,
        }
    }

    pub fn class_index(self) -> usize {
        match self {
            Preference::A => 0,
            Preference::B => 1,
            Preference::Equal => 2,
        }
    }
}

/// A listener's answer. `Neither` means both clips were unacceptable; such
/// comparisons never enter the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Choice {
    #[serde(alias = "a")]
    A,
    #[serde(alias = "b")]
    B,
    #[serde(alias = "equal")]
    Equal,
    #[serde(alias = "neither")]
    Neither,
}

impl Choice {
    pub fn preference(self) -> Option<Preference> {
        match self {
            Choice::A => Some(Preference::A),
            Choice::B => Some(Preference::B),
            Choice::Equal => Some(Preference::Equal),
            Choice::Neither => None,
        }
    }

    /// The same answer seen from the other side of a swapped presentation.
    pub fn swapped(self) -> Self {
        match self {
            Choice::A => Choice::B,
            Choice::B => Choice::A,
            other => other,
        }
    }
}

impl From<Preference> for Choice {
    fn from(p: Preference) -> Self {
        match p {
            Preference::A => Choice::A,
            Preference::B => Choice::B,
            Preference::Equal => Choice::Equal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Human,
    Simulated,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub obs_a: Observation,
    pub obs_b: Observation,
    pub label: Preference,
    pub origin: Origin,
}

impl PreferenceTriplet {
    pub fn new(obs_a: Observation, obs_b: Observation, label: Preference, origin: Origin) -> Result<Self> {
        if obs_a.shape != obs_b.shape {
            return Err(Error::Dimension { expected: obs_a.len(), actual: obs_b.len(), what: "preference pair" });
        }
        Ok(Self { obs_a, obs_b, label, origin })
    }

    pub fn mu(&self) -> [f64; 2] {
        self.label.mu()
    }

    pub fn swapped(&self) -> Self {
        Self {
            obs_a: self.obs_b.clone(),
            obs_b: self.obs_a.clone(),
            label: self.label.reversed(),
            origin: Origin::Augmented,
        }
    }
}

/// The buffer D of labeled comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub triplets: Vec<PreferenceTriplet>,
    /// Fraction of original comparisons held out for validation.
    pub val_fraction: f64,
}

impl Default for PreferenceDataset {
    fn default() -> Self {
        Self { triplets: Vec::new(), val_fraction: 0.2 }
    }
}

impl PreferenceDataset {
    pub fn new(val_fraction: f64) -> Self {
        Self { triplets: Vec::new(), val_fraction }
    }

    pub fn push(&mut self, t: PreferenceTriplet) -> Result<()> {
        if let Some(first) = self.triplets.first() {
            if first.obs_a.shape != t.obs_a.shape {
                return Err(Error::Dimension { expected: first.obs_a.len(), actual: t.obs_a.len(), what: "dataset observation" });
            }
        }
        self.triplets.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Counts of (A preferred, B preferred, equal).
    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for t in &self.triplets {
            c[t.label.class_index()] += 1;
        }
        c
    }

    pub fn equal_fraction(&self) -> f64 {
        if self.triplets.is_empty() {
            return 0.0;
        }
        self.class_counts()[2] as f64 / self.triplets.len() as f64
    }

    pub fn originals(&self) -> impl Iterator<Item = &PreferenceTriplet> {
        self.triplets.iter().filter(|t| t.origin != Origin::Augmented)
    }
}

/// Appends the swapped copy of every triplet.
pub fn augment(ds: &PreferenceDataset) -> PreferenceDataset {
    let mut triplets = ds.triplets.clone();
    triplets.extend(ds.triplets.iter().map(PreferenceTriplet::swapped));
    PreferenceDataset { triplets, val_fraction: ds.val_fraction }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalanceWarning {
    pub missing: Vec<Preference>,
}

/// Inverse-frequency loss weights per class, normalized so that the average
/// weight over the dataset is one. Absent classes get weight zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Balance {
    pub weights: [f64; 3],
    pub warning: Option<BalanceWarning>,
}

impl Balance {
    pub fn weight(&self, label: Preference) -> f64 {
        self.weights[label.class_index()]
    }
}

pub fn balance(ds: &PreferenceDataset) -> Balance {
    balance_counts(ds.class_counts())
}

pub fn balance_counts(counts: [usize; 3]) -> Balance {
    let total: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count();
    let mut weights = [0.0; 3];
    for (w, &c) in weights.iter_mut().zip(&counts) {
        if c > 0 {
            *w = total as f64 / (present as f64 * c as f64);
        }
    }
    let missing: Vec<Preference> = Preference::ALL.into_iter().filter(|p| counts[p.class_index()] == 0).collect();
    Balance { weights, warning: (!missing.is_empty()).then_some(BalanceWarning { missing }) }
}

/// P̂[a ≻ b] = exp(r_a) / (exp(r_a) + exp(r_b)).
pub fn pair_probability(r_a: f64, r_b: f64) -> f64 {
    let m = r_a.max(r_b);
    let ea = libm::exp(r_a - m);
    let eb = libm::exp(r_b - m);
    ea / (ea + eb)
}

/// Cross-entropy of one comparison and its derivative with respect to `r_a`
/// (the derivative for `r_b` is the negation).
pub fn pair_loss_grad(r_a: f64, r_b: f64, label: Preference) -> (f64, f64) {
    let [mu_a, mu_b] = label.mu();
    let p_ab = pair_probability(r_a, r_b);
    let p_ba = pair_probability(r_b, r_a);
    let hi = 1.0 - PROB_CLAMP;
    let mut loss = 0.0;
    let mut d_ra = 0.0;
    if mu_a > 0.0 {
        loss -= mu_a * libm::log(p_ab.clamp(PROB_CLAMP, hi));
        if p_ab > PROB_CLAMP && p_ab < hi {
            d_ra -= mu_a * p_ba;
        }
    }
    if mu_b > 0.0 {
        loss -= mu_b * libm::log(p_ba.clamp(PROB_CLAMP, hi));
        if p_ba > PROB_CLAMP && p_ba < hi {
            d_ra += mu_b * p_ab;
        }
    }
    (loss, d_ra)
}

pub fn pair_loss(r_a: f64, r_b: f64, label: Preference) -> f64 {
    pair_loss_grad(r_a, r_b, label).0
}

/// Mean cross-entropy over `(r_a, r_b, label)` entries.
pub fn preference_loss(batch: &[(f64, f64, Preference)]) -> f64 {
    assert!(!batch.is_empty(), "empty preference batch");
    batch.iter().map(|&(a, b, l)| pair_loss(a, b, l)).sum::<f64>() / batch.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardNetConfig {
    pub conv_filters: Vec<usize>,
    pub conv_kernel: usize,
    /// Hidden units per direction of the bidirectional LSTM.
    pub recurrent_hidden: usize,
    pub dropout_rate: f64,
    pub batchnorm_decay: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stopping_patience: usize,
    pub lr_plateau_patience: usize,
    pub lr_decay: f64,
    /// Smallest validation improvement that resets the patience counters.
    pub min_delta: f64,
    /// Sampling weight of fresh triplets relative to old ones while fine-tuning.
    pub finetune_new_weight: f64,
}

impl Default for RewardNetConfig {
    fn default() -> Self {
        Self {
            conv_filters: vec![32, 64, 128],
            conv_kernel: 3,
            recurrent_hidden: 64,
            dropout_rate: 0.5,
            batchnorm_decay: 0.9,
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 200,
            early_stopping_patience: 10,
            lr_plateau_patience: 5,
            lr_decay: 0.5,
            min_delta: 1e-4,
            finetune_new_weight: 2.0,
        }
    }
}

impl RewardNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.into()));
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return bad("conv_filters must be non-empty and positive");
        }
        if self.conv_kernel == 0 || self.conv_kernel % 2 == 0 {
            return bad("conv_kernel must be odd");
        }
        if self.recurrent_hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("recurrent_hidden, batch_size and max_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(self.batchnorm_decay > 0.0 && self.batchnorm_decay < 1.0) {
            return bad("batchnorm_decay must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("learning_rate must be positive and lr_decay in (0, 1]");
        }
        if !(self.finetune_new_weight > 0.0) {
            return bad("finetune_new_weight must be positive");
        }
        Ok(())
    }
}

/// Network topology: conv stages (conv, batch norm, leaky ReLU, max pool),
/// the time axis read as a sequence, a bidirectional LSTM, mean pooling over
/// time, dropout and a linear head producing one latent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardNet {
    pub input_shape: [usize; 3],
    trunk: ConvTrunk,
    fwd: Lstm,
    bwd: Lstm,
    head: Dense,
    n_params: usize,
}

struct NetCache {
    trunk: TrunkCache,
    out_dims: (usize, usize, usize, usize),
    fwd: LstmCache,
    bwd: LstmCache,
    dropped: Vec<f64>,
    mask: Option<Vec<f64>>,
}

impl RewardNet {
    pub fn new(cfg: &RewardNetConfig, input_shape: [usize; 3]) -> Result<Self> {
        cfg.validate()?;
        let [h, w, c] = input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidParams("observation shape must be positive".into()));
        }
        let mut layout = ParamLayout::default();
        let trunk = ConvTrunk::new(&mut layout, c, h, w, &cfg.conv_filters, cfg.conv_kernel, true);
        let d = trunk.out_c * trunk.out_h;
        let fwd = Lstm::new(&mut layout, d, cfg.recurrent_hidden, false);
        let bwd = Lstm::new(&mut layout, d, cfg.recurrent_hidden, true);
        let head = Dense::new(&mut layout, 2 * cfg.recurrent_hidden, 1);
        Ok(Self { input_shape, trunk, fwd, bwd, head, n_params: layout.len() })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_bn(&self) -> usize {
        self.trunk.n_bn()
    }

    fn bn_channels(&self) -> Vec<usize> {
        self.trunk.stages.iter().filter_map(|s| s.bn.as_ref().map(|b| b.c)).collect()
    }

    fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        self.trunk.init(params, rng);
        self.fwd.init(params, rng);
        self.bwd.init(params, rng);
        self.head.init(params, 1.0, rng);
    }

    fn pooled_len(&self) -> usize {
        2 * self.fwd.hidden
    }

    fn forward(&self, params: &[f64], bn: &[BnStats], x: Tensor4, train: bool, mask: Option<Vec<f64>>) -> (Vec<f64>, NetCache) {
        let n = x.n;
        let (out, trunk) = self.trunk.forward(params, x, bn, train);
        let (c, h, t) = (out.c, out.h, out.w);
        let d = c * h;
        let mut seq = vec![0.0; n * t * d];
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for ti in 0..t {
                        seq[(ni * t + ti) * d + ci * h + hi] = out.data[out.idx(ni, ci, hi, ti)];
                    }
                }
            }
        }
        let fwd = self.fwd.forward(params, &seq, n, t);
        let bwd = self.bwd.forward(params, &seq, n, t);
        let hd = self.fwd.hidden;
        let mut dropped = vec![0.0; n * 2 * hd];
        for ni in 0..n {
            for ti in 0..t {
                for k in 0..hd {
                    dropped[ni * 2 * hd + k] += fwd.h[(ni * t + ti) * hd + k] / t as f64;
                    dropped[ni * 2 * hd + hd + k] += bwd.h[(ni * t + ti) * hd + k] / t as f64;
                }
            }
        }
        if let Some(m) = &mask {
            for (v, mv) in dropped.iter_mut().zip(m) {
                *v *= mv;
            }
        }
        let latents = self.head.forward(params, &dropped, n);
        (latents, NetCache { trunk, out_dims: (n, c, h, t), fwd, bwd, dropped, mask })
    }

    fn backward(&self, params: &[f64], cache: &NetCache, dlatent: &[f64], grads: &mut [f64]) {
        let (n, c, h, t) = cache.out_dims;
        let hd = self.fwd.hidden;
        let mut dpool = self.head.backward(params, &cache.dropped, dlatent, n, grads);
        if let Some(m) = &cache.mask {
            for (v, mv) in dpool.iter_mut().zip(m) {
                *v *= mv;
            }
        }
        let mut dhf = vec![0.0; n * t * hd];
        let mut dhb = vec![0.0; n * t * hd];
        for ni in 0..n {
            for ti in 0..t {
                for k in 0..hd {
                    dhf[(ni * t + ti) * hd + k] = dpool[ni * 2 * hd + k] / t as f64;
                    dhb[(ni * t + ti) * hd + k] = dpool[ni * 2 * hd + hd + k] / t as f64;
                }
            }
        }
        let mut dseq = self.fwd.backward(params, &cache.fwd, &dhf, grads);
        for (a, b) in dseq.iter_mut().zip(self.bwd.backward(params, &cache.bwd, &dhb, grads)) {
            *a += b;
        }
        let d = c * h;
        let mut dout = Tensor4::zeros(n, c, h, t);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for ti in 0..t {
                        let i = dout.idx(ni, ci, hi, ti);
                        dout.data[i] = dseq[(ni * t + ti) * d + ci * h + hi];
                    }
                }
            }
        }
        self.trunk.backward(params, &cache.trunk, dout, grads);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub epochs: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// A comparison viewed without copying the observations.
#[derive(Clone, Copy)]
struct PairRef<'a> {
    a: &'a Observation,
    b: &'a Observation,
    label: Preference,
}

impl<'a> PairRef<'a> {
    fn of(t: &'a PreferenceTriplet) -> Self {
        Self { a: &t.obs_a, b: &t.obs_b, label: t.label }
    }

    fn swapped(self) -> Self {
        Self { a: self.b, b: self.a, label: self.label.reversed() }
    }
}

fn with_swaps<'a>(pairs: impl IntoIterator<Item = PairRef<'a>>) -> Vec<PairRef<'a>> {
    pairs.into_iter().flat_map(|p| [p, p.swapped()]).collect()
}

/// Trained network plus everything needed to resume training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardPredictor {
    pub cfg: RewardNetConfig,
    pub net: RewardNet,
    pub params: Vec<f64>,
    pub bn: Vec<BnStats>,
    pub norm: InputNorm,
    pub opt: Adam,
    pub epochs_trained: usize,
    pub trained: bool,
}

impl RewardPredictor {
    pub fn new<R: Rng + ?Sized>(cfg: &RewardNetConfig, input_shape: [usize; 3], rng: &mut R) -> Result<Self> {
        let net = RewardNet::new(cfg, input_shape)?;
        let mut params = vec![0.0; net.n_params()];
        net.init(&mut params, rng);
        let bn = net.bn_channels().into_iter().map(BnStats::new).collect();
        let opt = Adam::new(params.len(), cfg.learning_rate);
        Ok(Self { cfg: cfg.clone(), net, params, bn, norm: InputNorm::default(), opt, epochs_trained: 0, trained: false })
    }

    fn batch_tensor(&self, obs: &[&Observation]) -> Result<Tensor4> {
        let [h, w, c] = self.net.input_shape;
        let mut data = Vec::with_capacity(obs.len() * h * w * c);
        for o in obs {
            if o.shape != self.net.input_shape {
                return Err(Error::Dimension { expected: h * w * c, actual: o.len(), what: "reward model input" });
            }
            data.extend(o.to_chw().into_iter().map(|v| self.norm.apply(v)));
        }
        Ok(Tensor4::from_data(obs.len(), c, h, w, data))
    }

    /// Inference-mode latents r̂.
    pub fn latents(&self, obs: &[&Observation]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(obs.len());
        for chunk in obs.chunks(64) {
            let x = self.batch_tensor(chunk)?;
            out.extend(self.net.forward(&self.params, &self.bn, x, false, None).0);
        }
        Ok(out)
    }

    pub fn latent(&self, obs: &Observation) -> Result<f64> {
        Ok(self.latents(&[obs])?[0])
    }

    /// Agent-facing reward σ(r̂) ∈ (0, 1).
    pub fn reward(&self, obs: &Observation) -> Result<f64> {
        Ok(sigmoid(self.latent(obs)?))
    }

    fn pair_latents(&self, pairs: &[PairRef<'_>]) -> Result<Vec<(f64, f64)>> {
        let obs: Vec<&Observation> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
        let l = self.latents(&obs)?;
        Ok(l.chunks(2).map(|c| (c[0], c[1])).collect())
    }

    fn mean_pair_loss(&self, pairs: &[PairRef<'_>]) -> Result<f64> {
        if pairs.is_empty() {
            return Ok(f64::NAN);
        }
        let l = self.pair_latents(pairs)?;
        Ok(l.iter().zip(pairs).map(|(&(a, b), p)| pair_loss(a, b, p.label)).sum::<f64>() / pairs.len() as f64)
    }

    /// Unweighted mean preference loss in inference mode.
    pub fn mean_loss(&self, triplets: &[PreferenceTriplet]) -> Result<f64> {
        let pairs: Vec<PairRef<'_>> = triplets.iter().map(PairRef::of).collect();
        self.mean_pair_loss(&pairs)
    }

    /// Fraction of non-equal comparisons whose preferred clip gets the higher
    /// latent; `None` when there are no such comparisons.
    pub fn pairwise_accuracy(&self, triplets: &[PreferenceTriplet]) -> Result<Option<f64>> {
        let pairs: Vec<PairRef<'_>> = triplets.iter().filter(|t| t.label != Preference::Equal).map(PairRef::of).collect();
        if pairs.is_empty() {
            return Ok(None);
        }
        let l = self.pair_latents(&pairs)?;
        let correct = l
            .iter()
            .zip(&pairs)
            .filter(|(&(a, b), p)| match p.label {
                Preference::A => a > b,
                _ => b > a,
            })
            .count();
        Ok(Some(correct as f64 / pairs.len() as f64))
    }

    fn dropout_mask<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Option<Vec<f64>> {
        let p = self.cfg.dropout_rate;
        (p > 0.0).then(|| {
            let keep = 1.0 / (1.0 - p);
            (0..n * self.net.pooled_len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect()
        })
    }

    /// Weighted mean loss of a batch in train mode, its gradient and the
    /// batch-norm statistics observed.
    fn batch_loss_grad<R: Rng + ?Sized>(
        &self,
        params: &[f64],
        pairs: &[(PairRef<'_>, f64)],
        rng: &mut R,
    ) -> Result<(f64, Vec<f64>, Vec<BnStats>)> {
        let obs: Vec<&Observation> = pairs.iter().flat_map(|(p, _)| [p.a, p.b]).collect();
        let x = self.batch_tensor(&obs)?;
        let mask = self.dropout_mask(obs.len(), rng);
        let (lat, cache) = self.net.forward(params, &self.bn, x, true, mask);
        let wsum: f64 = pairs.iter().map(|(_, w)| w).sum();
        let mut loss = 0.0;
        let mut dlat = vec![0.0; lat.len()];
        for (i, (p, w)) in pairs.iter().enumerate() {
            let (l, d) = pair_loss_grad(lat[2 * i], lat[2 * i + 1], p.label);
            loss += w * l / wsum;
            dlat[2 * i] = w * d / wsum;
            dlat[2 * i + 1] = -w * d / wsum;
        }
        let mut grads = vec![0.0; params.len()];
        self.net.backward(params, &cache, &dlat, &mut grads);
        let stats = cache.trunk.batch_stats().into_iter().flatten().cloned().collect();
        Ok((loss, grads, stats))
    }

    /// Train-mode mean loss of `triplets` at `params` and its gradient. The
    /// dropout mask is drawn from `rng`.
    pub fn loss_grad_at<R: Rng + ?Sized>(&self, params: &[f64], triplets: &[PreferenceTriplet], rng: &mut R) -> Result<(f64, Vec<f64>)> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension { expected: self.params.len(), actual: params.len(), what: "reward parameters" });
        }
        let pairs: Vec<(PairRef<'_>, f64)> = triplets.iter().map(|t| (PairRef::of(t), 1.0)).collect();
        let (loss, grads, _) = self.batch_loss_grad(params, &pairs, rng)?;
        Ok((loss, grads))
    }

    fn train_step<R: Rng + ?Sized>(&mut self, pairs: &[(PairRef<'_>, f64)], rng: &mut R, epoch: usize) -> Result<f64> {
        let (loss, grads, stats) = self.batch_loss_grad(&self.params, pairs, rng)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        self.opt.step(&mut self.params, &grads);
        for (run, b) in self.bn.iter_mut().zip(&stats) {
            run.update(b, self.cfg.batchnorm_decay);
        }
        Ok(loss)
    }

    /// Trains on the original (non-augmented) comparisons of `ds`: a validation
    /// split is drawn at comparison level, both splits are swap-augmented, the
    /// training split is class-balanced, and the best-validation weights are
    /// kept. On divergence the predictor is left at its last stable state.
    pub fn fit<R: Rng + ?Sized>(&mut self, ds: &PreferenceDataset, rng: &mut R) -> Result<LossHistory> {
        let mut originals: Vec<PairRef<'_>> = ds.originals().map(PairRef::of).collect();
        if originals.is_empty() {
            return Err(Error::InvalidParams("preference dataset is empty".into()));
        }
        originals.shuffle(rng);
        let n = originals.len();
        let n_val = if n >= 2 {
            (libm::round(n as f64 * ds.val_fraction) as usize).clamp(1, n - 1)
        } else {
            0
        };
        let val = with_swaps(originals[..n_val].iter().copied());
        let train = with_swaps(originals[n_val..].iter().copied());
        let mut counts = [0; 3];
        for p in &train {
            counts[p.label.class_index()] += 1;
        }
        let bal = balance_counts(counts);
        if !self.trained {
            self.norm = InputNorm::fit(train.iter().flat_map(|p| [p.a.data.as_slice(), p.b.data.as_slice()]));
        }
        self.opt.lr = self.cfg.learning_rate;

        let mut best = (self.params.clone(), self.bn.clone());
        let mut hist = LossHistory { best_val_loss: f64::INFINITY, ..Default::default() };
        let (mut since_best, mut plateau) = (0, 0);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..self.cfg.max_epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch: Vec<(PairRef<'_>, f64)> = chunk.iter().map(|&i| (train[i], bal.weight(train[i].label))).collect();
                match self.train_step(&batch, rng, epoch) {
                    Ok(l) => total += l * chunk.len() as f64,
                    Err(e) => {
                        (self.params, self.bn) = best;
                        return Err(e);
                    }
                }
            }
            let train_loss = total / train.len() as f64;
            let val_loss = if val.is_empty() { self.mean_pair_loss(&train)? } else { self.mean_pair_loss(&val)? };
            if !val_loss.is_finite() {
                (self.params, self.bn) = best;
                return Err(Error::TrainingDiverged { epoch });
            }
            hist.epochs.push(EpochLoss { epoch, train_loss, val_loss, lr: self.opt.lr });
            self.epochs_trained += 1;
            if val_loss < hist.best_val_loss - self.cfg.min_delta {
                hist.best_val_loss = val_loss;
                hist.best_epoch = epoch;
                best = (self.params.clone(), self.bn.clone());
                since_best = 0;
                plateau = 0;
            } else {
                since_best += 1;
                plateau += 1;
                if plateau >= self.cfg.lr_plateau_patience {
                    self.opt.lr *= self.cfg.lr_decay;
                    plateau = 0;
                }
                if since_best >= self.cfg.early_stopping_patience {
                    hist.stopped_early = true;
                    break;
                }
            }
        }
        (self.params, self.bn) = best;
        self.trained = true;
        Ok(hist)
    }

    /// Exactly `k` optimizer steps on batches sampled from `buffer` plus
    /// `fresh` (both swap-augmented), with fresh comparisons sampled
    /// `finetune_new_weight` times as often and classes balanced. `buffer` is
    /// the dataset before `fresh` was added. Returns the per-step batch losses.
    pub fn finetune<R: Rng + ?Sized>(
        &mut self,
        buffer: &PreferenceDataset,
        fresh: &[PreferenceTriplet],
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::InvalidParams("reward predictor must be trained before fine-tuning".into()));
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let old = with_swaps(buffer.originals().map(PairRef::of));
        let new = with_swaps(fresh.iter().filter(|t| t.origin != Origin::Augmented).map(PairRef::of));
        let mut counts = [0; 3];
        for p in old.iter().chain(&new) {
            counts[p.label.class_index()] += 1;
        }
        let bal = balance_counts(counts);
        let pool: Vec<(PairRef<'_>, f64)> = old
            .iter()
            .map(|p| (*p, bal.weight(p.label)))
            .chain(new.iter().map(|p| (*p, self.cfg.finetune_new_weight * bal.weight(p.label))))
            .collect();
        let dist = WeightedIndex::new(pool.iter().map(|(_, w)| *w))
            .map_err(|_| Error::InvalidParams("fine-tuning buffer is empty".into()))?;
        let mut losses = Vec::with_capacity(k);
        for _ in 0..k {
            let batch: Vec<(PairRef<'_>, f64)> =
                (0..self.cfg.batch_size).map(|_| (pool[dist.sample(rng)].0, 1.0)).collect();
            losses.push(self.train_step(&batch, rng, self.epochs_trained)?);
        }
        Ok(losses)
    }
}

/// Trains a fresh predictor on `ds`.
pub fn train_reward<R: Rng + ?Sized>(
    ds: &PreferenceDataset,
    cfg: &RewardNetConfig,
    rng: &mut R,
) -> Result<(RewardPredictor, LossHistory)> {
    let shape = ds
        .triplets
        .first()
        .map(|t| t.obs_a.shape)
        .ok_or_else(|| Error::InvalidParams("preference dataset is empty".into()))?;
    let mut net = RewardPredictor::new(cfg, shape, rng)?;
    let hist = net.fit(ds, rng)?;
    Ok((net, hist))
}
