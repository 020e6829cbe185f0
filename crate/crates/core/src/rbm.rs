//! Gaussian-Bernoulli restricted Boltzmann machine.
//!
//! Energy of a joint configuration, with real visibles `v` and binary hiddens `h`:
//!
//! ```text
//! E(v, h) = Σ_i (v_i - b_i)² / (2σ_i²) - Σ_ij W_ij h_j v_i / σ_i² - Σ_j c_j h_j
//! ```
//!
//! The coupling divides by `σ_i²` so that `p(v | h)` is `N(b + W h, σ²)` and
//! `p(h_j = 1 | v) = sigmoid(c_j + Σ_i W_ij v_i / σ_i²)` hold exactly.
//!
//! Small models (`n_hidden ≤ 20`) admit exact likelihoods: for each hidden
//! configuration the visible integral is Gaussian, so the partition function is a
//! finite log-sum-exp. [`HiddenEnumeration`] exposes that computation and backs
//! [`exact_log_likelihood`] and [`exact_gradient`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::gradient::GradientTriple;
use crate::math::{log_sum_exp, sigmoid, softplus};

/// Largest hidden layer the exact enumeration routines accept.
pub const ENUMERATION_MAX_HIDDEN: usize = 20;

/// Standard deviation of the zero-mean Gaussian used for fresh weights.
pub const INIT_WEIGHT_STD: f64 = 0.01;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Parameters of one GBRBM block. `weights` is `n_visible × n_hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct GbrbmParams {
    pub weights: Array2<f64>,
    pub visible_bias: Array1<f64>,
    pub hidden_bias: Array1<f64>,
    /// Per-visible standard deviations. Fixed during training.
    pub sigma: Array1<f64>,
}

impl GbrbmParams {
    pub fn new(
        weights: Array2<f64>,
        visible_bias: Array1<f64>,
        hidden_bias: Array1<f64>,
        sigma: Array1<f64>,
    ) -> Result<Self> {
        let params = Self {
            weights,
            visible_bias,
            hidden_bias,
            sigma,
        };
        params.validate()?;
        Ok(params)
    }

    /// All-zero weights and biases, unit `σ`.
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            weights: Array2::zeros((n_visible, n_hidden)),
            visible_bias: Array1::zeros(n_visible),
            hidden_bias: Array1::zeros(n_hidden),
            sigma: Array1::ones(n_visible),
        }
    }

    /// Weights from `N(0, 0.01²)`, zero biases, unit `σ`.
    pub fn random_init(n_visible: usize, n_hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, INIT_WEIGHT_STD).expect("valid normal");
        let mut params = Self::zeros(n_visible, n_hidden);
        params
            .weights
            .iter_mut()
            .for_each(|w| *w = normal.sample(rng));
        params
    }

    pub fn n_visible(&self) -> usize {
        self.visible_bias.len()
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden_bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = self.weights.dim();
        check_dim("visible bias length", rows, self.visible_bias.len())?;
        check_dim("sigma length", rows, self.sigma.len())?;
        check_dim("hidden bias length", cols, self.hidden_bias.len())?;
        if let Some((i, s)) = self
            .sigma
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.is_finite() && **s > 0.0))
        {
            return Err(Error::InvalidParameter(format!(
                "sigma[{i}] = {s} must be positive and finite"
            )));
        }
        if !self.is_finite() {
            return Err(Error::InvalidParameter(
                "non-finite weight or bias".to_string(),
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|x| x.is_finite())
            && self.visible_bias.iter().all(|x| x.is_finite())
            && self.hidden_bias.iter().all(|x| x.is_finite())
    }

    /// `1 / σ_i²`.
    pub fn precision(&self) -> Array1<f64> {
        self.sigma.mapv(|s| 1.0 / (s * s))
    }

    /// Rows of `batch` divided elementwise by `σ²`.
    pub fn scale_visible_batch(&self, batch: ArrayView2<f64>) -> Array2<f64> {
        let precision = self.precision();
        let mut scaled = batch.to_owned();
        scaled
            .axis_iter_mut(Axis(0))
            .for_each(|mut row| row *= &precision);
        scaled
    }

    /// `c + Wᵀ (v / σ²)` for every row.
    pub fn hidden_input_batch(&self, batch: ArrayView2<f64>) -> Array2<f64> {
        let mut z = self.scale_visible_batch(batch).dot(&self.weights);
        z.axis_iter_mut(Axis(0))
            .for_each(|mut row| row += &self.hidden_bias);
        z
    }

    /// Mean-field hidden activations `p(h = 1 | v)` for every row.
    pub fn hidden_probs_batch(&self, batch: ArrayView2<f64>) -> Array2<f64> {
        self.hidden_input_batch(batch).mapv_into(sigmoid)
    }

    /// Conditional visible means `b + W h` for every row of `hidden`.
    pub fn visible_mean_batch(&self, hidden: ArrayView2<f64>) -> Array2<f64> {
        let mut mean = hidden.dot(&self.weights.t());
        mean.axis_iter_mut(Axis(0))
            .for_each(|mut row| row += &self.visible_bias);
        mean
    }

    /// Free energy of every row.
    pub fn free_energy_batch(&self, batch: ArrayView2<f64>) -> Array1<f64> {
        let z = self.hidden_input_batch(batch);
        let precision = self.precision();
        let mut out = Array1::zeros(batch.nrows());
        Zip::from(&mut out)
            .and(batch.rows())
            .and(z.rows())
            .for_each(|f, v, zr| {
                let quad: f64 = v
                    .iter()
                    .zip(self.visible_bias.iter())
                    .zip(precision.iter())
                    .map(|((&vi, &bi), &p)| 0.5 * (vi - bi) * (vi - bi) * p)
                    .sum();
                let soft: f64 = zr.iter().map(|&x| softplus(x)).sum();
                *f = quad - soft;
            });
        out
    }

    fn check_visible(&self, len: usize) -> Result<()> {
        check_dim("visible vector", self.n_visible(), len)
    }

    fn check_hidden(&self, len: usize) -> Result<()> {
        check_dim("hidden vector", self.n_hidden(), len)
    }
}

/// A joint configuration `(v, h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleState {
    pub visible: Array1<f64>,
    pub hidden: Array1<f64>,
}

/// Data-side and model-side moments of one minibatch.
///
/// Visible moments are taken over the precision-weighted visibles `v_i / σ_i²`,
/// the statistic the energy couples to `W` and `b`. With unit `σ` they are the
/// raw moments.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub data_vh: Array2<f64>,
    pub model_vh: Array2<f64>,
    pub data_v: Array1<f64>,
    pub model_v: Array1<f64>,
    pub data_h: Array1<f64>,
    pub model_h: Array1<f64>,
    pub batch_size: usize,
}

impl SufficientStats {
    /// Moments of paired `(scaled visible, hidden)` rows, used for one side.
    pub(crate) fn moments(
        scaled_visible: ArrayView2<f64>,
        hidden: ArrayView2<f64>,
    ) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let n = scaled_visible.nrows() as f64;
        let vh = scaled_visible.t().dot(&hidden) / n;
        let v = scaled_visible.sum_axis(Axis(0)) / n;
        let h = hidden.sum_axis(Axis(0)) / n;
        (vh, v, h)
    }

    /// Statistics whose model side equals the data side. The resulting
    /// gradient is exactly zero.
    pub fn data_only(batch: ArrayView2<f64>, params: &GbrbmParams) -> Result<Self> {
        if batch.nrows() == 0 {
            return Err(Error::Empty("batch"));
        }
        check_dim("batch columns", params.n_visible(), batch.ncols())?;
        let x = params.scale_visible_batch(batch);
        let p = params.hidden_probs_batch(batch);
        let (vh, v, h) = Self::moments(x.view(), p.view());
        Ok(Self {
            model_vh: vh.clone(),
            model_v: v.clone(),
            model_h: h.clone(),
            data_vh: vh,
            data_v: v,
            data_h: h,
            batch_size: batch.nrows(),
        })
    }

    pub fn n_visible(&self) -> usize {
        self.data_v.len()
    }

    pub fn n_hidden(&self) -> usize {
        self.data_h.len()
    }

    /// Statistics of the same samples after relabeling hidden unit `j` as
    /// `1 - h_j` wherever `mask[j]` is set.
    pub fn flip_hidden(&self, mask: &[bool]) -> Result<Self> {
        check_dim("hidden flip mask", self.n_hidden(), mask.len())?;
        let mut out = self.clone();
        for (j, _) in mask.iter().enumerate().filter(|(_, &g)| g) {
            out.data_h[j] = 1.0 - self.data_h[j];
            out.model_h[j] = 1.0 - self.model_h[j];
            for i in 0..self.n_visible() {
                out.data_vh[[i, j]] = self.data_v[i] - self.data_vh[[i, j]];
                out.model_vh[[i, j]] = self.model_v[i] - self.model_vh[[i, j]];
            }
        }
        Ok(out)
    }
}

fn check_binary(h: ArrayView1<f64>) -> Result<()> {
    match h.iter().enumerate().find(|(_, &x)| x != 0.0 && x != 1.0) {
        Some((j, &x)) => Err(Error::NonBinaryHidden(x, j)),
        None => Ok(()),
    }
}

/// `E(v, h)`; the hidden part of `state` must be binary.
pub fn energy(state: &SampleState, params: &GbrbmParams) -> Result<f64> {
    params.check_visible(state.visible.len())?;
    params.check_hidden(state.hidden.len())?;
    check_binary(state.hidden.view())?;
    Ok(energy_unchecked(
        state.visible.view(),
        state.hidden.view(),
        params,
    ))
}

fn energy_unchecked(v: ArrayView1<f64>, h: ArrayView1<f64>, params: &GbrbmParams) -> f64 {
    let mut quad = 0.0;
    let mut coupling = 0.0;
    for i in 0..params.n_visible() {
        let s2 = params.sigma[i] * params.sigma[i];
        let d = v[i] - params.visible_bias[i];
        quad += d * d / (2.0 * s2);
        let wh: f64 = params.weights.row(i).dot(&h);
        coupling += wh * v[i] / s2;
    }
    quad - coupling - params.hidden_bias.dot(&h)
}

/// `F(v) = -ln Σ_h e^{-E(v,h)}`.
pub fn free_energy(v: ArrayView1<f64>, params: &GbrbmParams) -> Result<f64> {
    params.check_visible(v.len())?;
    let row = v.insert_axis(Axis(0));
    Ok(params.free_energy_batch(row)[0])
}

/// `p(h_j = 1 | v)` for every hidden unit.
pub fn hidden_conditional(v: ArrayView1<f64>, params: &GbrbmParams) -> Result<Array1<f64>> {
    params.check_visible(v.len())?;
    let row = v.insert_axis(Axis(0));
    Ok(params.hidden_probs_batch(row).row(0).to_owned())
}

/// Mean and variance of the Gaussian `p(v | h)`.
pub fn visible_conditional(
    h: ArrayView1<f64>,
    params: &GbrbmParams,
) -> Result<(Array1<f64>, Array1<f64>)> {
    params.check_hidden(h.len())?;
    check_binary(h)?;
    let mean = &params.visible_bias + &params.weights.dot(&h);
    let variance = params.sigma.mapv(|s| s * s);
    Ok((mean, variance))
}

/// Output of one block-Gibbs sweep `v → h → v'`.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsStep {
    pub hidden_sample: Array1<f64>,
    pub visible_next: Array1<f64>,
    pub hidden_prob: Array1<f64>,
}

fn bernoulli_in_place(probs: &mut Array2<f64>, rng: &mut ChaCha8Rng) {
    probs.iter_mut().for_each(|p| {
        let u: f64 = rng.random();
        *p = if u < *p { 1.0 } else { 0.0 };
    });
}

fn gaussian_in_place(mean: &mut Array2<f64>, sigma: &Array1<f64>, rng: &mut ChaCha8Rng) {
    for mut row in mean.rows_mut() {
        for (m, s) in row.iter_mut().zip(sigma.iter()) {
            let z: f64 = StandardNormal.sample(rng);
            *m += s * z;
        }
    }
}

/// One Gibbs sweep from `v`. Consumes `n_hidden + n_visible` draws from `rng`.
pub fn gibbs_step(
    v: ArrayView1<f64>,
    params: &GbrbmParams,
    rng: &mut ChaCha8Rng,
) -> Result<GibbsStep> {
    params.check_visible(v.len())?;
    let probs = params.hidden_probs_batch(v.insert_axis(Axis(0)));
    let mut sample = probs.clone();
    bernoulli_in_place(&mut sample, rng);
    let mut next = params.visible_mean_batch(sample.view());
    gaussian_in_place(&mut next, &params.sigma, rng);
    Ok(GibbsStep {
        hidden_sample: sample.row(0).to_owned(),
        visible_next: next.row(0).to_owned(),
        hidden_prob: probs.row(0).to_owned(),
    })
}

/// A contrastive-divergence pass over one minibatch.
#[derive(Debug, Clone)]
pub struct CdPass {
    pub stats: SufficientStats,
    /// Visible states after `k` Gibbs sweeps, one row per chain.
    pub model_visible: Array2<f64>,
    /// `p(h | model_visible)` for each chain.
    pub model_hidden: Array2<f64>,
}

/// Runs CD-`k` from every row of `batch` and collects both sides' statistics.
///
/// The data side pairs each row with its mean-field hidden probabilities. The
/// model side pairs the `k`-step reconstruction with its hidden probabilities.
pub fn cd_chain(
    batch: ArrayView2<f64>,
    params: &GbrbmParams,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CdPass> {
    if batch.nrows() == 0 {
        return Err(Error::Empty("batch"));
    }
    if k == 0 {
        return Err(Error::InvalidParameter(
            "contrastive divergence needs k >= 1".into(),
        ));
    }
    params.check_visible(batch.ncols())?;

    let data_x = params.scale_visible_batch(batch);
    let data_p = params.hidden_probs_batch(batch);
    let (data_vh, data_v, data_h) = SufficientStats::moments(data_x.view(), data_p.view());

    let mut hidden = data_p.clone();
    bernoulli_in_place(&mut hidden, rng);
    let mut visible;
    let mut probs;
    let mut step = 0;
    loop {
        visible = params.visible_mean_batch(hidden.view());
        gaussian_in_place(&mut visible, &params.sigma, rng);
        probs = params.hidden_probs_batch(visible.view());
        step += 1;
        if step == k {
            break;
        }
        hidden = probs.clone();
        bernoulli_in_place(&mut hidden, rng);
    }

    let model_x = params.scale_visible_batch(visible.view());
    let (model_vh, model_v, model_h) = SufficientStats::moments(model_x.view(), probs.view());
    Ok(CdPass {
        stats: SufficientStats {
            data_vh,
            model_vh,
            data_v,
            model_v,
            data_h,
            model_h,
            batch_size: batch.nrows(),
        },
        model_visible: visible,
        model_hidden: probs,
    })
}

pub fn cd_stats(
    batch: ArrayView2<f64>,
    params: &GbrbmParams,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SufficientStats> {
    cd_chain(batch, params, k, rng).map(|pass| pass.stats)
}

/// Exact distribution over hidden configurations of a small model.
///
/// Configuration `s` sets `h_j = (s >> j) & 1`.
#[derive(Debug, Clone)]
pub struct HiddenEnumeration {
    n_hidden: usize,
    /// `ln ∫ e^{-E(v, h_s)} dv` for every configuration.
    log_weights: Vec<f64>,
    log_partition: f64,
}

impl HiddenEnumeration {
    pub fn new(params: &GbrbmParams) -> Result<Self> {
        params.validate()?;
        let n_hidden = params.n_hidden();
        if n_hidden > ENUMERATION_MAX_HIDDEN {
            return Err(Error::EnumerationBound {
                n_hidden,
                max: ENUMERATION_MAX_HIDDEN,
            });
        }
        let precision = params.precision();
        let gaussian_norm: f64 = params.sigma.iter().map(|s| LN_SQRT_2PI + s.ln()).sum();
        let log_weights: Vec<f64> = (0..1usize << n_hidden)
            .map(|s| {
                let h = Self::state(n_hidden, s);
                let shift = params.weights.dot(&h);
                let gain: f64 = (0..params.n_visible())
                    .map(|i| {
                        let b = params.visible_bias[i];
                        let m = b + shift[i];
                        0.5 * (m * m - b * b) * precision[i]
                    })
                    .sum();
                gain + params.hidden_bias.dot(&h) + gaussian_norm
            })
            .collect();
        let log_partition = log_sum_exp(&log_weights);
        Ok(Self {
            n_hidden,
            log_weights,
            log_partition,
        })
    }

    pub fn state(n_hidden: usize, index: usize) -> Array1<f64> {
        Array1::from_iter((0..n_hidden).map(|j| ((index >> j) & 1) as f64))
    }

    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    /// Marginal probability of every hidden configuration, indexed as in [`Self::state`].
    pub fn probabilities(&self) -> Vec<f64> {
        self.log_weights
            .iter()
            .map(|w| (w - self.log_partition).exp())
            .collect()
    }

    /// `P(h_j = 1)` under the model.
    pub fn hidden_marginals(&self) -> Array1<f64> {
        let mut out = Array1::zeros(self.n_hidden);
        for (s, p) in self.probabilities().into_iter().enumerate() {
            for j in 0..self.n_hidden {
                if (s >> j) & 1 == 1 {
                    out[j] += p;
                }
            }
        }
        out
    }

    /// Independent exact draws of `v` from the model: `h` from its marginal,
    /// then `v | h`.
    pub fn sample_visible(
        &self,
        params: &GbrbmParams,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Array2<f64> {
        let cumulative: Vec<f64> = self
            .probabilities()
            .into_iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        let last = cumulative.len() - 1;
        let mut hidden = Array2::zeros((n, self.n_hidden));
        for mut row in hidden.rows_mut() {
            let u: f64 = rng.random::<f64>() * cumulative[last];
            let s = cumulative.partition_point(|&c| c <= u).min(last);
            row.assign(&Self::state(self.n_hidden, s));
        }
        let mut visible = params.visible_mean_batch(hidden.view());
        gaussian_in_place(&mut visible, &params.sigma, rng);
        visible
    }

    /// Model expectations `(⟨v h / σ²⟩, ⟨v / σ²⟩, ⟨h⟩)`.
    pub fn model_moments(&self, params: &GbrbmParams) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let n_v = params.n_visible();
        let precision = params.precision();
        let mut vh = Array2::zeros((n_v, self.n_hidden));
        let mut v = Array1::zeros(n_v);
        let mut h = Array1::zeros(self.n_hidden);
        for (s, p) in self.probabilities().into_iter().enumerate() {
            let state = Self::state(self.n_hidden, s);
            let mean = &params.visible_bias + &params.weights.dot(&state);
            let x = &mean * &precision;
            v.scaled_add(p, &x);
            h.scaled_add(p, &state);
            for j in (0..self.n_hidden).filter(|&j| state[j] == 1.0) {
                vh.column_mut(j).scaled_add(p, &x);
            }
        }
        (vh, v, h)
    }
}

/// Mean of `ln P(v)` over the rows of `data`, computed exactly.
pub fn exact_log_likelihood(data: ArrayView2<f64>, params: &GbrbmParams) -> Result<f64> {
    if data.nrows() == 0 {
        return Err(Error::Empty("data"));
    }
    params.check_visible(data.ncols())?;
    let enumeration = HiddenEnumeration::new(params)?;
    let free = params.free_energy_batch(data);
    Ok(-free.mean().expect("nonempty") - enumeration.log_partition())
}

/// Exact gradient of [`exact_log_likelihood`] with respect to `(W, b, c)`.
pub fn exact_gradient(data: ArrayView2<f64>, params: &GbrbmParams) -> Result<GradientTriple> {
    if data.nrows() == 0 {
        return Err(Error::Empty("data"));
    }
    params.check_visible(data.ncols())?;
    let enumeration = HiddenEnumeration::new(params)?;
    let x = params.scale_visible_batch(data);
    let p = params.hidden_probs_batch(data);
    let (data_vh, data_v, data_h) = SufficientStats::moments(x.view(), p.view());
    let (model_vh, model_v, model_h) = enumeration.model_moments(params);
    Ok(GradientTriple {
        d_weights: data_vh - model_vh,
        d_visible_bias: data_v - model_v,
        d_hidden_bias: data_h - model_h,
    })
}
