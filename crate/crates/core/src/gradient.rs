//! Parameter updates for a GBRBM block: the plain contrastive-divergence
//! gradient, its covariance-corrected ("enhanced") form, hidden bit-flip
//! reparameterizations, and learning-rate selection by an importance-sampled
//! likelihood estimate.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{check_dim, Error, Result};
use crate::math::log_sum_exp;
use crate::rbm::{GbrbmParams, SufficientStats};

/// Gradient (or update direction) for `(W, b, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTriple {
    pub d_weights: Array2<f64>,
    pub d_visible_bias: Array1<f64>,
    pub d_hidden_bias: Array1<f64>,
}

impl GradientTriple {
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        Self {
            d_weights: Array2::zeros((n_visible, n_hidden)),
            d_visible_bias: Array1::zeros(n_visible),
            d_hidden_bias: Array1::zeros(n_hidden),
        }
    }

    pub fn check_matches(&self, params: &GbrbmParams) -> Result<()> {
        check_dim("gradient rows", params.n_visible(), self.d_weights.nrows())?;
        check_dim(
            "gradient columns",
            params.n_hidden(),
            self.d_weights.ncols(),
        )?;
        check_dim(
            "visible bias gradient",
            params.n_visible(),
            self.d_visible_bias.len(),
        )?;
        check_dim(
            "hidden bias gradient",
            params.n_hidden(),
            self.d_hidden_bias.len(),
        )
    }

    /// All entries as one vector: weights row-major, then `b`, then `c`.
    pub fn flatten(&self) -> Vec<f64> {
        self.d_weights
            .iter()
            .chain(self.d_visible_bias.iter())
            .chain(self.d_hidden_bias.iter())
            .copied()
            .collect()
    }
}

/// Which units are relabeled `x → 1 - x`.
///
/// Gaussian visible units cannot be flipped; [`flip_transform`] rejects a mask
/// that sets any visible entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlipMask {
    pub visible: Vec<bool>,
    pub hidden: Vec<bool>,
}

impl FlipMask {
    /// A mask over hidden units only.
    pub fn hidden(n_visible: usize, hidden: Vec<bool>) -> Self {
        Self {
            visible: vec![false; n_visible],
            hidden,
        }
    }
}

/// Step size and the relative spread `ε` of the candidate set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRateState {
    pub current: f64,
    pub epsilon: f64,
}

impl LearningRateState {
    pub const DEFAULT_EPSILON: f64 = 0.1;

    pub fn new(current: f64, epsilon: f64) -> Result<Self> {
        if !(current.is_finite() && current > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate {current} must be positive"
            )));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::InvalidParameter(format!(
                "epsilon {epsilon} must lie in [0, 1)"
            )));
        }
        Ok(Self { current, epsilon })
    }

    /// `{(1+ε)², (1+ε), 1, (1-ε), (1-ε)²} · η`, largest first.
    pub fn candidates(&self) -> [f64; 5] {
        let up = 1.0 + self.epsilon;
        let down = 1.0 - self.epsilon;
        [up * up, up, 1.0, down, down * down].map(|m| m * self.current)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Data,
    Model,
}

/// Plain CD gradient: data moments minus model moments.
pub fn cd_gradient(stats: &SufficientStats, params: &GbrbmParams) -> Result<GradientTriple> {
    check_dim("stats visible size", params.n_visible(), stats.n_visible())?;
    check_dim("stats hidden size", params.n_hidden(), stats.n_hidden())?;
    Ok(GradientTriple {
        d_weights: &stats.data_vh - &stats.model_vh,
        d_visible_bias: &stats.data_v - &stats.model_v,
        d_hidden_bias: &stats.data_h - &stats.model_h,
    })
}

/// `⟨v h⟩ - ⟨v⟩⟨h⟩` under one side of the statistics.
pub fn covariance(stats: &SufficientStats, side: Side) -> Array2<f64> {
    let (vh, v, h) = match side {
        Side::Data => (&stats.data_vh, &stats.data_v, &stats.data_h),
        Side::Model => (&stats.model_vh, &stats.model_v, &stats.model_h),
    };
    let outer = v
        .view()
        .insert_axis(Axis(1))
        .dot(&h.view().insert_axis(Axis(0)));
    vh - &outer
}

/// Parameters of the equivalent model after flipping the masked hidden units.
/// Applying it twice with the same mask is the identity.
pub fn flip_transform(params: &GbrbmParams, mask: &FlipMask) -> Result<GbrbmParams> {
    check_dim("visible flip mask", params.n_visible(), mask.visible.len())?;
    check_dim("hidden flip mask", params.n_hidden(), mask.hidden.len())?;
    if let Some(i) = mask.visible.iter().position(|&f| f) {
        return Err(Error::GaussianVisibleFlip(i));
    }
    let mut out = params.clone();
    for (j, _) in mask.hidden.iter().enumerate().filter(|(_, &g)| g) {
        out.visible_bias += &params.weights.column(j);
        out.weights.column_mut(j).mapv_inplace(|w| -w);
        out.hidden_bias[j] = -params.hidden_bias[j];
    }
    Ok(out)
}

/// Enhanced gradient: the weight direction is the covariance difference and
/// the bias directions remove the part explained by the averaged means
/// `⟨·⟩_dm = (⟨·⟩_d + ⟨·⟩_m) / 2`.
pub fn enhanced_gradient(
    stats: &SufficientStats,
    plain: &GradientTriple,
) -> Result<GradientTriple> {
    let (n_v, n_h) = (stats.n_visible(), stats.n_hidden());
    check_dim("plain gradient rows", n_v, plain.d_weights.nrows())?;
    check_dim("plain gradient columns", n_h, plain.d_weights.ncols())?;
    check_dim(
        "plain visible bias gradient",
        n_v,
        plain.d_visible_bias.len(),
    )?;
    check_dim("plain hidden bias gradient", n_h, plain.d_hidden_bias.len())?;

    let d_weights = covariance(stats, Side::Data) - covariance(stats, Side::Model);
    let mean_v = (&stats.data_v + &stats.model_v) * 0.5;
    let mean_h = (&stats.data_h + &stats.model_h) * 0.5;
    let d_visible_bias = &plain.d_visible_bias - &d_weights.dot(&mean_h);
    let d_hidden_bias = &plain.d_hidden_bias - &d_weights.t().dot(&mean_v);
    Ok(GradientTriple {
        d_weights,
        d_visible_bias,
        d_hidden_bias,
    })
}

/// `θ + η · grad` without a finiteness check.
fn step(params: &GbrbmParams, grad: &GradientTriple, eta: f64) -> GbrbmParams {
    let mut out = params.clone();
    out.weights.scaled_add(eta, &grad.d_weights);
    out.visible_bias.scaled_add(eta, &grad.d_visible_bias);
    out.hidden_bias.scaled_add(eta, &grad.d_hidden_bias);
    out
}

/// `θ' = θ + η · grad`; `σ` is carried over unchanged.
pub fn apply_update(params: &GbrbmParams, grad: &GradientTriple, eta: f64) -> Result<GbrbmParams> {
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "learning rate {eta} must be non-negative"
        )));
    }
    grad.check_matches(params)?;
    let out = step(params, grad, eta);
    if !out.is_finite() {
        return Err(Error::Divergence(format!(
            "update with learning rate {eta} produced non-finite parameters"
        )));
    }
    Ok(out)
}

/// Importance-sampled estimate of the summed log-likelihood of `batch` under
/// `candidate`, up to a constant shared by every candidate.
///
/// `Z_candidate / Z_current` is estimated by averaging
/// `exp(F_current(v_m) - F_candidate(v_m))` over the model samples.
pub fn likelihood_score(
    current_free_energy_of_samples: &Array1<f64>,
    candidate: &GbrbmParams,
    batch: ArrayView2<f64>,
    model_samples: ArrayView2<f64>,
) -> f64 {
    let data_term: f64 = -candidate.free_energy_batch(batch).sum();
    let candidate_free = candidate.free_energy_batch(model_samples);
    let log_ratios: Vec<f64> = current_free_energy_of_samples
        .iter()
        .zip(candidate_free.iter())
        .map(|(f0, f1)| f0 - f1)
        .collect();
    let m = log_ratios.len() as f64;
    let log_z_ratio = log_sum_exp(&log_ratios) - m.ln();
    let score = data_term - batch.nrows() as f64 * log_z_ratio;
    if score.is_nan() {
        f64::NEG_INFINITY
    } else {
        score
    }
}

/// Picks the candidate step size that maximizes the estimated likelihood of
/// `batch` after the update. Ties resolve to the earliest candidate.
pub fn adaptive_lr_select(
    params: &GbrbmParams,
    grad: &GradientTriple,
    batch: ArrayView2<f64>,
    model_samples: ArrayView2<f64>,
    lr: LearningRateState,
) -> Result<(f64, LearningRateState)> {
    if model_samples.nrows() == 0 {
        return Err(Error::Empty("model samples"));
    }
    if batch.nrows() == 0 {
        return Err(Error::Empty("batch"));
    }
    check_dim("batch columns", params.n_visible(), batch.ncols())?;
    check_dim(
        "model sample columns",
        params.n_visible(),
        model_samples.ncols(),
    )?;
    grad.check_matches(params)?;

    let current_free = params.free_energy_batch(model_samples);
    let candidates = lr.candidates();
    let mut best = (candidates[0], f64::NEG_INFINITY);
    for (k, &eta) in candidates.iter().enumerate() {
        let candidate = step(params, grad, eta);
        let score = likelihood_score(&current_free, &candidate, batch, model_samples);
        if k == 0 || score > best.1 {
            best = (eta, score);
        }
    }
    let chosen = best.0;
    Ok((
        chosen,
        LearningRateState {
            current: chosen,
            epsilon: lr.epsilon,
        },
    ))
}
