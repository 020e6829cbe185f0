//! Greedy layer-wise pre-training of a GBRBM stack.
//!
//! Block 1 is trained on the standardized features; block `t > 1` is trained
//! on the mean-field hidden activations of block `t - 1`. Every block keeps the
//! Gaussian-Bernoulli form; the visible `σ` of upper blocks is set by
//! [`UpperSigma`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::gradient::{
    adaptive_lr_select, apply_update, cd_gradient, enhanced_gradient, LearningRateState,
};
use crate::rbm::{cd_chain, gibbs_step, GbrbmParams};
use crate::rng;

/// Hidden sizes of the default five-block stack.
pub const DEFAULT_HIDDEN_SIZES: [usize; 5] = [64, 56, 48, 32, 16];

/// Early-stopping rule: stop once the epoch error has improved by less than
/// `tolerance` for `patience` consecutive epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convergence {
    pub tolerance: f64,
    pub patience: usize,
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            tolerance: 1e-5,
            patience: 10,
        }
    }
}

/// Tracks consecutive small improvements of a per-epoch error.
#[derive(Debug, Clone)]
pub(crate) struct ConvergenceMonitor {
    rule: Option<Convergence>,
    previous: Option<f64>,
    stalled: usize,
}

impl ConvergenceMonitor {
    pub(crate) fn new(rule: Option<Convergence>) -> Self {
        Self {
            rule,
            previous: None,
            stalled: 0,
        }
    }

    /// Records an epoch error; returns `true` when training should stop.
    pub(crate) fn observe(&mut self, error: f64) -> bool {
        let Some(rule) = self.rule else {
            return false;
        };
        if let Some(prev) = self.previous {
            if prev - error < rule.tolerance {
                self.stalled += 1;
            } else {
                self.stalled = 0;
            }
        }
        self.previous = Some(error);
        self.stalled >= rule.patience
    }
}

/// Fixed visible `σ` of blocks above the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpperSigma {
    /// `σ = 1` on every input unit.
    Unit,
    /// `σ` equal to the standard deviation of each input unit over the
    /// training activations. The block is trained with unit `σ` on the
    /// standardized input and then rewritten in the input's own scale.
    InputStd,
}

/// Lower bound on a data-derived `σ`.
pub const UPPER_SIGMA_FLOOR: f64 = 1e-3;

/// Samples used to estimate the partition-function ratio when adapting the
/// learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSupport {
    /// The minibatch's own CD reconstructions.
    Reconstructions,
    /// Fantasy chains carried across minibatches, advanced one Gibbs sweep per
    /// update. They are used only for step-size selection.
    PersistentChains,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Gibbs sweeps per contrastive-divergence estimate.
    pub cd_steps: usize,
    pub minibatch_size: usize,
    pub lr: LearningRateState,
    /// Choose the step size per minibatch from the candidate set.
    pub adaptive_lr: bool,
    pub lr_support: LrSupport,
    /// Number of persistent chains for [`LrSupport::PersistentChains`].
    pub lr_chains: usize,
    pub use_enhanced_gradient: bool,
    pub upper_sigma: UpperSigma,
    /// `None` runs exactly `epochs` epochs per block.
    pub convergence: Option<Convergence>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            cd_steps: 1,
            minibatch_size: 32,
            lr: LearningRateState {
                current: 0.001,
                epsilon: LearningRateState::DEFAULT_EPSILON,
            },
            adaptive_lr: true,
            lr_support: LrSupport::PersistentChains,
            lr_chains: 32,
            use_enhanced_gradient: true,
            upper_sigma: UpperSigma::InputStd,
            convergence: None,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("epochs", self.epochs),
            ("cd_steps", self.cd_steps),
            ("minibatch_size", self.minibatch_size),
            ("lr_chains", self.lr_chains),
        ] {
            if value == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if !self.adaptive_lr && self.lr.current == 0.0 {
            return LearningRateState::new(1.0, self.lr.epsilon).map(|_| ());
        }
        LearningRateState::new(self.lr.current, self.lr.epsilon).map(|_| ())
    }
}

/// Per-epoch history of one trained block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockTrace {
    /// Mean squared mean-field reconstruction error after each epoch.
    pub reconstruction_error: Vec<f64>,
    /// Step size in effect at the end of each epoch.
    pub learning_rate: Vec<f64>,
}

/// Mean over rows of `‖v - (b + W p(h | v))‖²`.
pub fn block_reconstruction_error(data: ArrayView2<f64>, params: &GbrbmParams) -> f64 {
    let probs = params.hidden_probs_batch(data);
    let recon = params.visible_mean_batch(probs.view());
    let diff = &recon - &data;
    diff.mapv(|x| x * x).sum() / data.nrows() as f64
}

fn advance_chains(chains: Array2<f64>, params: &GbrbmParams, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out = chains;
    for mut row in out.rows_mut() {
        let step = gibbs_step(row.view(), params, rng).expect("chain width matches block");
        row.assign(&step.visible_next);
    }
    out
}

/// Trains a single block by minibatch contrastive divergence.
pub fn train_block(
    data: ArrayView2<f64>,
    init: GbrbmParams,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(GbrbmParams, BlockTrace)> {
    cfg.validate()?;
    if data.nrows() == 0 {
        return Err(Error::Empty("training data"));
    }
    check_dim("training data columns", init.n_visible(), data.ncols())?;

    let mut params = init;
    let mut lr = cfg.lr;
    let mut trace = BlockTrace::default();
    let mut monitor = ConvergenceMonitor::new(cfg.convergence);
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let mut fantasy: Option<Array2<f64>> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let batch = data.select(Axis(0), chunk);
            let pass = cd_chain(batch.view(), &params, cfg.cd_steps, rng)?;
            let plain = cd_gradient(&pass.stats, &params)?;
            let direction = if cfg.use_enhanced_gradient {
                enhanced_gradient(&pass.stats, &plain)?
            } else {
                plain
            };
            let eta = if cfg.adaptive_lr {
                let support = match cfg.lr_support {
                    LrSupport::Reconstructions => pass.model_visible.clone(),
                    LrSupport::PersistentChains => {
                        let chains = match fantasy.take() {
                            Some(chains) => advance_chains(chains, &params, rng),
                            None => {
                                let rows: Vec<usize> = (0..cfg.lr_chains)
                                    .map(|_| rng.random_range(0..data.nrows()))
                                    .collect();
                                advance_chains(data.select(Axis(0), &rows), &params, rng)
                            }
                        };
                        fantasy = Some(chains.clone());
                        chains
                    }
                };
                let (eta, next) =
                    adaptive_lr_select(&params, &direction, batch.view(), support.view(), lr)?;
                lr = next;
                eta
            } else {
                lr.current
            };
            params = apply_update(&params, &direction, eta).map_err(|e| match e {
                Error::Divergence(msg) => Error::Divergence(format!("epoch {}: {msg}", epoch + 1)),
                other => other,
            })?;
        }
        let error = block_reconstruction_error(data, &params);
        trace.reconstruction_error.push(error);
        trace.learning_rate.push(lr.current);
        if monitor.observe(error) {
            break;
        }
    }
    Ok((params, trace))
}

/// Ordered GBRBM blocks whose hidden size feeds the next block's visible size.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    blocks: Vec<GbrbmParams>,
}

impl LayerStack {
    pub fn new(blocks: Vec<GbrbmParams>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Empty("layer stack"));
        }
        for block in &blocks {
            block.validate()?;
        }
        for pair in blocks.windows(2) {
            check_dim(
                "stacked block visible size",
                pair[0].n_hidden(),
                pair[1].n_visible(),
            )?;
        }
        Ok(Self { blocks })
    }

    /// Blocks with fresh `N(0, 0.01²)` weights and zero biases.
    pub fn random_init(input_dim: usize, hidden_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(input_dim, hidden_sizes)?;
        let mut n_visible = input_dim;
        let blocks = hidden_sizes
            .iter()
            .enumerate()
            .map(|(t, &n_hidden)| {
                let mut block_rng = rng::stream(seed, t as u64);
                let block = GbrbmParams::random_init(n_visible, n_hidden, &mut block_rng);
                n_visible = n_hidden;
                block
            })
            .collect();
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[GbrbmParams] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Input dimension followed by every hidden size.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.blocks[0].n_visible())
            .chain(self.blocks.iter().map(GbrbmParams::n_hidden))
            .collect()
    }

    /// Mean-field activations after blocks `1..=through` for every row.
    pub fn propagate_up_batch(&self, data: ArrayView2<f64>, through: usize) -> Result<Array2<f64>> {
        if through == 0 || through > self.blocks.len() {
            return Err(Error::InvalidParameter(format!(
                "block index {through} outside 1..={}",
                self.blocks.len()
            )));
        }
        check_dim("input columns", self.blocks[0].n_visible(), data.ncols())?;
        let mut act = self.blocks[0].hidden_probs_batch(data);
        for block in &self.blocks[1..through] {
            act = block.hidden_probs_batch(act.view());
        }
        Ok(act)
    }

    /// Up through every block with mean-field hiddens, then back down through
    /// the conditional visible means; mean squared error per row.
    pub fn reconstruction_error(&self, data: ArrayView2<f64>) -> Result<f64> {
        if data.nrows() == 0 {
            return Err(Error::Empty("data"));
        }
        let mut act = self.propagate_up_batch(data, self.blocks.len())?;
        for block in self.blocks.iter().rev() {
            act = block.visible_mean_batch(act.view());
        }
        let diff = &act - &data;
        Ok(diff.mapv(|x| x * x).sum() / data.nrows() as f64)
    }
}

fn validate_sizes(input_dim: usize, hidden_sizes: &[usize]) -> Result<()> {
    if hidden_sizes.is_empty() {
        return Err(Error::InvalidParameter(
            "at least one hidden size is required".into(),
        ));
    }
    if input_dim == 0 || hidden_sizes.contains(&0) {
        return Err(Error::InvalidParameter(
            "layer sizes must be positive".into(),
        ));
    }
    Ok(())
}

/// `propagate_up` for a single input vector.
pub fn propagate_up(v: ArrayView1<f64>, stack: &LayerStack, through: usize) -> Result<Array1<f64>> {
    let row = v.insert_axis(Axis(0));
    Ok(stack.propagate_up_batch(row, through)?.row(0).to_owned())
}

/// Per-unit affine map `z = (a − μ)/s` applied to an upper block's input.
struct InputScale {
    mean: Array1<f64>,
    stdev: Array1<f64>,
}

impl InputScale {
    fn fit(input: ArrayView2<f64>) -> Self {
        Self {
            mean: input.mean_axis(Axis(0)).expect("nonempty input"),
            stdev: input
                .std_axis(Axis(0), 0.0)
                .mapv(|s| s.max(UPPER_SIGMA_FLOOR)),
        }
    }

    fn standardize(&self, input: ArrayView2<f64>) -> Array2<f64> {
        (&input - &self.mean) / &self.stdev
    }

    /// Unit-σ block over `z` rewritten as the identical model over `a` with `σ = s`.
    fn fold(&self, block: &GbrbmParams) -> GbrbmParams {
        let s = self.stdev.view().insert_axis(Axis(1));
        GbrbmParams {
            weights: &block.weights * &s,
            visible_bias: &self.mean + &(&block.visible_bias * &self.stdev),
            hidden_bias: &block.hidden_bias - &block.weights.t().dot(&(&self.mean / &self.stdev)),
            sigma: self.stdev.clone(),
        }
    }
}

/// Result of [`pretrain_stack`].
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub stack: LayerStack,
    pub traces: Vec<BlockTrace>,
}

/// Trains blocks greedily from the bottom up. Block `t` draws from its own
/// random stream derived from `cfg.seed`, so the result depends only on the
/// data, the sizes, and the config.
pub fn pretrain_stack(
    data: ArrayView2<f64>,
    hidden_sizes: &[usize],
    cfg: &PretrainConfig,
) -> Result<Pretrained> {
    cfg.validate()?;
    validate_sizes(data.ncols(), hidden_sizes)?;
    if data.nrows() == 0 {
        return Err(Error::Empty("training data"));
    }
    let init = LayerStack::random_init(data.ncols(), hidden_sizes, cfg.seed)?;
    let mut blocks = Vec::with_capacity(hidden_sizes.len());
    let mut traces = Vec::with_capacity(hidden_sizes.len());
    let mut input = data.to_owned();
    for (t, block) in init.blocks.into_iter().enumerate() {
        let mut block_rng = rng::stream(cfg.seed, 1000 + t as u64);
        let rescale = (t > 0 && cfg.upper_sigma == UpperSigma::InputStd)
            .then(|| InputScale::fit(input.view()));
        let block_input = match &rescale {
            Some(scale) => scale.standardize(input.view()),
            None => input.clone(),
        };
        let (trained, trace) = train_block(block_input.view(), block, cfg, &mut block_rng)
            .map_err(|e| match e {
                Error::Divergence(msg) => Error::Divergence(format!("block {}: {msg}", t + 1)),
                other => other,
            })?;
        let trained = match &rescale {
            Some(scale) => scale.fold(&trained),
            None => trained,
        };
        input = trained.hidden_probs_batch(input.view());
        log::debug!(
            "block {} trained: final reconstruction error {:?}",
            t + 1,
            trace.reconstruction_error.last()
        );
        blocks.push(trained);
        traces.push(trace);
    }
    Ok(Pretrained {
        stack: LayerStack::new(blocks)?,
        traces,
    })
}
