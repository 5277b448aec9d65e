//! Gaussian regressor over fixed-length vectors.
//!
//! Two networks share the input: one predicts the mean, the other the
//! diagonal variance through `softplus(raw) * scale^2 + floor`. Training
//! minimizes the weighted negative log-likelihood
//! `sum_k (y_k - mu_k)^2 / var_k + log var_k`, alternating between the mean
//! network (variance fixed) and the variance network (mean fixed) in blocks
//! of epochs.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpareError};
use crate::nn::{Activation, Adam, AdamParams, Dense, Mlp};
use crate::seed::derive_seed;

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-5;

#[inline]
pub fn softplus(r: f64) -> f64 {
    if r > 30.0 {
        r
    } else {
        r.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(r: f64) -> f64 {
    if r >= 0.0 {
        1.0 / (1.0 + (-r).exp())
    } else {
        let e = r.exp();
        e / (1.0 + e)
    }
}

/// Per-column affine standardization `(v - mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Weighted column statistics; constant columns get `degenerate_scale`.
    pub fn fit(data: &Array2<f64>, weights: &[f64], degenerate_scale: f64) -> Self {
        let wsum: f64 = weights.iter().sum();
        let mut mean = vec![0.0; data.ncols()];
        let mut scale = vec![degenerate_scale; data.ncols()];
        for (c, col) in data.axis_iter(Axis(1)).enumerate() {
            let m = col.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / wsum;
            let var = col
                .iter()
                .zip(weights)
                .map(|(v, w)| w * (v - m).powi(2))
                .sum::<f64>()
                / wsum;
            mean[c] = m;
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + m.abs()) {
                scale[c] = sd;
            }
        }
        Self { mean, scale }
    }

    pub fn apply(&self, data: &Array2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.scale[c];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    /// Epochs per alternation block.
    pub block_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
    pub variance_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![150, 150],
            activation: Activation::Relu,
            epochs: 100,
            block_epochs: 25,
            batch_size: 32,
            adam: AdamParams::default(),
            seed: 0,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.block_epochs == 0 || self.batch_size == 0 {
            return Err(SpareError::Config("epochs, block length and batch size must be positive".into()));
        }
        if !(self.variance_floor > 0.0) {
            return Err(SpareError::Config("variance floor must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(SpareError::Config("hidden layers must be nonempty".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Mean,
    Variance,
}

/// Alternation blocks `(phase, epochs)` for an epoch budget: mean and
/// variance blocks alternate, starting with the mean, and the last block is
/// always a mean block. The total equals `epochs`.
pub fn schedule(epochs: usize, block: usize) -> Vec<(Phase, usize)> {
    let n = epochs.div_ceil(block);
    (0..n)
        .map(|i| {
            let len = if i + 1 == n { epochs - block * (n - 1) } else { block };
            let phase = if i + 1 < n && i % 2 == 1 {
                Phase::Variance
            } else {
                Phase::Mean
            };
            (phase, len)
        })
        .collect()
}

/// Rows of inputs and targets with nonnegative per-sample weights.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub weights: Vec<f64>,
}

impl TrainData {
    pub fn new(x: Array2<f64>, y: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() || x.nrows() != weights.len() {
            return Err(SpareError::Dimension {
                expected: x.nrows(),
                got: y.nrows().min(weights.len()),
                context: "rows of x, y and weights",
            });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(SpareError::NonFinite("training data"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(SpareError::Training("sample weights must be finite and nonnegative".into()));
        }
        Ok(Self { x, y, weights })
    }

    pub fn from_rows(xs: &[Vec<f64>], ys: &[Vec<f64>], weights: Vec<f64>) -> Result<Self> {
        let to_arr = |rows: &[Vec<f64>], ctx: &'static str| -> Result<Array2<f64>> {
            let cols = rows.first().map_or(0, Vec::len);
            if let Some(r) = rows.iter().find(|r| r.len() != cols) {
                return Err(SpareError::Dimension {
                    expected: cols,
                    got: r.len(),
                    context: ctx,
                });
            }
            Ok(Array2::from_shape_vec((rows.len(), cols), rows.concat()).expect("consistent shape"))
        };
        Self::new(to_arr(xs, "input rows")?, to_arr(ys, "target rows")?, weights)
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// Mean and diagonal-variance networks plus the standardization they were
/// trained under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPredictor {
    pub mean_net: Mlp,
    pub var_net: Mlp,
    pub x_norm: Standardizer,
    pub y_norm: Standardizer,
    pub floor: f64,
    pub seed: u64,
}

impl GaussianPredictor {
    pub fn from_parts(
        mean_net: Mlp,
        var_net: Mlp,
        x_norm: Standardizer,
        y_norm: Standardizer,
        floor: f64,
    ) -> Result<Self> {
        let (i, o) = (mean_net.input_dim(), mean_net.output_dim());
        if var_net.input_dim() != i || var_net.output_dim() != o {
            return Err(SpareError::Format("mean and variance networks disagree on shape".into()));
        }
        if x_norm.mean.len() != i || y_norm.mean.len() != o {
            return Err(SpareError::Format("standardizer does not match network shape".into()));
        }
        if !(floor > 0.0) {
            return Err(SpareError::Format("variance floor must be positive".into()));
        }
        Ok(Self {
            mean_net,
            var_net,
            x_norm,
            y_norm,
            floor,
            seed: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean_net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mean_net.output_dim()
    }

    /// Mean and variance for a batch of raw inputs, in raw target units.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if x.ncols() != self.input_dim() {
            return Err(SpareError::Dimension {
                expected: self.input_dim(),
                got: x.ncols(),
                context: "predictor input",
            });
        }
        let xs = self.x_norm.apply(x);
        let mut mu = self.mean_net.forward(&xs);
        let mut var = self.var_net.forward(&xs);
        for mut row in mu.axis_iter_mut(Axis(0)) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = *v * self.y_norm.scale[k] + self.y_norm.mean[k];
            }
        }
        for mut row in var.axis_iter_mut(Axis(0)) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = softplus(*v) * self.y_norm.scale[k].powi(2) + self.floor;
            }
        }
        Ok((mu, var))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let xa = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
        let (mu, var) = self.forward_batch(&xa)?;
        Ok((mu.row(0).to_vec(), var.row(0).to_vec()))
    }

    /// Weighted mean over samples of `sum_k (y_k - mu_k)^2 / var_k + log var_k`.
    pub fn nll(&self, data: &TrainData) -> Result<f64> {
        check_weights(&data.weights)?;
        if data.y.ncols() != self.output_dim() {
            return Err(SpareError::Dimension {
                expected: self.output_dim(),
                got: data.y.ncols(),
                context: "predictor target",
            });
        }
        let (mu, var) = self.forward_batch(&data.x)?;
        let per = nll_rows(&data.y, &mu, &var);
        Ok(weighted_mean(&per, &data.weights))
    }

    /// Analytic gradients of [`Self::nll`] w.r.t. the mean and the variance
    /// network parameters.
    pub fn nll_gradients(&self, data: &TrainData) -> Result<(Vec<Dense>, Vec<Dense>)> {
        check_weights(&data.weights)?;
        let xs = self.x_norm.apply(&data.x);
        let ys = self.y_norm.apply(&data.y);
        let floors = std_floors(self.floor, &self.y_norm);
        let scale = 1.0 / data.weights.iter().sum::<f64>();
        let (mu, mcache) = self.mean_net.forward_cached(&xs);
        let (raw, vcache) = self.var_net.forward_cached(&xs);
        let var = to_variance(&raw, &floors);
        let dmu = mean_grad(&ys, &mu, &var, &data.weights, scale);
        let draw = var_grad(&ys, &mu, &raw, &var, &data.weights, scale);
        Ok((
            self.mean_net.backward(&mcache, &dmu),
            self.var_net.backward(&vcache, &draw),
        ))
    }
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !(*v >= 0.0)) || !(w.iter().sum::<f64>() > 0.0) {
        return Err(SpareError::Training("weights must be nonnegative and not all zero".into()));
    }
    Ok(())
}

fn weighted_mean(vals: &[f64], w: &[f64]) -> f64 {
    vals.iter().zip(w).map(|(v, w)| v * w).sum::<f64>() / w.iter().sum::<f64>()
}

/// Per-row Gaussian NLL terms (without the `log 2 pi` constant).
pub fn nll_rows(y: &Array2<f64>, mu: &Array2<f64>, var: &Array2<f64>) -> Vec<f64> {
    y.axis_iter(Axis(0))
        .zip(mu.axis_iter(Axis(0)))
        .zip(var.axis_iter(Axis(0)))
        .map(|((y, m), v)| {
            y.iter()
                .zip(m)
                .zip(v)
                .map(|((y, m), v)| (y - m).powi(2) / v + v.ln())
                .sum()
        })
        .collect()
}

fn std_floors(floor: f64, y_norm: &Standardizer) -> Array1<f64> {
    y_norm.scale.iter().map(|s| floor / (s * s)).collect()
}

fn to_variance(raw: &Array2<f64>, floors: &Array1<f64>) -> Array2<f64> {
    let mut v = raw.mapv(softplus);
    v += floors;
    v
}

fn mean_grad(y: &Array2<f64>, mu: &Array2<f64>, var: &Array2<f64>, w: &[f64], scale: f64) -> Array2<f64> {
    let mut d = mu - y;
    for ((mut row, vrow), &wi) in d.axis_iter_mut(Axis(0)).zip(var.axis_iter(Axis(0))).zip(w) {
        for (g, v) in row.iter_mut().zip(vrow) {
            *g *= 2.0 * wi * scale / v;
        }
    }
    d
}

fn var_grad(
    y: &Array2<f64>,
    mu: &Array2<f64>,
    raw: &Array2<f64>,
    var: &Array2<f64>,
    w: &[f64],
    scale: f64,
) -> Array2<f64> {
    let mut d = Array2::zeros(raw.raw_dim());
    for i in 0..d.nrows() {
        let c = w[i] * scale;
        for k in 0..d.ncols() {
            let v = var[[i, k]];
            let r2 = (y[[i, k]] - mu[[i, k]]).powi(2);
            d[[i, k]] = c * (1.0 / v - r2 / (v * v)) * sigmoid(raw[[i, k]]);
        }
    }
    d
}

/// Train a predictor with the alternating block schedule. If the final
/// training NLL exceeds the initial one, training is repeated once with a
/// derived seed.
pub fn train(data: &TrainData, cfg: &TrainConfig) -> Result<GaussianPredictor> {
    cfg.validate()?;
    check_weights(&data.weights)?;
    if data.weights.iter().filter(|w| **w > 0.0).count() < 2 {
        return Err(SpareError::Training("need at least two weighted samples".into()));
    }
    let (pred, initial, fin) = train_once(data, cfg, cfg.seed)?;
    if fin <= initial {
        return Ok(pred);
    }
    log::warn!("training NLL rose from {initial} to {fin}; retrying with a new seed");
    let (pred, _, _) = train_once(data, cfg, derive_seed(cfg.seed, 1))?;
    Ok(pred)
}

fn train_once(data: &TrainData, cfg: &TrainConfig, seed: u64) -> Result<(GaussianPredictor, f64, f64)> {
    let keep: Vec<usize> = (0..data.len()).filter(|&i| data.weights[i] > 0.0).collect();
    let x = data.x.select(Axis(0), &keep);
    let y = data.y.select(Axis(0), &keep);
    let w: Vec<f64> = keep.iter().map(|&i| data.weights[i]).collect();
    let n = keep.len();
    let mean_w = w.iter().sum::<f64>() / n as f64;

    let x_norm = Standardizer::fit(&x, &w, 1.0);
    // a constant target is predicted on the scale of the variance floor
    let y_norm = Standardizer::fit(&y, &w, cfg.variance_floor.sqrt());
    let xs = x_norm.apply(&x);
    let ys = y_norm.apply(&y);
    let floors = std_floors(cfg.variance_floor, &y_norm);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = vec![x.ncols()];
    sizes.extend(&cfg.hidden);
    sizes.push(y.ncols());
    let mut mean_net = Mlp::new(&sizes, cfg.activation, &mut rng);
    let mut var_net = Mlp::new(&sizes, cfg.activation, &mut rng);
    let mut mean_opt = Adam::new(&mean_net, cfg.adam);
    let mut var_opt = Adam::new(&var_net, cfg.adam);

    let full_nll = |mean_net: &Mlp, var_net: &Mlp| {
        let mu = mean_net.forward(&xs);
        let var = to_variance(&var_net.forward(&xs), &floors);
        weighted_mean(&nll_rows(&ys, &mu, &var), &w)
    };
    let initial = full_nll(&mean_net, &var_net);

    let mut order: Vec<usize> = (0..n).collect();
    for (phase, epochs) in schedule(cfg.epochs, cfg.block_epochs) {
        // the network not being trained is frozen for the whole block
        let frozen = match phase {
            Phase::Mean => to_variance(&var_net.forward(&xs), &floors),
            Phase::Variance => mean_net.forward(&xs),
        };
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let bx = xs.select(Axis(0), batch);
                let by = ys.select(Axis(0), batch);
                let bf = frozen.select(Axis(0), batch);
                let bw: Vec<f64> = batch.iter().map(|&i| w[i]).collect();
                let scale = 1.0 / (batch.len() as f64 * mean_w);
                match phase {
                    Phase::Mean => {
                        let (mu, cache) = mean_net.forward_cached(&bx);
                        let d = mean_grad(&by, &mu, &bf, &bw, scale);
                        let g = mean_net.backward(&cache, &d);
                        mean_opt.step(&mut mean_net, &g);
                    }
                    Phase::Variance => {
                        let (raw, cache) = var_net.forward_cached(&bx);
                        let var = to_variance(&raw, &floors);
                        let d = var_grad(&by, &bf, &raw, &var, &bw, scale);
                        let g = var_net.backward(&cache, &d);
                        var_opt.step(&mut var_net, &g);
                    }
                }
            }
        }
        if !mean_net.is_finite() || !var_net.is_finite() {
            return Err(SpareError::Training("parameters diverged to non-finite values".into()));
        }
    }
    let fin = full_nll(&mean_net, &var_net);
    if !fin.is_finite() {
        return Err(SpareError::Training("training NLL is not finite".into()));
    }
    let pred = GaussianPredictor {
        mean_net,
        var_net,
        x_norm,
        y_norm,
        floor: cfg.variance_floor,
        seed,
    };
    Ok((pred, initial, fin))
}

/// Accumulates weighted squared deviations per property for default
/// variance fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualTable {
    sq: Vec<f64>,
    weight: Vec<f64>,
}

impl ResidualTable {
    pub fn new(n_props: usize) -> Self {
        Self {
            sq: vec![0.0; n_props],
            weight: vec![0.0; n_props],
        }
    }

    pub fn push(&mut self, prop: usize, deviation: f64, weight: f64) {
        self.sq[prop] += weight * deviation * deviation;
        self.weight[prop] += weight;
    }

    /// Weighted mean squared deviation per property, clamped below at
    /// `floor`; properties without residuals get `floor`.
    pub fn fit_default_variance(&self, floor: f64) -> Vec<f64> {
        self.sq
            .iter()
            .zip(&self.weight)
            .map(|(s, w)| if *w > 0.0 { (s / w).max(floor) } else { floor })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn zero_net(i: usize, o: usize) -> Mlp {
        Mlp::from_layers(
            vec![Dense {
                w: Array2::zeros((i, o)),
                b: Array1::zeros(o),
            }],
            Activation::Relu,
        )
        .unwrap()
    }

    #[test]
    fn zero_networks_give_softplus_zero_variance() {
        let p = GaussianPredictor::from_parts(
            zero_net(3, 2),
            zero_net(3, 2),
            Standardizer::identity(3),
            Standardizer::identity(2),
            1e-12,
        )
        .unwrap();
        let (mu, var) = p.forward(&[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(mu, vec![0.0, 0.0]);
        for v in var {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-11);
        }
        assert!(p.forward(&[1.0]).is_err());
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mean = Mlp::from_layers(
            vec![Dense {
                w: array![[1.0]],
                b: array![0.0],
            }],
            Activation::Relu,
        )
        .unwrap();
        let p = GaussianPredictor::from_parts(
            mean,
            zero_net(1, 1),
            Standardizer::identity(1),
            Standardizer::identity(1),
            1e-6,
        )
        .unwrap();
        assert_eq!(p.forward(&[1.0]).unwrap().0, vec![1.0]);
    }

    fn unit_var_predictor(mean_bias: f64, var_bias: f64) -> GaussianPredictor {
        // constant mean `mean_bias`, constant raw variance `var_bias`
        let mut m = zero_net(1, 1);
        m.layers[0].b[0] = mean_bias;
        let mut v = zero_net(1, 1);
        v.layers[0].b[0] = var_bias;
        GaussianPredictor::from_parts(m, v, Standardizer::identity(1), Standardizer::identity(1), 1e-300)
            .unwrap()
    }

    /// raw value whose softplus is `target`
    fn inv_softplus(target: f64) -> f64 {
        target.exp_m1().ln()
    }

    #[test]
    fn nll_closed_forms() {
        let one = |y: f64| TrainData::new(array![[0.0]], array![[y]], vec![1.0]).unwrap();
        let p = unit_var_predictor(0.0, inv_softplus(1.0));
        assert!(p.nll(&one(0.0)).unwrap().abs() < 1e-12);
        assert!((p.nll(&one(2.0)).unwrap() - 4.0).abs() < 1e-12);
        let p = unit_var_predictor(0.0, inv_softplus(std::f64::consts::E));
        assert!((p.nll(&one(0.0)).unwrap() - 1.0).abs() < 1e-12);
        let zero_w = TrainData::new(array![[0.0]], array![[0.0]], vec![0.0]).unwrap();
        assert!(p.nll(&zero_w).is_err());
    }

    #[test]
    fn schedule_ends_with_mean_and_fills_budget() {
        use Phase::*;
        assert_eq!(
            schedule(100, 25),
            vec![(Mean, 25), (Variance, 25), (Mean, 25), (Mean, 25)]
        );
        let s = schedule(300, 25);
        assert_eq!(s.len(), 12);
        assert_eq!(s.iter().map(|b| b.1).sum::<usize>(), 300);
        assert_eq!(s.last().unwrap().0, Mean);
        assert_eq!(schedule(30, 25), vec![(Mean, 25), (Mean, 5)]);
    }

    #[test]
    fn default_variance_examples() {
        let mut t = ResidualTable::new(1);
        t.push(0, 1.0, 1.0);
        t.push(0, -1.0, 1.0);
        assert_eq!(t.fit_default_variance(1e-6), vec![1.0]);

        let mut t = ResidualTable::new(2);
        t.push(0, 0.0, 1.0);
        assert_eq!(t.fit_default_variance(1e-6), vec![1e-6, 1e-6]);

        let mut t = ResidualTable::new(1);
        t.push(0, 0.0, 1.0);
        t.push(0, 2.0, 3.0);
        assert!((t.fit_default_variance(1e-6)[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn training_rejects_bad_input() {
        let one = TrainData::new(array![[0.0]], array![[1.0]], vec![1.0]).unwrap();
        assert!(train(&one, &TrainConfig::default()).is_err());
        assert!(TrainData::new(array![[f64::NAN]], array![[1.0]], vec![1.0]).is_err());
        assert!(TrainData::new(array![[0.0]], array![[1.0]], vec![-1.0]).is_err());
    }

    #[test]
    fn constant_targets_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Vec<f64>> = (0..1000).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let ys: Vec<Vec<f64>> = (0..1000).map(|_| vec![3.5]).collect();
        let data = TrainData::from_rows(&xs, &ys, vec![1.0; 1000]).unwrap();
        let cfg = TrainConfig {
            hidden: vec![16, 16],
            ..Default::default()
        };
        let p = train(&data, &cfg).unwrap();
        for x in xs.iter().take(20) {
            let (mu, var) = p.forward(x).unwrap();
            assert!((mu[0] - 3.5).abs() < 1e-2, "mu {}", mu[0]);
            assert!(var[0] < 1e-3, "var {}", var[0]);
        }
    }

    #[test]
    fn seeded_training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<Vec<f64>> = (0..64).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![2.0 * x[0]]).collect();
        let data = TrainData::from_rows(&xs, &ys, vec![1.0; 64]).unwrap();
        let cfg = TrainConfig {
            hidden: vec![8],
            epochs: 10,
            block_epochs: 5,
            seed: 42,
            ..Default::default()
        };
        let a = serde_json::to_string(&train(&data, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&train(&data, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    fn tanh_predictor(rng: &mut ChaCha8Rng, i: usize, o: usize) -> GaussianPredictor {
        let mut mean = Mlp::new(&[i, 5, o], Activation::Tanh, rng);
        let mut var = Mlp::new(&[i, 4, o], Activation::Tanh, rng);
        for l in mean.layers.iter_mut().chain(var.layers.iter_mut()) {
            l.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        GaussianPredictor::from_parts(mean, var, Standardizer::identity(i), Standardizer::identity(o), 1e-3).unwrap()
    }

    fn random_data(rng: &mut ChaCha8Rng, n: usize, i: usize, o: usize) -> TrainData {
        let x = Array2::from_shape_fn((n, i), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((n, o), |_| rng.random_range(-1.0..1.0));
        let w = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
        TrainData::new(x, y, w).unwrap()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_data(&mut rng, 7, 3, 2);
        let p = tanh_predictor(&mut rng, 3, 2);
        let (gm, gv) = p.nll_gradients(&data).unwrap();
        let eps = 1e-5;
        for which in 0..2 {
            let grads = if which == 0 { &gm } else { &gv };
            for (l, g) in grads.iter().enumerate() {
                for idx in 0..g.w.len() + g.b.len() {
                    let nudge = |delta: f64| {
                        let mut q = p.clone();
                        let net = if which == 0 { &mut q.mean_net } else { &mut q.var_net };
                        let layer = &mut net.layers[l];
                        if idx < layer.w.len() {
                            let c = layer.w.ncols();
                            layer.w[[idx / c, idx % c]] += delta;
                        } else {
                            layer.b[idx - layer.w.len()] += delta;
                        }
                        q.nll(&data).unwrap()
                    };
                    let fd = (nudge(eps) - nudge(-eps)) / (2.0 * eps);
                    let an = if idx < g.w.len() {
                        g.w.as_slice().unwrap()[idx]
                    } else {
                        g.b[idx - g.w.len()]
                    };
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(rel < 1e-4, "net {which} layer {l} param {idx}: fd {fd} analytic {an}");
                }
            }
        }
    }

    #[test]
    fn duplicating_the_data_leaves_the_nll_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = random_data(&mut rng, 11, 2, 3);
        let p = tanh_predictor(&mut rng, 2, 3);
        let twice = TrainData::new(
            ndarray::concatenate![Axis(0), data.x, data.x],
            ndarray::concatenate![Axis(0), data.y, data.y],
            [data.weights.clone(), data.weights.clone()].concat(),
        )
        .unwrap();
        assert!((p.nll(&data).unwrap() - p.nll(&twice).unwrap()).abs() < 1e-12);
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn predicted_variance_is_positive(x in proptest::collection::vec(-1e3f64..1e3, 2), seed in 0u64..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = tanh_predictor(&mut rng, 2, 2);
            let (_, var) = p.forward(&x).unwrap();
            prop_assert!(var.iter().all(|v| *v > 0.0 && v.is_finite()));
        }
    }
}
