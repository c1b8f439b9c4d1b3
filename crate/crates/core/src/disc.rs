//! Expert-versus-policy discriminator whose logit estimates the log density ratio.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::neural::{clip_global_norm, AdamState, DenseNet, GradBundle, NeuralError};
use crate::ra::expr::{sigmoid, softplus};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// `(|grad| - 1)^2`
    OneCentered,
    /// `|grad|^2`
    ZeroCentered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub gp_weight: f64,
    pub penalty: PenaltyKind,
    pub epochs: usize,
    pub minibatches: usize,
    pub max_grad_norm: Option<f64>,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            hidden: vec![64],
            lr: 3e-4,
            gp_weight: 0.1,
            penalty: PenaltyKind::OneCentered,
            epochs: 1,
            minibatches: 8,
            max_grad_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscState {
    pub net: DenseNet,
    pub adam: AdamState,
    pub cfg: DiscConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscTrainStats {
    pub steps: usize,
    pub mean_bce: f64,
    pub mean_penalty: f64,
}

/// Stacks feature rows into a matrix of width `dim`.
pub fn to_matrix(rows: &[Vec<f64>], dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(&ndarray::ArrayView1::from(&r[..]));
    }
    m
}

impl DiscState {
    pub fn new(input_dim: usize, cfg: DiscConfig, seed: u64) -> Result<Self, NeuralError> {
        if cfg.gp_weight < 0.0 {
            return Err(NeuralError::Widths(vec![]));
        }
        let mut widths = vec![input_dim];
        widths.extend(&cfg.hidden);
        widths.push(1);
        let net = DenseNet::init(&widths, seed)?;
        let adam = AdamState::new(&net, cfg.lr);
        Ok(DiscState { net, adam, cfg })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// One logit per row.
    pub fn logits(&self, pairs: &Array2<f64>) -> Result<Vec<f64>, NeuralError> {
        if pairs.nrows() == 0 {
            if pairs.ncols() != self.input_dim() {
                return Err(NeuralError::InputDim {
                    expected: self.input_dim(),
                    got: pairs.ncols(),
                });
            }
            return Ok(Vec::new());
        }
        Ok(self.net.predict(pairs)?.column(0).to_vec())
    }

    /// Mean-of-means binary cross-entropy (expert = positive class) and its parameter gradients.
    ///
    /// Loss is `0.5 * (mean_E softplus(-l) + mean_pi softplus(l))`, the negated
    /// log-likelihood objective; the gradients are for descent on it.
    pub fn bce_grads(
        &self,
        expert: &Array2<f64>,
        policy: &Array2<f64>,
    ) -> Result<(GradBundle, f64), NeuralError> {
        let ne = expert.nrows();
        let np = policy.nrows();
        if expert.ncols() != policy.ncols() {
            return Err(NeuralError::InputDim {
                expected: expert.ncols(),
                got: policy.ncols(),
            });
        }
        let both = ndarray::concatenate(Axis(0), &[expert.view(), policy.view()])
            .expect("widths checked above");
        let (out, cache) = self.net.forward(&both)?;
        let mut og = Array2::zeros((ne + np, 1));
        let mut loss_e = 0.0;
        let mut loss_p = 0.0;
        for i in 0..ne {
            let l = out[[i, 0]];
            loss_e += softplus(-l);
            og[[i, 0]] = -0.5 * sigmoid(-l) / ne as f64;
        }
        for j in 0..np {
            let l = out[[ne + j, 0]];
            loss_p += softplus(l);
            og[[ne + j, 0]] = 0.5 * sigmoid(l) / np as f64;
        }
        let loss = 0.5 * (loss_e / ne as f64 + loss_p / np as f64);
        let grads = self.net.backward(&cache, &og)?;
        Ok((grads, loss))
    }

    /// Penalty on the logit's input-gradient norm at random interpolates.
    ///
    /// Both batches are truncated to the shorter one; pair `i` is mixed as
    /// `u * expert_i + (1 - u) * policy_i` with `u ~ U[0, 1]`.
    pub fn gradient_penalty(
        &self,
        expert: &Array2<f64>,
        policy: &Array2<f64>,
        rng: &mut Rng,
    ) -> Result<(f64, GradBundle), NeuralError> {
        let n = expert.nrows().min(policy.nrows());
        let mut mixed = Array2::zeros((n, expert.ncols()));
        for i in 0..n {
            let u: f64 = rng.gen();
            let row = &expert.row(i) * u + &policy.row(i) * (1.0 - u);
            mixed.row_mut(i).assign(&row);
        }
        self.penalty_at(&mixed)
    }

    /// Penalty and its parameter gradients at fixed input points.
    pub fn penalty_at(&self, points: &Array2<f64>) -> Result<(f64, GradBundle), NeuralError> {
        let n = points.nrows();
        if n == 0 {
            return Ok((0.0, GradBundle::zeros_for(&self.net, 0)));
        }
        let (_, cache) = self.net.forward(points)?;
        let ones = Array2::ones((n, 1));
        let input_grads = self.net.backward(&cache, &ones)?.input;
        let mut dirs = Array2::zeros(input_grads.raw_dim());
        let mut penalty = 0.0;
        for i in 0..n {
            let g = input_grads.row(i);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            match self.cfg.penalty {
                PenaltyKind::OneCentered => {
                    penalty += (norm - 1.0).powi(2);
                    if norm > 0.0 {
                        let s = 2.0 * (norm - 1.0) / (norm * n as f64);
                        dirs.row_mut(i).assign(&(&g * s));
                    }
                }
                PenaltyKind::ZeroCentered => {
                    penalty += norm * norm;
                    dirs.row_mut(i).assign(&(&g * (2.0 / n as f64)));
                }
            }
        }
        let grads = self.net.input_grad_param_grads(&cache, &dirs, &ones)?;
        Ok((penalty / n as f64, grads))
    }

    /// Gradients of `bce + gp_weight * penalty` on one expert/policy minibatch.
    pub fn loss_grads(
        &self,
        expert: &Array2<f64>,
        policy: &Array2<f64>,
        rng: &mut Rng,
    ) -> Result<(GradBundle, f64, f64), NeuralError> {
        let (mut grads, bce) = self.bce_grads(expert, policy)?;
        let mut penalty = 0.0;
        if self.cfg.gp_weight > 0.0 {
            let (p, gp) = self.gradient_penalty(expert, policy, rng)?;
            grads.add_scaled(&gp, self.cfg.gp_weight);
            penalty = p;
        }
        Ok((grads, bce, penalty))
    }

    /// `epochs x minibatches` Adam steps. Each epoch shuffles the policy set
    /// into minibatches and pairs each with an equally sized expert sample
    /// drawn with replacement.
    pub fn train(
        &mut self,
        expert_set: &Array2<f64>,
        policy_set: &Array2<f64>,
        rng: &mut Rng,
    ) -> Result<DiscTrainStats, NeuralError> {
        let mut stats = DiscTrainStats::default();
        if expert_set.nrows() == 0 || policy_set.nrows() == 0 {
            return Ok(stats);
        }
        let np = policy_set.nrows();
        let n_mb = self.cfg.minibatches.clamp(1, np);
        let mb_size = np / n_mb;
        let mut order: Vec<usize> = (0..np).collect();
        for _ in 0..self.cfg.epochs {
            order.shuffle(rng);
            for mb in 0..n_mb {
                let idx = &order[mb * mb_size..(mb + 1) * mb_size];
                let policy = policy_set.select(Axis(0), idx);
                let e_idx: Vec<usize> = (0..mb_size)
                    .map(|_| rng.gen_range(0..expert_set.nrows()))
                    .collect();
                let expert = expert_set.select(Axis(0), &e_idx);
                let (mut grads, bce, penalty) = self.loss_grads(&expert, &policy, rng)?;
                if let Some(max) = self.cfg.max_grad_norm {
                    clip_global_norm(&mut [&mut grads], max);
                }
                self.adam.apply(&mut self.net, &grads);
                stats.steps += 1;
                stats.mean_bce += bce;
                stats.mean_penalty += penalty;
            }
        }
        if stats.steps > 0 {
            stats.mean_bce /= stats.steps as f64;
            stats.mean_penalty /= stats.steps as f64;
        }
        Ok(stats)
    }
}
