//! Gradient statistics over a batch, particle target distributions and
//! their Wasserstein distance to Monte-Carlo returns.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Tensor, Var};
use crate::envs::{env_step, observe_batch, reward, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::expansion::{particle_rows, q_h_expansion, ExpansionConfig};
use crate::models::{DynamicsModel, RolloutNoise};
use crate::nets::{collect_grads, DoubleQ, Policy};
use crate::replay::SequenceBuffer;
use crate::rng::{normal_tensor, Rng};

/// How per-element gradients are reduced to one spread figure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// Std across the batch per parameter, then averaged over parameters.
    #[default]
    BatchThenDims,
    /// Std across parameters per element, then averaged over the batch.
    DimsThenBatch,
}

/// Summary of one set of per-element gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientStats {
    /// Average magnitude of the batch-mean gradient.
    pub mean: f64,
    pub std: f64,
}

/// One flattened gradient per batch element. `build(tape, i)` records the
/// loss of element `i` and returns it with the variables to differentiate,
/// whose shapes are `like`.
pub fn per_sample_gradients<F>(n: usize, like: &[&Tensor], mut build: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&mut Tape, usize) -> Result<(Var, Vec<Var>)>,
{
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut tape = Tape::new();
        let (root, vars) = build(&mut tape, i)?;
        let grads = tape.backward(root)?;
        out.push(flatten(&collect_grads(&grads, &vars, like)));
    }
    Ok(out)
}

pub fn flatten(tensors: &[Tensor]) -> Vec<f64> {
    tensors
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let ss: f64 = xs.map(|x| (x - mean) * (x - mean)).sum();
    (mean, libm::sqrt(ss / (n - 1.0)))
}

/// Sample statistics (`n - 1` denominators) of per-element gradients.
pub fn gradient_stats(grads: &[Vec<f64>], agg: Aggregation) -> Result<GradientStats> {
    if grads.len() < 2 {
        return Err(Error::TooFewSamples {
            have: grads.len(),
            need: 2,
        });
    }
    let d = grads[0].len();
    if let Some(g) = grads.iter().find(|g| g.len() != d) {
        return Err(Error::LengthMismatch {
            left: d,
            right: g.len(),
        });
    }
    if d == 0 {
        return Err(Error::Empty("gradient vector"));
    }
    let n = grads.len();
    let col = |j: usize| grads.iter().map(move |g| g[j]);
    let mean = (0..d)
        .map(|j| libm::fabs(col(j).sum::<f64>() / n as f64))
        .sum::<f64>()
        / d as f64;
    let std = match agg {
        Aggregation::BatchThenDims => (0..d).map(|j| mean_std(col(j)).1).sum::<f64>() / d as f64,
        Aggregation::DimsThenBatch => {
            if d < 2 {
                return Err(Error::TooFewSamples { have: d, need: 2 });
            }
            grads
                .iter()
                .map(|g| mean_std(g.iter().copied()).1)
                .sum::<f64>()
                / n as f64
        }
    };
    Ok(GradientStats { mean, std })
}

/// `W_1` between equal-size empirical distributions: mean absolute
/// difference of the sorted samples.
pub fn wasserstein_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| libm::fabs(x - y))
        .sum::<f64>()
        / a.len() as f64)
}

/// Truncated soft returns on the true dynamics, `[particles, rows]`:
/// `r(s, a) + sum_{t=1}^{steps-1} g^t (r_t - alpha log pi(a_t|s_t))`, with
/// `a_t ~ pi`, or `a_t = tanh(mean)` and no entropy for deterministic
/// policies. Particles of row `i` sit at rows `p * rows + i` internally.
#[allow(clippy::too_many_arguments)]
pub fn mc_returns(
    spec: &EnvSpec,
    policy: &Policy,
    alpha: Option<f64>,
    states: &Tensor,
    actions: &Tensor,
    steps: usize,
    gamma: f64,
    particles: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if particles == 0 {
        return Err(Error::Empty("particle set"));
    }
    let rows = states.rows();
    let n = rows * particles;
    let idx = particle_rows(rows, particles);
    let mut s = states.select_rows(&idx);
    let mut a = actions.select_rows(&idx);
    let mut ret = vec![0.0; n];
    let mut disc = 1.0;
    for t in 0..steps {
        if t > 0 {
            let obs = observe_batch(spec, &s);
            if policy.is_stochastic() {
                let noise = normal_tensor(rng, n, spec.act_dim());
                let (act, lp) = policy.behaviour_action(&obs, &noise)?;
                a = act;
                if let Some(al) = alpha {
                    for (r, l) in ret.iter_mut().zip(lp.data()) {
                        *r -= disc * al * l;
                    }
                }
            } else {
                a = policy.mean_action(&obs)?;
            }
        }
        let mut next = Vec::with_capacity(s.len());
        for (i, r) in ret.iter_mut().enumerate() {
            *r += disc * reward(spec, s.row_slice(i), a.row_slice(i));
            if t + 1 < steps {
                let st = EnvState {
                    x: s.row_slice(i).to_vec(),
                    step: 0,
                };
                next.extend(env_step(spec, &st, a.row_slice(i))?.0.x);
            }
        }
        if t + 1 < steps {
            s = Tensor::matrix(n, spec.state_dim(), next);
        }
        disc *= gamma;
    }
    Tensor::new(&[particles, rows], ret)
}

/// `particles` Monte-Carlo soft returns from one state-action pair.
#[allow(clippy::too_many_arguments)]
pub fn mc_return_oracle(
    spec: &EnvSpec,
    policy: &Policy,
    alpha: Option<f64>,
    state: &[f64],
    action: &[f64],
    steps: usize,
    gamma: f64,
    particles: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let s = Tensor::matrix(1, state.len(), state.to_vec());
    let a = Tensor::matrix(1, action.len(), action.to_vec());
    Ok(mc_returns(spec, policy, alpha, &s, &a, steps, gamma, particles, rng)?.into_data())
}

/// `[particles, rows]` H-step expansion targets `Q^H_p(s, a)` on `model`,
/// one independent rollout per particle.
#[allow(clippy::too_many_arguments)]
pub fn particle_targets(
    cfg: &ExpansionConfig,
    spec: &EnvSpec,
    model: &DynamicsModel,
    policy: &Policy,
    critic: &DoubleQ,
    states: &Tensor,
    actions: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    let (rows, p) = (states.rows(), cfg.particles);
    let idx = particle_rows(rows, p);
    let noise = RolloutNoise::draw(
        rng,
        rows * p,
        cfg.horizon,
        spec.state_dim(),
        spec.act_dim(),
        model.num_members(),
    );
    let mut tape = Tape::new();
    let bm = model.bind(&mut tape);
    let bp = policy.bind(&mut tape, false);
    let bq = critic.bind(&mut tape, false);
    let s = tape.constant(states.select_rows(&idx));
    let a = tape.constant(actions.select_rows(&idx));
    let q = q_h_expansion(&mut tape, cfg, spec, &bm, &bp, &bq, s, a, &noise)?;
    tape.value(q).clone().reshaped(&[p, rows])
}

/// Per-horizon summary of particle targets against Monte-Carlo references,
/// each averaged over the analysed state-action pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetAnalysis {
    pub horizon: usize,
    pub wasserstein: f64,
    pub mean: f64,
    /// Sample variance over particles.
    pub variance: f64,
    pub mc_mean: f64,
    pub mc_variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub horizons: Vec<usize>,
    pub samples: usize,
    pub particles: usize,
    pub mc_steps: usize,
    pub gamma: f64,
    /// State-action pairs processed per rollout batch.
    pub chunk: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            horizons: vec![0, 1, 3, 5, 10],
            samples: 1000,
            particles: 100,
            mc_steps: 300,
            gamma: 0.95,
            chunk: 8,
        }
    }
}

fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    // shifted by the first sample, so identical samples give exactly 0
    let d: Vec<f64> = xs.iter().map(|x| x - xs[0]).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (d.len() - 1) as f64
}

/// Compares `Q^H` particle sets with Monte-Carlo return sets on
/// state-action pairs drawn from `buffer`. Uses the oracle dynamics for both.
/// Nothing passed in is modified.
#[allow(clippy::too_many_arguments)]
pub fn analyze_targets(
    cfg: &AnalysisConfig,
    spec: &EnvSpec,
    policy: &Policy,
    critic: &DoubleQ,
    alpha: Option<f64>,
    buffer: &SequenceBuffer,
    rng: &mut Rng,
) -> Result<Vec<TargetAnalysis>> {
    if cfg.samples == 0 || cfg.chunk == 0 {
        return Err(Error::Empty("analysis sample set"));
    }
    let batch = buffer.sample_transitions(cfg.samples, rng)?;
    let model = DynamicsModel::oracle(*spec);
    let p = cfg.particles;
    let mut mc: Vec<Vec<f64>> = Vec::with_capacity(cfg.samples);
    let mut acc = vec![[0.0; 3]; cfg.horizons.len()];
    let (mut mc_mean, mut mc_var) = (0.0, 0.0);
    let starts: Vec<usize> = (0..cfg.samples).step_by(cfg.chunk).collect();
    for &lo in &starts {
        let rows: Vec<usize> = (lo..(lo + cfg.chunk).min(cfg.samples)).collect();
        let s = batch.states.select_rows(&rows);
        let a = batch.actions.select_rows(&rows);
        let refs = mc_returns(spec, policy, alpha, &s, &a, cfg.mc_steps, cfg.gamma, p, rng)?;
        for i in 0..rows.len() {
            let col: Vec<f64> = (0..p).map(|k| refs.get(k, i)).collect();
            mc_mean += col.iter().sum::<f64>() / p as f64;
            mc_var += sample_variance(&col);
            mc.push(col);
        }
        for (hi, &h) in cfg.horizons.iter().enumerate() {
            let ecfg = ExpansionConfig {
                horizon: h,
                gamma: cfg.gamma,
                lambda: 1.0,
                alpha,
                particles: p,
            };
            let q = particle_targets(&ecfg, spec, &model, policy, critic, &s, &a, rng)?;
            for (i, &r) in rows.iter().enumerate() {
                let col: Vec<f64> = (0..p).map(|k| q.get(k, i)).collect();
                acc[hi][0] += wasserstein_1d(&col, &mc[r])?;
                acc[hi][1] += col.iter().sum::<f64>() / p as f64;
                acc[hi][2] += sample_variance(&col);
            }
        }
    }
    let n = cfg.samples as f64;
    Ok(cfg
        .horizons
        .iter()
        .zip(acc)
        .map(|(&horizon, [w, m, v])| TargetAnalysis {
            horizon,
            wasserstein: w / n,
            mean: m / n,
            variance: v / n,
            mc_mean: mc_mean / n,
            mc_variance: mc_var / n,
        })
        .collect())
}
