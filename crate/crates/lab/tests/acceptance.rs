//! Acceptance report: one PASS/FAIL/SKIP line per criterion.
//!
//! Criteria backed by long training runs read finished cells of
//! `configs/acceptance.toml` from `VEXP_ACCEPTANCE_DIR` (default
//! `target/acceptance` in the workspace). Missing cells are trained only
//! when `VEXP_ACCEPTANCE_FULL=1`; otherwise those criteria report SKIP.
//! With `VEXP_ACCEPTANCE_STRICT=1` any line other than PASS fails the test.

use std::fs;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use toml::Table;

use vexp::analysis::{analyze_snapshot, load_snapshot};
use vexp::config::RunConfig;
use vexp::log::list_checkpoints;
use vexp::matrix::{cells, load_matrix, run_matrix, Cell, CellStatus, CHECKPOINT_DIR, LOG_FILE};
use vexp::summary::{median_steps, summarize_cell, CellSummary};
use vexp_core::agents::{
    actor_loss, critic_loss, train, Component, Observer, Record, Sink, TrainConfig,
};
use vexp_core::autodiff::{GradCheck, Tape, Tensor, Var};
use vexp_core::checkpoint::ParamMap;
use vexp_core::diagnostics::{particle_targets, AnalysisConfig};
use vexp_core::envs::{env_step, EnvSpec, EnvState, LinearParams};
use vexp_core::expansion::{
    critic_target, q_h_expansion, retrace_expansion, rollout_segment, ExpansionConfig,
};
use vexp_core::models::{
    model_rollout, DynamicsModel, EnsembleConfig, EnsembleModel, RolloutNoise,
};
use vexp_core::nets::{collect_grads, Actor, DoubleQ, Module, Policy, PolicyKind, PolicySample};
use vexp_core::rng::{mix, normal, normal_tensor, stream, Rng, Stream};

#[derive(Clone, Copy, PartialEq)]
enum Outcome {
    Pass,
    Fail,
    Skip,
}

type Verdict = (Outcome, String);

fn verdict(ok: bool, detail: String) -> Verdict {
    (if ok { Outcome::Pass } else { Outcome::Fail }, detail)
}

fn workspace() -> PathBuf {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    p.canonicalize().unwrap_or(p)
}

fn cache_dir() -> PathBuf {
    std::env::var_os("VEXP_ACCEPTANCE_DIR")
        .map_or_else(|| workspace().join("target/acceptance"), PathBuf::from)
}

fn flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| !v.is_empty() && v != "0")
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

fn sample_variance(xs: &[f64]) -> f64 {
    let d: Vec<f64> = xs.iter().map(|x| x - xs[0]).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (d.len() - 1) as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn sac_nets(seed: u64, hidden: &[usize]) -> (EnvSpec, Policy, DoubleQ, Rng) {
    let mut rng = stream(seed, Stream::Init);
    let spec = EnvSpec::pendulum();
    let policy = Policy::new(
        PolicyKind::Gaussian,
        spec.obs_dim(),
        spec.act_dim(),
        hidden,
        &mut rng,
    );
    let critic = DoubleQ::new(spec.obs_dim(), spec.act_dim(), hidden, &mut rng);
    (spec, policy, critic, rng)
}

fn random_states(rng: &mut Rng, rows: usize, dim: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        dim,
        (0..rows * dim).map(|_| scale * normal(rng)).collect(),
    )
}

// 1 -------------------------------------------------------------------------

fn retrace_reduction() -> Verdict {
    let (spec, policy, critic, mut rng) = sac_nets(101, &[64, 64]);
    let model = DynamicsModel::oracle(spec);
    let rows = 1000;
    let mut worst: f64 = 0.0;
    for h in [1, 3, 5, 10] {
        let cfg = ExpansionConfig {
            horizon: h,
            gamma: 0.95,
            lambda: 1.0,
            alpha: Some(0.2),
            particles: 1,
        };
        let s0 = random_states(&mut rng, rows, 2, 3.0);
        let noise = RolloutNoise::draw(&mut rng, rows, h, 2, 1, 1);
        let mut tape = Tape::new();
        let (bm, bp, bq) = (
            model.bind(&mut tape),
            policy.bind(&mut tape, false),
            critic.bind(&mut tape, false),
        );
        let sv = tape.constant(s0);
        let ro = model_rollout(&mut tape, &bm, &spec, &bp, sv, None, h, &noise).unwrap();
        let seg = rollout_segment(&mut tape, &ro, &bp).unwrap();
        let qh = q_h_expansion(
            &mut tape,
            &cfg,
            &spec,
            &bm,
            &bp,
            &bq,
            sv,
            ro.actions[0],
            &noise,
        )
        .unwrap();
        let qr = retrace_expansion(
            &mut tape,
            &cfg,
            &spec,
            &bp,
            &bq,
            &seg,
            h,
            &noise.policy[1..],
        )
        .unwrap();
        worst = worst.max(max_rel(tape.value(qh).data(), tape.value(qr).data()));
    }
    verdict(worst < 1e-9, format!("max relative gap {worst:.2e} over 1000 on-policy segments per H in {{1,3,5,10}} (limit 1e-9)"))
}

// 2 -------------------------------------------------------------------------

/// Everything an update sequence leaves behind: every gradient handed to the
/// optimizers, every record and every per-step snapshot of the agent.
#[derive(Default)]
struct Trace {
    grads: Vec<(Component, u64, Vec<Tensor>)>,
    records: Vec<Record>,
    agents: Vec<(u64, ParamMap)>,
}

impl Observer for Trace {
    fn gradients(&mut self, c: Component, u: u64, g: &[Tensor]) {
        self.grads.push((c, u, g.to_vec()));
    }
}

impl Sink for Trace {
    fn record(&mut self, rec: Record) -> vexp_core::Result<()> {
        if rec.name != "model" {
            self.records.push(rec);
        }
        Ok(())
    }
    fn checkpoint(&mut self, env_step: u64, snap: &ParamMap) -> vexp_core::Result<()> {
        self.agents.push((env_step, snap.sub("agent")));
        Ok(())
    }
}

fn degeneration_config(algorithm: &str, mode: &str, model: &str) -> TrainConfig {
    let text = format!(
        r#"
env = "pendulum"
algorithm = "{algorithm}"
mode = "{mode}"
model = "{model}"
horizon = 0
batch_size = 64
min_replay = 64
total_steps = 163
hidden = [32, 32]
ensemble_hidden = [16, 16]
model_every = 50
model_batches = 5
model_batch_size = 32
eval_every = 50
eval_episodes = 2
grad_stats_every = 25
checkpoint_every = 1
"#
    );
    RunConfig::resolve(&[text.parse::<Table>().unwrap()])
        .unwrap()
        .train_config()
}

fn h0_degeneration() -> Verdict {
    let mut bad = Vec::new();
    let mut compared = 0;
    for alg in ["sac", "ddpg"] {
        let mut base = Trace::default();
        let out = train(&degeneration_config(alg, "vanilla", "none"), 7, &mut base).unwrap();
        assert_eq!(out.updates, 100);
        for (mode, model) in [
            ("ce", "oracle"),
            ("ce", "ensemble"),
            ("ae", "oracle"),
            ("ae", "ensemble"),
            ("retrace", "none"),
        ] {
            let mut t = Trace::default();
            train(&degeneration_config(alg, mode, model), 7, &mut t).unwrap();
            compared += 1;
            if t.grads != base.grads || t.records != base.records || t.agents != base.agents {
                bad.push(format!("{alg}/{mode}/{model}"));
            }
        }
        assert_eq!(base.grads.len(), 200);
    }
    if bad.is_empty() {
        verdict(true, format!("{compared} H=0 runs replay vanilla bit for bit over 100 updates: gradients, records and per-step parameters"))
    } else {
        verdict(false, format!("differs from vanilla: {}", bad.join(", ")))
    }
}

// 3 -------------------------------------------------------------------------

type Build = fn(&mut Tape, &[Var]) -> vexp_core::Result<Var>;

struct Kind {
    name: &'static str,
    shapes: &'static [(usize, usize)],
    accept: fn(f64) -> bool,
    build: Build,
}

fn any(_: f64) -> bool {
    true
}

fn away_from_zero(v: f64) -> bool {
    v.abs() > 0.1
}

fn positive(v: f64) -> bool {
    v > 0.1
}

fn away_from_clip(v: f64) -> bool {
    (v.abs() - 1.0).abs() > 0.02
}

fn op_kinds() -> Vec<Kind> {
    const M: &[(usize, usize)] = &[(3, 4), (3, 4)];
    macro_rules! k {
        ($name:expr, $shapes:expr, $accept:expr, $build:expr) => {
            Kind {
                name: $name,
                shapes: $shapes,
                accept: $accept,
                build: $build,
            }
        };
    }
    vec![
        k!("matmul", &[(3, 4), (4, 2)], any, |t, v| t
            .matmul(v[0], v[1])),
        k!("affine", &[(3, 4), (4, 2), (1, 2)], any, |t, v| t
            .affine(v[0], v[1], v[2])),
        k!("add", M, any, |t, v| t.add(v[0], v[1])),
        k!("sub", M, any, |t, v| t.sub(v[0], v[1])),
        k!("mul", M, any, |t, v| t.mul(v[0], v[1])),
        k!("div", M, away_from_zero, |t, v| t.div(v[0], v[1])),
        k!("minimum", M, any, |t, v| t.minimum(v[0], v[1])),
        k!("relu", M, away_from_zero, |t, v| t.relu(v[0])),
        k!("tanh", M, any, |t, v| t.tanh(v[0])),
        k!("exp", M, any, |t, v| t.exp(v[0])),
        k!("log", M, positive, |t, v| t.log(v[0])),
        k!("square", M, any, |t, v| t.square(v[0])),
        k!("sin", M, any, |t, v| t.sin(v[0])),
        k!("cos", M, any, |t, v| t.cos(v[0])),
        k!("softplus", M, any, |t, v| t.softplus(v[0])),
        k!("scale", M, any, |t, v| t.scale(v[0], -1.7)),
        k!("neg", M, any, |t, v| t.neg(v[0])),
        k!("add_scalar", M, any, |t, v| t.add_scalar(v[0], 0.3)),
        k!("sum", M, any, |t, v| t.sum(v[0])),
        k!("mean", M, any, |t, v| t.mean(v[0])),
        k!("sum_axis0", M, any, |t, v| t.sum_axis(v[0], 0)),
        k!("sum_axis1", M, any, |t, v| t.sum_axis(v[0], 1)),
        k!("mean_axis0", M, any, |t, v| t.mean_axis(v[0], 0)),
        k!("mean_axis1", M, any, |t, v| t.mean_axis(v[0], 1)),
        k!("concat0", &[(2, 4), (3, 4)], any, |t, v| t
            .concat(&[v[0], v[1]], 0)),
        k!("concat1", &[(3, 1), (3, 2)], any, |t, v| t
            .concat(&[v[0], v[1]], 1)),
        k!("broadcast_row", &[(1, 4)], any, |t, v| t
            .broadcast(v[0], 3, 4)),
        k!("broadcast_col", &[(3, 1)], any, |t, v| t
            .broadcast(v[0], 3, 4)),
        k!("slice0", M, any, |t, v| t.slice(v[0], 0, 1, 3)),
        k!("slice1", M, any, |t, v| t.slice(v[0], 1, 1, 3)),
        k!("column", M, any, |t, v| t.column(v[0], 2)),
        k!("gather_rows", M, any, |t, v| t
            .gather_rows(v[0], &[2, 0, 2])),
        k!("reshape", M, any, |t, v| t.reshape(v[0], &[2, 6])),
        k!("gaussian_sample", M, any, |t, v| {
            let noise = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
            t.gaussian_sample(v[0], v[1], &noise)
        }),
        k!("clip", M, away_from_clip, |t, v| t.clip(v[0], -1.0, 1.0)),
    ]
}

fn draw(rng: &mut Rng, rows: usize, cols: usize, accept: fn(f64) -> bool) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let v = 1.2 * normal(rng);
        if v.abs() < 2.5 && accept(v) {
            data.push(v);
        }
    }
    Tensor::matrix(rows, cols, data)
}

fn weighted_sum(t: &mut Tape, y: Var, w: &Tensor) -> vexp_core::Result<Var> {
    let w = t.constant(w.clone());
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check(
    name: &str,
    tol: f64,
    worst: &mut Vec<String>,
    f: impl Fn(&mut Tape, &[Var]) -> vexp_core::Result<Var>,
    params: &[Tensor],
) -> bool {
    let report = GradCheck::with_tolerance(tol).run(f, params).unwrap();
    if !report.passed() {
        worst.push(format!("{name} {:.1e}", report.worst()));
    }
    report.passed()
}

fn autodiff_soundness() -> Verdict {
    let mut failures = Vec::new();
    let mut rng = stream(303, Stream::Analysis);
    let kinds = op_kinds();
    for kind in &kinds {
        for _ in 0..20 {
            let inputs: Vec<Tensor> = kind
                .shapes
                .iter()
                .map(|&(r, c)| draw(&mut rng, r, c, kind.accept))
                .collect();
            if kind.name == "minimum"
                && inputs[0]
                    .data()
                    .iter()
                    .zip(inputs[1].data())
                    .any(|(a, b)| (a - b).abs() < 1e-2)
            {
                continue;
            }
            let mut probe = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| probe.constant(x.clone())).collect();
            let out = (kind.build)(&mut probe, &vs).unwrap();
            let shape = probe.value(out).shape().to_vec();
            let w = draw(&mut rng, shape[0], shape.get(1).copied().unwrap_or(1), any);
            let build = kind.build;
            if !check(
                kind.name,
                1e-4,
                &mut failures,
                |t, v| {
                    let y = build(t, v)?;
                    weighted_sum(t, y, &w)
                },
                &inputs,
            ) {
                break;
            }
        }
    }

    // composite losses on small networks
    let (spec, policy, critic, mut rng) = sac_nets(304, &[16, 16]);
    let ddpg = Policy::new(
        PolicyKind::Deterministic {
            exploration_std: 0.1,
        },
        3,
        1,
        &[16, 16],
        &mut rng,
    );
    let oracle = DynamicsModel::oracle(spec);
    let ensemble = DynamicsModel::Ensemble(EnsembleModel::new(
        spec,
        EnsembleConfig {
            hidden: vec![16, 16],
            ..EnsembleConfig::default()
        },
        &mut rng,
    ));
    let rows = 6;
    let s = random_states(&mut rng, rows, 2, 2.0);
    let a = normal_tensor(&mut rng, rows, 1).map(f64::tanh);
    let r = normal_tensor(&mut rng, rows, 1);
    let s1 = random_states(&mut rng, rows, 2, 2.0);
    let n1 = normal_tensor(&mut rng, rows, 1);
    let cfg = |h: usize, alpha: Option<f64>, particles: usize| ExpansionConfig {
        horizon: h,
        gamma: 0.95,
        lambda: 1.0,
        alpha,
        particles,
    };

    // critic regression on vanilla, expanded and Retrace targets
    let mut targets = Vec::new();
    let mut tape = Tape::new();
    let (bp, bq, bm) = (
        policy.bind(&mut tape, false),
        critic.bind(&mut tape, false),
        oracle.bind(&mut tape),
    );
    targets.push((
        "critic/vanilla",
        critic_target(
            &mut tape,
            &cfg(0, Some(0.2), 1),
            &spec,
            None,
            &bp,
            &bq,
            &r,
            &s1,
            &n1,
            None,
        )
        .unwrap()
        .values,
    ));
    let ce_noise = RolloutNoise::draw(&mut rng, rows * 4, 3, 2, 1, 1);
    targets.push((
        "critic/ce",
        critic_target(
            &mut tape,
            &cfg(3, Some(0.2), 4),
            &spec,
            Some(&bm),
            &bp,
            &bq,
            &r,
            &s1,
            &n1,
            Some(&ce_noise),
        )
        .unwrap()
        .values,
    ));
    let rt_noise = RolloutNoise::draw(&mut rng, rows, 4, 2, 1, 1);
    let sv = tape.constant(s.clone());
    let ro = model_rollout(&mut tape, &bm, &spec, &bp, sv, None, 4, &rt_noise).unwrap();
    let seg = rollout_segment(&mut tape, &ro, &bp).unwrap();
    let rt = retrace_expansion(
        &mut tape,
        &cfg(4, Some(0.2), 1),
        &spec,
        &bp,
        &bq,
        &seg,
        4,
        &rt_noise.policy[1..],
    )
    .unwrap();
    targets.push(("critic/retrace", tape.value(rt).clone()));
    let critic_params: Vec<Tensor> = critic.params().into_iter().cloned().collect();
    for (name, y) in &targets {
        check(
            name,
            1e-4,
            &mut failures,
            |t, v| critic_loss(t, &spec, &critic.bind_vars(v), &s, &a, y),
            &critic_params,
        );
    }

    // actor objectives, one-step and through H model steps
    for (pname, pol, alpha) in [("sac", &policy, Some(0.2)), ("ddpg", &ddpg, None)] {
        let params: Vec<Tensor> = pol.params().into_iter().cloned().collect();
        let n0 = normal_tensor(&mut rng, rows, 1);
        check(
            &format!("actor/{pname}"),
            1e-4,
            &mut failures,
            |t, v| {
                let bq = critic.bind(t, false);
                Ok(actor_loss(
                    t,
                    &cfg(0, alpha, 1),
                    &spec,
                    None,
                    &pol.bind_vars(v),
                    &bq,
                    &s,
                    &n0,
                    None,
                )?
                .0)
            },
            &params,
        );
        for (mname, model) in [("oracle", &oracle), ("ensemble", &ensemble)] {
            let noise = RolloutNoise::draw(&mut rng, rows * 2, 3, 2, 1, model.num_members());
            check(
                &format!("ae/{pname}/{mname}"),
                1e-3,
                &mut failures,
                |t, v| {
                    let bq = critic.bind(t, false);
                    let bm = model.bind(t);
                    Ok(actor_loss(
                        t,
                        &cfg(3, alpha, 2),
                        &spec,
                        Some(&bm),
                        &pol.bind_vars(v),
                        &bq,
                        &s,
                        &n0,
                        Some(&noise),
                    )?
                    .0)
                },
                &params,
            );
        }
    }
    let composite = 3 + 2 * 3;
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "{} tape operations at 20 points each (rel 1e-4), {composite} composite losses: critic (vanilla, CE, Retrace) and actor at 1e-4, H=3 actor expansion (oracle, ensemble) at 1e-3",
                kinds.len()
            )
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

// 4 -------------------------------------------------------------------------

/// Replays the supplied noise as the action.
struct Scripted;

impl Actor for Scripted {
    fn sample(
        &self,
        tape: &mut Tape,
        _obs: Var,
        noise: &Tensor,
    ) -> vexp_core::Result<PolicySample> {
        Ok(PolicySample {
            action: tape.constant(noise.clone()),
            log_prob: None,
        })
    }
    fn log_prob(&self, tape: &mut Tape, obs: Var, _action: Var) -> vexp_core::Result<Var> {
        let rows = tape.value(obs).rows();
        Ok(tape.constant(Tensor::zeros(&[rows, 1])))
    }
}

fn oracle_fidelity() -> Verdict {
    let h = 30;
    let rows = 32;
    let mut rng = stream(404, Stream::Analysis);
    let mut mismatches = 0;
    for spec in [EnvSpec::pendulum(), EnvSpec::cartpole()] {
        let sd = spec.state_dim();
        let start = random_states(&mut rng, rows, sd, 1.5);
        // actions partly outside [-1, 1] so clamping is exercised too
        let noise = RolloutNoise::draw(&mut rng, rows, h, sd, 1, 1);
        let mut tape = Tape::new();
        let bm = DynamicsModel::oracle(spec);
        let bm = bm.bind(&mut tape);
        let sv = tape.constant(start.clone());
        let ro = model_rollout(&mut tape, &bm, &spec, &Scripted, sv, None, h, &noise).unwrap();
        for i in 0..rows {
            let mut st = EnvState {
                x: start.row_slice(i).to_vec(),
                step: 0,
            };
            for t in 0..h {
                let (next, rew) = env_step(&spec, &st, noise.policy[t].row_slice(i)).unwrap();
                if rew.to_bits() != tape.value(ro.rewards[t]).get(i, 0).to_bits() {
                    mismatches += 1;
                }
                let model_state = tape.value(ro.states[t + 1]).row_slice(i);
                if next
                    .x
                    .iter()
                    .zip(model_state)
                    .any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    mismatches += 1;
                }
                st = next;
            }
        }
    }
    verdict(
        mismatches == 0,
        format!("{mismatches} bitwise mismatches in states or rewards over 30-step scripted rollouts, 32 starts, pendulum and cartpole"),
    )
}

// 5 -------------------------------------------------------------------------

/// Forward-mode number carrying derivatives with respect to four parameters.
#[derive(Clone, Copy)]
struct Dual {
    v: f64,
    d: [f64; 4],
}

impl Dual {
    fn c(v: f64) -> Self {
        Dual { v, d: [0.0; 4] }
    }
    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Dual { v, d }
    }
    fn lift(self, v: f64, dv: f64) -> Self {
        Dual {
            v,
            d: self.d.map(|x| x * dv),
        }
    }
    fn add(self, o: Dual) -> Dual {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a += b);
        Dual { v: self.v + o.v, d }
    }
    fn scale(self, k: f64) -> Dual {
        self.lift(self.v * k, k)
    }
    fn sub(self, o: Dual) -> Dual {
        self.add(o.scale(-1.0))
    }
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; 4];
        for (k, dk) in d.iter_mut().enumerate() {
            *dk = self.d[k] * o.v + self.v * o.d[k];
        }
        Dual { v: self.v * o.v, d }
    }
    fn tanh(self) -> Dual {
        let t = self.v.tanh();
        self.lift(t, 1.0 - t * t)
    }
    fn exp(self) -> Dual {
        let e = self.v.exp();
        self.lift(e, e)
    }
    fn ln(self) -> Dual {
        self.lift(self.v.ln(), 1.0 / self.v)
    }
}

/// Closed-form H-step actor objective and its gradient on the scalar
/// system `s' = a s + b u`, `r = -q s^2 - c u^2`, for a single-layer
/// squashed policy and a zero critic.
fn lq_closed_form(
    p: &LinearParams,
    gamma: f64,
    alpha: Option<f64>,
    theta: &[f64],
    s0: &[f64],
    noise: &[Vec<f64>],
    h: usize,
) -> Vec<f64> {
    let th: Vec<Dual> = theta
        .iter()
        .enumerate()
        .map(|(i, &v)| Dual::var(v, i))
        .collect();
    let (wm, ws, bm, bs) = if alpha.is_some() {
        (th[0], Some(th[1]), th[2], Some(th[3]))
    } else {
        (th[0], None, th[1], None)
    };
    let mut total = Dual::c(0.0);
    for (i, &x0) in s0.iter().enumerate() {
        let mut s = Dual::c(x0);
        let mut q = Dual::c(0.0);
        let mut disc = 1.0;
        let mut ent0 = Dual::c(0.0);
        for t in 0..=h {
            let e = noise[t][i];
            let mean = wm.mul(s).add(bm);
            let (u, lp) = match (ws, bs) {
                (Some(ws), Some(bs)) => {
                    let ls = ws.mul(s).add(bs);
                    let u = mean.add(ls.exp().scale(e)).tanh();
                    let sq = Dual::c(1.0 + 1e-6).sub(u.mul(u));
                    let lp = Dual::c(-0.5 * e * e - 0.5 * (2.0 * std::f64::consts::PI).ln())
                        .sub(ls)
                        .sub(sq.ln());
                    (u, lp)
                }
                _ => (mean.tanh(), Dual::c(0.0)),
            };
            let ent = lp.scale(alpha.unwrap_or(0.0));
            if t == 0 {
                ent0 = ent;
            }
            if t == h {
                q = q.sub(ent.scale(disc));
                break;
            }
            let r = s
                .mul(s)
                .scale(-p.state_cost)
                .sub(u.mul(u).scale(p.action_cost));
            q = q.add(if t == 0 { r } else { r.sub(ent) }.scale(disc));
            s = s.scale(p.a).add(u.scale(p.b));
            disc *= gamma;
        }
        total = total.add(ent0.sub(q));
    }
    let n = s0.len() as f64;
    total.d[..theta.len()].iter().map(|g| g / n).collect()
}

fn lq_oracle() -> Verdict {
    let p = LinearParams {
        a: 0.9,
        b: 0.5,
        state_cost: 1.0,
        action_cost: 0.1,
    };
    let spec = EnvSpec::linear(p, 50);
    let model = DynamicsModel::oracle(spec);
    let gamma = 0.9;
    let mut worst: f64 = 0.0;
    for (kind, theta, alpha) in [
        (PolicyKind::Gaussian, vec![-0.4, 0.2, 0.1, -1.0], Some(0.2)),
        (
            PolicyKind::Deterministic {
                exploration_std: 0.1,
            },
            vec![-0.6, 0.05],
            None,
        ),
    ] {
        let mut rng = stream(505, Stream::Init);
        let mut policy = Policy::new(kind, 1, 1, &[], &mut rng);
        let mut critic = DoubleQ::new(1, 1, &[4], &mut rng);
        for t in critic.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let outs = theta.len() / 2;
        let mut map = ParamMap::new();
        map.insert("l0.w", Tensor::matrix(1, outs, theta[..outs].to_vec()));
        map.insert("l0.b", Tensor::matrix(1, outs, theta[outs..].to_vec()));
        policy.load_params(&map).unwrap();
        for h in [1, 2, 3] {
            let s0 = vec![1.0, -0.5, 0.25, 2.0];
            let noise = RolloutNoise::draw(&mut rng, 4, h, 1, 1, 1);
            let n0 = normal_tensor(&mut rng, 4, 1);
            let mut eps = vec![n0.data().to_vec()];
            eps.extend(noise.policy[1..].iter().map(|t| t.data().to_vec()));
            let want = lq_closed_form(&p, gamma, alpha, &theta, &s0, &eps, h);
            let cfg = ExpansionConfig {
                horizon: h,
                gamma,
                lambda: 1.0,
                alpha,
                particles: 1,
            };
            let mut tape = Tape::new();
            let bp = policy.bind(&mut tape, true);
            let bq = critic.bind(&mut tape, false);
            let bm = model.bind(&mut tape);
            let (l, _) = actor_loss(
                &mut tape,
                &cfg,
                &spec,
                Some(&bm),
                &bp,
                &bq,
                &Tensor::column(s0),
                &n0,
                Some(&noise),
            )
            .unwrap();
            let grads = tape.backward(l).unwrap();
            let got: Vec<f64> = collect_grads(&grads, &bp.vars(), &policy.params())
                .iter()
                .flat_map(|t| t.data().to_vec())
                .collect();
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs() / b.abs().max(1e-12));
            }
        }
    }
    verdict(worst < 1e-4, format!("max relative gradient error {worst:.2e} for SAC and DDPG at H in {{1,2,3}} (limit 1e-4)"))
}

// 8 -------------------------------------------------------------------------

fn particle_averaging() -> Verdict {
    let (spec, policy, critic, mut rng) = sac_nets(808, &[64, 64]);
    let model = DynamicsModel::oracle(spec);
    let resamples = 10_000;
    let chunk = 500;
    let pairs = 3;
    let s = random_states(&mut rng, pairs, 2, 1.5);
    let a = normal_tensor(&mut rng, pairs, 1).map(f64::tanh);
    let cfg = |particles: usize| ExpansionConfig {
        horizon: 3,
        gamma: 0.95,
        lambda: 1.0,
        alpha: Some(0.2),
        particles,
    };
    let mut ratios = Vec::new();
    for i in 0..pairs {
        let (si, ai) = (s.select_rows(&[i]), a.select_rows(&[i]));
        let draws = |p: usize, rng: &mut Rng| -> Vec<f64> {
            let mut out = Vec::with_capacity(resamples);
            for _ in 0..resamples / chunk {
                let q = particle_targets(
                    &cfg(chunk * p),
                    &spec,
                    &model,
                    &policy,
                    &critic,
                    &si,
                    &ai,
                    rng,
                )
                .unwrap();
                out.extend(q.data().chunks(p).map(|c| c.iter().sum::<f64>() / p as f64));
            }
            out
        };
        let single = sample_variance(&draws(1, &mut rng));
        for p in [10, 30] {
            let averaged = sample_variance(&draws(p, &mut rng));
            ratios.push((i, p, averaged / (single / p as f64)));
        }
    }
    let ok = ratios.iter().all(|&(_, _, r)| (0.5..=2.0).contains(&r));
    let shown: Vec<String> = ratios
        .iter()
        .map(|(i, p, r)| format!("pair{i}/P{p} {r:.3}"))
        .collect();
    verdict(
        ok,
        format!(
            "var(P-average) / (var(single) / P) with 10^4 resamples at H=3: {} (allowed [0.5, 2])",
            shown.join(", ")
        ),
    )
}

// 11 ------------------------------------------------------------------------

fn determinism() -> Verdict {
    let base = r#"
env = "pendulum"
mode = "ce"
model = "ensemble"
horizon = 2
particles = 2
total_steps = 400
min_replay = 128
batch_size = 64
hidden = [32, 32]
ensemble_hidden = [16, 16]
model_every = 100
model_batches = 10
model_batch_size = 32
eval_every = 100
eval_episodes = 2
grad_stats_every = 50
checkpoint_every = 200
seeds = [3, 4]
"#;
    let cfg = RunConfig::resolve(&[base.parse::<Table>().unwrap()]).unwrap();
    let list = cells(&cfg);
    let quiet = |_: &Cell, _: &CellStatus| {};
    let roots: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    run_matrix(&list[..1], roots[0].path(), 1, &quiet);
    run_matrix(&list[..1], roots[1].path(), 1, &quiet);
    run_matrix(&list, roots[2].path(), 2, &quiet);
    let read = |root: &Path, c: &Cell| fs::read(c.dir(root).join(LOG_FILE)).unwrap();
    let ckpts = |root: &Path, c: &Cell| -> Vec<Vec<u8>> {
        list_checkpoints(&c.dir(root).join(CHECKPOINT_DIR))
            .unwrap()
            .iter()
            .map(|(_, p)| fs::read(p).unwrap())
            .collect()
    };
    let first = read(roots[0].path(), &list[0]);
    let same = first == read(roots[1].path(), &list[0])
        && first == read(roots[2].path(), &list[0])
        && ckpts(roots[0].path(), &list[0]) == ckpts(roots[2].path(), &list[0]);
    let other_differs = read(roots[2].path(), &list[1]) != first;
    verdict(
        same && other_differs,
        format!(
            "CE-ensemble cell rerun and run alongside another cell on 2 workers: log.csv ({} bytes) and checkpoints {}; a different seed {}",
            first.len(),
            if same { "bit-identical" } else { "DIFFER" },
            if other_differs { "differs" } else { "DOES NOT differ" }
        ),
    )
}

// cached training runs -------------------------------------------------------

struct Cache {
    root: PathBuf,
    cells: Vec<Cell>,
    full: bool,
}

impl Cache {
    fn new() -> Self {
        let path = workspace().join("configs/acceptance.toml");
        let exp = load_matrix(Some(&path), &Table::new()).unwrap();
        Cache {
            root: cache_dir(),
            cells: exp.configs.iter().flat_map(cells).collect(),
            full: flag("VEXP_ACCEPTANCE_FULL"),
        }
    }

    /// Finished cells matching `pick`, training missing ones when allowed.
    fn get(&self, pick: impl Fn(&RunConfig) -> bool) -> Result<Vec<Cell>, String> {
        let chosen: Vec<Cell> = self
            .cells
            .iter()
            .filter(|c| pick(&c.config))
            .cloned()
            .collect();
        assert!(!chosen.is_empty(), "no acceptance cell matches");
        let missing: Vec<Cell> = chosen
            .iter()
            .filter(|c| !c.is_done(&self.root))
            .cloned()
            .collect();
        if !missing.is_empty() {
            if !self.full {
                return Err(format!(
                    "{} of {} cells not trained under {} (run `vexp matrix --config configs/acceptance.toml --out {}` or set VEXP_ACCEPTANCE_FULL=1)",
                    missing.len(),
                    chosen.len(),
                    self.root.display(),
                    self.root.display()
                ));
            }
            fs::create_dir_all(&self.root).unwrap();
            let rep = run_matrix(&missing, &self.root, 1, &|c: &Cell, s: &CellStatus| {
                eprintln!("trained {}: {s:?}", c.id())
            });
            if rep.failures() > 0 {
                return Err(format!("{} cells failed to train", rep.failures()));
            }
        }
        Ok(chosen)
    }

    fn summaries(&self, pick: impl Fn(&RunConfig) -> bool) -> Result<Vec<CellSummary>, String> {
        let list = self.get(pick)?;
        Ok(list
            .iter()
            .map(|c| summarize_cell(&c.dir(&self.root), 0.9).unwrap())
            .collect())
    }
}

fn is(c: &RunConfig, alg: &str, mode: &str, model: &str, h: usize) -> bool {
    c.algorithm == alg && c.mode == mode && c.model == model && c.horizon == h
}

fn final_snapshot(cache: &Cache, cell: &Cell) -> vexp_core::agents::Snapshot {
    let dir = cell.dir(&cache.root).join(CHECKPOINT_DIR);
    let (_, path) = list_checkpoints(&dir)
        .unwrap()
        .pop()
        .expect("final checkpoint");
    load_snapshot(&cell.config, &path).unwrap()
}

// 6 -------------------------------------------------------------------------

fn variance_growth(cache: &Cache) -> Verdict {
    let sac = match cache.get(|c| is(c, "sac", "vanilla", "none", 0)) {
        Ok(v) => v,
        Err(e) => return (Outcome::Skip, e),
    };
    let ddpg = match cache.get(|c| is(c, "ddpg", "vanilla", "none", 0)) {
        Ok(v) => v,
        Err(e) => return (Outcome::Skip, e),
    };
    let horizons = [1, 3, 5, 10];
    let mut monotone = 0;
    let mut shown = Vec::new();
    for cell in sac.iter().filter(|c| c.seed < 3) {
        let snap = final_snapshot(cache, cell);
        let spec = cell.config.env_spec();
        let model = DynamicsModel::oracle(spec);
        let mut rng = stream(mix(cell.config.cell_seed(cell.seed), 6), Stream::Analysis);
        let batch = snap.buffer.sample_transitions(256, &mut rng).unwrap();
        let mut vars = Vec::new();
        for h in horizons {
            let cfg = ExpansionConfig {
                horizon: h,
                gamma: cell.config.gamma,
                lambda: 1.0,
                alpha: snap.agent.alpha(),
                particles: 100,
            };
            let mut acc = 0.0;
            for lo in (0..256).step_by(32) {
                let rows: Vec<usize> = (lo..lo + 32).collect();
                let (s, a) = (
                    batch.states.select_rows(&rows),
                    batch.actions.select_rows(&rows),
                );
                let q = particle_targets(
                    &cfg,
                    &spec,
                    &model,
                    snap.agent.policy(),
                    snap.agent.target_critic(),
                    &s,
                    &a,
                    &mut rng,
                )
                .unwrap();
                for i in 0..rows.len() {
                    let col: Vec<f64> = (0..100).map(|k| q.get(k, i)).collect();
                    acc += sample_variance(&col);
                }
            }
            vars.push(acc / 256.0);
        }
        if vars.windows(2).all(|w| w[0] <= w[1]) {
            monotone += 1;
        }
        shown.push(format!(
            "s{}: {}",
            cell.seed,
            vars.iter()
                .map(|v| format!("{v:.3e}"))
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }

    // deterministic policy: every particle is the same number
    let cell = &ddpg[0];
    let snap = final_snapshot(cache, cell);
    let spec = cell.config.env_spec();
    let model = DynamicsModel::oracle(spec);
    let mut rng = stream(mix(cell.config.cell_seed(cell.seed), 6), Stream::Analysis);
    let batch = snap.buffer.sample_transitions(256, &mut rng).unwrap();
    let mut spread = 0usize;
    for h in horizons {
        let cfg = ExpansionConfig {
            horizon: h,
            gamma: cell.config.gamma,
            lambda: 1.0,
            alpha: None,
            particles: 100,
        };
        let q = particle_targets(
            &cfg,
            &spec,
            &model,
            snap.agent.policy(),
            snap.agent.target_critic(),
            &batch.states,
            &batch.actions,
            &mut rng,
        )
        .unwrap();
        for i in 0..256 {
            let first = q.get(0, i);
            spread += (0..100)
                .filter(|&k| q.get(k, i).to_bits() != first.to_bits())
                .count();
        }
    }
    verdict(
        monotone >= 2 && spread == 0,
        format!(
            "SAC mean particle variance at H=1,3,5,10 non-decreasing in {monotone}/3 seeds [{}]; DDPG particles differing from their first: {spread}",
            shown.join("; ")
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn wasserstein_decrease(cache: &Cache) -> Verdict {
    let sac = match cache.get(|c| is(c, "sac", "vanilla", "none", 0)) {
        Ok(v) => v,
        Err(e) => return (Outcome::Skip, e),
    };
    let mut wins = 0;
    let mut shown = Vec::new();
    for cell in sac.iter().filter(|c| c.seed < 3) {
        let snap = final_snapshot(cache, cell);
        let acfg = AnalysisConfig {
            horizons: vec![1, 10],
            samples: 1000,
            particles: 100,
            mc_steps: 300,
            gamma: cell.config.gamma,
            ..AnalysisConfig::default()
        };
        let rows = analyze_snapshot(
            &cell.config,
            &snap,
            &acfg,
            mix(cell.config.cell_seed(cell.seed), 7),
        )
        .unwrap();
        let (w1, w10) = (rows[0].wasserstein, rows[1].wasserstein);
        if w10 < w1 {
            wins += 1;
        }
        shown.push(format!("s{}: W1 {w1:.3} -> W10 {w10:.3}", cell.seed));
    }
    verdict(
        wins >= 2,
        format!(
            "D_W^10 < D_W^1 in {wins}/3 seeds against 300-step MC returns [{}]",
            shown.join("; ")
        ),
    )
}

// 9 -------------------------------------------------------------------------

fn fmt_steps(m: Option<f64>) -> String {
    m.map_or_else(|| "not reached".to_string(), |v| format!("{v}"))
}

fn learning(cache: &Cache) -> Verdict {
    let groups = [
        cache.summaries(|c| is(c, "sac", "vanilla", "none", 0)),
        cache.summaries(|c| is(c, "sac", "ce", "oracle", 3)),
        cache.summaries(|c| is(c, "sac", "ce", "oracle", 10)),
    ];
    let mut meds = Vec::new();
    for g in groups {
        match g {
            Ok(rows) => meds.push(median_steps(
                &rows
                    .iter()
                    .map(|r| r.steps_to_threshold)
                    .collect::<Vec<_>>(),
            )),
            Err(e) => return (Outcome::Skip, e),
        }
    }
    let (s0, s3, s10) = (meds[0], meds[1], meds[2]);
    let inf = |m: Option<f64>| m.unwrap_or(f64::INFINITY);
    let vanilla_ok = s0.is_some_and(|v| v <= 30_000.0);
    let ce_ok = s3.is_some() && inf(s3) <= inf(s0);
    // an unreached threshold counts as more steps than any budget
    let (g03, g310) = (inf(s0) - inf(s3), inf(s3) - inf(s10));
    let diminishing = !g03.is_nan() && !g310.is_nan() && g03 >= g310;
    verdict(
        vanilla_ok && ce_ok && diminishing,
        format!(
            "median steps to 180: vanilla {} (<= 30000: {}), CE oracle H=3 {} (<= vanilla: {}), H=10 {}; gains {g03} >= {g310}: {}",
            fmt_steps(s0),
            vanilla_ok,
            fmt_steps(s3),
            ce_ok,
            fmt_steps(s10),
            diminishing
        ),
    )
}

// 10 ------------------------------------------------------------------------

fn ensemble_parity(cache: &Cache) -> Verdict {
    let finals = |rows: Vec<CellSummary>| -> (Vec<f64>, usize) {
        let early = rows.iter().filter(|r| r.terminated_early()).count();
        (
            rows.iter()
                .map(|r| r.final_return.unwrap_or(f64::NAN))
                .collect(),
            early,
        )
    };
    let (oracle, ens) = match (
        cache.summaries(|c| is(c, "sac", "ce", "oracle", 3)),
        cache.summaries(|c| is(c, "sac", "ce", "ensemble", 3)),
    ) {
        (Ok(a), Ok(b)) => (finals(a), finals(b)),
        (Err(e), _) | (_, Err(e)) => return (Outcome::Skip, e),
    };
    let (mo, me) = (median(&oracle.0), median(&ens.0));
    let gap = (me - mo).abs() / mo.abs();
    verdict(
        gap <= 0.1,
        format!(
            "median final return: ensemble {me:.2}, oracle {mo:.2}, relative gap {:.1}% (limit 10%); early terminations {}/{}",
            100.0 * gap,
            ens.1,
            oracle.1
        ),
    )
}

// report --------------------------------------------------------------------

#[test]
fn acceptance_report() {
    let cache = Cache::new();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("retrace reduction", Box::new(retrace_reduction)),
        ("H=0 degeneration", Box::new(h0_degeneration)),
        ("autodiff soundness", Box::new(autodiff_soundness)),
        ("oracle fidelity", Box::new(oracle_fidelity)),
        ("linear-quadratic oracle", Box::new(lq_oracle)),
        ("variance growth", Box::new(|| variance_growth(&cache))),
        (
            "Wasserstein decrease",
            Box::new(|| wasserstein_decrease(&cache)),
        ),
        ("particle averaging", Box::new(particle_averaging)),
        ("learning at desk scale", Box::new(|| learning(&cache))),
        (
            "learned-vs-oracle parity",
            Box::new(|| ensemble_parity(&cache)),
        ),
        ("determinism", Box::new(determinism)),
    ];
    let mut lines = Vec::new();
    let mut not_passed = 0;
    // libtest has already printed `test acceptance_report ... ` without a newline
    let _ = writeln!(std::io::stderr());
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (outcome, detail) = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            (
                Outcome::Fail,
                format!("panicked: {}", msg.unwrap_or_default()),
            )
        });
        let tag = match outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Skip => "SKIP",
        };
        if outcome != Outcome::Pass {
            not_passed += 1;
        }
        let line = format!(
            "{tag} {:>2} {name}: {detail} [{:.1}s]",
            i + 1,
            t.elapsed().as_secs_f64()
        );
        // written past the test harness's output capture on purpose
        let _ = writeln!(std::io::stderr(), "{line}");
        lines.push(line);
    }
    if fs::create_dir_all(&cache.root).is_ok() {
        let _ = fs::write(cache.root.join("report.txt"), lines.join("\n") + "\n");
    }
    if flag("VEXP_ACCEPTANCE_STRICT") {
        assert_eq!(not_passed, 0, "{not_passed} criteria did not pass");
    }
}
