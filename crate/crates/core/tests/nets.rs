use vexp_core::autodiff::{GradCheck, Tape, Tensor};
use vexp_core::nets::*;
use vexp_core::rng::{normal_tensor, stream, Stream};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn zero_policy(kind: PolicyKind) -> Policy {
    let mut rng = stream(0, Stream::Init);
    let mut p = Policy::new(kind, 3, 1, &[4], &mut rng);
    for t in p.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    p
}

#[test]
fn log_prob_at_zero_mean_unit_std() {
    let p = zero_policy(PolicyKind::Gaussian);
    let mut tape = Tape::new();
    let bp = p.bind(&mut tape, false);
    let obs = tape.constant(Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]));
    let s = bp.sample(&mut tape, obs, &Tensor::scalar(0.0)).unwrap();
    assert_eq!(tape.value(s.action).item(), 0.0);
    let lp = tape.value(s.log_prob.unwrap()).item();
    // standard normal density at 0 with the squash term evaluated at a = 0
    let expect = -0.5 * libm::log(2.0 * core::f64::consts::PI) - libm::log(1.0 + TANH_EPS);
    assert!((lp - expect).abs() < 1e-12, "{lp} vs {expect}");
    assert!((lp - -0.918938).abs() < 2e-6);
}

#[test]
fn squashed_density_integrates_to_one() {
    // Unit-std, shifted-mean tanh-Gaussian, integrated on a fine grid over (-1, 1).
    let mut p = zero_policy(PolicyKind::Gaussian);
    let last = p.params_mut().len() - 1;
    p.params_mut()[last].data_mut()[0] = 0.4;
    let n = 200_000;
    let h = 2.0 / n as f64;
    let acts: Vec<f64> = (0..n).map(|i| -1.0 + (i as f64 + 0.5) * h).collect();
    let mut tape = Tape::new();
    let bp = p.bind(&mut tape, false);
    let obs = tape.constant(Tensor::zeros(&[n, 3]));
    let a = tape.constant(Tensor::matrix(n, 1, acts));
    let lp = bp.log_prob(&mut tape, obs, a).unwrap();
    let mass: f64 = tape
        .value(lp)
        .data()
        .iter()
        .map(|v| libm::exp(*v) * h)
        .sum();
    assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
}

#[test]
fn sampled_log_prob_matches_density_of_the_sample() {
    let mut rng = stream(3, Stream::Init);
    let p = Policy::new(PolicyKind::Gaussian, 3, 2, &[16, 16], &mut rng);
    let obs_t = normal_tensor(&mut rng, 32, 3);
    let noise = normal_tensor(&mut rng, 32, 2);
    let mut tape = Tape::new();
    let bp = p.bind(&mut tape, false);
    let obs = tape.constant(obs_t);
    let s = bp.sample(&mut tape, obs, &noise).unwrap();
    let a = tape.value(s.action).clone();
    let av = tape.constant(a.clone());
    let lp2 = bp.log_prob(&mut tape, obs, av).unwrap();
    let lp1 = tape.value(s.log_prob.unwrap()).clone();
    for r in 0..32 {
        if a.row_slice(r).iter().all(|v| v.abs() < 0.999) {
            assert!((lp1.get(r, 0) - tape.value(lp2).get(r, 0)).abs() < 1e-5);
        }
    }
}

#[test]
fn deterministic_log_prob_is_gaussian_exploration_density() {
    let p = zero_policy(PolicyKind::Deterministic {
        exploration_std: 0.1,
    });
    let mut tape = Tape::new();
    let bp = p.bind(&mut tape, false);
    let obs = tape.constant(Tensor::zeros(&[1, 3]));
    let a = tape.constant(Tensor::scalar(0.05));
    let lpv = bp.log_prob(&mut tape, obs, a).unwrap();
    let lp = tape.value(lpv).item();
    let z: f64 = 0.05 / 0.1;
    let expect = -0.5 * z * z - libm::log(0.1) - HALF_LN_2PI;
    assert!((lp - expect).abs() < 1e-12);
    let s = bp.sample(&mut tape, obs, &Tensor::scalar(3.0)).unwrap();
    assert!(s.log_prob.is_none());
    assert_eq!(tape.value(s.action).item(), 0.0);
}

#[test]
fn policy_log_prob_gradients_match_finite_differences() {
    let mut rng = stream(5, Stream::Init);
    let p = Policy::new(PolicyKind::Gaussian, 3, 2, &[8], &mut rng);
    let obs = normal_tensor(&mut rng, 4, 3);
    let noise = normal_tensor(&mut rng, 4, 2);
    let params: Vec<Tensor> = p.params().into_iter().cloned().collect();
    let report = GradCheck::default()
        .run(
            |tape, vars| {
                let bp = p.bind_vars(vars);
                let o = tape.constant(obs.clone());
                let s = bp.sample(tape, o, &noise)?;
                let lp = s.log_prob.unwrap();
                tape.mean(lp)
            },
            &params,
        )
        .unwrap();
    assert!(report.passed(), "worst {}", report.worst());
}

#[test]
fn log_std_is_clipped() {
    let mut p = zero_policy(PolicyKind::Gaussian);
    let last = p.params_mut().len() - 1;
    p.params_mut()[last].data_mut()[1] = 50.0;
    let mut tape = Tape::new();
    let bp = p.bind(&mut tape, false);
    let obs = tape.constant(Tensor::zeros(&[1, 3]));
    let s = bp.sample(&mut tape, obs, &Tensor::scalar(0.1)).unwrap();
    let expect = libm::tanh(libm::exp(LOG_STD_MAX) * 0.1);
    assert!((tape.value(s.action).item() - expect).abs() < 1e-15);
}

#[test]
fn behaviour_actions_stay_in_bounds() {
    let mut rng = stream(9, Stream::Init);
    for kind in [
        PolicyKind::Gaussian,
        PolicyKind::Deterministic {
            exploration_std: 0.1,
        },
    ] {
        let p = Policy::new(kind, 3, 2, &[8], &mut rng);
        let obs = normal_tensor(&mut rng, 64, 3);
        let noise = normal_tensor(&mut rng, 64, 2).map(|v| v * 30.0);
        let (a, lp) = p.behaviour_action(&obs, &noise).unwrap();
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(lp.shape(), &[64, 1]);
        assert!(lp.all_finite());
    }
}

#[test]
fn soft_update_interpolates() {
    let mut rng = stream(1, Stream::Init);
    let mut online = Mlp::new(&[2, 3, 1], &mut rng);
    for t in online.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 1.0);
    }
    let mut target = online.clone();
    for t in target.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let zero = target.clone();
    soft_update(&mut target, &online, 0.005);
    assert!(target
        .params()
        .iter()
        .all(|t| t.data().iter().all(|&v| v == 0.005)));

    let mut same = zero.clone();
    soft_update(&mut same, &online, 0.0);
    assert_eq!(same, zero);
    let mut copy = zero;
    soft_update(&mut copy, &online, 1.0);
    assert_eq!(copy, online);
}

#[test]
fn target_pair_tracks_online_network() {
    let mut rng = stream(2, Stream::Init);
    let online = DoubleQ::new(3, 1, &[8], &mut rng);
    let mut target = TargetPair::new(&online, 0.5);
    assert_eq!(target.net(), &online);
    let moved = DoubleQ::new(3, 1, &[8], &mut rng);
    target.soft_update(&moved);
    let (t, a, b) = (target.net().params(), online.params(), moved.params());
    for i in 0..t.len() {
        for j in 0..t[i].len() {
            let expect = 0.5 * b[i].data()[j] + 0.5 * a[i].data()[j];
            assert!((t[i].data()[j] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn q_min_is_elementwise_minimum() {
    let mut rng = stream(4, Stream::Init);
    let q = DoubleQ::new(3, 2, &[8], &mut rng);
    let mut tape = Tape::new();
    let bq = q.bind(&mut tape, false);
    let o = tape.constant(normal_tensor(&mut rng, 16, 3));
    let a = tape.constant(normal_tensor(&mut rng, 16, 2));
    let (q1, q2) = bq.q_values(&mut tape, o, a).unwrap();
    let m = bq.q_min(&mut tape, o, a).unwrap();
    for r in 0..16 {
        let expect = tape.value(q1).get(r, 0).min(tape.value(q2).get(r, 0));
        assert_eq!(tape.value(m).get(r, 0), expect);
    }
}

#[test]
fn mlp_init_respects_fan_in_bound() {
    let mut rng = stream(6, Stream::Init);
    let m = Mlp::new(&[16, 64, 4], &mut rng);
    let bounds = [0.25, 0.125];
    for (l, b) in m.layers().iter().zip(bounds) {
        assert!(l.w.data().iter().chain(l.b.data()).all(|v| v.abs() <= b));
    }
    assert_eq!(m.sizes(), vec![16, 64, 4]);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = Tensor::row(vec![1.0, -2.0, 0.5]);
    let g = Tensor::row(vec![0.3, -4.0, 1e-3]);
    let mut opt = Adam::new(0.01, &[&p]);
    let before = p.clone();
    opt.step(vec![&mut p], &[g.clone()]).unwrap();
    for i in 0..3 {
        let gi = g.data()[i];
        let expect = before.data()[i] - 0.01 * gi / (gi.abs() + 1e-8);
        assert!((p.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut p = Tensor::row(vec![3.0, -1.5]);
    let mut opt = Adam::new(0.05, &[&p]);
    for _ in 0..2000 {
        let g = p.map(|v| 2.0 * (v - 0.7));
        opt.step(vec![&mut p], &[g]).unwrap();
    }
    assert!(p.data().iter().all(|v| (v - 0.7).abs() < 1e-3));
}

#[test]
fn temperature_moves_towards_target_entropy() {
    let mut t = Temperature::new(0.1, -1.0, 0.0);
    t.update(&[0.3, 2.0]).unwrap();
    assert_eq!(t.alpha(), libm::exp(libm::log(0.1)));

    // log-probs above -target mean entropy is too low: alpha rises
    let mut up = Temperature::new(0.1, -1.0, 1e-2);
    up.update(&[2.0, 3.0]).unwrap();
    assert!(up.alpha() > 0.1);
    let mut down = Temperature::new(0.1, -1.0, 1e-2);
    down.update(&[-2.0, -3.0]).unwrap();
    assert!(down.alpha() < 0.1);
}

#[test]
fn modules_round_trip_through_param_maps() {
    let mut rng = stream(8, Stream::Init);
    let p = Policy::new(PolicyKind::Gaussian, 3, 1, &[8, 8], &mut rng);
    let q = DoubleQ::new(3, 1, &[8, 8], &mut rng);
    let mut p2 = Policy::new(PolicyKind::Gaussian, 3, 1, &[8, 8], &mut rng);
    let mut q2 = DoubleQ::new(3, 1, &[8, 8], &mut rng);
    let decoded_p = vexp_core::checkpoint::ParamMap::decode(&p.to_params().encode()).unwrap();
    p2.load_params(&decoded_p).unwrap();
    q2.load_params(&q.to_params()).unwrap();
    assert_eq!(p2, p);
    assert_eq!(q2, q);

    let mut small = Policy::new(PolicyKind::Gaussian, 3, 1, &[4], &mut rng);
    let before = small.clone();
    assert!(small.load_params(&p.to_params()).is_err());
    assert_eq!(small, before);
}
