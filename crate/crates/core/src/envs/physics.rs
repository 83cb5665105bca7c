//! Equations of motion, rewards and observations, generic over [`Arith`].
//!
//! Angles are measured from upright; `theta = pi` hangs down.

use alloc::vec;
use alloc::vec::Vec;

use super::arith::Arith;
use super::{CartpoleParams, Dynamics, EnvSpec, LinearParams, PendulumParams};
use crate::error::Result;

/// One agent step: `action_repeat * substeps` semi-implicit Euler updates
/// under a held action. Returns the next state and the reward of the
/// pre-transition state-action pair.
pub fn step<A: Arith>(
    ar: &mut A,
    spec: &EnvSpec,
    s: &[A::V],
    a: &[A::V],
) -> Result<(Vec<A::V>, A::V)> {
    let r = reward(ar, spec, s, a)?;
    let next = match &spec.dynamics {
        Dynamics::Pendulum(p) => pendulum(ar, spec, p, s, a[0])?,
        Dynamics::Cartpole(p) => cartpole(ar, spec, p, s, a[0])?,
        Dynamics::Linear(p) => {
            let x = ar.scale(s[0], p.a)?;
            let u = ar.scale(a[0], p.b)?;
            vec![ar.add(x, u)?]
        }
    };
    Ok((next, r))
}

fn pendulum<A: Arith>(
    ar: &mut A,
    spec: &EnvSpec,
    p: &PendulumParams,
    s: &[A::V],
    a: A::V,
) -> Result<Vec<A::V>> {
    let a = ar.clamp(a, -1.0, 1.0)?;
    let torque = ar.scale(a, p.max_torque)?;
    let inertia = 1.0 / (p.mass * p.length * p.length);
    let (mut th, mut thd) = (s[0], s[1]);
    for _ in 0..spec.integration_steps() {
        let sin = ar.sin(th)?;
        let grav = ar.scale(sin, p.gravity / p.length)?;
        let drag = ar.scale(thd, p.damping)?;
        let net = ar.sub(torque, drag)?;
        let net = ar.scale(net, inertia)?;
        let acc = ar.add(grav, net)?;
        let dv = ar.scale(acc, spec.dt)?;
        thd = ar.add(thd, dv)?;
        let dth = ar.scale(thd, spec.dt)?;
        th = ar.add(th, dth)?;
    }
    Ok(vec![th, thd])
}

fn cartpole<A: Arith>(
    ar: &mut A,
    spec: &EnvSpec,
    p: &CartpoleParams,
    s: &[A::V],
    a: A::V,
) -> Result<Vec<A::V>> {
    let a = ar.clamp(a, -1.0, 1.0)?;
    let force = ar.scale(a, p.max_force)?;
    let total = p.cart_mass + p.pole_mass;
    let pml = p.pole_mass * p.half_length;
    let (mut x, mut xd, mut th, mut thd) = (s[0], s[1], s[2], s[3]);
    for _ in 0..spec.integration_steps() {
        let sin = ar.sin(th)?;
        let cos = ar.cos(th)?;
        // temp = (F + m_p l thd^2 sin) / M
        let w2 = ar.square(thd)?;
        let cf = ar.mul(w2, sin)?;
        let cf = ar.scale(cf, pml)?;
        let temp = ar.add(force, cf)?;
        let temp = ar.scale(temp, 1.0 / total)?;
        // th_acc = (g sin - cos temp) / (l (4/3 - m_p cos^2 / M))
        let gs = ar.scale(sin, p.gravity)?;
        let ct = ar.mul(cos, temp)?;
        let num = ar.sub(gs, ct)?;
        let c2 = ar.square(cos)?;
        let den = ar.scale(c2, -p.pole_mass / total)?;
        let den = ar.add_const(den, 4.0 / 3.0)?;
        let den = ar.scale(den, p.half_length)?;
        let th_acc = ar.div(num, den)?;
        // x_acc = temp - m_p l th_acc cos / M
        let k = ar.mul(th_acc, cos)?;
        let k = ar.scale(k, pml / total)?;
        let x_acc = ar.sub(temp, k)?;

        let dxd = ar.scale(x_acc, spec.dt)?;
        xd = ar.add(xd, dxd)?;
        let dx = ar.scale(xd, spec.dt)?;
        x = ar.add(x, dx)?;
        let dthd = ar.scale(th_acc, spec.dt)?;
        thd = ar.add(thd, dthd)?;
        let dth = ar.scale(thd, spec.dt)?;
        th = ar.add(th, dth)?;
    }
    Ok(vec![x, xd, th, thd])
}

pub fn reward<A: Arith>(ar: &mut A, spec: &EnvSpec, s: &[A::V], a: &[A::V]) -> Result<A::V> {
    match &spec.dynamics {
        Dynamics::Pendulum(p) => {
            let a = ar.clamp(a[0], -1.0, 1.0)?;
            let up = ar.cos(s[0])?;
            let a2 = ar.square(a)?;
            let cost = ar.scale(a2, p.action_cost)?;
            ar.sub(up, cost)
        }
        Dynamics::Cartpole(p) => {
            let a = ar.clamp(a[0], -1.0, 1.0)?;
            let up = ar.cos(s[2])?;
            let x2 = ar.square(s[0])?;
            let xc = ar.scale(x2, p.position_cost)?;
            let a2 = ar.square(a)?;
            let ac = ar.scale(a2, p.action_cost)?;
            let r = ar.sub(up, xc)?;
            ar.sub(r, ac)
        }
        Dynamics::Linear(LinearParams {
            state_cost,
            action_cost,
            ..
        }) => {
            let s2 = ar.square(s[0])?;
            let sc = ar.scale(s2, -state_cost)?;
            let a2 = ar.square(a[0])?;
            let ac = ar.scale(a2, *action_cost)?;
            ar.sub(sc, ac)
        }
    }
}

/// Policy and critic inputs: angles enter as `(sin, cos)`.
pub fn observe<A: Arith>(ar: &mut A, spec: &EnvSpec, s: &[A::V]) -> Result<Vec<A::V>> {
    Ok(match spec.dynamics {
        Dynamics::Pendulum(_) => vec![ar.sin(s[0])?, ar.cos(s[0])?, s[1]],
        Dynamics::Cartpole(_) => vec![s[0], s[1], ar.sin(s[2])?, ar.cos(s[2])?, s[3]],
        Dynamics::Linear(_) => vec![s[0]],
    })
}
