//! Forward and reverse-mode passes of the fixed actor/critic architecture.

use super::linalg::{add_assign, affine, matvec_add, matvec_t_add, outer_add, sigmoid};
use super::{PolicyParams, RecurrentState, VR_DIM};

/// Single inference step; no caches.
pub(super) fn actor_step(
    params: &PolicyParams,
    obs: &[f64],
    state: &RecurrentState,
) -> (Vec<f64>, RecurrentState) {
    let tape = actor_forward_seq(params, obs, &[false], state);
    let next = tape.final_state(params);
    (tape.pre(0).to_vec(), next)
}

/// Per-step activations of a sequence forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ActorTape {
    steps: usize,
    obs_dim: usize,
    act_dim: usize,
    hidden: usize,
    gate_width: usize,
    obs: Vec<f64>,
    starts: Vec<bool>,
    h0: RecurrentState,
    zv: Vec<f64>,
    zp: Vec<f64>,
    u: Vec<f64>,
    /// LSTM: post-activation gates (i, f, g, o); feedforward core: activations.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
    pre: Vec<f64>,
}

impl ActorTape {
    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    /// Pre-squash action mean at step `t`.
    pub fn pre(&self, t: usize) -> &[f64] {
        &self.pre[t * self.act_dim..(t + 1) * self.act_dim]
    }

    fn h_at(&self, t: usize) -> &[f64] {
        &self.h[t * self.hidden..(t + 1) * self.hidden]
    }

    fn c_at(&self, t: usize) -> &[f64] {
        &self.c[t * self.hidden..(t + 1) * self.hidden]
    }

    /// Recurrent state entering step `t`.
    fn prev_state(&self, t: usize) -> (&[f64], &[f64]) {
        if self.starts[t] {
            (&ZEROS[..0], &ZEROS[..0])
        } else if t == 0 {
            (&self.h0.hidden, &self.h0.cell)
        } else {
            (self.h_at(t - 1), self.c_at(t - 1))
        }
    }

    /// Recurrent state after the last step.
    pub fn final_state(&self, params: &PolicyParams) -> RecurrentState {
        if self.steps == 0 {
            return self.h0.clone();
        }
        self.state_after(params, self.steps - 1)
    }

    /// Recurrent state after step `t`.
    pub fn state_after(&self, params: &PolicyParams, t: usize) -> RecurrentState {
        if !params.arch.recurrent {
            return self.h0.clone();
        }
        RecurrentState {
            hidden: self.h_at(t).to_vec(),
            cell: self.c_at(t).to_vec(),
        }
    }
}

static ZEROS: [f64; 0] = [];

/// Runs the actor over `steps = obs.len() / obs_dim` observations.
/// `starts[t]` resets the recurrent state to zeros before step `t`;
/// otherwise step 0 continues from `h0`.
pub fn actor_forward_seq(
    params: &PolicyParams,
    obs: &[f64],
    starts: &[bool],
    h0: &RecurrentState,
) -> ActorTape {
    let arch = &params.arch;
    let l = &params.layout;
    let d = &params.data;
    let obs_dim = arch.obs_dim();
    let steps = starts.len();
    debug_assert_eq!(obs.len(), steps * obs_dim);
    let (nv, np, nh, na) = (
        arch.vr_hidden,
        arch.prop_hidden,
        arch.core_hidden,
        arch.action_dim(),
    );
    let gate_width = if arch.recurrent { 4 * nh } else { nh };
    let ni = nv + np;
    let act = arch.activation;

    let mut tape = ActorTape {
        steps,
        obs_dim,
        act_dim: na,
        hidden: nh,
        gate_width,
        obs: obs.to_vec(),
        starts: starts.to_vec(),
        h0: h0.clone(),
        zv: vec![0.0; steps * nv],
        zp: vec![0.0; steps * np],
        u: vec![0.0; steps * ni],
        gates: vec![0.0; steps * gate_width],
        c: vec![0.0; if arch.recurrent { steps * nh } else { 0 }],
        tanh_c: vec![0.0; if arch.recurrent { steps * nh } else { 0 }],
        h: vec![0.0; steps * nh],
        pre: vec![0.0; steps * na],
    };
    let zero_h = vec![0.0; nh];

    for t in 0..steps {
        let x = &obs[t * obs_dim..(t + 1) * obs_dim];
        let (prop_in, vr_in) = x.split_at(obs_dim - VR_DIM);

        let zv = &mut tape.zv[t * nv..(t + 1) * nv];
        affine(&d[l.vr_w.range()], &d[l.vr_b.range()], vr_in, zv);
        zv.iter_mut().for_each(|v| *v = act.apply(*v));
        let zp = &mut tape.zp[t * np..(t + 1) * np];
        affine(&d[l.prop_w.range()], &d[l.prop_b.range()], prop_in, zp);
        zp.iter_mut().for_each(|v| *v = act.apply(*v));

        let u = &mut tape.u[t * ni..(t + 1) * ni];
        u[..nv].copy_from_slice(&tape.zv[t * nv..(t + 1) * nv]);
        u[nv..].copy_from_slice(&tape.zp[t * np..(t + 1) * np]);

        let gates = &mut tape.gates[t * gate_width..(t + 1) * gate_width];
        affine(&d[l.core_wx.range()], &d[l.core_b.range()], u, gates);
        if arch.recurrent {
            let (h_prev, c_prev): (Vec<f64>, Vec<f64>) = if starts[t] {
                (zero_h.clone(), zero_h.clone())
            } else if t == 0 {
                (h0.hidden.clone(), h0.cell.clone())
            } else {
                (
                    tape.h[(t - 1) * nh..t * nh].to_vec(),
                    tape.c[(t - 1) * nh..t * nh].to_vec(),
                )
            };
            matvec_add(&d[l.core_wh.range()], &h_prev, gates);
            for j in 0..nh {
                gates[j] = sigmoid(gates[j]);
                gates[nh + j] = sigmoid(gates[nh + j]);
                gates[2 * nh + j] = gates[2 * nh + j].tanh();
                gates[3 * nh + j] = sigmoid(gates[3 * nh + j]);
                let c = gates[nh + j] * c_prev[j] + gates[j] * gates[2 * nh + j];
                let tc = c.tanh();
                tape.c[t * nh + j] = c;
                tape.tanh_c[t * nh + j] = tc;
                tape.h[t * nh + j] = gates[3 * nh + j] * tc;
            }
        } else {
            for j in 0..nh {
                gates[j] = act.apply(gates[j]);
                tape.h[t * nh + j] = gates[j];
            }
        }
        let h = &tape.h[t * nh..(t + 1) * nh];
        affine(
            &d[l.head_w.range()],
            &d[l.head_b.range()],
            h,
            &mut tape.pre[t * na..(t + 1) * na],
        );
    }
    tape
}

/// Accumulates `dL/dparams` into `grad` given `dL/dpre` for every step.
/// Gradients do not flow into the initial recurrent state or across
/// episode starts.
pub fn actor_backward(params: &PolicyParams, tape: &ActorTape, d_pre: &[f64], grad: &mut [f64]) {
    let arch = &params.arch;
    let l = &params.layout;
    let d = &params.data;
    let (nv, np, nh, na) = (arch.vr_hidden, arch.prop_hidden, tape.hidden, tape.act_dim);
    let ni = nv + np;
    let gw = tape.gate_width;
    let act = arch.activation;
    let obs_dim = tape.obs_dim;

    let mut dh_next = vec![0.0; nh];
    let mut dc_next = vec![0.0; nh];
    let mut dh = vec![0.0; nh];
    let mut dgate = vec![0.0; gw];
    let mut du = vec![0.0; ni];
    let mut dzv = vec![0.0; nv];
    let mut dzp = vec![0.0; np];

    for t in (0..tape.steps).rev() {
        let dy = &d_pre[t * na..(t + 1) * na];
        let h = tape.h_at(t);
        outer_add(&mut grad[l.head_w.range()], dy, h);
        add_assign(&mut grad[l.head_b.range()], dy);

        dh.copy_from_slice(&dh_next);
        matvec_t_add(&d[l.head_w.range()], dy, &mut dh);

        let u = &tape.u[t * ni..(t + 1) * ni];
        let g = &tape.gates[t * gw..(t + 1) * gw];
        if arch.recurrent {
            let (h_prev, c_prev) = tape.prev_state(t);
            let tc = &tape.tanh_c[t * nh..(t + 1) * nh];
            let mut dc_prev = vec![0.0; nh];
            for j in 0..nh {
                let (i, f, gg, o) = (g[j], g[nh + j], g[2 * nh + j], g[3 * nh + j]);
                let dc = dh[j] * o * (1.0 - tc[j] * tc[j]) + dc_next[j];
                let cp = if c_prev.is_empty() { 0.0 } else { c_prev[j] };
                dgate[j] = dc * gg * i * (1.0 - i);
                dgate[nh + j] = dc * cp * f * (1.0 - f);
                dgate[2 * nh + j] = dc * i * (1.0 - gg * gg);
                dgate[3 * nh + j] = dh[j] * tc[j] * o * (1.0 - o);
                dc_prev[j] = dc * f;
            }
            outer_add(&mut grad[l.core_wx.range()], &dgate, u);
            add_assign(&mut grad[l.core_b.range()], &dgate);
            if !h_prev.is_empty() {
                outer_add(&mut grad[l.core_wh.range()], &dgate, h_prev);
            }
            if tape.starts[t] || t == 0 {
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                dc_next.iter_mut().for_each(|v| *v = 0.0);
            } else {
                dh_next.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_add(&d[l.core_wh.range()], &dgate, &mut dh_next);
                dc_next.copy_from_slice(&dc_prev);
            }
        } else {
            for j in 0..nh {
                dgate[j] = dh[j] * act.grad_from_output(g[j]);
            }
            outer_add(&mut grad[l.core_wx.range()], &dgate, u);
            add_assign(&mut grad[l.core_b.range()], &dgate);
        }

        du.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_add(&d[l.core_wx.range()], &dgate, &mut du);

        let x = &tape.obs[t * obs_dim..(t + 1) * obs_dim];
        let (prop_in, vr_in) = x.split_at(obs_dim - VR_DIM);
        let zv = &tape.zv[t * nv..(t + 1) * nv];
        for j in 0..nv {
            dzv[j] = du[j] * act.grad_from_output(zv[j]);
        }
        outer_add(&mut grad[l.vr_w.range()], &dzv, vr_in);
        add_assign(&mut grad[l.vr_b.range()], &dzv);
        let zp = &tape.zp[t * np..(t + 1) * np];
        for j in 0..np {
            dzp[j] = du[nv + j] * act.grad_from_output(zp[j]);
        }
        outer_add(&mut grad[l.prop_w.range()], &dzp, prop_in);
        add_assign(&mut grad[l.prop_b.range()], &dzp);
    }
}

/// Layer activations of one critic evaluation.
#[derive(Debug, Clone)]
pub struct CriticTape {
    input: Vec<f64>,
    layers: Vec<Vec<f64>>,
}

impl CriticTape {
    pub fn value(&self) -> f64 {
        self.layers.last().map_or(0.0, |v| v[0])
    }
}

pub fn critic_forward_cached(params: &PolicyParams, input: &[f64]) -> CriticTape {
    let d = &params.data;
    let act = params.arch.activation;
    let last = params.layout.critic.len() - 1;
    let mut layers: Vec<Vec<f64>> = Vec::with_capacity(last + 1);
    for (k, (w, b)) in params.layout.critic.iter().enumerate() {
        let x: &[f64] = if k == 0 { input } else { &layers[k - 1] };
        let mut out = vec![0.0; w.rows];
        affine(&d[w.range()], &d[b.range()], x, &mut out);
        if k < last {
            out.iter_mut().for_each(|v| *v = act.apply(*v));
        }
        layers.push(out);
    }
    CriticTape {
        input: input.to_vec(),
        layers,
    }
}

pub(super) fn critic_value(params: &PolicyParams, input: &[f64]) -> f64 {
    critic_forward_cached(params, input).value()
}

/// Accumulates `dvalue * dV/dparams` into `grad`.
pub fn critic_backward(params: &PolicyParams, tape: &CriticTape, dvalue: f64, grad: &mut [f64]) {
    let d = &params.data;
    let act = params.arch.activation;
    let layout = &params.layout.critic;
    let mut delta = vec![dvalue];
    for k in (0..layout.len()).rev() {
        let (w, b) = layout[k];
        let x: &[f64] = if k == 0 { &tape.input } else { &tape.layers[k - 1] };
        outer_add(&mut grad[w.range()], &delta, x);
        add_assign(&mut grad[b.range()], &delta);
        if k > 0 {
            let mut dx = vec![0.0; w.cols];
            matvec_t_add(&d[w.range()], &delta, &mut dx);
            for (g, y) in dx.iter_mut().zip(&tape.layers[k - 1]) {
                *g *= act.grad_from_output(*y);
            }
            delta = dx;
        }
    }
}
