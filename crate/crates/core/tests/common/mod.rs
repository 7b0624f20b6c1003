//! Finite-difference oracle shared by the gradient and acceptance suites.
#![allow(dead_code)]

use hexagan::data::uniform_noise;
use hexagan::engine::{NodeId, Tape, Tensor};
use hexagan::losses::{
    cross_entropy, gp_cg, gp_mi, loss_c_adv, loss_d_cg, loss_d_mi, loss_g_cg, loss_g_mi, loss_recon,
    pseudo_label_surrogate, CriticBalance,
};
use hexagan::networks::{fill_noise, BoundNetworks, Component, HexaGanParams, InitScheme};
use hexagan::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_SCALE_FLOOR: f64 = 1e-3;

/// Builds a scalar loss from networks bound to a fresh tape.
pub type LossBuilder<'a> = dyn Fn(&mut Tape, &BoundNetworks) -> Result<NodeId> + 'a;

/// A small random problem: parameters with random biases and matching data.
pub struct Instance {
    pub params: HexaGanParams,
    pub x: Tensor,
    pub m: Tensor,
    pub y: Tensor,
    pub z: Tensor,
    /// Conditional-generator noise, `b×d_z`.
    pub zc: Tensor,
    pub labeled: Vec<bool>,
    pub rng: ChaCha8Rng,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..5usize);
    let n_c = rng.random_range(2..4usize);
    let d_z = rng.random_range(1..4usize);
    let b = rng.random_range(3..7usize);
    let mut params = HexaGanParams::init(d, n_c, d_z, InitScheme::He, &mut rng).unwrap();
    for c in Component::ALL {
        for p in params.network_mut(c).params_mut() {
            if p.rows() == 1 {
                for v in p.data_mut() {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        }
    }
    let x = uniform_noise(b, d, &mut rng);
    let mut m = Tensor::zeros(b, d);
    for v in m.data_mut() {
        *v = if rng.random::<f64>() < 0.7 { 1.0 } else { 0.0 };
    }
    // every row keeps one observed and every unit one observed row
    for j in 0..b {
        m.set(j, j % d, 1.0);
    }
    let mut y = Tensor::zeros(b, n_c);
    let mut labeled = Vec::with_capacity(b);
    for j in 0..b {
        y.set(j, rng.random_range(0..n_c), 1.0);
        labeled.push(j == 0 || rng.random::<f64>() < 0.6);
    }
    let z = uniform_noise(b, d, &mut rng);
    let zc = uniform_noise(b, d_z, &mut rng);
    Instance { params, x, m, y, z, zc, labeled, rng }
}

pub fn loss_value(params: &HexaGanParams, build: &LossBuilder) -> f64 {
    let mut tape = Tape::new();
    let nets = params.bind(&mut tape, &[]);
    let id = build(&mut tape, &nets).unwrap();
    tape.value(id).item()
}

/// Analytic gradient w.r.t. every parameter tensor of `component`.
pub fn analytic(params: &HexaGanParams, component: Component, build: &LossBuilder) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let nets = params.bind(&mut tape, &[component]);
    let id = build(&mut tape, &nets).unwrap();
    let mut grads = tape.backward(id).unwrap();
    nets.net(component).grads(&mut grads)
}

pub fn central_difference(params: &HexaGanParams, component: Component, tensor: usize, index: usize, build: &LossBuilder) -> f64 {
    let mut plus = params.clone();
    plus.network_mut(component).params_mut()[tensor].data_mut()[index] += FD_STEP;
    let mut minus = params.clone();
    minus.network_mut(component).params_mut()[tensor].data_mut()[index] -= FD_STEP;
    (loss_value(&plus, build) - loss_value(&minus, build)) / (2.0 * FD_STEP)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_SCALE_FLOOR)
}

/// Compares analytic and central-difference gradients at `coords` random
/// parameter coordinates of `component`; returns the worst relative error.
pub fn check_component<R: Rng>(
    params: &HexaGanParams,
    component: Component,
    coords: usize,
    rng: &mut R,
    build: &LossBuilder,
) -> f64 {
    let grads = analytic(params, component, build);
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let t = rng.random_range(0..grads.len());
        let i = rng.random_range(0..grads[t].len());
        let fd = central_difference(params, component, t, i, build);
        worst = worst.max(relative_error(grads[t].data()[i], fd));
    }
    worst
}

/// Problem data captured by loss builders.
#[derive(Clone)]
pub struct Data {
    pub x: Tensor,
    pub m: Tensor,
    pub y: Tensor,
    pub z: Tensor,
    pub zc: Tensor,
    pub labeled: Vec<bool>,
    /// A fixed imputed matrix, for terms that treat `x̂` as data.
    pub x_hat: Tensor,
    /// A fixed hidden matrix of width `d`.
    pub h: Tensor,
}

impl Data {
    pub fn of(inst: &Instance) -> Data {
        let mut x_hat = inst.x.clone();
        for (v, (&m, &z)) in x_hat.data_mut().iter_mut().zip(inst.m.data().iter().zip(inst.z.data())) {
            if m == 0.0 {
                *v = 0.25 + 0.5 * z;
            }
        }
        let h = inst.z.map(|v| 2.0 * v);
        Data {
            x: inst.x.clone(),
            m: inst.m.clone(),
            y: inst.y.clone(),
            z: inst.z.clone(),
            zc: inst.zc.clone(),
            labeled: inst.labeled.clone(),
            x_hat,
            h,
        }
    }

    /// `x̂` as a graph through `E` and `G_MI`.
    pub fn imputed(&self, t: &mut Tape, n: &BoundNetworks) -> Result<NodeId> {
        let xt = t.constant(fill_noise(&self.x, &self.m, &self.z)?);
        let mi = t.constant(self.m.clone());
        let h = n.encode(t, xt, mi)?;
        let xbar = n.generate_imputation(t, h)?;
        n.compose_imputed(t, &self.x, &self.m, xbar)
    }

    /// `G_MI(G_CG(z_c, y))` as a graph.
    pub fn conditional(&self, t: &mut Tape, n: &BoundNetworks) -> Result<NodeId> {
        let zc = t.constant(self.zc.clone());
        let yc = t.constant(self.y.clone());
        let hc = n.generate_hidden_conditional(t, zc, yc)?;
        n.generate_imputation(t, hc)
    }

    pub fn y(&self, t: &mut Tape) -> NodeId {
        t.constant(self.y.clone())
    }
}

/// A named scalar loss and the networks it is differentiated against.
pub struct LossCase {
    pub name: &'static str,
    pub components: &'static [Component],
    pub build: fn(Data) -> Box<LossBuilder<'static>>,
}

use Component::*;

fn d_mi_case(balance: CriticBalance, d: Data) -> Box<LossBuilder<'static>> {
    Box::new(move |t, n| {
        let x_hat = d.imputed(t, n)?;
        let y = d.y(t);
        let scores = n.discriminate_elements(t, x_hat, y)?;
        let xc = d.conditional(t, n)?;
        let yc = d.y(t);
        let cond = n.discriminate_elements(t, xc, yc)?;
        loss_d_mi(t, scores, &d.m, Some(&d.labeled), Some(cond), balance)
    })
}

pub fn loss_cases() -> Vec<LossCase> {
    vec![
        LossCase {
            name: "L_D_MI (per-unit)",
            components: &[DiscMi, Encoder, GenCg],
            build: |d| d_mi_case(CriticBalance::PerUnit, d),
        },
        LossCase {
            name: "L_D_MI (joint)",
            components: &[DiscMi, GenMi, GenCg],
            build: |d| d_mi_case(CriticBalance::Joint, d),
        },
        LossCase {
            name: "L_G_MI",
            components: &[Encoder, GenMi],
            build: |d| {
                Box::new(move |t, n| {
                    let x_hat = d.imputed(t, n)?;
                    let y = d.y(t);
                    let scores = n.discriminate_elements(t, x_hat, y)?;
                    loss_g_mi(t, scores, &d.m)
                })
            },
        },
        LossCase {
            name: "L_recon",
            components: &[Encoder, GenMi],
            build: |d| {
                Box::new(move |t, n| {
                    let xt = t.constant(fill_noise(&d.x, &d.m, &d.z)?);
                    let mi = t.constant(d.m.clone());
                    let h = n.encode(t, xt, mi)?;
                    let xbar = n.generate_imputation(t, h)?;
                    loss_recon(t, &d.x, xbar, &d.m)
                })
            },
        },
        LossCase {
            name: "L_GP_MI (zero-centered)",
            components: &[DiscMi],
            build: |d| {
                Box::new(move |t, n| {
                    let x_hat = t.constant(d.x_hat.clone());
                    let y = d.y(t);
                    gp_mi(t, n.net(DiscMi), x_hat, y, &d.m, Some(&d.labeled), false)
                })
            },
        },
        LossCase {
            name: "L_GP_MI (standard)",
            components: &[DiscMi],
            build: |d| {
                Box::new(move |t, n| {
                    let x_hat = t.constant(d.x_hat.clone());
                    let y = d.y(t);
                    gp_mi(t, n.net(DiscMi), x_hat, y, &d.m, None, true)
                })
            },
        },
        LossCase {
            name: "L_GP_CG (zero-centered)",
            components: &[DiscCg],
            build: |d| {
                Box::new(move |t, n| {
                    let h = t.constant(d.h.clone());
                    let y = d.y(t);
                    gp_cg(t, n.net(DiscCg), h, y, false)
                })
            },
        },
        LossCase {
            name: "L_GP_CG (standard)",
            components: &[DiscCg],
            build: |d| {
                Box::new(move |t, n| {
                    let h = t.constant(d.h.clone());
                    let y = d.y(t);
                    gp_cg(t, n.net(DiscCg), h, y, true)
                })
            },
        },
        LossCase {
            name: "L_D_CG",
            components: &[DiscCg, GenCg, Encoder],
            build: |d| {
                Box::new(move |t, n| {
                    let xt = t.constant(fill_noise(&d.x, &d.m, &d.z)?);
                    let mi = t.constant(d.m.clone());
                    let h_real = n.encode(t, xt, mi)?;
                    let zc = t.constant(d.zc.clone());
                    let y = d.y(t);
                    let h_fake = n.generate_hidden_conditional(t, zc, y)?;
                    let real = n.discriminate_hidden(t, h_real, y)?;
                    let fake = n.discriminate_hidden(t, h_fake, y)?;
                    loss_d_cg(t, fake, real)
                })
            },
        },
        LossCase {
            name: "L_G_CG",
            components: &[GenCg],
            build: |d| {
                Box::new(move |t, n| {
                    let zc = t.constant(d.zc.clone());
                    let y = d.y(t);
                    let h_fake = n.generate_hidden_conditional(t, zc, y)?;
                    let fake = n.discriminate_hidden(t, h_fake, y)?;
                    loss_g_cg(t, fake)
                })
            },
        },
        LossCase {
            name: "L_G_MI on conditional rows",
            components: &[GenCg, GenMi],
            build: |d| {
                Box::new(move |t, n| {
                    let xc = d.conditional(t, n)?;
                    let y = d.y(t);
                    let scores = n.discriminate_elements(t, xc, y)?;
                    let all_missing = Tensor::zeros(d.m.rows(), d.m.cols());
                    loss_g_mi(t, scores, &all_missing)
                })
            },
        },
        LossCase {
            name: "L_CE",
            components: &[Classifier, Encoder, GenMi],
            build: |d| {
                Box::new(move |t, n| {
                    let x_hat = d.imputed(t, n)?;
                    let probs = n.classify(t, x_hat)?;
                    cross_entropy(t, probs, &d.y)
                })
            },
        },
        LossCase {
            name: "L_CE on conditional rows",
            components: &[GenCg, Classifier],
            build: |d| {
                Box::new(move |t, n| {
                    let xc = d.conditional(t, n)?;
                    let probs = n.classify(t, xc)?;
                    cross_entropy(t, probs, &d.y)
                })
            },
        },
        LossCase {
            name: "L_C (label unit)",
            components: &[Classifier],
            build: |d| {
                Box::new(move |t, n| {
                    let x_hat = t.constant(d.x_hat.clone());
                    let probs = n.classify(t, x_hat)?;
                    let scores = n.discriminate_elements(t, x_hat, probs)?;
                    loss_c_adv(t, scores)
                })
            },
        },
        LossCase {
            name: "L_C (pseudo-label surrogate)",
            components: &[Classifier],
            build: |d| {
                Box::new(move |t, n| {
                    let x_hat = t.constant(d.x_hat.clone());
                    let probs = n.classify(t, x_hat)?;
                    let scores: Vec<f64> = (0..d.y.rows()).map(|j| d.z.get(j, 0) - 0.5).collect();
                    pseudo_label_surrogate(t, probs, &d.y, &scores)
                })
            },
        },
    ]
}

/// Runs `checks` finite-difference comparisons of `case`, spread over fresh
/// random instances and its components; returns the worst relative error.
pub fn check_case(case: &LossCase, checks: usize, seed: u64) -> f64 {
    let per_instance = 5;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut k = 0u64;
    while done < checks {
        let mut inst = random_instance(seed.wrapping_mul(1_000_003).wrapping_add(k));
        let build = (case.build)(Data::of(&inst));
        let component = case.components[k as usize % case.components.len()];
        let params = inst.params.clone();
        let n = per_instance.min(checks - done);
        worst = worst.max(check_component(&params, component, n, &mut inst.rng, &*build));
        done += n;
        k += 1;
    }
    worst
}
