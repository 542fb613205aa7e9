#![allow(dead_code)]

use caudr::gate::{gate_loss, select_channels, ChannelMask, GateLossKind, GateModule, Strategy};
use caudr::gradcheck::{central_difference, check_tape, max_relative_error, pick_elements};
use caudr::intervene::{do_operation, DoMode, Pairing};
use caudr::model::{fuse_loss, FuseLossKind, Mode, ModelConfig, TaskModel};
use caudr::tensor::{CustomOp, ParamStore, Tape, Tensor, Var};
use caudr::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

/// `sum(x * c)` for a fixed `c`; turns any tensor into a scalar with a
/// generic gradient.
struct DotConst(Vec<f64>);

impl CustomOp<f64> for DotConst {
    fn name(&self) -> &'static str {
        "dot_const"
    }

    fn backward(&self, _inputs: &[&Tensor<f64>], _out: &Tensor<f64>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.0.iter().map(|c| c * g[0]).collect())]
    }
}

pub fn dot_const(tape: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd07);
    let c: Vec<f64> = (0..tape.value(x).numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let v: f64 = tape.value(x).data().iter().zip(&c).map(|(a, b)| a * b).sum();
    tape.custom(&[x], Tensor::scalar(v), Box::new(DotConst(c)))
}

pub fn random(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub struct Check {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

const INSTANCES: u64 = 5;
const LIMIT: usize = 40;

fn worst(name: &'static str, tolerance: f64, mut one: impl FnMut(u64) -> Result<f64>) -> Result<Check> {
    let mut error = 0.0f64;
    for seed in 0..INSTANCES {
        error = error.max(one(seed)?);
    }
    Ok(Check {
        name,
        error,
        tolerance,
    })
}

pub fn conv() -> Result<Check> {
    worst("conv2d", 1e-4, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 3, 8, 8], &mut rng, -1.0, 1.0);
        let w = random(&[4, 3, 3, 3], &mut rng, -1.0, 1.0);
        let (stride, pad) = [(1, 1), (2, 1), (1, 0)][seed as usize % 3];
        let r = check_tape(&[x, w], H, LIMIT, |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad)?;
            Ok(dot_const(t, y, seed))
        })?;
        Ok(r.max_relative_error())
    })
}

pub fn linear() -> Result<Check> {
    worst("linear", 1e-4, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[3, 7], &mut rng, -1.0, 1.0);
        let w = random(&[4, 7], &mut rng, -1.0, 1.0);
        let b = random(&[4], &mut rng, -1.0, 1.0);
        let r = check_tape(&[x, w, b], H, LIMIT, |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            Ok(dot_const(t, y, seed))
        })?;
        Ok(r.max_relative_error())
    })
}

pub fn elementwise() -> Result<Check> {
    worst("relu/sigmoid/pool/add", 1e-4, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3, 4, 4], &mut rng, -2.0, 2.0);
        let y = random(&[2, 3, 4, 4], &mut rng, -2.0, 2.0);
        let r = check_tape(&[x, y], H, LIMIT, |t, v| {
            let a = t.relu(v[0]);
            let b = t.sigmoid(v[1]);
            let s = t.add(a, b)?;
            let p = t.global_avg_pool(s)?;
            let m = t.batch_mean(p)?;
            Ok(dot_const(t, m, seed))
        })?;
        Ok(r.max_relative_error())
    })
}

pub fn batch_norm() -> Result<Check> {
    worst("batch_stat_norm", 1e-4, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[4, 3, 2, 2], &mut rng, -1.0, 1.0);
        let g = random(&[3], &mut rng, 0.5, 1.5);
        let b = random(&[3], &mut rng, -0.5, 0.5);
        let r = check_tape(&[x, g, b], H, LIMIT, |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5)?;
            let z = t.channel_affine(y, v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
            Ok(dot_const(t, z, seed))
        })?;
        Ok(r.max_relative_error())
    })
}

pub fn softmax_ce() -> Result<Check> {
    worst("softmax_cross_entropy", 1e-4, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&[6, 5], &mut rng, -3.0, 3.0);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
        let r = check_tape(&[logits], H, LIMIT, |t, v| t.softmax_cross_entropy(v[0], &labels))?;
        Ok(r.max_relative_error())
    })
}

fn gate_store(seed: u64, channels: usize) -> Result<(ParamStore<f64>, GateModule)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let gate = GateModule::new(&mut store, &mut rng, "gate", channels, 8)?;
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    Ok((store, gate))
}

pub fn gate_perceptron() -> Result<Check> {
    worst("gate perceptron", 1e-4, |seed| {
        let (store, gate) = gate_store(seed, 12)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x = random(&[3, 12, 2, 2], &mut rng, -1.0, 1.0);
        let mut inputs: Vec<Tensor<f64>> = store.params().iter().map(|p| p.value.clone()).collect();
        inputs.push(x);
        let r = check_tape(&inputs, H, LIMIT, |t, v| {
            let g = gate.forward(t, &v[..4], v[4])?;
            Ok(t.mean_all(g))
        })?;
        Ok(r.max_relative_error())
    })
}

pub fn gate_losses() -> Result<Check> {
    worst("gate_loss", 1e-4, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random(&[4, 192], &mut rng, 0.01, 0.99);
        let a = check_tape(std::slice::from_ref(&g), H, LIMIT, |t, v| {
            gate_loss(t, v[0], GateLossKind::Normalized)
        })?;
        let b = check_tape(&[g], H, LIMIT, |t, v| gate_loss(t, v[0], GateLossKind::RawSum))?;
        Ok(a.max_relative_error().max(b.max_relative_error()))
    })
}

pub fn fuse_losses() -> Result<Check> {
    worst("fuse_loss", 1e-4, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Mass on a handful of channels keeps the participation penalty active.
        let mut w = Tensor::<f64>::zeros(vec![8, 40, 1, 1]);
        for o in 0..8 {
            for c in 0..5 {
                w.data_mut()[o * 40 + c] =
                    rng.random_range(0.2..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            }
            for c in 5..40 {
                w.data_mut()[o * 40 + c] =
                    rng.random_range(0.001..0.02) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            }
        }
        let a = check_tape(&[w.clone()], H * 0.01, LIMIT, |t, v| {
            fuse_loss(t, v[0], FuseLossKind::Participation)
        })?;
        let small = Tensor::from_fn(vec![8, 40, 1, 1], |i| w.data()[i] * 0.1);
        let b = check_tape(&[small], H * 0.01, LIMIT, |t, v| {
            fuse_loss(t, v[0], FuseLossKind::MeanAbs)
        })?;
        Ok(a.max_relative_error().max(b.max_relative_error()))
    })
}

pub fn do_ops() -> Result<Check> {
    worst("exchange/match do-ops", 1e-4, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[4, 6, 3, 3], &mut rng, -1.0, 1.0);
        let shared = random(&[6], &mut rng, 0.05, 0.95);
        let per = random(&[4, 6], &mut rng, 0.05, 0.95);
        let pairing = Pairing::new(vec![2, 0, 3, 1])?;
        let mut err = 0.0f64;
        for mode in [DoMode::Exchange, DoMode::Match] {
            for mask in [&shared, &per] {
                let r = check_tape(&[x.clone(), mask.clone()], H, LIMIT, |t, v| {
                    let y = do_operation(t, v[0], v[1], &pairing, mode)?;
                    Ok(dot_const(t, y, seed))
                })?;
                err = err.max(r.max_relative_error());
            }
        }
        Ok(err)
    })
}

/// Gradient through a hard batch-averaged mask versus differences of the
/// surrogate `L(exchange(x, H0 + s(theta) - s(theta0)))`, whose derivative at
/// `theta0` is what the straight-through estimator reports.
pub fn straight_through_end_to_end() -> Result<Check> {
    worst("end-to-end through exchange", 1e-3, |seed| {
        let c = 12;
        let (store, gate) = gate_store(seed, c)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
        let x = random(&[4, c, 2, 2], &mut rng, -1.0, 1.0);
        let head_w = random(&[5, c], &mut rng, -1.0, 1.0);
        let head_b = random(&[5], &mut rng, -0.1, 0.1);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let pairing = Pairing::new(vec![1, 2, 3, 0])?;
        let theta0: Vec<Tensor<f64>> = store.params().iter().map(|p| p.value.clone()).collect();
        let unused = ChannelMask::all(c, true);

        let head = |t: &mut Tape<f64>, mixed: Var| -> Result<Var> {
            let w = t.constant(head_w.clone());
            let b = t.constant(head_b.clone());
            let pooled = t.global_avg_pool(mixed)?;
            let logits = t.linear(pooled, w, b)?;
            t.softmax_cross_entropy(logits, &labels)
        };

        // Analytic: straight-through on the real hard mask.
        let mut tape = Tape::new();
        let vars: Vec<Var> = theta0.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let xv = tape.constant(x.clone());
        let gates = gate.forward(&mut tape, &vars, xv)?;
        let mean0 = tape.batch_mean(gates)?;
        let s0 = tape.value(mean0).data().to_vec();
        let mask = select_channels(&mut tape, gates, Strategy::Bae, 0.5, &unused)?;
        let hard0 = tape.value(mask).data().to_vec();
        let mixed = do_operation(&mut tape, xv, mask, &pairing, DoMode::Exchange)?;
        let loss = head(&mut tape, mixed)?;
        let grads = tape.backward(loss)?;

        // Numeric: differences of the surrogate.
        let offset: Vec<f64> = hard0.iter().zip(&s0).map(|(h, s)| h - s).collect();
        let surrogate = |params: &[Tensor<f64>]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = params.iter().map(|p| t.constant(p.clone())).collect();
            let xv = t.constant(x.clone());
            let g = gate.forward(&mut t, &vs, xv).expect("forward");
            let s = t.batch_mean(g).expect("mean");
            let off = t.constant(Tensor::new(vec![c], offset.clone()).expect("shape"));
            let m = t.weighted_sum(&[(s, 1.0), (off, 1.0)]).expect("sum");
            let mixed = do_operation(&mut t, xv, m, &pairing, DoMode::Exchange).expect("do");
            let l = head(&mut t, mixed).expect("loss");
            t.value(l).item()
        };
        let mut err = 0.0f64;
        for (i, v) in vars.iter().enumerate() {
            let elements = pick_elements(theta0[i].numel(), LIMIT, i as u64);
            let numeric = central_difference(&theta0, i, &elements, H, surrogate);
            let all = grads.get(*v).expect("gate parameter gradient");
            let analytic: Vec<f64> = elements.iter().map(|&e| all[e]).collect();
            err = err.max(max_relative_error(&analytic, &numeric, 1e-6));
        }
        Ok(err)
    })
}

/// Cross-entropy gradient with respect to the fuse weights of the full
/// task network.
pub fn model_end_to_end() -> Result<Check> {
    worst("task model end-to-end", 1e-3, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            stage_widths: vec![16, 16, 32],
            fuse_width: 16,
            blocks_per_stage: 1,
            ..ModelConfig::default()
        };
        let mut model = TaskModel::<f64>::new(cfg, &mut rng)?;
        for p in model.store_mut().params_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let x = random(&[4, 192, 4, 4], &mut rng, -1.0, 1.0);
        let labels: Vec<usize> = (0..4).map(|i| (i + seed as usize) % 5).collect();
        let fuse_id = model.fuse_weight_id();
        let w = model.store().get(fuse_id).value.clone();
        let r = check_tape(&[w], H, 24, |t, v| {
            let mut bound = model.bind(t);
            bound[fuse_id.index()] = v[0];
            let xv = t.constant(x.clone());
            let out = model.forward(t, &bound, xv, Mode::Train)?;
            t.softmax_cross_entropy(out.logits, &labels)
        })?;
        Ok(r.max_relative_error())
    })
}

pub fn gradient_suite() -> Result<Vec<Check>> {
    Ok(vec![
        conv()?,
        linear()?,
        elementwise()?,
        batch_norm()?,
        softmax_ce()?,
        gate_perceptron()?,
        gate_losses()?,
        fuse_losses()?,
        do_ops()?,
        straight_through_end_to_end()?,
        model_end_to_end()?,
    ])
}
