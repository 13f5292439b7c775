//! Independent oracles shared by the integration tests and the acceptance
//! report.
#![allow(dead_code)]

use loanscreen::data::{build_batch, generate_population, BorrowerHistory, FeatureStats, GeneratorConfig, UNLABELED};
use loanscreen::model::{BackboneKind, Mode, Model, ModelConfig, ModelInputs};
use loanscreen::objectives::{contrastive_loss, domain_loss, label_loss, LossWeights};
use loanscreen::rng::seeded;
use loanscreen::tensor::gradcheck::{check_gradients, random_tensor, relative_error};
use loanscreen::tensor::{DropoutMask, Graph, SeqLayout, Tensor};
use rand::Rng;

/// Relative error of every differentiable graph operation against central
/// differences, one entry per op.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let h = 1e-5;
    let a = random_tensor(&[3, 4], seed, 1.0);
    let b = random_tensor(&[4, 2], seed + 1, 1.0);
    let c = random_tensor(&[3, 4], seed + 2, 1.0);
    let row = random_tensor(&[4], seed + 3, 1.0);
    let gain = random_tensor(&[4], seed + 4, 1.0);
    let probe = |s: u64, shape: &[usize]| random_tensor(shape, 1000 + s, 1.0);
    let mut out = Vec::new();
    let mut push = |name: &'static str, r: loanscreen::tensor::Result<_>| {
        let r: loanscreen::tensor::gradcheck::GradCheck = r.expect(name);
        out.push((name, r.max_rel_error()));
    };

    push("matmul", check_gradients(&[a.clone(), b.clone()], h, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let w = g.constant(probe(1, &[3, 2]));
        let y = g.mul(y, w)?;
        Ok(g.sum(y))
    }));
    push("add", check_gradients(&[a.clone(), c.clone()], h, |g, v| {
        let y = g.add(v[0], v[1])?;
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    }));
    push("sub", check_gradients(&[a.clone(), c.clone()], h, |g, v| {
        let y = g.sub(v[0], v[1])?;
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    }));
    push("mul", check_gradients(&[a.clone(), c.clone()], h, |g, v| {
        let y = g.mul(v[0], v[1])?;
        Ok(g.sum(y))
    }));
    push("affine", check_gradients(&[a.clone()], h, |g, v| {
        let y = g.affine(v[0], -1.3, 0.4);
        let y = g.mul(y, y)?;
        Ok(g.mean(y))
    }));
    push("scale", check_gradients(&[a.clone()], h, |g, v| {
        let y = g.scale(v[0], 2.5);
        let y = g.mul(y, v[0])?;
        Ok(g.sum(y))
    }));
    push("add_row", check_gradients(&[a.clone(), row.clone()], h, |g, v| {
        let y = g.add_row(v[0], v[1])?;
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    }));
    push("mul_rows", check_gradients(&[a.clone()], h, |g, v| {
        let y = g.mul_rows(v[0], &[0.5, -2.0, 1.5])?;
        let w = g.constant(probe(2, &[3, 4]));
        let y = g.mul(y, w)?;
        Ok(g.sum(y))
    }));
    for (name, k) in [("relu", 0), ("tanh", 1), ("sigmoid", 2), ("softmax", 3)] {
        push(name, check_gradients(&[a.clone()], h, move |g, v| {
            let y = match k {
                0 => g.relu(v[0]),
                1 => g.tanh(v[0]),
                2 => g.sigmoid(v[0]),
                _ => g.softmax(v[0]),
            };
            let w = g.constant(probe(3, &[3, 4]));
            let y = g.mul(y, w)?;
            Ok(g.sum(y))
        }));
    }
    let allowed: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
    push("log_softmax_masked", check_gradients(&[a.clone()], h, |g, v| {
        let y = g.log_softmax_masked(v[0], &allowed)?;
        let p = g.pick(y, &[(0, 0), (1, 2), (2, 3)])?;
        Ok(g.sum(p))
    }));
    push("layer_norm", check_gradients(&[a.clone(), gain.clone(), row.clone()], h, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let w = g.constant(probe(4, &[3, 4]));
        let y = g.mul(y, w)?;
        Ok(g.sum(y))
    }));
    let mask = DropoutMask::new(seed, &[3, 4], 0.6).expect("mask");
    push("dropout", check_gradients(&[a.clone()], h, |g, v| {
        let y = g.dropout(v[0], &mask, true)?;
        let w = g.constant(probe(5, &[3, 4]));
        let y = g.mul(y, w)?;
        Ok(g.sum(y))
    }));
    push("gather_rows", check_gradients(&[a.clone()], h, |g, v| {
        let y = g.gather_rows(v[0], &[2, 0, 2, 1])?;
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    }));
    push("embedding_lookup", check_gradients(&[a.clone()], h, |g, v| {
        let x = g.embedding_lookup(v[0], 1)?;
        let y = g.embedding_lookup(v[0], 1)?;
        let y = g.mul(x, y)?;
        Ok(g.sum(y))
    }));
    push("concat_rows", check_gradients(&[a.clone(), c.clone()], h, |g, v| {
        let y = g.concat_rows(&[v[0], v[1], v[0]])?;
        let w = g.constant(probe(6, &[9, 4]));
        let y = g.mul(y, w)?;
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    }));
    push("slice_cols", check_gradients(&[a.clone()], h, |g, v| {
        let y = g.slice_cols(v[0], 1, 2)?;
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    }));
    push("transpose", check_gradients(&[a.clone()], h, |g, v| {
        let t = g.transpose(v[0]);
        let w = g.constant(probe(7, &[4, 3]));
        let y = g.mul(t, w)?;
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    }));
    push("pick", check_gradients(&[a.clone()], h, |g, v| {
        let p = g.pick(v[0], &[(0, 1), (2, 3), (0, 1)])?;
        let p = g.mul(p, p)?;
        Ok(g.sum(p))
    }));
    push("sum_mean", check_gradients(&[a.clone()], h, |g, v| {
        let y = g.mul(v[0], v[0])?;
        let s = g.sum(y);
        let m = g.mean(y);
        let m = g.mul(m, s)?;
        Ok(m)
    }));
    push("l2_normalize_rows", check_gradients(&[a.clone()], h, |g, v| {
        let y = g.l2_normalize_rows(v[0])?;
        let w = g.constant(probe(8, &[3, 4]));
        let y = g.mul(y, w)?;
        Ok(g.sum(y))
    }));
    let logits = random_tensor(&[5, 2], seed + 5, 2.0);
    push("cross_entropy", check_gradients(&[logits], h, |g, v| {
        g.cross_entropy(v[0], &[0, 1, 1, 0, 1], &[1.0, 0.0, 2.0, 1.0, 0.5])
    }));
    let q = random_tensor(&[5, 3], seed + 6, 1.0);
    let k = random_tensor(&[5, 3], seed + 7, 1.0);
    let vv = random_tensor(&[5, 3], seed + 8, 1.0);
    let valid = [true, false, true, false, true];
    for (name, causal, key_valid) in [
        ("attention", false, None),
        ("attention_causal", true, None),
        ("attention_key_mask", true, Some(&valid[..])),
    ] {
        push(name, check_gradients(&[q.clone(), k.clone(), vv.clone()], h, |g, v| {
            let o = g.attention(v[0], v[1], v[2], &SeqLayout::new(vec![2, 3]), causal, key_valid)?;
            let w = g.constant(probe(9, &[5, 3]));
            let y = g.mul(o, w)?;
            Ok(g.sum(y))
        }));
    }
    // the reversal layer is checked against a sign-flipped numeric gradient
    let r = check_gradients(&[a.clone()], h, |g, v| {
        let y = g.grad_reverse(v[0], 0.7);
        let y = g.tanh(y);
        Ok(g.sum(y))
    })
    .expect("grad_reverse");
    out.push(("grad_reverse", r.max_rel_error_scaled(-0.7)));
    out
}

/// Two training borrowers: one with labeled loans, one with at least two
/// unlabeled ones, so every loss term is active.
pub fn two_borrowers() -> (BorrowerHistory, BorrowerHistory, FeatureStats) {
    let split = generate_population(&GeneratorConfig {
        n_borrowers: 300,
        seed: 7,
        ..GeneratorConfig::default()
    })
    .expect("generate");
    let labeled = split
        .train
        .iter()
        .find(|h| h.len() >= 3 && h.labels.iter().any(|&y| y != UNLABELED))
        .expect("a labeled borrower");
    let unlabeled = split
        .train
        .iter()
        .find(|h| h.len() >= 2 && h.labels.iter().filter(|&&y| y == UNLABELED).count() >= 2)
        .expect("an unlabeled borrower");
    let stats = FeatureStats::from_train(&split.train);
    (labeled.clone(), unlabeled.clone(), stats)
}

pub fn small_model_config(backbone: BackboneKind) -> ModelConfig {
    ModelConfig {
        hidden_dim: 6,
        n_transformer_layers: 1,
        feedforward_dim: 5,
        max_sequence_length: 8,
        backbone,
        grl_lambda: 0.8,
        ..ModelConfig::default()
    }
}

/// `(w_y L_y + w_CL L_CL, w_d L_d)` for one dropout draw, plus the analytic
/// gradient of their tape sum.
fn loss_parts(model: &Model, batch: &loanscreen::data::Batch, weights: &LossWeights, step: u64) -> (f64, f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let inputs = ModelInputs::from_batch(&mut g, batch, false);
    let out = model.forward_inputs(&mut g, &p, &inputs, Mode::Train { seed: 11 }).expect("view 1");
    let out2 = model.forward_inputs(&mut g, &p, &inputs, Mode::Train { seed: 12 }).expect("view 2");
    let labels = batch.packed(&batch.labels);
    let tags = batch.packed(&batch.domain);
    let pool: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == UNLABELED).collect();
    let l_y = label_loss(&mut g, out.label_logits, &labels).expect("label loss");
    let z1 = g.gather_rows(out.features, &pool).expect("pool");
    let z2 = g.gather_rows(out2.features, &pool).expect("pool");
    let l_cl = contrastive_loss(&mut g, z1, z2, weights.tau).expect("cl");
    let l_d = domain_loss(&mut g, out.domain_logits, &tags).expect("domain");
    let a = g.scale(l_y, weights.w_y);
    let b = g.scale(l_cl, weights.w_cl);
    let main = g.add(a, b).expect("add");
    let dom = g.scale(l_d, weights.w_d(step));
    let total = g.add(main, dom).expect("add");
    g.backward(total).expect("backward");
    let grads = p.all.iter().map(|&v| g.grad_or_zeros(v)).collect();
    (g.value(main).item(), g.value(dom).item(), grads)
}

/// Worst per-tensor relative error of the end-to-end gradient with all three
/// loss terms active. Parameters upstream of the reversal layer expect the
/// domain term's numeric gradient scaled by `-lambda`.
pub fn end_to_end_error(backbone: BackboneKind) -> f64 {
    let (a, b, stats) = two_borrowers();
    let cfg = small_model_config(backbone);
    let lambda = cfg.grl_lambda;
    let mut model = Model::new(cfg, 3).expect("model");
    let batch = build_batch(&[&a, &b], 8, &stats).expect("batch");
    let weights = LossWeights::default();
    let step = 2000;
    let (_, _, analytic) = loss_parts(&model, &batch, &weights, step);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..model.params().len() {
        let downstream = model.names()[i].starts_with("domain.");
        let n = model.params()[i].len();
        let mut expected = vec![0.0; n];
        for j in 0..n {
            let orig = model.params()[i].data()[j];
            model.params_mut()[i].data_mut()[j] = orig + h;
            let (m_up, d_up, _) = loss_parts(&model, &batch, &weights, step);
            model.params_mut()[i].data_mut()[j] = orig - h;
            let (m_dn, d_dn, _) = loss_parts(&model, &batch, &weights, step);
            model.params_mut()[i].data_mut()[j] = orig;
            let dm = (m_up - m_dn) / (2.0 * h);
            let dd = (d_up - d_dn) / (2.0 * h);
            expected[j] = dm + if downstream { dd } else { -lambda * dd };
        }
        worst = worst.max(relative_error(&analytic[i], &expected));
    }
    worst
}

/// Forward identity and backward `-lambda` scaling of the reversal layer,
/// compared with the same graph built without it.
pub fn grl_contract(lambda: f64) -> bool {
    let x = random_tensor(&[4, 3], 5, 1.0);
    let w = random_tensor(&[4, 3], 6, 1.0);
    let run = |reverse: bool| {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = if reverse { g.grad_reverse(xv, lambda) } else { xv };
        let fwd = g.value(y).data().to_vec();
        let wv = g.constant(w.clone());
        let t = g.tanh(y);
        let z = g.mul(t, wv).expect("mul");
        let s = g.sum(z);
        g.backward(s).expect("backward");
        (fwd, g.grad_or_zeros(xv))
    };
    let (fwd_r, grad_r) = run(true);
    let (fwd_p, grad_p) = run(false);
    fwd_r == fwd_p && grad_r.iter().zip(&grad_p).all(|(r, p)| *r == -lambda * p)
}

pub fn random_unit_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let t = random_tensor(&[n, d], seed, 1.0);
    (0..n)
        .map(|r| {
            let row = t.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / norm).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct evaluation over all `2M` anchors: each anchor's positive against
/// every other vector of both views.
pub fn contrastive_brute_force(z: &[Vec<f64>], z2: &[Vec<f64>], tau: f64) -> f64 {
    let m = z.len();
    let all: Vec<&Vec<f64>> = z.iter().chain(z2.iter()).collect();
    let mut total = 0.0;
    for i in 0..2 * m {
        let pos = if i < m { i + m } else { i - m };
        let num = (dot(all[i], all[pos]) / tau).exp();
        let mut den = 0.0;
        for k in 0..2 * m {
            if k != i {
                den += (dot(all[i], all[k]) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / (2 * m) as f64
}

pub fn contrastive_impl(z: &[Vec<f64>], z2: &[Vec<f64>], tau: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(z).expect("rows"));
    let b = g.constant(Tensor::from_rows(z2).expect("rows"));
    let l = contrastive_loss(&mut g, a, b, tau).expect("loss");
    g.value(l).item()
}

/// Pairwise count over every (repaid, defaulted) pair, ties worth one half.
pub fn auc_brute_force(scores: &[f64], labels: &[i8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

/// Random instance with both classes and heavy ties.
pub fn auc_instance(seed: u64) -> (Vec<f64>, Vec<i8>) {
    let mut rng = seeded(seed);
    let n = rng.random_range(2..=200);
    let levels = rng.random_range(1..=20);
    let mut scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    let mut labels: Vec<i8> = (0..n).map(|_| i8::from(rng.random::<bool>())).collect();
    labels[0] = 0;
    labels[1] = 1;
    scores.swap(0, n - 1);
    (scores, labels)
}

/// Alignment by ordered-pair expansion `‖x‖² + ‖y‖² - 2 x·y`.
pub fn alignment_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| dot(x, x) + dot(y, y) - 2.0 * dot(x, y))
        .sum::<f64>()
        / a.len() as f64
}

/// Uniformity over all ordered pairs `i != j`.
pub fn uniformity_oracle(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d2 = dot(&points[i], &points[i]) + dot(&points[j], &points[j]) - 2.0 * dot(&points[i], &points[j]);
                total += (-2.0 * d2).exp();
            }
        }
    }
    total / (n * (n - 1)) as f64
}

/// Largest gradient magnitude reaching loans after `t` from the label
/// logits at `t`, over every `t` of a 5-loan history, and the smallest
/// total magnitude reaching loan `t` itself.
pub fn future_leak(backbone: BackboneKind) -> (f64, f64) {
    let split = generate_population(&GeneratorConfig {
        n_borrowers: 300,
        seed: 7,
        ..GeneratorConfig::default()
    })
    .expect("generate");
    let stats = FeatureStats::from_train(&split.train);
    let h = split.train.iter().find(|h| h.len() == 5).expect("a 5-loan history");
    let model = Model::new(small_model_config(backbone), 9).expect("model");
    let batch = build_batch(&[h], 8, &stats).expect("batch");
    let mut worst: f64 = 0.0;
    let mut reach = f64::INFINITY;
    for t in 0..5 {
        for mode in [Mode::Eval, Mode::Train { seed: 4 }] {
            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let inputs = ModelInputs::from_batch(&mut g, &batch, true);
            let out = model.forward_inputs(&mut g, &p, &inputs, mode).expect("forward");
            let picked = g.pick(out.label_logits, &[(t, 0), (t, 1)]).expect("pick");
            let s = g.sum(picked);
            g.backward(s).expect("backward");
            let grad = g.grad_or_zeros(inputs.sequences);
            let width = grad.len() / 5;
            reach = reach.min(grad[t * width..(t + 1) * width].iter().map(|v| v.abs()).sum());
            for row in t + 1..5 {
                for v in &grad[row * width..(row + 1) * width] {
                    worst = worst.max(v.abs());
                }
            }
        }
    }
    (worst, reach)
}
