mod support;

use rand::Rng;
use support::*;
use word4per_core::autodiff::Tape;
use word4per_core::dataset::build_match_labels;
use word4per_core::encoder::{ToyDualEncoder, ToyEncoderConfig};
use word4per_core::losses::*;
use word4per_core::random::normal_matrix;
use word4per_core::tinet::{Activation, TiNet, TiNetConfig};
use word4per_core::tokenizer::WhitespaceTokenizer;
use word4per_core::Matrix;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;
const INSTANCES: usize = 20;

fn cfg(tau: f64) -> LossConfig {
    LossConfig {
        tau,
        ..LossConfig::default()
    }
}

fn pair_batch(fv: &Matrix, ft: &Matrix, ids: &[String]) -> EmbeddingBatch {
    EmbeddingBatch {
        f_v: Some(fv.clone()),
        f_t: Some(ft.clone()),
        f_c: None,
        identity_ids: ids.to_vec(),
    }
}

fn instance(r: &mut impl Rng) -> (Matrix, Matrix, Vec<String>, f64) {
    let n = r.random_range(1..=6);
    let d = r.random_range(2..=8);
    let taus = [0.1, 0.5, 1.0];
    let tau = taus[r.random_range(0..taus.len())];
    (
        matrix(&random_rows(r, n, d)),
        matrix(&random_rows(r, n, d)),
        random_ids(r, n),
        tau,
    )
}

#[test]
fn cmpm_gradients() {
    let mut r = seeded(200);
    for _ in 0..INSTANCES {
        let (fv, ft, ids, tau) = instance(&mut r);
        let labels = build_match_labels(&ids, &ids).unwrap();
        let c = cfg(tau);
        let l = cmpm_loss(&pair_batch(&fv, &ft, &ids), &labels, &c).unwrap();
        let ev = fd_rel_error(&fv, &l.grad_a, H, |x| cmpm_loss(&pair_batch(x, &ft, &ids), &labels, &c).unwrap().value);
        let et = fd_rel_error(&ft, &l.grad_b, H, |x| cmpm_loss(&pair_batch(&fv, x, &ids), &labels, &c).unwrap().value);
        assert!(ev <= TOL && et <= TOL, "rel err {ev:e} / {et:e}");
    }
}

#[test]
fn itc_gradients() {
    let mut r = seeded(201);
    for _ in 0..INSTANCES {
        let (fv, ft, ids, tau) = instance(&mut r);
        let c = cfg(tau);
        let l = itc_loss(&pair_batch(&fv, &ft, &ids), &c).unwrap();
        let ev = fd_rel_error(&fv, &l.grad_a, H, |x| itc_loss(&pair_batch(x, &ft, &ids), &c).unwrap().value);
        let et = fd_rel_error(&ft, &l.grad_b, H, |x| itc_loss(&pair_batch(&fv, x, &ids), &c).unwrap().value);
        assert!(ev <= TOL && et <= TOL, "rel err {ev:e} / {et:e}");
    }
}

#[test]
fn irr_gradients() {
    let mut r = seeded(202);
    for _ in 0..INSTANCES {
        let m = r.random_range(1..=6);
        let v = r.random_range(2..=10);
        let logits = matrix(&(0..m).map(|_| (0..v).map(|_| r.random_range(-3.0..3.0)).collect()).collect());
        let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..v)).collect();
        for norm in [IrrNorm::Paper, IrrNorm::MaskedOnly] {
            let eval = |x: &Matrix| {
                let pred = MaskedPrediction {
                    masked_positions: (0..m).map(|i| (0, i)).collect(),
                    logits: x.clone(),
                    targets: targets.clone(),
                };
                irr_loss(&pred, norm).unwrap()
            };
            let (_, grad) = eval(&logits);
            let e = fd_rel_error(&logits, &grad, H, |x| eval(x).0);
            assert!(e <= TOL, "rel err {e:e}");
        }
    }
}

#[test]
fn id_gradients() {
    let mut r = seeded(203);
    for _ in 0..INSTANCES {
        let n = r.random_range(1..=6);
        let c = r.random_range(2..=10);
        let lv = matrix(&random_rows(&mut r, n, c));
        let lt = matrix(&random_rows(&mut r, n, c));
        let classes: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let l = id_loss(&lv, &lt, &classes).unwrap();
        let ev = fd_rel_error(&lv, &l.grad_a, H, |x| id_loss(x, &lt, &classes).unwrap().value);
        let et = fd_rel_error(&lt, &l.grad_b, H, |x| id_loss(&lv, x, &classes).unwrap().value);
        assert!(ev <= TOL && et <= TOL, "rel err {ev:e} / {et:e}");
    }
}

#[test]
fn tinet_loss_gradients() {
    let mut r = seeded(204);
    for _ in 0..INSTANCES {
        let (anchor, fc, ids, tau) = instance(&mut r);
        let labels = build_match_labels(&ids, &ids).unwrap();
        let c = cfg(tau);
        for mode in [Supervision::Vis, Supervision::Text] {
            let make = |a: &Matrix, f: &Matrix| EmbeddingBatch {
                f_v: (mode == Supervision::Vis).then(|| a.clone()),
                f_t: (mode == Supervision::Text).then(|| a.clone()),
                f_c: Some(f.clone()),
                identity_ids: ids.clone(),
            };
            let l = tinet_loss(&make(&anchor, &fc), &labels, &c, mode).unwrap();
            let ec = fd_rel_error(&fc, &l.grad_c, H, |x| tinet_loss(&make(&anchor, x), &labels, &c, mode).unwrap().value);
            let ea = fd_rel_error(&anchor, &l.grad_anchor, H, |x| {
                tinet_loss(&make(x, &fc), &labels, &c, mode).unwrap().value
            });
            assert!(ec <= TOL && ea <= TOL, "{mode}: rel err {ec:e} / {ea:e}");
        }
    }
}

/// Scalar probe `Σ (f(x) ⊙ w)` through the network, differentiated on a tape.
fn tinet_probe(net: &TiNet, input: &Matrix, weights: &Matrix) -> (f64, Vec<Matrix>, Matrix) {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape);
    let x = tape.param(input.clone());
    let out = net.forward_on_tape(&mut tape, &params, x).unwrap();
    let w = weights.clone();
    let loss = tape
        .scalar_fn(&[out], move |v| {
            let value = v[0].as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
            Ok((value, vec![w.clone()]))
        })
        .unwrap();
    let value = tape.value(loss)[(0, 0)];
    let g = tape.backward(loss).unwrap();
    let grads = params
        .iter()
        .flat_map(|&(w, b)| [g.get(w).unwrap().clone(), g.get(b).unwrap().clone()])
        .collect();
    (value, grads, g.get(x).unwrap().clone())
}

fn probe_value(net: &TiNet, input: &Matrix, weights: &Matrix) -> f64 {
    let out = net.forward_batch(input).unwrap();
    out.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum()
}

#[test]
fn tinet_forward_gradients() {
    let mut r = seeded(205);
    for case in 0..INSTANCES {
        let activation = if case % 4 == 3 { Activation::Identity } else { Activation::Gelu };
        let config = TiNetConfig {
            depth: 1 + case % 4,
            hidden_width: r.random_range(3..=7),
            d_in: r.random_range(2..=6),
            d_out: r.random_range(2..=6),
            activation,
            seed: case as u64,
        };
        let net = TiNet::init(config).unwrap();
        let n = r.random_range(1..=4);
        let input = normal_matrix(&mut r, n, config.d_in, 1.0);
        let weights = normal_matrix(&mut r, n, config.d_out, 1.0);
        let (value, grads, d_input) = tinet_probe(&net, &input, &weights);
        assert!((value - probe_value(&net, &input, &weights)).abs() < 1e-12);

        let e = fd_rel_error(&input, &d_input, H, |x| probe_value(&net, x, &weights));
        assert!(e <= TOL, "input rel err {e:e}");
        for (k, grad) in grads.iter().enumerate() {
            let (layer, is_bias) = (k / 2, k % 2 == 1);
            let current = if is_bias { &net.layers()[layer].bias } else { &net.layers()[layer].weight };
            let e = fd_rel_error(current, grad, H, |x| {
                let mut perturbed = net.clone();
                let l = &mut perturbed.layers_mut()[layer];
                if is_bias {
                    l.bias = x.clone();
                } else {
                    l.weight = x.clone();
                }
                probe_value(&perturbed, &input, &weights)
            });
            assert!(e <= TOL, "layer {layer} bias {is_bias}: rel err {e:e}");
        }
    }
}

/// The fine-tuning objective is an unweighted sum, so its gradient is the
/// sum of the parts' gradients; checked end to end on a tape.
#[test]
fn stage1_sum_gradient() {
    let mut r = seeded(206);
    for _ in 0..INSTANCES {
        let (fv, ft, ids, tau) = instance(&mut r);
        let n = ids.len();
        let classes_n = 5;
        let head = normal_matrix(&mut r, fv.cols(), classes_n, 0.5);
        let classes: Vec<usize> = (0..n).map(|_| r.random_range(0..classes_n)).collect();
        let v = r.random_range(2..=6);
        let logits = normal_matrix(&mut r, 2, v, 1.0);
        let targets: Vec<usize> = (0..2).map(|_| r.random_range(0..v)).collect();
        let labels = build_match_labels(&ids, &ids).unwrap();
        let c = cfg(tau);

        let total = |fv: &Matrix, ft: &Matrix| {
            let cm = cmpm_loss(&pair_batch(fv, ft, &ids), &labels, &c).unwrap().value;
            let id = id_loss(&fv.matmul(&head).unwrap(), &ft.matmul(&head).unwrap(), &classes).unwrap().value;
            let pred = MaskedPrediction {
                masked_positions: vec![(0, 1), (0, 2)],
                logits: logits.clone(),
                targets: targets.clone(),
            };
            stage1_objective(irr_loss(&pred, IrrNorm::Paper).unwrap().0, cm, id).unwrap()
        };

        let mut tape = Tape::new();
        let vv = tape.param(fv.clone());
        let tv = tape.param(ft.clone());
        let hv = tape.constant(head.clone());
        let ids_c = ids.clone();
        let labels_c = labels.clone();
        let cm = tape
            .scalar_fn(&[vv, tv], move |x| {
                let l = cmpm_loss(&pair_batch(x[0], x[1], &ids_c), &labels_c, &c)?;
                Ok((l.value, vec![l.grad_a, l.grad_b]))
            })
            .unwrap();
        let lv = tape.matmul(vv, hv).unwrap();
        let lt = tape.matmul(tv, hv).unwrap();
        let cls = classes.clone();
        let id = tape
            .scalar_fn(&[lv, lt], move |x| {
                let l = id_loss(x[0], x[1], &cls)?;
                Ok((l.value, vec![l.grad_a, l.grad_b]))
            })
            .unwrap();
        let lg = tape.constant(logits.clone());
        let tg = targets.clone();
        let irr = tape
            .scalar_fn(&[lg], move |x| {
                let pred = MaskedPrediction {
                    masked_positions: vec![(0, 1), (0, 2)],
                    logits: x[0].clone(),
                    targets: tg.clone(),
                };
                let (v, g) = irr_loss(&pred, IrrNorm::Paper)?;
                Ok((v, vec![g]))
            })
            .unwrap();
        let sum = tape.sum_scalars(&[irr, cm, id]).unwrap();
        assert!((tape.value(sum)[(0, 0)] - total(&fv, &ft)).abs() < 1e-12);
        let g = tape.backward(sum).unwrap();
        let ev = fd_rel_error(&fv, g.get(vv).unwrap(), H, |x| total(x, &ft));
        let et = fd_rel_error(&ft, g.get(tv).unwrap(), H, |x| total(&fv, x));
        assert!(ev <= TOL && et <= TOL, "rel err {ev:e} / {et:e}");
    }
}

/// Both toy towers, differentiated with respect to every parameter tensor.
#[test]
fn toy_encoder_gradients() {
    let cfg = ToyEncoderConfig {
        embed_dim: 4,
        token_dim: 3,
        text_hidden: 5,
        visual_hidden: 4,
        image_height: 16,
        image_width: 8,
        patch_grid: (2, 2),
        cell_grid: (2, 1),
        ..Default::default()
    };
    let enc = ToyDualEncoder::new(cfg, WhitespaceTokenizer::desk()).unwrap();
    let mut r = seeded(207);
    let patches = normal_matrix(&mut r, cfg.num_patches(), cfg.patch_dim(), 1.0);
    let token_ids = [1usize, 7, 9, 12, 2];
    let wv = normal_matrix(&mut r, 1, cfg.embed_dim, 1.0);
    let wt = normal_matrix(&mut r, 1, cfg.embed_dim, 1.0);

    let forward = |params: &word4per_core::encoder::ToyParams, want_grads: bool| {
        let e = ToyDualEncoder::with_params(cfg, WhitespaceTokenizer::desk(), params.clone()).unwrap();
        let mut tape = Tape::new();
        let vars = e.bind(&mut tape, true);
        let p = tape.constant(patches.clone());
        let (gv, _) = e.visual_on_tape(&mut tape, &vars.visual_vars(), p).unwrap();
        let rows = tape.gather_rows(vars.token_table(), &token_ids).unwrap();
        let (gt, _) = e.text_on_tape(&mut tape, &vars.text_vars(), rows).unwrap();
        let (a, b) = (wv.clone(), wt.clone());
        let loss = tape
            .scalar_fn(&[gv, gt], move |x| {
                let v: f64 = x[0].as_slice().iter().zip(a.as_slice()).map(|(p, q)| p * q).sum::<f64>()
                    + x[1].as_slice().iter().zip(b.as_slice()).map(|(p, q)| p * q).sum::<f64>();
                Ok((v, vec![a.clone(), b.clone()]))
            })
            .unwrap();
        let value = tape.value(loss)[(0, 0)];
        let grads = want_grads.then(|| {
            let g = tape.backward(loss).unwrap();
            vars.vars.iter().map(|&v| g.get(v).unwrap().clone()).collect::<Vec<_>>()
        });
        (value, grads)
    };
    let base = enc.params().clone();
    let (_, grads) = forward(&base, true);
    for (k, grad) in grads.unwrap().iter().enumerate() {
        let current = base.tensors()[k].clone();
        let e = fd_rel_error(&current, grad, H, |x| {
            let mut p = base.clone();
            *p.tensors_mut()[k] = x.clone();
            forward(&p, false).0
        });
        assert!(e <= TOL, "{}: rel err {e:e}", word4per_core::encoder::ToyParams::NAMES[k]);
    }
}
