//! Brute-force reference implementations written against plain nested
//! vectors, sharing no code with the crate under test.

#![allow(dead_code)]

use rand::Rng;
use word4per_core::random::rng;
use word4per_core::Matrix;

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(m: &Matrix) -> Rows {
    m.iter_rows().map(|r| r.to_vec()).collect()
}

pub fn matrix(rows: &Rows) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

pub fn random_rows(r: &mut impl Rng, n: usize, d: usize) -> Rows {
    (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

/// Identity labels with at least one repeat when `n > 2`.
pub fn random_ids(r: &mut impl Rng, n: usize) -> Vec<String> {
    let pool = (n / 2).max(1);
    (0..n).map(|_| format!("id{}", r.random_range(0..pool))).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Row softmax of `cos(a_i, b_j) / tau`.
pub fn match_prob(a: &Rows, b: &Rows, tau: f64) -> Rows {
    a.iter()
        .map(|ai| softmax(&b.iter().map(|bj| cos(ai, bj) / tau).collect::<Vec<_>>()))
        .collect()
}

/// One KL direction: rows of `a` against columns `b`, labels from ids.
pub fn kl_direction(a: &Rows, b: &Rows, a_ids: &[String], b_ids: &[String], tau: f64, eps: f64) -> f64 {
    let p = match_prob(a, b, tau);
    let mut total = 0.0;
    for i in 0..a.len() {
        let positives = b_ids.iter().filter(|id| **id == a_ids[i]).count() as f64;
        for j in 0..b.len() {
            let q = if b_ids[j] == a_ids[i] { 1.0 / positives } else { 0.0 };
            total += p[i][j] * (p[i][j] / (q + eps)).ln();
        }
    }
    total / a.len() as f64
}

pub fn cmpm(fv: &Rows, ft: &Rows, ids: &[String], tau: f64, eps: f64) -> f64 {
    kl_direction(fv, ft, ids, ids, tau, eps) + kl_direction(ft, fv, ids, ids, tau, eps)
}

/// `anchor` is `f_v` for the visual loss and `f_t` for the text loss.
pub fn tinet(anchor: &Rows, fc: &Rows, ids: &[String], tau: f64, eps: f64) -> f64 {
    cmpm(anchor, fc, ids, tau, eps)
}

pub fn itc(fv: &Rows, ft: &Rows, tau: f64) -> f64 {
    let n = fv.len();
    let p = match_prob(fv, ft, tau);
    let pt = match_prob(ft, fv, tau);
    let mut total = 0.0;
    for i in 0..n {
        total -= p[i][i].ln();
        total -= pt[i][i].ln();
    }
    total / (2.0 * n as f64)
}

pub fn irr(logits: &Rows, targets: &[usize], vocab: usize) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        total -= softmax(row)[t].ln();
    }
    total / (logits.len() * vocab) as f64
}

pub fn id(lv: &Rows, lt: &Rows, classes: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..classes.len() {
        total -= softmax(&lv[i])[classes[i]].ln();
        total -= softmax(&lt[i])[classes[i]].ln();
    }
    total / (2 * classes.len()) as f64
}

/// Precision at every relevant position, computed by recounting prefixes.
pub fn average_precision(ranked: &[String], gt: &[String]) -> f64 {
    let mut sum = 0.0;
    for r in 0..ranked.len() {
        if gt.contains(&ranked[r]) {
            let hits = ranked[..=r].iter().filter(|x| gt.contains(x)).count();
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / gt.len() as f64
}

pub fn hit_at(ranked: &[String], gt: &[String], k: usize) -> bool {
    ranked.iter().take(k).any(|x| gt.contains(x))
}

/// Full sort by descending cosine, ties by ascending index.
pub fn full_sort(query: &[f32], gallery: &[Vec<f32>]) -> Vec<(usize, f64)> {
    let q: Vec<f64> = query.iter().map(|&x| x as f64).collect();
    let mut scored: Vec<(usize, f64)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| (i, cos(&q, &g.iter().map(|&x| x as f64).collect::<Vec<_>>())))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored
}

/// Warm-up ramp then cosine decay, evaluated from the formula.
pub fn lr(base: f64, warmup: f64, epochs: f64, epoch: f64) -> f64 {
    if epoch < warmup {
        base / 10.0 + (base - base / 10.0) * epoch / warmup
    } else {
        base * (1.0 + (std::f64::consts::PI * (epoch - warmup) / (epochs - warmup)).cos()) / 2.0
    }
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` where `numeric`
/// is the central difference of `f` at every entry of `x` with step `h`.
pub fn fd_rel_error(x: &Matrix, analytic: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for idx in 0..x.as_slice().len() {
        let mut plus = x.clone();
        plus.as_mut_slice()[idx] += h;
        let mut minus = x.clone();
        minus.as_mut_slice()[idx] -= h;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        let a = analytic.as_slice()[idx];
        diff += (a - numeric).powi(2);
        na += a * a;
        nn += numeric * numeric;
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

pub fn seeded(seed: u64) -> impl Rng {
    rng(seed)
}
