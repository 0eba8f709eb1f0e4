//! Shared harnesses: brute-force f64 oracles for the loss kernels, random
//! input generation and finite-difference gradient checks. Used by the
//! kernel tests and by the acceptance target.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use seqmask::losses::{
    budget_penalty, budget_penalty_var, consistency_penalty, consistency_penalty_var, nt_xent_masked, nt_xent_var,
    overlap_penalty, overlap_penalty_var, EmbeddingBatch, Mask, PenaltyWeights,
};
use seqmask::models::{Encoder, EncoderConfig, Masker, MaskerConfig};
use seqmask::training::{adversary_objective_var, slot_penalties_var};
use seqmask_autograd::{Graph, Tensor, Var};

// ---------------------------------------------------------------------------
// oracles, written directly from the definitions over nested loops

pub fn oracle_nt_xent(za: &[Vec<f64>], zb: &[Vec<f64>], tau: f64) -> f64 {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let z: Vec<Vec<f64>> = za.iter().chain(zb).map(unit).collect();
    let b = za.len();
    let mut total = 0.0;
    for i in 0..2 * b {
        let pos = if i < b { i + b } else { i - b };
        let dot = |k: usize| z[i].iter().zip(&z[k]).map(|(x, y)| x * y).sum::<f64>() / tau;
        let mut denom = 0.0;
        for k in 0..2 * b {
            if k != i {
                denom += dot(k).exp();
            }
        }
        total += -(dot(pos).exp() / denom).ln();
    }
    total / (2 * b) as f64
}

pub fn oracle_budget(m: &[f64], b: f64) -> f64 {
    let mean = m.iter().sum::<f64>() / m.len() as f64;
    (mean - b) * (mean - b)
}

pub fn oracle_overlap(m: &[f64], prior: &[Vec<f64>]) -> f64 {
    let mut dot = 0.0;
    for (i, v) in m.iter().enumerate() {
        let s: f64 = prior.iter().map(|p| p[i]).sum();
        dot += v * s;
    }
    dot / m.len() as f64
}

pub fn oracle_consistency(m: &[f64], h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    s += m[yy * w + xx];
                    n += 1.0;
                }
            }
            let d = m[y * w + x] - s / n;
            total += d * d;
        }
    }
    total
}

// ---------------------------------------------------------------------------
// random inputs

pub struct Case {
    pub za: Vec<Vec<f64>>,
    pub zb: Vec<Vec<f64>>,
    pub tau: f64,
    pub h: usize,
    pub w: usize,
    pub mask: Vec<f64>,
    pub prior: Vec<Vec<f64>>,
    pub b: f64,
}

impl Case {
    /// Mask values stay in `[lo, 1 - lo]` so finite-difference probes remain valid masks.
    pub fn random(seed: u64, lo: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bsz = rng.random_range(2..=8);
        let d = rng.random_range(1..=16);
        let emb = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..bsz)
                .map(|_| {
                    let mut row: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    row[0] += 0.1_f64.copysign(row[0]);
                    row
                })
                .collect()
        };
        let za = emb(&mut rng);
        let zb = emb(&mut rng);
        let tau = rng.random_range(0.05..1.0);
        let h = rng.random_range(1..=12);
        let w = rng.random_range(1..=12);
        let field = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..h * w).map(|_| rng.random_range(lo..1.0 - lo)).collect() };
        let mask = field(&mut rng);
        let n_prior = rng.random_range(0..=3);
        let prior = (0..n_prior).map(|_| field(&mut rng)).collect();
        let b = rng.random_range(0.05..0.95);
        Self { za, zb, tau, h, w, mask, prior, b }
    }

    pub fn emb(rows: &[Vec<f64>]) -> EmbeddingBatch {
        let d = rows[0].len();
        EmbeddingBatch::new(Tensor::new([rows.len(), d], rows.concat())).unwrap()
    }

    pub fn mask_of(&self, v: &[f64]) -> Mask {
        Mask::new(self.h, self.w, v.to_vec()).unwrap()
    }

    pub fn prior_masks(&self) -> Vec<Mask> {
        self.prior.iter().map(|p| self.mask_of(p)).collect()
    }
}

fn rel(a: f64, oracle: f64) -> f64 {
    (a - oracle).abs() / oracle.abs().max(1e-9)
}

/// Worst relative error of each kernel against its oracle over `cases`
/// seeded inputs: `[nt_xent, budget, overlap, consistency]`.
pub fn oracle_suite(cases: u64) -> [f64; 4] {
    let mut worst = [0.0f64; 4];
    for seed in 0..cases {
        let c = Case::random(seed, 0.0);
        let m = c.mask_of(&c.mask);
        let got = [
            nt_xent_masked(&Case::emb(&c.za), &Case::emb(&c.zb), c.tau).unwrap(),
            budget_penalty(&m, c.b).unwrap(),
            overlap_penalty(&m, &c.prior_masks()).unwrap(),
            consistency_penalty(&m).unwrap(),
        ];
        let want = [
            oracle_nt_xent(&c.za, &c.zb, c.tau),
            oracle_budget(&c.mask, c.b),
            oracle_overlap(&c.mask, &c.prior),
            oracle_consistency(&c.mask, c.h, c.w),
        ];
        for k in 0..4 {
            worst[k] = worst[k].max(rel(got[k], want[k]));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// finite differences

/// `||a - fd||_inf / ||fd||_inf` with a tiny floor for all-zero gradients.
pub fn grad_rel_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let num = analytic.iter().zip(fd).map(|(a, f)| (a - f).abs()).fold(0.0, f64::max);
    let den = fd.iter().map(|f| f.abs()).fold(0.0, f64::max).max(1e-12);
    num / den
}

fn central(x: &[f64], i: usize, h: f64, f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let mut m = x.to_vec();
    m[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

fn fd_all(x: &[f64], h: f64, f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len()).map(|i| central(x, i, h, f)).collect()
}

fn param_grad(shape: &[usize], x: &[f64], build: impl Fn(&mut Graph<f64>, Var) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.param(Tensor::new(shape, x.to_vec()));
    let out = build(&mut g, v);
    // an output that ignores the input (overlap with an empty prior) has no gradient entry
    match g.backward(out).get(v) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; x.len()],
    }
}

/// Worst kernel gradient error (tape vs central differences on the scalar
/// entry points, step `h`) over `cases` seeded inputs:
/// `[nt_xent, budget, overlap, consistency]`.
pub fn kernel_gradient_suite(cases: u64, h: f64) -> [f64; 4] {
    let mut worst = [0.0f64; 4];
    for seed in 0..cases {
        let c = Case::random(1000 + seed, 0.01);
        let (bsz, d) = (c.za.len(), c.za[0].len());
        let flat_a = c.za.concat();
        let flat_b = c.zb.concat();
        let rows = |flat: &[f64]| flat.chunks(d).map(|r| r.to_vec()).collect::<Vec<_>>();

        // contrastive: both embedding batches
        let f_a = |x: &[f64]| nt_xent_masked(&Case::emb(&rows(x)), &Case::emb(&c.zb), c.tau).unwrap();
        let f_b = |x: &[f64]| nt_xent_masked(&Case::emb(&c.za), &Case::emb(&rows(x)), c.tau).unwrap();
        let zb_t = Tensor::new([bsz, d], flat_b.clone());
        let za_t = Tensor::new([bsz, d], flat_a.clone());
        let ga = param_grad(&[bsz, d], &flat_a, |g, v| {
            let b = g.constant(zb_t.clone());
            nt_xent_var(g, v, b, c.tau)
        });
        let gb = param_grad(&[bsz, d], &flat_b, |g, v| {
            let a = g.constant(za_t.clone());
            nt_xent_var(g, a, v, c.tau)
        });
        worst[0] = worst[0]
            .max(grad_rel_error(&ga, &fd_all(&flat_a, h, &f_a)))
            .max(grad_rel_error(&gb, &fd_all(&flat_b, h, &f_b)));

        let shape = [1, c.h, c.w];
        let f_budget = |x: &[f64]| budget_penalty(&c.mask_of(x), c.b).unwrap();
        let g_budget = param_grad(&shape, &c.mask, |g, v| budget_penalty_var(g, v, c.b));
        worst[1] = worst[1].max(grad_rel_error(&g_budget, &fd_all(&c.mask, h, &f_budget)));

        // overlap: the proposed mask and every prior mask
        let priors = c.prior_masks();
        let f_ov = |x: &[f64]| overlap_penalty(&c.mask_of(x), &priors).unwrap();
        let prior_t: Vec<Tensor<f64>> = c.prior.iter().map(|p| Tensor::new(shape, p.clone())).collect();
        let g_ov = param_grad(&shape, &c.mask, |g, v| {
            let ps: Vec<Var> = prior_t.iter().map(|t| g.constant(t.clone())).collect();
            let sum = if ps.is_empty() { None } else { Some(g.add_n(&ps)) };
            overlap_penalty_var(g, v, sum)
        });
        let mut e = grad_rel_error(&g_ov, &fd_all(&c.mask, h, &f_ov));
        for k in 0..c.prior.len() {
            let f_p = |x: &[f64]| {
                let mut ps = priors.clone();
                ps[k] = c.mask_of(x);
                overlap_penalty(&c.mask_of(&c.mask), &ps).unwrap()
            };
            let m_t = Tensor::new(shape, c.mask.clone());
            let g_p = param_grad(&shape, &c.prior[k], |g, v| {
                let ps: Vec<Var> = (0..prior_t.len())
                    .map(|j| if j == k { v } else { g.constant(prior_t[j].clone()) })
                    .collect();
                let sum = g.add_n(&ps);
                let m = g.constant(m_t.clone());
                overlap_penalty_var(g, m, Some(sum))
            });
            e = e.max(grad_rel_error(&g_p, &fd_all(&c.prior[k], h, &f_p)));
        }
        worst[2] = worst[2].max(e);

        let f_cons = |x: &[f64]| consistency_penalty(&c.mask_of(x)).unwrap();
        let g_cons = param_grad(&shape, &c.mask, |g, v| consistency_penalty_var(g, v));
        worst[3] = worst[3].max(grad_rel_error(&g_cons, &fd_all(&c.mask, h, &f_cons)));
    }
    worst
}

/// Micro-configuration for the end-to-end check: 8x8 images, 2-level U-Net,
/// projection dimension 4.
pub fn micro_models(seed: u64) -> (Encoder<f64>, Masker<f64>) {
    let enc_cfg = EncoderConfig {
        width: 2,
        projection_dim: 4,
        input_size: 8,
        ..EncoderConfig::default()
    };
    let m_cfg = MaskerConfig {
        n_masks: 2,
        base_channels: 2,
        depth: 2,
        ..MaskerConfig::default()
    };
    let enc = Encoder::<f32>::init(enc_cfg, seed).unwrap().cast::<f64>();
    let masker = Masker::<f32>::init(m_cfg, 3, seed + 1).unwrap().cast::<f64>();
    (enc, masker)
}

fn micro_objective(enc: &Encoder<f64>, masker: &Masker<f64>, xa: &Tensor<f64>, xb: &Tensor<f64>, w: &PenaltyWeights) -> (f64, Vec<(String, Vec<f64>)>) {
    let mut g = Graph::<f64>::new();
    let mb = masker.params().bind(&mut g, true);
    let eb = enc.params().bind(&mut g, false);
    let a = g.constant(xa.clone());
    let b = g.constant(xb.clone());
    let masks = masker.generate_sequence_var(&mut g, &mb, b);
    let pens = slot_penalties_var(&mut g, &masks, w);
    let obj = adversary_objective_var(&mut g, enc, &eb, a, b, &masks, &pens, w).unwrap();
    let value = g.value(obj).item();
    let grads = g.backward(obj);
    let named = masker
        .params()
        .gradients(&mb, &grads)
        .into_iter()
        .map(|(k, t)| (k, t.data().to_vec()))
        .collect();
    (value, named)
}

/// End-to-end masker gradient through masking, encoder and contrastive loss
/// (plus penalties when `w` has nonzero weights). Returns the normwise error
/// of the tape gradient against central differences over up to `per_tensor`
/// coordinates of every masker parameter, and the tape gradient's max norm.
pub fn end_to_end_gradient(seed: u64, w: &PenaltyWeights, per_tensor: usize, h: f64) -> (f64, f64) {
    let (enc, masker) = micro_models(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut img = || Tensor::<f64>::from_fn(&[3, 3, 8, 8], |_| rng.random_range(0.0..1.0));
    let (xa, xb) = (img(), img());
    let (_, grads) = micro_objective(&enc, &masker, &xa, &xb, w);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (name, grad) in &grads {
        let n = grad.len();
        let stride = (n / per_tensor).max(1);
        for i in (0..n).step_by(stride).take(per_tensor) {
            let eval = |delta: f64| {
                let mut m = masker.clone();
                m.params_mut().param_mut(name).unwrap().data_mut()[i] += delta;
                micro_objective(&enc, &m, &xa, &xb, w).0
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
            analytic.push(grad[i]);
        }
    }
    let scale = analytic.iter().map(|a| a.abs()).fold(0.0, f64::max);
    (grad_rel_error(&analytic, &numeric), scale)
}

// ---------------------------------------------------------------------------
// constraint invariants, exhaustive over small mask sizes

fn binary(h: usize, w: usize, bits: u64) -> Mask {
    Mask::new(h, w, (0..h * w).map(|i| ((bits >> i) & 1) as f64).collect()).unwrap()
}

/// Every named invariant with whether it held. Sizes range over all
/// `h, w <= 6`; binary masks are enumerated exhaustively up to 16 pixels and
/// by a fixed-seed sample above that.
pub fn constraint_invariants() -> Vec<(&'static str, bool)> {
    let mut budget_zero_at_b = true;
    let mut budget_pos_off_b = true;
    let mut overlap_disjoint = true;
    let mut overlap_empty_prior = true;
    let mut overlap_pos_shared = true;
    let mut cons_zero_const = true;
    let mut cons_pos_nonconst = true;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for h in 1..=6 {
        for w in 1..=6 {
            let n = h * w;
            let patterns: Vec<u64> = if n <= 16 {
                (0..1u64 << n).collect()
            } else {
                (0..4096).map(|_| rng.random::<u64>() & ((1u64 << n) - 1)).collect()
            };
            let full = (1u64 << n) - 1;
            for &bits in &patterns {
                let m = binary(h, w, bits);
                let k = bits.count_ones() as f64;
                let mean = k / n as f64;
                if mean > 0.0 && mean < 1.0 {
                    budget_zero_at_b &= budget_penalty(&m, mean).unwrap() == 0.0;
                }
                for b in [0.1, 0.25, 0.5, 0.9] {
                    if (b - mean).abs() > 1e-12 {
                        budget_pos_off_b &= budget_penalty(&m, b).unwrap() > 0.0;
                    }
                }
                // the complement, split into two pieces, is disjoint from m
                let rest = full & !bits;
                let split = rest & rng.random::<u64>();
                let prior = [binary(h, w, split), binary(h, w, rest & !split)];
                overlap_disjoint &= overlap_penalty(&m, &prior).unwrap() == 0.0;
                overlap_empty_prior &= overlap_penalty(&m, &[]).unwrap() == 0.0;
                if bits != 0 {
                    overlap_pos_shared &= overlap_penalty(&m, &[binary(h, w, bits & bits.wrapping_neg())]).unwrap() > 0.0;
                }
                let constant = bits == 0 || bits == full;
                let c = consistency_penalty(&m).unwrap();
                if constant {
                    cons_zero_const &= c == 0.0;
                } else {
                    cons_pos_nonconst &= c > 0.0;
                }
            }
            for v in [0.0, 0.25, 0.5, 0.75, 1.0] {
                cons_zero_const &= consistency_penalty(&Mask::filled(h, w, v).unwrap()).unwrap() == 0.0;
            }
            for v in [0.1, 0.3, 0.7] {
                cons_zero_const &= consistency_penalty(&Mask::filled(h, w, v).unwrap()).unwrap() < 1e-24;
            }
        }
    }
    vec![
        ("budget penalty is 0 at mean(m) = b", budget_zero_at_b),
        ("budget penalty is > 0 away from b", budget_pos_off_b),
        ("overlap penalty is 0 for disjoint masks", overlap_disjoint),
        ("overlap penalty is 0 for an empty prior", overlap_empty_prior),
        ("overlap penalty is > 0 for shared support", overlap_pos_shared),
        ("consistency penalty is 0 for constant masks", cons_zero_const),
        ("consistency penalty is > 0 for non-constant masks", cons_pos_nonconst),
        ("adversary objective has slope -weight/N in each penalty", adversary_slopes_hold()),
    ]
}

/// Perturbs one penalty of one slot and compares the change in the composed
/// objective with `-weight * delta / N`, over seeded random tuples.
pub fn adversary_slopes_hold() -> bool {
    use seqmask::losses::{adversary_objective, SlotTerms};
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let terms: Vec<SlotTerms> = (0..n)
            .map(|_| SlotTerms {
                contrastive: rng.random_range(0.0..8.0),
                budget: rng.random_range(0.0..1.0),
                overlap: rng.random_range(0.0..2.0),
                consistency: rng.random_range(0.0..10.0),
            })
            .collect();
        let w = PenaltyWeights {
            budget_weight: rng.random_range(0.0..5.0),
            overlap_weight: rng.random_range(0.0..5.0),
            consistency_weight: rng.random_range(0.0..5.0),
            ..PenaltyWeights::default()
        };
        let base = adversary_objective(&terms, &w).unwrap().adversary_objective;
        let slot = rng.random_range(0..n);
        let delta = rng.random_range(0.01..1.0);
        for (which, weight) in [(0, w.budget_weight), (1, w.overlap_weight), (2, w.consistency_weight)] {
            let mut t = terms.clone();
            match which {
                0 => t[slot].budget += delta,
                1 => t[slot].overlap += delta,
                _ => t[slot].consistency += delta,
            }
            let moved = adversary_objective(&t, &w).unwrap().adversary_objective;
            let expected = -weight * delta / n as f64;
            if ((moved - base) - expected).abs() > 1e-9 * (1.0 + base.abs()) {
                return false;
            }
        }
    }
    true
}
