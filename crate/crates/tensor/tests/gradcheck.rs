//! Reverse-mode gradients against central finite differences.
//!
//! The finite-difference side evaluates an independent `f64` re-implementation
//! of each graph, so the difference quotient at ε = 1e-4 is accurate well
//! below the 1e-4 relative tolerance.

use neuralloc_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
const SCALE_FLOOR: f64 = 1e-2;

// ---- f64 oracle kernels ---------------------------------------------------

fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
        }
    }
    out
}

fn add_row(a: &[f64], r: &[f64]) -> Vec<f64> {
    a.iter().enumerate().map(|(i, v)| v + r[i % r.len()]).collect()
}

fn relu(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&v| v.max(0.0)).collect()
}

fn softmax(a: &[f64], m: usize) -> Vec<f64> {
    let mut out = a.to_vec();
    for row in out.chunks_mut(m) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        row.iter_mut().for_each(|v| *v = (*v - mx).exp() / s);
    }
    out
}

fn layer_norm(a: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = g.len();
    let mut out = vec![0.0; a.len()];
    for (r, row) in a.chunks(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + 1e-5).sqrt();
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * rs * g[j] + b[j];
        }
    }
    out
}

fn cross_entropy(logits: &[f64], v: usize, targets: &[usize], pad: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t == pad {
            continue;
        }
        let row = &logits[r * v..(r + 1) * v];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        total += lse - row[t];
        n += 1;
    }
    total / n as f64
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

// ---- harness --------------------------------------------------------------

struct Case {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

impl Case {
    fn random(rng: &mut ChaCha8Rng, shapes: Vec<Vec<usize>>, scale: f64) -> Self {
        let values = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
            })
            .collect();
        Self { shapes, values }
    }

    fn f32_values(&self) -> Vec<Vec<f64>> {
        // The tape sees f32-rounded values; the oracle must too.
        self.values
            .iter()
            .map(|v| v.iter().map(|&x| x as f32 as f64).collect())
            .collect()
    }
}

fn check<FT, FO>(case: &Case, tape_fn: FT, oracle: FO) -> f64
where
    FT: Fn(&mut Tape, &[Var]) -> Var,
    FO: Fn(&[Vec<f64>]) -> f64,
{
    let base = case.f32_values();
    let mut tape = Tape::new();
    let leaves: Vec<Var> = case
        .shapes
        .iter()
        .zip(&base)
        .map(|(s, v)| tape.leaf(Tensor::new(s.clone(), v.iter().map(|&x| x as f32).collect()).unwrap(), true))
        .collect();
    let loss = tape_fn(&mut tape, &leaves);
    let tape_loss = tape.value(loss).data()[0] as f64;
    let oracle_loss = oracle(&base);
    assert!(
        (tape_loss - oracle_loss).abs() <= 1e-4 * oracle_loss.abs().max(1.0),
        "forward mismatch: tape {tape_loss} oracle {oracle_loss}"
    );
    tape.backward(loss).unwrap();
    let base_loss = oracle_loss;

    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0usize, 0usize);
    for (li, leaf) in leaves.iter().enumerate() {
        let grad = tape.grad(*leaf).unwrap().to_vec();
        for e in 0..base[li].len() {
            let mut plus = base.clone();
            plus[li][e] += EPS;
            let mut minus = base.clone();
            minus[li][e] -= EPS;
            let (f_plus, f_minus) = (oracle(&plus), oracle(&minus));
            // A ReLU kink inside [x-ε, x+ε] makes the one-sided slopes disagree;
            // the derivative is undefined there, so the element is skipped.
            let right = (f_plus - base_loss) / EPS;
            let left = (base_loss - f_minus) / EPS;
            if (right - left).abs() > 0.1 * right.abs().max(left.abs()).max(SCALE_FLOOR) {
                skipped += 1;
                continue;
            }
            checked += 1;
            let fd = (f_plus - f_minus) / (2.0 * EPS);
            let g = grad[e] as f64;
            let err = (g - fd).abs() / fd.abs().max(g.abs()).max(SCALE_FLOOR);
            worst = worst.max(err);
        }
    }
    assert!(skipped * 20 <= checked, "{skipped} non-differentiable elements of {checked}");
    worst
}

// ---- graphs ---------------------------------------------------------------

fn mlp_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d_in, h, v) = (4, 5, 6, 3);
    let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
    let case = Case::random(
        &mut rng,
        vec![
            vec![n, d_in],
            vec![d_in, h],
            vec![h],
            vec![h],
            vec![h],
            vec![h, h],
            vec![h, v],
            vec![v],
        ],
        1.0,
    );
    let t = targets.clone();
    check(
        &case,
        |tape, p| {
            let z = tape.matmul(p[0], p[1]).unwrap();
            let z = tape.add_row(z, p[2]).unwrap();
            let z = tape.layer_norm(z, p[3], p[4]).unwrap();
            let a = tape.relu(z).unwrap();
            let a2 = tape.matmul(a, p[5]).unwrap();
            let a2 = tape.relu(a2).unwrap();
            let a2 = tape.add(a2, a).unwrap();
            let logits = tape.matmul(a2, p[6]).unwrap();
            let logits = tape.add_row(logits, p[7]).unwrap();
            tape.cross_entropy(logits, &t, usize::MAX).unwrap()
        },
        |p| {
            let z = add_row(&mm(&p[0], &p[1], n, d_in, h), &p[2]);
            let z = layer_norm(&z, &p[3], &p[4]);
            let a = relu(&z);
            let a2 = relu(&mm(&a, &p[5], n, h, h));
            let a2: Vec<f64> = a2.iter().zip(&a).map(|(x, y)| x + y).collect();
            let logits = add_row(&mm(&a2, &p[6], n, h, v), &p[7]);
            cross_entropy(&logits, v, &targets, usize::MAX)
        },
    )
}

/// softmax, elementwise product, scale, concat, transpose, mask and sum.
fn mixed_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, a_w, b_w) = (3, 2, 3);
    let mask: Vec<f32> = vec![1.0, 0.0, 1.0, 1.0, 0.0];
    let case = Case::random(
        &mut rng,
        vec![vec![n, a_w], vec![n, b_w], vec![n, a_w + b_w], vec![n, n]],
        1.0,
    );
    let m64: Vec<f64> = mask.iter().map(|&x| x as f64).collect();
    check(
        &case,
        |tape, p| {
            let c = tape.concat_cols(&[p[0], p[1]]).unwrap();
            let c = tape.mask_mul(c, &mask).unwrap();
            let s = tape.softmax(c).unwrap();
            let prod = tape.mul(s, p[2]).unwrap();
            let pt = tape.transpose(prod).unwrap();
            let mixed = tape.matmul(p[3], prod).unwrap();
            let lhs = tape.scale(mixed, 0.5).unwrap();
            let sl = tape.sum(lhs).unwrap();
            let pp = tape.matmul(pt, p[3]).unwrap();
            let sq = tape.mul(pp, pp).unwrap();
            let sr = tape.sum(sq).unwrap();
            let both = tape.add(sl, sr).unwrap();
            tape.scale(both, 1.0).unwrap()
        },
        |p| {
            let w = a_w + b_w;
            let mut c = vec![0.0; n * w];
            for r in 0..n {
                for j in 0..a_w {
                    c[r * w + j] = p[0][r * a_w + j];
                }
                for j in 0..b_w {
                    c[r * w + a_w + j] = p[1][r * b_w + j];
                }
            }
            let c: Vec<f64> = c.iter().enumerate().map(|(i, v)| v * m64[i % w]).collect();
            let s = softmax(&c, w);
            let prod: Vec<f64> = s.iter().zip(&p[2]).map(|(x, y)| x * y).collect();
            let pt = transpose(&prod, n, w);
            let mixed = mm(&p[3], &prod, n, n, w);
            let sl: f64 = mixed.iter().map(|v| v * 0.5).sum();
            let pp = mm(&pt, &p[3], w, n, n);
            let sr: f64 = pp.iter().map(|v| v * v).sum();
            sl + sr
        },
    )
}

/// One pre-norm transformer encoder layer with multi-head attention, padding
/// bias, an FFN and an output projection trained with cross-entropy.
fn attention_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, t, d, h, f, v) = (2usize, 3usize, 4usize, 2usize, 6usize, 5usize);
    let dh = d / h;
    let ids: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..v)).collect();
    let targets: Vec<usize> = vec![1, 2, 3, 4, 0, 0];
    // Second sequence has one padded key position.
    let mut bias = vec![0.0f32; b * h * t * t];
    for hh in 0..h {
        for q in 0..t {
            bias[((h + hh) * t + q) * t + 2] = -1e9;
        }
    }
    let bias_t = Tensor::new(vec![b * h, t, t], bias.clone()).unwrap();
    let shapes = vec![
        vec![v, d], // 0 embedding
        vec![d],    // 1 ln gain
        vec![d],    // 2 ln bias
        vec![d, d], // 3 wq
        vec![d, d], // 4 wk
        vec![d, d], // 5 wv
        vec![d, d], // 6 wo
        vec![d],    // 7 bo
        vec![d],    // 8 ln2 gain
        vec![d],    // 9 ln2 bias
        vec![d, f], // 10 w1
        vec![f],    // 11 b1
        vec![f, d], // 12 w2
        vec![d],    // 13 b2
        vec![d, v], // 14 out
    ];
    let mut case = Case::random(&mut rng, shapes, 0.8);
    case.values[1].iter_mut().for_each(|g| *g += 1.0);
    case.values[8].iter_mut().for_each(|g| *g += 1.0);
    let scale = 1.0 / (dh as f32).sqrt();
    let ffn_mask: Vec<f32> = (0..f).map(|j| if j == 2 { 0.0 } else { 1.0 }).collect();
    let ids_t = ids.clone();
    let tg = targets.clone();
    let ffn_mask_t = ffn_mask.clone();
    check(
        &case,
        move |tape, p| {
            let x = tape.embedding(p[0], &ids_t).unwrap();
            let n = tape.layer_norm(x, p[1], p[2]).unwrap();
            let q = tape.matmul(n, p[3]).unwrap();
            let k = tape.matmul(n, p[4]).unwrap();
            let vv = tape.matmul(n, p[5]).unwrap();
            let q = tape.split_heads(q, b, t, h).unwrap();
            let k = tape.split_heads(k, b, t, h).unwrap();
            let vv = tape.split_heads(vv, b, t, h).unwrap();
            let s = tape.batch_matmul(q, k, true).unwrap();
            let s = tape.scale(s, scale).unwrap();
            let s = tape.add_const(s, &bias_t).unwrap();
            let pr = tape.softmax(s).unwrap();
            let ctx = tape.batch_matmul(pr, vv, false).unwrap();
            let ctx = tape.merge_heads(ctx, b, t, h).unwrap();
            let o = tape.matmul(ctx, p[6]).unwrap();
            let o = tape.add_row(o, p[7]).unwrap();
            let x = tape.add(x, o).unwrap();
            let n2 = tape.layer_norm(x, p[8], p[9]).unwrap();
            let hdn = tape.matmul(n2, p[10]).unwrap();
            let hdn = tape.add_row(hdn, p[11]).unwrap();
            let hdn = tape.relu(hdn).unwrap();
            let hdn = tape.mask_mul(hdn, &ffn_mask_t).unwrap();
            let y = tape.matmul(hdn, p[12]).unwrap();
            let y = tape.add_row(y, p[13]).unwrap();
            let x = tape.add(x, y).unwrap();
            let logits = tape.matmul(x, p[14]).unwrap();
            tape.cross_entropy(logits, &tg, 0).unwrap()
        },
        move |p| {
            let mut x = Vec::with_capacity(b * t * d);
            for &id in &ids {
                x.extend_from_slice(&p[0][id * d..(id + 1) * d]);
            }
            let n = layer_norm(&x, &p[1], &p[2]);
            let q = mm(&n, &p[3], b * t, d, d);
            let k = mm(&n, &p[4], b * t, d, d);
            let vv = mm(&n, &p[5], b * t, d, d);
            let mut ctx = vec![0.0; b * t * d];
            for bb in 0..b {
                for hh in 0..h {
                    for qi in 0..t {
                        let mut scores = vec![0.0; t];
                        for ki in 0..t {
                            let mut s = 0.0;
                            for j in 0..dh {
                                s += q[(bb * t + qi) * d + hh * dh + j] * k[(bb * t + ki) * d + hh * dh + j];
                            }
                            scores[ki] = s * (scale as f64) + bias[((bb * h + hh) * t + qi) * t + ki] as f64;
                        }
                        let pr = softmax(&scores, t);
                        for j in 0..dh {
                            ctx[(bb * t + qi) * d + hh * dh + j] =
                                (0..t).map(|ki| pr[ki] * vv[(bb * t + ki) * d + hh * dh + j]).sum();
                        }
                    }
                }
            }
            let o = add_row(&mm(&ctx, &p[6], b * t, d, d), &p[7]);
            let x: Vec<f64> = x.iter().zip(&o).map(|(a, c)| a + c).collect();
            let n2 = layer_norm(&x, &p[8], &p[9]);
            let hdn = relu(&add_row(&mm(&n2, &p[10], b * t, d, f), &p[11]));
            let hdn: Vec<f64> = hdn.iter().enumerate().map(|(i, v)| v * ffn_mask[i % f] as f64).collect();
            let y = add_row(&mm(&hdn, &p[12], b * t, f, d), &p[13]);
            let x: Vec<f64> = x.iter().zip(&y).map(|(a, c)| a + c).collect();
            let logits = mm(&x, &p[14], b * t, d, v);
            cross_entropy(&logits, v, &targets, 0)
        },
    )
}

#[test]
fn mlp_gradients_match_finite_differences() {
    for seed in 0..8 {
        let err = mlp_case(seed);
        assert!(err <= REL_TOL, "mlp seed {seed}: max rel err {err:e}");
    }
}

#[test]
fn mixed_primitive_gradients_match_finite_differences() {
    for seed in 100..106 {
        let err = mixed_case(seed);
        assert!(err <= REL_TOL, "mixed seed {seed}: max rel err {err:e}");
    }
}

#[test]
fn attention_layer_gradients_match_finite_differences() {
    for seed in 200..208 {
        let err = attention_case(seed);
        assert!(err <= REL_TOL, "attention seed {seed}: max rel err {err:e}");
    }
}

#[test]
fn deterministic_forward_and_backward() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![0.1, -0.4, 0.3, 0.9, -0.2, 0.5]).unwrap(), true);
        let w = tape.leaf(Tensor::matrix(3, 3, (0..9).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap(), true);
        let y = tape.matmul(x, w).unwrap();
        let y = tape.softmax(y).unwrap();
        let l = tape.cross_entropy(y, &[1, 2], 99).unwrap();
        tape.backward(l).unwrap();
        let mut bits: Vec<u32> = tape.grad(w).unwrap().iter().map(|g| g.to_bits()).collect();
        bits.push(tape.value(l).data()[0].to_bits());
        bits
    };
    assert_eq!(run(), run());
}
