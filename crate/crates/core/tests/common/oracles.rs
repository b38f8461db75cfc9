//! Plain nested-loop reimplementations of the attention and decoding
//! operators, compared against the tape on randomized small instances. Each
//! check returns the largest absolute deviation seen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vlt::balance::{MaskDecoder, QueryBalance};
use vlt::config::Upsample;
use vlt::fusion::SpatialDynamicFusion;
use vlt::nn::{Conv3x3, Linear};
use vlt::query::QueryGenerator;
use vlt::transformer::MultiHeadAttention;
use vlt::{ParamId, ParamStore, Tape, Tensor};

type Mat = Vec<Vec<f64>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Replaces every parameter (biases included) with uniform noise.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, rand_tensor(rng, &shape)).unwrap();
    }
}

fn mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| (0..c).map(|j| t.at2(i, j)).collect()).collect()
}

fn vec1(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let mut y = matmul(x, &mat(store.get(l.weight)));
    if let Some(b) = l.bias {
        let b = vec1(store.get(b));
        for row in &mut y {
            for (v, bj) in row.iter_mut().zip(&b) {
                *v += bj;
            }
        }
    }
    y
}

fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

fn scale(a: &Mat, s: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

/// Row softmax restricted to `valid` columns; the rest get exactly zero.
fn masked_softmax(a: &Mat, valid: &[bool]) -> Mat {
    a.iter()
        .map(|row| {
            let mx = row.iter().zip(valid).filter(|(_, &v)| v).map(|(x, _)| *x).fold(f64::MIN, f64::max);
            let e: Vec<f64> = row.iter().zip(valid).map(|(x, &v)| if v { (x - mx).exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Largest absolute difference; shapes must agree.
fn deviation(name: &str, got: &Tensor, want: &Mat) -> f64 {
    let g = mat(got);
    assert_eq!(g.len(), want.len(), "{name}: rows");
    let mut worst = 0.0f64;
    for (gr, wr) in g.iter().zip(want) {
        assert_eq!(gr.len(), wr.len(), "{name}: cols");
        for (a, b) in gr.iter().zip(wr) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

fn random_word_mask(rng: &mut ChaCha8Rng, nt: usize) -> Vec<bool> {
    let len = rng.gen_range(1..=nt);
    (0..nt).map(|i| i < len).collect()
}

pub fn sdf(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 4 * rng.gen_range(1..=3);
        let hw = rng.gen_range(1..=9);
        let nt = rng.gen_range(1..=6);
        let mut store = ParamStore::new();
        let sdf = SpatialDynamicFusion::new(&mut store, &mut rng, c).unwrap();
        randomize(&mut store, &mut rng);
        let vision = rand_tensor(&mut rng, &[hw, c]);
        let words = rand_tensor(&mut rng, &[nt, c]);
        let valid = random_word_mask(&mut rng, nt);

        let mut tape = Tape::new();
        let v = tape.constant(vision.clone());
        let w = tape.constant(words.clone());
        let a = sdf.attention(&mut tape, &store, v, w, &valid).unwrap();
        let fused = sdf.fuse(&mut tape, &store, a, w, v).unwrap();

        let kv = linear(&store, &sdf.vision_key, &mat(&vision));
        let kt = linear(&store, &sdf.word_key, &mat(&words));
        let want_a = masked_softmax(&scale(&matmul(&kv, &transpose(&kt)), 1.0 / (c as f64).sqrt()), &valid);
        worst = worst.max(deviation("A_sd", tape.value(a), &want_a));

        let vt = linear(&store, &sdf.word_value, &mat(&words));
        let sdl = matmul(&want_a, &vt);
        let cat: Mat = sdl.iter().zip(mat(&vision)).map(|(l, r)| l.iter().copied().chain(r).collect()).collect();
        worst = worst.max(deviation("F_fused", tape.value(fused), &linear(&store, &sdf.out, &cat)));
    }
    worst
}

pub fn query_generation(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let c = 4 * rng.gen_range(1..=3);
        let hw = rng.gen_range(1..=9);
        let nq = rng.gen_range(1..=5);
        let nt = rng.gen_range(1..=6);
        let share = rng.gen_bool(0.5);
        let mut store = ParamStore::new();
        let g = QueryGenerator::new(&mut store, &mut rng, c, nq, hw, share).unwrap();
        randomize(&mut store, &mut rng);
        let vision = rand_tensor(&mut rng, &[hw, c]);
        let words = rand_tensor(&mut rng, &[nt, c]);
        let valid = random_word_mask(&mut rng, nt);

        let mut tape = Tape::new();
        let v = tape.constant(vision.clone());
        let w = tape.constant(words.clone());
        let fvq = g.prepare_vision_queries(&mut tape, &store, v).unwrap();
        let a = g.attention(&mut tape, &store, fvq, w, &valid).unwrap();
        let fq = g.generate(&mut tape, &store, fvq, w, a).unwrap();

        let x = relu(&linear(&store, &g.prep[0], &mat(&vision)));
        let x = relu(&linear(&store, &g.prep[1], &x));
        let want_fvq = transpose(&linear(&store, &g.prep[2], &x));
        worst = worst.max(deviation("F_vq", tape.value(fvq), &want_fvq));

        let wv = mat(store.get(g.w_v));
        let sv = relu(&matmul(&want_fvq, &wv));
        let sa = relu(&matmul(&mat(&words), &mat(store.get(g.w_a))));
        let want_a = masked_softmax(&scale(&matmul(&sv, &transpose(&sa)), 1.0 / (c as f64).sqrt()), &valid);
        worst = worst.max(deviation("A_qd", tape.value(a), &want_a));

        let lt = relu(&matmul(&mat(&words), &mat(store.get(g.w_t))));
        let wres = mat(store.get(g.w_v_residual.unwrap_or(g.w_v)));
        let vis = relu(&matmul(&want_fvq, &wres));
        let lang = matmul(&want_a, &lt);
        let want_fq: Mat = lang.iter().zip(&vis).map(|(l, r)| l.iter().zip(r).map(|(a, b)| a + b).collect()).collect();
        worst = worst.max(deviation("F_q", tape.value(fq), &want_fq));
    }
    worst
}

pub fn multi_head_attention(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let heads = rng.gen_range(1..=3);
        let dk = rng.gen_range(1..=4);
        let dim = heads * dk;
        let nq = rng.gen_range(1..=6);
        let nk = rng.gen_range(1..=6);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "mha", dim, heads).unwrap();
        randomize(&mut store, &mut rng);
        let query = rand_tensor(&mut rng, &[nq, dim]);
        let key = rand_tensor(&mut rng, &[nk, dim]);
        let value = rand_tensor(&mut rng, &[nk, dim]);

        let mut tape = Tape::new();
        let (q, k, v) = (tape.constant(query.clone()), tape.constant(key.clone()), tape.constant(value.clone()));
        let (out, weights) = mha.forward_with_weights(&mut tape, &store, q, k, v).unwrap();

        let qp = linear(&store, &mha.q, &mat(&query));
        let kp = linear(&store, &mha.k, &mat(&key));
        let vp = linear(&store, &mha.v, &mat(&value));
        let mut cat = vec![vec![0.0; dim]; nq];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let mut a = vec![vec![0.0; nk]; nq];
            for i in 0..nq {
                for j in 0..nk {
                    a[i][j] = cols.clone().map(|t| qp[i][t] * kp[j][t]).sum::<f64>() / (dk as f64).sqrt();
                }
            }
            let a = masked_softmax(&a, &vec![true; nk]);
            worst = worst.max(deviation("attention weights", tape.value(weights[h]), &a));
            for i in 0..nq {
                for t in cols.clone() {
                    cat[i][t] = (0..nk).map(|j| a[i][j] * vp[j][t]).sum();
                }
            }
        }
        worst = worst.max(deviation("MHA output", tape.value(out), &linear(&store, &mha.out, &cat)));
    }
    worst
}

pub fn query_balance(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let c = rng.gen_range(1..=8);
        let nq = rng.gen_range(1..=6);
        let mut store = ParamStore::new();
        let qbm = QueryBalance::new(&mut store, &mut rng, c).unwrap();
        randomize(&mut store, &mut rng);
        let queries = rand_tensor(&mut rng, &[nq, c]);
        let responses = rand_tensor(&mut rng, &[nq, c]);

        let mut tape = Tape::new();
        let q = tape.constant(queries.clone());
        let r = tape.constant(responses.clone());
        let (conf, balanced) = qbm.forward(&mut tape, &store, q, r).unwrap();

        let qp = linear(&store, &qbm.query_proj, &mat(&queries));
        let rm = mat(&responses);
        let cat: Mat = qp.iter().zip(&rm).map(|(a, b)| a.iter().chain(b).copied().collect()).collect();
        let h = relu(&linear(&store, &qbm.hidden, &cat));
        let s = linear(&store, &qbm.score, &h);
        let want_c: Mat = s.iter().map(|r| vec![1.0 / (1.0 + (-r[0]).exp())]).collect();
        worst = worst.max(deviation("C_q", tape.value(conf), &want_c));
        let want_b: Mat = rm.iter().zip(&want_c).map(|(row, c)| row.iter().map(|v| v * c[0]).collect()).collect();
        worst = worst.max(deviation("F_b", tape.value(balanced), &want_b));
    }
    worst
}

/// `H×W×C` map as nested `[y][x][c]`.
type Map = Vec<Vec<Vec<f64>>>;

fn conv3x3(store: &ParamStore, conv: &Conv3x3, x: &Map) -> Map {
    let (h, w) = (x.len(), x[0].len());
    let wt = mat(store.get(conv.weight));
    let b = vec1(store.get(conv.bias));
    let mut out = vec![vec![vec![0.0; conv.out_ch]; w]; h];
    for (y, orow) in out.iter_mut().enumerate() {
        for (xx, o) in orow.iter_mut().enumerate() {
            for (oc, ov) in o.iter_mut().enumerate() {
                let mut s = b[oc];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ic in 0..conv.in_ch {
                            s += x[iy as usize][ix as usize][ic] * wt[(ky * 3 + kx) * conv.in_ch + ic][oc];
                        }
                    }
                }
                *ov = s;
            }
        }
    }
    out
}

/// Source coordinate of output index `o` under 2× half-pixel resampling.
fn source(o: usize, n: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, s - lo as f64)
}

fn upsample(x: &Map, mode: Upsample) -> Map {
    let (h, w, c) = (x.len(), x[0].len(), x[0][0].len());
    let mut out = vec![vec![vec![0.0; c]; 2 * w]; 2 * h];
    for (oy, orow) in out.iter_mut().enumerate() {
        for (ox, o) in orow.iter_mut().enumerate() {
            for (ch, v) in o.iter_mut().enumerate() {
                *v = match mode {
                    Upsample::Nearest => x[oy / 2][ox / 2][ch],
                    Upsample::Bilinear => {
                        let (y0, y1, fy) = source(oy, h);
                        let (x0, x1, fx) = source(ox, w);
                        let top = x[y0][x0][ch] * (1.0 - fx) + x[y0][x1][ch] * fx;
                        let bot = x[y1][x0][ch] * (1.0 - fx) + x[y1][x1][ch] * fx;
                        top * (1.0 - fy) + bot * fy
                    }
                };
            }
        }
    }
    out
}

pub fn decode_mask(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let c = rng.gen_range(1..=6);
        let nq = rng.gen_range(1..=5);
        let (gh, gw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let mode = if rng.gen_bool(0.5) { Upsample::Bilinear } else { Upsample::Nearest };
        let mut store = ParamStore::new();
        let dec = MaskDecoder::new(&mut store, &mut rng, nq, mode).unwrap();
        randomize(&mut store, &mut rng);
        let fb = rand_tensor(&mut rng, &[nq, c]);
        let fve = rand_tensor(&mut rng, &[gh * gw, c]);

        let mut tape = Tape::new();
        let b = tape.constant(fb.clone());
        let e = tape.constant(fve.clone());
        let out = dec.forward(&mut tape, &store, b, e, (gh, gw)).unwrap();

        let fm = matmul(&mat(&fve), &transpose(&mat(&fb)));
        worst = worst.max(deviation("F_m", tape.value(out.feature), &fm));
        let mut x: Map = (0..gh).map(|y| (0..gw).map(|xx| fm[y * gw + xx].clone()).collect()).collect();
        for conv in &dec.convs {
            let y = conv3x3(&store, conv, &x);
            let y: Map = y.iter().map(|r| r.iter().map(|p| p.iter().map(|v| v.max(0.0)).collect()).collect()).collect();
            x = upsample(&y, mode);
        }
        let w = mat(store.get(dec.out.weight));
        let bias = vec1(store.get(dec.out.bias.unwrap()))[0];
        let logits: Mat = x
            .iter()
            .map(|r| r.iter().map(|p| bias + p.iter().zip(&w).map(|(v, wr)| v * wr[0]).sum::<f64>()).collect())
            .collect();
        assert_eq!(tape.shape(out.logits), &[8 * gh, 8 * gw]);
        worst = worst.max(deviation("logits", tape.value(out.logits), &logits));
    }
    worst
}
