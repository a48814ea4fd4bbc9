//! Finite-difference checks for every tape operation, and a straight-line
//! oracle for the attention layer.
#![allow(clippy::needless_range_loop)]

use hexplain::autodiff::{
    gat_forward, grad_check, grad_check_with, Axis, GatParams, Grads, Gru, Linear, ParamStore, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts `out` with a fixed random weight so every entry matters.
fn weigh(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let (m, n) = tape.shape(out);
    let c = tape.constant(Tensor::uniform(m, n, 1.0, &mut rng(seed)));
    let p = tape.mul(out, c).unwrap();
    tape.sum_all(p)
}

fn check(store: &ParamStore, f: impl Fn(&mut Tape) -> Var) {
    let report = grad_check(store, |t| {
        let out = f(t);
        weigh(t, out, 99)
    }, TOL);
    assert!(report.passed(), "{report:?}");
}

fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    for &(name, m, n) in shapes {
        s.add(name, Tensor::uniform(m, n, 1.0, &mut r));
    }
    s
}

fn positive_store(name: &str, m: usize, n: usize, seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let data = (0..m * n).map(|_| r.gen_range(0.5..2.0)).collect();
    s.add(name, Tensor::from_vec(m, n, data));
    s
}

fn p(t: &mut Tape, name: &str) -> Var {
    let id = t.params().id(name).unwrap();
    t.param(id)
}

#[test]
fn binary_ops() {
    let s = store_with(&[("a", 5, 4), ("b", 4, 3), ("c", 5, 4), ("col", 5, 1), ("row", 1, 4)], 1);
    check(&s, |t| {
        let (a, b) = (p(t, "a"), p(t, "b"));
        t.matmul(a, b).unwrap()
    });
    check(&s, |t| {
        let (a, c) = (p(t, "a"), p(t, "c"));
        t.add(a, c).unwrap()
    });
    check(&s, |t| {
        let (a, c) = (p(t, "a"), p(t, "c"));
        t.sub(a, c).unwrap()
    });
    check(&s, |t| {
        let (a, c) = (p(t, "a"), p(t, "c"));
        t.mul(a, c).unwrap()
    });
    check(&s, |t| {
        let (a, col) = (p(t, "a"), p(t, "col"));
        t.add_col(a, col).unwrap()
    });
    check(&s, |t| {
        let (a, row) = (p(t, "a"), p(t, "row"));
        t.add_row(a, row).unwrap()
    });
    check(&s, |t| {
        let (col, row) = (p(t, "col"), p(t, "row"));
        t.outer_sum(col, row).unwrap()
    });
}

#[test]
fn elementwise_ops() {
    let s = store_with(&[("x", 6, 3)], 2);
    check(&s, |t| {
        let x = p(t, "x");
        t.scale(x, -1.7)
    });
    check(&s, |t| {
        let x = p(t, "x");
        t.add_scalar(x, 0.3)
    });
    check(&s, |t| {
        let x = p(t, "x");
        t.tanh(x)
    });
    check(&s, |t| {
        let x = p(t, "x");
        t.sigmoid(x)
    });
    check(&s, |t| {
        let x = p(t, "x");
        t.leaky_relu(x, 0.2)
    });
    check(&s, |t| {
        let x = p(t, "x");
        t.exp(x)
    });
    check(&s, |t| {
        let x = p(t, "x");
        t.transpose(x)
    });
    check(&s, |t| {
        let x = p(t, "x");
        t.dropout(x, 0.3, 11)
    });
    let pos = positive_store("x", 4, 4, 3);
    check(&pos, |t| {
        let x = p(t, "x");
        t.ln(x)
    });
    check(&pos, |t| {
        let x = p(t, "x");
        t.normalize(x)
    });
}

#[test]
fn normalizing_ops() {
    let s = store_with(&[("x", 5, 4)], 4);
    for axis in [Axis::Rows, Axis::Cols] {
        check(&s, |t| {
            let x = p(t, "x");
            t.softmax(x, axis)
        });
        check(&s, |t| {
            let x = p(t, "x");
            let mask = (0..20).map(|i| i % 3 != 1).collect();
            t.masked_softmax(x, mask, axis).unwrap()
        });
        check(&s, |t| {
            let x = p(t, "x");
            t.log_softmax(x, None, axis).unwrap()
        });
        check(&s, |t| {
            let x = p(t, "x");
            let mask = (0..20).map(|i| i % 4 != 0).collect();
            t.log_softmax(x, Some(mask), axis).unwrap()
        });
    }
}

#[test]
fn structural_ops() {
    let s = store_with(&[("a", 3, 4), ("b", 2, 4), ("c", 3, 2), ("table", 6, 3)], 5);
    for axis in [Axis::Rows, Axis::Cols] {
        check(&s, |t| {
            let a = p(t, "a");
            t.sum(a, axis)
        });
    }
    check(&s, |t| {
        let a = p(t, "a");
        t.sum_all(a)
    });
    check(&s, |t| {
        let (a, b) = (p(t, "a"), p(t, "b"));
        t.concat(&[a, b, a], Axis::Rows).unwrap()
    });
    check(&s, |t| {
        let (a, c) = (p(t, "a"), p(t, "c"));
        t.concat(&[c, a], Axis::Cols).unwrap()
    });
    check(&s, |t| {
        let a = p(t, "a");
        t.slice(a, Axis::Rows, 1, 2).unwrap()
    });
    check(&s, |t| {
        let a = p(t, "a");
        t.slice(a, Axis::Cols, 1, 3).unwrap()
    });
    check(&s, |t| {
        let table = p(t, "table");
        t.embed(table, &[4, 0, 4, 2]).unwrap()
    });
    check(&s, |t| {
        let a = p(t, "a");
        t.pick(a, 2, 1)
    });
}

#[test]
fn layers() {
    let mut r = rng(6);
    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", 5, 3, &mut r);
    let gru = Gru::new(&mut s, "gru", 4, 3, &mut r);
    s.add("x", Tensor::uniform(5, 1, 1.0, &mut r));
    s.add("xs", Tensor::uniform(4, 3, 1.0, &mut r));
    s.add("h", Tensor::uniform(3, 1, 1.0, &mut r));
    check(&s, |t| {
        let x = p(t, "x");
        lin.forward(t, x).unwrap()
    });
    check(&s, |t| {
        let xs = p(t, "xs");
        let x = t.slice(xs, Axis::Cols, 0, 1).unwrap();
        let h = p(t, "h");
        gru.step(t, x, h).unwrap()
    });
    check(&s, |t| {
        let (xs, h) = (p(t, "xs"), p(t, "h"));
        gru.run(t, xs, h).unwrap()
    });
}

#[test]
fn attention_layer() {
    let mut r = rng(7);
    let mut s = ParamStore::new();
    let gat = GatParams::new(&mut s, "gat", 3, 4, 2, &mut r);
    s.add("x", Tensor::uniform(4, 3, 1.0, &mut r));
    for dropout in [None, Some((0.2, 5))] {
        check(&s, |t| {
            let x = p(t, "x");
            gat_forward(t, &gat, x, &[(0, 1), (1, 0), (2, 3)], dropout).unwrap().embeddings
        });
    }
}

#[test]
fn corrupted_backward_rule_is_reported() {
    // Affine map with a wrong weight gradient (missing transpose of x).
    let s = store_with(&[("w", 3, 3), ("b", 3, 1), ("x", 3, 1)], 8);
    let loss = |st: &ParamStore| {
        let mut t = Tape::new(st);
        let (w, b, x) = (p(&mut t, "w"), p(&mut t, "b"), p(&mut t, "x"));
        let y = t.matmul(w, x).unwrap();
        let y = t.add_col(y, b).unwrap();
        let out = t.sum_all(y);
        t.value(out).item()
    };
    let honest = |st: &ParamStore| {
        let mut t = Tape::new(st);
        let (w, b, x) = (p(&mut t, "w"), p(&mut t, "b"), p(&mut t, "x"));
        let y = t.matmul(w, x).unwrap();
        let y = t.add_col(y, b).unwrap();
        let out = t.sum_all(y);
        let mut g = Grads::new(st);
        t.backward(out, &mut g);
        g
    };
    assert!(grad_check_with(&s, loss, honest, TOL).passed());
    let corrupted = |st: &ParamStore| {
        let mut g = Grads::new(st);
        let x = st.by_name("x").unwrap();
        let w = st.by_name("w").unwrap();
        // dL/dW[i][j] should be x[j]; this rule uses x[i].
        let gw = Tensor::from_vec(3, 3, (0..9).map(|k| x.data()[k / 3]).collect());
        g.accumulate(st.id("w").unwrap(), &gw);
        g.accumulate(st.id("b").unwrap(), &Tensor::filled(3, 1, 1.0));
        g.accumulate(st.id("x").unwrap(), &w.transpose().matmul(&Tensor::filled(3, 1, 1.0)).unwrap());
        g
    };
    let report = grad_check_with(&s, loss, corrupted, TOL);
    assert!(!report.passed());
    let failed: Vec<&str> = report.failures().map(|f| f.name.as_str()).collect();
    assert_eq!(failed, vec!["w"]);
}

/// Plain-loop GAT forward used as an independent oracle.
fn gat_reference(x: &Tensor, heads: &[(Tensor, Tensor, Tensor)], edges: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let n = x.rows();
    let d = heads[0].0.cols();
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        adj[i][i] = true;
    }
    for &(s, t) in edges {
        adj[t][s] = true;
    }
    let mut acc = vec![vec![0.0; d]; n];
    for (w, a_src, a_dst) in heads {
        let z: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|k| (0..x.cols()).map(|j| x.get(i, j) * w.get(j, k)).sum()).collect())
            .collect();
        for i in 0..n {
            let si: f64 = (0..d).map(|k| a_src.data()[k] * z[i][k]).sum();
            let scores: Vec<Option<f64>> = (0..n)
                .map(|j| {
                    adj[i][j].then(|| {
                        let e = si + (0..d).map(|k| a_dst.data()[k] * z[j][k]).sum::<f64>();
                        if e > 0.0 {
                            e
                        } else {
                            0.2 * e
                        }
                    })
                })
                .collect();
            let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scores.iter().flatten().map(|e| (e - max).exp()).sum();
            for (j, e) in scores.iter().enumerate() {
                if let Some(e) = e {
                    let a = (e - max).exp() / denom;
                    for k in 0..d {
                        acc[i][k] += a * z[j][k];
                    }
                }
            }
        }
    }
    let m = heads.len() as f64;
    acc.into_iter().map(|row| row.into_iter().map(|v| (v / m).tanh()).collect()).collect()
}

#[test]
fn attention_layer_matches_reference() {
    let mut r = rng(17);
    let mut s = ParamStore::new();
    let gat = GatParams::new(&mut s, "gat", 5, 3, 4, &mut r);
    let x = Tensor::uniform(4, 5, 1.0, &mut r);
    let edges = [(0, 1), (1, 2), (2, 0), (3, 1)];
    let mut tape = Tape::new(&s);
    let xv = tape.constant(x.clone());
    let out = gat_forward(&mut tape, &gat, xv, &edges, None).unwrap();
    let heads: Vec<_> = gat
        .heads
        .iter()
        .map(|h| (s.get(h.w).clone(), s.get(h.a_src).clone(), s.get(h.a_dst).clone()))
        .collect();
    let want = gat_reference(&x, &heads, &edges);
    let got = tape.value(out.embeddings);
    for i in 0..4 {
        for k in 0..3 {
            assert!((got.get(i, k) - want[i][k]).abs() < 1e-12);
        }
    }
}
