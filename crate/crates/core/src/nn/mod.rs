//! Minimal tensor engine: dense tensors, a differentiation tape and AdamW.

pub mod graph;
pub mod params;
pub mod tensor;

pub use graph::{gelu, Graph, Var};
pub use params::{AdamW, AdamWConfig, ParamStore};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod gradcheck {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng as _;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Compares the tape gradient of `sum(out * w)` with central differences
    /// for every leaf.
    fn check(leaves: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let run = |vals: &[Tensor<f64>]| -> (Graph<f64>, Vec<Var>, Var) {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (g0, _, out0) = run(&leaves);
        let w = rand_tensor(&g0.value(out0).shape, 99);
        let loss = |vals: &[Tensor<f64>]| {
            let (mut g, _, out) = run(vals);
            let l = g.dot(out, &w);
            g.value(l).data[0]
        };
        let (mut g, vars, out) = run(&leaves);
        let l = g.dot(out, &w);
        g.backward(vec![(l, Tensor::new(&[1], vec![1.0]))]);
        let h = 1e-6;
        for (li, v) in vars.iter().enumerate() {
            let analytic = g.grad(*v).map(|t| t.data.clone()).unwrap_or_else(|| vec![0.0; leaves[li].len()]);
            let mut numeric = vec![0.0; leaves[li].len()];
            for k in 0..leaves[li].len() {
                let mut p = leaves.clone();
                p[li].data[k] += h;
                let up = loss(&p);
                p[li].data[k] -= 2.0 * h;
                let down = loss(&p);
                numeric[k] = (up - down) / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
            assert!(norm > 0.0, "leaf {li} has zero numeric gradient");
            assert!(diff / norm <= 1e-5, "leaf {li}: relative error {}", diff / norm);
        }
    }

    #[test]
    fn linear() {
        check(vec![rand_tensor(&[2, 3, 4], 1), rand_tensor(&[4, 5], 2), rand_tensor(&[5], 3)], |g, v| g.linear(v[0], v[1], Some(v[2])));
    }

    #[test]
    fn add_and_broadcast() {
        check(vec![rand_tensor(&[2, 3, 4], 1), rand_tensor(&[1, 3, 4], 2), rand_tensor(&[2, 3, 4], 3)], |g, v| {
            let a = g.add_broadcast(v[0], v[1]);
            g.add(a, v[2])
        });
        check(vec![rand_tensor(&[2, 3, 4, 5], 4), rand_tensor(&[1, 1, 4, 5], 5)], |g, v| g.add_broadcast(v[0], v[1]));
    }

    #[test]
    fn gelu_and_layer_norm() {
        check(vec![rand_tensor(&[3, 6], 1), rand_tensor(&[6], 2), rand_tensor(&[6], 3)], |g, v| {
            let x = g.gelu(v[0]);
            g.layer_norm(x, v[1], v[2])
        });
    }

    #[test]
    fn attention_unmasked_and_masked() {
        let leaves = || vec![rand_tensor(&[2, 4, 6], 1), rand_tensor(&[2, 4, 6], 2), rand_tensor(&[2, 4, 6], 3)];
        check(leaves(), |g, v| g.attention(v[0], v[1], v[2], 2, None));
        check(leaves(), |g, v| g.attention(v[0], v[1], v[2], 3, Some(vec![4, 2])));
    }

    #[test]
    fn masked_keys_are_ignored() {
        let mut g = Graph::<f64>::new();
        let q = g.input(rand_tensor(&[1, 3, 4], 1));
        let k = g.input(rand_tensor(&[1, 3, 4], 2));
        let v1 = rand_tensor(&[1, 3, 4], 3);
        let mut v2 = v1.clone();
        for x in &mut v2.data[8..] {
            *x += 100.0;
        }
        let a = g.input(v1);
        let b = g.input(v2);
        let o1 = g.attention(q, k, a, 2, Some(vec![2]));
        let o2 = g.attention(q, k, b, 2, Some(vec![2]));
        assert_eq!(g.value(o1).data, g.value(o2).data);
    }

    #[test]
    fn layout_ops() {
        check(vec![rand_tensor(&[2, 3, 4, 2], 1), rand_tensor(&[4, 2], 2)], |g, v| {
            let p = g.prepend(v[0], v[1]);
            let t = g.transpose12(p);
            let r = g.reshape(t, &[2 * 4, 4, 2]);
            g.slice_axis1(r, 0, 3)
        });
    }

    #[test]
    fn gather_rows() {
        check(vec![rand_tensor(&[5, 3], 1)], |g, v| g.gather(v[0], &[4, 0, 4, 2]));
    }

    #[test]
    fn softmax_weighted_sum_normalize() {
        check(vec![rand_tensor(&[2, 5, 3], 1), rand_tensor(&[5], 2)], |g, v| {
            let w = g.softmax(v[1]);
            let s = g.weighted_sum_axis1(v[0], w);
            g.normalize_rows(s)
        });
    }

    #[test]
    fn dropout_gradient_follows_mask() {
        let mut g = Graph::<f64>::training(5);
        let x = g.leaf(Tensor::full(&[1000], 1.0));
        let y = g.dropout(x, 0.5);
        let kept = g.value(y).data.iter().filter(|v| **v != 0.0).count();
        assert!((400..600).contains(&kept));
        assert!(g.value(y).data.iter().all(|v| *v == 0.0 || (*v - 2.0).abs() < 1e-12));
        let l = g.dot(y, &Tensor::full(&[1000], 1.0));
        g.backward(vec![(l, Tensor::new(&[1], vec![1.0]))]);
        assert_eq!(g.grad(x).unwrap().data, g.value(y).data);
        let mut inf = Graph::<f64>::new();
        let x = inf.input(Tensor::full(&[4], 1.0));
        assert_eq!(inf.dropout(x, 0.5), x);
    }

    #[test]
    fn params_are_shared_and_accumulated() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::from_f64(&[2], &[1.0, 2.0]));
        let mut g = Graph::new();
        let a = g.param(&ps, id);
        let b = g.param(&ps, id);
        assert_eq!(a, b);
        let s = g.add(a, b);
        let l = g.dot(s, &Tensor::from_f64(&[2], &[1.0, 3.0]));
        g.backward(vec![(l, Tensor::new(&[1], vec![1.0]))]);
        g.accumulate_param_grads(&mut ps);
        assert_eq!(ps.grad(id).data, vec![2.0, 6.0]);
    }

    #[test]
    fn f32_gemm_matches_naive() {
        let a = rand_tensor(&[3, 4], 1).cast::<f32>();
        let b = rand_tensor(&[4, 2], 2).cast::<f32>();
        let mut c = vec![0f32; 6];
        f32::gemm(3, 4, 2, 1.0, &a.data, 4, 1, &b.data, 2, 1, 0.0, &mut c, 2, 1);
        for i in 0..3 {
            for j in 0..2 {
                let want: f32 = (0..4).map(|k| a.data[i * 4 + k] * b.data[k * 2 + j]).sum();
                assert!((c[i * 2 + j] - want).abs() < 1e-5);
            }
        }
    }
}
