//! Dense tensors and tape-based reverse-mode differentiation.

mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_along;

/// Softmax of a plain slice, outside any tape.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    softmax_along(values, &[values.len()], 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grad_matches, random_tensor};

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let i = t.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = t.leaf(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.leaf(Tensor::row(&[1.0, 2.0]));
        let col = t.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let d = t.matmul(a, col).unwrap();
        assert_eq!(t.value(d).data(), &[11.0]);
        assert_eq!(t.shape(d), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        assert!(softmax(&[0.0, 0.0, 0.0]).iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let big = softmax(&[1000.0, 0.0]);
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1].abs() < 1e-12);
        let p = softmax(&[2f64.ln(), 1f64.ln()]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_on_tape_along_each_axis() {
        let mut t = Tape::new();
        let x = t.leaf(random_tensor(&[3, 4], 11, 3.0));
        for axis in 0..2 {
            let y = t.softmax(x, axis).unwrap();
            let v = t.value(y);
            let (rows, cols) = (3, 4);
            if axis == 1 {
                for r in 0..rows {
                    let s: f64 = (0..cols).map(|c| v.at(r, c)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            } else {
                for c in 0..cols {
                    let s: f64 = (0..rows).map(|r| v.at(r, c)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
            assert!(v.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn silu_zero_and_rmsnorm_hand_value() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::scalar(0.0));
        let s = t.silu(z);
        assert_eq!(t.value(s).data(), &[0.0]);

        let x = t.leaf(Tensor::row(&[3.0, 4.0]));
        let w = t.leaf(Tensor::row(&[1.0, 1.0]));
        let y = t.rmsnorm(x, w, 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert_eq!(t.value(y).data(), &[3.0 / r, 4.0 / r]);
    }

    #[test]
    fn backward_simple_cases() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]).with_requires_grad(true));
        let l = t.sum(x);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]).with_requires_grad(true));
        let sq = t.square(x);
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn duplicate_use_accumulates() {
        // f(x) = x*x + 3x  ->  f'(x) = 2x + 3
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.5, -2.0]).with_requires_grad(true));
        let xx = t.mul(x, x).unwrap();
        let x3 = t.scale(x, 3.0);
        let s = t.add(xx, x3).unwrap();
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0, -1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]).with_requires_grad(true));
        let c = t.constant(Tensor::row(&[5.0, 5.0]));
        let p = t.mul(x, c).unwrap();
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[5.0, 5.0]);
    }

    // Each op, composed with a fixed random projection so the scalar loss
    // depends on every output element, checked at rel. tol 1e-5.
    #[test]
    fn unary_ops_match_finite_differences() {
        type Unary = fn(&mut Tape, Var) -> Var;
        let ops: [(&str, Unary); 6] = [
            ("silu", |t, x| t.silu(x)),
            ("tanh", |t, x| t.tanh(x)),
            ("square", |t, x| t.square(x)),
            ("abs", |t, x| t.abs(x)),
            ("scale", |t, x| t.scale(x, -1.7)),
            ("add_scalar", |t, x| t.add_scalar(x, 0.3)),
        ];
        for (i, (name, op)) in ops.iter().enumerate() {
            let x0 = random_tensor(&[3, 4], 100 + i as u64, 1.0);
            assert_grad_matches(name, &[x0], 1e-5, |t, v| {
                let y = op(t, v[0]);
                project(t, y)
            });
        }
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        type Binary = fn(&mut Tape, Var, Var) -> crate::Result<Var>;
        let ops: [(&str, Binary); 4] = [
            ("add", |t, a, b| t.add(a, b)),
            ("sub", |t, a, b| t.sub(a, b)),
            ("mul", |t, a, b| t.mul(a, b)),
            ("div", |t, a, b| t.div(a, b)),
        ];
        let rhs_shapes: [&[usize]; 4] = [&[3, 4], &[1, 4], &[3, 1], &[]];
        for (name, op) in ops {
            for (k, rs) in rhs_shapes.iter().enumerate() {
                let a = random_tensor(&[3, 4], 7 + k as u64, 1.0);
                let mut b = random_tensor(rs, 70 + k as u64, 1.0);
                if name == "div" {
                    b.data_mut().iter_mut().for_each(|v| *v = 1.5 + v.abs());
                }
                assert_grad_matches(name, &[a, b], 1e-5, |t, v| {
                    let y = op(t, v[0], v[1]).unwrap();
                    project(t, y)
                });
            }
        }
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let a = random_tensor(&[3, 4], 1, 1.0);
        let b = random_tensor(&[4, 2], 2, 1.0);
        assert_grad_matches("matmul", &[a.clone(), b], 1e-5, |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y)
        });
        assert_grad_matches("transpose", &[a.clone()], 1e-5, |t, v| {
            let y = t.transpose(v[0]).unwrap();
            project(t, y)
        });
        for axis in 0..2 {
            assert_grad_matches("softmax", &[a.clone()], 1e-5, |t, v| {
                let y = t.softmax(v[0], axis).unwrap();
                project(t, y)
            });
            assert_grad_matches("sum_axis", &[a.clone()], 1e-5, |t, v| {
                let y = t.sum_axis(v[0], axis).unwrap();
                project(t, y)
            });
            assert_grad_matches("slice", &[a.clone()], 1e-5, |t, v| {
                let y = t.slice(v[0], axis, 1, 3).unwrap();
                project(t, y)
            });
            let c = random_tensor(if axis == 0 { &[2, 4] } else { &[3, 2] }, 9, 1.0);
            assert_grad_matches("concat", &[a.clone(), c], 1e-5, |t, v| {
                let y = t.concat(&[v[0], v[1]], axis).unwrap();
                project(t, y)
            });
        }
        let w = random_tensor(&[4], 3, 1.0);
        assert_grad_matches("rmsnorm", &[a.clone(), w], 1e-5, |t, v| {
            let y = t.rmsnorm(v[0], v[1], 1e-6).unwrap();
            project(t, y)
        });
        assert_grad_matches("mean", &[a.clone()], 1e-5, |t, v| {
            let sq = t.square(v[0]);
            t.mean(sq)
        });
        let shifted = {
            let mut s = a.clone();
            s.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
            s
        };
        assert_grad_matches("clamp_min", &[shifted], 1e-5, |t, v| {
            let y = t.clamp_min(v[0], 0.1);
            project(t, y)
        });
    }

    #[test]
    fn composed_mlp_matches_finite_differences() {
        let x = random_tensor(&[3, 5], 21, 1.0);
        let w1 = random_tensor(&[5, 6], 22, 0.5);
        let b1 = random_tensor(&[1, 6], 23, 0.1);
        let w2 = random_tensor(&[6, 2], 24, 0.5);
        let y = random_tensor(&[3, 2], 25, 1.0);
        assert_grad_matches("mlp", &[x, w1, b1, w2, y], 1e-4, |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add(h, v[2]).unwrap();
            let h = t.silu(h);
            let o = t.matmul(h, v[3]).unwrap();
            let d = t.sub(o, v[4]).unwrap();
            let sq = t.square(d);
            t.mean(sq)
        });
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut t = Tape::new();
            let a = t.leaf(random_tensor(&[4, 4], 5, 1.0).with_requires_grad(true));
            let b = t.leaf(random_tensor(&[4, 4], 6, 1.0));
            let c = t.matmul(a, b).unwrap();
            let s = t.softmax(c, 1).unwrap();
            let l = project(&mut t, s);
            let g = t.backward(l).unwrap();
            (t.value(l).data().to_vec(), g.get(a).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    fn project(t: &mut Tape, y: Var) -> Var {
        let shape = t.shape(y).to_vec();
        let w = t.constant(random_tensor(&shape, 999, 1.0));
        let p = t.mul(y, w).unwrap();
        t.sum(p)
    }
}
