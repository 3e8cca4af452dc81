//! Minimal reverse-mode differentiation: just the operators the two policy
//! networks use, plus Adam and a checkpoint container.

mod adam;
mod checkpoint;
mod layers;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{mlp2_relu, LstmCell, LstmCellState, LstmNodes, Mlp2};
pub use tape::{Adjoints, NodeId, Tape};
pub use tensor::{GradBuf, Gradients, ParamId, ParamSet, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of `d f / d x` for an input-leaf function.
    fn check_input_grad(x: Vec<f64>, f: impl Fn(&mut Tape<'_>, NodeId) -> NodeId) {
        let params = ParamSet::new();
        let eval = |x: &[f64]| {
            let mut t = Tape::new(&params);
            let n = t.input(x.to_vec());
            let out = f(&mut t, n);
            t.scalar(out)
        };
        let mut t = Tape::new(&params);
        let n = t.input(x.clone());
        let out = f(&mut t, n);
        let mut g = Gradients::for_params(&params);
        let adj = t.backward(&[(out, 1.0)], &mut g).unwrap();
        let analytic = adj.get(n).to_vec();
        let eps = 1e-4;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let numeric = (eval(&xp) - eval(&xm)) / (2.0 * eps);
            let err = (analytic[i] - numeric).abs();
            assert!(
                err <= 1e-4 * analytic[i].abs().max(numeric.abs()) + 1e-8,
                "component {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = rand_vec(&mut rng, 6);
        for _ in 0..5 {
            let x = rand_vec(&mut rng, 6);
            let w = w.clone();
            check_input_grad(x, move |t, n| {
                let s = t.sigmoid(n);
                let th = t.tanh(n);
                let r = t.relu(n);
                let a = t.mul(s, th).unwrap();
                let b = t.add(a, r).unwrap();
                let c = t.scale(b, 1.7);
                let wn = t.input(w.clone());
                let d = t.mul(c, wn).unwrap();
                t.sum(d)
            });
        }
    }

    #[test]
    fn softmax_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let x = rand_vec(&mut rng, 5);
            let mask = vec![true, false, true, true, true];
            let m1 = mask.clone();
            check_input_grad(x.clone(), move |t, n| {
                let l = t.log_softmax(n, &m1).unwrap();
                let e = t.entropy(l);
                let p = t.pick(l, 3).unwrap();
                let s = t.scale(p, 0.3);
                let sum = t.concat(&[e, s]);
                t.sum(sum)
            });
            let m2 = mask.clone();
            check_input_grad(x, move |t, n| {
                let p = t.masked_softmax(n, &m2).unwrap();
                let q = t.pick(p, 2).unwrap();
                let r = t.pick(p, 4).unwrap();
                let both = t.concat(&[q, r]);
                let w = t.input(vec![1.0, -2.5]);
                let z = t.mul(both, w).unwrap();
                t.sum(z)
            });
        }
    }

    #[test]
    fn row_dots_and_slices_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 4)).collect();
        for _ in 0..5 {
            let x = rand_vec(&mut rng, 8);
            let rows = rows.clone();
            check_input_grad(x, move |t, n| {
                let a = t.slice(n, 0, 4).unwrap();
                let b = t.slice(n, 4, 4).unwrap();
                let rs: Vec<NodeId> = rows.iter().map(|r| t.input(r.clone())).collect();
                let mut all = rs.clone();
                all.push(b);
                let s = t.row_dots(&all, a).unwrap();
                let l = t.log_softmax(s, &[true; 4]).unwrap();
                t.pick(l, 1).unwrap()
            });
        }
    }

    #[test]
    fn softmax_contracts() {
        let params = ParamSet::new();
        let mut t = Tape::new(&params);
        let s = t.input(vec![0.3; 4]);
        let p = t.masked_softmax(s, &[true; 4]).unwrap();
        assert!(t.value(p).iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let s = t.input(vec![1.0, 2.0, 3.0]);
        let p = t.masked_softmax(s, &[false, true, false]).unwrap();
        assert_eq!(t.value(p), &[0.0, 1.0, 0.0]);

        let raw = vec![0.5, -1.2, 3.3, 0.0];
        let a = t.input(raw.clone());
        let b = t.input(raw.iter().map(|v| v + 10.0).collect());
        let pa = t.masked_softmax(a, &[true; 4]).unwrap();
        let pb = t.masked_softmax(b, &[true; 4]).unwrap();
        for (x, y) in t.value(pa).iter().zip(t.value(pb)) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((t.value(pa).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(t.masked_softmax(a, &[false; 4]).is_err());
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        let mut params = ParamSet::new();
        let w = params
            .insert(Tensor {
                name: "w".into(),
                rows: 2,
                cols: 3,
                data: vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5],
                row_sparse: false,
            })
            .unwrap();
        let x = vec![1.0, 2.0, -3.0];
        let mut t = Tape::new(&params);
        let xn = t.input(x.clone());
        let y = t.matvec(w, xn).unwrap();
        let l = t.sum(y);
        let mut g = Gradients::for_params(&params);
        t.backward(&[(l, 1.0)], &mut g).unwrap();
        assert_eq!(g.dense(w), vec![1.0, 2.0, -3.0, 1.0, 2.0, -3.0]);
    }

    #[test]
    fn backward_requires_recorded_graph() {
        let params = ParamSet::new();
        let t = Tape::new(&params);
        let mut g = Gradients::for_params(&params);
        assert!(t.backward(&[], &mut g).is_err());
    }

    #[test]
    fn zero_lstm_outputs_zero_hidden() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::register(&mut params, "lstm", 3, 4, &mut rng).unwrap();
        params.get_mut(cell.weight).data.iter_mut().for_each(|v| *v = 0.0);
        params.get_mut(cell.bias).data.iter_mut().for_each(|v| *v = 0.0);
        let mut t = Tape::new(&params);
        let prev = LstmCellState::zeros(4).on_tape(&mut t);
        let x = t.input(vec![0.3, -0.2, 0.9]);
        let next = cell.step(&mut t, prev, x).unwrap();
        assert!(t.value(next.hidden).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_carries_cell() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 3;
        let cell = LstmCell::register(&mut params, "lstm", 2, h, &mut rng).unwrap();
        params.get_mut(cell.weight).data.iter_mut().for_each(|v| *v = 0.0);
        {
            let b = &mut params.get_mut(cell.bias).data;
            b.iter_mut().for_each(|v| *v = 0.0);
            b[h..2 * h].iter_mut().for_each(|v| *v = 100.0);
            // input gate closed as well
            b[..h].iter_mut().for_each(|v| *v = -100.0);
        }
        let mut t = Tape::new(&params);
        let prev = LstmCellState {
            hidden: vec![0.1, 0.2, 0.3],
            cell: vec![0.7, -0.4, 1.3],
        };
        let p = prev.on_tape(&mut t);
        let x = t.input(vec![1.0, -1.0]);
        let next = cell.step(&mut t, p, x).unwrap();
        for (a, b) in t.value(next.cell).iter().zip(&prev.cell) {
            // σ(100) = 1 − 3.7e−44, σ(−100) ≈ 3.7e−44
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_shape_mismatch() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::register(&mut params, "lstm", 3, 4, &mut rng).unwrap();
        let mut t = Tape::new(&params);
        let prev = LstmCellState::zeros(4).on_tape(&mut t);
        let x = t.input(vec![0.0; 5]);
        assert!(matches!(cell.step(&mut t, prev, x), Err(crate::Error::Shape { .. })));
    }

    fn identity(params: &mut ParamSet, name: &str, n: usize) -> ParamId {
        let mut t = Tensor::zeros(name, n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        params.insert(t).unwrap()
    }

    #[test]
    fn mlp_identity_and_relu_kill() {
        let mut params = ParamSet::new();
        let w1 = identity(&mut params, "w1", 3);
        let w2 = identity(&mut params, "w2", 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut w2r = Tensor::zeros("w2r", 2, 3);
        w2r.xavier_uniform(&mut rng);
        let w2r = params.insert(w2r).unwrap();
        let mut t = Tape::new(&params);
        let x = t.input(vec![0.5, 0.0, 2.0]);
        let y = mlp2_relu(&mut t, x, w1, w2).unwrap();
        assert_eq!(t.value(y), &[0.5, 0.0, 2.0]);
        let neg = t.input(vec![-0.5, -1.0, -2.0]);
        let y = mlp2_relu(&mut t, neg, w1, w2r).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0]);
        assert!(mlp2_relu(&mut t, x, w2r, w1).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = ParamSet::new();
        let p = params.insert(Tensor::zeros("p", 3, 1)).unwrap();
        let mut g = Gradients::for_params(&params);
        g.dense_mut(p).copy_from_slice(&[0.5, -2.0, 10.0]);
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.step(&mut params, &mut g);
        for (v, sign) in params.get(p).data.iter().zip([-1.0, 1.0, -1.0]) {
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
            assert!((*v as f64 - sign * 1e-3).abs() < 1e-7, "{v}");
        }
        assert!(g.get(p).is_none());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut params = ParamSet::new();
            let mut w = Tensor::zeros("w", 4, 4);
            w.xavier_uniform(&mut rng);
            let w = params.insert(w).unwrap();
            let mut adam = AdamState::new(&params, AdamConfig::default());
            for _ in 0..10 {
                let mut g = Gradients::for_params(&params);
                {
                    let mut t = Tape::new(&params);
                    let x = t.input(vec![1.0, -0.5, 0.25, 2.0]);
                    let y = t.matvec(w, x).unwrap();
                    let y = t.tanh(y);
                    let l = t.sum(y);
                    t.backward(&[(l, 1.0)], &mut g).unwrap();
                }
                adam.step(&mut params, &mut g);
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn row_sparse_gradients_touch_only_used_rows() {
        let mut params = ParamSet::new();
        let mut emb = Tensor::zeros("emb", 5, 2);
        emb.row_sparse = true;
        emb.data = (0..10).map(|i| i as f32).collect();
        let emb = params.insert(emb).unwrap();
        let mut t = Tape::new(&params);
        let r = t.param_row(emb, 3).unwrap();
        let s = t.sum(r);
        let mut g = Gradients::for_params(&params);
        t.backward(&[(s, 2.0)], &mut g).unwrap();
        match g.get(emb) {
            Some(GradBuf::Rows(m)) => {
                assert_eq!(m.len(), 1);
                assert_eq!(m[&3], vec![2.0, 2.0]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut params = ParamSet::new();
        let p = params.insert(Tensor::zeros("p", 2, 1)).unwrap();
        let mut g = Gradients::for_params(&params);
        g.dense_mut(p).copy_from_slice(&[30.0, 40.0]);
        assert_eq!(g.clip_global_norm(5.0), 50.0);
        assert!((g.global_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamSet::new();
        let mut a = Tensor::zeros("a.w", 3, 7);
        a.xavier_uniform(&mut rng);
        params.insert(a).unwrap();
        let mut b = Tensor::zeros("emb", 4, 2);
        b.row_sparse = true;
        b.data[3] = f32::MIN_POSITIVE;
        params.insert(b).unwrap();
        let manifest = serde_json::json!({"hidden": 7, "note": "x"});
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &params, &manifest).unwrap();
        let (back, m) = load_checkpoint(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(m, manifest);
    }
}
