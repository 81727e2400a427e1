//! Peephole LSTM cell and sequence utilities.
//!
//! The input and forget gates read the previous cell state, the output
//! gate reads the new cell state, and the peepholes are full matrix
//! columns (the cell vector is concatenated into the gate input).

use crate::data::{Document, BOS};
use crate::error::{Error, Result};
use crate::tape::{init_uniform, ParamId, ParamSet, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_i: ParamId,
    pub w_f: ParamId,
    pub w_c: ParamId,
    pub w_o: ParamId,
    pub b_i: ParamId,
    pub b_f: ParamId,
    pub b_c: ParamId,
    pub b_o: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmParams {
    /// W_i, W_f, W_o over [x; h; c] (E x (D+2E)); W_c over [x; h] (E x (D+E)).
    pub fn init(ps: &mut ParamSet, prefix: &str, d: usize, e: usize, rng: &mut impl rand::Rng) -> Self {
        let gate_cols = d + 2 * e;
        LstmParams {
            w_i: ps.add(format!("{prefix}.w_i"), init_uniform(e, gate_cols, rng)),
            w_f: ps.add(format!("{prefix}.w_f"), init_uniform(e, gate_cols, rng)),
            w_c: ps.add(format!("{prefix}.w_c"), init_uniform(e, d + e, rng)),
            w_o: ps.add(format!("{prefix}.w_o"), init_uniform(e, gate_cols, rng)),
            b_i: ps.add(format!("{prefix}.b_i"), Tensor::zeros_vec(e)),
            b_f: ps.add(format!("{prefix}.b_f"), Tensor::zeros_vec(e)),
            b_c: ps.add(format!("{prefix}.b_c"), Tensor::zeros_vec(e)),
            b_o: ps.add(format!("{prefix}.b_o"), Tensor::zeros_vec(e)),
            input_dim: d,
            hidden_dim: e,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.w_i, self.w_f, self.w_c, self.w_o, self.b_i, self.b_f, self.b_c, self.b_o,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Fresh zero state on the tape.
pub fn zero_state(tape: &mut Tape, e: usize) -> LstmState {
    let h = tape.input(Tensor::zeros_vec(e));
    let c = tape.input(Tensor::zeros_vec(e));
    LstmState { h, c }
}

/// One recurrent step:
///   i = sigma(W_i [x; h; c] + b_i)
///   f = sigma(W_f [x; h; c] + b_f)
///   c' = f (.) c + i (.) tanh(W_c [x; h] + b_c)
///   o = sigma(W_o [x; h; c'] + b_o)
///   h' = o (.) tanh(c')
pub fn lstm_step(
    tape: &mut Tape,
    ps: &ParamSet,
    p: &LstmParams,
    x: Var,
    state: LstmState,
) -> Result<LstmState> {
    let xhc = tape.concat(&[x, state.h, state.c])?;
    let i_pre = tape.affine(ps, p.w_i, xhc, p.b_i)?;
    let i = tape.sigmoid(i_pre);
    let f_pre = tape.affine(ps, p.w_f, xhc, p.b_f)?;
    let f = tape.sigmoid(f_pre);

    let xh = tape.concat(&[x, state.h])?;
    let g_pre = tape.affine(ps, p.w_c, xh, p.b_c)?;
    let g = tape.tanh(g_pre);

    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;

    let xhc_new = tape.concat(&[x, state.h, c_new])?;
    let o_pre = tape.affine(ps, p.w_o, xhc_new, p.b_o)?;
    let o = tape.sigmoid(o_pre);
    let c_tanh = tape.tanh(c_new);
    let h_new = tape.mul(o, c_tanh)?;

    Ok(LstmState { h: h_new, c: c_new })
}

/// Run the LSTM over a document, returning one hidden state per position.
///
/// Without `prepend_bos` the states summarize x_{<=t} (encoder use).
/// With `prepend_bos` the input stream is [BOS, x_1, .., x_{T-1}] so
/// state t summarizes x_{<t} (language-model use); the output still has
/// exactly T entries, one per predicted position.
pub fn run_sequence(
    tape: &mut Tape,
    ps: &ParamSet,
    emb: ParamId,
    p: &LstmParams,
    doc: &Document,
    prepend_bos: bool,
) -> Result<Vec<Var>> {
    if doc.is_empty() {
        return Err(Error::Empty("run_sequence on empty document".into()));
    }
    let inputs: Vec<u32> = if prepend_bos {
        std::iter::once(BOS)
            .chain(doc.ids[..doc.len() - 1].iter().copied())
            .collect()
    } else {
        doc.ids.clone()
    };
    let mut state = zero_state(tape, p.hidden_dim);
    let mut hs = Vec::with_capacity(inputs.len());
    for id in inputs {
        let x = tape.row(ps, emb, id as usize);
        state = lstm_step(tape, ps, p, x, state)?;
        hs.push(state.h);
    }
    Ok(hs)
}

/// Elementwise arithmetic mean of hidden states (pooled over the T word
/// positions only, excluding the initial state).
pub fn mean_pool(tape: &mut Tape, hs: &[Var]) -> Result<Var> {
    tape.mean(hs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_params(ps: &mut ParamSet, d: usize, e: usize) -> LstmParams {
        LstmParams {
            w_i: ps.add("w_i", Tensor::zeros(e, d + 2 * e)),
            w_f: ps.add("w_f", Tensor::zeros(e, d + 2 * e)),
            w_c: ps.add("w_c", Tensor::zeros(e, d + e)),
            w_o: ps.add("w_o", Tensor::zeros(e, d + 2 * e)),
            b_i: ps.add("b_i", Tensor::zeros_vec(e)),
            b_f: ps.add("b_f", Tensor::zeros_vec(e)),
            b_c: ps.add("b_c", Tensor::zeros_vec(e)),
            b_o: ps.add("b_o", Tensor::zeros_vec(e)),
            input_dim: d,
            hidden_dim: e,
        }
    }

    #[test]
    fn zero_params_zero_input_gives_zero_state() {
        let mut ps = ParamSet::new();
        let p = zero_params(&mut ps, 2, 3);
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros_vec(2));
        let s0 = zero_state(&mut t, 3);
        let s1 = lstm_step(&mut t, &ps, &p, x, s0).unwrap();
        assert_eq!(t.value(s1.c).as_slice(), &[0.0; 3]);
        assert_eq!(t.value(s1.h).as_slice(), &[0.0; 3]);
    }

    #[test]
    fn zero_params_unit_prev_cell() {
        // E=1, D=1, all params zero, c_prev=1:
        // i=f=0.5, g=0, c'=0.5; o=sigma(0)=0.5; h'=0.5*tanh(0.5)
        let mut ps = ParamSet::new();
        let p = zero_params(&mut ps, 1, 1);
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros_vec(1));
        let h0 = t.input(Tensor::zeros_vec(1));
        let c0 = t.input(Tensor::vector(vec![1.0]));
        let s1 = lstm_step(&mut t, &ps, &p, x, LstmState { h: h0, c: c0 }).unwrap();
        assert_abs_diff_eq!(t.value(s1.c).as_slice()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(
            t.value(s1.h).as_slice()[0],
            0.5 * 0.5f64.tanh(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(t.value(s1.h).as_slice()[0], 0.231_058_578_630_004_9, epsilon = 1e-6);
    }

    /// Straight-line scalar reimplementation of one step, independent of
    /// the tape code path.
    fn scalar_step(
        ps: &ParamSet,
        p: &LstmParams,
        x: &[f64],
        h: &[f64],
        c: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let e = p.hidden_dim;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let dotrow = |m: &Tensor, r: usize, v: &[f64]| -> f64 {
            m.row(r).iter().zip(v).map(|(a, b)| a * b).sum()
        };
        let xhc: Vec<f64> = x.iter().chain(h).chain(c).copied().collect();
        let xh: Vec<f64> = x.iter().chain(h).copied().collect();
        let mut c_new = vec![0.0; e];
        let mut h_new = vec![0.0; e];
        for k in 0..e {
            let i = sig(dotrow(ps.value(p.w_i), k, &xhc) + ps.value(p.b_i).as_slice()[k]);
            let f = sig(dotrow(ps.value(p.w_f), k, &xhc) + ps.value(p.b_f).as_slice()[k]);
            let g = (dotrow(ps.value(p.w_c), k, &xh) + ps.value(p.b_c).as_slice()[k]).tanh();
            c_new[k] = f * c[k] + i * g;
        }
        let xhc_new: Vec<f64> = x.iter().chain(h).chain(&c_new).copied().collect();
        for k in 0..e {
            let o = sig(dotrow(ps.value(p.w_o), k, &xhc_new) + ps.value(p.b_o).as_slice()[k]);
            h_new[k] = o * c_new[k].tanh();
        }
        (h_new, c_new)
    }

    #[test]
    fn random_step_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let p = LstmParams::init(&mut ps, "lstm", 2, 3, &mut rng);
        let x = vec![0.4, -0.9];
        let h = vec![0.1, 0.2, -0.3];
        let c = vec![-0.5, 0.6, 0.7];

        let mut t = Tape::new();
        let xv = t.input(Tensor::vector(x.clone()));
        let hv = t.input(Tensor::vector(h.clone()));
        let cv = t.input(Tensor::vector(c.clone()));
        let s1 = lstm_step(&mut t, &ps, &p, xv, LstmState { h: hv, c: cv }).unwrap();

        let (h_ref, c_ref) = scalar_step(&ps, &p, &x, &h, &c);
        for k in 0..3 {
            assert_abs_diff_eq!(t.value(s1.h).as_slice()[k], h_ref[k], epsilon = 1e-12);
            assert_abs_diff_eq!(t.value(s1.c).as_slice()[k], c_ref[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn run_sequence_matches_repeated_scalar_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ps = ParamSet::new();
        let emb = ps.add("emb", init_uniform(7, 2, &mut rng));
        let p = LstmParams::init(&mut ps, "lstm", 2, 3, &mut rng);
        let doc = Document {
            ids: vec![3, 5, 4, 2],
        };

        let mut t = Tape::new();
        let hs = run_sequence(&mut t, &ps, emb, &p, &doc, false).unwrap();
        assert_eq!(hs.len(), 4);

        let mut h = vec![0.0; 3];
        let mut c = vec![0.0; 3];
        for (i, &id) in doc.ids.iter().enumerate() {
            let x = ps.value(emb).row(id as usize).to_vec();
            let (h2, c2) = scalar_step(&ps, &p, &x, &h, &c);
            h = h2;
            c = c2;
            for k in 0..3 {
                assert_abs_diff_eq!(t.value(hs[i]).as_slice()[k], h[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn run_sequence_single_token_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let emb = ps.add("emb", init_uniform(4, 2, &mut rng));
        let p = LstmParams::init(&mut ps, "lstm", 2, 2, &mut rng);
        let mut t = Tape::new();
        let hs = run_sequence(&mut t, &ps, emb, &p, &Document { ids: vec![2] }, false).unwrap();
        assert_eq!(hs.len(), 1);
        assert!(run_sequence(&mut t, &ps, emb, &p, &Document { ids: vec![] }, false).is_err());
    }

    #[test]
    fn zero_params_all_hidden_states_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let emb = ps.add("emb", init_uniform(4, 2, &mut rng));
        let p = zero_params(&mut ps, 2, 2);
        let mut t = Tape::new();
        let hs = run_sequence(
            &mut t,
            &ps,
            emb,
            &p,
            &Document { ids: vec![3, 1, 2] },
            true,
        )
        .unwrap();
        for h in hs {
            assert_eq!(t.value(h).as_slice(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn sequence_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut ps = ParamSet::new();
        let emb = ps.add("emb", init_uniform(6, 2, &mut rng));
        let p = LstmParams::init(&mut ps, "lstm", 2, 3, &mut rng);
        let doc = Document {
            ids: vec![3, 4, 5, 3, 2],
        };

        let loss_of = |t: &mut Tape, ps: &ParamSet| -> crate::tape::Var {
            let hs = run_sequence(t, ps, emb, &p, &doc, false).unwrap();
            let pooled = mean_pool(t, &hs).unwrap();
            let th = t.tanh(pooled);
            let picks: Vec<crate::tape::Var> = (0..3).map(|i| t.pick(th, i).unwrap()).collect();
            t.sum_scaled(&picks, 1.0).unwrap()
        };

        let mut t = Tape::new();
        let loss = loss_of(&mut t, &ps);
        t.backward(loss, &mut ps).unwrap();

        let err = crate::tape::grad_check(
            &mut ps,
            |p2| {
                let mut t = Tape::new();
                let l = loss_of(&mut t, p2);
                t.scalar(l)
            },
            1e-4,
            8,
            2,
        )
        .unwrap();
        assert!(err < 1e-4, "5-step sequence grad error {err}");
    }
}
