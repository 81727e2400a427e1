//! The three LSTM model variants behind a single prediction interface:
//! a discriminative classifier, a shared class-conditional LM, and fully
//! independent per-class LMs.

use crate::data::Document;
use crate::error::{Error, Result};
use crate::lstm::{mean_pool, run_sequence, LstmParams};
use crate::tape::{init_uniform, ParamId, ParamSet, Tape, Var};
use crate::tensor::{logsumexp, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scoring interface shared by every generative classifier (LSTM or
/// count-based): log p(x | y) plus an empirical log-prior.
pub trait ClassConditionalScorer {
    fn num_classes(&self) -> usize;
    fn log_prior(&self) -> &[f64];
    fn doc_loglik(&self, doc: &Document, y: usize) -> Result<f64>;
}

/// Bayes-rule prediction: argmax_y [log p(x|y) + log p(y)].
/// Ties break toward the lowest class index.
pub fn gen_predict<M: ClassConditionalScorer + ?Sized>(
    m: &M,
    doc: &Document,
) -> Result<(usize, Vec<f64>)> {
    let prior = m.log_prior();
    if prior.len() != m.num_classes() {
        return Err(Error::InvalidArg("prior not set".into()));
    }
    let mut scores = Vec::with_capacity(m.num_classes());
    for y in 0..m.num_classes() {
        scores.push(m.doc_loglik(doc, y)? + prior[y]);
    }
    let mut best = 0;
    for (y, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = y;
        }
    }
    Ok((best, scores))
}

/// log p(x) = logsumexp_y [log p(x|y) + log p(y)].
pub fn marginal_loglik<M: ClassConditionalScorer + ?Sized>(m: &M, doc: &Document) -> Result<f64> {
    let (_, scores) = gen_predict(m, doc)?;
    logsumexp(&scores)
}

/// Empirical log-prior log(count_y / N). An absent class is an error
/// unless `laplace_fallback` adds one pseudo-count per class.
pub fn class_prior(labels: &[usize], num_classes: usize, laplace_fallback: bool) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Empty("class_prior on empty label list".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::InvalidArg(format!("label {y} out of range")));
        }
        counts[y] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        if !laplace_fallback {
            return Err(Error::InvalidArg("a class has no examples".into()));
        }
        let n = labels.len() + num_classes;
        return Ok(counts
            .iter()
            .map(|&c| ((c + 1) as f64 / n as f64).ln())
            .collect());
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| (c as f64 / n).ln()).collect())
}

// ---------------------------------------------------------------------------
// Discriminative model
// ---------------------------------------------------------------------------

pub struct DiscModel {
    pub ps: ParamSet,
    pub emb: ParamId,
    pub lstm: LstmParams,
    /// Class softmax weights, E x |Y|.
    pub v: ParamId,
    /// Class bias, |Y|.
    pub b: ParamId,
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Zero-shot mode: V and b stay fixed during training.
    pub freeze_softmax: bool,
    /// Continual-baseline variant: word embeddings stay fixed.
    pub freeze_embeddings: bool,
}

impl DiscModel {
    pub fn new(vocab_size: usize, num_classes: usize, d: usize, e: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let emb = ps.add("emb", init_uniform(vocab_size, d, &mut rng));
        let lstm = LstmParams::init(&mut ps, "lstm", d, e, &mut rng);
        let v = ps.add("softmax.v", init_uniform(e, num_classes, &mut rng));
        let b = ps.add("softmax.b", Tensor::zeros_vec(num_classes));
        DiscModel {
            ps,
            emb,
            lstm,
            v,
            b,
            vocab_size,
            num_classes,
            freeze_softmax: false,
            freeze_embeddings: false,
        }
    }

    /// Fix the class softmax weights to externally supplied columns
    /// (label embeddings) and zero the bias.
    pub fn fix_label_embeddings(&mut self, columns: &[Vec<f64>]) -> Result<()> {
        let e = self.lstm.hidden_dim;
        if columns.len() != self.num_classes {
            return Err(Error::InvalidArg("one column per class required".into()));
        }
        for (y, col) in columns.iter().enumerate() {
            if col.len() != e {
                return Err(Error::DimMismatch(format!(
                    "label vector for class {y} has dim {}, expected {e}",
                    col.len()
                )));
            }
            for (i, &x) in col.iter().enumerate() {
                self.ps.get_mut(self.v).value.set(i, y, x);
            }
        }
        self.ps.get_mut(self.b).value.fill(0.0);
        self.freeze_softmax = true;
        Ok(())
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if !self.freeze_embeddings {
            ids.push(self.emb);
        }
        ids.extend(self.lstm.param_ids());
        if !self.freeze_softmax {
            ids.push(self.v);
            ids.push(self.b);
        }
        ids
    }

    /// log p(y|x) node: log_softmax(V^T mean_pool(h) + b).
    pub fn log_posterior_on_tape(&self, tape: &mut Tape, doc: &Document) -> Result<Var> {
        let hs = run_sequence(tape, &self.ps, self.emb, &self.lstm, doc, false)?;
        let pooled = mean_pool(tape, &hs)?;
        let z = tape.mat_t_vec(&self.ps, self.v, pooled)?;
        let bv = tape.param(&self.ps, self.b);
        let zb = tape.add(z, bv)?;
        Ok(tape.log_softmax(zb))
    }

    pub fn log_posterior(&self, doc: &Document) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let lp = self.log_posterior_on_tape(&mut tape, doc)?;
        Ok(tape.value(lp).as_slice().to_vec())
    }

    pub fn predict(&self, doc: &Document) -> Result<usize> {
        let lp = self.log_posterior(doc)?;
        let mut best = 0;
        for (y, s) in lp.iter().enumerate() {
            if *s > lp[best] {
                best = y;
            }
        }
        Ok(best)
    }

    /// Mean negative log posterior over a batch, as a tape node.
    pub fn nll_on_tape(&self, tape: &mut Tape, batch: &[(Document, usize)]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("nll of empty batch".into()));
        }
        let mut picks = Vec::with_capacity(batch.len());
        for (doc, y) in batch {
            let lp = self.log_posterior_on_tape(tape, doc)?;
            picks.push(tape.pick(lp, *y)?);
        }
        let total = tape.sum_scaled(&picks, -1.0 / batch.len() as f64)?;
        Ok(total)
    }

    pub fn nll(&self, batch: &[(Document, usize)]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.nll_on_tape(&mut tape, batch)?;
        Ok(tape.scalar(loss))
    }
}

// ---------------------------------------------------------------------------
// Shared generative model
// ---------------------------------------------------------------------------

/// Class conditioning used when scoring: either the per-class learned
/// embedding and bias, or (during LM pretraining) a fixed bounded-norm
/// vector with no bias.
#[derive(Clone, Debug)]
pub enum Conditioning {
    PerClass,
    FixedVector(Vec<f64>),
}

pub struct SharedGenModel {
    pub ps: ParamSet,
    pub emb: ParamId,
    pub lstm: LstmParams,
    /// Vocab output matrix over [h_t; v_y], |V| x 2E.
    pub u: ParamId,
    /// Class embeddings v_y, one E-vector per class.
    pub class_emb: Vec<ParamId>,
    /// Class vocabulary biases b_y, one |V|-vector per class.
    pub class_bias: Vec<ParamId>,
    pub log_prior: Vec<f64>,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub conditioning: Conditioning,
    /// Zero-shot mode: class embeddings stay fixed during training.
    pub freeze_class_emb: bool,
    /// Continual mode after pretraining: emb/lstm/U stay fixed.
    pub freeze_shared: bool,
}

impl SharedGenModel {
    pub fn new(vocab_size: usize, num_classes: usize, d: usize, e: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let emb = ps.add("emb", init_uniform(vocab_size, d, &mut rng));
        let lstm = LstmParams::init(&mut ps, "lstm", d, e, &mut rng);
        let u = ps.add("u", init_uniform(vocab_size, 2 * e, &mut rng));
        let class_emb = (0..num_classes)
            .map(|y| ps.add(format!("class_emb.{y}"), init_uniform(e, 1, &mut rng)))
            .collect();
        let class_bias = (0..num_classes)
            .map(|y| ps.add(format!("class_bias.{y}"), Tensor::zeros_vec(vocab_size)))
            .collect();
        SharedGenModel {
            ps,
            emb,
            lstm,
            u,
            class_emb,
            class_bias,
            log_prior: Vec::new(),
            vocab_size,
            num_classes,
            conditioning: Conditioning::PerClass,
            freeze_class_emb: false,
            freeze_shared: false,
        }
    }

    pub fn shared_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.emb];
        ids.extend(self.lstm.param_ids());
        ids.push(self.u);
        ids
    }

    pub fn class_ids(&self, y: usize) -> Vec<ParamId> {
        vec![self.class_emb[y], self.class_bias[y]]
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if !self.freeze_shared {
            ids.extend(self.shared_ids());
        }
        for y in 0..self.num_classes {
            if !self.freeze_class_emb {
                ids.push(self.class_emb[y]);
            }
            ids.push(self.class_bias[y]);
        }
        ids
    }

    /// Fix class embeddings to externally supplied label vectors.
    pub fn fix_label_embeddings(&mut self, vectors: &[Vec<f64>]) -> Result<()> {
        let e = self.lstm.hidden_dim;
        if vectors.len() != self.num_classes {
            return Err(Error::InvalidArg("one vector per class required".into()));
        }
        for (y, vec) in vectors.iter().enumerate() {
            if vec.len() != e {
                return Err(Error::DimMismatch(format!(
                    "label vector for class {y} has dim {}, expected {e}",
                    vec.len()
                )));
            }
            self.ps.get_mut(self.class_emb[y]).value = Tensor::vector(vec.clone());
        }
        self.freeze_class_emb = true;
        Ok(())
    }

    /// Sum over BOS-shifted positions of log p(x_t | x_<t, y), as a node.
    pub fn loglik_on_tape(&self, tape: &mut Tape, doc: &Document, y: usize) -> Result<Var> {
        if y >= self.num_classes && !matches!(self.conditioning, Conditioning::FixedVector(_)) {
            return Err(Error::InvalidArg(format!("class {y} out of range")));
        }
        let hs = run_sequence(tape, &self.ps, self.emb, &self.lstm, doc, true)?;
        let v_node = match &self.conditioning {
            Conditioning::PerClass => tape.param(&self.ps, self.class_emb[y]),
            Conditioning::FixedVector(v) => tape.input(Tensor::vector(v.clone())),
        };
        let mut picks = Vec::with_capacity(doc.len());
        for (t, h) in hs.iter().enumerate() {
            let cat = tape.concat(&[*h, v_node])?;
            let z = tape.matvec(&self.ps, self.u, cat)?;
            let zb = match &self.conditioning {
                Conditioning::PerClass => {
                    let bv = tape.param(&self.ps, self.class_bias[y]);
                    tape.add(z, bv)?
                }
                Conditioning::FixedVector(_) => z,
            };
            let lp = tape.log_softmax(zb);
            picks.push(tape.pick(lp, doc.ids[t] as usize)?);
        }
        tape.sum_scaled(&picks, 1.0)
    }

    pub fn doc_loglik_value(&self, doc: &Document, y: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let ll = self.loglik_on_tape(&mut tape, doc, y)?;
        Ok(tape.scalar(ll))
    }

    pub fn set_prior(&mut self, labels: &[usize], laplace_fallback: bool) -> Result<()> {
        self.log_prior = class_prior(labels, self.num_classes, laplace_fallback)?;
        Ok(())
    }
}

impl ClassConditionalScorer for SharedGenModel {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn log_prior(&self) -> &[f64] {
        &self.log_prior
    }

    fn doc_loglik(&self, doc: &Document, y: usize) -> Result<f64> {
        self.doc_loglik_value(doc, y)
    }
}

// ---------------------------------------------------------------------------
// Independent generative model
// ---------------------------------------------------------------------------

/// One complete single-class LM: own embeddings, LSTM, output matrix, bias.
pub struct SingleClassLm {
    pub ps: ParamSet,
    pub emb: ParamId,
    pub lstm: LstmParams,
    /// |V| x E output matrix.
    pub u: ParamId,
    /// |V| bias.
    pub b: ParamId,
    pub vocab_size: usize,
}

impl SingleClassLm {
    pub fn new(vocab_size: usize, d: usize, e: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let emb = ps.add("emb", init_uniform(vocab_size, d, &mut rng));
        let lstm = LstmParams::init(&mut ps, "lstm", d, e, &mut rng);
        let u = ps.add("u", init_uniform(vocab_size, e, &mut rng));
        let b = ps.add("b", Tensor::zeros_vec(vocab_size));
        SingleClassLm {
            ps,
            emb,
            lstm,
            u,
            b,
            vocab_size,
        }
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.emb];
        ids.extend(self.lstm.param_ids());
        ids.push(self.u);
        ids.push(self.b);
        ids
    }

    pub fn loglik_on_tape(&self, tape: &mut Tape, doc: &Document) -> Result<Var> {
        let hs = run_sequence(tape, &self.ps, self.emb, &self.lstm, doc, true)?;
        let mut picks = Vec::with_capacity(doc.len());
        for (t, h) in hs.iter().enumerate() {
            let z = tape.affine(&self.ps, self.u, *h, self.b)?;
            let lp = tape.log_softmax(z);
            picks.push(tape.pick(lp, doc.ids[t] as usize)?);
        }
        tape.sum_scaled(&picks, 1.0)
    }

    pub fn doc_loglik(&self, doc: &Document) -> Result<f64> {
        let mut tape = Tape::new();
        let ll = self.loglik_on_tape(&mut tape, doc)?;
        Ok(tape.scalar(ll))
    }
}

pub struct IndepGenModel {
    pub per_class: Vec<SingleClassLm>,
    pub log_prior: Vec<f64>,
}

impl IndepGenModel {
    pub fn new(vocab_size: usize, num_classes: usize, d: usize, e: usize, seed: u64) -> Self {
        let per_class = (0..num_classes)
            .map(|y| SingleClassLm::new(vocab_size, d, e, seed.wrapping_add(y as u64)))
            .collect();
        IndepGenModel {
            per_class,
            log_prior: Vec::new(),
        }
    }

    pub fn set_prior(&mut self, labels: &[usize], laplace_fallback: bool) -> Result<()> {
        self.log_prior = class_prior(labels, self.per_class.len(), laplace_fallback)?;
        Ok(())
    }
}

impl ClassConditionalScorer for IndepGenModel {
    fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    fn log_prior(&self) -> &[f64] {
        &self.log_prior
    }

    fn doc_loglik(&self, doc: &Document, y: usize) -> Result<f64> {
        if y >= self.per_class.len() {
            return Err(Error::InvalidArg(format!("class {y} out of range")));
        }
        self.per_class[y].doc_loglik(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EOS;
    use approx::assert_abs_diff_eq;

    fn doc(ids: &[u32]) -> Document {
        Document { ids: ids.to_vec() }
    }

    #[test]
    fn disc_uniform_when_softmax_zero() {
        let mut m = DiscModel::new(7, 4, 3, 3, 1);
        m.ps.get_mut(m.v).value.fill(0.0);
        m.ps.get_mut(m.b).value.fill(0.0);
        let lp = m.log_posterior(&doc(&[3, 4, EOS])).unwrap();
        for v in lp {
            assert_abs_diff_eq!(v, -(4.0f64.ln()), epsilon = 1e-12);
        }
    }

    #[test]
    fn disc_bias_dominates_when_v_zero() {
        let mut m = DiscModel::new(7, 3, 3, 3, 1);
        m.ps.get_mut(m.v).value.fill(0.0);
        m.ps.get_mut(m.b).value.as_mut_slice()[0] = 10.0;
        assert_eq!(m.predict(&doc(&[3, EOS])).unwrap(), 0);
    }

    #[test]
    fn disc_posterior_normalizes() {
        let m = DiscModel::new(9, 5, 4, 4, 3);
        let lp = m.log_posterior(&doc(&[3, 7, 8, EOS])).unwrap();
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn disc_nll_uniform_is_log_num_classes() {
        let mut m = DiscModel::new(7, 4, 3, 3, 1);
        m.ps.get_mut(m.v).value.fill(0.0);
        let batch = vec![(doc(&[3, EOS]), 0), (doc(&[4, EOS]), 2)];
        assert_abs_diff_eq!(m.nll(&batch).unwrap(), 4.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn disc_nll_is_mean_of_per_example_nll() {
        let m = DiscModel::new(7, 4, 3, 3, 9);
        let batch = vec![(doc(&[3, 4, EOS]), 1), (doc(&[5, EOS]), 3), (doc(&[6, EOS]), 0)];
        let batched = m.nll(&batch).unwrap();
        let mut summed = 0.0;
        for (d, y) in &batch {
            summed += -m.log_posterior(d).unwrap()[*y];
        }
        assert_abs_diff_eq!(batched, summed / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn gen_uniform_lm_gives_length_times_log_vocab() {
        let mut m = SharedGenModel::new(7, 2, 3, 3, 1);
        m.ps.get_mut(m.u).value.fill(0.0);
        for y in 0..2 {
            m.ps.get_mut(m.class_bias[y]).value.fill(0.0);
        }
        // doc length 3 including EOS
        let ll = m.doc_loglik_value(&doc(&[3, 4, EOS]), 0).unwrap();
        assert_abs_diff_eq!(ll, 3.0 * (1.0f64 / 7.0).ln(), epsilon = 1e-9);
    }

    #[test]
    fn gen_minimal_doc_single_term() {
        let m = SharedGenModel::new(7, 2, 3, 3, 2);
        let ll = m.doc_loglik_value(&doc(&[EOS]), 1).unwrap();
        assert!(ll < 0.0 && ll.is_finite());
    }

    #[test]
    fn gen_loglik_monotone_in_extension() {
        let m = SharedGenModel::new(7, 2, 3, 3, 4);
        let short = m.doc_loglik_value(&doc(&[3, EOS]), 0).unwrap();
        let long = m.doc_loglik_value(&doc(&[3, 4, EOS]), 0).unwrap();
        assert!(long < short);
    }

    #[test]
    fn gen_predict_tie_break_and_prior() {
        struct Flat {
            prior: Vec<f64>,
        }
        impl ClassConditionalScorer for Flat {
            fn num_classes(&self) -> usize {
                3
            }
            fn log_prior(&self) -> &[f64] {
                &self.prior
            }
            fn doc_loglik(&self, _d: &Document, _y: usize) -> Result<f64> {
                Ok(-1.0)
            }
        }
        // equal likelihoods -> argmax prior
        let m = Flat {
            prior: class_prior(&[0, 1, 1, 1, 2], 3, false).unwrap(),
        };
        let (y, _) = gen_predict(&m, &doc(&[EOS])).unwrap();
        assert_eq!(y, 1);
        // uniform prior, equal likelihood -> lowest index
        let m2 = Flat {
            prior: class_prior(&[0, 1, 2], 3, false).unwrap(),
        };
        let (y2, _) = gen_predict(&m2, &doc(&[EOS])).unwrap();
        assert_eq!(y2, 0);
    }

    #[test]
    fn marginal_equals_likelihood_when_equal_across_classes() {
        struct Flat {
            prior: Vec<f64>,
        }
        impl ClassConditionalScorer for Flat {
            fn num_classes(&self) -> usize {
                2
            }
            fn log_prior(&self) -> &[f64] {
                &self.prior
            }
            fn doc_loglik(&self, _d: &Document, _y: usize) -> Result<f64> {
                Ok(-7.25)
            }
        }
        let m = Flat {
            prior: class_prior(&[0, 0, 0, 1], 2, false).unwrap(),
        };
        // sum_y p(y) = 1, so marginal = L exactly
        assert_abs_diff_eq!(
            marginal_loglik(&m, &doc(&[EOS])).unwrap(),
            -7.25,
            epsilon = 1e-12
        );
    }

    #[test]
    fn marginal_single_class_is_plain_loglik() {
        let mut m = IndepGenModel::new(7, 1, 3, 3, 5);
        m.set_prior(&[0, 0], false).unwrap();
        let d = doc(&[3, 4, EOS]);
        let ll = m.doc_loglik(&d, 0).unwrap();
        assert_abs_diff_eq!(marginal_loglik(&m, &d).unwrap(), ll, epsilon = 1e-12);
    }

    #[test]
    fn marginal_bounded_by_max_joint_plus_log_classes() {
        let mut m = IndepGenModel::new(7, 3, 2, 2, 6);
        m.set_prior(&[0, 1, 2], false).unwrap();
        let d = doc(&[3, 5, EOS]);
        let (_, scores) = gen_predict(&m, &d).unwrap();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let marg = marginal_loglik(&m, &d).unwrap();
        assert!(max <= marg + 1e-12);
        assert!(marg <= max + 3.0f64.ln() + 1e-12);
    }

    #[test]
    fn class_prior_counts() {
        let p = class_prior(&[0, 0, 1, 1], 2, false).unwrap();
        assert_abs_diff_eq!(p[0], 0.5f64.ln(), epsilon = 1e-12);
        let p2 = class_prior(&[0, 0, 0, 1], 2, false).unwrap();
        assert_abs_diff_eq!(p2[0], 0.75f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(p2[1], 0.25f64.ln(), epsilon = 1e-12);
        assert!(class_prior(&[0, 0], 2, false).is_err());
        let p3 = class_prior(&[0, 0], 2, true).unwrap();
        assert_abs_diff_eq!(p3.iter().map(|v| v.exp()).sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gen_predict_invariant_to_constant_shift() {
        let mut m = IndepGenModel::new(7, 3, 2, 2, 8);
        m.set_prior(&[0, 1, 2], false).unwrap();
        let d = doc(&[4, 3, EOS]);
        let (y, scores) = gen_predict(&m, &d).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.456).collect();
        let mut best = 0;
        for (i, s) in shifted.iter().enumerate() {
            if *s > shifted[best] {
                best = i;
            }
        }
        assert_eq!(best, y);
    }

    #[test]
    fn disc_gradients_pass_grad_check() {
        let mut m = DiscModel::new(7, 2, 3, 3, 17);
        let batch = vec![(doc(&[3, 4, EOS]), 0), (doc(&[5, 6, EOS]), 1)];
        let mut tape = Tape::new();
        let loss = m.nll_on_tape(&mut tape, &batch).unwrap();
        tape.backward(loss, &mut m.ps).unwrap();
        let lstm = m.lstm.clone();
        let emb = m.emb;
        let v = m.v;
        let b = m.b;
        let err = crate::tape::grad_check(
            &mut m.ps,
            |ps| {
                let mut t = Tape::new();
                let mut picks = Vec::new();
                for (d, y) in &batch {
                    let hs = run_sequence(&mut t, ps, emb, &lstm, d, false).unwrap();
                    let pooled = mean_pool(&mut t, &hs).unwrap();
                    let z = t.mat_t_vec(ps, v, pooled).unwrap();
                    let bv = t.param(ps, b);
                    let zb = t.add(z, bv).unwrap();
                    let lp = t.log_softmax(zb);
                    picks.push(t.pick(lp, *y).unwrap());
                }
                let l = t.sum_scaled(&picks, -0.5).unwrap();
                t.scalar(l)
            },
            1e-4,
            6,
            3,
        )
        .unwrap();
        assert!(err < 1e-4, "disc grad error {err}");
    }

    #[test]
    fn shared_gen_gradients_pass_grad_check() {
        let mut m = SharedGenModel::new(7, 2, 3, 3, 19);
        let d = doc(&[3, 5, 4, EOS]);
        let mut tape = Tape::new();
        let ll = m.loglik_on_tape(&mut tape, &d, 1).unwrap();
        let loss = tape.neg(ll);
        tape.backward(loss, &mut m.ps).unwrap();

        // borrow pieces for the closure
        let lstm = m.lstm.clone();
        let (emb, u) = (m.emb, m.u);
        let (ce, cb) = (m.class_emb[1], m.class_bias[1]);
        let err = crate::tape::grad_check(
            &mut m.ps,
            |ps| {
                let mut t = Tape::new();
                let hs = run_sequence(&mut t, ps, emb, &lstm, &d, true).unwrap();
                let v_node = t.param(ps, ce);
                let mut picks = Vec::new();
                for (ti, h) in hs.iter().enumerate() {
                    let cat = t.concat(&[*h, v_node]).unwrap();
                    let z = t.matvec(ps, u, cat).unwrap();
                    let bv = t.param(ps, cb);
                    let zb = t.add(z, bv).unwrap();
                    let lp = t.log_softmax(zb);
                    picks.push(t.pick(lp, d.ids[ti] as usize).unwrap());
                }
                let s = t.sum_scaled(&picks, -1.0).unwrap();
                t.scalar(s)
            },
            1e-4,
            6,
            4,
        )
        .unwrap();
        assert!(err < 1e-4, "shared gen grad error {err}");
    }
}
