//! Count-based generative baselines: smoothed naive Bayes, interpolated
//! Kneser-Ney trigrams, and a vector-based (MLP) naive Bayes. All plug
//! into the same Bayes-rule prediction path as the LSTM models.

use crate::data::{Dataset, Document, Vocabulary, BOS};
use crate::error::{Error, Result};
use crate::models::{class_prior, ClassConditionalScorer};
use crate::tape::{init_uniform, ParamId, ParamSet, Tape};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::Write;

// ---------------------------------------------------------------------------
// Naive Bayes
// ---------------------------------------------------------------------------

pub struct NaiveBayesModel {
    /// |Y| x |V| token counts.
    pub counts: Vec<Vec<u64>>,
    /// Per-class token totals (row sums).
    pub totals: Vec<u64>,
    pub alpha: f64,
    pub vocab_size: usize,
    pub log_prior: Vec<f64>,
}

/// Tally per-class unigram counts; p(w|y) = (count + alpha)/(total + alpha|V|).
pub fn nb_fit(ds: &Dataset, vocab_size: usize, alpha: f64) -> Result<NaiveBayesModel> {
    if alpha < 0.0 {
        return Err(Error::InvalidArg("alpha must be >= 0".into()));
    }
    let mut counts = vec![vec![0u64; vocab_size]; ds.num_classes];
    let mut totals = vec![0u64; ds.num_classes];
    for (doc, y) in &ds.examples {
        for &id in &doc.ids {
            counts[*y][id as usize] += 1;
            totals[*y] += 1;
        }
    }
    let log_prior = class_prior(&ds.labels(), ds.num_classes, false)?;
    Ok(NaiveBayesModel {
        counts,
        totals,
        alpha,
        vocab_size,
        log_prior,
    })
}

impl NaiveBayesModel {
    pub fn log_prob(&self, w: u32, y: usize) -> f64 {
        let num = self.counts[y][w as usize] as f64 + self.alpha;
        let den = self.totals[y] as f64 + self.alpha * self.vocab_size as f64;
        // alpha = 0 with an unseen word yields -inf, which is permitted
        (num / den).ln()
    }

    /// Sorted plain-text dump: class<TAB>token<TAB>count.
    pub fn write_counts(&self, vocab: &Vocabulary, mut w: impl Write) -> Result<()> {
        for (y, row) in self.counts.iter().enumerate() {
            for (id, &c) in row.iter().enumerate() {
                if c > 0 {
                    writeln!(w, "{y}\t{}\t{c}", vocab.token(id as u32))?;
                }
            }
        }
        Ok(())
    }
}

impl ClassConditionalScorer for NaiveBayesModel {
    fn num_classes(&self) -> usize {
        self.counts.len()
    }

    fn log_prior(&self) -> &[f64] {
        &self.log_prior
    }

    /// Sum_t log p(x_t|y); no BOS, EOS counted as a token.
    fn doc_loglik(&self, doc: &Document, y: usize) -> Result<f64> {
        Ok(doc.ids.iter().map(|&w| self.log_prob(w, y)).sum())
    }
}

// ---------------------------------------------------------------------------
// Kneser-Ney Bayes
// ---------------------------------------------------------------------------

/// Per-class interpolated Kneser-Ney trigram tables, all derived from the
/// raw trigram counts over BOS-BOS-padded documents.
#[derive(Default)]
pub struct KnClassTable {
    pub trigram: HashMap<(u32, u32, u32), u64>,
    /// c(uv.) = total trigram count from context (u, v).
    ctx_total: HashMap<(u32, u32), u64>,
    /// N1+(uv.) = distinct continuations of context (u, v).
    ctx_types: HashMap<(u32, u32), u64>,
    /// N1+(.vw) = distinct left contexts of bigram (v, w).
    cont_bigram: HashMap<(u32, u32), u64>,
    /// N1+(.v.) = sum over w of N1+(.vw).
    cont_ctx_total: HashMap<u32, u64>,
    /// N1+(v.) = distinct w following v at the trigram level.
    follow_types: HashMap<u32, u64>,
    /// N1+(.w) = distinct v preceding w.
    cont_unigram: HashMap<u32, u64>,
    /// Sum over w of N1+(.w).
    cont_total: u64,
    /// Number of words with N1+(.w) > 0.
    cont_words: u64,
}

pub struct KneserNeyModel {
    pub per_class: Vec<KnClassTable>,
    pub discount: f64,
    pub vocab_size: usize,
    pub log_prior: Vec<f64>,
}

/// Fit per-class trigram tables over [BOS, BOS, x_1 .. x_T] sequences.
pub fn kn_fit(ds: &Dataset, vocab_size: usize, discount: f64) -> Result<KneserNeyModel> {
    if !(0.0 < discount && discount < 1.0) {
        return Err(Error::InvalidArg("discount must be in (0, 1)".into()));
    }
    let mut per_class: Vec<KnClassTable> = (0..ds.num_classes).map(|_| KnClassTable::default()).collect();
    for (doc, y) in &ds.examples {
        let t = &mut per_class[*y];
        let mut u = BOS;
        let mut v = BOS;
        for &w in &doc.ids {
            *t.trigram.entry((u, v, w)).or_insert(0) += 1;
            u = v;
            v = w;
        }
    }
    for t in &mut per_class {
        let mut seen_vw: HashMap<(u32, u32), std::collections::HashSet<u32>> = HashMap::new();
        for (&(u, v, w), &c) in &t.trigram {
            *t.ctx_total.entry((u, v)).or_insert(0) += c;
            *t.ctx_types.entry((u, v)).or_insert(0) += 1;
            seen_vw.entry((v, w)).or_default().insert(u);
        }
        let mut follow: HashMap<u32, std::collections::HashSet<u32>> = HashMap::new();
        for (&(v, w), us) in &seen_vw {
            let n = us.len() as u64;
            t.cont_bigram.insert((v, w), n);
            *t.cont_ctx_total.entry(v).or_insert(0) += n;
            follow.entry(v).or_default().insert(w);
            *t.cont_unigram.entry(w).or_insert(0) += 1;
        }
        t.follow_types = follow.iter().map(|(&v, ws)| (v, ws.len() as u64)).collect();
        t.cont_total = t.cont_unigram.values().sum();
        t.cont_words = t.cont_unigram.len() as u64;
    }
    let log_prior = class_prior(&ds.labels(), ds.num_classes, false)?;
    Ok(KneserNeyModel {
        per_class,
        discount,
        vocab_size,
        log_prior,
    })
}

impl KneserNeyModel {
    /// Continuation-count unigram with a 1/|V| floor so no probability is zero.
    pub fn p_unigram(&self, w: u32, y: usize) -> f64 {
        let t = &self.per_class[y];
        let d = self.discount;
        if t.cont_total == 0 {
            return 1.0 / self.vocab_size as f64;
        }
        let n = t.cont_total as f64;
        let num = (t.cont_unigram.get(&w).copied().unwrap_or(0) as f64 - d).max(0.0);
        let lambda = d * t.cont_words as f64 / n;
        num / n + lambda / self.vocab_size as f64
    }

    pub fn p_bigram(&self, w: u32, v: u32, y: usize) -> f64 {
        let t = &self.per_class[y];
        let d = self.discount;
        let total = t.cont_ctx_total.get(&v).copied().unwrap_or(0) as f64;
        if total == 0.0 {
            return self.p_unigram(w, y);
        }
        let num = (t.cont_bigram.get(&(v, w)).copied().unwrap_or(0) as f64 - d).max(0.0);
        let lambda = d * t.follow_types.get(&v).copied().unwrap_or(0) as f64 / total;
        num / total + lambda * self.p_unigram(w, y)
    }

    /// Interpolated trigram probability p(w | u, v, y).
    pub fn prob(&self, w: u32, context: (u32, u32), y: usize) -> f64 {
        let (u, v) = context;
        let t = &self.per_class[y];
        let d = self.discount;
        let total = t.ctx_total.get(&(u, v)).copied().unwrap_or(0) as f64;
        if total == 0.0 {
            return self.p_bigram(w, v, y);
        }
        let num = (t.trigram.get(&(u, v, w)).copied().unwrap_or(0) as f64 - d).max(0.0);
        let lambda = d * t.ctx_types.get(&(u, v)).copied().unwrap_or(0) as f64 / total;
        num / total + lambda * self.p_bigram(w, v, y)
    }

    /// Sorted plain-text dump: class<TAB>u v w<TAB>count.
    pub fn write_counts(&self, vocab: &Vocabulary, mut out: impl Write) -> Result<()> {
        for (y, t) in self.per_class.iter().enumerate() {
            let mut rows: Vec<(&(u32, u32, u32), &u64)> = t.trigram.iter().collect();
            rows.sort();
            for ((u, v, w), c) in rows {
                writeln!(
                    out,
                    "{y}\t{} {} {}\t{c}",
                    vocab.token(*u),
                    vocab.token(*v),
                    vocab.token(*w)
                )?;
            }
        }
        Ok(())
    }
}

impl ClassConditionalScorer for KneserNeyModel {
    fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    fn log_prior(&self) -> &[f64] {
        &self.log_prior
    }

    fn doc_loglik(&self, doc: &Document, y: usize) -> Result<f64> {
        let mut u = BOS;
        let mut v = BOS;
        let mut ll = 0.0;
        for &w in &doc.ids {
            ll += self.prob(w, (u, v), y).ln();
            u = v;
            v = w;
        }
        Ok(ll)
    }
}

// ---------------------------------------------------------------------------
// MLP naive Bayes
// ---------------------------------------------------------------------------

/// Class-conditional vector-based unigram LM: a learned class embedding
/// feeds a tanh hidden layer and a vocabulary log-softmax. The same
/// distribution applies at every position.
pub struct MlpNaiveBayesModel {
    pub ps: ParamSet,
    pub class_emb: Vec<ParamId>,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub log_prior: Vec<f64>,
    /// Per-class log-probability cache, refreshed after parameter updates.
    cache: Vec<Vec<f64>>,
}

impl MlpNaiveBayesModel {
    pub fn new(vocab_size: usize, num_classes: usize, emb_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let class_emb = (0..num_classes)
            .map(|y| ps.add(format!("class_emb.{y}"), init_uniform(emb_dim, 1, &mut rng)))
            .collect();
        let w1 = ps.add("w1", init_uniform(hidden_dim, emb_dim, &mut rng));
        let b1 = ps.add("b1", Tensor::zeros_vec(hidden_dim));
        let w2 = ps.add("w2", init_uniform(vocab_size, hidden_dim, &mut rng));
        let b2 = ps.add("b2", Tensor::zeros_vec(vocab_size));
        MlpNaiveBayesModel {
            ps,
            class_emb,
            w1,
            b1,
            w2,
            b2,
            vocab_size,
            hidden_dim,
            log_prior: Vec::new(),
            cache: vec![Vec::new(); num_classes],
        }
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = self.class_emb.clone();
        ids.extend([self.w1, self.b1, self.w2, self.b2]);
        ids
    }

    fn log_probs_on_tape(&self, tape: &mut Tape, y: usize) -> Result<crate::tape::Var> {
        let v = tape.param(&self.ps, self.class_emb[y]);
        let h_pre = tape.affine(&self.ps, self.w1, v, self.b1)?;
        let h = tape.tanh(h_pre);
        let z = tape.affine(&self.ps, self.w2, h, self.b2)?;
        Ok(tape.log_softmax(z))
    }

    pub fn log_probs(&self, y: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let lp = self.log_probs_on_tape(&mut tape, y)?;
        Ok(tape.value(lp).as_slice().to_vec())
    }

    pub fn refresh_cache(&mut self) -> Result<()> {
        for y in 0..self.class_emb.len() {
            self.cache[y] = self.log_probs(y)?;
        }
        Ok(())
    }

    /// One AdaGrad step on -sum_y sum_w counts[y][w] log p(w|y) / total.
    pub fn step_on_counts(&mut self, counts: &[Vec<u64>], lr: f64, eps: f64, clip: f64) -> Result<f64> {
        let total: u64 = counts.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Empty("no token counts".into()));
        }
        let mut tape = Tape::new();
        let mut terms = Vec::new();
        let mut loss_val = 0.0;
        for (y, row) in counts.iter().enumerate() {
            let lp = self.log_probs_on_tape(&mut tape, y)?;
            // weighted sum of picked log-probs; build per-word scalars
            for (w, &c) in row.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let p = tape.pick(lp, w)?;
                terms.push((p, c));
                loss_val += -(c as f64) * tape.scalar(p);
            }
        }
        // sum_scaled carries one shared coefficient, so group terms by count;
        // BTreeMap keeps the summation order deterministic
        let mut grouped: std::collections::BTreeMap<u64, Vec<crate::tape::Var>> =
            std::collections::BTreeMap::new();
        for (p, c) in terms {
            grouped.entry(c).or_default().push(p);
        }
        let mut partials = Vec::new();
        for (c, vars) in grouped {
            partials.push(tape.sum_scaled(&vars, c as f64)?);
        }
        let loss = tape.sum_scaled(&partials, -1.0 / total as f64)?;
        tape.backward(loss, &mut self.ps)?;
        let ids = self.all_ids();
        self.ps.clip_global_norm(&ids, clip);
        self.ps.adagrad_step(&ids, lr, eps)?;
        Ok(loss_val / total as f64)
    }

    pub fn set_prior(&mut self, labels: &[usize], laplace_fallback: bool) -> Result<()> {
        self.log_prior = class_prior(labels, self.class_emb.len(), laplace_fallback)?;
        Ok(())
    }
}

impl ClassConditionalScorer for MlpNaiveBayesModel {
    fn num_classes(&self) -> usize {
        self.class_emb.len()
    }

    fn log_prior(&self) -> &[f64] {
        &self.log_prior
    }

    fn doc_loglik(&self, doc: &Document, y: usize) -> Result<f64> {
        let lp = if self.cache[y].is_empty() {
            self.log_probs(y)?
        } else {
            self.cache[y].clone()
        };
        Ok(doc.ids.iter().map(|&w| lp[w as usize]).sum())
    }
}

/// Per-class unigram counts of a dataset (EOS included, no BOS).
pub fn class_token_counts(ds: &Dataset, vocab_size: usize) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; vocab_size]; ds.num_classes];
    for (doc, y) in &ds.examples {
        for &id in &doc.ids {
            counts[*y][id as usize] += 1;
        }
    }
    counts
}

/// Fit the MLP naive Bayes model by AdaGrad on the count-weighted NLL.
pub fn mlpnb_fit(
    ds: &Dataset,
    vocab_size: usize,
    emb_dim: usize,
    hidden_dim: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<MlpNaiveBayesModel> {
    if hidden_dim < 1 {
        return Err(Error::InvalidArg("hidden_dim must be >= 1".into()));
    }
    let mut m = MlpNaiveBayesModel::new(vocab_size, ds.num_classes, emb_dim, hidden_dim, seed);
    let counts = class_token_counts(ds, vocab_size);
    for _ in 0..epochs {
        m.step_on_counts(&counts, lr, 1e-8, 5.0)?;
    }
    m.set_prior(&ds.labels(), false)?;
    m.refresh_cache()?;
    Ok(m)
}
