//! The four experiment procedures (sample-complexity curve, continual
//! class introduction, zero-shot transfer with self-training, and
//! out-of-domain detection) plus the evaluation metrics they report.

use crate::baselines::{kn_fit, mlpnb_fit, nb_fit, KneserNeyModel, MlpNaiveBayesModel, NaiveBayesModel};
use crate::config::Config;
use crate::data::{subsample_per_class, Dataset, Document};
use crate::error::{Error, Result};
use crate::models::{
    gen_predict, ClassConditionalScorer, DiscModel, IndepGenModel, SharedGenModel, SingleClassLm,
};
use crate::tape::Tape;
use crate::train::{fit_new_class, pretrain_shared_lm, train, TrainReport};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Model kinds and a uniform fitted-model wrapper
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Disc,
    GenShared,
    GenIndep,
    NaiveBayes,
    KneserNey,
    MlpNaiveBayes,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Disc,
        ModelKind::GenShared,
        ModelKind::GenIndep,
        ModelKind::NaiveBayes,
        ModelKind::KneserNey,
        ModelKind::MlpNaiveBayes,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Disc => "disc",
            ModelKind::GenShared => "gen-shared",
            ModelKind::GenIndep => "gen-indep",
            ModelKind::NaiveBayes => "naive-bayes",
            ModelKind::KneserNey => "kneser-ney",
            ModelKind::MlpNaiveBayes => "mlp-naive-bayes",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disc" => Ok(ModelKind::Disc),
            "gen-shared" => Ok(ModelKind::GenShared),
            "gen-indep" => Ok(ModelKind::GenIndep),
            "naive-bayes" | "nb" => Ok(ModelKind::NaiveBayes),
            "kneser-ney" | "kn" => Ok(ModelKind::KneserNey),
            "mlp-naive-bayes" | "mlp-nb" => Ok(ModelKind::MlpNaiveBayes),
            other => Err(Error::InvalidArg(format!("unknown model kind `{other}`"))),
        }
    }
}

pub enum FittedModel {
    Disc(DiscModel),
    GenShared(SharedGenModel),
    GenIndep(IndepGenModel),
    NaiveBayes(NaiveBayesModel),
    KneserNey(KneserNeyModel),
    MlpNaiveBayes(MlpNaiveBayesModel),
}

impl FittedModel {
    pub fn predict(&self, doc: &Document) -> Result<usize> {
        match self {
            FittedModel::Disc(m) => m.predict(doc),
            FittedModel::GenShared(m) => Ok(gen_predict(m, doc)?.0),
            FittedModel::GenIndep(m) => Ok(gen_predict(m, doc)?.0),
            FittedModel::NaiveBayes(m) => Ok(gen_predict(m, doc)?.0),
            FittedModel::KneserNey(m) => Ok(gen_predict(m, doc)?.0),
            FittedModel::MlpNaiveBayes(m) => Ok(gen_predict(m, doc)?.0),
        }
    }

    /// The generative scoring view, when the model has one.
    pub fn as_scorer(&self) -> Option<&dyn ClassConditionalScorer> {
        match self {
            FittedModel::Disc(_) => None,
            FittedModel::GenShared(m) => Some(m),
            FittedModel::GenIndep(m) => Some(m),
            FittedModel::NaiveBayes(m) => Some(m),
            FittedModel::KneserNey(m) => Some(m),
            FittedModel::MlpNaiveBayes(m) => Some(m),
        }
    }
}

/// Fit one model of the given kind. Neural kinds run the epoch loop with
/// dev-accuracy early stopping and return its report.
pub fn fit_model(
    kind: ModelKind,
    train_ds: &Dataset,
    dev_ds: &Dataset,
    vocab_size: usize,
    cfg: &Config,
    seed: u64,
) -> Result<(FittedModel, Option<TrainReport>)> {
    let k = train_ds.num_classes;
    let mut opt = cfg.opt.clone();
    opt.seed = seed;
    match kind {
        ModelKind::Disc => {
            let mut m = DiscModel::new(vocab_size, k, cfg.embed_dim, cfg.hidden_dim, seed);
            let report = train(&mut m, train_ds, dev_ds, &opt)?;
            Ok((FittedModel::Disc(m), Some(report)))
        }
        ModelKind::GenShared => {
            let mut m = SharedGenModel::new(vocab_size, k, cfg.embed_dim, cfg.hidden_dim, seed);
            let report = train(&mut m, train_ds, dev_ds, &opt)?;
            Ok((FittedModel::GenShared(m), Some(report)))
        }
        ModelKind::GenIndep => {
            let mut m = IndepGenModel::new(vocab_size, k, cfg.embed_dim, cfg.hidden_dim, seed);
            let report = train(&mut m, train_ds, dev_ds, &opt)?;
            Ok((FittedModel::GenIndep(m), Some(report)))
        }
        ModelKind::NaiveBayes => Ok((
            FittedModel::NaiveBayes(nb_fit(train_ds, vocab_size, cfg.nb_alpha)?),
            None,
        )),
        ModelKind::KneserNey => Ok((
            FittedModel::KneserNey(kn_fit(train_ds, vocab_size, cfg.kn_discount)?),
            None,
        )),
        ModelKind::MlpNaiveBayes => Ok((
            FittedModel::MlpNaiveBayes(mlpnb_fit(
                train_ds,
                vocab_size,
                cfg.mlp_emb_dim,
                cfg.mlp_hidden_dim,
                cfg.mlp_epochs,
                opt.learning_rate,
                seed,
            )?),
            None,
        )),
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Accuracy and per-class precision/recall, all in percent. A class that
/// is never predicted gets precision 0; an absent gold class gets recall 0.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// confusion[gold][pred]
    pub confusion: Vec<Vec<usize>>,
    pub support: Vec<usize>,
}

pub fn metrics_from(preds: &[usize], golds: &[usize], num_classes: usize) -> Result<Metrics> {
    if preds.len() != golds.len() {
        return Err(Error::InvalidArg("preds/golds length mismatch".into()));
    }
    if preds.is_empty() {
        return Err(Error::Empty("metrics over zero examples".into()));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p >= num_classes || g >= num_classes {
            return Err(Error::InvalidArg("class index out of range".into()));
        }
        confusion[g][p] += 1;
    }
    let mut precision = vec![0.0; num_classes];
    let mut recall = vec![0.0; num_classes];
    let mut support = vec![0usize; num_classes];
    let mut correct = 0usize;
    for y in 0..num_classes {
        let tp = confusion[y][y];
        correct += tp;
        let gold_total: usize = confusion[y].iter().sum();
        let pred_total: usize = (0..num_classes).map(|g| confusion[g][y]).sum();
        support[y] = gold_total;
        if pred_total > 0 {
            precision[y] = 100.0 * tp as f64 / pred_total as f64;
        }
        if gold_total > 0 {
            recall[y] = 100.0 * tp as f64 / gold_total as f64;
        }
    }
    Ok(Metrics {
        accuracy: 100.0 * correct as f64 / preds.len() as f64,
        precision,
        recall,
        confusion,
        support,
    })
}

pub fn evaluate(model: &FittedModel, test: &Dataset) -> Result<Metrics> {
    let mut preds = Vec::with_capacity(test.len());
    let mut golds = Vec::with_capacity(test.len());
    for (doc, y) in &test.examples {
        preds.push(model.predict(doc)?);
        golds.push(*y);
    }
    metrics_from(&preds, &golds, test.num_classes)
}

// ---------------------------------------------------------------------------
// Sample-complexity curve
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurveCell {
    pub model: String,
    pub n_per_class: usize,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

/// The (size, seed, kind) grid in a fixed order, so callers can fan the
/// independent cells out over workers.
pub fn curve_cells(kinds: &[ModelKind], cfg: &Config) -> Vec<(usize, u64, ModelKind)> {
    let mut out = Vec::new();
    for &n in &cfg.curve_sizes {
        for s in 0..cfg.curve_seeds as u64 {
            for &kind in kinds {
                out.push((n, cfg.opt.seed.wrapping_add(s), kind));
            }
        }
    }
    out
}

/// One curve cell: subsample, fit, evaluate. Failures are recorded in the
/// cell instead of aborting the grid.
pub fn run_curve_cell(
    train_ds: &Dataset,
    dev_ds: &Dataset,
    test_ds: &Dataset,
    vocab_size: usize,
    n: usize,
    seed: u64,
    kind: ModelKind,
    cfg: &Config,
) -> CurveCell {
    let outcome = subsample_per_class(train_ds, n, seed)
        .map_err(|e| e.to_string())
        .and_then(|sub| {
            fit_model(kind, &sub, dev_ds, vocab_size, cfg, seed)
                .and_then(|(m, _)| evaluate(&m, test_ds))
                .map(|met| met.accuracy)
                .map_err(|e| e.to_string())
        });
    let (accuracy, error) = match outcome {
        Ok(a) => (Some(a), None),
        Err(e) => (None, Some(e)),
    };
    CurveCell {
        model: kind.as_str().to_string(),
        n_per_class: n,
        seed,
        accuracy,
        error,
    }
}

/// Test accuracy at each training-set size, repeated over subsample seeds.
/// A failure in one cell is recorded there; the remaining cells still run.
pub fn learning_curve(
    train_ds: &Dataset,
    dev_ds: &Dataset,
    test_ds: &Dataset,
    vocab_size: usize,
    kinds: &[ModelKind],
    cfg: &Config,
) -> Result<Vec<CurveCell>> {
    if kinds.is_empty() {
        return Err(Error::InvalidArg("no model kinds requested".into()));
    }
    Ok(curve_cells(kinds, cfg)
        .into_iter()
        .map(|(n, seed, kind)| {
            run_curve_cell(train_ds, dev_ds, test_ds, vocab_size, n, seed, kind, cfg)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Continual class introduction
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseResult {
    pub phase: usize,
    pub new_class: usize,
    pub classes_seen: Vec<usize>,
    pub metrics: Metrics,
    /// Fraction (percent) of evaluated docs predicted as the newest class.
    pub newest_class_share: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinualResult {
    pub model: String,
    pub phases: Vec<PhaseResult>,
}

fn class_docs(ds: &Dataset, y: usize) -> Vec<Document> {
    ds.examples
        .iter()
        .filter(|(_, l)| *l == y)
        .map(|(d, _)| d.clone())
        .collect()
}

fn class_subset(ds: &Dataset, keep: &[usize], name: &str) -> Dataset {
    Dataset {
        examples: ds
            .examples
            .iter()
            .filter(|(_, l)| keep.contains(l))
            .cloned()
            .collect(),
        num_classes: ds.num_classes,
        name: name.to_string(),
    }
}

/// Argmax over the seen classes only; a partially introduced model never
/// gets credit or blame for classes it has not been shown.
fn restricted_argmax(scores: &[f64], seen: &[usize]) -> usize {
    let mut best = seen[0];
    for &y in seen {
        if scores[y] > scores[best] {
            best = y;
        }
    }
    best
}

/// Log-prior over the seen classes from their training counts.
fn seen_prior(train_ds: &Dataset, seen: &[usize]) -> Vec<f64> {
    let mut counts = vec![0usize; train_ds.num_classes];
    let mut total = 0usize;
    for (_, y) in &train_ds.examples {
        if seen.contains(y) {
            counts[*y] += 1;
            total += 1;
        }
    }
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                f64::NEG_INFINITY
            } else {
                (c as f64 / total as f64).ln()
            }
        })
        .collect()
}

/// Full-parameter NLL training of one stand-alone class LM with patience
/// on the epoch training loss.
fn train_single_lm(lm: &mut SingleClassLm, docs: &[Document], cfg: &crate::config::OptimizerConfig) -> Result<()> {
    if docs.is_empty() {
        return Err(Error::Empty("no documents for class LM".into()));
    }
    let ids = lm.all_ids();
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut best = f64::INFINITY;
    let mut bad = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut lls = Vec::with_capacity(chunk.len());
            for &i in chunk {
                lls.push(lm.loglik_on_tape(&mut tape, &docs[i])?);
            }
            let loss = tape.sum_scaled(&lls, -1.0 / chunk.len() as f64)?;
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Numerical("class LM training diverged".into()));
            }
            tape.backward(loss, &mut lm.ps)?;
            lm.ps.clip_global_norm(&ids, cfg.clip_norm);
            lm.ps.adagrad_step(&ids, cfg.learning_rate, cfg.epsilon)?;
            lm.ps.zero_grads();
            epoch_loss += loss_val;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        if mean < best - 1e-6 {
            best = mean;
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                break;
            }
        }
    }
    Ok(())
}

/// Introduce one class per phase and evaluate on the classes seen so far.
/// The discriminative model updates all parameters on each new class's
/// examples; the independent generative model trains only that class's LM;
/// the shared generative model pretrains its LM parts once on the whole
/// (label-stripped) training set, then fits only (v_y, b_y) per phase.
pub fn run_continual(
    train_ds: &Dataset,
    dev_ds: &Dataset,
    test_ds: &Dataset,
    vocab_size: usize,
    kind: ModelKind,
    cfg: &Config,
) -> Result<ContinualResult> {
    let k = train_ds.num_classes;
    if k < 2 {
        return Err(Error::InvalidArg("continual run needs >= 2 classes".into()));
    }
    let mut opt = cfg.opt.clone();
    opt.seed = cfg.opt.seed;

    enum State {
        Disc(DiscModel),
        Indep(IndepGenModel),
        Shared(SharedGenModel),
    }
    let mut state = match kind {
        ModelKind::Disc => State::Disc(DiscModel::new(
            vocab_size,
            k,
            cfg.embed_dim,
            cfg.hidden_dim,
            opt.seed,
        )),
        ModelKind::GenIndep => State::Indep(IndepGenModel::new(
            vocab_size,
            k,
            cfg.embed_dim,
            cfg.hidden_dim,
            opt.seed,
        )),
        ModelKind::GenShared => {
            let mut m = SharedGenModel::new(vocab_size, k, cfg.embed_dim, cfg.hidden_dim, opt.seed);
            let unlabeled: Vec<Document> =
                train_ds.examples.iter().map(|(d, _)| d.clone()).collect();
            pretrain_shared_lm(&mut m, &unlabeled, &opt)?;
            State::Shared(m)
        }
        other => {
            return Err(Error::InvalidArg(format!(
                "continual run supports disc/gen-shared/gen-indep, not {}",
                other.as_str()
            )))
        }
    };

    let mut phases = Vec::new();
    let mut seen: Vec<usize> = Vec::new();
    for new_class in 0..k {
        seen.push(new_class);
        let new_docs = class_docs(train_ds, new_class);
        if new_docs.is_empty() {
            return Err(Error::Empty(format!("no training docs for class {new_class}")));
        }
        match &mut state {
            State::Disc(m) => {
                // all parameters update on the new class's labeled examples
                let phase_train = class_subset(train_ds, &[new_class], "phase-train");
                let phase_dev = class_subset(dev_ds, &[new_class], "phase-dev");
                train(m, &phase_train, &phase_dev, &opt)?;
            }
            State::Indep(m) => {
                train_single_lm(&mut m.per_class[new_class], &new_docs, &opt)?;
                m.log_prior = seen_prior(train_ds, &seen);
            }
            State::Shared(m) => {
                fit_new_class(m, new_class, &new_docs, &opt)?;
                m.log_prior = seen_prior(train_ds, &seen);
            }
        }

        let eval = class_subset(test_ds, &seen, "phase-test");
        let mut preds = Vec::with_capacity(eval.len());
        let mut golds = Vec::with_capacity(eval.len());
        for (doc, y) in &eval.examples {
            let pred = match &state {
                State::Disc(m) => restricted_argmax(&m.log_posterior(doc)?, &seen),
                State::Indep(m) => restricted_argmax(&gen_predict(m, doc)?.1, &seen),
                State::Shared(m) => restricted_argmax(&gen_predict(m, doc)?.1, &seen),
            };
            preds.push(pred);
            golds.push(*y);
        }
        let newest = preds.iter().filter(|&&p| p == new_class).count();
        phases.push(PhaseResult {
            phase: seen.len(),
            new_class,
            classes_seen: seen.clone(),
            metrics: metrics_from(&preds, &golds, k)?,
            newest_class_share: 100.0 * newest as f64 / preds.len().max(1) as f64,
        });
    }
    Ok(ContinualResult {
        model: kind.as_str().to_string(),
        phases,
    })
}

// ---------------------------------------------------------------------------
// Zero-shot transfer with self-training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZeroShotRound {
    pub round: usize,
    pub added: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub model: String,
    pub hidden: Vec<usize>,
    pub initial: Metrics,
    pub rounds: Vec<ZeroShotRound>,
}

/// Pool documents whose top prediction is a hidden class and whose
/// posterior margin log(top1) - log(top2) reaches `ln_margin`, labeled
/// with that prediction. Gold examples are never touched.
pub fn self_train_select(
    pool: &[Document],
    hidden: &[usize],
    ln_margin: f64,
    score: impl Fn(&Document) -> Result<Vec<f64>>,
) -> Result<Vec<(Document, usize)>> {
    let mut picked = Vec::new();
    for doc in pool {
        let scores = score(doc)?;
        if scores.len() < 2 {
            return Err(Error::InvalidArg("need >= 2 classes for margin".into()));
        }
        let mut best = 0usize;
        for (y, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = y;
            }
        }
        if !hidden.contains(&best) {
            continue;
        }
        let second = scores
            .iter()
            .enumerate()
            .filter(|(y, _)| *y != best)
            .map(|(_, s)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        if scores[best] - second >= ln_margin {
            picked.push((doc.clone(), best));
        }
    }
    Ok(picked)
}

fn uniform_prior(k: usize) -> Vec<f64> {
    vec![-(k as f64).ln(); k]
}

/// Train with class embeddings fixed to label word vectors, keeping the
/// hidden classes' examples out of the training set, then (for the
/// generative model) self-train on the unlabeled pool. Scoring uses a
/// uniform class prior so hidden classes are not ruled out up front.
pub fn run_zero_shot(
    train_ds: &Dataset,
    pool_ds: &Dataset,
    test_ds: &Dataset,
    vocab_size: usize,
    hidden: &[usize],
    label_vectors: &[Vec<f64>],
    kind: ModelKind,
    cfg: &Config,
) -> Result<ZeroShotResult> {
    let k = train_ds.num_classes;
    for &h in hidden {
        if h >= k {
            return Err(Error::InvalidArg(format!("hidden class {h} out of range")));
        }
    }
    let seen: Vec<usize> = (0..k).filter(|y| !hidden.contains(y)).collect();
    if seen.is_empty() {
        return Err(Error::InvalidArg("every class is hidden".into()));
    }
    let train_seen = class_subset(train_ds, &seen, "zeroshot-train");
    let pool_docs: Vec<Document> = pool_ds.examples.iter().map(|(d, _)| d.clone()).collect();
    // early stopping needs labels, so it uses the seen slice of the pool
    let dev_seen = class_subset(pool_ds, &seen, "zeroshot-dev");
    let mut opt = cfg.opt.clone();
    opt.seed = cfg.opt.seed;
    let ln_margin = cfg.self_train_margin.ln();

    match kind {
        ModelKind::Disc => {
            let mut m = DiscModel::new(vocab_size, k, cfg.embed_dim, cfg.hidden_dim, opt.seed);
            m.fix_label_embeddings(label_vectors)?;
            train(&mut m, &train_seen, &dev_seen, &opt)?;
            let initial = evaluate(&FittedModel::Disc(m), test_ds)?;
            // the fixed blended logit can never exceed both parents, so
            // self-training has nothing to add; report the single round
            Ok(ZeroShotResult {
                model: kind.as_str().to_string(),
                hidden: hidden.to_vec(),
                initial,
                rounds: Vec::new(),
            })
        }
        ModelKind::GenShared => {
            let mut m = SharedGenModel::new(vocab_size, k, cfg.embed_dim, cfg.hidden_dim, opt.seed);
            m.fix_label_embeddings(label_vectors)?;
            train(&mut m, &train_seen, &dev_seen, &opt)?;
            m.log_prior = uniform_prior(k);
            let initial = evaluate_shared(&m, test_ds)?;

            let mut rounds = Vec::new();
            let mut augmented = train_seen.clone();
            for round in 1..=cfg.self_train_rounds {
                let added = self_train_select(&pool_docs, hidden, ln_margin, |d| {
                    Ok(gen_predict(&m, d)?.1)
                })?;
                if added.is_empty() {
                    break;
                }
                // gold examples stay; this round's pseudo-labels replace
                // the previous round's
                let mut next = train_seen.clone();
                let n_added = added.len();
                next.examples.extend(added);
                augmented = next;
                train(&mut m, &augmented, &dev_seen, &opt)?;
                m.log_prior = uniform_prior(k);
                rounds.push(ZeroShotRound {
                    round,
                    added: n_added,
                    metrics: evaluate_shared(&m, test_ds)?,
                });
            }
            let _ = augmented;
            Ok(ZeroShotResult {
                model: kind.as_str().to_string(),
                hidden: hidden.to_vec(),
                initial,
                rounds,
            })
        }
        other => Err(Error::InvalidArg(format!(
            "zero-shot supports disc and gen-shared, not {}",
            other.as_str()
        ))),
    }
}

fn evaluate_shared(m: &SharedGenModel, test: &Dataset) -> Result<Metrics> {
    let mut preds = Vec::with_capacity(test.len());
    let mut golds = Vec::with_capacity(test.len());
    for (doc, y) in &test.examples {
        preds.push(gen_predict(m, doc)?.0);
        golds.push(*y);
    }
    metrics_from(&preds, &golds, test.num_classes)
}

/// Gradient checks on the shipped two-class fixture at D=E=8: the
/// discriminative batch NLL and the shared generative doc log-likelihood.
/// Returns the two max relative errors.
pub fn fixture_grad_errors() -> Result<(f64, f64)> {
    use crate::lstm::{mean_pool, run_sequence};
    use crate::tape::grad_check;

    let fx = crate::synth::fixture_f1();
    let batch: Vec<(Document, usize)> = fx.train.examples.clone();

    let mut disc = DiscModel::new(fx.vocab.size(), 2, 8, 8, 17);
    let mut tape = Tape::new();
    let loss = disc.nll_on_tape(&mut tape, &batch)?;
    tape.backward(loss, &mut disc.ps)?;
    let lstm = disc.lstm.clone();
    let (emb, v, b) = (disc.emb, disc.v, disc.b);
    let scale = -1.0 / batch.len() as f64;
    let disc_err = grad_check(
        &mut disc.ps,
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
            let l = t.sum_scaled(&picks, scale).unwrap();
            t.scalar(l)
        },
        1e-4,
        4,
        11,
    )?;

    let mut gen = SharedGenModel::new(fx.vocab.size(), 2, 8, 8, 19);
    let d = batch[0].0.clone();
    let mut tape = Tape::new();
    let ll = gen.loglik_on_tape(&mut tape, &d, 0)?;
    let loss = tape.neg(ll);
    tape.backward(loss, &mut gen.ps)?;
    let lstm = gen.lstm.clone();
    let (emb, u) = (gen.emb, gen.u);
    let (ce, cb) = (gen.class_emb[0], gen.class_bias[0]);
    let gen_err = grad_check(
        &mut gen.ps,
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
        4,
        13,
    )?;
    Ok((disc_err, gen_err))
}

// ---------------------------------------------------------------------------
// Out-of-domain detection via marginal likelihood
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShiftScore {
    pub index: usize,
    pub in_domain: bool,
    pub tokens: usize,
    pub log_px: f64,
    pub log_px_per_token: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShiftReport {
    pub scores: Vec<ShiftScore>,
    pub mean_in_per_token: f64,
    pub mean_out_per_token: f64,
    /// mean_in - mean_out in nats per token (positive = detectable)
    pub gap_per_token: f64,
    pub rank_sum_u: f64,
    pub rank_sum_z: f64,
    /// One-sided p for "out-of-domain scores are lower".
    pub rank_sum_p: f64,
}

/// Per-document marginal log-likelihood log p(x) under a generative model,
/// for in-domain and held-out documents.
pub fn shift_report<M: ClassConditionalScorer + ?Sized>(
    model: &M,
    in_docs: &[Document],
    out_docs: &[Document],
) -> Result<ShiftReport> {
    if in_docs.is_empty() || out_docs.is_empty() {
        return Err(Error::Empty("shift needs both in- and out-domain docs".into()));
    }
    let mut scores = Vec::with_capacity(in_docs.len() + out_docs.len());
    let score_group = |docs: &[Document], in_domain: bool, scores: &mut Vec<ShiftScore>| -> Result<()> {
        for (i, doc) in docs.iter().enumerate() {
            let log_px = crate::models::marginal_loglik(model, doc)?;
            scores.push(ShiftScore {
                index: i,
                in_domain,
                tokens: doc.len(),
                log_px,
                log_px_per_token: log_px / doc.len().max(1) as f64,
            });
        }
        Ok(())
    };
    score_group(in_docs, true, &mut scores)?;
    score_group(out_docs, false, &mut scores)?;

    let per_token = |flag: bool| -> Vec<f64> {
        scores
            .iter()
            .filter(|s| s.in_domain == flag)
            .map(|s| s.log_px_per_token)
            .collect()
    };
    let ins = per_token(true);
    let outs = per_token(false);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (u, z, p) = rank_sum_test(&ins, &outs);
    Ok(ShiftReport {
        mean_in_per_token: mean(&ins),
        mean_out_per_token: mean(&outs),
        gap_per_token: mean(&ins) - mean(&outs),
        rank_sum_u: u,
        rank_sum_z: z,
        rank_sum_p: p,
        scores,
    })
}

/// A full shift run: report plus the gold class of each in-domain score
/// (same order as the in-domain entries), for per-class histograms.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShiftRun {
    pub hold_out: usize,
    pub report: ShiftReport,
    pub in_gold: Vec<usize>,
}

/// Train the shared generative model on every class except `hold_out`
/// (labels remapped to a dense range), then score the test split's seen
/// and held-out documents by marginal likelihood.
pub fn run_shift(
    train_ds: &Dataset,
    dev_ds: &Dataset,
    test_ds: &Dataset,
    vocab_size: usize,
    hold_out: usize,
    cfg: &Config,
) -> Result<ShiftRun> {
    let k = train_ds.num_classes;
    if hold_out >= k {
        return Err(Error::InvalidArg(format!("hold-out class {hold_out} out of range")));
    }
    if k < 2 {
        return Err(Error::InvalidArg("shift run needs >= 2 classes".into()));
    }
    // dense remap of the remaining classes
    let remap: Vec<Option<usize>> = (0..k)
        .map(|y| {
            if y == hold_out {
                None
            } else {
                Some(y - usize::from(y > hold_out))
            }
        })
        .collect();
    let remapped = |ds: &Dataset, name: &str| Dataset {
        examples: ds
            .examples
            .iter()
            .filter_map(|(d, y)| remap[*y].map(|ry| (d.clone(), ry)))
            .collect(),
        num_classes: k - 1,
        name: name.to_string(),
    };
    let train_seen = remapped(train_ds, "shift-train");
    let dev_seen = remapped(dev_ds, "shift-dev");
    let (model, _) = fit_model(ModelKind::GenShared, &train_seen, &dev_seen, vocab_size, cfg, cfg.opt.seed)?;
    let scorer = model
        .as_scorer()
        .expect("gen-shared always has a generative view");

    let mut in_docs = Vec::new();
    let mut in_gold = Vec::new();
    let mut out_docs = Vec::new();
    for (d, y) in &test_ds.examples {
        if *y == hold_out {
            out_docs.push(d.clone());
        } else {
            in_docs.push(d.clone());
            in_gold.push(*y);
        }
    }
    let report = shift_report(scorer, &in_docs, &out_docs)?;
    Ok(ShiftRun {
        hold_out,
        report,
        in_gold,
    })
}

/// Standard normal CDF via the Abramowitz–Stegun erf approximation
/// (absolute error < 1.5e-7, ample for significance thresholds).
pub fn normal_cdf(x: f64) -> f64 {
    let t = 1.0 / (1.0 + 0.3275911 * x.abs() / std::f64::consts::SQRT_2);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-x * x / 2.0).exp();
    if x >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}

/// Mann–Whitney rank-sum with normal approximation and midrank ties.
/// Returns (U for the first sample, z, one-sided p that the second
/// sample is stochastically smaller).
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let n1 = a.len() as f64;
    let n2 = b.len() as f64;
    let mut all: Vec<(f64, bool)> = a.iter().map(|&x| (x, true)).collect();
    all.extend(b.iter().map(|&x| (x, false)));
    all.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    // midranks over tie groups
    let mut ranks = vec![0.0; all.len()];
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = midrank;
        }
        i = j + 1;
    }
    let r1: f64 = all
        .iter()
        .zip(&ranks)
        .filter(|((_, first), _)| *first)
        .map(|(_, r)| *r)
        .sum();
    let u1 = r1 - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let sd = (n1 * n2 * (n1 + n2 + 1.0) / 12.0).sqrt();
    if sd == 0.0 {
        return (u1, 0.0, 0.5);
    }
    let z = (u1 - mean) / sd;
    // large U1 = first sample ranks higher = second sample lower
    let p = 1.0 - normal_cdf(z);
    (u1, z, p)
}
