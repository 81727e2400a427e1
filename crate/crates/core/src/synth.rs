//! Deterministic synthetic corpora: a tiny separable two-class fixture
//! and a configurable multi-class news-style analog for desk-scale runs
//! (the published benchmark CSVs are supplied by the user, never bundled).

use crate::data::{build_vocab, encode_dataset, tokenize, Dataset, RawExample, Vocabulary};
use crate::error::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub class_names: Vec<String>,
}

/// Build a vocabulary from the training texts and encode all three splits.
pub fn prepare(
    train_raw: &[RawExample],
    dev_raw: &[RawExample],
    test_raw: &[RawExample],
    num_classes: usize,
    max_vocab: usize,
    min_count: usize,
    name: &str,
    class_names: Vec<String>,
) -> Result<PreparedData> {
    let corpus: Vec<Vec<String>> = train_raw.iter().map(|e| tokenize(&e.text)).collect();
    let vocab = build_vocab(&corpus, max_vocab, min_count)?;
    Ok(PreparedData {
        train: encode_dataset(train_raw, &vocab, num_classes, &format!("{name}-train"))?,
        dev: encode_dataset(dev_raw, &vocab, num_classes, &format!("{name}-dev"))?,
        test: encode_dataset(test_raw, &vocab, num_classes, &format!("{name}-test"))?,
        vocab,
        class_names,
    })
}

/// Fixture F1: two classes with disjoint keyword distributions, vocab 7.
pub fn fixture_f1() -> PreparedData {
    let c0 = [
        "red blue",
        "blue red red",
        "red red",
        "blue blue red",
        "red blue blue",
        "blue",
        "red red blue",
        "blue red",
    ];
    let c1 = [
        "green yellow",
        "yellow green green",
        "green green",
        "yellow yellow green",
        "green yellow yellow",
        "yellow",
        "green green yellow",
        "yellow green",
    ];
    let mk = |texts: &[&str], label: usize| -> Vec<RawExample> {
        texts
            .iter()
            .map(|t| RawExample {
                label,
                text: t.to_string(),
            })
            .collect()
    };
    let mut train = mk(&c0, 0);
    train.extend(mk(&c1, 1));
    let mut dev = mk(&["red blue red", "blue blue"], 0);
    dev.extend(mk(&["green yellow green", "yellow yellow"], 1));
    let mut test = mk(&["blue red blue", "red", "red blue red red"], 0);
    test.extend(mk(&["yellow green yellow", "green", "green yellow green green"], 1));
    prepare(
        &train,
        &dev,
        &test,
        2,
        64,
        1,
        "f1",
        vec!["red-ish".into(), "green-ish".into()],
    )
    .expect("fixture construction cannot fail")
}

#[derive(Clone, Debug)]
pub struct AnalogSpec {
    pub num_classes: usize,
    pub n_train_per_class: usize,
    pub n_dev_per_class: usize,
    pub n_test_per_class: usize,
    pub doc_len: (usize, usize),
    pub n_common_words: usize,
    pub n_class_words: usize,
    /// Probability that a token is drawn from the class pool.
    pub class_word_prob: f64,
    /// (hidden, parent_a, parent_b): the hidden class draws its keywords
    /// from the two parent pools instead of an own pool.
    pub blend: Option<(usize, usize, usize)>,
    pub seed: u64,
}

impl Default for AnalogSpec {
    fn default() -> Self {
        AnalogSpec {
            num_classes: 4,
            n_train_per_class: 1000,
            n_dev_per_class: 125,
            n_test_per_class: 250,
            doc_len: (8, 16),
            n_common_words: 60,
            n_class_words: 30,
            class_word_prob: 0.5,
            blend: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnalogCorpus {
    pub train: Vec<RawExample>,
    pub dev: Vec<RawExample>,
    pub test: Vec<RawExample>,
    pub class_names: Vec<String>,
}

fn sample_ranked<'a>(pool: &'a [String], rng: &mut ChaCha8Rng) -> &'a str {
    // zipf-ish weights 1/(rank+2)
    let weights: Vec<f64> = (0..pool.len()).map(|i| 1.0 / (i as f64 + 2.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (w, token) in weights.iter().zip(pool) {
        if x < *w {
            return token;
        }
        x -= w;
    }
    &pool[pool.len() - 1]
}

/// Generate a seeded news-style corpus: shared common words plus a
/// skewed per-class keyword pool.
pub fn generate_analog(spec: &AnalogSpec) -> AnalogCorpus {
    let common: Vec<String> = (0..spec.n_common_words).map(|i| format!("the{i:03}")).collect();
    let class_pools: Vec<Vec<String>> = (0..spec.num_classes)
        .map(|y| {
            (0..spec.n_class_words)
                .map(|j| format!("c{y}w{j:02}"))
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let gen_doc = |y: usize, rng: &mut ChaCha8Rng| -> String {
        let len = rng.gen_range(spec.doc_len.0..=spec.doc_len.1);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            if rng.gen_bool(spec.class_word_prob) {
                let pool_class = match spec.blend {
                    Some((hidden, a, b)) if y == hidden => {
                        if rng.gen_bool(0.5) {
                            a
                        } else {
                            b
                        }
                    }
                    _ => y,
                };
                words.push(sample_ranked(&class_pools[pool_class], rng).to_string());
            } else {
                words.push(sample_ranked(&common, rng).to_string());
            }
        }
        words.join(" ")
    };

    let gen_split = |n_per_class: usize, rng: &mut ChaCha8Rng| -> Vec<RawExample> {
        let mut out = Vec::new();
        for y in 0..spec.num_classes {
            for _ in 0..n_per_class {
                out.push(RawExample {
                    label: y,
                    text: gen_doc(y, rng),
                });
            }
        }
        out.shuffle(rng);
        out
    };

    let train = gen_split(spec.n_train_per_class, &mut rng);
    let dev = gen_split(spec.n_dev_per_class, &mut rng);
    let test = gen_split(spec.n_test_per_class, &mut rng);
    AnalogCorpus {
        train,
        dev,
        test,
        class_names: (0..spec.num_classes).map(|y| format!("topic{y}")).collect(),
    }
}

/// Label embeddings for the analog: orthonormal basis directions for
/// regular classes; a blended class gets the exact average of its two
/// parents, so its discriminative logit can never exceed both parents'.
pub fn analog_label_vectors(
    num_classes: usize,
    dim: usize,
    blend: Option<(usize, usize, usize)>,
) -> Vec<Vec<f64>> {
    assert!(dim >= num_classes, "label space dim must be >= num_classes");
    let mut vectors: Vec<Vec<f64>> = (0..num_classes)
        .map(|y| {
            let mut v = vec![0.0; dim];
            v[y] = 1.0;
            v
        })
        .collect();
    if let Some((hidden, a, b)) = blend {
        vectors[hidden] = (0..dim)
            .map(|i| 0.5 * (vectors[a][i] + vectors[b][i]))
            .collect();
    }
    vectors
}

/// Write the corpus out in the published CSV format (1-indexed class,
/// title column, body column).
pub fn write_csv(examples: &[RawExample], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::error::Error::Format(e.to_string()))?;
    for ex in examples {
        let mut parts = ex.text.splitn(2, ' ');
        let title = parts.next().unwrap_or("");
        let body = parts.next().unwrap_or("");
        w.write_record([&(ex.label + 1).to_string(), title, body])
            .map_err(|e| crate::error::Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_f1_has_vocab_seven() {
        let fx = fixture_f1();
        assert_eq!(fx.vocab.size(), 7);
        assert_eq!(fx.train.len(), 16);
        assert_eq!(fx.train.num_classes, 2);
    }

    #[test]
    fn analog_is_deterministic_and_balanced() {
        let spec = AnalogSpec {
            n_train_per_class: 10,
            n_dev_per_class: 2,
            n_test_per_class: 3,
            ..AnalogSpec::default()
        };
        let a = generate_analog(&spec);
        let b = generate_analog(&spec);
        assert_eq!(a.train, b.train);
        assert_eq!(a.train.len(), 40);
        assert_eq!(a.test.len(), 12);
        let mut counts = vec![0usize; 4];
        for ex in &a.train {
            counts[ex.label] += 1;
        }
        assert_eq!(counts, vec![10, 10, 10, 10]);
    }

    #[test]
    fn blended_class_uses_parent_pools() {
        let spec = AnalogSpec {
            n_train_per_class: 20,
            n_dev_per_class: 1,
            n_test_per_class: 1,
            blend: Some((3, 0, 1)),
            ..AnalogSpec::default()
        };
        let corpus = generate_analog(&spec);
        for ex in corpus.train.iter().filter(|e| e.label == 3) {
            for tok in ex.text.split(' ') {
                assert!(
                    !tok.starts_with("c3") && !tok.starts_with("c2"),
                    "blend class used token {tok}"
                );
            }
        }
    }

    #[test]
    fn blended_label_vector_is_parent_average() {
        let v = analog_label_vectors(4, 8, Some((3, 0, 1)));
        assert_eq!(v[3][0], 0.5);
        assert_eq!(v[3][1], 0.5);
        assert_eq!(v[3][2], 0.0);
        let norm: f64 = v[3].iter().map(|x| x * x).sum::<f64>();
        assert!(norm < 1.0);
    }

    #[test]
    fn csv_round_trip_through_loader() {
        let spec = AnalogSpec {
            n_train_per_class: 3,
            n_dev_per_class: 1,
            n_test_per_class: 1,
            ..AnalogSpec::default()
        };
        let corpus = generate_analog(&spec);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&corpus.train, f.path()).unwrap();
        let loaded = crate::data::load_csv(f.path()).unwrap();
        assert_eq!(loaded.len(), corpus.train.len());
        for (a, b) in loaded.iter().zip(&corpus.train) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.text, b.text);
        }
    }
}
