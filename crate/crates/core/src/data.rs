//! Dataset ingestion, tokenization, vocabulary construction, deterministic
//! splits/subsamples, and word-vector loading.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const UNK: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawExample {
    /// 0-based class index (files are 1-indexed).
    pub label: usize,
    pub text: String,
}

/// Bidirectional token <-> id map with reserved UNK/BOS/EOS ids.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the newline-joined token list; embedded in checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        format!("{:x}", h.finalize())
    }

    /// Newline-separated token list, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let tokens: Vec<String> = BufReader::new(f)
            .lines()
            .collect::<std::io::Result<_>>()?;
        if tokens.len() < 3
            || tokens[0] != UNK_TOKEN
            || tokens[1] != BOS_TOKEN
            || tokens[2] != EOS_TOKEN
        {
            return Err(Error::Format(
                "vocabulary file missing reserved tokens".into(),
            ));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Token-id sequence with terminal EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub ids: Vec<u32>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Vec<(Document, usize)>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|(_, y)| *y).collect()
    }
}

#[derive(Clone, Debug)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

/// Load a `"class","title","body"` CSV; labels 1-indexed in the file.
/// Title and remaining columns are joined with a single space.
pub fn load_csv(path: &Path) -> Result<Vec<RawExample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::CsvParse {
            row,
            msg: e.to_string(),
        })?;
        if rec.len() < 2 {
            return Err(Error::CsvParse {
                row,
                msg: format!("expected >=2 columns, got {}", rec.len()),
            });
        }
        let class: i64 = rec[0].trim().parse().map_err(|_| Error::Format(format!(
            "row {row}: class `{}` is not numeric",
            &rec[0]
        )))?;
        if class < 1 {
            return Err(Error::Format(format!(
                "row {row}: class index {class} must be >= 1"
            )));
        }
        let text = rec
            .iter()
            .skip(1)
            .collect::<Vec<_>>()
            .join(" ")
            .trim()
            .to_string();
        if text.is_empty() {
            return Err(Error::Format(format!("row {row}: empty text")));
        }
        out.push(RawExample {
            label: (class - 1) as usize,
            text,
        });
    }
    if out.is_empty() {
        return Err(Error::Empty("no rows".into()));
    }
    Ok(out)
}

/// Lowercase, split on Unicode whitespace, strip leading/trailing ASCII
/// punctuation from each token, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let w = w
                .trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase();
            if w.is_empty() {
                None
            } else {
                Some(w)
            }
        })
        .collect()
}

/// Frequency-ranked vocabulary with lexicographic tie-break; reserved
/// tokens first. Tokens below `min_count` or beyond `max_size` are left
/// out and map to UNK downstream.
pub fn build_vocab(corpus: &[Vec<String>], max_size: usize, min_count: usize) -> Result<Vocabulary> {
    if max_size < 3 {
        return Err(Error::InvalidArg("max_size must be >= 3".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for tok in doc {
            *counts.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count.max(1))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut tokens = vec![
        UNK_TOKEN.to_string(),
        BOS_TOKEN.to_string(),
        EOS_TOKEN.to_string(),
    ];
    for (tok, _) in ranked.into_iter().take(max_size - 3) {
        tokens.push(tok.to_string());
    }
    Ok(Vocabulary::from_tokens(tokens))
}

/// Encode text to ids; unknown tokens become UNK, EOS is appended.
pub fn encode(text: &str, vocab: &Vocabulary) -> Document {
    let mut ids: Vec<u32> = tokenize(text).iter().map(|t| vocab.id(t)).collect();
    ids.push(EOS);
    Document { ids }
}

pub fn encode_dataset(
    examples: &[RawExample],
    vocab: &Vocabulary,
    num_classes: usize,
    name: &str,
) -> Result<Dataset> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        if ex.label >= num_classes {
            return Err(Error::Format(format!(
                "label {} >= num_classes {}",
                ex.label, num_classes
            )));
        }
        out.push((encode(&ex.text, vocab), ex.label));
    }
    Ok(Dataset {
        examples: out,
        num_classes,
        name: name.to_string(),
    })
}

/// Deterministically hold out `n_dev` examples as a development set.
pub fn hold_out_dev(train: &Dataset, n_dev: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_dev >= train.len() && n_dev != 0 {
        return Err(Error::InvalidArg(format!(
            "n_dev {} >= train size {}",
            n_dev,
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let dev_idx: std::collections::HashSet<usize> = order[..n_dev].iter().copied().collect();
    let mut tr = Vec::new();
    let mut dv = Vec::new();
    for (i, ex) in train.examples.iter().enumerate() {
        if dev_idx.contains(&i) {
            dv.push(ex.clone());
        } else {
            tr.push(ex.clone());
        }
    }
    Ok((
        Dataset {
            examples: tr,
            num_classes: train.num_classes,
            name: format!("{}-train", train.name),
        },
        Dataset {
            examples: dv,
            num_classes: train.num_classes,
            name: format!("{}-dev", train.name),
        },
    ))
}

/// Deterministically draw exactly `n` examples per class.
pub fn subsample_per_class(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, (_, y)) in ds.examples.iter().enumerate() {
        by_class[*y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n * ds.num_classes);
    for (c, idxs) in by_class.iter_mut().enumerate() {
        if idxs.len() < n {
            return Err(Error::InvalidArg(format!(
                "class {c} has only {} examples, need {n}",
                idxs.len()
            )));
        }
        idxs.shuffle(&mut rng);
        chosen.extend(idxs[..n].iter().copied());
    }
    chosen.sort_unstable();
    Ok(Dataset {
        examples: chosen.iter().map(|&i| ds.examples[i].clone()).collect(),
        num_classes: ds.num_classes,
        name: format!("{}-n{n}", ds.name),
    })
}

/// Load plain-text word vectors (token + D space-separated decimals per
/// line), keeping tokens in `vocab` plus the requested extra words.
pub fn load_word_vectors(path: &Path, vocab: &Vocabulary, extra: &[String]) -> Result<WordVectors> {
    let f = std::fs::File::open(path)?;
    let mut dim: Option<usize> = None;
    let mut vectors = HashMap::new();
    let extra_set: std::collections::HashSet<&str> = extra.iter().map(|s| s.as_str()).collect();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let tok = parts
            .next()
            .ok_or_else(|| Error::CsvParse {
                row: i + 1,
                msg: "empty line".into(),
            })?
            .to_string();
        let vals: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| Error::CsvParse {
                    row: i + 1,
                    msg: format!("bad decimal `{p}`"),
                })
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(vals.len()),
            Some(d) if d != vals.len() => {
                return Err(Error::CsvParse {
                    row: i + 1,
                    msg: format!("dimension {} != {}", vals.len(), d),
                })
            }
            _ => {}
        }
        if vocab.contains(&tok) || extra_set.contains(tok.as_str()) {
            vectors.insert(tok, vals);
        }
    }
    let dim = dim.ok_or_else(|| Error::Empty("no vectors in file".into()))?;
    let missing: Vec<&str> = extra
        .iter()
        .map(|s| s.as_str())
        .filter(|w| !vectors.contains_key(*w))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "label words missing from vector file: {}",
            missing.join(", ")
        )));
    }
    Ok(WordVectors { dim, vectors })
}

/// Raw-text counterpart of `hold_out_dev`, used before the vocabulary is
/// built so dev text never influences token counts.
pub fn hold_out_dev_raw(
    examples: &[RawExample],
    n_dev: usize,
    seed: u64,
) -> Result<(Vec<RawExample>, Vec<RawExample>)> {
    if n_dev >= examples.len() && n_dev != 0 {
        return Err(Error::InvalidArg(format!(
            "n_dev {} >= dataset size {}",
            n_dev,
            examples.len()
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let dev_idx: std::collections::HashSet<usize> = order[..n_dev].iter().copied().collect();
    let mut tr = Vec::new();
    let mut dv = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        if dev_idx.contains(&i) {
            dv.push(ex.clone());
        } else {
            tr.push(ex.clone());
        }
    }
    Ok((tr, dv))
}

/// Encoded-dataset text format: a header line with the class count, then
/// one `label<TAB>id id id...` line per document.
pub fn save_encoded(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# gdtc-encoded num_classes={} name={}", ds.num_classes, ds.name)?;
    for (doc, y) in &ds.examples {
        let ids: Vec<String> = doc.ids.iter().map(|i| i.to_string()).collect();
        writeln!(f, "{y}\t{}", ids.join(" "))?;
    }
    Ok(())
}

pub fn load_encoded(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Empty("empty encoded file".into()))??;
    let rest = header
        .strip_prefix("# gdtc-encoded num_classes=")
        .ok_or_else(|| Error::Format("missing encoded-dataset header".into()))?;
    let (nc, name) = rest
        .split_once(" name=")
        .ok_or_else(|| Error::Format("malformed encoded-dataset header".into()))?;
    let num_classes: usize = nc
        .parse()
        .map_err(|_| Error::Format(format!("bad class count `{nc}`")))?;
    let mut examples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = i + 2;
        let (label, ids) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("line {row}: expected label<TAB>ids")))?;
        let y: usize = label
            .parse()
            .map_err(|_| Error::Format(format!("line {row}: bad label `{label}`")))?;
        if y >= num_classes {
            return Err(Error::Format(format!(
                "line {row}: label {y} >= num_classes {num_classes}"
            )));
        }
        let ids: Vec<u32> = ids
            .split(' ')
            .map(|p| {
                p.parse::<u32>()
                    .map_err(|_| Error::Format(format!("line {row}: bad id `{p}`")))
            })
            .collect::<Result<_>>()?;
        if ids.is_empty() {
            return Err(Error::Format(format!("line {row}: empty document")));
        }
        examples.push((Document { ids }, y));
    }
    Ok(Dataset {
        examples,
        num_classes,
        name: name.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_csv_shifts_labels_and_joins_columns() {
        let f = write_tmp("\"2\",\"hi\",\"there world\"\n\"1\",\"x\",\"y\"\n");
        let rows = load_csv(f.path()).unwrap();
        assert_eq!(rows[0].label, 1);
        assert_eq!(rows[0].text, "hi there world");
        assert_eq!(rows[1].label, 0);
    }

    #[test]
    fn load_csv_empty_file_is_error() {
        let f = write_tmp("");
        let err = load_csv(f.path()).unwrap_err();
        assert!(err.to_string().contains("no rows"));
    }

    #[test]
    fn load_csv_rejects_zero_class() {
        let f = write_tmp("\"0\",\"a\",\"b\"\n");
        assert!(load_csv(f.path()).is_err());
    }

    #[test]
    fn load_csv_rejects_non_numeric_class() {
        let f = write_tmp("\"x\",\"a\",\"b\"\n");
        assert!(load_csv(f.path()).is_err());
    }

    #[test]
    fn tokenize_empty_and_punctuation() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("The cat."), vec!["the", "cat"]);
        assert_eq!(tokenize("  a,  (b)  "), vec!["a", "b"]);
    }

    #[test]
    fn build_vocab_ranking_and_min_count() {
        let corpus = vec![vec!["a".to_string(), "b".to_string(), "a".to_string()]];
        let v = build_vocab(&corpus, 10, 1).unwrap();
        assert_eq!(v.tokens(), &[UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, "a", "b"]);
        let v2 = build_vocab(&corpus, 10, 2).unwrap();
        assert_eq!(v2.tokens(), &[UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, "a"]);
    }

    #[test]
    fn build_vocab_rejects_tiny_cap() {
        assert!(build_vocab(&[], 2, 1).is_err());
    }

    #[test]
    fn encode_unk_eos_rules() {
        let corpus = vec![vec!["a".to_string(), "b".to_string(), "a".to_string()]];
        let v = build_vocab(&corpus, 10, 1).unwrap();
        assert_eq!(encode("a b", &v).ids, vec![3, 4, EOS]);
        assert_eq!(encode("zzz", &v).ids, vec![UNK, EOS]);
        assert_eq!(encode("", &v).ids, vec![EOS]);
    }

    #[test]
    fn encode_decode_identity_in_vocab() {
        let corpus = vec![vec![
            "alpha".to_string(),
            "beta".to_string(),
            "gamma".to_string(),
        ]];
        let v = build_vocab(&corpus, 10, 1).unwrap();
        let doc = encode("alpha gamma beta", &v);
        let decoded: Vec<&str> = doc.ids[..doc.ids.len() - 1]
            .iter()
            .map(|&i| v.token(i))
            .collect();
        assert_eq!(decoded.join(" "), "alpha gamma beta");
    }

    fn toy_dataset(n_per_class: usize, num_classes: usize) -> Dataset {
        let examples = (0..n_per_class * num_classes)
            .map(|i| {
                (
                    Document {
                        ids: vec![3 + (i as u32 % 4), EOS],
                    },
                    i % num_classes,
                )
            })
            .collect();
        Dataset {
            examples,
            num_classes,
            name: "toy".into(),
        }
    }

    #[test]
    fn hold_out_dev_sizes_and_determinism() {
        let ds = toy_dataset(30, 2);
        let (tr, dv) = hold_out_dev(&ds, 10, 42).unwrap();
        assert_eq!(tr.len(), 50);
        assert_eq!(dv.len(), 10);
        let (tr2, dv2) = hold_out_dev(&ds, 10, 42).unwrap();
        assert_eq!(tr.examples, tr2.examples);
        assert_eq!(dv.examples, dv2.examples);
    }

    #[test]
    fn hold_out_dev_zero_is_noop() {
        let ds = toy_dataset(5, 2);
        let (tr, dv) = hold_out_dev(&ds, 0, 1).unwrap();
        assert_eq!(tr.len(), 10);
        assert!(dv.is_empty());
    }

    #[test]
    fn hold_out_dev_too_large_is_error() {
        let ds = toy_dataset(2, 2);
        assert!(hold_out_dev(&ds, 4, 1).is_err());
    }

    #[test]
    fn subsample_exact_counts_and_seed_sensitivity() {
        let ds = toy_dataset(50, 4);
        let sub = subsample_per_class(&ds, 5, 7).unwrap();
        assert_eq!(sub.len(), 20);
        let mut per_class = vec![0usize; 4];
        for (_, y) in &sub.examples {
            per_class[*y] += 1;
        }
        assert_eq!(per_class, vec![5, 5, 5, 5]);

        let sub_b = subsample_per_class(&ds, 5, 8).unwrap();
        let mut per_class_b = vec![0usize; 4];
        for (_, y) in &sub_b.examples {
            per_class_b[*y] += 1;
        }
        assert_eq!(per_class_b, vec![5, 5, 5, 5]);
        // same seed reproduces exactly
        assert_eq!(
            sub.examples,
            subsample_per_class(&ds, 5, 7).unwrap().examples
        );
    }

    #[test]
    fn subsample_insufficient_class_names_class() {
        let ds = toy_dataset(3, 2);
        let err = subsample_per_class(&ds, 4, 1).unwrap_err();
        assert!(err.to_string().contains("class 0"));
    }

    #[test]
    fn word_vectors_format_and_errors() {
        let corpus = vec![vec!["sports".to_string()]];
        let v = build_vocab(&corpus, 10, 1).unwrap();
        let f = write_tmp("sports 0.1 0.2\nworld 0.3 0.4\n");
        let wv = load_word_vectors(f.path(), &v, &["world".to_string()]).unwrap();
        assert_eq!(wv.dim, 2);
        assert_eq!(wv.vectors["sports"], vec![0.1, 0.2]);
        assert_eq!(wv.vectors["world"], vec![0.3, 0.4]);

        let ragged = write_tmp("a 0.1 0.2\nb 0.3\n");
        assert!(load_word_vectors(ragged.path(), &v, &[]).is_err());

        let f2 = write_tmp("sports 0.1 0.2\n");
        assert!(load_word_vectors(f2.path(), &v, &["absent".to_string()]).is_err());
    }

    #[test]
    fn vocab_round_trip_and_hash() {
        let corpus = vec![vec!["a".to_string(), "b".to_string()]];
        let v = build_vocab(&corpus, 10, 1).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        v.save(f.path()).unwrap();
        let v2 = Vocabulary::load(f.path()).unwrap();
        assert_eq!(v.tokens(), v2.tokens());
        assert_eq!(v.hash(), v2.hash());
    }

    #[test]
    fn encoded_dataset_round_trip() {
        let ds = Dataset {
            examples: vec![
                (Document { ids: vec![3, 4, EOS] }, 0),
                (Document { ids: vec![5, EOS] }, 2),
            ],
            num_classes: 3,
            name: "toy".into(),
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        save_encoded(&ds, f.path()).unwrap();
        let back = load_encoded(f.path()).unwrap();
        assert_eq!(back.num_classes, 3);
        assert_eq!(back.name, "toy");
        assert_eq!(back.examples, ds.examples);
    }

    #[test]
    fn encoded_loader_rejects_bad_input() {
        let write = |s: &str| {
            let f = tempfile::NamedTempFile::new().unwrap();
            std::fs::write(f.path(), s).unwrap();
            f
        };
        assert!(load_encoded(write("not a header\n1\t2 3\n").path()).is_err());
        assert!(load_encoded(write("# gdtc-encoded num_classes=2 name=x\n5\t3 2\n").path()).is_err());
        assert!(load_encoded(write("# gdtc-encoded num_classes=2 name=x\n1\ta b\n").path()).is_err());
    }

    #[test]
    fn raw_dev_split_is_disjoint_and_deterministic() {
        let examples: Vec<RawExample> = (0..20)
            .map(|i| RawExample {
                label: i % 2,
                text: format!("doc number {i}"),
            })
            .collect();
        let (tr, dv) = hold_out_dev_raw(&examples, 5, 7).unwrap();
        let (tr2, dv2) = hold_out_dev_raw(&examples, 5, 7).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(dv, dv2);
        assert_eq!(dv.len(), 5);
        assert_eq!(tr.len(), 15);
        for ex in &dv {
            assert!(!tr.contains(ex));
        }
        assert!(hold_out_dev_raw(&examples, 20, 7).is_err());
    }
}
