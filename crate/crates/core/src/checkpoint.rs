//! Binary checkpoints for the parameterized models: every parameter's
//! name, shape, values, and AdaGrad accumulator, little-endian f64, plus
//! the vocabulary hash so a checkpoint refuses to load against the wrong
//! vocabulary. Round trips are bit-exact.

use crate::error::{Error, Result};
use crate::experiments::FittedModel;
use crate::models::{DiscModel, IndepGenModel, SharedGenModel};
use crate::tape::ParamSet;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"GDTCCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub accum: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_kind: String,
    pub vocab_hash: String,
    pub class_names: Vec<String>,
    /// Non-parameter state such as the class log-prior.
    pub extras: Vec<(String, Vec<f64>)>,
    pub params: Vec<SavedParam>,
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len > 1 << 24 {
        return Err(Error::Checkpoint(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("bad utf8: {e}")))
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    w.write_u64::<LittleEndian>(xs.len() as u64)?;
    for &x in xs {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read) -> Result<Vec<f64>> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len > 1 << 32 {
        return Err(Error::Checkpoint(format!("implausible vector length {len}")));
    }
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(r.read_f64::<LittleEndian>()?);
    }
    Ok(out)
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    write_string(&mut w, &ckpt.model_kind)?;
    write_string(&mut w, &ckpt.vocab_hash)?;
    w.write_u64::<LittleEndian>(ckpt.class_names.len() as u64)?;
    for name in &ckpt.class_names {
        write_string(&mut w, name)?;
    }
    w.write_u64::<LittleEndian>(ckpt.extras.len() as u64)?;
    for (name, xs) in &ckpt.extras {
        write_string(&mut w, name)?;
        write_f64s(&mut w, xs)?;
    }
    w.write_u64::<LittleEndian>(ckpt.params.len() as u64)?;
    for p in &ckpt.params {
        write_string(&mut w, &p.name)?;
        w.write_u64::<LittleEndian>(p.rows as u64)?;
        w.write_u64::<LittleEndian>(p.cols as u64)?;
        if p.value.len() != p.rows * p.cols || p.accum.len() != p.rows * p.cols {
            return Err(Error::Checkpoint(format!("param {} shape mismatch", p.name)));
        }
        write_f64s(&mut w, &p.value)?;
        write_f64s(&mut w, &p.accum)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let model_kind = read_string(&mut r)?;
    let vocab_hash = read_string(&mut r)?;
    let n_classes = r.read_u64::<LittleEndian>()? as usize;
    let class_names = (0..n_classes)
        .map(|_| read_string(&mut r))
        .collect::<Result<Vec<_>>>()?;
    let n_extras = r.read_u64::<LittleEndian>()? as usize;
    let mut extras = Vec::with_capacity(n_extras);
    for _ in 0..n_extras {
        let name = read_string(&mut r)?;
        extras.push((name, read_f64s(&mut r)?));
    }
    let n_params = r.read_u64::<LittleEndian>()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = read_string(&mut r)?;
        let rows = r.read_u64::<LittleEndian>()? as usize;
        let cols = r.read_u64::<LittleEndian>()? as usize;
        let value = read_f64s(&mut r)?;
        let accum = read_f64s(&mut r)?;
        if value.len() != rows * cols || accum.len() != rows * cols {
            return Err(Error::Checkpoint(format!("param {name} shape mismatch")));
        }
        params.push(SavedParam {
            name,
            rows,
            cols,
            value,
            accum,
        });
    }
    Ok(Checkpoint {
        model_kind,
        vocab_hash,
        class_names,
        extras,
        params,
    })
}

fn dump_params(ps: &ParamSet, prefix: &str) -> Vec<SavedParam> {
    ps.iter()
        .map(|p| SavedParam {
            name: format!("{prefix}{}", p.name),
            rows: p.value.rows(),
            cols: p.value.cols(),
            value: p.value.as_slice().to_vec(),
            accum: p.accum.as_slice().to_vec(),
        })
        .collect()
}

/// Overwrite every parameter of `ps` from saved entries named
/// `prefix + name`, checking shapes. Errors on any missing entry.
fn apply_params(ps: &mut ParamSet, saved: &[SavedParam], prefix: &str) -> Result<()> {
    for id in ps.ids() {
        let want = format!("{prefix}{}", ps.get(id).name);
        let found = saved
            .iter()
            .find(|s| s.name == want)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{want}`")))?;
        let p = ps.get_mut(id);
        if found.rows != p.value.rows() || found.cols != p.value.cols() {
            return Err(Error::Checkpoint(format!(
                "parameter `{want}` has shape {}x{}, expected {}x{}",
                found.rows,
                found.cols,
                p.value.rows(),
                p.value.cols()
            )));
        }
        p.value.as_mut_slice().copy_from_slice(&found.value);
        p.accum.as_mut_slice().copy_from_slice(&found.accum);
    }
    Ok(())
}

/// Checkpoint a fitted parameterized model. Count-based models persist
/// through their count-table text dumps instead.
pub fn save_model(
    model: &FittedModel,
    vocab_hash: &str,
    class_names: &[String],
    path: &Path,
) -> Result<()> {
    let (kind, extras, params) = match model {
        FittedModel::Disc(m) => ("disc".to_string(), Vec::new(), dump_params(&m.ps, "")),
        FittedModel::GenShared(m) => (
            "gen-shared".to_string(),
            vec![("log_prior".to_string(), m.log_prior.clone())],
            dump_params(&m.ps, ""),
        ),
        FittedModel::GenIndep(m) => {
            let mut params = Vec::new();
            for (y, lm) in m.per_class.iter().enumerate() {
                params.extend(dump_params(&lm.ps, &format!("class{y}.")));
            }
            (
                "gen-indep".to_string(),
                vec![("log_prior".to_string(), m.log_prior.clone())],
                params,
            )
        }
        FittedModel::MlpNaiveBayes(m) => (
            "mlp-naive-bayes".to_string(),
            vec![("log_prior".to_string(), m.log_prior.clone())],
            dump_params(&m.ps, ""),
        ),
        FittedModel::NaiveBayes(_) | FittedModel::KneserNey(_) => {
            return Err(Error::Checkpoint(
                "count-based models are persisted as count tables, not checkpoints".into(),
            ))
        }
    };
    save(
        &Checkpoint {
            model_kind: kind,
            vocab_hash: vocab_hash.to_string(),
            class_names: class_names.to_vec(),
            extras,
            params,
        },
        path,
    )
}

fn find_param<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<&'a SavedParam> {
    ckpt.params
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
}

fn extra<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<&'a [f64]> {
    ckpt.extras
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| v.as_slice())
        .ok_or_else(|| Error::Checkpoint(format!("missing extra `{name}`")))
}

/// Rebuild a fitted model from a checkpoint, refusing a vocabulary hash
/// mismatch. Dimensions come from the stored parameter shapes.
pub fn load_model(path: &Path, expected_vocab_hash: &str) -> Result<(FittedModel, Vec<String>)> {
    let ckpt = load(path)?;
    if ckpt.vocab_hash != expected_vocab_hash {
        return Err(Error::Checkpoint(format!(
            "vocabulary hash mismatch: checkpoint has {}, current vocabulary is {}",
            ckpt.vocab_hash, expected_vocab_hash
        )));
    }
    let k = ckpt.class_names.len().max(1);
    let model = match ckpt.model_kind.as_str() {
        "disc" => {
            let emb = find_param(&ckpt, "emb")?;
            let v = find_param(&ckpt, "softmax.v")?;
            let mut m = DiscModel::new(emb.rows, v.cols, emb.cols, v.rows, 0);
            apply_params(&mut m.ps, &ckpt.params, "")?;
            FittedModel::Disc(m)
        }
        "gen-shared" => {
            let emb = find_param(&ckpt, "emb")?;
            let u = find_param(&ckpt, "u")?;
            let mut m = SharedGenModel::new(emb.rows, k, emb.cols, u.cols / 2, 0);
            apply_params(&mut m.ps, &ckpt.params, "")?;
            m.log_prior = extra(&ckpt, "log_prior")?.to_vec();
            FittedModel::GenShared(m)
        }
        "gen-indep" => {
            let emb = find_param(&ckpt, "class0.emb")?;
            let u = find_param(&ckpt, "class0.u")?;
            let mut m = IndepGenModel::new(emb.rows, k, emb.cols, u.cols, 0);
            for (y, lm) in m.per_class.iter_mut().enumerate() {
                apply_params(&mut lm.ps, &ckpt.params, &format!("class{y}."))?;
            }
            m.log_prior = extra(&ckpt, "log_prior")?.to_vec();
            FittedModel::GenIndep(m)
        }
        "mlp-naive-bayes" => {
            let w1 = find_param(&ckpt, "w1")?;
            let w2 = find_param(&ckpt, "w2")?;
            let mut m =
                crate::baselines::MlpNaiveBayesModel::new(w2.rows, k, w1.cols, w1.rows, 0);
            apply_params(&mut m.ps, &ckpt.params, "")?;
            m.log_prior = extra(&ckpt, "log_prior")?.to_vec();
            m.refresh_cache()?;
            FittedModel::MlpNaiveBayes(m)
        }
        other => {
            return Err(Error::Checkpoint(format!("unknown model kind `{other}`")))
        }
    };
    Ok((model, ckpt.class_names))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::experiments::{fit_model, ModelKind};
    use crate::synth;

    fn quick_cfg() -> Config {
        let mut cfg = Config::fixture_preset();
        cfg.embed_dim = 4;
        cfg.hidden_dim = 4;
        cfg.opt.max_epochs = 2;
        cfg.opt.patience = 2;
        cfg.mlp_epochs = 10;
        cfg
    }

    fn round_trip(kind: ModelKind) {
        let fx = synth::fixture_f1();
        let cfg = quick_cfg();
        let (model, _) = fit_model(kind, &fx.train, &fx.dev, fx.vocab.size(), &cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &fx.vocab.hash(), &fx.class_names, &path).unwrap();
        let (loaded, names) = load_model(&path, &fx.vocab.hash()).unwrap();
        assert_eq!(names, fx.class_names);
        // bit-exact: identical predictions and identical re-serialization
        for (doc, _) in &fx.test.examples {
            assert_eq!(model.predict(doc).unwrap(), loaded.predict(doc).unwrap());
        }
        let path2 = dir.path().join("model2.ckpt");
        save_model(&loaded, &fx.vocab.hash(), &fx.class_names, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap(),
            "round trip not bit-exact for {kind:?}"
        );
    }

    #[test]
    fn disc_round_trip_bit_exact() {
        round_trip(ModelKind::Disc);
    }

    #[test]
    fn gen_shared_round_trip_bit_exact() {
        round_trip(ModelKind::GenShared);
    }

    #[test]
    fn gen_indep_round_trip_bit_exact() {
        round_trip(ModelKind::GenIndep);
    }

    #[test]
    fn mlp_round_trip_bit_exact() {
        round_trip(ModelKind::MlpNaiveBayes);
    }

    #[test]
    fn vocab_hash_mismatch_refuses_to_load() {
        let fx = synth::fixture_f1();
        let cfg = quick_cfg();
        let (model, _) =
            fit_model(ModelKind::Disc, &fx.train, &fx.dev, fx.vocab.size(), &cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &fx.vocab.hash(), &fx.class_names, &path).unwrap();
        match load_model(&path, "not-the-hash") {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("hash mismatch"), "{msg}"),
            Err(other) => panic!("expected checkpoint error, got {other:?}"),
            Ok(_) => panic!("load should refuse a wrong vocabulary hash"),
        }
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn count_models_are_not_checkpointable() {
        let fx = synth::fixture_f1();
        let cfg = quick_cfg();
        let (model, _) = fit_model(
            ModelKind::NaiveBayes,
            &fx.train,
            &fx.dev,
            fx.vocab.size(),
            &cfg,
            3,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nb.ckpt");
        assert!(save_model(&model, &fx.vocab.hash(), &fx.class_names, &path).is_err());
    }
}
