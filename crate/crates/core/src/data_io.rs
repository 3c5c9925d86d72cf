//! Dataset files, model/config serialization, and synthetic data.
//!
//! All files are UTF-8 with LF line endings and `.` as the decimal
//! separator. Floats are written with 17 significant digits so that
//! load(save(x)) reproduces every finite double exactly. Writes go through
//! a temp file plus rename, so partially written outputs never appear
//! under the target name.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed_net::EmbeddingNet;
use crate::error::{Error, Result};
use crate::sampling::{
    FeatureDataset, Histogram, PairRatingDataset, Quadruplet, RatedItem, RatedPair,
};
use crate::training::{RegressionHead, TrainConfig, TrainReport};

/// Parameters of the synthetic planted-score generator. A hidden scalar per
/// item drives both the rating and the (nonlinear) features, so the ground
/// truth an embedding should recover is known exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub feature_dim: usize,
    pub scale_n: u32,
    /// Rating noise, in rating units.
    pub noise_sigma: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_items: 2000,
            feature_dim: 8,
            scale_n: 5,
            noise_sigma: 0.1,
            feature_noise_sigma: 0.05,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_items < 10 {
            return Err(Error::InvalidConfig(format!(
                "n_items must be at least 10, got {}",
                self.n_items
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "feature_dim must be at least 2, got {}",
                self.feature_dim
            )));
        }
        if self.scale_n < 2 {
            return Err(Error::InvalidConfig(format!(
                "scale_n must be at least 2, got {}",
                self.scale_n
            )));
        }
        if !self.noise_sigma.is_finite()
            || self.noise_sigma < 0.0
            || !self.feature_noise_sigma.is_finite()
            || self.feature_noise_sigma < 0.0
        {
            return Err(Error::InvalidConfig("noise sigmas must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Box-Muller normal draw. Always consumes two uniforms, so the stream
/// layout does not depend on sigma.
fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn synth_items(spec: &SyntheticSpec) -> (Vec<RatedItem>, Vec<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let span = (spec.scale_n - 1) as f64;
    // Random mixing matrix from the 3 latent channels to feature space.
    let mix: Vec<[f64; 3]> = (0..spec.feature_dim)
        .map(|_| [normal(&mut rng, 1.0), normal(&mut rng, 1.0), normal(&mut rng, 1.0)])
        .collect();
    let mut items = Vec::with_capacity(spec.n_items);
    let mut latents = Vec::with_capacity(spec.n_items);
    for i in 0..spec.n_items {
        let z: f64 = rng.gen_range(0.0..=1.0);
        let eps = normal(&mut rng, spec.noise_sigma);
        let mos = (1.0 + z * span + eps).clamp(1.0, spec.scale_n as f64);
        let phi = [z, z * z, (std::f64::consts::TAU * z).sin()];
        let features = mix
            .iter()
            .map(|row| {
                row.iter().zip(&phi).map(|(r, p)| r * p).sum::<f64>()
                    + normal(&mut rng, spec.feature_noise_sigma)
            })
            .collect();
        items.push(RatedItem {
            id: format!("item_{i:05}"),
            features,
            mos,
        });
        latents.push(z);
    }
    (items, latents, rng)
}

/// Generate a planted-score dataset.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    Ok(generate_synthetic_with_latents(spec)?.0)
}

/// As [`generate_synthetic`], also returning the hidden scalars so tests
/// can measure how much of the planted signal a model recovers.
pub fn generate_synthetic_with_latents(
    spec: &SyntheticSpec,
) -> Result<(FeatureDataset, Vec<f64>)> {
    spec.validate()?;
    let (items, latents, _) = synth_items(spec);
    Ok((FeatureDataset::new(items, spec.scale_n)?, latents))
}

/// Generate a pairwise-similarity dataset with `refs` reference items and
/// `evals_per_ref` evaluated items each, carved out of the planted pool.
pub fn generate_synthetic_pairwise(
    spec: &SyntheticSpec,
    refs: usize,
    evals_per_ref: usize,
) -> Result<PairRatingDataset> {
    spec.validate()?;
    if refs == 0 || evals_per_ref == 0 {
        return Err(Error::InvalidConfig(
            "refs and evals_per_ref must be at least 1".into(),
        ));
    }
    let needed = refs
        .checked_mul(evals_per_ref + 1)
        .ok_or_else(|| Error::InvalidConfig("pairwise spec overflows".into()))?;
    if needed > spec.n_items {
        return Err(Error::InvalidConfig(format!(
            "refs * (evals_per_ref + 1) = {needed} exceeds n_items = {}",
            spec.n_items
        )));
    }
    let (all_items, latents, mut rng) = synth_items(spec);
    let span = (spec.scale_n - 1) as f64;
    let n = spec.scale_n as f64;
    let used = &all_items[..needed];
    let mut pairs = Vec::with_capacity(refs * evals_per_ref);
    for r in 0..refs {
        for e in 0..evals_per_ref {
            let ev = refs + r * evals_per_ref + e;
            let eps = normal(&mut rng, spec.noise_sigma);
            let similarity = (n - (latents[r] - latents[ev]).abs() * span + eps).clamp(1.0, n);
            pairs.push(RatedPair {
                ref_id: used[r].id.clone(),
                eval_id: used[ev].id.clone(),
                similarity,
            });
        }
    }
    PairRatingDataset::new(used.to_vec(), pairs, spec.scale_n)
}

/// 17-significant-digit rendering; round-trips every finite f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Write `bytes` to `path` via a temp file in the same directory plus an
/// atomic rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn parse_field_f64(path: &Path, line: u64, name: &str, raw: &str) -> Result<f64> {
    let value: f64 = raw
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("{name}: not a number: {raw:?}")))?;
    if !value.is_finite() {
        return Err(parse_err(path, line, format!("{name}: non-finite value {raw:?}")));
    }
    Ok(value)
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(format!(
                "{}: {e}",
                path.display()
            ))),
            _ => parse_err(path, 0, e.to_string()),
        })
}

fn check_header(path: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    let fields: Vec<&str> = got.iter().collect();
    if fields != want {
        return Err(parse_err(
            path,
            1,
            format!("bad header: expected {want:?}, got {fields:?}"),
        ));
    }
    Ok(())
}

/// Write a FeatureDataset CSV with header `id,mos,f0,...,fD`.
pub fn save_feature_dataset(ds: &FeatureDataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header = vec!["id".to_string(), "mos".to_string()];
        header.extend((0..ds.feature_dim()).map(|i| format!("f{i}")));
        w.write_record(&header).map_err(io_of_csv)?;
        for item in &ds.items {
            let mut record = vec![item.id.clone(), fmt_f64(item.mos)];
            record.extend(item.features.iter().map(|&f| fmt_f64(f)));
            w.write_record(&record).map_err(io_of_csv)?;
        }
        w.flush()?;
    }
    atomic_write(path, &buf)
}

fn io_of_csv(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Load a FeatureDataset CSV. The rating scale is not part of the file
/// format and must be supplied by the caller.
pub fn load_feature_dataset(path: &Path, scale_n: u32) -> Result<FeatureDataset> {
    let mut reader = csv_reader(path)?;
    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let fields: Vec<&str> = header.iter().collect();
    if fields.len() < 2 || fields[0] != "id" || fields[1] != "mos" {
        return Err(parse_err(
            path,
            1,
            format!("bad header: expected id,mos,f0,...  got {fields:?}"),
        ));
    }
    let dim = fields.len() - 2;
    for (i, name) in fields[2..].iter().enumerate() {
        if *name != format!("f{i}") {
            return Err(parse_err(path, 1, format!("bad feature column name {name:?}")));
        }
    }
    let mut items = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = record_line(&record);
        if record.len() != dim + 2 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, got {}", dim + 2, record.len()),
            ));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(parse_err(path, line, "empty id"));
        }
        let mos = parse_field_f64(path, line, "mos", &record[1])?;
        if mos < 1.0 || mos > scale_n as f64 {
            return Err(parse_err(
                path,
                line,
                format!("mos {mos} outside [1, {scale_n}]"),
            ));
        }
        let mut features = Vec::with_capacity(dim);
        for (i, raw) in record.iter().skip(2).enumerate() {
            features.push(parse_field_f64(path, line, &format!("f{i}"), raw)?);
        }
        items.push(RatedItem { id, features, mos });
    }
    FeatureDataset::new(items, scale_n)
}

/// Write a pairs CSV with header `ref_id,eval_id,similarity`.
pub fn save_pairs(pairs: &[RatedPair], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["ref_id", "eval_id", "similarity"]).map_err(io_of_csv)?;
        for pair in pairs {
            w.write_record([
                pair.ref_id.as_str(),
                pair.eval_id.as_str(),
                &fmt_f64(pair.similarity),
            ])
            .map_err(io_of_csv)?;
        }
        w.flush()?;
    }
    atomic_write(path, &buf)
}

pub fn load_pairs(path: &Path, scale_n: u32) -> Result<Vec<RatedPair>> {
    let mut reader = csv_reader(path)?;
    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    check_header(path, &header, &["ref_id", "eval_id", "similarity"])?;
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = record_line(&record);
        if record.len() != 3 {
            return Err(parse_err(
                path,
                line,
                format!("expected 3 fields, got {}", record.len()),
            ));
        }
        let similarity = parse_field_f64(path, line, "similarity", &record[2])?;
        if similarity < 1.0 || similarity > scale_n as f64 {
            return Err(parse_err(
                path,
                line,
                format!("similarity {similarity} outside [1, {scale_n}]"),
            ));
        }
        pairs.push(RatedPair {
            ref_id: record[0].to_string(),
            eval_id: record[1].to_string(),
            similarity,
        });
    }
    Ok(pairs)
}

/// Load a PairRatingDataset from an items CSV plus a pairs CSV.
pub fn load_pair_dataset(
    items_path: &Path,
    pairs_path: &Path,
    scale_n: u32,
) -> Result<PairRatingDataset> {
    let items = load_feature_dataset(items_path, scale_n)?;
    let pairs = load_pairs(pairs_path, scale_n)?;
    PairRatingDataset::new(items.items, pairs, scale_n)
}

/// Write a quadruplet CSV with header
/// `anchor_id,positive_id,negative_id,margin`.
pub fn save_quadruplets(quads: &[Quadruplet], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["anchor_id", "positive_id", "negative_id", "margin"])
            .map_err(io_of_csv)?;
        for quad in quads {
            quad.validate()?;
            w.write_record([
                quad.anchor_id.as_str(),
                quad.positive_id.as_str(),
                quad.negative_id.as_str(),
                &fmt_f64(quad.margin),
            ])
            .map_err(io_of_csv)?;
        }
        w.flush()?;
    }
    atomic_write(path, &buf)
}

pub fn load_quadruplets(path: &Path) -> Result<Vec<Quadruplet>> {
    let mut reader = csv_reader(path)?;
    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    check_header(
        path,
        &header,
        &["anchor_id", "positive_id", "negative_id", "margin"],
    )?;
    let mut quads = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = record_line(&record);
        if record.len() != 4 {
            return Err(parse_err(
                path,
                line,
                format!("expected 4 fields, got {}", record.len()),
            ));
        }
        let quad = Quadruplet {
            anchor_id: record[0].to_string(),
            positive_id: record[1].to_string(),
            negative_id: record[2].to_string(),
            margin: parse_field_f64(path, line, "margin", &record[3])?,
        };
        quad.validate()
            .map_err(|e| parse_err(path, line, e.to_string()))?;
        quads.push(quad);
    }
    Ok(quads)
}

/// Margin histogram CSV with header `bin_lo,bin_hi,count`.
pub fn save_histogram(hist: &Histogram, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["bin_lo", "bin_hi", "count"]).map_err(io_of_csv)?;
        for (i, &count) in hist.counts.iter().enumerate() {
            w.write_record([
                fmt_f64(hist.edges[i]),
                fmt_f64(hist.edges[i + 1]),
                count.to_string(),
            ])
            .map_err(io_of_csv)?;
        }
        w.flush()?;
    }
    atomic_write(path, &buf)
}

/// Embedding net plus optional regression head, as stored on disk. The net
/// fields are inlined so the document reads
/// `{"layers":[{"w":..,"b":..}],"activation":..,"embed_dim":..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(flatten)]
    pub net: EmbeddingNet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression_head: Option<RegressionHead>,
}

/// Serialize any value as pretty JSON with a trailing newline.
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn save_model(model: &ModelFile, path: &Path) -> Result<()> {
    model.net.validate()?;
    if let Some(head) = &model.regression_head {
        head.validate()?;
    }
    save_json(model, path)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let text = fs::read_to_string(path)?;
    let model: ModelFile = serde_json::from_str(&text)?;
    model.net.validate()?;
    if let Some(head) = &model.regression_head {
        head.validate()?;
        if head.w.len() != model.net.embed_dim {
            return Err(Error::InvalidInput(format!(
                "regression head dim {} does not match embed_dim {}",
                head.w.len(),
                model.net.embed_dim
            )));
        }
    }
    Ok(model)
}

pub fn save_train_config(cfg: &TrainConfig, path: &Path) -> Result<()> {
    cfg.validate()?;
    save_json(cfg, path)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: TrainConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_train_report(report: &TrainReport, path: &Path) -> Result<()> {
    save_json(report, path)
}

pub fn load_train_report(path: &Path) -> Result<TrainReport> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_synthetic_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = fs::read_to_string(path)?;
    let spec: SyntheticSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    Ok(spec)
}
