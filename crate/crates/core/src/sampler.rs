//! Session streams and episodic sampling.
//!
//! A stream is an ordered list of sessions with disjoint label sets: one
//! large base session followed by n-way, k-shot incremental sessions. During
//! an incremental session every training step draws an [`Episode`]: a few
//! classes, each with a positive support set, a disjoint query set and a
//! pair of distinct negative prototypes taken either from other classes of
//! the current session or from the prototype bank.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bank::{compute_prototype, PrototypeBank};
use crate::error::{config, contract, Error, Result};
use crate::extractor::Mlp;
use crate::rng::{streams, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub label: usize,
    pub features: Vec<f64>,
}

/// The labelled samples available in one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionDataset {
    /// 1-based session index; session 1 is the base session.
    pub session: usize,
    pub samples: Vec<Sample>,
    /// Sorted label set of the session.
    pub labels: Vec<usize>,
}

impl SessionDataset {
    pub fn new(session: usize, samples: Vec<Sample>, labels: Vec<usize>) -> Result<Self> {
        let mut labels = labels;
        labels.sort_unstable();
        labels.dedup();
        let known: BTreeSet<usize> = labels.iter().copied().collect();
        if let Some(s) = samples.iter().find(|s| !known.contains(&s.label)) {
            return Err(Error::Data(format!(
                "session {session}: sample label {} is not in the session's label set",
                s.label
            )));
        }
        Ok(Self {
            session,
            samples,
            labels,
        })
    }

    /// Sample indices grouped by label, in label order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> =
            self.labels.iter().map(|&l| (l, Vec::new())).collect();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.label).or_default().push(i);
        }
        map
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }
}

/// Train and test splits for every session, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionStream {
    pub input_dim: usize,
    pub train: Vec<SessionDataset>,
    pub test: Vec<SessionDataset>,
}

impl SessionStream {
    pub fn sessions(&self) -> usize {
        self.train.len()
    }

    pub fn total_classes(&self) -> usize {
        self.train.iter().map(|s| s.labels.len()).sum()
    }

    /// Checks label disjointness across sessions, matching train/test label
    /// sets and feature widths.
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Data("stream has no sessions".into()));
        }
        if self.train.len() != self.test.len() {
            return Err(Error::Data("train and test session counts differ".into()));
        }
        let mut seen = BTreeSet::new();
        for (tr, te) in self.train.iter().zip(&self.test) {
            if tr.labels != te.labels {
                return Err(Error::Data(format!(
                    "session {}: train and test label sets differ",
                    tr.session
                )));
            }
            for &l in &tr.labels {
                if !seen.insert(l) {
                    return Err(Error::Data(format!("label {l} appears in two sessions")));
                }
            }
            for s in tr.samples.iter().chain(&te.samples) {
                if s.features.len() != self.input_dim {
                    return Err(Error::Data(format!(
                        "session {}: sample with {} features, expected {}",
                        tr.session,
                        s.features.len(),
                        self.input_dim
                    )));
                }
                if s.features.iter().any(|f| !f.is_finite()) {
                    return Err(Error::Data("non-finite feature value".into()));
                }
            }
        }
        Ok(())
    }
}

fn default_base_train() -> usize {
    60
}

fn default_test() -> usize {
    20
}

/// Synthetic Gaussian-mixture stream. Each class is an isotropic Gaussian
/// with standard deviation `sqrt(variance)`; class means sit at distance
/// `separation · σ` from the origin along independent random directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub base_classes: usize,
    /// Number of incremental sessions after the base session.
    pub sessions: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub variance: f64,
    #[serde(default = "default_base_train")]
    pub base_train_per_class: usize,
    #[serde(default = "default_test")]
    pub test_per_class: usize,
    /// Size of the class pool; defaults to exactly what the partition needs.
    #[serde(default)]
    pub total_classes: Option<usize>,
}

impl StreamSpec {
    pub fn required_classes(&self) -> usize {
        self.base_classes + self.sessions * self.n_way
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_classes == 0 || self.input_dim == 0 {
            return Err(config("base_classes and input_dim must be positive"));
        }
        if self.sessions > 0 && (self.n_way == 0 || self.k_shot == 0) {
            return Err(config("incremental sessions need n_way > 0 and k_shot > 0"));
        }
        if let Some(total) = self.total_classes {
            if self.required_classes() > total {
                return Err(config(format!(
                    "{} base classes plus {}x{} incremental classes exceed the {total} available",
                    self.base_classes, self.sessions, self.n_way
                )));
            }
        }
        if !(self.variance > 0.0) || !(self.separation >= 0.0) {
            return Err(config("variance must be positive and separation nonnegative"));
        }
        if self.base_train_per_class == 0 || self.test_per_class == 0 {
            return Err(config("per-class sample counts must be positive"));
        }
        Ok(())
    }
}

/// Generates the synthetic stream for `spec`. The class pool is permuted
/// and cut into the base label set followed by `sessions` blocks of `n_way`.
pub fn make_session_stream(spec: &StreamSpec, seed: u64) -> Result<SessionStream> {
    spec.validate()?;
    let mut rng = Rng::new(seed, streams::DATA);
    let total = spec.required_classes();
    let sigma = spec.variance.sqrt();
    let means: Vec<Vec<f64>> = (0..total)
        .map(|_| {
            let dir: Vec<f64> = (0..spec.input_dim).map(|_| rng.normal()).collect();
            let n = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
            dir.iter().map(|d| spec.separation * sigma * d / n).collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut order);

    let mut blocks: Vec<Vec<usize>> = vec![order[..spec.base_classes].to_vec()];
    for s in 0..spec.sessions {
        let start = spec.base_classes + s * spec.n_way;
        blocks.push(order[start..start + spec.n_way].to_vec());
    }

    let draw = |label: usize, n: usize, rng: &mut Rng| -> Vec<Sample> {
        (0..n)
            .map(|_| Sample {
                label,
                features: means[label].iter().map(|m| m + sigma * rng.normal()).collect(),
            })
            .collect()
    };

    let mut train = Vec::with_capacity(blocks.len());
    let mut test = Vec::with_capacity(blocks.len());
    for (i, labels) in blocks.into_iter().enumerate() {
        let mut labels = labels;
        labels.sort_unstable();
        let per_class = if i == 0 {
            spec.base_train_per_class
        } else {
            spec.k_shot
        };
        let mut tr = Vec::new();
        let mut te = Vec::new();
        for &l in &labels {
            tr.extend(draw(l, per_class, &mut rng));
            te.extend(draw(l, spec.test_per_class, &mut rng));
        }
        train.push(SessionDataset::new(i + 1, tr, labels.clone())?);
        test.push(SessionDataset::new(i + 1, te, labels)?);
    }
    let stream = SessionStream {
        input_dim: spec.input_dim,
        train,
        test,
    };
    stream.validate()?;
    Ok(stream)
}

/// Episode shape: `N^C` classes, `N_S` support and `N_Q` query samples per
/// class, and the chance of taking both negatives from the bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub classes_per_episode: usize,
    pub support: usize,
    pub query: usize,
    pub p_bank_negative: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            classes_per_episode: 3,
            support: 2,
            query: 3,
            p_bank_negative: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    CurrentSession,
    Bank,
}

/// One class of an episode with its quadruplet roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeClass {
    pub class_id: usize,
    /// Sample indices of the positive support set `S_kp`.
    pub support: Vec<usize>,
    /// Sample indices of the query set `Q_k`, disjoint from `support`.
    pub query: Vec<usize>,
    pub negative_ids: (usize, usize),
    pub source: NegativeSource,
    /// Support indices used for current-session negatives (empty for bank negatives).
    pub negative_support: (Vec<usize>, Vec<usize>),
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub second_negative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub session: usize,
    pub classes: Vec<EpisodeClass>,
}

fn embed_mean(mlp: &Mlp, data: &SessionDataset, idx: &[usize]) -> Result<Vec<f64>> {
    let embs = idx
        .iter()
        .map(|&i| mlp.forward(&data.samples[i].features))
        .collect::<Result<Vec<_>>>()?;
    compute_prototype(&embs)
}

/// Draws one episode from `data`. Prototypes are computed with the current
/// network; bank negatives use the newest stored copy of two distinct
/// previously seen classes.
pub fn sample_episode(
    data: &SessionDataset,
    mlp: &Mlp,
    bank: &PrototypeBank,
    rng: &mut Rng,
    cfg: &EpisodeConfig,
) -> Result<Episode> {
    if cfg.support == 0 || cfg.query == 0 {
        return Err(contract("episodes need at least one support and one query sample"));
    }
    if !(0.0..=1.0).contains(&cfg.p_bank_negative) {
        return Err(config("p_bank_negative must lie in [0, 1]"));
    }
    let by_class = data.by_class();
    if cfg.classes_per_episode == 0 || cfg.classes_per_episode > by_class.len() {
        return Err(config(format!(
            "{} classes per episode requested but session {} has {}",
            cfg.classes_per_episode,
            data.session,
            by_class.len()
        )));
    }
    for (label, idx) in &by_class {
        if idx.len() < cfg.support + cfg.query {
            return Err(config(format!(
                "class {label} has {} samples, an episode needs {} support + {} query",
                idx.len(),
                cfg.support,
                cfg.query
            )));
        }
    }
    let bank_ready = data.session > 1 && bank.len() >= 2;
    let current_ready = cfg.classes_per_episode >= 3;
    if !bank_ready && !current_ready {
        return Err(config(
            "negatives need either 3 classes per episode or 2 stored prototypes",
        ));
    }

    let labels: Vec<usize> = by_class.keys().copied().collect();
    let chosen = rng.sample(&labels, cfg.classes_per_episode);
    let bank_ids = bank.class_ids();
    let mut classes = Vec::with_capacity(chosen.len());
    for (pos, &k) in chosen.iter().enumerate() {
        let pool = &by_class[&k];
        let support = rng.sample(pool, cfg.support);
        let rest: Vec<usize> = pool.iter().copied().filter(|i| !support.contains(i)).collect();
        let query = rng.sample(&rest, cfg.query);
        let use_bank = bank_ready && (!current_ready || rng.bernoulli(cfg.p_bank_negative));
        let positive = embed_mean(mlp, data, &support)?;
        let class = if use_bank {
            let pair = rng.sample(&bank_ids, 2);
            let get = |id: usize| {
                bank.class(id)
                    .map(|h| h.newest().to_vec())
                    .ok_or_else(|| contract("bank class vanished"))
            };
            EpisodeClass {
                class_id: k,
                support,
                query,
                negative_ids: (pair[0], pair[1]),
                source: NegativeSource::Bank,
                negative_support: (Vec::new(), Vec::new()),
                positive,
                negative: get(pair[0])?,
                second_negative: get(pair[1])?,
            }
        } else {
            let others: Vec<usize> = (0..chosen.len()).filter(|&j| j != pos).collect();
            let pair = rng.sample(&others, 2);
            let (k1, k2) = (chosen[pair[0]], chosen[pair[1]]);
            let s1 = rng.sample(&by_class[&k1], cfg.support);
            let s2 = rng.sample(&by_class[&k2], cfg.support);
            let negative = embed_mean(mlp, data, &s1)?;
            let second_negative = embed_mean(mlp, data, &s2)?;
            EpisodeClass {
                class_id: k,
                support,
                query,
                negative_ids: (k1, k2),
                source: NegativeSource::CurrentSession,
                negative_support: (s1, s2),
                positive,
                negative,
                second_negative,
            }
        };
        classes.push(class);
    }
    Ok(Episode {
        session: data.session,
        classes,
    })
}

/// Labels of each session, as stored in the sidecar manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub input_dim: usize,
    /// `sessions[0]` is the base session.
    pub sessions: Vec<Vec<usize>>,
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
}

/// Reads `label,f0,...,f{D-1}` rows.
pub fn read_features_csv(r: impl Read, input_dim: usize) -> Result<Vec<Sample>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = reader
        .headers()
        .map_err(|e| Error::Data(e.to_string()))?
        .clone();
    let expected: Vec<String> = std::iter::once("label".to_string())
        .chain((0..input_dim).map(|i| format!("f{i}")))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Data(format!(
            "feature CSV header must be label,f0,...,f{}",
            input_dim.saturating_sub(1)
        )));
    }
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        let bad = |what: &str| Error::Data(format!("row {}: malformed {what}", line + 2));
        let label = rec[0].trim().parse::<usize>().map_err(|_| bad("label"))?;
        let features = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad("feature")))
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample { label, features });
    }
    Ok(out)
}

pub fn write_features_csv<'a>(
    w: impl Write,
    input_dim: usize,
    samples: impl IntoIterator<Item = &'a Sample>,
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..input_dim).map(|i| format!("f{i}")))
        .collect();
    let io = |e: csv::Error| Error::Data(e.to_string());
    writer.write_record(&header).map_err(io)?;
    for s in samples {
        let row: Vec<String> = std::iter::once(s.label.to_string())
            .chain(s.features.iter().map(|f| f.to_string()))
            .collect();
        writer.write_record(&row).map_err(io)?;
    }
    writer.flush()?;
    Ok(())
}

fn split_by_manifest(samples: Vec<Sample>, manifest: &Manifest) -> Result<Vec<SessionDataset>> {
    let mut owner = BTreeMap::new();
    for (s, labels) in manifest.sessions.iter().enumerate() {
        for &l in labels {
            if owner.insert(l, s).is_some() {
                return Err(Error::Data(format!("label {l} is assigned to two sessions")));
            }
        }
    }
    let mut buckets: Vec<Vec<Sample>> = vec![Vec::new(); manifest.sessions.len()];
    for sample in samples {
        let s = *owner.get(&sample.label).ok_or_else(|| {
            Error::Data(format!("label {} is not assigned to any session", sample.label))
        })?;
        buckets[s].push(sample);
    }
    buckets
        .into_iter()
        .zip(&manifest.sessions)
        .enumerate()
        .map(|(i, (b, labels))| SessionDataset::new(i + 1, b, labels.clone()))
        .collect()
}

/// Loads a stream from a manifest; CSV paths are relative to the manifest.
pub fn load_stream(manifest_path: &Path) -> Result<SessionStream> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let read = |p: &Path| -> Result<Vec<Sample>> {
        read_features_csv(fs::File::open(dir.join(p))?, manifest.input_dim)
    };
    let stream = SessionStream {
        input_dim: manifest.input_dim,
        train: split_by_manifest(read(&manifest.train_csv)?, &manifest)?,
        test: split_by_manifest(read(&manifest.test_csv)?, &manifest)?,
    };
    stream.validate()?;
    Ok(stream)
}

/// Writes `train.csv`, `test.csv` and `manifest.json` into `dir`.
pub fn write_stream(stream: &SessionStream, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        input_dim: stream.input_dim,
        sessions: stream.train.iter().map(|s| s.labels.clone()).collect(),
        train_csv: "train.csv".into(),
        test_csv: "test.csv".into(),
    };
    write_features_csv(
        fs::File::create(dir.join("train.csv"))?,
        stream.input_dim,
        stream.train.iter().flat_map(|s| &s.samples),
    )?;
    write_features_csv(
        fs::File::create(dir.join("test.csv"))?,
        stream.input_dim,
        stream.test.iter().flat_map(|s| &s.samples),
    )?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}
