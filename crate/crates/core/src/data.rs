//! Datasets: synthetic low-rank generation, delimited-table ingestion with
//! mean imputation, and vertical partitioning into agent blocks.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::kernels::FeatureBlock;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synthetic { seed: u64 },
    File(PathBuf),
    Derived(String),
}

/// `M` features by `T` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub values: DMatrix<f64>,
    pub labels: Option<Vec<String>>,
    pub provenance: Provenance,
    pub centered: bool,
}

impl Dataset {
    pub fn new(values: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::input(format!("dataset must be non-empty, got {}x{}", values.nrows(), values.ncols())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("dataset has non-finite entries"));
        }
        Ok(Dataset { values, labels: None, provenance, centered: false })
    }

    pub fn features(&self) -> usize {
        self.values.nrows()
    }

    pub fn samples(&self) -> usize {
        self.values.ncols()
    }

    /// Per-feature mean subtraction.
    pub fn centered(&self) -> Dataset {
        let mut values = self.values.clone();
        for mut row in values.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
        Dataset { values, centered: true, ..self.clone() }
    }

    /// Keeps the listed samples, in order. The result is no longer flagged
    /// as centered.
    pub fn select_samples(&self, columns: &[usize]) -> Result<Dataset> {
        if columns.is_empty() || columns.iter().any(|&c| c >= self.samples()) {
            return Err(Error::input("sample selection out of range"));
        }
        let labels = self.labels.as_ref().map(|l| columns.iter().map(|&c| l[c].clone()).collect());
        Ok(Dataset {
            values: self.values.select_columns(columns),
            labels,
            provenance: Provenance::Derived(format!("{} of {} samples", columns.len(), self.samples())),
            centered: false,
        })
    }
}

/// Parameters of the low-rank-plus-noise generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub features: usize,
    pub samples: usize,
    pub rank: usize,
    /// Singular value `k` (1-based) is `decay^(k-1)`.
    pub decay: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams { features: 1000, samples: 400, rank: 10, decay: 0.9, noise: 0.0, seed: 0 }
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `X = A diag(s) Bᵀ + (noise / √M) N` with orthonormal `A` (`M × r`) and
/// `B` (`T × r`), `s_k = decay^(k-1)` and i.i.d. standard normal `N`; rows are
/// then centered.
pub fn synth_lowrank(params: &SynthParams) -> Result<Dataset> {
    let SynthParams { features: m, samples: t, rank: r, decay, noise, seed } = *params;
    if m == 0 || t == 0 {
        return Err(Error::input("synthetic data needs at least one feature and one sample"));
    }
    if r == 0 || r > m.min(t) {
        return Err(Error::input(format!("rank {r} must lie in 1..={}", m.min(t))));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::input(format!("noise level must be non-negative, got {noise}")));
    }
    if !(decay.is_finite() && decay > 0.0) {
        return Err(Error::input(format!("decay must be positive, got {decay}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = gaussian(m, r, &mut rng).qr().q();
    let right = gaussian(t, r, &mut rng).qr().q();
    let singular = DVector::from_fn(r, |k, _| decay.powi(k as i32));
    let mut values = &left * DMatrix::from_diagonal(&singular) * right.transpose();
    if noise > 0.0 {
        values += gaussian(m, t, &mut rng) * (noise / (m as f64).sqrt());
    }
    let ds = Dataset::new(values, Provenance::Synthetic { seed })?;
    Ok(ds.centered())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// One feature per line.
    #[default]
    FeaturesAsRows,
    SamplesAsRows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableOptions {
    pub delimiter: u8,
    pub missing_token: String,
    pub orientation: Orientation,
    /// Features missing in more than this fraction of samples are dropped.
    pub max_missing_fraction: f64,
}

impl Default for TableOptions {
    fn default() -> Self {
        TableOptions { delimiter: b',', missing_token: String::new(), orientation: Orientation::FeaturesAsRows, max_missing_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroppedFeature {
    /// Zero-based feature index in the input.
    pub index: usize,
    pub missing: usize,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub dataset: Dataset,
    pub dropped: Vec<DroppedFeature>,
    /// Missing entries replaced by a feature mean.
    pub imputed: usize,
}

/// Reads a delimited numeric table, drops sparse features and mean-fills
/// the rest.
pub fn ingest_table(path: &Path, options: &TableOptions) -> Result<IngestReport> {
    let mut reader = csv::ReaderBuilder::new().delimiter(options.delimiter).has_headers(false).flexible(true).from_path(path)?;

    let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .enumerate()
            .map(|(col, field)| {
                if field == options.missing_token {
                    Ok(None)
                } else {
                    field.trim().parse::<f64>().ok().filter(|v| v.is_finite()).map(Some).ok_or_else(|| {
                        Error::Data(format!("{}: line {}, column {}: cannot parse {field:?}", path.display(), line + 1, col + 1))
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = cells.first() {
            if row.len() != first.len() {
                return Err(Error::input(format!("{}: ragged table, line {} has {} fields, expected {}", path.display(), line + 1, row.len(), first.len())));
            }
        }
        cells.push(row);
    }
    if cells.is_empty() || cells[0].is_empty() {
        return Err(Error::input(format!("{}: empty table", path.display())));
    }

    let features: Vec<Vec<Option<f64>>> = match options.orientation {
        Orientation::FeaturesAsRows => cells,
        Orientation::SamplesAsRows => (0..cells[0].len()).map(|f| cells.iter().map(|row| row[f]).collect()).collect(),
    };
    let samples = features[0].len();

    let mut kept: Vec<Vec<f64>> = Vec::new();
    let mut dropped = Vec::new();
    let mut imputed = 0;
    for (index, row) in features.into_iter().enumerate() {
        let missing = row.iter().filter(|v| v.is_none()).count();
        if missing as f64 > options.max_missing_fraction * samples as f64 || missing == samples {
            dropped.push(DroppedFeature { index, missing, samples });
            continue;
        }
        let observed: Vec<f64> = row.iter().flatten().copied().collect();
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        imputed += missing;
        kept.push(row.into_iter().map(|v| v.unwrap_or(mean)).collect());
    }
    if kept.is_empty() {
        return Err(Error::input(format!("{}: no feature survived the missing-value filter", path.display())));
    }
    let values = DMatrix::from_fn(kept.len(), samples, |f, s| kept[f][s]);
    let dataset = Dataset::new(values, Provenance::File(path.to_path_buf()))?;
    Ok(IngestReport { dataset, dropped, imputed })
}

/// Writes the dataset feature-major with the given delimiter.
pub fn export_table(dataset: &Dataset, path: &Path, delimiter: u8) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().delimiter(delimiter).has_headers(false).from_path(path)?;
    for row in dataset.values.row_iter() {
        writer.write_record(row.iter().map(|v| v.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// One line per dropped feature: `index<TAB>missing<TAB>samples`.
pub fn write_drop_report(dropped: &[DroppedFeature], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "feature_index\tmissing\tsamples")?;
    for d in dropped {
        writeln!(out, "{}\t{}\t{}", d.index, d.missing, d.samples)?;
    }
    out.flush()?;
    Ok(())
}

/// How features are split across agents. Blocks are contiguous row ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionScheme {
    /// Sizes differ by at most one; the remainder goes to the first blocks.
    Uniform(usize),
    /// A seeded uniform draw over compositions of `M` into `agents` positive parts.
    RandomSizes { agents: usize, seed: u64 },
    Explicit(Vec<usize>),
}

/// Block sizes `M_1..M_J` for `features` rows under `scheme`.
pub fn partition_sizes(features: usize, scheme: &PartitionScheme) -> Result<Vec<usize>> {
    let check_j = |j: usize| {
        if j == 0 || j > features {
            Err(Error::input(format!("cannot split {features} features over {j} agents")))
        } else {
            Ok(())
        }
    };
    match scheme {
        PartitionScheme::Uniform(j) => {
            check_j(*j)?;
            let (base, extra) = (features / j, features % j);
            Ok((0..*j).map(|k| base + usize::from(k < extra)).collect())
        }
        PartitionScheme::RandomSizes { agents, seed } => {
            check_j(*agents)?;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            // J-1 distinct cuts among the M-1 gaps between rows
            let mut cuts: Vec<usize> = rand::seq::index::sample(&mut rng, features - 1, agents - 1).into_iter().map(|c| c + 1).collect();
            cuts.sort_unstable();
            let mut sizes = Vec::with_capacity(*agents);
            let mut prev = 0;
            for c in cuts.into_iter().chain(std::iter::once(features)) {
                sizes.push(c - prev);
                prev = c;
            }
            Ok(sizes)
        }
        PartitionScheme::Explicit(sizes) => {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(Error::input("explicit partition sizes must all be at least 1"));
            }
            let total: usize = sizes.iter().sum();
            if total != features {
                return Err(Error::input(format!("partition sizes sum to {total}, dataset has {features} features")));
            }
            Ok(sizes.clone())
        }
    }
}

/// Splits the dataset's features into agent blocks with ids `0..J`.
pub fn partition(dataset: &Dataset, scheme: &PartitionScheme) -> Result<Vec<FeatureBlock>> {
    let sizes = partition_sizes(dataset.features(), scheme)?;
    let mut start = 0;
    sizes
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let mut block = FeatureBlock::new(j as u32, dataset.values.rows(start, m).into_owned())?;
            block.centered = dataset.centered;
            start += m;
            Ok(block)
        })
        .collect()
}
