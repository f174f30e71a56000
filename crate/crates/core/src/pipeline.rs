//! End-to-end workflows behind the command-line tool: dataset synthesis,
//! operator caching, training, matching, evaluation and the λ sweep, plus the
//! keypoint-graph variants.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{mean_geodesic_error, ErrorReport};
use crate::features::{self, Checkpoint, FeatureMatrix, ModelParams};
use crate::fsutil;
use crate::kp2d::{self, GraphManifest, GraphManifestEntry, Report2d};
use crate::losses::{
    combined_loss, sample_correspondences, CorrespondenceSet, LossConfig, ShapeTerms,
};
use crate::matching::{build_index, nearest_neighbor_map, PointMap};
use crate::mesh::{self, TriangleMesh};
use crate::operators::StiffnessMatrix;
use crate::optim::{Adam, AdamState};
use crate::par;
use crate::rng::{derive_seed, substream};
use crate::spectral::SpectralBasis;
use crate::synth::{
    self, CacheStats, CachedShape, DatasetManifest, ManifestEntry, ShapeCache, Split,
};

/// Error threshold used for the large-error fraction in reports.
pub const LARGE_ERROR: f64 = 0.1;

/// A mesh with its network inputs and regularizer operators.
#[derive(Clone, Debug)]
pub struct PreparedShape {
    pub mesh: TriangleMesh,
    pub stiffness: StiffnessMatrix,
    pub basis: SpectralBasis,
    pub inputs: DMatrix<f64>,
}

impl PreparedShape {
    pub fn new(shape: CachedShape, hks_times: &[f64]) -> Result<Self> {
        let inputs = features::input_signals(&shape.mesh, Some(&shape.basis), hks_times)?;
        Ok(Self {
            mesh: shape.mesh,
            stiffness: shape.operators.stiffness,
            basis: shape.basis,
            inputs,
        })
    }

    fn terms(&self) -> ShapeTerms<'_> {
        ShapeTerms {
            stiffness: Some(&self.stiffness),
            basis: Some(&self.basis),
        }
    }
}

/// A training or test pair ready for the loss.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub name: String,
    pub source: PreparedShape,
    pub target: PreparedShape,
    pub gt: PointMap,
    gt_set: CorrespondenceSet,
}

impl PreparedPair {
    pub fn new(
        name: impl Into<String>,
        source: PreparedShape,
        target: PreparedShape,
        gt: PointMap,
    ) -> Result<Self> {
        if gt.len() != source.mesh.n_vertices() {
            return Err(Error::Dimension(format!(
                "ground truth has {} entries, source mesh {} vertices",
                gt.len(),
                source.mesh.n_vertices()
            )));
        }
        gt.check_range(target.mesh.n_vertices())?;
        Ok(Self {
            name: name.into(),
            gt_set: CorrespondenceSet::from_pointmap(&gt),
            source,
            target,
            gt,
        })
    }
}

fn entry_name(e: &ManifestEntry) -> String {
    let file =
        e.gt.file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
    file.strip_suffix(".gt.txt")
        .map(str::to_string)
        .unwrap_or(file)
}

/// Loads (computing and caching as needed) every pair of one split.
pub fn load_split(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<PreparedPair>> {
    let cache = ShapeCache::new(&cfg.paths.cache_dir);
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    let k = cfg.loss.k;
    par::map_slice(&entries, |e| {
        let (s, _) = cache.load(&manifest.resolve(&e.mesh1), k)?;
        let (t, _) = cache.load(&manifest.resolve(&e.mesh2), k)?;
        let gt = PointMap::load(&manifest.resolve(&e.gt))?;
        PreparedPair::new(
            entry_name(e),
            PreparedShape::new(s, &cfg.model.hks_times)?,
            PreparedShape::new(t, &cfg.model.hks_times)?,
            gt,
        )
    })
    .into_iter()
    .collect()
}

/// Writes the synthetic mesh dataset and its manifest; returns the manifest.
pub fn synthesize_meshes(cfg: &RunConfig) -> Result<DatasetManifest> {
    let s = &cfg.synth;
    let manifest_path = &cfg.paths.manifest;
    let dir = manifest_path
        .parent()
        .unwrap_or(Path::new(""))
        .to_path_buf();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let total = s.n_train + s.n_test;
    if total == 0 {
        log::warn!("synth: n_train + n_test = 0, writing an empty manifest");
    }
    let mut templates = HashMap::new();
    for kind in &s.templates {
        let key = kind.to_string();
        if let std::collections::hash_map::Entry::Vacant(e) = templates.entry(key) {
            let t = synth::generate_template(kind)?;
            let b = synth::deformation_basis(&t)?;
            e.insert((t, b));
        }
    }
    let root = cfg.dataset_seed();
    let jobs: Vec<usize> = (0..total).collect();
    let entries: Vec<ManifestEntry> = par::map_slice(&jobs, |&i| {
        let kind = &s.templates[i % s.templates.len()];
        let (template, basis) = &templates[&kind.to_string()];
        let seed = derive_seed(root, &format!("dataset/{i}"));
        let pair = synth::make_pair_from(
            template,
            basis,
            kind.to_string(),
            seed,
            s.magnitude,
            s.decimate,
        )?;
        let split = if i < s.n_train {
            Split::Train
        } else {
            Split::Test
        };
        synth::write_pair(&pair, &dir, &format!("pair{i:03}"), split)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let manifest = DatasetManifest::new(dir, entries);
    manifest.save(manifest_path)?;
    Ok(manifest)
}

/// Ensures operators and bases are cached for every mesh in the manifest.
pub fn precompute(cfg: &RunConfig) -> Result<CacheStats> {
    let manifest = DatasetManifest::load(&cfg.paths.manifest)?;
    let cache = ShapeCache::new(&cfg.paths.cache_dir);
    synth::cache_pipeline(&cache, &manifest, &manifest.pairs, cfg.loss.k)
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// Epochs completed, counting from 1.
    pub epoch: u64,
    pub total: f64,
    pub contrastive: f64,
    pub regularizer: f64,
    pub wall_seconds: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,L,L_c,L_s,wall_seconds";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:.3}",
            self.epoch, self.total, self.contrastive, self.regularizer, self.wall_seconds
        )
    }
}

struct StepOutput {
    total: f64,
    contrastive: f64,
    regularizer: f64,
    grad: Vec<f64>,
}

fn pair_step(
    params: &ModelParams,
    pair: &PreparedPair,
    loss: &LossConfig,
    seed: u64,
) -> Result<StepOutput> {
    let (g1, t1) =
        features::forward_with_tape(params, &pair.source.inputs, Some(&pair.source.basis))?;
    let (g2, t2) =
        features::forward_with_tape(params, &pair.target.inputs, Some(&pair.target.basis))?;
    let sample = sample_correspondences(&pair.gt_set, loss.sample_count, seed)?;
    let out = combined_loss(
        loss,
        &FeatureMatrix::new(g1)?,
        &FeatureMatrix::new(g2)?,
        pair.source.terms(),
        pair.target.terms(),
        &pair.gt,
        &sample,
    )?;
    if !out.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss on pair {}: L_c = {}, L_s = {}",
            pair.name, out.contrastive, out.regularizer
        )));
    }
    let mut grad = features::backward_from_tape(params, &t1, Some(&pair.source.basis), &out.dg1)?;
    grad.add_assign(&features::backward_from_tape(
        params,
        &t2,
        Some(&pair.target.basis),
        &out.dg2,
    )?);
    Ok(StepOutput {
        total: out.total,
        contrastive: out.contrastive,
        regularizer: out.regularizer,
        grad: grad.to_flat(),
    })
}

/// Fresh checkpoint for the configured architecture.
pub fn initial_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let params = ModelParams::init(cfg.architecture(), cfg.seed)?;
    let n = params.architecture().param_count();
    Ok(Checkpoint {
        params,
        epoch: 0,
        optimizer: Some(AdamState::new(n)),
    })
}

/// Trains from `start` up to `cfg.optim.epochs` epochs, calling `on_epoch`
/// after each one. Pair order, sampling and batching depend only on the seed,
/// the epoch and the position in the epoch, so resumed runs continue exactly.
pub fn train(
    cfg: &RunConfig,
    pairs: &[PreparedPair],
    start: Checkpoint,
    mut on_epoch: impl FnMut(&EpochRecord, &Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    if start.params.architecture() != &cfg.architecture() {
        return Err(Error::Config(
            "checkpoint architecture differs from the config".into(),
        ));
    }
    let loss = cfg.loss_config();
    let adam = Adam::new(cfg.optim.lr);
    let mut ck = start;
    let n_params = ck.params.architecture().param_count();
    let mut state = ck
        .optimizer
        .take()
        .unwrap_or_else(|| AdamState::new(n_params));
    let mut flat = ck.params.to_flat();
    for epoch in ck.epoch..cfg.optim.epochs as u64 {
        let clock = Instant::now();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut substream(cfg.seed, &format!("order/{epoch}")));
        let (mut total, mut lc, mut ls) = (0.0, 0.0, 0.0);
        for (b, batch) in order.chunks(cfg.optim.batch_size).enumerate() {
            let params = &ck.params;
            let outs: Vec<Result<StepOutput>> = par::map_slice(batch, |&pi| {
                let pos = b * cfg.optim.batch_size + batch.iter().position(|&x| x == pi).unwrap();
                let seed = derive_seed(cfg.seed, &format!("sample/{epoch}/{pos}"));
                pair_step(params, &pairs[pi], &loss, seed).map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("epoch {}: {m}", epoch + 1)),
                    other => other,
                })
            });
            let mut grad = vec![0.0; n_params];
            for out in outs {
                let out = out?;
                total += out.total;
                lc += out.contrastive;
                ls += out.regularizer;
                for (g, x) in grad.iter_mut().zip(&out.grad) {
                    *g += x;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut flat, &grad, &mut state)?;
            ck.params.set_flat(&flat)?;
            if !ck.params.is_finite() {
                return Err(Error::Numerical(format!(
                    "parameters became non-finite in epoch {}",
                    epoch + 1
                )));
            }
        }
        let n = pairs.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            total: total / n,
            contrastive: lc / n,
            regularizer: ls / n,
            wall_seconds: clock.elapsed().as_secs_f64(),
        };
        ck.epoch = epoch + 1;
        ck.optimizer = Some(state.clone());
        on_epoch(&record, &ck)?;
        log::info!(
            "epoch {} L = {:.6} L_c = {:.6} L_s = {:.6}",
            record.epoch,
            record.total,
            record.contrastive,
            record.regularizer
        );
    }
    ck.optimizer = Some(state);
    Ok(ck)
}

/// Artifacts written by [`run_training`].
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub final_checkpoint: Checkpoint,
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out_dir.join("checkpoint.scmp")
}

/// Trains on the manifest's train split, saving the checkpoint and the loss CSV
/// after every epoch. With `resume`, continues from an existing checkpoint and
/// keeps the CSV rows up to its epoch.
pub fn run_training(cfg: &RunConfig, resume: bool) -> Result<TrainArtifacts> {
    let manifest = DatasetManifest::load(&cfg.paths.manifest)?;
    let pairs = load_split(cfg, &manifest, Split::Train)?;
    let out = &cfg.paths.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ck_path = checkpoint_path(cfg);
    let csv_path = out.join("loss.csv");
    let (start, mut rows) = if resume && ck_path.is_file() {
        let ck = Checkpoint::load(&ck_path)?;
        let rows = if csv_path.is_file() {
            fsutil::read_string(&csv_path)?
                .lines()
                .skip(1)
                .filter(|l| {
                    l.split(',')
                        .next()
                        .and_then(|e| e.parse::<u64>().ok())
                        .is_some_and(|e| e <= ck.epoch)
                })
                .map(str::to_string)
                .collect()
        } else {
            Vec::new()
        };
        (ck, rows)
    } else {
        (initial_checkpoint(cfg)?, Vec::new())
    };
    let write_csv = |rows: &[String]| {
        let mut s = String::from(LOSS_CSV_HEADER);
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        fsutil::write_atomic(&csv_path, s.as_bytes())
    };
    write_csv(&rows)?;
    let final_checkpoint = train(cfg, &pairs, start, |rec, ck| {
        rows.push(rec.csv_row());
        write_csv(&rows)?;
        ck.save(&ck_path)
    })?;
    Ok(TrainArtifacts {
        checkpoint: ck_path,
        loss_csv: csv_path,
        final_checkpoint,
    })
}

/// Features of a prepared shape under `params`.
pub fn shape_features(params: &ModelParams, shape: &PreparedShape) -> Result<FeatureMatrix> {
    features::forward(params, &shape.inputs, Some(&shape.basis))
}

/// Nearest-neighbor map between two prepared shapes.
pub fn match_prepared(
    params: &ModelParams,
    source: &PreparedShape,
    target: &PreparedShape,
) -> Result<PointMap> {
    let g1 = shape_features(params, source)?;
    let g2 = shape_features(params, target)?;
    nearest_neighbor_map(&g1, &build_index(&g2)?)
}

/// Inputs and (only when the head needs one) the basis of a mesh file.
fn inference_features(
    params: &ModelParams,
    path: &Path,
    cache: &ShapeCache,
) -> Result<FeatureMatrix> {
    let arch = params.architecture();
    if arch.diffusion || !arch.hks_times.is_empty() {
        let (shape, _) = cache.load(path, arch.k)?;
        let x = features::input_signals(&shape.mesh, Some(&shape.basis), &arch.hks_times)?;
        features::forward(params, &x, arch.diffusion.then_some(&shape.basis))
    } else {
        let m = mesh::load_mesh(path)?;
        features::forward(params, &features::input_signals(&m, None, &[])?, None)
    }
}

/// Matches two mesh files with a trained head by nearest-neighbor search in
/// feature space. Functional maps are never formed here.
pub fn match_meshes(
    params: &ModelParams,
    mesh1: &Path,
    mesh2: &Path,
    cache: &ShapeCache,
) -> Result<PointMap> {
    let g1 = inference_features(params, mesh1, cache)?;
    let g2 = inference_features(params, mesh2, cache)?;
    nearest_neighbor_map(&g1, &build_index(&g2)?)
}

/// Test-split summary of a model.
#[derive(Clone, Debug, Serialize)]
pub struct TestSummary {
    pub pairs: Vec<PairResult>,
    pub mean: f64,
    pub mean_x100: f64,
    pub fraction_above_large_error: f64,
    /// Mean per-column Dirichlet energy of normalized features over test shapes.
    pub mean_dirichlet_energy: f64,
    #[serde(skip)]
    pub pooled: ErrorReport,
    #[serde(skip)]
    pub maps: Vec<PointMap>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PairResult {
    pub name: String,
    pub mean: f64,
}

/// Matches and scores every prepared pair; errors are pooled over all sources.
pub fn evaluate_pairs(params: &ModelParams, pairs: &[PreparedPair]) -> Result<TestSummary> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no evaluation pairs".into()));
    }
    let mut all = Vec::new();
    let mut results = Vec::new();
    let mut maps = Vec::new();
    let mut energy = 0.0;
    for p in pairs {
        let g1 = shape_features(params, &p.source)?;
        let g2 = shape_features(params, &p.target)?;
        let pred = nearest_neighbor_map(&g1, &build_index(&g2)?)?;
        let report = mean_geodesic_error(&pred, &p.gt, &p.target.mesh)?;
        for (g, s) in [(&g1, &p.source), (&g2, &p.target)] {
            energy += features::l2_normalize_rows(g)?.mean_dirichlet_energy(&s.stiffness)?;
        }
        results.push(PairResult {
            name: p.name.clone(),
            mean: report.mean,
        });
        all.extend(report.errors);
        maps.push(pred);
    }
    let pooled = ErrorReport::from_errors(all);
    Ok(TestSummary {
        pairs: results,
        mean: pooled.mean,
        mean_x100: pooled.mean_x100,
        fraction_above_large_error: pooled.fraction_above(LARGE_ERROR),
        mean_dirichlet_energy: energy / (2 * pairs.len()) as f64,
        pooled,
        maps,
    })
}

/// Evaluates a checkpoint on the test split, writing per-pair maps and reports
/// under `<out>/test`.
pub fn run_test_evaluation(cfg: &RunConfig, checkpoint: &Path) -> Result<TestSummary> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = cfg.clone();
    cfg.loss.k = ck.params.architecture().k.max(1);
    let manifest = DatasetManifest::load(&cfg.paths.manifest)?;
    let pairs = load_split(&cfg, &manifest, Split::Test)?;
    let summary = evaluate_pairs(&ck.params, &pairs)?;
    let dir = cfg.paths.out_dir.join("test");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (p, m) in pairs.iter().zip(&summary.maps) {
        m.save(&dir.join(format!("{}.map.txt", p.name)))?;
    }
    summary.pooled.save(&dir, "errors")?;
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    fsutil::write_atomic(&dir.join("summary.json"), json.as_bytes())?;
    Ok(summary)
}

/// One λ of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub regularizer: String,
    pub final_loss: f64,
    pub finite: bool,
    pub mean: f64,
    pub mean_x100: f64,
    pub fraction_above_large_error: f64,
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "lambda,regularizer,final_loss,finite,mean_error,mean_error_x100,fraction_above_0.1\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:?},{},{:?},{:?},{:?}",
            r.lambda,
            r.regularizer,
            r.final_loss,
            r.finite,
            r.mean,
            r.mean_x100,
            r.fraction_above_large_error
        );
    }
    s
}

/// Trains one model per `sweep.lambdas` entry with `sweep.regularizer` and
/// scores each on the test split; a diverged run is reported, not fatal.
pub fn run_sweep_on(
    cfg: &RunConfig,
    train_pairs: &[PreparedPair],
    test_pairs: &[PreparedPair],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &lambda in &cfg.sweep.lambdas {
        let mut c = cfg.clone();
        c.loss.lambda = lambda;
        c.loss.regularizer = cfg.sweep.regularizer;
        let mut last = f64::NAN;
        let trained = train(&c, train_pairs, initial_checkpoint(&c)?, |rec, _| {
            last = rec.total;
            Ok(())
        });
        let row = match trained {
            Ok(ck) => {
                let s = evaluate_pairs(&ck.params, test_pairs)?;
                SweepRow {
                    lambda,
                    regularizer: c.loss.regularizer.to_string(),
                    final_loss: last,
                    finite: last.is_finite(),
                    mean: s.mean,
                    mean_x100: s.mean_x100,
                    fraction_above_large_error: s.fraction_above_large_error,
                }
            }
            Err(Error::Numerical(msg)) => {
                log::warn!("sweep lambda = {lambda} diverged: {msg}");
                SweepRow {
                    lambda,
                    regularizer: c.loss.regularizer.to_string(),
                    final_loss: f64::NAN,
                    finite: false,
                    mean: f64::NAN,
                    mean_x100: f64::NAN,
                    fraction_above_large_error: f64::NAN,
                }
            }
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    Ok(rows)
}

/// The sweep over the configured dataset; writes `<out>/sweep.csv`.
pub fn run_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let manifest = DatasetManifest::load(&cfg.paths.manifest)?;
    let train_pairs = load_split(cfg, &manifest, Split::Train)?;
    let test_pairs = load_split(cfg, &manifest, Split::Test)?;
    let rows = run_sweep_on(cfg, &train_pairs, &test_pairs)?;
    let out = &cfg.paths.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fsutil::write_atomic(&out.join("sweep.csv"), sweep_table(&rows).as_bytes())?;
    Ok(rows)
}

/// Writes the keypoint benchmark as graph-pair JSON files plus a manifest.
pub fn synthesize_graphs(cfg: &RunConfig) -> Result<GraphManifest> {
    let k2 = &cfg.kp2d;
    let path = &cfg.paths.kp2d_manifest;
    let dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if k2.n_train + k2.n_test == 0 {
        log::warn!("synth: kp2d n_train + n_test = 0, writing an empty manifest");
    }
    let pairs =
        kp2d::generate_benchmark(&k2.benchmark, cfg.dataset_seed(), 0, k2.n_train + k2.n_test)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let file = PathBuf::from(format!("graph{i:03}.json"));
        p.save(&dir.join(&file))?;
        entries.push(GraphManifestEntry {
            file,
            split: if i < k2.n_train {
                Split::Train
            } else {
                Split::Test
            },
        });
    }
    let m = GraphManifest { pairs: entries };
    m.save(path)?;
    Ok(m)
}

/// Trains the keypoint head; writes `kp2d_checkpoint.scmp` and `kp2d_loss.csv`.
pub fn run_kp2d_training(cfg: &RunConfig) -> Result<PathBuf> {
    let pairs = GraphManifest::load_split(&cfg.paths.kp2d_manifest, Split::Train)?;
    let tc = cfg.kp2d_train_config();
    let (params, history) = kp2d::train_2d(&pairs, &tc)?;
    let out = &cfg.paths.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = String::from("epoch,L,L_c,L_s\n");
    for (e, h) in history.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{:?},{:?},{:?}",
            e + 1,
            h.total,
            h.contrastive,
            h.regularizer
        );
    }
    fsutil::write_atomic(&out.join("kp2d_loss.csv"), csv.as_bytes())?;
    let path = out.join("kp2d_checkpoint.scmp");
    Checkpoint {
        params,
        epoch: tc.epochs as u64,
        optimizer: None,
    }
    .save(&path)?;
    Ok(path)
}

/// Scores a keypoint checkpoint on the test split; writes `kp2d_report.json`.
pub fn run_kp2d_evaluation(cfg: &RunConfig, checkpoint: &Path) -> Result<Report2d> {
    let ck = Checkpoint::load(checkpoint)?;
    let pairs = GraphManifest::load_split(&cfg.paths.kp2d_manifest, Split::Test)?;
    let report = kp2d::evaluate_2d(&ck.params, &pairs)?;
    let out = &cfg.paths.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    fsutil::write_atomic(&out.join("kp2d_report.json"), json.as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::TemplateKind;

    fn tiny(dir: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        c.paths.manifest = dir.join("data/manifest.json");
        c.paths.kp2d_manifest = dir.join("data/kp2d/manifest.json");
        c.paths.cache_dir = dir.join("cache");
        c.paths.out_dir = dir.join("out");
        c.synth.templates = vec![TemplateKind::Icosphere { subdivisions: 1 }];
        c.synth.n_train = 2;
        c.synth.n_test = 1;
        c.loss.k = 8;
        c.loss.sample_count = 16;
        c.model.hidden_dims = vec![8];
        c.model.out_dim = 4;
        c.optim.epochs = 2;
        c
    }

    #[test]
    fn train_writes_artifacts_and_resumes_without_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(dir.path());
        synthesize_meshes(&c).unwrap();
        let artifacts = run_training(&c, false).unwrap();
        let full = fsutil::read(&artifacts.checkpoint).unwrap();
        let csv = fsutil::read_string(&artifacts.loss_csv).unwrap();
        assert_eq!(csv.lines().count(), 3);

        // stop after one epoch, then resume to two
        let dir2 = tempfile::tempdir().unwrap();
        let mut c2 = tiny(dir2.path());
        c2.paths.manifest = c.paths.manifest.clone();
        c2.optim.epochs = 1;
        run_training(&c2, false).unwrap();
        c2.optim.epochs = 2;
        let resumed = run_training(&c2, true).unwrap();
        assert_eq!(fsutil::read(&resumed.checkpoint).unwrap(), full);
        let csv2 = fsutil::read_string(&resumed.loss_csv).unwrap();
        let epochs: Vec<&str> = csv2
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(epochs, ["1", "2"]);

        c.optim.epochs = 2;
        let s = run_test_evaluation(&c, &artifacts.checkpoint).unwrap();
        assert!(s.mean.is_finite());
        assert!(c.paths.out_dir.join("test/pair002.map.txt").is_file());
    }

    #[test]
    fn match_output_has_one_line_per_source_vertex() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let m = synthesize_meshes(&c).unwrap();
        let ck = initial_checkpoint(&c).unwrap();
        let cache = ShapeCache::new(&c.paths.cache_dir);
        let e = &m.pairs[0];
        let pm = match_meshes(
            &ck.params,
            &m.resolve(&e.mesh1),
            &m.resolve(&e.mesh2),
            &cache,
        )
        .unwrap();
        let n1 = mesh::load_mesh(m.resolve(&e.mesh1)).unwrap().n_vertices();
        assert_eq!(pm.to_text().lines().count(), n1);
    }

    #[test]
    fn empty_dataset_is_a_warning_not_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny(dir.path());
        c.synth.n_train = 0;
        c.synth.n_test = 0;
        assert!(synthesize_meshes(&c).unwrap().pairs.is_empty());
        assert!(run_training(&c, false).is_err());
    }
}
