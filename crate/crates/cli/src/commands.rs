use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use depth_introspect::decn::{correct_iterative, CorrectionResult, ErrorDetector, OracleDetector};
use depth_introspect::dedn::{DednConfig, DednModel};
use depth_introspect::depth::{
    generate_scene, read_depth, read_manifest, read_rgb, write_depth, write_manifest, write_rgb,
    DepthRaster, ManifestRecord, RgbImage,
};
use depth_introspect::evaluation::{
    corpus_depth_metrics, detection_report_from_probs, random_baseline, DepthMetrics,
    DetectionReport,
};
use depth_introspect::labeling::{
    class_distribution, label, write_label_map, ClassDistribution, ErrorLabelMap, LabelerConfig,
};
use depth_introspect::tensor::read_checkpoint;
use depth_introspect::training::{train_with, EpochMetrics, LabeledSample, LossConfig};
use serde::{Deserialize, Serialize};

use crate::{create_dir, require, write_file, CliError, Layout, ModelFiles, RunConfig};

pub const TRAIN_SPLIT: &str = "train";
pub const TEST_SPLIT: &str = "test";

const GENERATE_HINT: &str = "run `depth-introspect generate` first";
const TRAIN_HINT: &str = "run `depth-introspect train` first";
const CORRECT_HINT: &str = "run `depth-introspect correct` first";

/// Per-sample seed: splitmix64 of the dataset seed, split and index.
pub fn sample_seed(base: u64, split: &str, index: usize) -> u64 {
    let tag = if split == TRAIN_SPLIT { 0 } else { 1u64 << 40 };
    let mut z = base
        .wrapping_add(tag)
        .wrapping_add(index as u64)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-preserving map over `items` on up to `jobs` threads.
pub fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>, CliError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, CliError> + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>, CliError>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

#[derive(Clone, Debug)]
pub struct SecondViewData {
    pub rgb: RgbImage,
    pub gt: DepthRaster,
    pub pred: DepthRaster,
}

/// A dataset sample read back from disk.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: ManifestRecord,
    pub rgb: RgbImage,
    pub gt: DepthRaster,
    pub pred: DepthRaster,
    pub second: Option<SecondViewData>,
}

impl Sample {
    /// Network views with the first view's depth replaced by `depth`.
    pub fn views_with<'a>(
        &'a self,
        depth: &'a DepthRaster,
    ) -> Vec<(&'a RgbImage, &'a DepthRaster)> {
        let mut v = vec![(&self.rgb, depth)];
        if let Some(s) = &self.second {
            v.push((&s.rgb, &s.pred));
        }
        v
    }

    pub fn views(&self) -> Vec<(&RgbImage, &DepthRaster)> {
        self.views_with(&self.pred)
    }

    pub fn labels(&self, cfg: &LabelerConfig) -> Result<ErrorLabelMap, CliError> {
        Ok(label(&self.pred, &self.gt, cfg)?)
    }
}

fn check_config(cfg: &RunConfig) -> Result<Layout, CliError> {
    cfg.validate()?;
    Ok(Layout::new(&cfg.output.dir))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub manifest: PathBuf,
    pub train: usize,
    pub test: usize,
}

pub fn cmd_generate(cfg: &RunConfig, jobs: usize) -> Result<GenerateSummary, CliError> {
    let layout = check_config(cfg)?;
    let scene = cfg.dataset.scene();
    let mut jobs_list = Vec::new();
    for (split, n) in [
        (TRAIN_SPLIT, cfg.dataset.train_size),
        (TEST_SPLIT, cfg.dataset.test_size),
    ] {
        create_dir(&layout.dataset().join(split))?;
        jobs_list.extend((0..n).map(|i| (split, i)));
    }
    let records = par_map(jobs, &jobs_list, |&(split, i)| {
        let seed = sample_seed(cfg.dataset.seed, split, i);
        let s = generate_scene(&scene, seed)?;
        let id = format!("{split}_{i:05}");
        let rel = |suffix: &str| format!("{split}/{id}_{suffix}.png");
        let write = |rel: &str,
                     f: &dyn Fn(&Path) -> depth_introspect::Result<()>|
         -> Result<String, CliError> {
            f(&layout.dataset().join(rel))?;
            Ok(rel.to_string())
        };
        let rgb = write(&rel("rgb"), &|p| write_rgb(&s.rgb, p))?;
        let gt_depth = write(&rel("gt"), &|p| write_depth(&s.gt_depth, p))?;
        let pred_depth = write(&rel("pred"), &|p| write_depth(&s.pred_depth, p))?;
        let (mut rgb2, mut gt_depth2, mut pred_depth2) = (None, None, None);
        if let Some(v) = &s.second {
            rgb2 = Some(write(&rel("rgb2"), &|p| write_rgb(&v.rgb, p))?);
            gt_depth2 = Some(write(&rel("gt2"), &|p| write_depth(&v.gt_depth, p))?);
            pred_depth2 = Some(write(&rel("pred2"), &|p| write_depth(&v.pred_depth, p))?);
        }
        Ok(ManifestRecord {
            id,
            split: split.to_string(),
            seed,
            rgb,
            gt_depth,
            pred_depth,
            rgb2,
            gt_depth2,
            pred_depth2,
            corruption: s.corruption,
        })
    })?;
    write_manifest(layout.manifest(), &records)?;
    Ok(GenerateSummary {
        manifest: layout.manifest(),
        train: cfg.dataset.train_size,
        test: cfg.dataset.test_size,
    })
}

fn read_sample(dir: &Path, record: &ManifestRecord) -> Result<Sample, CliError> {
    let file = |rel: &str| -> Result<PathBuf, CliError> {
        let p = dir.join(rel);
        require(&p, "dataset raster", GENERATE_HINT)?;
        Ok(p)
    };
    let second = match (&record.rgb2, &record.gt_depth2, &record.pred_depth2) {
        (Some(r), Some(g), Some(p)) => Some(SecondViewData {
            rgb: read_rgb(file(r)?)?,
            gt: read_depth(file(g)?)?,
            pred: read_depth(file(p)?)?,
        }),
        (None, None, None) => None,
        _ => {
            return Err(CliError::Core(depth_introspect::Error::InvalidInput(
                format!("sample {} lists an incomplete second view", record.id),
            )))
        }
    };
    Ok(Sample {
        record: record.clone(),
        rgb: read_rgb(file(&record.rgb)?)?,
        gt: read_depth(file(&record.gt_depth)?)?,
        pred: read_depth(file(&record.pred_depth)?)?,
        second,
    })
}

/// Loads one split of the dataset under `layout`.
pub fn load_split(layout: &Layout, split: &str, jobs: usize) -> Result<Vec<Sample>, CliError> {
    require(&layout.manifest(), "dataset manifest", GENERATE_HINT)?;
    let records: Vec<ManifestRecord> = read_manifest(layout.manifest())?
        .into_iter()
        .filter(|r| r.split == split)
        .collect();
    if records.is_empty() {
        return Err(CliError::Core(depth_introspect::Error::EmptyCorpus(
            format!("no `{split}` samples in {}", layout.manifest().display()),
        )));
    }
    let dir = layout.dataset();
    par_map(jobs, &records, |r| read_sample(&dir, r))
}

/// [`load_split`] keeping only the first `n_views` views of each sample.
pub fn load_views(
    layout: &Layout,
    split: &str,
    n_views: usize,
    jobs: usize,
) -> Result<Vec<Sample>, CliError> {
    let mut samples = load_split(layout, split, jobs)?;
    if n_views < 2 {
        samples.iter_mut().for_each(|s| s.second = None);
    }
    Ok(samples)
}

fn labeled(
    samples: &[Sample],
    cfg: &RunConfig,
    jobs: usize,
) -> Result<Vec<LabeledSample>, CliError> {
    let scale = cfg.model.depth_scale;
    par_map(jobs, samples, |s| {
        Ok(LabeledSample::new(&s.views(), &s.gt, &cfg.labeler, scale)?)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMetadata {
    pub dedn: DednConfig,
    pub labeler: LabelerConfig,
    pub seed: u64,
    pub epochs: usize,
    pub pretrained: bool,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text)
}

pub fn load_model(dir: &Path) -> Result<(DednModel<f32>, ModelMetadata), CliError> {
    let files = ModelFiles::new(dir);
    require(&files.metadata(), "model metadata", TRAIN_HINT)?;
    require(&files.checkpoint(), "model checkpoint", TRAIN_HINT)?;
    let meta: ModelMetadata = serde_json::from_str(
        &fs::read_to_string(files.metadata()).map_err(depth_introspect::Error::Io)?,
    )
    .map_err(|e| depth_introspect::Error::Format {
        path: files.metadata().display().to_string(),
        reason: e.to_string(),
    })?;
    let model = DednModel::load(meta.dedn.clone(), files.checkpoint())?;
    Ok((model, meta))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub curve: Vec<f64>,
}

/// Distills the depth branch against the RGB branch on the training split.
pub fn cmd_pretrain(cfg: &RunConfig, jobs: usize) -> Result<PretrainSummary, CliError> {
    let layout = check_config(cfg)?;
    let samples = load_split(&layout, TRAIN_SPLIT, jobs)?;
    let mut model = DednModel::<f32>::new(cfg.dedn(), cfg.model.seed)?;
    let pairs: Vec<(&RgbImage, &DepthRaster)> = samples.iter().map(|s| (&s.rgb, &s.pred)).collect();
    let curve = model.distill_depth_branch(&pairs, &cfg.pretrain)?;
    let files = ModelFiles::new(layout.model());
    create_dir(&files.dir)?;
    model.save(files.pretrained())?;
    write_json(&files.pretrain_curve(), &curve)?;
    Ok(PretrainSummary {
        checkpoint: files.pretrained(),
        curve,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochMetrics>,
    pub pretrained: bool,
}

/// Trains on the training split, starting from the pretrained checkpoint when present.
pub fn cmd_train(cfg: &RunConfig, jobs: usize) -> Result<TrainSummary, CliError> {
    let layout = check_config(cfg)?;
    let corpus = labeled(
        &load_views(&layout, TRAIN_SPLIT, cfg.dedn().n_views, jobs)?,
        cfg,
        jobs,
    )?;
    let files = ModelFiles::new(layout.model());
    create_dir(&files.dir)?;
    let mut model = DednModel::<f32>::new(cfg.dedn(), cfg.model.seed)?;
    let pretrained = files.pretrained().exists();
    if pretrained {
        let mut r = fs::File::open(files.pretrained()).map_err(depth_introspect::Error::Io)?;
        let layers = read_checkpoint(&mut r).map_err(depth_introspect::Error::from)?;
        model.load_checkpoint(&layers)?;
        log::info!("initialized from {}", files.pretrained().display());
    }
    let loss_cfg = LossConfig::for_corpus(&corpus)?;
    let mut log_lines = String::new();
    let history = train_with(&mut model, &corpus, &cfg.training, &loss_cfg, |_, m| {
        log_lines.push_str(&serde_json::to_string(m).expect("serializable"));
        log_lines.push('\n');
        Ok(())
    })?;
    model.save(files.checkpoint())?;
    write_file(&files.train_log(), log_lines)?;
    write_json(
        &files.metadata(),
        &ModelMetadata {
            dedn: cfg.dedn(),
            labeler: cfg.labeler,
            seed: cfg.model.seed,
            epochs: cfg.training.epochs,
            pretrained,
        },
    )?;
    Ok(TrainSummary {
        checkpoint: files.checkpoint(),
        history,
        pretrained,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectSummary {
    pub report: DetectionReport,
    pub report_path: PathBuf,
}

/// Runs detection on the test split; `model_dir` defaults to the run's model directory.
pub fn cmd_detect(
    cfg: &RunConfig,
    model_dir: Option<&Path>,
    jobs: usize,
) -> Result<DetectSummary, CliError> {
    let layout = check_config(cfg)?;
    let model_dir = model_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| layout.model());
    let (model, meta) = load_model(&model_dir)?;
    let samples = load_views(&layout, TEST_SPLIT, meta.dedn.n_views, jobs)?;
    let out = layout.detections();
    create_dir(&out)?;
    let reports = par_map(jobs, &samples, |s| {
        let gt = s.labels(&cfg.labeler)?;
        let probs = model.infer(&s.views())?;
        write_label_map(
            &probs.to_label_map(&gt)?,
            out.join(format!("{}_errors.png", s.record.id)),
        )?;
        Ok(detection_report_from_probs(&probs, &gt)?)
    })?;
    let mut report = DetectionReport::default();
    reports.iter().for_each(|r| report.merge(r));
    let report_path = out.join("report.txt");
    write_file(&report_path, report.to_key_values())?;
    Ok(DetectSummary {
        report,
        report_path,
    })
}

/// Trace row written per sample and iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub id: String,
    pub iteration: usize,
    pub adjusted: usize,
    pub ties: usize,
    pub rmse: f64,
    pub abs_rel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectSummary {
    pub oracle: bool,
    pub results: Vec<(String, CorrectionResult)>,
}

/// Corrects the test split's predicted depth with the trained model, or with
/// ground-truth labels when `oracle` is set.
pub fn cmd_correct(
    cfg: &RunConfig,
    model_dir: Option<&Path>,
    oracle: bool,
    jobs: usize,
) -> Result<CorrectSummary, CliError> {
    let layout = check_config(cfg)?;
    let model = if oracle {
        None
    } else {
        let dir = model_dir
            .map(Path::to_path_buf)
            .unwrap_or_else(|| layout.model());
        Some(load_model(&dir)?)
    };
    let n_views = model.as_ref().map_or(1, |(_, meta)| meta.dedn.n_views);
    let model = model.map(|(m, _)| m);
    let samples = load_views(&layout, TEST_SPLIT, n_views, jobs)?;
    let out = layout.corrected();
    create_dir(&out)?;
    let results = par_map(jobs, &samples, |s| {
        let oracle_detector = OracleDetector {
            gt: &s.gt,
            labeler: cfg.labeler,
        };
        let detector: &dyn ErrorDetector = match &model {
            Some(m) => m,
            None => &oracle_detector,
        };
        let r = correct_iterative(detector, &s.views(), Some(&s.gt), &cfg.correction)?;
        write_depth(&r.depth, out.join(format!("{}_depth.png", s.record.id)))?;
        Ok((s.record.id.clone(), r))
    })?;
    let mut trace = String::new();
    for (id, r) in &results {
        for e in &r.trace {
            let m = e.metrics.expect("ground truth supplied");
            let row = TraceRow {
                id: id.clone(),
                iteration: e.iteration,
                adjusted: e.adjusted,
                ties: e.ties,
                rmse: m.rmse,
                abs_rel: m.abs_rel,
            };
            trace.push_str(&serde_json::to_string(&row).expect("serializable"));
            trace.push('\n');
        }
    }
    write_file(&out.join("trace.jsonl"), trace)?;
    let converged = results.iter().filter(|(_, r)| r.converged).count();
    write_file(
        &out.join("summary.txt"),
        format!(
            "detector={}\niterations={}\nsamples={}\nconverged={converged}\n",
            if oracle { "oracle" } else { "model" },
            cfg.correction.iterations,
            results.len()
        ),
    )?;
    Ok(CorrectSummary { oracle, results })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvaluateSummary {
    pub before: DepthMetrics,
    pub after: DepthMetrics,
}

impl EvaluateSummary {
    /// Side-by-side before/after table.
    pub fn table(&self) -> String {
        let mut out = String::from("metric before after\n");
        let (b, a) = (&self.before, &self.after);
        for (name, x, y) in [
            ("delta1", b.delta1, a.delta1),
            ("abs_rel", b.abs_rel, a.abs_rel),
            ("rmse", b.rmse, a.rmse),
            ("log10", b.log10, a.log10),
        ] {
            writeln!(out, "{name} {x:.6} {y:.6}").unwrap();
        }
        out
    }
}

/// Depth metrics of the test split before and after correction.
pub fn cmd_evaluate(cfg: &RunConfig, jobs: usize) -> Result<EvaluateSummary, CliError> {
    let layout = check_config(cfg)?;
    let samples = load_split(&layout, TEST_SPLIT, jobs)?;
    let corrected = par_map(jobs, &samples, |s| {
        let p = layout
            .corrected()
            .join(format!("{}_depth.png", s.record.id));
        require(&p, "corrected depth", CORRECT_HINT)?;
        Ok(read_depth(p)?)
    })?;
    let before = corpus_depth_metrics(samples.iter().map(|s| (&s.pred, &s.gt)))?;
    let after = corpus_depth_metrics(corrected.iter().zip(&samples).map(|(c, s)| (c, &s.gt)))?;
    let summary = EvaluateSummary { before, after };
    create_dir(&layout.evaluation())?;
    write_file(&layout.evaluation().join("report.txt"), summary.table())?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSummary {
    pub distribution: ClassDistribution,
    pub report: DetectionReport,
}

/// Random baseline matched to the training split's error-class distribution,
/// scored against the test split's labels.
pub fn cmd_baseline(cfg: &RunConfig, jobs: usize) -> Result<BaselineSummary, CliError> {
    let layout = check_config(cfg)?;
    let train = load_split(&layout, TRAIN_SPLIT, jobs)?;
    let test = load_split(&layout, TEST_SPLIT, jobs)?;
    let train_labels = par_map(jobs, &train, |s| s.labels(&cfg.labeler))?;
    let test_labels = par_map(jobs, &test, |s| s.labels(&cfg.labeler))?;
    let distribution = class_distribution(&train_labels)?;
    let report = random_baseline(&distribution, &test_labels, cfg.training.seed)?;
    let [u, c, o] = distribution.as_array();
    let text = format!(
        "distribution.under={u:.6}\ndistribution.correct={c:.6}\ndistribution.over={o:.6}\n{}",
        report.to_key_values()
    );
    create_dir(&layout.baseline())?;
    write_file(&layout.baseline().join("report.txt"), text)?;
    Ok(BaselineSummary {
        distribution,
        report,
    })
}
