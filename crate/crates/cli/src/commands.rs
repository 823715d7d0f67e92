use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use defectgen_core::augment::{build_augmented, ratio_sweep, AugmentPlan, Generator};
use defectgen_core::dataset::{
    export_dataset, load_dataset, load_mask_png, save_mask_png, synth_toy_dataset, validate_sample_with, ClassMap,
    Dataset, DefectSample, RgbImage,
};
use defectgen_core::metrics::{sweep_csv, sweep_switch, RandomConvExtractor, SweepRow};
use defectgen_core::qc::{evaluate, parse_rules, UnlistedPolicy};
use defectgen_core::sampler::{decode_batch, export_pairs, sample_single, sample_two_stage, GenerationMeta};
use defectgen_core::schedule::NoiseSchedule;
use defectgen_core::seg::{eval_seg, load_seg_model, predict_all, save_seg_model, train_seg};
use defectgen_core::trainer::{load_checkpoint, save_checkpoint, train, Checkpoint};
use defectgen_core::unet::model_info;
use defectgen_core::Tensor;
use sha2::{Digest, Sha256};

use crate::config::{parse_preset, RunConfig};
use crate::error::{CliError, CliResult};
use crate::run::{io_err, write_file, write_json, RunDir};

/// Result of a command: the run directory (if one was created) and lines
/// for stdout.
pub struct Report {
    pub run: Option<PathBuf>,
    pub lines: Vec<String>,
}

impl Report {
    fn new(run: &RunDir) -> Self {
        Self {
            run: Some(run.root.clone()),
            lines: Vec::new(),
        }
    }

    fn line(mut self, s: impl Into<String>) -> Self {
        self.lines.push(s.into());
        self
    }
}

fn read_class_map(root: &Path) -> CliResult<ClassMap> {
    let path = root.join("classmap.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    Ok(ClassMap::from_json(&text)?)
}

fn load_split(cfg: &RunConfig, data: Option<&Path>, split: &str) -> CliResult<Dataset> {
    let root = data.unwrap_or(&cfg.dataset.root);
    let ds = load_dataset(root, split)?;
    if ds.is_empty() {
        return Err(CliError::Domain(format!("split {split:?} under {} is empty", root.display())));
    }
    Ok(ds)
}

/// Checkpoint for `name`: an explicit `--ckpt name=path` override, else the
/// role section (`large`, `small`), else a model section with that preset.
fn checkpoint_path(cfg: &RunConfig, overrides: &BTreeMap<String, PathBuf>, name: &str) -> CliResult<PathBuf> {
    if let Some(p) = overrides.get(name) {
        return Ok(p.clone());
    }
    let section = match name {
        "large" => Some(&cfg.model_large),
        "small" => Some(&cfg.model_small),
        other => cfg.model_for(other),
    };
    section
        .and_then(|s| s.checkpoint.clone())
        .ok_or_else(|| CliError::Config(format!("no checkpoint configured for {name:?}")))
}

fn load_generator(cfg: &RunConfig, path: &Path) -> CliResult<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.meta.schedule.steps != cfg.schedule.steps {
        return Err(CliError::Config(format!(
            "{} was trained with T = {}, config has T = {}",
            path.display(),
            ckpt.meta.schedule.steps,
            cfg.schedule.steps
        )));
    }
    Ok(ckpt)
}

pub fn parse_overrides(items: &[String]) -> CliResult<BTreeMap<String, PathBuf>> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.to_string(), PathBuf::from(v)))
                .ok_or_else(|| CliError::Config(format!("expected name=path, got {s:?}")))
        })
        .collect()
}

fn samples_hash(samples: &[DefectSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.image.to_rgb8());
        h.update(&s.mask.data);
    }
    hex::encode(h.finalize())
}

pub fn validate_dataset(root: &Path, split: &str, pool_factor: Option<usize>) -> CliResult<Report> {
    if !root.join(split).is_dir() {
        return Err(CliError::Io(format!("no split {split:?} under {}", root.display())));
    }
    let ds = load_dataset(root, split)?;
    let mut bad = 0;
    for s in &ds.samples {
        let report = validate_sample_with(s, ds.class_map(), pool_factor);
        if !report.is_clean() {
            bad += 1;
            for v in &report.violations {
                eprintln!("{}: {v}", s.sample_id);
            }
        }
    }
    if bad > 0 {
        return Err(CliError::Domain(format!("{bad} of {} samples failed validation", ds.len())));
    }
    Ok(Report {
        run: None,
        lines: vec![format!("{} samples clean", ds.len())],
    })
}

pub fn gen_toy(cfg: &RunConfig) -> CliResult<Report> {
    let spec = cfg.toy_spec();
    let all = synth_toy_dataset(&spec)?;
    let run = RunDir::create("gen-toy", &cfg.hash(), Some(cfg))?;
    let (train_set, val) = all.split_at(cfg.dataset.toy.train_count, &cfg.dataset.split, &cfg.dataset.val_split);
    let root = run.outputs.join("dataset");
    export_dataset(&train_set, &root)?;
    if !val.is_empty() {
        export_dataset(&val, &root)?;
    }
    write_json(&run.meta.join("toy_spec.json"), &spec)?;
    Ok(Report::new(&run).line(format!("dataset={}", root.display())))
}

pub fn train_model(cfg: &RunConfig, model: &str) -> CliResult<Report> {
    let preset = parse_preset(model)?;
    let base = cfg
        .model_for(model)
        .map_or(cfg.model_small.base_channels, |m| m.base_channels);
    let data = load_split(cfg, None, &cfg.dataset.split)?;
    let (h, w) = data.resolution()?;
    if h != w {
        return Err(CliError::Domain(format!("denoisers need square images, got {h}x{w}")));
    }
    let unet = preset.config(3 + data.class_map().n_defect(), h, base)?;
    let tc = cfg.train_config();
    let run = RunDir::create("train", &cfg.hash(), Some(cfg))?;
    let result = train(&unet, &data, &tc)?;
    let dir = run.outputs.join("checkpoint");
    save_checkpoint(&result.checkpoint, &dir)?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in result.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write_file(&run.outputs.join("losses.csv"), csv)?;
    let info = model_info(&result.checkpoint.model);
    write_json(
        &run.meta.join("model_info.json"),
        &serde_json::json!({"params": info.params, "rf": info.rf, "arch_hash": info.arch_hash}),
    )?;
    Ok(Report::new(&run)
        .line(format!("checkpoint={}", dir.display()))
        .line(format!("params={} rf={}", info.params, info.rf))
        .line(format!("weights_hash={}", result.checkpoint.meta.weights_hash)))
}

fn export_generated(
    cfg: &RunConfig,
    run: &RunDir,
    out: &[Tensor<f32>],
    class_map: &ClassMap,
    meta: GenerationMeta,
) -> CliResult<String> {
    let samples = decode_batch(out, class_map, "gen_", cfg.sampler.threshold)?;
    let hash = samples_hash(&samples);
    export_pairs(out, class_map, &run.outputs, "synthetic", &meta)?;
    write_file(&run.outputs.join("samples.sha256"), format!("{hash}\n"))?;
    write_json(&run.meta.join("generation_meta.json"), &meta)?;
    Ok(hash)
}

pub fn sample(
    cfg: &RunConfig,
    u: Option<usize>,
    count: Option<usize>,
    overrides: &BTreeMap<String, PathBuf>,
) -> CliResult<Report> {
    let switch = u.unwrap_or_else(|| cfg.switch());
    let count = count.unwrap_or(cfg.sampler.count);
    let sc = cfg.checked_sampler(switch, count)?;
    let class_map = read_class_map(&cfg.dataset.root)?;
    let large = load_generator(cfg, &checkpoint_path(cfg, overrides, "large")?)?;
    let small = load_generator(cfg, &checkpoint_path(cfg, overrides, "small")?)?;
    let schedule = cfg.schedule_params().build()?;
    let run = RunDir::create("sample", &cfg.hash(), Some(cfg))?;
    let out = sample_two_stage(&large.model, &small.model, &schedule, &sc)?;
    let meta = GenerationMeta {
        steps: sc.steps,
        switch,
        seed: sc.seed,
        count,
        threshold: cfg.sampler.threshold,
        large_weights_hash: Some(large.meta.weights_hash.clone()),
        small_weights_hash: Some(small.meta.weights_hash.clone()),
    };
    let hash = export_generated(cfg, &run, &out, &class_map, meta)?;
    Ok(Report::new(&run).line(format!("samples_sha256={hash}")))
}

pub fn sample_single_cmd(
    cfg: &RunConfig,
    model: &str,
    count: Option<usize>,
    overrides: &BTreeMap<String, PathBuf>,
) -> CliResult<Report> {
    let count = count.unwrap_or(cfg.sampler.count);
    let sc = cfg.checked_sampler(0, count)?;
    let class_map = read_class_map(&cfg.dataset.root)?;
    let ckpt = load_generator(cfg, &checkpoint_path(cfg, overrides, model)?)?;
    let schedule = cfg.schedule_params().build()?;
    let run = RunDir::create("sample-single", &cfg.hash(), Some(cfg))?;
    let out = sample_single(&ckpt.model, &schedule, &sc)?;
    let meta = GenerationMeta {
        steps: sc.steps,
        switch: 0,
        seed: sc.seed,
        count,
        threshold: cfg.sampler.threshold,
        large_weights_hash: None,
        small_weights_hash: Some(ckpt.meta.weights_hash.clone()),
    };
    let hash = export_generated(cfg, &run, &out, &class_map, meta)?;
    Ok(Report::new(&run).line(format!("samples_sha256={hash}")))
}

#[allow(clippy::too_many_arguments)]
fn run_cells(
    cells: &[(usize, usize)],
    large: &Checkpoint,
    smalls: &[(String, Checkpoint)],
    schedule: &NoiseSchedule,
    count: usize,
    seed: u64,
    class_map: &ClassMap,
    reference: &[RgbImage],
    extractor: &RandomConvExtractor,
    jobs: usize,
) -> CliResult<Vec<SweepRow>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<SweepRow>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(rf, u)) = cells.get(i) else { break };
                let (name, small) = &smalls[rf];
                let row = sweep_switch(
                    &large.model,
                    &small.model,
                    name,
                    schedule,
                    &[u],
                    count,
                    seed,
                    class_map,
                    reference,
                    extractor,
                )
                .map(|mut rows| rows.remove(0))
                .map_err(CliError::from);
                results.lock().unwrap()[i] = Some(row);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

pub fn sweep(
    cfg: &RunConfig,
    u_list: &[usize],
    rf_list: &[String],
    count: Option<usize>,
    jobs: usize,
    overrides: &BTreeMap<String, PathBuf>,
) -> CliResult<Report> {
    if u_list.is_empty() || rf_list.is_empty() {
        return Err(CliError::Config("--u-list and --rf-list must be non-empty".into()));
    }
    let count = count.unwrap_or(cfg.sampler.count);
    for &u in u_list {
        cfg.checked_sampler(u, count)?;
    }
    if count < 2 {
        return Err(CliError::Config("diversity needs at least 2 samples per cell".into()));
    }
    for name in rf_list {
        parse_preset(name)?;
    }
    let large = load_generator(cfg, &checkpoint_path(cfg, overrides, "large")?)?;
    let smalls = rf_list
        .iter()
        .map(|n| Ok((n.clone(), load_generator(cfg, &checkpoint_path(cfg, overrides, n)?)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let reference_set = load_split(cfg, None, &cfg.dataset.split)?;
    let reference: Vec<RgbImage> = reference_set.samples.iter().map(|s| s.image.clone()).collect();
    let schedule = cfg.schedule_params().build()?;
    let extractor = RandomConvExtractor::new(cfg.metrics.extractor_seed);
    let run = RunDir::create("sweep", &cfg.hash(), Some(cfg))?;
    let cells: Vec<(usize, usize)> = (0..rf_list.len())
        .flat_map(|r| u_list.iter().map(move |&u| (r, u)))
        .collect();
    let rows = run_cells(
        &cells,
        &large,
        &smalls,
        &schedule,
        count,
        cfg.seed,
        reference_set.class_map(),
        &reference,
        &extractor,
        jobs,
    )?;
    let csv = sweep_csv(&rows);
    write_file(&run.outputs.join("sweep.csv"), &csv)?;
    Ok(Report::new(&run).line(csv.trim_end()))
}

pub fn augment(
    cfg: &RunConfig,
    ratio: Option<f64>,
    ratios: &[f64],
    overrides: &BTreeMap<String, PathBuf>,
) -> CliResult<Report> {
    let real = load_split(cfg, None, &cfg.dataset.split)?;
    let large = load_generator(cfg, &checkpoint_path(cfg, overrides, "large")?)?;
    let small = load_generator(cfg, &checkpoint_path(cfg, overrides, "small")?)?;
    let schedule = cfg.schedule_params().build()?;
    let mut generator = Generator::new(&large.model, &small.model, &schedule, cfg.switch());
    generator.threshold = cfg.sampler.threshold;
    if !ratios.is_empty() {
        let val = load_split(cfg, None, &cfg.dataset.val_split)?;
        if cfg.augment.seeds.is_empty() {
            return Err(CliError::Config("augment.seeds must list at least one seed".into()));
        }
        let run = RunDir::create("augment", &cfg.hash(), Some(cfg))?;
        let sweep = ratio_sweep(
            &real,
            &val,
            ratios,
            &cfg.augment.seeds,
            &generator,
            cfg.augment.filter,
            &cfg.seg_config(cfg.seed),
        )?;
        write_file(&run.outputs.join("ratio_sweep.csv"), sweep.raw_csv())?;
        write_file(&run.outputs.join("ratio_summary.csv"), sweep.summary_csv())?;
        return Ok(Report::new(&run).line(sweep.summary_csv().trim_end()));
    }
    let plan = AugmentPlan {
        ratio: ratio.unwrap_or(cfg.augment.ratio),
        seed: cfg.seed,
        filter: cfg.augment.filter,
    };
    plan.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let run = RunDir::create("augment", &cfg.hash(), Some(cfg))?;
    let out = build_augmented(&real, &plan, &generator)?;
    let root = run.outputs.join("dataset");
    export_dataset(&out, &root)?;
    write_json(&run.meta.join("augment_plan.json"), &plan)?;
    Ok(Report::new(&run)
        .line(format!("dataset={}", root.display()))
        .line(format!("real={} synthetic={}", real.len(), out.len() - real.len())))
}

pub fn seg_train(cfg: &RunConfig, data: Option<&Path>, split: Option<&str>) -> CliResult<Report> {
    let ds = load_split(cfg, data, split.unwrap_or(&cfg.dataset.split))?;
    let sc = cfg.seg_config(cfg.seed);
    sc.validate()?;
    let run = RunDir::create("seg-train", &cfg.hash(), Some(cfg))?;
    let result = train_seg(&ds, &sc)?;
    let dir = run.outputs.join("seg_model");
    save_seg_model(&result.model, &dir)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in result.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write_file(&run.outputs.join("epoch_losses.csv"), csv)?;
    Ok(Report::new(&run)
        .line(format!("model={}", dir.display()))
        .line(format!("weights_hash={}", result.model.weights_hash())))
}

pub fn seg_eval(cfg: &RunConfig, model_dir: &Path, data: Option<&Path>, split: Option<&str>) -> CliResult<Report> {
    let model = load_seg_model(model_dir)?;
    let ds = load_split(cfg, data, split.unwrap_or(&cfg.dataset.val_split))?;
    let run = RunDir::create("seg-eval", &cfg.hash(), Some(cfg))?;
    let report = eval_seg(&model, &ds)?;
    let preds = predict_all(&model, &ds)?;
    let mask_dir = run.outputs.join("pred_masks");
    fs::create_dir_all(&mask_dir).map_err(|e| io_err(&mask_dir, e))?;
    for (s, p) in ds.samples.iter().zip(&preds) {
        save_mask_png(&mask_dir.join(format!("{}.png", s.sample_id)), p)?;
    }
    write_file(&run.outputs.join("classmap.json"), model.class_map.to_json())?;
    write_json(&run.outputs.join("miou.json"), &report)?;
    let mean = report.mean.map_or("none".to_string(), |m| format!("{:.6}", m));
    Ok(Report::new(&run)
        .line(format!("miou={mean}"))
        .line(format!("pred_masks={}", mask_dir.display())))
}

fn find_class_map(explicit: Option<&Path>, gt_dir: &Path) -> CliResult<ClassMap> {
    if let Some(p) = explicit {
        let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        return Ok(ClassMap::from_json(&text)?);
    }
    for dir in gt_dir.ancestors().take(3) {
        if dir.join("classmap.json").exists() {
            return read_class_map(dir);
        }
    }
    Err(CliError::Io(format!(
        "no classmap.json next to {}; pass --classmap",
        gt_dir.display()
    )))
}

fn mask_ids(dir: &Path) -> CliResult<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn qc_sim(
    rules: &Path,
    pred_dir: &Path,
    gt_dir: &Path,
    class_map: Option<&Path>,
    unlisted: UnlistedPolicy,
) -> CliResult<Report> {
    let cm = find_class_map(class_map, gt_dir)?;
    let rule_set = parse_rules(rules, &cm, unlisted)?;
    let ids = mask_ids(gt_dir)?;
    if ids.is_empty() {
        return Err(CliError::Io(format!("no PNG masks in {}", gt_dir.display())));
    }
    let gts = ids
        .iter()
        .map(|id| load_mask_png(&gt_dir.join(format!("{id}.png"))))
        .collect::<Result<Vec<_>, _>>()?;
    let preds = ids
        .iter()
        .map(|id| load_mask_png(&pred_dir.join(format!("{id}.png"))))
        .collect::<Result<Vec<_>, _>>()?;
    let report = evaluate(&ids, &preds, &gts, &rule_set, &cm)?;
    let key = format!("qc-sim|{}|{}|{}|{unlisted:?}", rules.display(), pred_dir.display(), gt_dir.display());
    let hash = hex::encode(Sha256::digest(key.as_bytes()))[..12].to_string();
    let run = RunDir::create("qc-sim", &hash, None)?;
    write_file(&run.outputs.join("qc_report.csv"), report.to_csv())?;
    let summary = report.summary_kv();
    write_file(&run.outputs.join("qc_summary.txt"), &summary)?;
    Ok(Report::new(&run).line(summary.trim_end()))
}
