//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 3 9`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use defectgen_core::augment::{ratio_sweep, AugmentPlan, Generator, RatioSweep, SampleFilter};
use defectgen_core::dataset::{export_dataset, synth_toy_dataset, ClassMap, Dataset, DefectSample, IndexMask, RgbImage, ToySpec};
use defectgen_core::metrics::{
    diversity, fid, fid_from_features, miou, perceptual_distance, ImageLabel, RandomConvExtractor, COV_EPS,
};
use defectgen_core::nn::Parameterized;
use defectgen_core::qc::{classify, evaluate, parse_rules_str, UnlistedPolicy, PILL_RULES, ZIPPER_RULES};
use defectgen_core::rng::{keyed_rng, standard_normal, Domain};
use defectgen_core::sampler::{decode_batch, sample_single, sample_two_stage, SamplerConfig, DEFAULT_THRESHOLD};
use defectgen_core::schedule::{NoiseSchedule, ScheduleParams};
use defectgen_core::seg::{eval_seg, train_seg, SegConfig};
use defectgen_core::trainer::{batch_gradients, batch_loss, draw_batch, encode_dataset, train, TrainConfig};
use defectgen_core::unet::{receptive_field, Denoiser, InitOptions, Preset};
use defectgen_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Shared toy benchmark and generators.

const RES: usize = 64;
const STEPS: usize = 200;
const GEN_ITERS: usize = 2000;
const GEN_BASE: usize = 16;
const CELL_SAMPLES: usize = 64;

struct Bench {
    train: Dataset,
    val: Dataset,
    schedule: NoiseSchedule,
    train_config: TrainConfig,
    large: Denoiser<f32>,
    small: Denoiser<f32>,
}

fn generator_config() -> TrainConfig {
    let mut tc = TrainConfig::desk(STEPS, GEN_ITERS, 1);
    tc.ema_decay = Some(0.995);
    tc
}

fn toy_benchmark() -> (Dataset, Dataset) {
    let all = synth_toy_dataset(&ToySpec::new(65, RES, RES, 1, 11)).unwrap();
    all.split_at(25, "train", "val")
}

fn bench() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| {
        let (train_set, val) = toy_benchmark();
        let tc = generator_config();
        let fit = |p: Preset| {
            let t0 = Instant::now();
            let cfg = p.config(4, RES, GEN_BASE).unwrap();
            let run = train(&cfg, &train_set, &tc).unwrap();
            eprintln!(
                "  trained {} generator: {} iterations, {:.0}s",
                p.name(),
                GEN_ITERS,
                t0.elapsed().as_secs_f64()
            );
            run.checkpoint.model
        };
        Bench {
            schedule: tc.schedule.build().unwrap(),
            large: fit(Preset::Large),
            small: fit(Preset::Small),
            train: train_set,
            val,
            train_config: tc,
        }
    })
}

fn sample_hash(samples: &[DefectSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.image.to_rgb8());
        h.update(&s.mask.data);
    }
    hex::encode(h.finalize())
}

// ---------------------------------------------------------------------------
// 1. Schedule.

fn criterion_1() -> Outcome {
    let s = ScheduleParams::ddpm_scaled(STEPS).build().map_err(|e| e.to_string())?;
    let x0_vals: Vec<f64> = (0..16).map(|i| -0.9 + 0.12 * i as f64).collect();
    let x0 = Tensor::from_vec([1, 1, 1, 16], x0_vals.clone()).unwrap();
    let draws = 10_000;
    let mut worst = 0.0f64;
    let mut worst_inv = 0.0f64;
    for t in [1, STEPS / 2, STEPS] {
        let ab = s.alpha_bar(t);
        let mut sum = [0.0; 16];
        let mut sq = [0.0; 16];
        for d in 0..draws {
            let eps: Tensor<f64> = standard_normal(&mut keyed_rng(7, Domain::Toy, t as u64, d), [1, 1, 1, 16]);
            let xt = ok(s.q_sample(&x0, t, &eps))?;
            for (k, &v) in xt.data().iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
            let back = ok(s.predict_x0(&xt, t, &eps))?;
            worst_inv = worst_inv.max(back.max_abs_diff(&x0));
        }
        for k in 0..16 {
            let mean = sum[k] / draws as f64;
            let var = sq[k] / draws as f64 - mean * mean;
            worst = worst.max((mean - ab.sqrt() * x0_vals[k]).abs());
            worst = worst.max((var - (1.0 - ab)).abs());
        }
    }
    ensure(worst <= 0.05, format!("moment error {worst:.4} > 0.05"))?;
    ensure(worst_inv <= 1e-9, format!("inversion error {worst_inv:e}"))?;
    Ok(format!("max moment error {worst:.4} (tol 0.05), max inversion error {worst_inv:.1e}"))
}

// ---------------------------------------------------------------------------
// 2. Locality.

fn criterion_2() -> Outcome {
    let res = 64;
    let cfg = Preset::Small.config(4, res, 8).unwrap();
    let report = receptive_field(&cfg);
    let model = Denoiser::<f64>::with_options(cfg, 3, InitOptions { zero_output: false }).unwrap();
    let x: Tensor<f64> = standard_normal(&mut keyed_rng(21, Domain::Toy, 0, 0), [1, 4, res, res]);
    let y0 = ok(model.forward(&x, &[17]))?;
    let mut rng = keyed_rng(22, Domain::Toy, 0, 0);
    for _ in 0..3 {
        let (c, r, q) = (rng.random_range(0..4), rng.random_range(0..res), rng.random_range(0..res));
        let mut xp = x.clone();
        *xp.at_mut(0, c, r, q) += 1.0;
        let y1 = ok(model.forward(&xp, &[17]))?;
        let mut measured = BTreeSet::new();
        for ch in 0..4 {
            for i in 0..res {
                for j in 0..res {
                    if y0.at(0, ch, i, j) != y1.at(0, ch, i, j) {
                        measured.insert((i, j));
                    }
                }
            }
        }
        let mut expected = BTreeSet::new();
        for i in 0..res {
            for j in 0..res {
                let (r0, r1, c0, c1) = report.input_box(i, j, res);
                if (r0..=r1).contains(&r) && (c0..=c1).contains(&q) {
                    expected.insert((i, j));
                }
            }
        }
        ensure(
            measured.is_subset(&expected),
            format!("impulse at ({r},{q}) reached outputs outside the receptive field"),
        )?;
        ensure(measured == expected, format!("impulse at ({r},{q}): support differs from analytic footprint"))?;
    }
    let large_rf = receptive_field(&Preset::Large.config(4, res, 8).unwrap()).rf;
    ensure(large_rf > report.rf, format!("large rf {large_rf} <= small rf {}", report.rf))?;
    Ok(format!("3 impulses match the analytic support; rf small {} < large {large_rf}", report.rf))
}

// ---------------------------------------------------------------------------
// 3. Degenerate sampler equivalence.

fn criterion_3() -> Outcome {
    let model = |p: Preset, seed| {
        Denoiser::<f32>::with_options(p.config(4, 32, 8).unwrap(), seed, InitOptions { zero_output: false }).unwrap()
    };
    let (large, small) = (model(Preset::Large, 31), model(Preset::Small, 32));
    let s = ScheduleParams::ddpm_scaled(50).build().unwrap();
    let all_large = SamplerConfig::new(50, 50, 4, 9);
    let a = ok(sample_two_stage(&large, &small, &s, &all_large))?;
    ensure(a == ok(sample_single(&large, &s, &all_large))?, "u = T differs from large-only")?;
    let all_small = SamplerConfig::new(50, 0, 4, 9);
    let b = ok(sample_two_stage(&large, &small, &s, &all_small))?;
    ensure(b == ok(sample_single(&small, &s, &all_small))?, "u = 0 differs from small-only")?;
    Ok("u = T and u = 0 are bit-identical to single-model chains (T = 50, 4 samples)".into())
}

// ---------------------------------------------------------------------------
// 4. Diversity and fidelity trends over the switch point.

struct Cell {
    u: usize,
    fid: f64,
    diversity: f64,
    hash: String,
}

fn sweep_switches() -> [usize; 4] {
    [STEPS / 20, STEPS / 4, STEPS / 2, STEPS]
}

fn run_cell(b: &Bench, u: usize, seed: u64) -> Cell {
    let f = RandomConvExtractor::new(0);
    let refs: Vec<RgbImage> = b.train.samples.iter().map(|s| s.image.clone()).collect();
    let cfg = SamplerConfig::new(STEPS, u, CELL_SAMPLES, seed);
    let out = sample_two_stage(&b.large, &b.small, &b.schedule, &cfg).unwrap();
    let samples = decode_batch(&out, b.train.class_map(), "gen_", DEFAULT_THRESHOLD).unwrap();
    let images: Vec<RgbImage> = samples.iter().map(|s| s.image.clone()).collect();
    Cell {
        u,
        fid: fid(&images, &refs, &f).unwrap(),
        diversity: diversity(&images, &f).unwrap(),
        hash: sample_hash(&samples),
    }
}

fn sweep_cells() -> &'static Vec<Vec<Cell>> {
    static C: OnceLock<Vec<Vec<Cell>>> = OnceLock::new();
    C.get_or_init(|| {
        let b = bench();
        (0..3u64)
            .map(|seed| {
                let t0 = Instant::now();
                let cells: Vec<Cell> = sweep_switches().iter().map(|&u| run_cell(b, u, seed)).collect();
                let line: Vec<String> = cells
                    .iter()
                    .map(|c| format!("u={} fid={:.3e} div={:.4}", c.u, c.fid, c.diversity))
                    .collect();
                eprintln!("  seed {seed}: {} ({:.0}s)", line.join(", "), t0.elapsed().as_secs_f64());
                cells
            })
            .collect()
    })
}

/// Spearman rank correlation with average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn criterion_4() -> Outcome {
    let cells = sweep_cells();
    let (mut a_votes, mut div_votes, mut fid_votes) = (0, 0, 0);
    let mut notes = Vec::new();
    for (seed, row) in cells.iter().enumerate() {
        let two_stage = &row[0];
        let large_only = &row[3];
        let trend = &row[..3];
        let us: Vec<f64> = trend.iter().map(|c| c.u as f64).collect();
        let rho_div = spearman(&us, &trend.iter().map(|c| c.diversity).collect::<Vec<_>>());
        let rho_fid = spearman(&us, &trend.iter().map(|c| c.fid).collect::<Vec<_>>());
        a_votes += usize::from(two_stage.diversity > large_only.diversity);
        div_votes += usize::from(rho_div <= 0.0);
        fid_votes += usize::from(rho_fid <= 0.0);
        notes.push(format!("seed {seed}: rho_div {rho_div:+.2}, rho_fid {rho_fid:+.2}"));
    }
    let detail = format!(
        "two-stage > large-only diversity in {a_votes}/3 seeds; diversity non-increasing {div_votes}/3; FID non-increasing {fid_votes}/3 [{}]",
        notes.join("; ")
    );
    if a_votes >= 2 && div_votes >= 2 && fid_votes >= 2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 5. Augmentation boost.

fn seg_config() -> SegConfig {
    SegConfig::new(10, 0)
}

fn augmentation_sweep() -> &'static RatioSweep {
    static S: OnceLock<RatioSweep> = OnceLock::new();
    S.get_or_init(|| {
        let b = bench();
        let g = Generator::new(&b.large, &b.small, &b.schedule, SamplerConfig::default_switch(STEPS));
        let t0 = Instant::now();
        let sweep = ratio_sweep(&b.train, &b.val, &[0.0, 1.0], &[0, 1, 2, 3, 4], &g, SampleFilter::default(), &seg_config())
            .unwrap();
        eprintln!("  augmentation sweep ({:.0}s):\n{}", t0.elapsed().as_secs_f64(), sweep.raw_csv().trim_end());
        sweep
    })
}

fn criterion_5() -> Outcome {
    let sweep = augmentation_sweep();
    let base = sweep.row(0.0).ok_or("missing ratio 0 row")?;
    let aug = sweep.row(1.0).ok_or("missing ratio 1 row")?;
    let gain = aug.mean - base.mean;
    let detail = format!(
        "mIoU {:.2} ± {:.2} -> {:.2} ± {:.2} over 5 seeds, gain {gain:+.2} points (need >= 1.0)",
        base.mean, base.stddev, aug.mean, aug.stddev
    );
    if gain >= 1.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 6. Metric oracles.

fn fid_oracle_2d(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let stats = |x: &[Vec<f64>]| {
        let n = x.len() as f64;
        let m = [x.iter().map(|v| v[0]).sum::<f64>() / n, x.iter().map(|v| v[1]).sum::<f64>() / n];
        let mut c = [[0.0; 2]; 2];
        for v in x {
            for i in 0..2 {
                for j in 0..2 {
                    c[i][j] += (v[i] - m[i]) * (v[j] - m[j]) / (n - 1.0);
                }
            }
        }
        c[0][0] += COV_EPS;
        c[1][1] += COV_EPS;
        (m, c)
    };
    let ((ma, ca), (mb, cb)) = (stats(a), stats(b));
    let p = |i: usize, j: usize| ca[i][0] * cb[0][j] + ca[i][1] * cb[1][j];
    let tr = p(0, 0) + p(1, 1);
    let det = p(0, 0) * p(1, 1) - p(0, 1) * p(1, 0);
    let dm = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2);
    dm + ca[0][0] + ca[1][1] + cb[0][0] + cb[1][1] - 2.0 * (tr + 2.0 * det.sqrt()).sqrt()
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut gauss = |n: usize, shift: f64, mix: [[f64; 2]; 2]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                vec![
                    shift + mix[0][0] * z[0] + mix[0][1] * z[1],
                    -shift + mix[1][0] * z[0] + mix[1][1] * z[1],
                ]
            })
            .collect()
    };
    let mut fid_err = 0.0f64;
    for k in 0..10 {
        let a = gauss(50, 0.1 * k as f64, [[1.0, 0.3], [0.2, 0.8]]);
        let b = gauss(60, 0.5, [[0.6, -0.2], [0.3, 1.2]]);
        fid_err = fid_err.max((ok(fid_from_features(&a, &b))? - fid_oracle_2d(&a, &b)).abs());
    }
    ensure(fid_err < 1e-8, format!("fid differs from 2-D oracle by {fid_err:e}"))?;

    let f = RandomConvExtractor::new(6);
    let data = synth_toy_dataset(&ToySpec::new(12, 32, 32, 2, 66)).unwrap();
    let imgs: Vec<RgbImage> = data.samples.iter().map(|s| s.image.clone()).collect();
    let (a, b) = (&imgs[..6], &imgs[6..]);
    let self_fid = ok(fid(a, a, &f))?;
    ensure(self_fid <= 1e-6, format!("fid(A, A) = {self_fid:e}"))?;
    let asym = (ok(fid(a, b, &f))? - ok(fid(b, a, &f))?).abs();
    ensure(asym <= 1e-9, format!("fid asymmetry {asym:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let rand_mask = |rng: &mut ChaCha8Rng| IndexMask::new(8, 8, (0..64).map(|_| rng.random_range(0..4)).collect()).unwrap();
    let preds: Vec<IndexMask> = (0..100).map(|_| rand_mask(&mut rng)).collect();
    let gts: Vec<IndexMask> = (0..100).map(|_| rand_mask(&mut rng)).collect();
    let report = ok(miou(&preds, &gts, 4))?;
    let mut ious = Vec::new();
    for k in 1..4u8 {
        let (mut inter, mut union) = (BTreeSet::new(), BTreeSet::new());
        for (img, (p, g)) in preds.iter().zip(&gts).enumerate() {
            for px in 0..64 {
                let (x, y) = (p.data[px] == k, g.data[px] == k);
                if x && y {
                    inter.insert((img, px));
                }
                if x || y {
                    union.insert((img, px));
                }
            }
        }
        ious.push(inter.len() as f64 / union.len() as f64);
    }
    let brute_mean = ious.iter().sum::<f64>() / 3.0;
    ensure(report.mean == Some(brute_mean), format!("miou {:?} vs pixel count {brute_mean}", report.mean))?;

    let n = imgs.len();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += ok(perceptual_distance(&f, &imgs[i], &imgs[j]))?;
        }
    }
    let div = ok(diversity(&imgs, &f))?;
    ensure(div == sum / (n * (n - 1) / 2) as f64, format!("diversity {div} vs enumeration"))?;
    Ok(format!(
        "fid vs 2-D oracle {fid_err:.1e}, fid(A,A) {self_fid:.1e}, asymmetry {asym:.1e}, miou and diversity exact"
    ))
}

// ---------------------------------------------------------------------------
// 7. QC engine.

fn criterion_7() -> Outcome {
    let pill = ClassMap::with_defects(["cracks", "contamination", "color_stains"]).unwrap();
    let rules = ok(parse_rules_str(PILL_RULES, "pill", &pill, UnlistedPolicy::Forbidden))?;
    let mut m = IndexMask::zeros(100, 100);
    m.data[..3999].iter_mut().for_each(|v| *v = 2);
    ensure(ok(classify(&m, &rules, &pill))?.label == ImageLabel::Benign, "contamination 3999 not benign")?;
    m.data[3999] = 2;
    ensure(ok(classify(&m, &rules, &pill))?.label == ImageLabel::Defective, "contamination 4000 not defective")?;

    let zip = ClassMap::with_defects(["teeth", "fabric"]).unwrap();
    let zr = ok(parse_rules_str(ZIPPER_RULES, "zipper", &zip, UnlistedPolicy::Forbidden))?;
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for _ in 0..5 {
        let mut t = IndexMask::zeros(64, 64);
        t.data[rng.random_range(0..4096)] = 1;
        ensure(ok(classify(&t, &zr, &zip))?.label == ImageLabel::Defective, "single teeth pixel not defective")?;
    }

    let limits = [None, Some(4000usize), Some(300)];
    let oracle = |mask: &IndexMask| -> bool {
        (1..=3).any(|k| {
            let count = mask.data.iter().filter(|&&v| v == k as u8).count();
            match limits[k - 1] {
                None => count > 0,
                Some(lim) => count >= lim,
            }
        })
    };
    let random = |rng: &mut ChaCha8Rng| {
        let mut m = IndexMask::zeros(90, 90);
        let mut idx: Vec<usize> = (0..8100).collect();
        idx.shuffle(rng);
        let mut at = 0;
        for (k, hi) in [(1u8, 3usize), (2, 4600), (3, 420)] {
            if rng.random_bool(0.4) {
                let n = rng.random_range(0..hi);
                idx[at..at + n].iter().for_each(|&p| m.data[p] = k);
                at += n;
            }
        }
        m
    };
    let preds: Vec<IndexMask> = (0..30).map(|_| random(&mut rng)).collect();
    let gts: Vec<IndexMask> = (0..30).map(|_| random(&mut rng)).collect();
    let ids: Vec<String> = (0..30).map(|i| format!("img{i}")).collect();
    let report = ok(evaluate(&ids, &preds, &gts, &rules, &pill))?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(&gts) {
        match (oracle(p), oracle(g)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let c = &report.confusion;
    ensure((c.tp, c.fp, c.tn, c.fn_) == (tp, fp, tn, fn_), "confusion differs from oracle")?;
    let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let fpr = (tn + fp > 0).then(|| fp as f64 / (tn + fp) as f64);
    ensure(c.recall == recall && c.fpr == fpr, "recall/fpr formulas differ")?;
    Ok(format!(
        "forced decisions hold; 30-image confusion tp={tp} fp={fp} tn={tn} fn={fn_} matches oracle"
    ))
}

// ---------------------------------------------------------------------------
// 8. Reproducibility.

fn export_hash(data: &Dataset) -> Result<String, String> {
    let dir = ok(tempfile::tempdir())?;
    ok(export_dataset(data, dir.path()))?;
    let mut files: Vec<_> = walk(dir.path());
    files.sort();
    let mut h = Sha256::new();
    for p in files {
        h.update(p.strip_prefix(dir.path()).unwrap().to_string_lossy().as_bytes());
        h.update(ok(std::fs::read(&p))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn criterion_8() -> Outcome {
    let b = bench();
    let (train_set, _) = toy_benchmark();
    ensure(export_hash(&train_set)? == export_hash(&b.train)?, "toy dataset export differs")?;

    let small_cfg = Preset::Small.config(4, RES, GEN_BASE).unwrap();
    let rerun = ok(train(&small_cfg, &train_set, &b.train_config))?;
    ensure(
        rerun.checkpoint.model.weights_hash() == b.small.weights_hash(),
        "small generator retrain gave different weights",
    )?;
    let mut short = b.train_config.clone();
    short.iterations = 50;
    let large_cfg = Preset::Large.config(4, RES, GEN_BASE).unwrap();
    let l1 = ok(train(&large_cfg, &train_set, &short))?;
    let l2 = ok(train(&large_cfg, &train_set, &short))?;
    ensure(l1.checkpoint.meta == l2.checkpoint.meta, "large generator runs differ")?;

    let cell = run_cell(b, sweep_switches()[0], 0);
    let first = &sweep_cells()[0][0];
    ensure(cell.hash == first.hash, "re-sampled cell has different sample bytes")?;
    ensure(
        cell.fid.to_bits() == first.fid.to_bits() && cell.diversity.to_bits() == first.diversity.to_bits(),
        "re-scored cell differs",
    )?;

    let sweep = augmentation_sweep();
    let g = Generator::new(&b.large, &b.small, &b.schedule, SamplerConfig::default_switch(STEPS));
    let aug = ok(defectgen_core::augment::build_augmented(&b.train, &AugmentPlan::new(1.0, 0), &g))?;
    let aug2 = ok(defectgen_core::augment::build_augmented(&b.train, &AugmentPlan::new(1.0, 0), &g))?;
    ensure(export_hash(&aug)? == export_hash(&aug2)?, "augmented exports differ")?;
    let model = ok(train_seg(&aug, &seg_config()))?.model;
    let score = 100.0 * ok(eval_seg(&model, &b.val))?.mean_or_zero();
    let recorded = sweep.row(1.0).unwrap().values[0];
    ensure(score.to_bits() == recorded.to_bits(), format!("seg rerun {score} vs recorded {recorded}"))?;
    Ok(format!(
        "dataset export, generator weights ({}), samples ({}…), metrics and seg mIoU reproduce bit-exactly",
        &b.small.weights_hash()[..12],
        &first.hash[..12]
    ))
}

// ---------------------------------------------------------------------------
// 9. Gradient check.

fn criterion_9() -> Outcome {
    let cfg = Preset::Small.config(4, 8, 8).unwrap();
    let data = synth_toy_dataset(&ToySpec {
        pool_factor: 4,
        ..ToySpec::new(4, 8, 8, 1, 91)
    })
    .unwrap();
    let pairs: Vec<Tensor<f64>> = ok(encode_dataset(&cfg, &data))?.iter().map(|p| p.cast()).collect();
    let mut model = Denoiser::<f64>::with_options(cfg, 9, InitOptions { zero_output: false }).unwrap();
    let schedule = ScheduleParams::ddpm_scaled(STEPS).build().unwrap();
    let batch = draw_batch::<f64>(9, 0, 3, pairs.len(), STEPS, [4, 8, 8]);
    let x0: Vec<&Tensor<f64>> = batch.indices.iter().map(|&i| &pairs[i]).collect();
    model.zero_grad();
    ok(batch_gradients(&mut model, &schedule, &x0, &batch.t, &batch.eps))?;
    let grads = model.flat_grads();
    let base = model.flat_values();
    let mut rng = ChaCha8Rng::seed_from_u64(92);
    let mut picks = Vec::new();
    while picks.len() < 10 {
        let i = rng.random_range(0..grads.len());
        if grads[i].abs() > 1e-6 && !picks.contains(&i) {
            picks.push(i);
        }
    }
    let mut worst = 0.0f64;
    for &i in &picks {
        let h = 1e-5;
        let mut w = base.clone();
        w[i] = base[i] + h;
        model.load_flat(&w);
        let up = ok(batch_loss(&model, &schedule, &x0, &batch.t, &batch.eps))?;
        w[i] = base[i] - h;
        model.load_flat(&w);
        let down = ok(batch_loss(&model, &schedule, &x0, &batch.t, &batch.eps))?;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs());
        worst = worst.max(rel);
    }
    model.load_flat(&base);
    ensure(worst < 1e-3, format!("max relative error {worst:e}"))?;
    Ok(format!("10 weights, max relative error {worst:.1e} (tol 1e-3)"))
}

// ---------------------------------------------------------------------------

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "schedule moments and inversion", criterion_1),
        (2, "locality", criterion_2),
        (3, "degenerate sampler equivalence", criterion_3),
        (6, "metric oracles", criterion_6),
        (7, "qc engine", criterion_7),
        (9, "gradient check", criterion_9),
        (4, "diversity/fidelity trend over u", criterion_4),
        (5, "augmentation boost", criterion_5),
        (8, "reproducibility", criterion_8),
    ];
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut results = Vec::new();
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let line = format!("criterion {n} {tag}: {name} ({secs:.1}s): {detail}");
        println!("{line}");
        results.push((n, outcome.is_ok(), line));
    }
    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary:");
    for (_, _, line) in &results {
        println!("  {line}");
    }
    let failed = results.iter().filter(|r| !r.1).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
