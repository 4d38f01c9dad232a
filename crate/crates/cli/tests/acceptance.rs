//! Acceptance suite: one PASS/FAIL line per criterion, then a non-zero exit
//! if any failed. Runs without the libtest harness so every line is printed.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usbone_core::bonemap::{bone_map_layers, riesz_monogenic};
use usbone_core::phantom::{generate, PhantomConfig};
use usbone_core::{apply_tga, build_scale_stack, eval_hit_rate, BoneMapConfig, Frame, Grid, KeypointSet, TgaConfig};
use usbone_transporter::keypoints::transport;
use usbone_transporter::{gradcheck, infer_sequence, train, train_to_dir, Dataset, NetworkSpec, Tensor, TrainConfig};

// Tolerances and thresholds.
const TGA_EXPECTED: f64 = 0.31606;
const TGA_TOL: f64 = 1e-5;
const TGA_MAX_TIME: Duration = Duration::from_secs(1);
const GABOR_TOL: f64 = 1e-12;
const RIESZ_FRAMES: u64 = 20;
const RIESZ_REL_TOL: f64 = 1e-6;
const ARGMAX_TOL_PX: f64 = 3.0;
const ARGMAX_MIN_FRACTION: f64 = 0.90;
const ROI_MIN_MASS: f64 = 0.50;
const ROI_MAX_AREA: f64 = 0.25;
const AUDIT_MAX_TIME: Duration = Duration::from_secs(300);
const SMOKE_MAX_RATIO: f64 = 0.5;
const SMOKE_MAX_TIME: Duration = Duration::from_secs(600);
const HIT_RATE_MIN: f64 = 0.70;
const LR_TOL: f64 = 1e-12;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// TGA attenuation that keeps the default depth profile at `size` pixels.
fn tga_for(size: usize) -> TgaConfig {
    TgaConfig {
        attenuation_a: 0.01 * 256.0 / size as f64,
    }
}

fn criterion_1() -> Outcome {
    let frame = Frame::constant(256, 256, 0.5).unwrap();
    let start = Instant::now();
    let out = apply_tga(&frame, &TgaConfig { attenuation_a: 0.01 }).unwrap();
    let elapsed = start.elapsed();
    let v = out.get(100, 17);
    let row0 = out.row(0).iter().all(|&x| x == 0.0);
    check(
        (v - TGA_EXPECTED).abs() <= TGA_TOL && row0 && elapsed < TGA_MAX_TIME,
        format!("depth 100 -> {v:.6}, row 0 exactly zero: {row0}, {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let cfg = BoneMapConfig::default();
    let mut worst_peak: f64 = 0.0;
    let mut worst_sym: f64 = 0.0;
    for i in 0..cfg.scales.len() {
        let g = cfg.gabor(i).unwrap();
        let w0 = g.omega0();
        worst_peak = worst_peak.max((g.gain(w0) - 1.0).abs());
        worst_sym = worst_sym.max((g.gain(2.0 * w0) - g.gain(w0 / 2.0)).abs());
    }
    check(
        worst_peak <= GABOR_TOL && worst_sym <= GABOR_TOL,
        format!("scales {:?}: peak error {worst_peak:.1e}, symmetry error {worst_sym:.1e}", cfg.scales),
    )
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..RIESZ_FRAMES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::from_fn(64, 64, |_, _| rng.random_range(0.0..1.0));
        let m = riesz_monogenic(&g);
        let mean = g.mean();
        let input: f64 = g.data().iter().map(|v| (v - mean).powi(2)).sum();
        let out = m.m2.sum_sq() + m.m3.sum_sq();
        worst = worst.max(((out - input) / input).abs());
    }
    check(
        worst <= RIESZ_REL_TOL,
        format!("{RIESZ_FRAMES} frames, worst relative energy error {worst:.1e}"),
    )
}

fn criterion_4() -> Outcome {
    let cfg = PhantomConfig {
        frames: 8,
        ..PhantomConfig::default()
    };
    let (seq, truth) = generate(&cfg).unwrap();
    let bonemap = BoneMapConfig::default();
    let scale = bonemap.scales.iter().position(|&s| s == 16.0).unwrap();
    let tga = apply_tga(&seq.frames()[0], &TgaConfig::default()).unwrap();
    let map = bone_map_layers(&tga, &bonemap, scale).unwrap().bone;
    let (h, w) = map.dims();
    let mut good = 0;
    for c in 0..w {
        let depth = truth.curves[0][c].unwrap();
        let argmax = (0..h)
            .max_by(|&a, &b| map.get(a, c).total_cmp(&map.get(b, c)))
            .unwrap();
        if (argmax as f64 - depth).abs() <= ARGMAX_TOL_PX {
            good += 1;
        }
    }
    let fraction = good as f64 / w as f64;
    let roi = truth.truth_roi(0, 10).unwrap();
    let mut inside = 0.0;
    for r in 0..h {
        for c in 0..w {
            if roi.contains_pixel(r, c) {
                inside += map.get(r, c);
            }
        }
    }
    let mass = inside / map.data().iter().sum::<f64>();
    let area = roi.area() as f64 / (h * w) as f64;
    check(
        fraction >= ARGMAX_MIN_FRACTION && mass >= ROI_MIN_MASS && area < ROI_MAX_AREA,
        format!("argmax within 3 px in {fraction:.3} of columns, ROI mass {mass:.3}, ROI area {area:.3}"),
    )
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    let mut failures = Vec::new();
    for (name, run) in gradcheck::CHECKS {
        match run() {
            Ok(n) => checked += n,
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "{} operations x {} instances, {checked} coordinates, {elapsed:.1?}",
        gradcheck::CHECKS.len(),
        gradcheck::INSTANCES
    );
    if failures.is_empty() && elapsed < AUDIT_MAX_TIME {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rand = |shape| Tensor::<f32>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let (ps, pt) = (rand([3, 8, 12, 10]), rand([3, 8, 12, 10]));
    let zeros = Tensor::<f32>::zeros([3, 1, 12, 10]);
    let ones = Tensor::<f32>::full([3, 1, 12, 10], 1.0);
    let any = rand([3, 1, 12, 10]).map(|v| v.abs());
    let none = transport(&ps, &pt, &zeros, &zeros).unwrap() == ps;
    let full = transport(&ps, &pt, &any, &ones).unwrap() == pt;
    let erase = transport(&ps, &pt, &ones, &zeros).unwrap().data().iter().all(|&v| v == 0.0);
    check(
        none && full && erase,
        format!("no-transport {none}, full-transport {full}, erase-only {erase}"),
    )
}

fn phantom_dataset(size: usize, frames: usize, seed: u64) -> Dataset {
    let cfg = PhantomConfig {
        frames,
        seed,
        ..PhantomConfig::scaled(size)
    };
    let (seq, _) = generate(&cfg).unwrap();
    Dataset::build(&[seq], &tga_for(size), &BoneMapConfig::default()).unwrap()
}

fn criterion_7() -> Outcome {
    let data = phantom_dataset(32, 48, 3);
    let cfg = TrainConfig {
        epochs: 25,
        batch_size: 8,
        train_pairs: 64,
        val_pairs: 16,
        seed: 7,
        ..TrainConfig::default()
    };
    let spec = NetworkSpec {
        keypoints: 3,
        ..NetworkSpec::default()
    };
    let start = Instant::now();
    let a = train(&data, &cfg, &spec, |_, _| Ok(())).unwrap();
    let elapsed = start.elapsed();
    let b = train(&data, &cfg, &spec, |_, _| Ok(())).unwrap();
    let initial = a.step_losses[0];
    let last = a.metrics.last().unwrap().train_loss;
    let same = a.metrics == b.metrics && a.step_losses == b.step_losses;
    check(
        a.step_losses.len() == 200 && last < SMOKE_MAX_RATIO * initial && same && elapsed < SMOKE_MAX_TIME,
        format!(
            "{} steps, loss {initial:.5} -> {last:.5} (ratio {:.3}), identical reruns {same}, {elapsed:.1?} per run",
            a.step_losses.len(),
            last / initial
        ),
    )
}

fn criterion_8() -> Outcome {
    const SIZE: usize = 64;
    let tga = tga_for(SIZE);
    let bonemap = BoneMapConfig::default();
    let train_cfg = PhantomConfig {
        seed: 0,
        ..PhantomConfig::scaled(SIZE)
    };
    let (train_seq, _) = generate(&train_cfg).unwrap();
    let data = Dataset::build(&[train_seq], &tga, &bonemap).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        train_pairs: 256,
        val_pairs: 64,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut model = train(&data, &cfg, &NetworkSpec::default(), |_, _| Ok(())).unwrap().model;
    let elapsed = start.elapsed();

    let test_cfg = PhantomConfig {
        frames: 250,
        seed: 1,
        ..PhantomConfig::scaled(SIZE)
    };
    let (test_seq, truth) = generate(&test_cfg).unwrap();
    let kps = infer_sequence(&mut model, &test_seq, &tga, &bonemap, 16).unwrap();
    let rois: Vec<_> = (0..truth.frames()).map(|i| truth.truth_roi(i, 10).unwrap()).collect();
    let report = eval_hit_rate(&kps, &rois, 1).unwrap();
    let area = rois.iter().map(|r| r.area()).sum::<usize>() as f64 / (rois.len() * SIZE * SIZE) as f64;

    // Context only: a fixed keypoint at the frame centre, and how far the
    // nearest learned keypoint sits from the true surface in its column.
    let centre = (SIZE as f64 - 1.0) / 2.0;
    let fixed: Vec<KeypointSet> = (0..rois.len())
        .map(|_| KeypointSet { points: vec![[centre, centre]], resolution: (SIZE, SIZE) })
        .collect();
    let baseline = eval_hit_rate(&fixed, &rois, 1).unwrap().hit_rate;
    let mut gaps: Vec<f64> = kps
        .iter()
        .enumerate()
        .map(|(i, k)| {
            k.points
                .iter()
                .map(|p| {
                    let col = (p[1].round() as usize).min(SIZE - 1);
                    truth.curves[i][col].map_or(f64::INFINITY, |d| (p[0] - d).abs())
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    check(
        report.hit_rate >= HIT_RATE_MIN,
        format!(
            "{}/{} held-out frames hit (rate {:.3}); mean ROI area {area:.2} of frame, fixed-centre baseline {baseline:.3}, \
             median nearest-keypoint distance to surface {:.1} px; trained in {elapsed:.0?}",
            report.frames_hit, report.frames_evaluated, report.hit_rate, gaps[gaps.len() / 2]
        ),
    )
}

fn criterion_9() -> Outcome {
    let data = Dataset::from_tensors(vec![(0..6)
        .map(|i| Tensor::<f32>::full([1, 1, 8, 8], i as f32 / 6.0))
        .collect()])
    .unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        train_pairs: 1,
        val_pairs: 1,
        pair_separation: 1,
        ..TrainConfig::default()
    };
    let spec = NetworkSpec {
        widths: [1, 1, 1, 1, 1, 1],
        keypoints: 1,
        ..NetworkSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    train_to_dir(&data, &cfg, &spec, dir.path()).unwrap();
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lrs: Vec<f64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["lr"].as_f64().unwrap())
        .collect();
    let expect = |e: usize| match e {
        0..=9 => 0.001,
        10..=19 => 0.00095,
        _ => 0.001 * 0.95f64.powi((e / 10) as i32),
    };
    let worst = lrs.iter().enumerate().map(|(e, lr)| (lr - expect(e)).abs()).fold(0.0, f64::max);
    let last = lrs.last().copied().unwrap_or(f64::NAN);
    let epoch99 = (last - 0.001 * 0.95f64.powi(9)).abs();
    check(
        lrs.len() == 100 && worst <= LR_TOL && epoch99 <= LR_TOL,
        format!("{} logged epochs, epoch 99 lr {last:.12e}, worst deviation {worst:.1e}", lrs.len()),
    )
}

fn bonemap_bits(frame: &Frame, cfg: &BoneMapConfig) -> Vec<u64> {
    let stack = build_scale_stack(frame, cfg).unwrap();
    stack.channels().iter().flat_map(|c| c.data().iter().map(|v| v.to_bits())).collect()
}

fn cli_bonemap_bytes(input: &Path, out: &Path) -> Vec<Vec<u8>> {
    let args = ["usbone", "bonemap", "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert_eq!(usbone::run(args), 0);
    let mut files: Vec<_> = walk(out);
    files.sort();
    files.iter().map(|f| std::fs::read(f).unwrap()).collect()
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
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

fn criterion_10() -> Outcome {
    let cfg = PhantomConfig {
        frames: 3,
        seed: 10,
        ..PhantomConfig::scaled(128)
    };
    let (seq, _) = generate(&cfg).unwrap();
    let frame = apply_tga(&seq.frames()[1], &tga_for(128)).unwrap();
    let bonemap = BoneMapConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let video = dir.path().join("video");
    usbone_core::io::save_video(&seq, &video).unwrap();

    let mut maps = Vec::new();
    let mut files = Vec::new();
    for (run, threads) in [1, 4, 1, 4].into_iter().enumerate() {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        maps.push(pool.install(|| bonemap_bits(&frame, &bonemap)));
        let out = dir.path().join(format!("maps_{run}"));
        files.push(pool.install(|| cli_bonemap_bytes(&video, &out)));
    }
    let maps_equal = maps.windows(2).all(|w| w[0] == w[1]);
    let files_equal = files.windows(2).all(|w| w[0] == w[1]);
    check(
        maps_equal && files_equal && !files[0].is_empty(),
        format!(
            "4 runs on 1 and 4 threads: in-memory maps identical {maps_equal}, {} CLI output files identical {files_equal}",
            files[0].len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("closed-form TGA", criterion_1),
        ("log-Gabor unit peak and log-symmetry", criterion_2),
        ("Riesz energy preservation", criterion_3),
        ("bone-map localization on the default phantom", criterion_4),
        ("finite-difference gradient audit", criterion_5),
        ("transport identities", criterion_6),
        ("training smoke test", criterion_7),
        ("held-out phantom hit rate", criterion_8),
        ("learning-rate schedule", criterion_9),
        ("bone-map determinism across runs and threads", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
