//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any failed.

mod support;

use std::fs;
use std::path::Path;
use std::time::Instant;

use gridspot::anchors::kmeans_anchors;
use gridspot::dataset::synth::generate_scenes;
use gridspot::dataset::{generate_synthetic_scene, Annotation, PlanarImage, SceneSpec, SyntheticScene};
use gridspot::eval::{evaluate, match_detections, time_runs, ImageEval, ScoredBox, TruthBox};
use gridspot::geometry::{center_to_corner, corner_to_center, CenterBox, CornerBox};
use gridspot::inference::{detect_image, detect_tiled, detection_order, nms, plan_tiles, Detection, TileOptions, TilePlan};
use gridspot::network::{Network, NetworkConfig, Tensor};
use gridspot::trainer::{train, Control, EpochReport, TrainConfig, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const OVERFIT_IMAGES: usize = 64;
const OVERFIT_MAX_EPOCHS: usize = 500;
/// Training-set precision and recall are measured every this many epochs.
const OVERFIT_EVAL_EVERY: usize = 5;
const OVERFIT_LR: f64 = 1e-3;
const OVERFIT_WARMUP: usize = 2;
const TARGET: f64 = 0.9;
const TILE_MAX_EPOCHS: usize = 200;
const TILE_STABLE_EPOCHS: usize = 5;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn geometry() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.gen_range(0.0..900.0), rng.gen_range(0.0..900.0));
        CornerBox { x_min: x, y_min: y, x_max: x + rng.gen_range(0.5..100.0), y_max: y + rng.gen_range(0.5..100.0) }
    };
    let (mut worst_rt, mut asym, mut range, mut ident) = (0.0f64, 0, 0, 0);
    for _ in 0..10_000 {
        let (a, b) = (rand_box(&mut rng), rand_box(&mut rng));
        let (ab, ba) = (a.iou(&b), b.iou(&a));
        asym += (ab != ba) as usize;
        range += !(0.0..=1.0).contains(&ab) as usize;
        ident += ((a.iou(&a) - 1.0).abs() > 1e-12) as usize;
        let (w, h) = (rng.gen_range(1000.0..4000.0), rng.gen_range(1000.0..4000.0));
        let back = center_to_corner(&corner_to_center(&a, w, h).unwrap(), w, h).unwrap();
        for (p, q) in [(a.x_min, back.x_min), (a.y_min, back.y_min), (a.x_max, back.x_max), (a.y_max, back.y_max)] {
            worst_rt = worst_rt.max((p - q).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        asym == 0 && range == 0 && ident == 0 && worst_rt < 1e-9 && secs < 5.0,
        format!("10000 pairs: asymmetric {asym}, out of range {range}, identity {ident}, roundtrip max err {worst_rt:.2e}, {secs:.2}s"),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let reports = support::gradcheck::all_reports();
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    check(
        failed.is_empty() && secs < 60.0,
        format!("{} checks, worst rel err {worst:.2e}, failed {failed:?}, {secs:.1}s", reports.len()),
    )
}

fn shapes() -> Outcome {
    let mut seen = Vec::new();
    let mut ok = true;
    for size in [320, 416, 512] {
        let net = Network::<f32>::new(NetworkConfig::tiny16(size, vec![(0.05, 0.05); 5], vec!["aircraft".into()]), 0)
            .map_err(|e| e.to_string())?;
        let y = net.infer(&Tensor::zeros(1, 3, size, size)).map_err(|e| e.to_string())?;
        ok &= y.c == 30 && y.h == size / 16 && y.w == size / 16 && net.config().head_channels() == 30;
        seen.push(format!("{size}->{}x{}x{}", y.c, y.h, y.w));
    }
    check(ok, seen.join(", "))
}

fn anchors() -> Outcome {
    let truth = [(0.02, 0.04), (0.1, 0.05)];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let two: Vec<(f64, f64)> = (0..200).map(|_| truth[rng.gen_range(0..2)]).collect();
    let mut exact = true;
    for seed in 0..10 {
        exact &= kmeans_anchors(&two, 2, seed).map_err(|e| e.to_string())?.priors == truth.to_vec();
    }
    let boxes: Vec<(f64, f64)> =
        (0..1000).map(|_| (rng.gen_range(0.005..0.2), rng.gen_range(0.005..0.2))).collect();
    let mut monotone = true;
    let mut iters = 0;
    for (k, seed) in [(2, 0), (5, 1), (5, 2), (9, 3)] {
        let s = kmeans_anchors(&boxes, k, seed).map_err(|e| e.to_string())?;
        monotone &= s.history.windows(2).all(|w| w[1] >= w[0]);
        iters += s.history.len();
    }
    let b5 = kmeans_anchors(&boxes, 5, 0).map_err(|e| e.to_string())?.mean_iou;
    let b2 = kmeans_anchors(&boxes, 2, 0).map_err(|e| e.to_string())?.mean_iou;
    check(
        exact && monotone && b5 >= b2,
        format!("two-cluster exact {exact}, history monotone {monotone} ({iters} steps), mean IoU B=5 {b5:.4} vs B=2 {b2:.4}"),
    )
}

/// Every subset `K` satisfying the greedy fixed point: walking the sorted
/// list, a detection is in `K` exactly when no earlier member of `K` of its
/// class overlaps it above the threshold.
fn brute_force_nms(dets: &[Detection], thr: f64) -> Vec<Vec<Detection>> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    let n = sorted.len();
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..i).any(|j| {
                inside(j) && sorted[j].class_id == sorted[i].class_id && sorted[j].bbox.iou(&sorted[i].bbox) > thr
            });
            inside(i) == !blocked
        });
        if consistent {
            found.push((0..n).filter(|&i| inside(i)).map(|i| sorted[i]).collect());
        }
    }
    found
}

fn nms_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut agree, mut idempotent, mut suppressed) = (0, 0, 0);
    for _ in 0..100 {
        let n = rng.gen_range(0..=10);
        let thr = [0.3, 0.45, 0.6][rng.gen_range(0..3)];
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                // clustered centers so that suppression actually happens
                let (cx, cy) = (0.3 + 0.1 * rng.gen_range(0..3) as f64, 0.5);
                let bbox = CenterBox::new(
                    cx + rng.gen_range(-0.02..0.02),
                    cy + rng.gen_range(-0.02..0.02),
                    rng.gen_range(0.04..0.08),
                    rng.gen_range(0.04..0.08),
                )
                .unwrap();
                // coarse scores produce ties
                Detection { class_id: rng.gen_range(0..2), score: rng.gen_range(1..6) as f64 / 5.0, bbox }
            })
            .collect();
        let got = nms(&dets, thr);
        let expected = brute_force_nms(&dets, thr);
        agree += (expected.len() == 1 && expected[0] == got) as usize;
        idempotent += (nms(&got, thr) == got) as usize;
        suppressed += dets.len() - got.len();
    }
    check(
        agree == 100 && idempotent == 100,
        format!("{agree}/100 match the exhaustive oracle, {idempotent}/100 idempotent, {suppressed} boxes suppressed in total"),
    )
}

fn to_eval(dets: &[Detection], anns: &[Annotation]) -> ImageEval {
    ImageEval {
        name: String::new(),
        detections: dets.iter().map(|d| ScoredBox { class_id: d.class_id, score: d.score, bbox: d.bbox.unit_corners() }).collect(),
        truths: anns.iter().map(|a| TruthBox { class_id: a.class_id, bbox: a.bbox.unit_corners() }).collect(),
    }
}

fn training_set_pr(net: &Network<f32>, data: &[(PlanarImage, Vec<Annotation>)]) -> (f64, f64, String) {
    let evals: Vec<ImageEval> = data
        .iter()
        .map(|(img, anns)| to_eval(&detect_image(net, img, &TileOptions::default()).unwrap(), anns))
        .collect();
    let r = evaluate(&evals, 0.5, &[]).unwrap();
    let detail = format!("tp {} fp {} fn {}", r.counts.tp, r.counts.fp, r.counts.fn_);
    (r.precision, r.recall, detail)
}

fn overfit(data: &[(PlanarImage, Vec<Annotation>)]) -> (Outcome, Option<Network<f32>>) {
    let start = Instant::now();
    let shapes: Vec<(f64, f64)> = data.iter().flat_map(|(_, a)| a.iter().map(|a| (a.bbox.w, a.bbox.h))).collect();
    let anchors = match kmeans_anchors(&shapes, 5, 0) {
        Ok(a) => a,
        Err(e) => return (Err(e.to_string()), None),
    };
    let cfg = NetworkConfig::tiny16(416, anchors.priors.clone(), vec!["aircraft".into()]);
    let mut net = Network::<f32>::new(cfg, 0).unwrap();
    let tc = TrainConfig {
        batch_size: 8,
        learning_rate: OVERFIT_LR,
        warmup_epochs: OVERFIT_WARMUP,
        epochs: OVERFIT_MAX_EPOCHS,
        multiscale_period: 0,
        seed: 0,
        ..TrainConfig::default()
    };
    let mut last = (0.0, 0.0, String::new());
    let mut cb = |r: &EpochReport, n: &Network<f32>| {
        eprintln!("  overfit epoch {} loss {:.4} ({:.0}s)", r.epoch, r.loss, start.elapsed().as_secs_f64());
        if r.epoch % OVERFIT_EVAL_EVERY != 0 {
            return Control::Continue;
        }
        last = training_set_pr(n, data);
        eprintln!("  overfit epoch {}: precision {:.3} recall {:.3} ({})", r.epoch, last.0, last.1, last.2);
        if last.0 >= TARGET && last.1 >= TARGET {
            Control::Stop
        } else {
            Control::Continue
        }
    };
    let res = train(&mut net, &data.to_vec(), &tc, TrainOptions { on_epoch: Some(&mut cb), ..Default::default() });
    let outcome = match res {
        Ok(o) => {
            let (p, r, d) = training_set_pr(&net, data);
            check(
                p >= TARGET && r >= TARGET,
                format!(
                    "{} images, {} epochs, precision {p:.3} recall {r:.3} ({d}), {:.0}s",
                    data.len(),
                    o.epochs_run,
                    start.elapsed().as_secs_f64()
                ),
            )
        }
        Err(e) => Err(e.to_string()),
    };
    (outcome, Some(net))
}

fn bits(d: &[Detection]) -> Vec<[u64; 5]> {
    d.iter().map(|d| [d.score.to_bits(), d.bbox.x.to_bits(), d.bbox.y.to_bits(), d.bbox.w.to_bits(), d.bbox.h.to_bits()]).collect()
}

/// The scene cut into `plan` tiles, each labeled with the objects at least
/// half visible in it (clipped to the tile).
fn scene_tiles(scene: &SyntheticScene, plan: &TilePlan) -> Vec<(PlanarImage, Vec<Annotation>)> {
    let t = plan.tile_size as f64;
    plan.offsets
        .iter()
        .map(|&(ox, oy)| {
            let img = scene.pixels.crop(ox, oy, plan.tile_size, plan.tile_size);
            let anns = scene
                .boxes
                .iter()
                .filter_map(|b| {
                    let (ox, oy) = (ox as f64, oy as f64);
                    let c = CornerBox { x_min: (b.x_min - ox) / t, y_min: (b.y_min - oy) / t, x_max: (b.x_max - ox) / t, y_max: (b.y_max - oy) / t };
                    let v = c.clip(1.0, 1.0);
                    if v.width() <= 0.0 || v.height() <= 0.0 || v.area() < 0.5 * c.area() {
                        return None;
                    }
                    CenterBox::from_unit_corners_clipped(&c).ok().map(|bbox| Annotation { class_id: 0, bbox })
                })
                .collect();
            (img, anns)
        })
        .collect()
}

/// Continues training the overfit model on the scene's own tiles, one full
/// batch per step, until every tile is detected perfectly (P = R = 1 on the
/// tiles) for `TILE_STABLE_EPOCHS` epochs in a row.
fn overfit_to_scene(net: &mut Network<f32>, tiles: &[(PlanarImage, Vec<Annotation>)]) -> Result<usize, String> {
    let tc = TrainConfig {
        batch_size: tiles.len(),
        learning_rate: OVERFIT_LR,
        epochs: TILE_MAX_EPOCHS,
        multiscale_period: 0,
        seed: 0,
        ..TrainConfig::default()
    };
    let mut stable = 0;
    let mut cb = |r: &EpochReport, n: &Network<f32>| {
        let (p, rc, d) = training_set_pr(n, tiles);
        eprintln!("  scene tiles epoch {} loss {:.4}: precision {p:.3} recall {rc:.3} ({d})", r.epoch, r.loss);
        stable = if p == 1.0 && rc == 1.0 { stable + 1 } else { 0 };
        if stable >= TILE_STABLE_EPOCHS {
            Control::Stop
        } else {
            Control::Continue
        }
    };
    let o = train(net, &tiles.to_vec(), &tc, TrainOptions { on_epoch: Some(&mut cb), ..Default::default() })
        .map_err(|e| e.to_string())?;
    Ok(o.epochs_run)
}

fn tiled(mut net: Network<f32>, data: &[(PlanarImage, Vec<Annotation>)]) -> Outcome {
    let spec = SceneSpec {
        width: 1000,
        height: 1000,
        min_objects: 12,
        max_objects: 12,
        min_gap: 24.0,
        ..SceneSpec::default()
    };
    let scene = generate_synthetic_scene(&spec, 2024).map_err(|e| e.to_string())?;
    let plan = plan_tiles(1000, 1000, 416, 96).map_err(|e| e.to_string())?;
    let truths = to_eval(&[], &scene.labeled.annotations).truths;
    let before = detect_tiled(&net, &scene.pixels, &plan, &TileOptions::default()).map_err(|e| e.to_string())?;
    let before_tp = match_detections(&to_eval(&before, &[]).detections, &truths, 0.5).counts.tp;
    let epochs = overfit_to_scene(&mut net, &scene_tiles(&scene, &plan))?;

    let dets = detect_tiled(&net, &scene.pixels, &plan, &TileOptions::default()).map_err(|e| e.to_string())?;
    let m = match_detections(&to_eval(&dets, &[]).detections, &truths, 0.5);
    let min_iou = m.matches.iter().map(|x| x.iou).fold(1.0, f64::min);

    let img = &data[0].0;
    let opts = TileOptions { conf_threshold: 0.05, ..TileOptions::default() };
    let whole = detect_image(&net, img, &opts).map_err(|e| e.to_string())?;
    let one = detect_tiled(&net, img, &plan_tiles(416, 416, 416, 96).unwrap(), &opts).map_err(|e| e.to_string())?;
    let bitwise = bits(&whole) == bits(&one) && whole.iter().zip(&one).all(|(a, b)| a.class_id == b.class_id);
    check(
        dets.len() == 12 && m.counts.tp == 12 && bitwise,
        format!(
            "{} tiles, {} detections for 12 objects, {} matched (min IoU {min_iou:.3}) after {epochs} epochs on the scene's tiles \
             (before: {} detections, {before_tp} matched); single-tile vs one-tile plan bitwise equal: {bitwise} ({} dets)",
            plan.offsets.len(),
            dets.len(),
            m.counts.tp,
            before.len(),
            whole.len()
        ),
    )
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["gridspot"];
    argv.extend_from_slice(args);
    match gridspot::cli::run(argv.clone()) {
        0 => Ok(()),
        c => Err(format!("{argv:?} exited with {c}")),
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    cli(&["synth", "--out", &p("data"), "--count", "6", "--size", "128", "--seed", "3"])?;
    let train_args = |out: &str| {
        vec![
            "train".to_string(), "--data".into(), p("data"), "--out".into(), p(out), "--size".into(), "128".into(),
            "--epochs".into(), "3".into(), "--batch-size".into(), "2".into(), "--multiscale-period".into(), "1".into(),
            "--scale-set".into(), "96,128,160".into(), "--augment".into(), "true".into(), "--seed".into(), "7".into(),
        ]
    };
    for out in ["run_a", "run_b"] {
        let a = train_args(out);
        cli(&a.iter().map(String::as_str).collect::<Vec<_>>())?;
    }
    let (a, b) = (dir_bytes(&root.join("run_a")), dir_bytes(&root.join("run_b")));
    let ckpts = a.iter().filter(|(n, _)| n.ends_with(".ckpt")).count();
    let train_same = a == b && ckpts > 0;
    for (out, w) in [("dets_a.txt", "run_a/final.ckpt"), ("dets_b.txt", "run_a/final.ckpt")] {
        cli(&["detect", "--weights", &p(w), "--image", &p("data/images"), "--conf", "0.01", "--out", &p(out)])?;
    }
    for out in ["tiles_a.txt", "tiles_b.txt"] {
        cli(&["detect", "--weights", &p("run_b/final.ckpt"), "--image", &p("data/images"), "--tile", "64", "--overlap", "16", "--conf", "0.01", "--out", &p(out)])?;
    }
    let rd = |s: &str| fs::read(root.join(s)).unwrap();
    let detect_same = rd("dets_a.txt") == rd("dets_b.txt") && rd("tiles_a.txt") == rd("tiles_b.txt");
    let lines = String::from_utf8_lossy(&rd("dets_a.txt")).lines().count();
    check(
        train_same && detect_same,
        format!("train runs identical: {train_same} ({} files, {ckpts} checkpoints); detect reruns identical: {detect_same} ({lines} lines)", a.len()),
    )
}

fn fps(net: &Network<f32>, data: &[(PlanarImage, Vec<Annotation>)]) -> Outcome {
    let opts = TileOptions::default();
    let timing = time_runs(3, || -> Result<(), String> {
        for (img, _) in data {
            detect_image(net, img, &opts).map_err(|e| e.to_string())?;
        }
        Ok(())
    })?;
    let evals: Vec<ImageEval> =
        data.iter().map(|(img, a)| to_eval(&detect_image(net, img, &opts).unwrap(), a)).collect();
    let r = evaluate(&evals, 0.5, &timing).map_err(|e| e.to_string())?;
    let f = r.fps.unwrap_or(f64::NAN);
    check(
        f.is_finite() && f > 0.0,
        format!("median of 3 runs over {} images at 416: {f:.2} fps (runs {:?} s; no threshold)", data.len(), timing.iter().map(|t| (t * 100.0).round() / 100.0).collect::<Vec<_>>()),
    )
}

fn main() {
    gridspot::retain_heap_memory();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        match &o {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => println!("FAIL {name}: {d}"),
        }
        results.push((name, o));
    };
    report("geometry", geometry());
    report("gradients", gradients());
    report("shapes", shapes());
    report("anchors", anchors());
    report("nms", nms_oracle());
    report("determinism", determinism());

    let scenes = generate_scenes(&SceneSpec::default(), OVERFIT_IMAGES, 0).expect("synthetic scenes");
    let data: Vec<(PlanarImage, Vec<Annotation>)> =
        scenes.into_iter().map(|s| (s.pixels, s.labeled.annotations)).collect();
    let (outcome, net) = overfit(&data);
    report("overfit", outcome);
    match net {
        Some(net) => {
            report("fps", fps(&net, &data));
            report("tiled_dedup", tiled(net, &data));
        }
        None => {
            report("tiled_dedup", Err("no trained model".into()));
            report("fps", Err("no trained model".into()));
        }
    }
    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("{} criteria, {} passed, {failed} failed", results.len(), results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
