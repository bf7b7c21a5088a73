//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line to stderr
//! (uncaptured, so it shows in plain `cargo test` output).
//!
//! Criteria 7-10 are desk-scale accuracy orderings. They report their verdict
//! but only fail the test when `NRRDD_STRICT_ACCEPTANCE=1`; the exact
//! invariants always fail the test on violation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nrrdd::cam::{image_mask, non_critical_mask, normalize_min_max, CamMap};
use nrrdd::harness::{
    cmd_distill, cmd_train_teacher, cmd_transfer, load_teacher, store_path, ExperimentConfig,
    ResultRow, RunOptions, SYNTHETIC_DIR,
};
use nrrdd::labels::{recompute_distance_error, relabel, LabelMode, LabelRecord, LabelStore, Payload, RelabelConfig};
use nrrdd::manifest::load_synthetic;
use nrrdd::mixer::{apply, AugmentSpec, MixMethod};
use nrrdd::model::ModelSnapshot;
use nrrdd::nn::ArchSpec;
use nrrdd::refine::{lc_loss, LossWeights, Pairing, RefineConfig};
use nrrdd::tensor::Tensor;
use nrrdd::transfer::{mean_dbr_gap, recover_rate};
use nrrdd::{cidd::SyntheticRecord, data::Normalization};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id:>2} [{name}]: {verdict} - {detail}");
}

fn strict() -> bool {
    std::env::var("NRRDD_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1")
}

// ---------------------------------------------------------------- desk setup

const SEEDS: [u64; 3] = [0, 1, 2];

/// Arm name, config overrides, label modes.
const ARMS: &[(&str, &[(&str, &str)], &[LabelMode])] = &[
    ("random", &[("initialization", "\"random-real\""), ("skip_nrr", "true")], &[LabelMode::Dbr]),
    ("cidd", &[("skip_nrr", "true")], &[LabelMode::Dbr]),
    ("nrr", &[], &LabelMode::ALL),
    ("no-lr", &[("refine.alpha_lr", "0.0")], &[LabelMode::Dbr]),
    ("eps-0.1", &[("refine.epsilon", "0.1")], &[LabelMode::Dbr]),
    ("eps-0.9", &[("refine.epsilon", "0.9")], &[LabelMode::Dbr]),
    ("r-0.1", &[("refine.r", "0.1"), ("transfer.r", "0.1")], &[LabelMode::Dbr]),
    ("r-0.7", &[("refine.r", "0.7"), ("transfer.r", "0.7")], &[LabelMode::Dbr]),
];

/// CIFAR-10-like procedural images (16x16, 10 classes), ConvNet-3 teacher and
/// student, IPC = 10, refinement at I = 200, ten stored mixes per image.
fn desk_config(out: PathBuf) -> ExperimentConfig {
    let mut c = ExperimentConfig { output_dir: out, ..Default::default() };
    c.dataset.procedural.train_per_class = 200;
    c.dataset.procedural.test_per_class = 100;
    c.teacher.train.epochs = 15;
    c.cidd.ipc = 10;
    c.cidd.sources_per_class = Some(50);
    c.refine.iterations = 200;
    c.relabel.pairs_per_image = 10;
    c.transfer.epochs = 60;
    c
}

struct Desk {
    base: ExperimentConfig,
    teacher_seconds: f64,
    /// (arm, seed) -> rows of that run.
    rows: BTreeMap<(&'static str, u64), Vec<ResultRow>>,
    configs: BTreeMap<(&'static str, u64), ExperimentConfig>,
    seconds: BTreeMap<&'static str, f64>,
}

impl Desk {
    fn acc(&self, arm: &str, seed: u64, mode: LabelMode) -> f64 {
        self.rows
            .iter()
            .find(|((a, s), _)| *a == arm && *s == seed)
            .and_then(|(_, rows)| rows.iter().find(|r| r.mode == mode))
            .map(|r| r.accuracy)
            .expect("arm ran")
    }

    fn per_seed(&self, arm: &str, mode: LabelMode) -> Vec<f64> {
        SEEDS.iter().map(|&s| self.acc(arm, s, mode)).collect()
    }

    fn median(&self, arm: &str, mode: LabelMode) -> f64 {
        median(&self.per_seed(arm, mode))
    }

    fn config(&self, arm: &str, seed: u64) -> &ExperimentConfig {
        self.configs.iter().find(|((a, s), _)| *a == arm && *s == seed).map(|(_, c)| c).expect("arm ran")
    }

    fn minutes(&self, arms: &[&str]) -> f64 {
        (self.teacher_seconds + arms.iter().map(|a| self.seconds[a]).sum::<f64>()) / 60.0
    }
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk");
        if std::env::var("NRRDD_DESK_REUSE").is_err() {
            let _ = std::fs::remove_dir_all(&root);
        }
        let base = desk_config(root);
        let opts = RunOptions::default();
        let t = Instant::now();
        cmd_train_teacher(&base, opts).expect("teacher");
        let teacher_seconds = t.elapsed().as_secs_f64();
        let mut rows = BTreeMap::new();
        let mut configs = BTreeMap::new();
        let mut seconds: BTreeMap<&'static str, f64> = BTreeMap::new();
        for &seed in &SEEDS {
            for &(arm, overrides, modes) in ARMS {
                let mut c = base.clone();
                c.seed = seed;
                c.modes = modes.to_vec();
                for (k, v) in overrides {
                    c.set(k, v).expect("override");
                }
                let t = Instant::now();
                cmd_distill(&c, opts).expect("distill");
                let r = cmd_transfer(&c, opts).expect("transfer");
                *seconds.entry(arm).or_default() += t.elapsed().as_secs_f64();
                let summary: Vec<String> = r.iter().map(|x| format!("{}={:.3}", x.mode, x.accuracy)).collect();
                let _ = writeln!(std::io::stderr(), "desk: seed {seed} {arm:<8} {}", summary.join(" "));
                rows.insert((arm, seed), r);
                configs.insert((arm, seed), c);
            }
        }
        Desk { base, teacher_seconds, rows, configs, seconds }
    })
}

fn desk_teacher() -> &'static ModelSnapshot<f32> {
    static T: OnceLock<ModelSnapshot<f32>> = OnceLock::new();
    T.get_or_init(|| load_teacher(&desk().base).expect("teacher snapshot"))
}

fn synthetic(cfg: &ExperimentConfig) -> Vec<SyntheticRecord<f32>> {
    load_synthetic::<f32>(&cfg.run_dir().join(SYNTHETIC_DIR)).expect("synthetic set").records
}

// ------------------------------------------------------------------ criteria

#[test]
fn criterion_01_mask_algebra() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0usize;
    let mut ok = true;
    for i in 0..1000 {
        let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let raw: Vec<f32> = (0..h * w).map(|_| rng.random_range(-5.0..5.0)).collect();
        let values = if i % 50 == 0 { vec![0.0; h * w] } else { normalize_min_max(&raw) };
        let cam = CamMap { height: h, width: w, values, class_id: 0, normalized: true };
        for eps in [0.1f32, 0.3, 0.5, 0.7, 0.9] {
            let m = non_critical_mask(&cam, eps).unwrap();
            for (&c, &mv) in cam.values.iter().zip(&m.values) {
                let expect = if eps - c > 0.0 { eps - c } else { 0.0 };
                ok &= mv.to_bits() == expect.to_bits();
                ok &= (0.0..=eps).contains(&mv);
                ok &= (mv > 0.0) == (c < eps);
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = ok && secs < 10.0;
    report(1, "mask algebra", pass, &format!("{checked} mask entries over 1000 CAMs x 5 eps, exact; {secs:.2}s (< 10s)"));
    assert!(pass);
}

#[test]
fn criterion_02_critical_pixels_preserved() {
    let d = desk();
    let teacher = desk_teacher();
    let mut frozen = 0usize;
    let mut violations = 0usize;
    let mut moved = 0usize;
    let mut images = 0usize;
    for &seed in &SEEDS {
        let init = synthetic(d.config("cidd", seed));
        let refined = synthetic(d.config("nrr", seed));
        let eps = d.config("nrr", seed).refine.epsilon as f32;
        assert_eq!(init.len(), refined.len());
        for (a, b) in init.iter().zip(&refined) {
            assert_eq!(a.provenance, b.provenance, "refinement starts from the discovered image");
            assert!(b.refined);
            let (_, mask) = image_mask(teacher, &a.image, a.class_id, eps).unwrap();
            let hw = mask.values.len();
            for (i, (x0, x1)) in a.image.iter().zip(&b.image).enumerate() {
                if mask.values[i % hw] == 0.0 {
                    frozen += 1;
                    violations += usize::from(x0.to_bits() != x1.to_bits());
                } else {
                    moved += usize::from(x0 != x1);
                }
            }
            images += 1;
        }
    }
    let iters = d.base.refine.iterations;
    let pass = violations == 0 && images >= 50 && frozen > 0 && moved > 0;
    report(
        2,
        "critical-pixel preservation",
        pass,
        &format!("{images} images refined for I = {iters}; {frozen} frozen pixel values, {violations} changed; {moved} free values moved; CPU {:.1} min", d.minutes(&["nrr"])),
    );
    assert!(pass);
}

#[test]
fn criterion_03_lc_gradient_matches_finite_differences() {
    let d = desk();
    let teacher = desk_teacher().cast::<f64>();
    let records = synthetic(d.config("nrr", 0));
    let shape = teacher.input_shape();
    let n = 10;
    let views: Vec<Vec<f64>> = records[..n].iter().map(|r| r.image.iter().map(|&v| v as f64).collect()).collect();
    let slices: Vec<&[f64]> = views.iter().map(|v| v.as_slice()).collect();
    let x = Tensor::stack(&slices, &shape).unwrap();
    let classes: Vec<usize> = records[..n].iter().map(|r| r.class_id).collect();
    let mut pairings = Vec::new();
    for (i, method) in (0..n).zip([MixMethod::Cutmix, MixMethod::Mixup].into_iter().cycle()) {
        let j = (i + 3) % n;
        pairings.push(Pairing {
            partner: j,
            partner_class: classes[j],
            spec: AugmentSpec::sample(method, shape[1], shape[2], 900 + i as u64),
            in_batch: Some(j),
            image: vec![],
        });
    }
    let cfg = RefineConfig::default();
    let w = LossWeights { alpha_bn: cfg.alpha_bn, alpha_lr: cfg.alpha_lr, r: cfg.r };
    let eval = lc_loss(&teacher, &x, &classes, &pairings, w).unwrap();
    let f = |x: &Tensor<f64>| lc_loss(&teacher, x, &classes, &pairings, w).unwrap().total;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let per = x.item(0).len();
    // smaller steps are dominated by round-off in the loss
    let h = 1e-5;
    let mut worst = 0.0f64;
    for img in 0..n {
        for _ in 0..8 {
            let idx = img * per + rng.random_range(0..per);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let g = eval.grad.data()[idx];
            let scale = g.abs().max(fd.abs());
            let rel = if scale < 1e-9 { 0.0 } else { (g - fd).abs() / scale };
            worst = worst.max(rel);
        }
    }
    let pass = worst < 1e-3;
    report(3, "L_C input gradient", pass, &format!("80 pixels over 10 images, worst relative error {worst:.2e} (< 1e-3)"));
    assert!(pass);
}

#[test]
fn criterion_04_dbr_oracle_zero() {
    let d = desk();
    let cfg = d.config("nrr", 0);
    let store = LabelStore::read(&store_path(&cfg.run_dir(), LabelMode::Dbr), Some(LabelMode::Dbr)).unwrap();
    let images: Vec<Vec<f32>> = synthetic(cfg).into_iter().map(|r| r.image).collect();
    let student = desk_teacher().clone();
    let gap = mean_dbr_gap(&student, &store, &images).unwrap();
    let pass = store.records.len() >= 1000 && gap < 1e-4;
    report(4, "DBR oracle-zero", pass, &format!("{} records, mean L_dbr of a teacher copy {gap:.2e} (< 1e-4)", store.records.len()));
    assert!(pass);
}

#[test]
fn criterion_05_distance_round_trip() {
    let d = desk();
    let mut worst = 0.0f64;
    let mut records = 0;
    for &seed in &SEEDS {
        let cfg = d.config("nrr", seed);
        let store = LabelStore::read(&store_path(&cfg.run_dir(), LabelMode::Dbr), Some(LabelMode::Dbr)).unwrap();
        let images: Vec<Vec<f32>> = synthetic(cfg).into_iter().map(|r| r.image).collect();
        worst = worst.max(recompute_distance_error(desk_teacher(), &store, &images).unwrap());
        records += store.records.len();
    }
    let pass = worst <= 1e-5;
    report(5, "distance round-trip", pass, &format!("{records} records rebuilt from stored specs, max |d - d'| {worst:.2e} (<= 1e-5)"));
    assert!(pass);
}

#[test]
fn criterion_06_storage_accounting() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    // K = 100 desk run, one pair per image
    let k = 100;
    let arch = ArchSpec::parse("convnet3", 8).unwrap();
    let model = ModelSnapshot::<f32> {
        net: arch.build([3, 16, 16], k, 5).unwrap(),
        arch,
        normalization: Normalization::identity(3),
        meta: Default::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut records: Vec<SyntheticRecord<f32>> = (0..2 * k)
        .map(|i| SyntheticRecord::new((0..3 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect(), i % k, vec![]))
        .collect();
    let cfg = RelabelConfig { allow_unrefined: true, ..Default::default() };
    let mut sizes = BTreeMap::new();
    let mut exact = true;
    let n = records.len();
    for mode in LabelMode::ALL {
        let store = relabel(&model, &mut records, mode, &cfg).unwrap();
        let p = dir.path().join(format!("{mode}.nrrd"));
        store.write(&p).unwrap();
        let size = std::fs::metadata(&p).unwrap().len() as usize;
        exact &= size == 16 + n * (32 + mode.label_bytes(k)) + 4 && size == store.byte_size();
        sizes.insert(mode.to_string(), size);
    }
    let file_ratio = sizes["sl"] as f64 / sizes["dbr"] as f64;

    // K = 1000 label payloads
    let k = 1000;
    let mk = |payload: Payload| LabelRecord {
        org_idx: 0,
        aug_idx: 1,
        y_org: 0,
        y_aug: 1,
        spec: AugmentSpec::sample(MixMethod::Cutmix, 32, 32, 1),
        payload,
    };
    let count = 64;
    let sl = LabelStore {
        mode: LabelMode::Sl,
        mix: MixMethod::Cutmix,
        num_classes: k,
        records: (0..count).map(|_| mk(Payload::Soft(vec![1.0 / k as f32; k]))).collect(),
    };
    let dbr = LabelStore {
        mode: LabelMode::Dbr,
        mix: MixMethod::Cutmix,
        num_classes: k,
        records: (0..count).map(|_| mk(Payload::Dbr { d_org: 0.5, d_aug: 1.5 })).collect(),
    };
    let label_ratio = sl.label_data_bytes() as f64 / dbr.label_data_bytes() as f64;
    exact &= sl.to_bytes().len() == sl.byte_size() && dbr.to_bytes().len() == dbr.byte_size();
    let secs = start.elapsed().as_secs_f64();
    let pass = exact && file_ratio >= 5.0 && label_ratio == k as f64 / 2.0 && secs < 60.0;
    report(
        6,
        "storage accounting",
        pass,
        &format!(
            "K=100 files {sizes:?}, SL/DBR {file_ratio:.2} (>= 5); K=1000 label bytes SL/DBR {label_ratio} (= 500); {secs:.1}s"
        ),
    );
    assert!(pass);
}

fn soft_verdict(id: u32, name: &str, pass: bool, detail: String) {
    report(id, name, pass, &detail);
    if strict() {
        assert!(pass, "{detail}");
    }
}

#[test]
fn criterion_07_ablation_ordering() {
    let d = desk();
    let m = |arm| d.median(arm, LabelMode::Dbr);
    let (random, cidd, nrr) = (m("random"), m("cidd"), m("nrr"));
    let minutes = d.minutes(&["random", "cidd", "nrr"]);
    let pass = cidd - random >= 0.01 && nrr - cidd >= 0.01 && minutes < 120.0;
    soft_verdict(
        7,
        "ablation ordering",
        pass,
        format!(
            "median acc random-real {random:.4}, CIDD {cidd:.4}, CIDD+NRR {nrr:.4}; need CIDD > random and NRR > CIDD by >= 0.01 each; per seed random {:?} CIDD {:?} NRR {:?}; {minutes:.1} min",
            d.per_seed("random", LabelMode::Dbr),
            d.per_seed("cidd", LabelMode::Dbr),
            d.per_seed("nrr", LabelMode::Dbr)
        ),
    );
}

#[test]
fn criterion_08_label_mode_ordering() {
    let d = desk();
    let m = |mode| d.median("nrr", mode);
    let (oh, cl, dbr, sl) = (m(LabelMode::Oh), m(LabelMode::Cl), m(LabelMode::Dbr), m(LabelMode::Sl));
    let rr = recover_rate(dbr, oh, sl);
    let minutes = d.minutes(&["nrr"]);
    let pass = oh < cl && cl < dbr && dbr <= sl && rr.is_some_and(|v| v >= 0.4) && minutes < 180.0;
    let per_seed: Vec<Option<f64>> = SEEDS
        .iter()
        .map(|&s| recover_rate(d.acc("nrr", s, LabelMode::Dbr), d.acc("nrr", s, LabelMode::Oh), d.acc("nrr", s, LabelMode::Sl)))
        .collect();
    soft_verdict(
        8,
        "label-mode ordering",
        pass,
        format!(
            "median acc OH {oh:.4} < CL {cl:.4} < DBR {dbr:.4} <= SL {sl:.4}; recover rate of medians {} (>= 0.4), per seed {per_seed:.3?}; {minutes:.1} min",
            rr.map_or("undefined".into(), |v| format!("{v:.3}"))
        ),
    );
}

#[test]
fn criterion_09_label_refinement() {
    let d = desk();
    let (with, without) = (d.median("nrr", LabelMode::Dbr), d.median("no-lr", LabelMode::Dbr));
    let pass = with - without >= 0.0;
    soft_verdict(
        9,
        "label refinement ablation",
        pass,
        format!(
            "median DBR+LR {with:.4} vs DBR {without:.4} (gap {:+.4}, need >= 0); per seed {:?} vs {:?}",
            with - without,
            d.per_seed("nrr", LabelMode::Dbr),
            d.per_seed("no-lr", LabelMode::Dbr)
        ),
    );
}

#[test]
fn criterion_10_sensitivity_sanity() {
    let d = desk();
    let mut lines = Vec::new();
    let mut pass = true;
    for (param, lo, hi) in [("epsilon", "eps-0.1", "eps-0.9"), ("r", "r-0.1", "r-0.7")] {
        let mid = d.per_seed("nrr", LabelMode::Dbr);
        let mut ok = true;
        for end in [lo, hi] {
            let e = d.per_seed(end, LabelMode::Dbr);
            let median_ok = median(&mid) >= median(&e);
            let inverted_everywhere = mid.iter().zip(&e).all(|(a, b)| a < b);
            ok &= !inverted_everywhere;
            lines.push(format!(
                "{param}: interior {:.4} vs {end} {:.4} ({}{})",
                median(&mid),
                median(&e),
                if median_ok { ">=" } else { "<" },
                if inverted_everywhere { ", inverted on every seed" } else { "" }
            ));
        }
        pass &= ok;
    }
    soft_verdict(10, "sensitivity sanity", pass, lines.join("; "));
}

#[test]
fn criterion_11_mixer_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shape = [3, 16, 16];
    let mut bad = 0usize;
    for i in 0..10_000u64 {
        let a: Vec<f32> = (0..768).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f32> = (0..768).map(|_| rng.random_range(-2.0..2.0)).collect();
        let method = if i % 2 == 0 { MixMethod::Cutmix } else { MixMethod::Mixup };
        let spec = AugmentSpec::sample(method, 16, 16, i);
        let decoded = AugmentSpec::from_bytes(&spec.to_bytes()).unwrap();
        let resampled = AugmentSpec::sample(method, 16, 16, i);
        let x1 = apply(&spec, &a, &b, shape).unwrap();
        let x2 = apply(&decoded, &a, &b, shape).unwrap();
        let x3 = apply(&resampled, &a, &b, shape).unwrap();
        let same = |u: &[f32], v: &[f32]| u.iter().zip(v).all(|(p, q)| p.to_bits() == q.to_bits());
        bad += usize::from(decoded != spec || resampled != spec || !same(&x1, &x2) || !same(&x1, &x3));
        if method == MixMethod::Cutmix {
            let side = 16.0 * (1.0 - spec.lam as f64).sqrt();
            let off = (spec.bbox.height as f64 - side).abs().max((spec.bbox.width as f64 - side).abs());
            bad += usize::from(off > 1.0);
        }
    }
    let a: Vec<f32> = (0..768).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f32> = (0..768).map(|_| rng.random_range(-2.0..2.0)).collect();
    let id = apply(&AugmentSpec::with_lam(MixMethod::Mixup, 1.0, 16, 16, 0), &a, &b, shape).unwrap();
    let identity = id.iter().zip(&a).all(|(p, q)| p.to_bits() == q.to_bits());
    let pass = bad == 0 && identity;
    report(11, "mixer determinism", pass, &format!("10000 round trips, {bad} mismatches; mixup lam=1 identity {identity}"));
    assert!(pass);
}

#[test]
fn desk_runtime_is_recorded() {
    let d = desk();
    let total: f64 = d.teacher_seconds + d.seconds.values().sum::<f64>();
    let _ = writeln!(std::io::stderr(), "desk: {} runs, {:.1} min total", d.rows.len(), total / 60.0);
    assert!(Duration::from_secs_f64(total) < Duration::from_secs(3 * 3600));
}
