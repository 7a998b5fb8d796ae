use std::path::{Path, PathBuf};

use pdfnet_core::data::png;
use pdfnet_core::data::{make_synthetic_dataset, BackgroundMode, SyntheticSpec, DEPTHS_DIR, IMAGES_DIR, MASKS_DIR};
use pdfnet_core::harness::train::LAST_CHECKPOINT;
use pdfnet_core::harness::{cmd_analyze_prior, cmd_eval, cmd_predict, cmd_train, BackbonePreset, DumpOptions, RunConfig};
use pdfnet_core::metrics::{evaluate_directory, EvalOptions};
use pdfnet_core::PdfnetError;

fn dataset(root: &Path, n: usize, side: usize, seed: u64) -> PathBuf {
    make_synthetic_dataset(
        root,
        &SyntheticSpec {
            n,
            resolution: (side, side),
            fg_depth_sigma: 0.02,
            bg_mode: BackgroundMode::Gradient,
            seed,
        },
    )
    .unwrap()
}

fn trained(dir: &Path, data: &Path) -> PathBuf {
    let out = dir.join("run");
    let cfg = RunConfig {
        train_dir: Some(data.to_path_buf()),
        output_dir: out.clone(),
        resolution: (64, 64),
        grid: 2,
        backbone: BackbonePreset::Small,
        learning_rate: 1e-3,
        max_steps: 4,
        ..RunConfig::default()
    };
    cmd_train(&cfg).unwrap();
    out.join(LAST_CHECKPOINT)
}

#[test]
fn masks_scored_against_themselves_are_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&dir.path().join("data"), 4, 48, 1);
    let masks = data.join(MASKS_DIR);
    let eval = evaluate_directory(&masks, &masks, None, &EvalOptions::default()).unwrap();
    let r = &eval.report;
    assert_eq!((r.f_max, r.f_weighted, r.mae), (1.0, 1.0, 0.0));
    // the eps guards in the E and S ratios keep them a few ulps short of 1
    assert!(1.0 - r.e_measure < 1e-12 && 1.0 - r.s_measure < 1e-12, "{} {}", r.e_measure, r.s_measure);
    assert!(eval.fully_paired());
}

#[test]
fn eval_writes_predictions_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&dir.path().join("data"), 3, 80, 2);
    let ck = trained(dir.path(), &data);
    let a = cmd_eval(&ck, &data, &dir.path().join("eval_a"), &EvalOptions::default()).unwrap();
    let b = cmd_eval(&ck, &data, &dir.path().join("eval_b"), &EvalOptions::default()).unwrap();
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    assert!(a.fully_paired());
    assert_eq!(a.report.samples.len(), 3);
    for s in &a.report.samples {
        let p = dir.path().join("eval_a/predictions").join(format!("{}.png", s.sample_id));
        let img = image::open(&p).unwrap();
        assert_eq!(img.color(), image::ColorType::L8);
        assert_eq!((img.width(), img.height()), (64, 64));
        assert!(s.var_fg.is_finite() && s.var_bg.is_finite());
    }
    assert!(dir.path().join("eval_a/metrics.csv").is_file());
    assert!(dir.path().join("eval_a/metrics.json").is_file());

    let missing = cmd_eval(&dir.path().join("none.ckpt"), &data, &dir.path().join("x"), &EvalOptions::default());
    assert!(matches!(missing, Err(PdfnetError::NotFound(_))));
}

#[test]
fn predict_restores_input_size() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&dir.path().join("data"), 1, 64, 3);
    let ck = trained(dir.path(), &data);
    let other = dataset(&dir.path().join("other"), 1, 40, 4);
    let id = "syn_0000";
    let image = other.join(IMAGES_DIR).join(format!("{id}.png"));
    let depth = other.join(DEPTHS_DIR).join(format!("{id}.png"));
    let run = |tag: &str| {
        let (m, d) = (dir.path().join(format!("{tag}_mask.png")), dir.path().join(format!("{tag}_depth.png")));
        let report = cmd_predict(&ck, &image, &depth, &m, &d).unwrap();
        (report, std::fs::read(&m).unwrap(), std::fs::read(&d).unwrap(), m, d)
    };
    let (report, mask_a, depth_a, m, d) = run("a");
    assert_eq!((report.height, report.width), (40, 40));
    assert!(report.network_ms > 0.0 && report.depth_load_ms >= 0.0);
    let mi = image::open(&m).unwrap();
    let di = image::open(&d).unwrap();
    assert_eq!((mi.color(), mi.width(), mi.height()), (image::ColorType::L8, 40, 40));
    assert_eq!((di.color(), di.width(), di.height()), (image::ColorType::L16, 40, 40));
    let (_, mask_b, depth_b, _, _) = run("b");
    assert_eq!((mask_a, depth_a), (mask_b, depth_b));
    let missing = cmd_predict(&ck, &dir.path().join("no.png"), &depth, &m, &d);
    assert!(matches!(missing, Err(PdfnetError::NotFound(_))));
}

#[test]
fn analyze_prior_statistics_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&dir.path().join("data"), 20, 64, 5);
    let dump = dir.path().join("dump");
    let report = cmd_analyze_prior(
        &data,
        Some(DumpOptions {
            out_dir: &dump,
            checkpoint: None,
        }),
    )
    .unwrap();
    assert_eq!(report.samples.len(), 20);
    assert!(report.fraction_fg_below_bg >= 0.95, "{}", report.fraction_fg_below_bg);
    // with P = M every stability weight vanishes
    for (id, _) in &report.samples {
        let (_, _, w) = png::read_gray_f64(&dump.join(format!("{id}_weight.png"))).unwrap();
        assert!(w.iter().all(|&v| v == 0.0), "{id}");
        assert!(dump.join(format!("{id}_edge.png")).is_file());
    }
    let csv = std::fs::read_to_string(dump.join("terms.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert!(matches!(cmd_analyze_prior(&empty, None), Err(PdfnetError::EmptyInput(_))));
    assert!(matches!(cmd_analyze_prior(&dir.path().join("nope"), None), Err(PdfnetError::NotFound(_))));
}
