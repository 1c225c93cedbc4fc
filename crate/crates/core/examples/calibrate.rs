// Dev scratch: trains the full desk-scale pipeline and prints the numbers
// the acceptance thresholds depend on.

use std::time::Instant;

use planeshift_core::config::ExperimentConfig;
use planeshift_core::metrics::{build_report, score_records};
use planeshift_core::models::balanced_accuracy;
use planeshift_core::pipeline::*;
use planeshift_core::synth::Label;

fn main() {
    let t0 = Instant::now();
    let tmp = std::env::temp_dir().join("planeshift-calibrate");
    let _ = std::fs::remove_dir_all(&tmp);
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = tmp.clone();
    cfg.generate.max_images = Some(24);

    println!("== synth ==");
    stage_synth(&cfg).unwrap();
    let data = load_data(&cfg).unwrap();
    let n_nsp_test = data
        .splits
        .test
        .iter()
        .filter(|&&i| data.samples[i].label == Label::Nsp)
        .count();
    println!(
        "pool={} test={} nsp_test={} ({:.1}s)",
        data.samples.len(),
        data.splits.test.len(),
        n_nsp_test,
        t0.elapsed().as_secs_f64()
    );

    println!("== train diffusion ==");
    let t = Instant::now();
    stage_train_diffusion(&cfg).unwrap();
    println!("took {:.1}s", t.elapsed().as_secs_f64());

    println!("== train classifier ==");
    let t = Instant::now();
    stage_train_classifier(&cfg).unwrap();
    println!("took {:.1}s", t.elapsed().as_secs_f64());

    println!("== train oracle ==");
    let t = Instant::now();
    stage_train_oracle(&cfg).unwrap();
    println!("took {:.1}s", t.elapsed().as_secs_f64());

    println!("== train features ==");
    let t = Instant::now();
    stage_train_features(&cfg).unwrap();
    println!("took {:.1}s", t.elapsed().as_secs_f64());

    let bundle = load_bundle(&cfg, "calibrate").unwrap();
    let test = data.subset(&data.splits.test);
    let bal = balanced_accuracy(&bundle.classifier, &test).unwrap();
    let iou =
        planeshift_core::models::segmentation_mean_iou(&bundle.classifier.segmenter, &test)
            .unwrap();
    println!("test bal_acc={bal:.3} mean_iou={iou:.3}");
    let ckpt = planeshift_core::checkpoint::read_manifest(
        &Paths::new(&cfg.out_dir).checkpoint(ROLE_CLASSIFIER),
    )
    .unwrap();
    println!("val metrics: {}", ckpt.metrics);

    // oracle sanity
    let mut lo = 0.0;
    let mut hi = 0.0;
    let (mut nlo, mut nhi) = (0, 0);
    for s in &test {
        let sc = bundle.oracle.score(&s.image).unwrap();
        if s.label == Label::Sp {
            hi += sc.overall;
            nhi += 1;
        } else {
            lo += sc.overall;
            nlo += 1;
        }
    }
    println!(
        "oracle mean QS_O: SP={:.3} (n={nhi}) NSP={:.3} (n={nlo})",
        hi / nhi.max(1) as f64,
        lo / nlo.max(1) as f64
    );

    println!("== generate (24 images, diff_ice defaults) ==");
    let t = Instant::now();
    let ids = nsp_test_ids(&data, Some(24));
    let gcfg = cfg.guidance.clone();
    let records = generate_records(&data, &ids, &gcfg, &bundle, cfg.seed, 1).unwrap();
    let gen_secs = t.elapsed().as_secs_f64();
    println!("took {gen_secs:.1}s ({:.2}s/image)", gen_secs / 24.0);

    let lambdas: Vec<f64> = records.iter().map(|r| r.chosen_lambda_c).collect();
    println!("chosen lambdas: {lambdas:?}");

    let scored = score_records(
        &records,
        &bundle.classifier,
        &bundle.oracle,
        &bundle.feat_eval,
    )
    .unwrap();
    let (report, _, _) = build_report("diff_ice", &scored).unwrap();
    println!("n_eligible={} n_confident={}", report.n_eligible, report.n_confident_oracle);
    for it in &report.per_iteration {
        println!(
            "iter {}: FR={:.3} MAD={:.3} BKL={:.3} MQD={:.3} cos={:?} FD={:?} n_valid={}",
            it.iteration, it.flip_ratio, it.mad, it.bkl, it.mqd,
            it.feature_cosine.map(|v| (v * 1000.0).round() / 1000.0),
            it.frechet.map(|v| (v * 100.0).round() / 100.0),
            it.n_valid
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
