// Dev scratch: inspect guidance gradient magnitudes per term on the
// calibration checkpoints.

use planeshift_core::config::ExperimentConfig;
use planeshift_core::diffusion::forward_sample;
use planeshift_core::guidance::counterfactual_grad;
use planeshift_core::guidance::GradMode;
use planeshift_core::models::CLASS_SP;
use planeshift_core::pipeline::*;
use planeshift_core::rng::derive_rng;
use planeshift_core::tensor::Tensor;

fn norm(t: &Tensor<f32>) -> f64 {
    t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
}

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = std::env::temp_dir().join("planeshift-calibrate");
    let data = load_data(&cfg).unwrap();
    let bundle = load_bundle(&cfg, "probe").unwrap();
    let models = bundle.guidance_models();
    let ids = nsp_test_ids(&data, Some(3));
    let schedule = &bundle.schedule;

    for &id in &ids {
        let x = &data.samples[id].image;
        let feat_orig = bundle.feat_guid.extract(x).unwrap();
        println!(
            "image {id}: p_sp(x) = {:.3}, |F(x)| = {:.2}",
            bundle.classifier.classify(x).unwrap().0,
            norm(&feat_orig),
        );
        for t in [120, 80, 40, 10] {
            let mut rng = derive_rng(1, "probe", &[id as u64, t as u64]);
            let eps = Tensor::randn(x.shape(), &mut rng);
            let x_t = forward_sample(x, t, &eps, schedule).unwrap();
            let gc = counterfactual_grad(
                &x_t, t, GradMode::Denoised, &models, schedule, &feat_orig, CLASS_SP, 40.0, 0.0,
            )
            .unwrap();
            let gp = counterfactual_grad(
                &x_t, t, GradMode::Denoised, &models, schedule, &feat_orig, CLASS_SP, 0.0, 30.0,
            )
            .unwrap();
            let sigma2 = schedule.posterior_variance(t);
            println!(
                "  t={t:>3}: |40*g_c|={:>8.3} |30*g_p|={:>8.3} sigma2={:.5} shift_c={:.5} shift_p={:.5} L_c={:.3} L_p={:.3}",
                norm(&gc.grad),
                norm(&gp.grad),
                sigma2,
                sigma2 * norm(&gc.grad) / (28.0f64 * 36.0).sqrt(),
                sigma2 * norm(&gp.grad) / (28.0f64 * 36.0).sqrt(),
                gc.loss / 40.0,
                gp.loss / 30.0,
            );
        }
    }
}
