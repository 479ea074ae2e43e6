//! Medium-scale learning probe, ignored by default. Run with
//! `cargo test --test learning_probe -- --ignored --nocapture` to check the
//! classifier starts separating classes before committing to a full run.

use cdpauth::config::RunConfig;
use cdpauth::eval::experiment::ExperimentKind;
use cdpauth::pipeline;

#[test]
#[ignore]
fn medium_scale_learning_probe() {
    let mut config = RunConfig::default();
    config.seed = 7;
    config.dataset.n_templates = std::env::var("PROBE_TEMPLATES")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(48);
    config.train.epochs = std::env::var("PROBE_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(12);
    config.train.lr = std::env::var("PROBE_LR")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(config.train.lr);
    config.classify.n_trials = std::env::var("PROBE_TRIALS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(10);

    let t0 = std::time::Instant::now();
    let dataset = pipeline::synth_dataset(&config).unwrap();
    println!("dataset built at {:?}", t0.elapsed());

    let ckpt = pipeline::train_model(&config, &dataset, None).unwrap();
    println!(
        "trained at {:?}; val loss {} -> {}",
        t0.elapsed(),
        ckpt.meta.train_report.val_loss_init,
        ckpt.meta.train_report.val_loss_final
    );
    for e in &ckpt.meta.train_report.epochs {
        println!(
            "  epoch {:>2}: train {:.4}, val {:.4}",
            e.epoch, e.train_loss, e.val_loss
        );
    }

    let out = pipeline::evaluate(&config, &dataset, &ckpt, ExperimentKind::Main).unwrap();
    println!("evaluated at {:?}", t0.elapsed());
    println!(
        "accuracy {:?}, P_err {:.4} (miss {:.4}, fa {:.4})",
        out.report.accuracy,
        out.report.auth.p_err,
        out.report.auth.p_miss_mean,
        out.report.auth.p_fa_mean
    );
    if let Some(cm) = &out.report.confusion {
        for (label, row) in cm.labels.iter().zip(&cm.percent) {
            println!("  {label:>8}: {row:.0?}");
        }
    }
}
