use tgir::denoiser::*;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = TrainConfig { steps, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    let (_, report) = train_patch_denoiser(&cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let head: f64 = report.loss_curve[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = report.loss_curve[report.loss_curve.len() - 10..].iter().sum::<f64>() / 10.0;
    println!(
        "steps {steps} in {dt:.1}s | loss {head:.4} -> {tail:.4} | holdout trained {:.4} untrained {:.4} identity {:.4}",
        report.holdout_trained, report.holdout_untrained, report.holdout_identity
    );
}
