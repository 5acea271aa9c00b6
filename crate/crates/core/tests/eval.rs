use chroma_core::colorspace::rgb_to_lab;
use chroma_core::data::{synth, Dataset};
use chroma_core::eval::*;
use chroma_core::training::{ModelKind, TrainConfig, Trainer};

fn config(model: ModelKind) -> TrainConfig {
    TrainConfig { model, image_size: 16, base_channels: 8, ..Default::default() }
}

#[test]
fn ground_truth_scores_perfectly() {
    let ds = Dataset::from_images("s", synth::scenes(5, 16, 1)).unwrap();
    let truth: Vec<Vec<f32>> = ds.samples.iter().map(|s| s.norm.ab.clone()).collect();
    let r = EvalReport::from_predictions(&ds, &truth).unwrap();
    assert_eq!(r.ab_mae, 0.0);
    assert!(r.psnr_db.is_infinite());
    let csv = r.to_csv();
    assert!(csv.starts_with(&format!("{EVAL_HEADER}\n0,1,0.000000,inf\n")), "{csv}");
    assert!(csv.ends_with("mean,5,0.000000,inf\n"));
}

#[test]
fn untrained_generator_error_matches_dataset_chroma() {
    let ds = Dataset::from_images("s", synth::scenes(12, 16, 2)).unwrap();
    let t = Trainer::new(config(ModelKind::Gan)).unwrap();
    let r = EvalReport::evaluate(&t.generator, &ds, 8).unwrap();
    let expected = ds.mean_abs_ab();
    assert!((r.ab_mae - expected).abs() <= 0.05, "{} vs {expected}", r.ab_mae);
    assert!(r.psnr_db.is_finite());
    let mean = r.rows.iter().map(|x| x.ab_mae).sum::<f64>() / r.count() as f64;
    assert_eq!(r.ab_mae, mean);
}

#[test]
fn baseline_and_gan_reports_share_schema() {
    let ds = Dataset::from_images("s", synth::scenes(3, 16, 3)).unwrap();
    let schema = |m| {
        let t = Trainer::new(config(m)).unwrap();
        let csv = EvalReport::evaluate(&t.generator, &ds, 8).unwrap().to_csv();
        csv.lines().map(|l| (l.split(',').count(), l.split(',').next().unwrap().to_string())).collect::<Vec<_>>()
    };
    assert_eq!(schema(ModelKind::Gan), schema(ModelKind::Baseline));
}

#[test]
fn colorized_output_keeps_input_lightness() {
    let ds = Dataset::from_images("s", synth::scenes(4, 16, 4)).unwrap();
    for predict_ab in [true, false] {
        let t = Trainer::new(TrainConfig { predict_ab, ..config(ModelKind::Gan) }).unwrap();
        let refs: Vec<_> = ds.samples.iter().map(|s| &s.norm).collect();
        let out = colorize(&t.generator, &refs, 3).unwrap();
        assert_eq!(out, colorize(&t.generator, &refs, 4).unwrap(), "chunking changed the result");
        for (img, s) in out.iter().zip(&ds.samples) {
            let lab = rgb_to_lab(img);
            let truth = rgb_to_lab(&s.rgb);
            let worst = lab.l.iter().zip(&truth.l).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            // Only 8-bit rounding separates the two.
            assert!(worst < 1.0, "lightness moved by {worst}");
        }
    }
}
