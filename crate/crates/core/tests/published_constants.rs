//! Published constants, read back out of the source text in `paper.md` at
//! the workspace root (or the file named by `STEC_SOURCE_TEXT`). Each test is
//! skipped with a notice when the text is not present.

use stec_core::actions::BinningSpec;
use stec_core::harness::ExperimentCfg;
use stec_core::imaging::{luma, solarize, Image};

fn source_text() -> Option<String> {
    let path = std::env::var("STEC_SOURCE_TEXT")
        .unwrap_or_else(|_| concat!(env!("CARGO_MANIFEST_DIR"), "/../../paper.md").to_string());
    let text = std::fs::read_to_string(&path).ok();
    if text.is_none() {
        eprintln!("{path} not found; skipped");
    }
    text
}

/// Numbers in the first line containing `anchor`, after the anchor.
fn numbers_after(text: &str, anchor: &str) -> Vec<f64> {
    let line = text.lines().find(|l| l.contains(anchor)).unwrap_or_else(|| panic!("{anchor:?} not found"));
    let tail = &line[line.find(anchor).unwrap() + anchor.len()..];
    tail.split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
        .filter_map(|t| t.trim_end_matches('.').parse().ok())
        .collect()
}

#[test]
fn binning_limits_and_bin_count() {
    let Some(text) = source_text() else { return };
    let spec = BinningSpec::default();
    let k = numbers_after(&text, "subdivided the interval of values");
    assert_eq!(k[0] as usize, spec.bins);
    let min = numbers_after(&text, "\\mathrm{manip}_\\mathrm{min}=");
    let max = numbers_after(&text, "\\mathrm{manip}_\\mathrm{max}=");
    assert_eq!(&min[..6], &spec.min);
    assert_eq!(&max[..6], &spec.max);
    let outputs = numbers_after(&text, "The output of $\\psi$ was");
    assert_eq!(outputs[0] as usize, ExperimentCfg::default().model().manip_outputs);
}

#[test]
fn contrast_luma_weights() {
    let Some(text) = source_text() else { return };
    let w = numbers_after(&text, "weighted according to red:");
    for (k, want) in w[..3].iter().enumerate() {
        let mut px = [0.0; 3];
        px[k] = 1.0;
        assert!((luma(&px) - want).abs() < 1e-15, "channel {k}");
    }
}

#[test]
fn solarize_threshold_and_mapping() {
    let Some(text) = source_text() else { return };
    let t = numbers_after(&text, "inverting pixels with a value above");
    let img = Image::new(1, 2, vec![0.6, t[0], 0.2, 0.9, 0.1, 0.5]).unwrap();
    let out = solarize(&img, t[0]);
    let want = [0.4, t[0], 0.2, 1.0 - 0.9, 0.1, 0.5];
    for (a, b) in out.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn cifar_optimization_defaults() {
    let Some(text) = source_text() else { return };
    let cfg = ExperimentCfg::default();
    assert_eq!(numbers_after(&text, "Learning rate per 256 batch size &")[0], cfg.base_lr);
    assert_eq!(numbers_after(&text, "Temperature $\\tau$ &")[0], cfg.tau);
    assert_eq!(numbers_after(&text, "Coefficient $\\lambda_\\mathrm{manip}$ (S-TEC) &")[0], cfg.lambda_manip);
    let wd = numbers_after(&text, "with a coefficient of $10^{");
    assert_eq!(10f64.powf(wd[0]), cfg.weight_decay);
}

#[test]
fn centroid_distances_are_quoted_as_reference() {
    let Some(text) = source_text() else { return };
    let d = numbers_after(&text, "we find that this distance is");
    assert_eq!(&d[..2], &[10.5, 0.4]);
    assert!(d[0] / d[1] > 1.0);
}
