//! Recompute `golden/calibration.json` from the current generators.
//!
//! Run after retuning any synthesis constant, inspect the numbers, and paste
//! the output over the golden file:
//!
//! ```text
//! cargo run -p ifom-core --example calibrate > crates/core/golden/calibration.json
//! ```

use std::collections::BTreeMap;

use ifom_core::datagen::{
    linear_probe_accuracy, mean_dominant_frequency, Calibration, SyntheticSpec, REGIMES,
};

fn main() {
    let mut probe_accuracy = BTreeMap::new();
    let mut regime_frequency = BTreeMap::new();
    let mut regime_gap_margin = BTreeMap::new();

    for (name, make) in [
        ("fingerprint", SyntheticSpec::fingerprint as fn(&str, usize, u64) -> SyntheticSpec),
        ("face", SyntheticSpec::face as fn(&str, usize, u64) -> SyntheticSpec),
    ] {
        let acc = linear_probe_accuracy(&make("coarse", 500, 42), 500, 250).unwrap();
        probe_accuracy.insert(name.to_string(), acc);
        eprintln!("{name}: linear probe accuracy {acc:.4}");

        let mut freqs = BTreeMap::new();
        let mut means = Vec::new();
        for regime in REGIMES {
            let mean = mean_dominant_frequency(&make(regime, 32, 77)).unwrap();
            eprintln!("{name}/{regime}: mean dominant frequency {mean:.4}");
            freqs.insert(regime.to_string(), mean);
            means.push(mean);
        }
        let min_gap = means
            .windows(2)
            .map(|p| p[1] - p[0])
            .fold(f64::INFINITY, f64::min);
        // Freeze half the observed worst-case gap as the admissible margin.
        let margin = (min_gap / 2.0 * 100.0).floor() / 100.0;
        eprintln!("{name}: min adjacent gap {min_gap:.4}, margin {margin}");
        regime_frequency.insert(name.to_string(), freqs);
        regime_gap_margin.insert(name.to_string(), margin);
    }

    let calib = Calibration {
        schema_version: 1,
        probe_accuracy_band: (0.60, 0.95),
        probe_accuracy,
        regime_frequency,
        regime_gap_margin,
        pretrain_reconstruction_drop: 0.5,
    };
    println!("{}", serde_json::to_string_pretty(&calib).unwrap());
}
