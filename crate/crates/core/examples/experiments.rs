//! Loss comparison and encoder/decoder ablation on synthetic phantoms.
//!
//! ```text
//! cargo run --release -p ravnet --example experiments [epochs] [phantoms]
//! ```
//!
//! Defaults: 50 epochs, 60 phantoms of 32×32 split 40/10/10.

use ravnet::arch::NetworkConfig;
use ravnet::data::synth_phantoms;
use ravnet::experiments::{ablation_experiment, format_table, loss_compare_experiment, Splits};
use ravnet::train::TrainConfig;

fn arg(i: usize, default: usize) -> usize {
    std::env::args()
        .nth(i)
        .map(|s| s.parse().expect("expected a positive integer"))
        .unwrap_or(default)
}

fn main() -> ravnet::Result<()> {
    let epochs = arg(1, 50);
    let count = arg(2, 60).max(5);
    let s: Vec<_> = synth_phantoms(count, 32, 2024)?
        .into_iter()
        .map(|p| p.sample)
        .collect();
    let (a, b) = (count * 2 / 3, count * 5 / 6);
    let data = Splits {
        train: &s[..a],
        val: &s[a..b],
        test: &s[b..],
    };
    let cfg = TrainConfig {
        max_epochs: epochs,
        net: NetworkConfig::desk(),
        ..Default::default()
    };
    eprintln!("training 7 variants; this takes a few minutes");
    println!(
        "{} train / {} val / {} test, {epochs} epochs\n",
        a,
        b - a,
        count - b
    );
    println!(
        "loss comparison\n{}",
        format_table(&loss_compare_experiment(&cfg, data)?)
    );
    println!(
        "ablation\n{}",
        format_table(&ablation_experiment(&cfg, data, &[])?)
    );
    Ok(())
}
