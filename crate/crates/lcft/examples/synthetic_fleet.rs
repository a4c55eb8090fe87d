//! Generates a synthetic fleet with long-tail CTR drift and prints its
//! shape: global CTR, the local-CTR histogram, and a few users compared
//! against the ground-truth oracle.
//!
//! Usage: cargo run --example synthetic_fleet

use lcft::data::{global_stats, synth_generate, SynthConfig};

fn main() {
    let cfg = SynthConfig {
        num_users: 3000,
        ..SynthConfig::default()
    };
    let (datasets, oracle) = synth_generate(&cfg).expect("generate");
    let stats = global_stats(&datasets).expect("stats");
    println!(
        "{} users, {} samples, global CTR {:.4}",
        stats.num_users,
        stats.total_pos + stats.total_neg,
        stats.global_ctr
    );

    // Local-CTR histogram, ten buckets.
    let mut counts = [0usize; 10];
    for ds in &datasets {
        let b = ((ds.local_ctr() * 10.0) as usize).min(9);
        counts[b] += 1;
    }
    let max = counts.iter().copied().max().unwrap().max(1);
    println!("\nlocal CTR histogram:");
    for (b, &c) in counts.iter().enumerate() {
        let bar = "#".repeat(c * 50 / max);
        println!(
            "[{:.1}, {:.1}) {c:>5} {bar}",
            b as f64 / 10.0,
            (b + 1) as f64 / 10.0
        );
    }
    let drifted = datasets
        .iter()
        .filter(|d| (d.local_ctr() - stats.global_ctr).abs() > 0.1)
        .count();
    println!(
        "\nusers with |local - global| > 0.1: {drifted} ({:.1}%)",
        100.0 * drifted as f64 / datasets.len() as f64
    );

    // Empirical click rate per user against the oracle's expectation over
    // that user's impressions.
    println!("\nuser   samples  empirical CTR  oracle mean p(u,i)");
    for ds in datasets.iter().take(8) {
        let mean_p: f64 = ds
            .samples()
            .iter()
            .map(|s| oracle.true_ctr(s.user_id, s.item_id))
            .sum::<f64>()
            / ds.len() as f64;
        println!(
            "{:<6} {:<8} {:<14.4} {:.4}",
            ds.user_id(),
            ds.len(),
            ds.local_ctr(),
            mean_p
        );
    }
}
