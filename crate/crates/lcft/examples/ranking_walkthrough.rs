//! The three-item ranking walkthrough: a user whose local CTR (0.25) sits
//! far below the global CTR (0.5) fine-tunes a per-item model and ends up
//! ranking a never-seen item first; correcting the labels before
//! fine-tuning restores the true order.
//!
//! Usage: cargo run --example ranking_walkthrough

use lcft::example_one::{run, transcript, ExampleOneConfig};

fn main() {
    let outcome = run(&ExampleOneConfig::default()).expect("scenario");
    print!("{}", transcript(&outcome));
}
