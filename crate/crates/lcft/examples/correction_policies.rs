//! Tour of the label-correction policies: the two closed-form solutions,
//! the drift-direction-aware soft strategies, the equivalent-CTR identity
//! they all satisfy, and a hard table built by grid search.
//!
//! Usage: cargo run --example correction_policies

use lcft::correction::{
    build_hard_table, default_hard_grid, equivalent_ctr_closed, equivalent_ctr_numeric,
    hard_lookup, soft_correct, CorrectionPolicy, HardGroup,
};
use lcft::kernel::LossKind;

fn main() {
    let global_ctr = 0.4;
    println!("global CTR {global_ctr}\n");
    println!("local CTR   policy           alpha    beta     equivalent CTR");
    for local_ctr in [0.1, 0.25, 0.4, 0.6, 0.9] {
        for policy in [
            CorrectionPolicy::None,
            CorrectionPolicy::ScalePositive,
            CorrectionPolicy::ShiftNegative,
            CorrectionPolicy::Soft1,
            CorrectionPolicy::Soft2,
        ] {
            let labels = soft_correct(&policy, local_ctr, global_ctr).expect("in-domain");
            let eq = equivalent_ctr_closed(labels.alpha(), labels.beta(), local_ctr);
            println!(
                "{local_ctr:<11} {:<16} {:<8.4} {:<8.4} {:.12}",
                policy.name(),
                labels.alpha(),
                labels.beta(),
                eq.value()
            );
        }
        println!();
    }

    // The closed form against the independent 1-D minimizer, both losses.
    let (alpha, beta, n_pos, n_neg) = (2.0, 0.0, 25, 75);
    let w = n_pos as f64 / (n_pos + n_neg) as f64;
    let closed = equivalent_ctr_closed(alpha, beta, w).value();
    println!("equivalent CTR of alpha={alpha}, beta={beta}, w={w}: closed form {closed}");
    for loss in [LossKind::MeanSquaredError, LossKind::CrossEntropy] {
        let numeric = equivalent_ctr_numeric(alpha, beta, n_pos, n_neg, loss).expect("interior");
        println!("  numeric minimizer ({}): {numeric:.8}", loss.name());
    }

    // A hard table: grid-search the best labels per local-CTR interval.
    // The score here is synthetic (distance of the equivalent CTR from the
    // global CTR); a real pipeline scores candidates by held-out AUC.
    let groups = [
        HardGroup {
            lo: 0.0,
            hi: 0.25,
            mean_local_ctr: 0.12,
            user_count: 40,
        },
        HardGroup {
            lo: 0.25,
            hi: 0.6,
            mean_local_ctr: 0.41,
            user_count: 90,
        },
        HardGroup {
            lo: 0.6,
            hi: 1.0,
            mean_local_ctr: 0.74,
            user_count: 25,
        },
    ];
    let table = build_hard_table(&groups, &default_hard_grid(), global_ctr, |gi, cand| {
        let eq = equivalent_ctr_closed(cand.alpha(), cand.beta(), groups[gi].mean_local_ctr);
        Ok(-(eq.value() - global_ctr).abs())
    })
    .expect("table");
    println!("\nhard table (lo hi alpha beta):\n{}", table.to_text());
    for w in [0.05, 0.3, 0.8] {
        let l = hard_lookup(&table, w);
        println!("lookup w={w}: alpha {:.4}, beta {:.4}", l.alpha(), l.beta());
    }
}
