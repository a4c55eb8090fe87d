//! Measures how CTR drift harms plain per-user fine-tuning and how label
//! correction repairs it, on a synthetic fleet.
//!
//! Trains a global model, fine-tunes every user three ways (no correction,
//! gap-shrinking soft1, gap-amplifying soft2), and prints user-level
//! average AUCs plus the improvement of correction over plain fine-tuning
//! in three CTR-drift buckets.
//!
//! Usage: cargo run --example drift_repair [-- <num_users> [<seed>]]

use lcft::correction::CorrectionPolicy;
use lcft::data::{global_stats, split_by_timestamp, synth_generate, train_pool, SynthConfig};
use lcft::eval::{auc, user_avg_auc, win_tie_loss, UserEval, TIE_TOLERANCE};
use lcft::kernel::LossKind;
use lcft::models::{ModelKind, ModelParams, ModelSpec};
use lcft::training::{run_lcft, train_cloud, OptimizerConfig, UpdateScope};

fn main() {
    let mut args = std::env::args().skip(1);
    let num_users: usize = args
        .next()
        .map(|a| a.parse().expect("num_users"))
        .unwrap_or(800);
    let seed: u64 = args.next().map(|a| a.parse().expect("seed")).unwrap_or(1);

    let synth = SynthConfig {
        num_users,
        num_items: 80,
        num_categories: 10,
        samples_per_user: (36, 44),
        bias_location: -0.5,
        bias_scale: 1.2,
        bias_tail_exponent: 1.0,
        seed,
        ..SynthConfig::default()
    };
    let cutoff = 29;
    let loss = LossKind::CrossEntropy;

    let (datasets, _) = synth_generate(&synth).expect("generate");
    let pool = train_pool(&datasets, cutoff);
    let w_g = global_stats(&pool).expect("stats").global_ctr;
    let splits: Vec<_> = split_by_timestamp(&datasets, cutoff)
        .into_iter()
        .filter(|s| s.train.len() >= 8)
        .collect();
    println!(
        "fleet: {} users ({} evaluated), global CTR {w_g:.4}",
        num_users,
        splits.len()
    );

    let (u, i, c) = lcft::data::infer_vocabs(&datasets);
    let spec = ModelSpec {
        kind: ModelKind::WideDeepLite,
        user_vocab: u,
        item_vocab: i,
        cat_vocab: c,
        embed_dim: 8,
        hidden: vec![32, 16],
    };
    let cloud_opt = OptimizerConfig::adam(0.01, 32, 2, seed.wrapping_add(1));
    let cloud =
        train_cloud(&pool, &spec, &cloud_opt, loss, seed.wrapping_add(2)).expect("cloud training");

    let eval_entries = |params_for: &dyn Fn(usize) -> ModelParams, policy: &str| -> Vec<UserEval> {
        splits
            .iter()
            .map(|s| {
                let params = params_for(s.user_id());
                let preds = params.predict(&s.test).expect("predict");
                let labels: Vec<f64> = s.test.iter().map(|t| t.label).collect();
                UserEval {
                    user_id: s.user_id(),
                    test_size: s.test.len(),
                    auc: auc(&preds, &labels).expect("auc"),
                    local_ctr: s.train.local_ctr(),
                    policy: policy.to_string(),
                    fallback: false,
                }
            })
            .collect()
    };

    let cloud_entries = eval_entries(&|_| cloud.params.clone(), "cloud");
    println!(
        "cloud AUC_Avg: {:.4}",
        user_avg_auc(&cloud_entries).unwrap()
    );

    let ft_opt = OptimizerConfig::adam(0.01, 16, 6, seed.wrapping_add(3));
    let train_sets: Vec<_> = splits.iter().map(|s| s.train.clone()).collect();
    let mut per_policy = Vec::new();
    for policy in [
        CorrectionPolicy::None,
        CorrectionPolicy::Soft1,
        CorrectionPolicy::Soft2,
    ] {
        let fleet = run_lcft(
            &train_sets,
            &policy,
            &cloud.params,
            w_g,
            &ft_opt,
            loss,
            UpdateScope::AllTouched,
        );
        assert!(fleet.failures.is_empty(), "no user may diverge");
        let entries = eval_entries(&|uid| fleet.results[&uid].params.clone(), policy.name());
        println!(
            "{:<6} AUC_Avg: {:.4}",
            policy.name(),
            user_avg_auc(&entries).unwrap()
        );
        per_policy.push((policy.name().to_string(), entries));
    }

    let local = &per_policy[0].1;
    let drift_edges = [0.0, 0.15, 0.3, 1.0];
    let bucket_of = |w: f64| -> usize {
        let d = (w - w_g).abs();
        for b in 0..drift_edges.len() - 2 {
            if d < drift_edges[b + 1] {
                return b;
            }
        }
        drift_edges.len() - 2
    };

    // Cloud-vs-local inside each drift bucket.
    println!("\n|w_i - w_g| bucket    users   cloud    local    soft1-local  soft2-local");
    for b in 0..drift_edges.len() - 1 {
        let ids: Vec<usize> = local
            .iter()
            .filter(|e| bucket_of(e.local_ctr) == b && e.auc.is_some())
            .map(|e| e.user_id)
            .collect();
        let pick = |entries: &[UserEval]| -> Vec<UserEval> {
            entries
                .iter()
                .filter(|e| ids.contains(&e.user_id))
                .cloned()
                .collect()
        };
        let cloud_b = user_avg_auc(&pick(&cloud_entries)).unwrap_or(f64::NAN);
        let local_b = user_avg_auc(&pick(local)).unwrap_or(f64::NAN);
        let diff = |entries: &[UserEval]| -> f64 {
            let a = pick(entries);
            let l = pick(local);
            let mut sum = 0.0;
            let mut n = 0;
            for (x, y) in a.iter().zip(&l) {
                if let (Some(ax), Some(ay)) = (x.auc, y.auc) {
                    sum += ax - ay;
                    n += 1;
                }
            }
            if n > 0 {
                sum / n as f64
            } else {
                f64::NAN
            }
        };
        println!(
            "[{:.2}, {:.2})          {:<6}  {:.4}   {:.4}   {:+.4}      {:+.4}",
            drift_edges[b],
            drift_edges[b + 1],
            ids.len(),
            cloud_b,
            local_b,
            diff(&per_policy[1].1),
            diff(&per_policy[2].1),
        );
    }

    for (name, entries) in &per_policy[1..] {
        let wtl = win_tie_loss(entries, local, TIE_TOLERANCE).unwrap();
        println!(
            "\n{name} vs local: {} wins / {} ties / {} losses",
            wtl.wins, wtl.ties, wtl.losses
        );
    }
}
