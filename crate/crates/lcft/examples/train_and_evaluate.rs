//! Library-level pipeline on one policy: generate data, split by
//! timestamp, train the cloud model, round-trip it through a checkpoint
//! file, fine-tune every user with soft correction, and report user-level
//! average AUCs with win/tie/loss counts.
//!
//! Usage: cargo run --example train_and_evaluate

use lcft::correction::CorrectionPolicy;
use lcft::data::{
    global_stats, infer_vocabs, split_by_timestamp, synth_generate, train_pool, SynthConfig,
};
use lcft::eval::{auc, user_avg_auc, win_tie_loss, UserEval, TIE_TOLERANCE};
use lcft::kernel::LossKind;
use lcft::models::{load_checkpoint, save_checkpoint, ModelKind, ModelParams, ModelSpec};
use lcft::training::{run_lcft, train_cloud, OptimizerConfig, UpdateScope};

fn main() {
    let synth = SynthConfig {
        num_users: 400,
        num_items: 60,
        num_categories: 8,
        samples_per_user: (30, 40),
        seed: 11,
        ..SynthConfig::default()
    };
    let cutoff = 24;
    let loss = LossKind::CrossEntropy;

    let (datasets, _) = synth_generate(&synth).expect("generate");
    let pool = train_pool(&datasets, cutoff);
    let w_g = global_stats(&pool).expect("stats").global_ctr;
    let (u, i, c) = infer_vocabs(&datasets);
    let spec = ModelSpec {
        kind: ModelKind::DinLite,
        user_vocab: u,
        item_vocab: i,
        cat_vocab: c,
        embed_dim: 8,
        hidden: vec![32, 16],
    };

    let cloud = train_cloud(
        &pool,
        &spec,
        &OptimizerConfig::adam(0.01, 32, 2, 1),
        loss,
        2,
    )
    .expect("cloud training");
    println!("cloud epochs: {:?}", cloud.epoch_losses);

    // Round-trip the global model through the checkpoint format.
    let path = std::env::temp_dir().join("lcft-example-checkpoint.bin");
    save_checkpoint(&path, &cloud.params).expect("save");
    let global = load_checkpoint(&path).expect("load");
    assert_eq!(global, cloud.params);
    println!(
        "checkpoint round-trip: {} bytes",
        std::fs::metadata(&path).unwrap().len()
    );

    let splits: Vec<_> = split_by_timestamp(&datasets, cutoff)
        .into_iter()
        .filter(|s| s.train.len() >= 8)
        .collect();
    let train_sets: Vec<_> = splits.iter().map(|s| s.train.clone()).collect();

    let entries_for = |params_of: &dyn Fn(usize) -> ModelParams, policy: &str| -> Vec<UserEval> {
        splits
            .iter()
            .map(|s| {
                let params = params_of(s.user_id());
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

    let cloud_entries = entries_for(&|_| global.clone(), "cloud");
    let ft_opt = OptimizerConfig::adam(0.01, 16, 4, 3);
    let mut all = vec![("cloud".to_string(), cloud_entries)];
    for policy in [CorrectionPolicy::None, CorrectionPolicy::Soft1] {
        let fleet = run_lcft(
            &train_sets,
            &policy,
            &global,
            w_g,
            &ft_opt,
            loss,
            UpdateScope::AllTouched,
        );
        println!(
            "{}: {} users fine-tuned, {} failures",
            policy.name(),
            fleet.results.len(),
            fleet.failures.len()
        );
        let entries = entries_for(&|uid| fleet.results[&uid].params.clone(), policy.name());
        all.push((policy.name().to_string(), entries));
    }

    println!("\npolicy  AUC_Avg");
    for (name, entries) in &all {
        println!("{name:<7} {:.4}", user_avg_auc(entries).expect("defined"));
    }
    let wtl = win_tie_loss(&all[2].1, &all[1].1, TIE_TOLERANCE).expect("same users");
    println!(
        "\nsoft1 vs none per user: {} wins / {} ties / {} losses",
        wtl.wins, wtl.ties, wtl.losses
    );
}
