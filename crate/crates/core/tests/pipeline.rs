//! End-to-end: transaction log to cache, training, checkpoint and evaluation.

use std::fs;

use nbrlab::baselines::{GpPop, PPop, TifuConfig, TifuKnn};
use nbrlab::data::synthetic::{generate_transactions, FixtureConfig};
use nbrlab::data::{load_transactions, preprocess, read_cache, split_leave_one_basket, write_cache, TableFormat};
use nbrlab::metrics::{evaluate_model, Metric, Recommender};
use nbrlab::model::{load_checkpoint, save_checkpoint, ModelConfig};
use nbrlab::train::{train, TrainConfig};

#[test]
fn csv_to_evaluated_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = FixtureConfig {
        n_users: 150,
        n_items: 120,
        ..FixtureConfig::default()
    };
    let mut csv = String::from("user_id,item_id,basket_id,timestamp\n");
    for t in generate_transactions(&fixture) {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            t.user_id, t.item_id, t.basket_key, t.timestamp
        ));
    }
    let csv_path = tmp.path().join("tx.csv");
    fs::write(&csv_path, csv).unwrap();

    let loaded = load_transactions(&csv_path, &TableFormat::default()).unwrap();
    assert_eq!(loaded.skipped, 0);
    let ds = preprocess(&loaded.transactions, 2, 2).unwrap();
    let cache = tmp.path().join("ds.nbrc");
    write_cache(&cache, &ds).unwrap();
    let ds = read_cache(&cache).unwrap();
    assert!(ds.n_users() > 100);

    let split = split_leave_one_basket(&ds, 5);
    let mc = ModelConfig {
        d: 16,
        seq_len: 8,
        n_heads: 2,
        n_layers: 1,
        f_max: 5,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        batch_size: 32,
        max_epochs: 4,
        patience: 2,
        ..TrainConfig::default()
    };
    let (model, _) = train(&ds, &split, &mc, &tc).unwrap();
    let ckpt = tmp.path().join("m.ckpt");
    save_checkpoint(&ckpt, &model).unwrap();
    let restored = load_checkpoint(&ckpt).unwrap();
    // gradients are not persisted
    assert_eq!(restored.config(), model.config());
    assert_eq!(restored.params().flat_values(), model.params().flat_values());

    let a = evaluate_model(&model, &ds, &split, &[10, 100]).unwrap();
    let b = evaluate_model(&restored, &ds, &split, &[10, 100]).unwrap();
    assert_eq!(a.to_tsv(), b.to_tsv());
    assert_eq!(a.per_user_tsv(), b.per_user_tsv());

    // every recommender returns valid rankings on the same split
    let tifu = TifuKnn::new(TifuConfig {
        k: 30,
        ..TifuConfig::default()
    });
    for rec in [&PPop as &dyn Recommender, &GpPop, &tifu] {
        let r = evaluate_model(rec, &ds, &split, &[10, 100]).unwrap();
        for m in Metric::ALL {
            let v = r.mean(m, 10).unwrap();
            assert!((0.0..=1.0).contains(&v), "{} {m:?} = {v}", rec.name());
        }
    }
}
