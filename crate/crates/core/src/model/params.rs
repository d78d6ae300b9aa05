use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::ModelConfig;
use crate::tensor::{ParamStore, Tensor};

/// Standard deviation of the embedding-table initializer.
pub const EMBEDDING_STD: f64 = 0.02;

pub(crate) fn fc_name(prefix: &str, layer: usize, part: &str) -> String {
    format!("{prefix}.{layer}.{part}")
}

pub(crate) fn tr_name(layer: usize, part: &str) -> String {
    format!("tr.{layer}.{part}")
}

/// Output widths of the frequency scorer layers.
pub(crate) fn freq_widths(cfg: &ModelConfig) -> Vec<usize> {
    let mut w = vec![cfg.d; cfg.freq_fc_depth - 1];
    w.push(1);
    w
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store
            .insert(name, Tensor::new(shape.to_vec(), data).expect("shape product"));
    }

    fn normal(&mut self, name: &str, shape: &[usize]) {
        let dist = Normal::new(0.0, EMBEDDING_STD).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store
            .insert(name, Tensor::new(shape.to_vec(), data).expect("shape product"));
    }

    fn linear(&mut self, prefix: &str, layer: usize, fan_in: usize, fan_out: usize) {
        self.uniform(fc_name(prefix, layer, "w"), &[fan_in, fan_out], fan_in);
        self.uniform(fc_name(prefix, layer, "b"), &[fan_out], fan_in);
    }

    fn norm(&mut self, g: String, b: String, d: usize) {
        self.store.insert(g, Tensor::filled(&[d], 1.0));
        self.store.insert(b, Tensor::zeros(&[d]));
    }
}

/// Builds every learned tensor in a fixed insertion order from
/// `cfg.init_seed`. Weights are stored `(fan_in, fan_out)`.
pub fn init_params(cfg: &ModelConfig, n_items: usize) -> ParamStore {
    let d = cfg.d;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(cfg.init_seed),
        store: ParamStore::new(),
    };
    for k in 0..cfg.enc_fc_depth {
        let fan_in = if k == 0 { n_items } else { d };
        init.linear("enc", k, fan_in, d);
    }
    init.normal("pos", &[cfg.seq_len, d]);
    for l in 0..cfg.n_layers {
        init.norm(tr_name(l, "ln1.g"), tr_name(l, "ln1.b"), d);
        for p in ["q", "k", "v", "o"] {
            init.uniform(tr_name(l, &format!("w{p}")), &[d, d], d);
            init.uniform(tr_name(l, &format!("b{p}")), &[d], d);
        }
        init.norm(tr_name(l, "ln2.g"), tr_name(l, "ln2.b"), d);
        for p in ["ff1", "ff2"] {
            init.uniform(tr_name(l, &format!("{p}.w")), &[d, d], d);
            init.uniform(tr_name(l, &format!("{p}.b")), &[d], d);
        }
    }
    if cfg.n_layers > 0 {
        init.norm("ln_f.g".into(), "ln_f.b".into(), d);
    }
    for k in 0..cfg.user_fc_depth {
        init.linear("user", k, d, d);
    }
    init.normal("i1", &[n_items, d]);
    init.normal("i2", &[n_items, d]);
    init.normal("fe", &[cfg.f_max + 1, d]);
    let mut fan_in = d + cfg.seq_len;
    for (k, w) in freq_widths(cfg).into_iter().enumerate() {
        init.linear("freq", k, fan_in, w);
        fan_in = w;
    }
    init.store
}
