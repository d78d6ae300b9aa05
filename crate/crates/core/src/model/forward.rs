use rand_chacha::ChaCha8Rng;

use super::params::{fc_name, tr_name};
use super::{ModelError, Result, Saferec, ScoreOutput};
use crate::data::{Basket, EncodedBatch};
use crate::tensor::{Gradients, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Differentiable handles to one batch's scores.
#[derive(Debug, Clone, Copy)]
pub struct ScoreVars {
    pub scores: Var,
    pub p_uu: Var,
    pub p_ui: Option<Var>,
}

/// `(B·H·L·L)` flags, true where query `q` may not attend key `k`.
///
/// A real query sees real keys at or before it. Pad queries see only
/// themselves, which keeps every row non-empty; their outputs never reach
/// the last position because real queries ignore pad keys.
pub fn attention_mask(pad: &[bool], batch: usize, heads: usize, seq_len: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(batch * heads * seq_len * seq_len);
    for b in 0..batch {
        let row_pad = &pad[b * seq_len..(b + 1) * seq_len];
        for _ in 0..heads {
            for q in 0..seq_len {
                for (k, &kp) in row_pad.iter().enumerate() {
                    let allowed = k == q || (k < q && !kp);
                    out.push(!allowed);
                }
            }
        }
    }
    out
}

/// One forward evaluation on a fresh tape. Parameters are copied onto the
/// tape the first time an op needs them.
pub struct ForwardPass<'a> {
    pub tape: Tape,
    model: &'a Saferec,
    bound: Vec<Option<Var>>,
    rng: Option<ChaCha8Rng>,
    /// Attention weights `(B·H, L, L)` per transformer layer.
    pub attention: Vec<Var>,
}

impl<'a> ForwardPass<'a> {
    pub fn new(model: &'a Saferec) -> Self {
        Self {
            tape: Tape::new(),
            model,
            bound: vec![None; model.params.len()],
            rng: None,
            attention: Vec::new(),
        }
    }

    /// Training-mode pass: dropout at `config.dropout` drawn from `rng`.
    pub fn with_dropout(model: &'a Saferec, rng: ChaCha8Rng) -> Self {
        Self {
            rng: Some(rng),
            ..Self::new(model)
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self
            .model
            .params
            .id(name)
            .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))?;
        if let Some(v) = self.bound[id] {
            return Ok(v);
        }
        let v = self.tape.param(self.model.params.by_id(id).value.clone());
        self.bound[id] = Some(v);
        Ok(v)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.model.config.dropout;
        match self.rng.as_mut() {
            Some(rng) if rate > 0.0 => Ok(self.tape.dropout(x, rate, rng)?),
            _ => Ok(x),
        }
    }

    fn linear(&mut self, x: Var, prefix: &str, layer: usize) -> Result<Var> {
        let w = self.param(&fc_name(prefix, layer, "w"))?;
        let b = self.param(&fc_name(prefix, layer, "b"))?;
        let y = self.tape.matmul(x, w, false)?;
        Ok(self.tape.add_bias(y, b)?)
    }

    fn check_batch(&self, batch: &EncodedBatch) -> Result<()> {
        let cfg = &self.model.config;
        if batch.seq_len() != cfg.seq_len || batch.f_max() != cfg.f_max || batch.n_items() != self.model.n_items {
            return Err(ModelError::BatchMismatch(format!(
                "batch (L={}, F_max={}, |V|={}) vs model (L={}, F_max={}, |V|={})",
                batch.seq_len(),
                batch.f_max(),
                batch.n_items(),
                cfg.seq_len,
                cfg.f_max,
                self.model.n_items
            )));
        }
        if batch.batch_size() == 0 {
            return Err(ModelError::BatchMismatch("empty batch".into()));
        }
        Ok(())
    }

    /// `(B, L, d)` basket encodings. The first layer sums the weight rows of
    /// the items present, which equals a multi-hot row times the matrix.
    pub fn encode_history(&mut self, batch: &EncodedBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let cfg = &self.model.config;
        let (b, l, d) = (batch.batch_size(), cfg.seq_len, cfg.d);
        let depth = cfg.enc_fc_depth;
        let bags: Vec<Vec<usize>> = batch
            .rows()
            .iter()
            .map(|r| r.iter().map(|&i| i as usize).collect())
            .collect();
        let w0 = self.param("enc.0.w")?;
        let b0 = self.param("enc.0.b")?;
        let mut x = self.tape.embedding_bag(w0, &bags)?;
        x = self.tape.add_bias(x, b0)?;
        x = self.tape.tanh(x);
        for k in 1..depth {
            x = self.linear(x, "enc", k)?;
            x = self.tape.tanh(x);
        }
        Ok(self.tape.reshape(x, &[b, l, d])?)
    }

    /// Adds positional embeddings and runs the pre-norm transformer stack.
    pub fn transformer_forward(&mut self, w_lat: Var, pad_mask: &[bool]) -> Result<Var> {
        let cfg = self.model.config.clone();
        let shape = self.tape.shape(w_lat).to_vec();
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (cfg.n_heads, cfg.head_dim());
        let pos = self.param("pos")?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let p = self.tape.embedding(pos, &positions)?;
        let p = self.tape.reshape(p, &[b, l, d])?;
        let mut x = self.tape.add(w_lat, p)?;
        x = self.dropout(x)?;
        if cfg.n_layers == 0 {
            return Ok(x);
        }
        let mask = attention_mask(pad_mask, b, h, l);
        for layer in 0..cfg.n_layers {
            let g1 = self.param(&tr_name(layer, "ln1.g"))?;
            let b1 = self.param(&tr_name(layer, "ln1.b"))?;
            let normed = self.tape.layer_norm(x, g1, b1, LN_EPS)?;
            let mut heads = Vec::with_capacity(3);
            for proj in ["q", "k", "v"] {
                let w = self.param(&tr_name(layer, &format!("w{proj}")))?;
                let bias = self.param(&tr_name(layer, &format!("b{proj}")))?;
                let y = self.tape.matmul(normed, w, false)?;
                let y = self.tape.add_bias(y, bias)?;
                let y = self.tape.reshape(y, &[b, l, h, dh])?;
                let y = self.tape.permute(y, &[0, 2, 1, 3])?;
                heads.push(self.tape.reshape(y, &[b * h, l, dh])?);
            }
            let att = self.tape.masked_attention_scores(heads[0], heads[1], &mask)?;
            self.attention.push(att);
            let ctx = self.tape.bmm(att, heads[2], false)?;
            let ctx = self.tape.reshape(ctx, &[b, h, l, dh])?;
            let ctx = self.tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = self.tape.reshape(ctx, &[b, l, d])?;
            let wo = self.param(&tr_name(layer, "wo"))?;
            let bo = self.param(&tr_name(layer, "bo"))?;
            let out = self.tape.matmul(ctx, wo, false)?;
            let out = self.tape.add_bias(out, bo)?;
            let out = self.dropout(out)?;
            x = self.tape.add(x, out)?;

            let g2 = self.param(&tr_name(layer, "ln2.g"))?;
            let b2 = self.param(&tr_name(layer, "ln2.b"))?;
            let normed = self.tape.layer_norm(x, g2, b2, LN_EPS)?;
            let w1 = self.param(&tr_name(layer, "ff1.w"))?;
            let c1 = self.param(&tr_name(layer, "ff1.b"))?;
            let w2 = self.param(&tr_name(layer, "ff2.w"))?;
            let c2 = self.param(&tr_name(layer, "ff2.b"))?;
            let f = self.tape.matmul(normed, w1, false)?;
            let f = self.tape.add_bias(f, c1)?;
            let f = self.tape.tanh(f);
            let f = self.tape.matmul(f, w2, false)?;
            let f = self.tape.add_bias(f, c2)?;
            let f = self.dropout(f)?;
            x = self.tape.add(x, f)?;
        }
        let g = self.param("ln_f.g")?;
        let beta = self.param("ln_f.b")?;
        Ok(self.tape.layer_norm(x, g, beta, LN_EPS)?)
    }

    /// Last position through the user FC stack: `(B, d)`.
    pub fn user_representation(&mut self, w_tr: Var) -> Result<Var> {
        let l = self.tape.shape(w_tr)[1];
        let mut u = self.tape.select(w_tr, 1, l - 1)?;
        for k in 0..self.model.config.user_fc_depth {
            u = self.linear(u, "user", k)?;
            u = self.tape.tanh(u);
        }
        Ok(u)
    }

    /// `p_uu = u · I1ᵀ`: `(B, |V|)`.
    pub fn user_score(&mut self, u: Var) -> Result<Var> {
        let i1 = self.param("i1")?;
        Ok(self.tape.matmul(u, i1, true)?)
    }

    fn freq_stack(&mut self, c: Var) -> Result<Var> {
        let depth = self.model.config.freq_fc_depth;
        let mut x = c;
        for k in 0..depth {
            x = self.linear(x, "freq", k)?;
            if k + 1 < depth {
                x = self.tape.tanh(x);
            }
        }
        let n = self.tape.shape(x)[0];
        Ok(self.tape.reshape(x, &[n])?)
    }

    /// `p_ui`: `(B, |V|)`. Items a user never bought in the window share
    /// `h = 0, f = 0`, so their score depends on the item alone and is
    /// computed once per catalog; bought pairs are scored individually and
    /// written over it.
    pub fn frequency_score(&mut self, batch: &EncodedBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let (v, l) = (self.model.n_items, self.model.config.seq_len);
        let i2 = self.param("i2")?;
        let fe = self.param("fe")?;

        let fe0 = self.tape.embedding(fe, &vec![0; v])?;
        let cold_emb = self.tape.add(i2, fe0)?;
        let zeros = self.tape.constant(Tensor::zeros(&[v, l]));
        let cold_c = self.tape.concat(&[cold_emb, zeros])?;
        let cold = self.freq_stack(cold_c)?;

        let pairs = batch.pairs();
        let cells: Vec<(usize, usize)> = pairs.iter().map(|p| (p.row, p.item as usize)).collect();
        let warm = if pairs.is_empty() {
            self.tape.constant(Tensor::vector(Vec::new()))
        } else {
            let items: Vec<usize> = pairs.iter().map(|p| p.item as usize).collect();
            let freqs: Vec<usize> = pairs.iter().map(|p| p.frequency).collect();
            let mut h = vec![0.0; pairs.len() * l];
            for (row, p) in h.chunks_mut(l).zip(pairs) {
                for &pos in &p.positions {
                    row[pos] = 1.0;
                }
            }
            let e = self.tape.embedding(i2, &items)?;
            let f = self.tape.embedding(fe, &freqs)?;
            let emb = self.tape.add(e, f)?;
            let hv = self.tape.constant(Tensor::new(vec![pairs.len(), l], h)?);
            let c = self.tape.concat(&[emb, hv])?;
            self.freq_stack(c)?
        };
        Ok(self.tape.scatter_override(cold, batch.batch_size(), &cells, warm)?)
    }

    /// `scores = p_uu + p_ui`, or `p_uu` alone with the frequency module off.
    pub fn total_score(&mut self, batch: &EncodedBatch) -> Result<ScoreVars> {
        let w_lat = self.encode_history(batch)?;
        let w_tr = self.transformer_forward(w_lat, batch.pad_mask())?;
        let u = self.user_representation(w_tr)?;
        let p_uu = self.user_score(u)?;
        if !self.model.config.freq_module_enabled {
            return Ok(ScoreVars {
                scores: p_uu,
                p_uu,
                p_ui: None,
            });
        }
        let p_ui = self.frequency_score(batch)?;
        let scores = self.tape.add(p_uu, p_ui)?;
        Ok(ScoreVars {
            scores,
            p_uu,
            p_ui: Some(p_ui),
        })
    }

    pub fn score_output(&self, vars: &ScoreVars) -> ScoreOutput {
        let p_uu = self.tape.value(vars.p_uu).clone();
        let p_ui = match vars.p_ui {
            Some(v) => self.tape.value(v).clone(),
            None => Tensor::zeros(p_uu.shape()),
        };
        ScoreOutput {
            scores: self.tape.value(vars.scores).clone(),
            p_uu,
            p_ui,
        }
    }

    /// Mean over users of `−Σ_{i ∈ target} log softmax(scores)_i`.
    pub fn loss(&mut self, scores: Var, targets: &[Basket]) -> Result<Var> {
        let shape = self.tape.shape(scores).to_vec();
        let (b, v) = (shape[0], shape[1]);
        if targets.len() != b {
            return Err(ModelError::BatchMismatch(format!(
                "{} targets for {b} rows",
                targets.len()
            )));
        }
        if !self.tape.value(scores).is_finite() {
            return Err(ModelError::NonFinite("score".into()));
        }
        let mut q = vec![0.0; b * v];
        for (r, t) in targets.iter().enumerate() {
            if t.is_empty() {
                return Err(ModelError::BatchMismatch(format!("row {r} has an empty target")));
            }
            for &i in t {
                q[r * v + i as usize] = 1.0;
            }
        }
        let logp = self.tape.log_softmax(scores);
        let q = self.tape.constant(Tensor::new(vec![b, v], q)?);
        let picked = self.tape.mul(logp, q)?;
        let total = self.tape.sum(picked);
        Ok(self.tape.scale(total, -1.0 / b as f64))
    }

    /// `(param id, gradient)` for every parameter the loss touched.
    pub fn param_gradients(&self, loss: Var) -> Result<Vec<(usize, Tensor)>> {
        let grads: Gradients = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(id, v)| v.map(|v| (id, grads.get_or_zeros(v))))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_batch, BasketDataset};
    use crate::model::{rank_scores, ModelConfig};
    use crate::tensor::grad_check;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d: 8,
            seq_len: 4,
            n_heads: 2,
            n_layers: 1,
            f_max: 3,
            init_seed: 3,
            ..ModelConfig::default()
        }
    }

    fn small_dataset() -> BasketDataset {
        BasketDataset::from_histories(
            12,
            vec![
                vec![vec![0, 1], vec![2], vec![0, 3], vec![0, 5, 6], vec![1, 2]],
                vec![vec![4], vec![4, 7], vec![8]],
                vec![vec![9, 10, 11], vec![9], vec![9, 1], vec![3]],
            ],
        )
        .unwrap()
    }

    fn batch_for(model: &Saferec, ds: &BasketDataset) -> EncodedBatch {
        let users: Vec<usize> = (0..ds.n_users()).collect();
        encode_batch(ds, &users, model.config.seq_len, model.config.f_max, true).unwrap()
    }

    fn set(model: &mut Saferec, name: &str, f: impl Fn(usize) -> f64) {
        let p = model.params_mut().get_mut(name).unwrap();
        for (i, x) in p.value.data_mut().iter_mut().enumerate() {
            *x = f(i);
        }
    }

    #[test]
    fn pad_rows_share_the_image_of_zero() {
        let model = Saferec::new(small_config(), 12).unwrap();
        let ds = small_dataset();
        let batch = batch_for(&model, &ds);
        let mut fp = ForwardPass::new(&model);
        let w = fp.encode_history(&batch).unwrap();
        let t = fp.tape.value(w).clone();
        let ds_pad = BasketDataset::from_histories(12, vec![vec![vec![0], vec![1]]]).unwrap();
        let pb = encode_batch(&ds_pad, &[0], 4, 3, true).unwrap();
        let mut fp2 = ForwardPass::new(&model);
        let w2 = fp2.encode_history(&pb).unwrap();
        let t2 = fp2.tape.value(w2);
        // one input basket: positions 0..3 are padding
        let d = 8;
        for pos in 1..3 {
            assert_eq!(&t2.data()[..d], &t2.data()[pos * d..(pos + 1) * d]);
        }
        // user 1 of small_dataset is padded at positions 0 and 1
        assert_eq!(&t.data()[4 * d..5 * d], &t2.data()[..d]);
    }

    #[test]
    fn singleton_basket_selects_a_weight_row() {
        let cfg = ModelConfig {
            enc_fc_depth: 1,
            ..small_config()
        };
        let mut model = Saferec::new(cfg, 12).unwrap();
        set(&mut model, "enc.0.b", |_| 0.0);
        let ds = BasketDataset::from_histories(12, vec![vec![vec![5], vec![0]]]).unwrap();
        let batch = encode_batch(&ds, &[0], 4, 3, true).unwrap();
        let mut fp = ForwardPass::new(&model);
        let w = fp.encode_history(&batch).unwrap();
        let out = &fp.tape.value(w).data()[3 * 8..4 * 8];
        let row = &model.params().get("enc.0.w").unwrap().value.data()[5 * 8..6 * 8];
        let expected: Vec<f64> = row.iter().map(|x| x.tanh()).collect();
        assert_eq!(out, &expected[..]);
    }

    #[test]
    fn sparse_encoder_matches_dense_matmul() {
        let model = Saferec::new(small_config(), 12).unwrap();
        let ds = small_dataset();
        let batch = batch_for(&model, &ds);
        let mut fp = ForwardPass::new(&model);
        let sparse = fp.encode_history(&batch).unwrap();
        let sparse = fp.tape.value(sparse).clone();

        let mut dense = Vec::new();
        for r in 0..batch.batch_size() {
            dense.extend(batch.history_multihot(r));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3 * 4, 12], dense).unwrap());
        let mut h = x;
        for k in 0..2 {
            let w = tape.constant(model.params().get(&format!("enc.{k}.w")).unwrap().value.clone());
            let b = tape.constant(model.params().get(&format!("enc.{k}.b")).unwrap().value.clone());
            h = tape.matmul(h, w, false).unwrap();
            h = tape.add_bias(h, b).unwrap();
            h = tape.tanh(h);
        }
        let diff = tape
            .value(h)
            .data()
            .iter()
            .zip(sparse.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn empty_stack_adds_positions_only() {
        let cfg = ModelConfig {
            n_layers: 0,
            ..small_config()
        };
        let model = Saferec::new(cfg, 12).unwrap();
        let batch = batch_for(&model, &small_dataset());
        let mut fp = ForwardPass::new(&model);
        let w = fp.encode_history(&batch).unwrap();
        let tr = fp.transformer_forward(w, batch.pad_mask()).unwrap();
        let pos = model.params().get("pos").unwrap().value.data();
        let (wv, tv) = (fp.tape.value(w).data(), fp.tape.value(tr).data());
        for (j, (a, b)) in wv.iter().zip(tv).enumerate() {
            assert_eq!(*b, a + pos[j % 32]);
        }
    }

    #[test]
    fn single_real_basket_attends_to_itself() {
        let model = Saferec::new(small_config(), 12).unwrap();
        let ds = BasketDataset::from_histories(12, vec![vec![vec![3], vec![1]]]).unwrap();
        let batch = encode_batch(&ds, &[0], 4, 3, true).unwrap();
        let mut fp = ForwardPass::new(&model);
        fp.total_score(&batch).unwrap();
        let att = fp.tape.value(fp.attention[0]).data().to_vec();
        for head in 0..2 {
            let last_row = &att[head * 16 + 12..head * 16 + 16];
            assert_eq!(last_row, &[0.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn attention_mask_rows_are_never_empty() {
        let pad = [true, true, false, false, false, false, false, false];
        let m = attention_mask(&pad, 2, 1, 4);
        for row in m.chunks(4) {
            assert!(row.iter().any(|&x| !x));
        }
        assert_eq!(&m[12..16], &[true, true, false, false]);
        assert_eq!(&m[0..4], &[false, true, true, true]);
    }

    #[test]
    fn basket_order_matters() {
        let model = Saferec::new(small_config(), 12).unwrap();
        let a = BasketDataset::from_histories(12, vec![vec![vec![1], vec![2, 3], vec![4], vec![0]]]).unwrap();
        let b = BasketDataset::from_histories(12, vec![vec![vec![2, 3], vec![1], vec![4], vec![0]]]).unwrap();
        let sa = model.score(&encode_batch(&a, &[0], 4, 3, true).unwrap()).unwrap();
        let sb = model.score(&encode_batch(&b, &[0], 4, 3, true).unwrap()).unwrap();
        assert_ne!(sa.p_uu, sb.p_uu);
    }

    #[test]
    fn identity_user_layer_is_tanh_of_last_position() {
        let mut model = Saferec::new(small_config(), 12).unwrap();
        set(&mut model, "user.0.w", |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        set(&mut model, "user.0.b", |_| 0.0);
        let batch = batch_for(&model, &small_dataset());
        let mut fp = ForwardPass::new(&model);
        let w = fp.encode_history(&batch).unwrap();
        let tr = fp.transformer_forward(w, batch.pad_mask()).unwrap();
        let u = fp.user_representation(tr).unwrap();
        let trv = fp.tape.value(tr).data();
        for r in 0..3 {
            let last = &trv[(r * 4 + 3) * 8..(r * 4 + 4) * 8];
            let expected: Vec<f64> = last.iter().map(|x| x.tanh()).collect();
            assert_eq!(fp.tape.value(u).row(r), &expected[..]);
        }
    }

    #[test]
    fn identical_histories_identical_scores() {
        let model = Saferec::new(small_config(), 12).unwrap();
        let h = vec![vec![1, 2], vec![3], vec![4]];
        let ds = BasketDataset::from_histories(12, vec![h.clone(), h]).unwrap();
        let out = model.score(&encode_batch(&ds, &[0, 1], 4, 3, true).unwrap()).unwrap();
        assert_eq!(out.scores.row(0), out.scores.row(1));
    }

    #[test]
    fn user_score_matches_loop_oracle_and_zero_vector() {
        let model = Saferec::new(small_config(), 12).unwrap();
        let mut fp = ForwardPass::new(&model);
        let uvals: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let u = fp.tape.constant(Tensor::new(vec![2, 8], uvals.clone()).unwrap());
        let s = fp.user_score(u).unwrap();
        let i1 = model.params().get("i1").unwrap().value.data();
        for r in 0..2 {
            for i in 0..12 {
                let dot: f64 = (0..8).map(|j| uvals[r * 8 + j] * i1[i * 8 + j]).sum();
                assert!((fp.tape.value(s).row(r)[i] - dot).abs() < 1e-12);
            }
        }
        let z = fp.tape.constant(Tensor::zeros(&[1, 8]));
        let s0 = fp.user_score(z).unwrap();
        assert!(fp.tape.value(s0).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn aligned_item_embedding_wins_argmax() {
        let mut model = Saferec::new(small_config(), 12).unwrap();
        let u: Vec<f64> = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        // row 7 = u/|u|^2, every other row orthogonal to u
        set(&mut model, "i1", |i| {
            let (row, col) = (i / 8, i % 8);
            if row == 7 {
                u[col]
            } else if col == 0 {
                0.0
            } else {
                (i as f64).cos()
            }
        });
        let mut fp = ForwardPass::new(&model);
        let uv = fp.tape.constant(Tensor::new(vec![1, 8], u).unwrap());
        let s = fp.user_score(uv).unwrap();
        assert_eq!(rank_scores(fp.tape.value(s).data())[0], 7);
    }

    /// Per-item evaluation of the frequency scorer straight from the stored
    /// parameters.
    fn freq_oracle(model: &Saferec, batch: &EncodedBatch, row: usize, item: usize) -> f64 {
        let cfg = &model.config;
        let p = |n: &str| model.params().get(n).unwrap().value.clone();
        let f = batch.item_frequency(row, item as u32);
        let h = batch.item_history(row, item as u32);
        let (i2, fe) = (p("i2"), p("fe"));
        let mut x: Vec<f64> = (0..cfg.d)
            .map(|j| i2.data()[item * cfg.d + j] + fe.data()[f * cfg.d + j])
            .collect();
        x.extend(h);
        for k in 0..cfg.freq_fc_depth {
            let w = p(&format!("freq.{k}.w"));
            let b = p(&format!("freq.{k}.b"));
            let out = w.shape()[1];
            let mut y: Vec<f64> = (0..out)
                .map(|o| {
                    b.data()[o]
                        + x.iter()
                            .enumerate()
                            .map(|(i, xi)| xi * w.data()[i * out + o])
                            .sum::<f64>()
                })
                .collect();
            if k + 1 < cfg.freq_fc_depth {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            x = y;
        }
        x[0]
    }

    #[test]
    fn batched_frequency_score_matches_per_item_loop() {
        for depth in [1, 2, 3] {
            let cfg = ModelConfig {
                freq_fc_depth: depth,
                ..small_config()
            };
            let model = Saferec::new(cfg, 12).unwrap();
            let batch = batch_for(&model, &small_dataset());
            let mut fp = ForwardPass::new(&model);
            let p = fp.frequency_score(&batch).unwrap();
            let pv = fp.tape.value(p);
            for r in 0..3 {
                for i in 0..12 {
                    let o = freq_oracle(&model, &batch, r, i);
                    assert!((pv.row(r)[i] - o).abs() < 1e-12, "depth {depth} r {r} i {i}");
                }
            }
        }
    }

    #[test]
    fn never_bought_items_with_equal_rows_score_equal() {
        let mut model = Saferec::new(small_config(), 12).unwrap();
        let i2 = model.params().get("i2").unwrap().value.clone();
        set(&mut model, "i2", |i| {
            if i / 8 == 11 {
                i2.data()[10 * 8 + i % 8]
            } else {
                i2.data()[i]
            }
        });
        let batch = batch_for(&model, &small_dataset());
        let out = model.score(&batch).unwrap();
        // user 1 bought neither 10 nor 11
        assert_eq!(out.p_ui.row(1)[10], out.p_ui.row(1)[11]);
    }

    #[test]
    fn baskets_outside_the_window_do_not_matter() {
        let model = Saferec::new(small_config(), 12).unwrap();
        let tail = vec![vec![1], vec![2], vec![3], vec![4], vec![5]];
        let mut a = vec![vec![7]];
        a.extend(tail.clone());
        let mut b = vec![vec![9, 10]];
        b.extend(tail);
        let ds = BasketDataset::from_histories(12, vec![a, b]).unwrap();
        let out = model.score(&encode_batch(&ds, &[0, 1], 4, 3, true).unwrap()).unwrap();
        assert_eq!(out.scores.row(0), out.scores.row(1));
    }

    #[test]
    fn ablation_zeroes_p_ui_and_ignores_frequency_parameters() {
        let cfg = ModelConfig {
            freq_module_enabled: false,
            ..small_config()
        };
        let mut model = Saferec::new(cfg, 12).unwrap();
        let batch = batch_for(&model, &small_dataset());
        let before = model.score(&batch).unwrap();
        assert!(before.p_ui.data().iter().all(|&x| x == 0.0));
        for name in ["i2", "fe", "freq.0.w", "freq.1.b"] {
            set(&mut model, name, |i| i as f64 * 0.5 - 3.0);
        }
        assert_eq!(model.score(&batch).unwrap(), before);
    }

    #[test]
    fn total_is_sum_of_components() {
        let model = Saferec::new(small_config(), 12).unwrap();
        let out = model.score(&batch_for(&model, &small_dataset())).unwrap();
        for ((s, a), b) in out.scores.data().iter().zip(out.p_uu.data()).zip(out.p_ui.data()) {
            assert_eq!(*s, a + b);
        }
    }

    /// Direct evaluation of a d=2, L=2, |V|=3 model without a transformer.
    #[test]
    fn tiny_instance_matches_hand_evaluation() {
        let cfg = ModelConfig {
            d: 2,
            seq_len: 2,
            n_heads: 1,
            n_layers: 0,
            f_max: 2,
            enc_fc_depth: 1,
            user_fc_depth: 1,
            freq_fc_depth: 2,
            ..ModelConfig::default()
        };
        let mut model = Saferec::new(cfg, 3).unwrap();
        let vals = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|i| ((i as f64 + 1.0) * s).sin() * 0.5).collect() };
        for (name, n, s) in [
            ("enc.0.w", 6, 0.7),
            ("enc.0.b", 2, 1.3),
            ("pos", 4, 0.9),
            ("user.0.w", 4, 1.1),
            ("user.0.b", 2, 0.4),
            ("i1", 6, 0.8),
            ("i2", 6, 1.7),
            ("fe", 6, 0.3),
            ("freq.0.w", 8, 0.6),
            ("freq.0.b", 2, 2.1),
            ("freq.1.w", 2, 1.9),
            ("freq.1.b", 1, 0.2),
        ] {
            let v = vals(n, s);
            set(&mut model, name, |i| v[i]);
        }
        // history: {0} then {0, 2}; target ignored
        let ds = BasketDataset::from_histories(3, vec![vec![vec![0], vec![0, 2], vec![1]]]).unwrap();
        let batch = encode_batch(&ds, &[0], 2, 2, true).unwrap();
        let out = model.score(&batch).unwrap();

        let enc_w = vals(6, 0.7);
        let enc_b = vals(2, 1.3);
        let pos = vals(4, 0.9);
        // last position: basket {0, 2}
        let lat: Vec<f64> = (0..2).map(|j| (enc_w[j] + enc_w[4 + j] + enc_b[j]).tanh()).collect();
        let last: Vec<f64> = (0..2).map(|j| lat[j] + pos[2 + j]).collect();
        let uw = vals(4, 1.1);
        let ub = vals(2, 0.4);
        let u: Vec<f64> = (0..2)
            .map(|o| (last[0] * uw[o] + last[1] * uw[2 + o] + ub[o]).tanh())
            .collect();
        let i1 = vals(6, 0.8);
        let (i2, fe) = (vals(6, 1.7), vals(6, 0.3));
        let (w0, b0, w1, b1) = (vals(8, 0.6), vals(2, 2.1), vals(2, 1.9), vals(1, 0.2));
        let h = [[1.0, 1.0], [0.0, 0.0], [0.0, 1.0]];
        let f = [2usize, 0, 1];
        for i in 0..3 {
            let p_uu = u[0] * i1[i * 2] + u[1] * i1[i * 2 + 1];
            let c = [
                i2[i * 2] + fe[f[i] * 2],
                i2[i * 2 + 1] + fe[f[i] * 2 + 1],
                h[i][0],
                h[i][1],
            ];
            let hid: Vec<f64> = (0..2)
                .map(|o| (b0[o] + (0..4).map(|k| c[k] * w0[k * 2 + o]).sum::<f64>()).tanh())
                .collect();
            let p_ui = b1[0] + hid[0] * w1[0] + hid[1] * w1[1];
            assert!((out.p_uu.data()[i] - p_uu).abs() < 1e-12);
            assert!((out.p_ui.data()[i] - p_ui).abs() < 1e-12);
            assert!((out.scores.data()[i] - p_uu - p_ui).abs() < 1e-12);
        }
    }

    fn loss_with_scores(scores: Vec<f64>, v: usize, targets: &[Basket]) -> f64 {
        let model = Saferec::new(small_config(), v).unwrap();
        let mut fp = ForwardPass::new(&model);
        let b = targets.len();
        let s = fp.tape.constant(Tensor::new(vec![b, v], scores).unwrap());
        let l = fp.loss(s, targets).unwrap();
        fp.tape.value(l).item()
    }

    #[test]
    fn loss_of_uniform_scores() {
        let v = 12;
        assert!((loss_with_scores(vec![0.3; v], v, &[vec![4]]) - (v as f64).ln()).abs() < 1e-12);
        let l = loss_with_scores(vec![0.3; 2 * v], v, &[vec![1, 2, 3], vec![1, 2, 3]]);
        assert!((l - 3.0 * (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_log_sum_exp() {
        let v = 12;
        let scores: Vec<f64> = (0..2 * v).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.8).collect();
        let targets = vec![vec![0, 5], vec![11]];
        let mut expected = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = &scores[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            expected += t.iter().map(|&i| lse - row[i as usize]).sum::<f64>();
        }
        expected /= 2.0;
        assert!((loss_with_scores(scores, v, &targets) - expected).abs() < 1e-10);
    }

    #[test]
    fn loss_rejects_non_finite_and_empty_targets() {
        let model = Saferec::new(small_config(), 3).unwrap();
        let mut fp = ForwardPass::new(&model);
        let s = fp
            .tape
            .constant(Tensor::new(vec![1, 3], vec![0.0, f64::NAN, 1.0]).unwrap());
        assert!(matches!(fp.loss(s, &[vec![0]]), Err(ModelError::NonFinite(_))));
        let s = fp.tape.constant(Tensor::zeros(&[1, 3]));
        assert!(fp.loss(s, &[vec![]]).is_err());
    }

    fn loss_at(model: &Saferec, batch: &EncodedBatch, flat: &[f64]) -> f64 {
        let mut m = model.clone();
        m.params_mut().set_flat_values(flat).unwrap();
        let mut fp = ForwardPass::new(&m);
        let s = fp.total_score(batch).unwrap();
        let l = fp.loss(s.scores, batch.targets()).unwrap();
        fp.tape.value(l).item()
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut model = Saferec::new(small_config(), 12).unwrap();
        let batch = batch_for(&model, &small_dataset());
        model.compute_gradients(&batch, None).unwrap();
        let theta = model.params().flat_values();
        let analytic = model.params().flat_grads();
        // every group receives gradient
        for p in model.params().iter() {
            assert!(p.grad.data().iter().any(|&g| g != 0.0), "{} has no gradient", p.name);
        }
        let report = grad_check(&theta, &analytic, 1e-3, |t| loss_at(&model, &batch, t)).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn frequency_scorer_gradient_alone() {
        let model = Saferec::new(small_config(), 12).unwrap();
        let batch = batch_for(&model, &small_dataset());
        let names = ["i2", "fe", "freq.0.w", "freq.0.b", "freq.1.w", "freq.1.b"];
        let eval = |flat: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut m = model.clone();
            let mut off = 0;
            for n in names {
                let p = m.params_mut().get_mut(n).unwrap();
                let len = p.value.numel();
                p.value.data_mut().copy_from_slice(&flat[off..off + len]);
                off += len;
            }
            let mut fp = ForwardPass::new(&m);
            let p = fp.frequency_score(&batch).unwrap();
            let l = fp.loss(p, batch.targets()).unwrap();
            let value = fp.tape.value(l).item();
            let mut g = Vec::new();
            if want_grad {
                let grads = fp.param_gradients(l).unwrap();
                for n in names {
                    let id = m.params().id(n).unwrap();
                    g.extend_from_slice(grads.iter().find(|(i, _)| *i == id).unwrap().1.data());
                }
            }
            (value, g)
        };
        let theta: Vec<f64> = names
            .iter()
            .flat_map(|n| model.params().get(n).unwrap().value.data().to_vec())
            .collect();
        let (_, analytic) = eval(&theta, true);
        let report = grad_check(&theta, &analytic, 1e-3, |t| eval(t, false).0).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn batch_shape_mismatch_is_an_error() {
        let model = Saferec::new(small_config(), 12).unwrap();
        let ds = small_dataset();
        let batch = encode_batch(&ds, &[0], 5, 3, true).unwrap();
        assert!(matches!(model.score(&batch), Err(ModelError::BatchMismatch(_))));
    }
}
