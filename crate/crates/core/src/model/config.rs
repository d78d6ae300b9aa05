use super::{ModelError, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    /// Number of retained baskets `L`.
    pub seq_len: usize,
    pub n_heads: usize,
    /// Transformer depth; 0 skips the stack (and its final norm).
    pub n_layers: usize,
    pub f_max: usize,
    pub enc_fc_depth: usize,
    pub user_fc_depth: usize,
    /// Layers in the frequency scorer including the final `d -> 1`.
    pub freq_fc_depth: usize,
    pub dropout: f64,
    pub freq_module_enabled: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            seq_len: 32,
            n_heads: 2,
            n_layers: 2,
            f_max: 10,
            enc_fc_depth: 2,
            user_fc_depth: 1,
            freq_fc_depth: 2,
            dropout: 0.0,
            freq_module_enabled: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    fn preset(n_heads: usize, n_layers: usize, d: usize, f_max: usize, seq_len: usize) -> Self {
        Self {
            d,
            seq_len,
            n_heads,
            n_layers,
            f_max,
            ..Self::default()
        }
    }

    pub fn tafeng() -> Self {
        Self::preset(2, 4, 64, 47, 256)
    }

    pub fn dunnhumby() -> Self {
        Self::preset(4, 4, 64, 36, 32)
    }

    pub fn taobao() -> Self {
        Self::preset(4, 2, 128, 5, 128)
    }

    pub fn named_preset(name: &str) -> Option<Self> {
        match name {
            "tafeng" => Some(Self::tafeng()),
            "dunnhumby" => Some(Self::dunnhumby()),
            "taobao" => Some(Self::taobao()),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.seq_len == 0 || self.f_max == 0 || self.n_heads == 0 {
            return bad("d, seq_len, f_max and n_heads must be >= 1".into());
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return bad(format!("d={} is not divisible by n_heads={}", self.d, self.n_heads));
        }
        if self.enc_fc_depth == 0 || self.user_fc_depth == 0 || self.freq_fc_depth == 0 {
            return bad("FC depths must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_text(&self) -> String {
        format!(
            "d={}\nseq_len={}\nn_heads={}\nn_layers={}\nf_max={}\nenc_fc_depth={}\nuser_fc_depth={}\nfreq_fc_depth={}\ndropout={:?}\nfreq_module_enabled={}\ninit_seed={}\n",
            self.d,
            self.seq_len,
            self.n_heads,
            self.n_layers,
            self.f_max,
            self.enc_fc_depth,
            self.user_fc_depth,
            self.freq_fc_depth,
            self.dropout,
            self.freq_module_enabled,
            self.init_seed
        )
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let err = || ModelError::Config(format!("invalid value `{value}` for model.{key}"));
        let int = || value.parse::<usize>().map_err(|_| err());
        match key {
            "d" => self.d = int()?,
            "seq_len" | "L" => self.seq_len = int()?,
            "n_heads" => self.n_heads = int()?,
            "n_layers" => self.n_layers = int()?,
            "f_max" | "F_max" => self.f_max = int()?,
            "enc_fc_depth" => self.enc_fc_depth = int()?,
            "user_fc_depth" => self.user_fc_depth = int()?,
            "freq_fc_depth" => self.freq_fc_depth = int()?,
            "dropout" => self.dropout = value.parse().map_err(|_| err())?,
            "freq_module_enabled" => self.freq_module_enabled = value.parse().map_err(|_| err())?,
            "init_seed" => self.init_seed = value.parse().map_err(|_| err())?,
            _ => return Err(ModelError::Config(format!("unknown key model.{key}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("malformed line `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}
