use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{Aggregator, FormulaKind, Structure};
use crate::error::{Error, Result};
use crate::nn::{DecoderLayer, EncoderLayer, LayerNorm};

/// Which stacks get an aggregator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Encoder,
    Decoder,
    Both,
}

impl Position {
    pub const ALL: [Position; 3] = [Position::Encoder, Position::Decoder, Position::Both];

    pub fn encoder(self) -> bool {
        matches!(self, Position::Encoder | Position::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, Position::Decoder | Position::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Position::Encoder => "encoder",
            Position::Decoder => "decoder",
            Position::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationSpec {
    pub structure: Structure,
    #[serde(default = "default_formula")]
    pub formula: FormulaKind,
    #[serde(default = "default_position")]
    pub position: Position,
}

fn default_formula() -> FormulaKind {
    FormulaKind::EwpFfn
}

fn default_position() -> Position {
    Position::Both
}

impl AggregationSpec {
    pub fn none() -> Self {
        AggregationSpec {
            structure: Structure::None,
            formula: default_formula(),
            position: default_position(),
        }
    }

    pub fn new(structure: Structure, formula: FormulaKind, position: Position) -> Self {
        AggregationSpec {
            structure,
            formula,
            position,
        }
    }

    pub fn encoder_active(&self) -> bool {
        self.structure != Structure::None && self.position.encoder()
    }

    pub fn decoder_active(&self) -> bool {
        self.structure != Structure::None && self.position.decoder()
    }
}

impl Default for AggregationSpec {
    fn default() -> Self {
        Self::none()
    }
}

/// Architecture hyperparameters. Encoder and decoder share `num_layers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    /// Shared source/target vocabulary, including the special tokens.
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    #[serde(default)]
    pub aggregation: AggregationSpec,
    /// Hidden width of aggregation FFNs; `d_model` when absent.
    #[serde(default)]
    pub agg_inner_dim: Option<usize>,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    /// 6 layers, d = 512, 8 heads, d_ff = 2048, shared vocabulary of 37000.
    pub fn base() -> Self {
        ModelConfig {
            num_layers: 6,
            d_model: 512,
            num_heads: 8,
            d_ff: 2048,
            vocab_size: 37000,
            max_len: 256,
            dropout: 0.1,
            aggregation: AggregationSpec::none(),
            agg_inner_dim: None,
            ln_eps: default_ln_eps(),
            seed: 1,
        }
    }

    /// Base with width, heads and FFN doubled.
    pub fn big() -> Self {
        ModelConfig {
            d_model: 1024,
            num_heads: 16,
            d_ff: 4096,
            dropout: 0.3,
            ..Self::base()
        }
    }

    /// Desk-scale model for synthetic tasks.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 4,
            d_model: 64,
            num_heads: 4,
            d_ff: 256,
            vocab_size,
            max_len: 32,
            dropout: 0.0,
            aggregation: AggregationSpec::none(),
            agg_inner_dim: None,
            ln_eps: default_ln_eps(),
            seed: 1,
        }
    }

    pub fn with_aggregation(mut self, spec: AggregationSpec) -> Self {
        self.aggregation = spec;
        self
    }

    pub fn inner_dim(&self) -> usize {
        self.agg_inner_dim.unwrap_or(self.d_model)
    }

    /// Zero-based layer indices fed to the aggregator, or `None` when
    /// aggregation is off. Trees take the last `2^floor(log2 L)` layers;
    /// the other structures take every layer.
    pub fn aggregated_span(&self) -> Option<Range<usize>> {
        let l = self.num_layers;
        match self.aggregation.structure {
            Structure::None => None,
            s if s.is_tree() => {
                let width = if l == 0 { 0 } else { 1usize << l.ilog2() };
                Some(l - width..l)
            }
            _ => Some(0..l),
        }
    }

    /// One-based inclusive description, e.g. `layers 3..6`.
    pub fn span_label(&self) -> String {
        match self.aggregated_span() {
            Some(r) => format!("layers {}..{}", r.start + 1, r.end),
            None => "none (top layer only)".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.vocab_size <= super::NUM_SPECIAL {
            return Err(Error::config(
                "vocab_size",
                format!("must exceed the {} special tokens", super::NUM_SPECIAL),
            ));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::config(
                "num_heads",
                format!("d_model {} is not divisible by num_heads {}", self.d_model, self.num_heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps", "must be positive"));
        }
        if self.agg_inner_dim == Some(0) {
            return Err(Error::config("agg_inner_dim", "must be positive"));
        }
        if let Some(span) = self.aggregated_span() {
            if self.aggregation.structure.is_tree() && span.len() < 2 {
                return Err(Error::config(
                    "aggregation.structure",
                    format!(
                        "tree aggregation requires the number of layers to be 2^n with n >= 1; num_layers = {} leaves a span of {}",
                        self.num_layers,
                        span.len()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// First 8 bytes (little-endian) of the SHA-256 of the JSON encoding.
    pub fn digest(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let hash = Sha256::digest(&json);
        u64::from_le_bytes(hash[..8].try_into().expect("8 bytes"))
    }
}

/// Trainable scalar counts by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Shared source/target embedding, also the output projection.
    pub embedding: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub final_norms: usize,
    pub encoder_aggregation: usize,
    pub decoder_aggregation: usize,
    pub total: usize,
}

/// Closed-form parameter count; does not allocate the model.
pub fn count_params(config: &ModelConfig) -> ParamCount {
    let (l, d) = (config.num_layers, config.d_model);
    let agg = |active: bool| {
        if !active {
            return 0;
        }
        let span = config.aggregated_span().map_or(0, |r| r.len());
        Aggregator::num_params(
            config.aggregation.structure,
            span,
            config.aggregation.formula,
            d,
            config.inner_dim(),
        )
    };
    let mut c = ParamCount {
        embedding: config.vocab_size * d,
        encoder_layers: l * EncoderLayer::num_params(d, config.d_ff),
        decoder_layers: l * DecoderLayer::num_params(d, config.d_ff),
        final_norms: 2 * LayerNorm::num_params(d),
        encoder_aggregation: agg(config.aggregation.encoder_active()),
        decoder_aggregation: agg(config.aggregation.decoder_active()),
        total: 0,
    };
    c.total = c.embedding
        + c.encoder_layers
        + c.decoder_layers
        + c.final_norms
        + c.encoder_aggregation
        + c.decoder_aggregation;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans() {
        let mut c = ModelConfig::base().with_aggregation(AggregationSpec::new(
            Structure::Rtal,
            FormulaKind::Mean,
            Position::Both,
        ));
        assert_eq!(c.aggregated_span(), Some(2..6));
        assert_eq!(c.span_label(), "layers 3..6");
        c.num_layers = 3;
        assert_eq!(c.aggregated_span(), Some(1..3));
        c.num_layers = 8;
        assert_eq!(c.aggregated_span(), Some(0..8));
        c.num_layers = 1;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("2^n"), "{err}");
        c.aggregation.structure = Structure::IterativeCombination;
        c.validate().unwrap();
        c.num_layers = 6;
        assert_eq!(c.aggregated_span(), Some(0..6));
    }

    #[test]
    fn validation_names_fields() {
        let mut c = ModelConfig::toy(16);
        c.num_heads = 3;
        assert!(c.validate().unwrap_err().to_string().contains("num_heads"));
        let mut c = ModelConfig::toy(16);
        c.dropout = 1.0;
        assert!(c.validate().unwrap_err().to_string().contains("dropout"));
        let mut c = ModelConfig::toy(3);
        c.vocab_size = 3;
        assert!(c.validate().unwrap_err().to_string().contains("vocab_size"));
    }

    #[test]
    fn json_rejects_unknown_fields() {
        let mut v = serde_json::to_value(ModelConfig::toy(16)).unwrap();
        v["layers"] = 3.into();
        let err = serde_json::from_value::<ModelConfig>(v).unwrap_err().to_string();
        assert!(err.contains("layers"), "{err}");
    }

    #[test]
    fn base_and_big_counts() {
        let base = count_params(&ModelConfig::base()).total as f64;
        assert!((base / 65e6 - 1.0).abs() <= 0.05, "{base}");
        let big = count_params(&ModelConfig::big()).total as f64;
        assert!((big / 213e6 - 1.0).abs() <= 0.10, "{big}");
    }

    #[test]
    fn mean_rtal_adds_nothing() {
        let base = ModelConfig::base();
        let rtal = base
            .clone()
            .with_aggregation(AggregationSpec::new(Structure::Rtal, FormulaKind::Mean, Position::Both));
        assert_eq!(count_params(&base).total, count_params(&rtal).total);
    }

    #[test]
    fn position_only_touches_its_stack() {
        let base = count_params(&ModelConfig::base());
        for position in Position::ALL {
            let c = count_params(&ModelConfig::base().with_aggregation(AggregationSpec::new(
                Structure::Rtal,
                FormulaKind::EwpFfn,
                position,
            )));
            assert_eq!(c.encoder_layers, base.encoder_layers);
            assert_eq!(c.decoder_layers, base.decoder_layers);
            assert_eq!(c.encoder_aggregation > 0, position.encoder());
            assert_eq!(c.decoder_aggregation > 0, position.decoder());
        }
    }

    #[test]
    fn digest_tracks_content() {
        let a = ModelConfig::toy(16);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 2;
        assert_ne!(a.digest(), b.digest());
    }
}
