//! Weight containers, seeded synthesis, and the `DARTW1` binary format.
//!
//! File layout, all little-endian:
//!
//! ```text
//! "DARTW1"
//! u32 × 8   num_layers hidden_dim ffn_dim num_heads num_kv_groups head_dim vocab_size max_seq
//! f32[]     embedding (vocab × d)
//! per layer: W_Q per head (d × d_h), W_K per group, W_V per group,
//!            W_O (n_h·d_h × d), W_up (d × m), W_gate (d × m), W_down (m × d)
//! f32[]     unembedding (d × vocab)
//! ```

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ModelConfig, ModelError};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 6] = b"DARTW1";

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    pub w_o: Matrix,
    pub w_up: Matrix,
    pub w_gate: Matrix,
    pub w_down: Matrix,
}

impl LayerWeights {
    fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.w_q.iter().chain(&self.w_k).chain(&self.w_v).chain([
            &self.w_o,
            &self.w_up,
            &self.w_gate,
            &self.w_down,
        ])
    }

    fn check(&self, c: &ModelConfig, layer: usize) -> Result<(), ModelError> {
        let (d, m, dh) = (c.hidden_dim, c.ffn_dim, c.head_dim);
        let bad = |what: &str| ModelError::Shape(format!("layer {layer}: {what}"));
        if self.w_q.len() != c.num_heads || self.w_q.iter().any(|w| dims(w) != (d, dh)) {
            return Err(bad("W_Q"));
        }
        for (name, ws) in [("W_K", &self.w_k), ("W_V", &self.w_v)] {
            if ws.len() != c.num_kv_groups || ws.iter().any(|w| dims(w) != (d, dh)) {
                return Err(bad(name));
            }
        }
        let expected = [
            ("W_O", &self.w_o, (c.num_heads * dh, d)),
            ("W_up", &self.w_up, (d, m)),
            ("W_gate", &self.w_gate, (d, m)),
            ("W_down", &self.w_down, (m, d)),
        ];
        for (name, w, shape) in expected {
            if dims(w) != shape {
                return Err(bad(name));
            }
        }
        Ok(())
    }
}

fn dims(m: &Matrix) -> (usize, usize) {
    (m.rows(), m.cols())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub unembed: Matrix,
}

impl ModelWeights {
    pub fn new(
        config: ModelConfig,
        embed: Matrix,
        layers: Vec<LayerWeights>,
        unembed: Matrix,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if dims(&embed) != (config.vocab_size, config.hidden_dim) {
            return Err(ModelError::Shape("embedding".into()));
        }
        if dims(&unembed) != (config.hidden_dim, config.vocab_size) {
            return Err(ModelError::Shape("unembedding".into()));
        }
        if layers.len() != config.num_layers {
            return Err(ModelError::Shape(format!(
                "{} layers for a {}-layer config",
                layers.len(),
                config.num_layers
            )));
        }
        for (l, lw) in layers.iter().enumerate() {
            lw.check(&config, l)?;
        }
        Ok(Self {
            config,
            embed,
            layers,
            unembed,
        })
    }

    /// Reproducible N(0, 1/d) weights from `seed`.
    pub fn synth(seed: u64, config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (config.hidden_dim as f64).sqrt();
        let mut gen = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32
            })
        };
        let (d, m, dh) = (config.hidden_dim, config.ffn_dim, config.head_dim);
        let embed = gen(config.vocab_size, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                w_q: (0..config.num_heads).map(|_| gen(d, dh)).collect(),
                w_k: (0..config.num_kv_groups).map(|_| gen(d, dh)).collect(),
                w_v: (0..config.num_kv_groups).map(|_| gen(d, dh)).collect(),
                w_o: gen(config.num_heads * dh, d),
                w_up: gen(d, m),
                w_gate: gen(d, m),
                w_down: gen(m, d),
            })
            .collect();
        let unembed = gen(d, config.vocab_size);
        Self::new(config, embed, layers, unembed)
    }

    /// Exact size in bytes of the serialized file.
    pub fn file_size(config: &ModelConfig) -> usize {
        MAGIC.len() + 8 * 4 + 4 * config.total_params()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ModelError> {
        w.write_all(MAGIC)?;
        for v in self.config.as_u32_fields() {
            let v = u32::try_from(v)
                .map_err(|_| ModelError::InvalidConfig(format!("dimension {v} exceeds u32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        let all = std::iter::once(&self.embed)
            .chain(self.layers.iter().flat_map(|l| l.matrices()))
            .chain(std::iter::once(&self.unembed));
        for m in all {
            let mut buf = Vec::with_capacity(m.data().len() * 4);
            for v in m.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::file_size(&self.config));
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ModelError> {
        let mut magic = [0u8; 6];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::BadMagic);
        }
        let mut fields = [0usize; 8];
        for f in fields.iter_mut() {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b)?;
            *f = u32::from_le_bytes(b) as usize;
        }
        let config = ModelConfig::from_u32_fields(fields);
        config.validate()?;
        let mut read = |rows: usize, cols: usize| -> Result<Matrix, ModelError> {
            let mut buf = vec![0u8; rows * cols * 4];
            read_exact(&mut r, &mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Matrix::new(rows, cols, data)?)
        };
        let (d, m, dh) = (config.hidden_dim, config.ffn_dim, config.head_dim);
        let embed = read(config.vocab_size, d)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let w_q = (0..config.num_heads)
                .map(|_| read(d, dh))
                .collect::<Result<_, _>>()?;
            let w_k = (0..config.num_kv_groups)
                .map(|_| read(d, dh))
                .collect::<Result<_, _>>()?;
            let w_v = (0..config.num_kv_groups)
                .map(|_| read(d, dh))
                .collect::<Result<_, _>>()?;
            layers.push(LayerWeights {
                w_q,
                w_k,
                w_v,
                w_o: read(config.num_heads * dh, d)?,
                w_up: read(d, m)?,
                w_gate: read(d, m)?,
                w_down: read(m, d)?,
            });
        }
        let unembed = read(d, config.vocab_size)?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(ModelError::TrailingBytes);
        }
        Self::new(config, embed, layers, unembed)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ModelError::Truncated,
        _ => ModelError::Io(e.to_string()),
    })
}
