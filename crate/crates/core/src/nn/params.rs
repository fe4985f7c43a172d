//! Flat parameter storage with a stable name/shape table.

use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, PosEncoding};
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockOffsets {
    pub ln1_w: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_w: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Ordered parameter table derived from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct Layout {
    specs: Vec<ParamSpec>,
    total: usize,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: Option<usize>,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) lnf_w: usize,
    pub(crate) lnf_b: usize,
    pub(crate) head_w: usize,
    pub(crate) head_b: usize,
}

struct Builder {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: &[usize]) -> usize {
        let offset = self.total;
        let spec = ParamSpec {
            name,
            shape: shape.to_vec(),
            offset,
        };
        self.total += spec.len();
        self.specs.push(spec);
        offset
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let mut b = Builder {
            specs: Vec::new(),
            total: 0,
        };
        let tok_emb = b.push("tok_emb".into(), &[v, d]);
        let pos_emb = match cfg.pos_encoding {
            PosEncoding::LearnedAbsolute => Some(b.push("pos_emb".into(), &[cfg.max_seq_len, d])),
            PosEncoding::Rotary => None,
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(BlockOffsets {
                ln1_w: b.push(p("ln1.weight"), &[d]),
                ln1_b: b.push(p("ln1.bias"), &[d]),
                wq: b.push(p("attn.q.weight"), &[d, d]),
                bq: b.push(p("attn.q.bias"), &[d]),
                wk: b.push(p("attn.k.weight"), &[d, d]),
                bk: b.push(p("attn.k.bias"), &[d]),
                wv: b.push(p("attn.v.weight"), &[d, d]),
                bv: b.push(p("attn.v.bias"), &[d]),
                wo: b.push(p("attn.o.weight"), &[d, d]),
                bo: b.push(p("attn.o.bias"), &[d]),
                ln2_w: b.push(p("ln2.weight"), &[d]),
                ln2_b: b.push(p("ln2.bias"), &[d]),
                w1: b.push(p("mlp.fc.weight"), &[d, f]),
                b1: b.push(p("mlp.fc.bias"), &[f]),
                w2: b.push(p("mlp.proj.weight"), &[f, d]),
                b2: b.push(p("mlp.proj.bias"), &[d]),
            });
        }
        let lnf_w = b.push("ln_f.weight".into(), &[d]);
        let lnf_b = b.push("ln_f.bias".into(), &[d]);
        let head_w = b.push("lm_head.weight".into(), &[d, v]);
        let head_b = b.push("lm_head.bias".into(), &[v]);
        Layout {
            specs: b.specs,
            total: b.total,
            tok_emb,
            pos_emb,
            blocks,
            lnf_w,
            lnf_b,
            head_w,
            head_b,
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Name of the tensor owning flat index `idx`.
    pub fn name_of(&self, idx: usize) -> &str {
        self.specs
            .iter()
            .find(|s| s.range().contains(&idx))
            .map(|s| s.name.as_str())
            .unwrap_or("<out of range>")
    }
}

/// Parameters, Adam moments and step counter of one model.
#[derive(Clone, Debug)]
pub struct ModelState<T: Scalar> {
    pub config: ModelConfig,
    pub params: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    layout: Layout,
}

impl<T: Scalar> PartialEq for ModelState<T> {
    /// Bitwise equality of every stored value.
    fn eq(&self, other: &Self) -> bool {
        fn bits<T: Scalar>(a: &[T], b: &[T]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.f64().to_bits() == y.f64().to_bits())
        }
        self.config == other.config
            && self.step == other.step
            && bits(&self.params, &other.params)
            && bits(&self.m, &other.m)
            && bits(&self.v, &other.v)
    }
}

impl<T: Scalar> ModelState<T> {
    /// Deterministic initialization: Gaussian weights, zero biases, unit norm
    /// gains, zero optimizer moments.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "config dtype {:?} does not match state element type {:?}",
                config.dtype,
                T::DTYPE
            )));
        }
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total()];
        let std = config.init_std;
        // Residual-branch output projections are shrunk with depth.
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        for (i, spec) in layout.specs().iter().enumerate() {
            let name = spec.name.as_str();
            let slot = &mut params[spec.range()];
            if name.ends_with(".bias") {
                continue;
            }
            if name.starts_with("ln") || name.contains(".ln") {
                slot.iter_mut().for_each(|p| *p = T::one());
                continue;
            }
            let sd = if name.ends_with("attn.o.weight") || name.ends_with("mlp.proj.weight") {
                resid_std
            } else {
                std
            };
            if sd == 0.0 {
                continue;
            }
            let normal = Normal::new(0.0, sd).expect("finite std");
            let mut rng = seed::stream(seed, "init", &[i as u64]);
            for p in slot.iter_mut() {
                *p = T::of(normal.sample(&mut rng));
            }
        }
        let n = params.len();
        Ok(ModelState {
            config,
            params,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
            layout,
        })
    }

    /// Assemble a state from raw arrays (checkpoint loading).
    pub fn from_parts(config: ModelConfig, params: Vec<T>, m: Vec<T>, v: Vec<T>, step: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        for (what, len) in [("params", params.len()), ("m", m.len()), ("v", v.len())] {
            if len != layout.total() {
                return Err(Error::Shape(format!(
                    "{what} has {len} entries, config requires {}",
                    layout.total()
                )));
            }
        }
        Ok(ModelState {
            config,
            params,
            m,
            v,
            step,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.layout.spec(name).map(|s| &self.params[s.range()])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.layout.spec(name)?.range();
        Some(&mut self.params[range])
    }

    /// Same parameters with zeroed optimizer moments and step counter.
    pub fn with_fresh_optimizer(mut self) -> Self {
        self.m.iter_mut().for_each(|x| *x = T::zero());
        self.v.iter_mut().for_each(|x| *x = T::zero());
        self.step = 0;
        self
    }
}
