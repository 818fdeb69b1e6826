//! Named parameter storage, initialisation and the EMA target update.

use std::collections::BTreeMap;

use rand::Rng;

use super::config::ModelConfig;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::seed::{self, tag};
use crate::tensor::Tensor;

/// Parameters keyed by dotted name, iterated in name order.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Online, target and shared configuration of the whole model.
///
/// `target` holds the EMA copies. Its keys are a subset of `online`'s keys
/// (`enc.*`, `head.*` and, when CASA weights are not shared, `casa.*`) so
/// the EMA pairs parameters by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub online: ParamSet,
    pub target: ParamSet,
}

enum Init {
    Xavier,
    Normal(f64),
    Zeros,
    Ones,
}

struct Builder<'a, R: Rng> {
    rng: &'a mut R,
    set: ParamSet,
}

impl<R: Rng> Builder<'_, R> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        let t = match init {
            Init::Xavier => {
                let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::randn(shape, std, self.rng)
            }
            Init::Normal(std) => Tensor::randn(shape, std, self.rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
        };
        self.set.insert(name, t);
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.add(format!("{prefix}.w"), &[fan_in, fan_out], Init::Xavier);
        self.add(format!("{prefix}.b"), &[fan_out], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, dim: usize) {
        self.add(format!("{prefix}.g"), &[dim], Init::Ones);
        self.add(format!("{prefix}.b"), &[dim], Init::Zeros);
    }

    fn block(&mut self, prefix: &str, dim: usize, mlp_ratio: usize) {
        self.norm(&format!("{prefix}.ln1"), dim);
        self.linear(&format!("{prefix}.qkv"), dim, 3 * dim);
        self.linear(&format!("{prefix}.proj"), dim, dim);
        self.norm(&format!("{prefix}.ln2"), dim);
        self.linear(&format!("{prefix}.fc1"), dim, mlp_ratio * dim);
        self.linear(&format!("{prefix}.fc2"), mlp_ratio * dim, dim);
    }
}

pub(crate) fn init_encoder<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParamSet {
    let e = &cfg.encoder;
    let mut b = Builder {
        rng,
        set: ParamSet::new(),
    };
    b.linear("enc.patch", e.patch_voxels, e.embed_dim);
    b.add("enc.pos".into(), &[e.n_tokens, e.embed_dim], Init::Normal(0.02));
    for i in 0..e.depth {
        b.block(&format!("enc.blk{i}"), e.embed_dim, e.mlp_ratio);
    }
    b.norm("enc.norm", e.embed_dim);
    b.set
}

impl ModelState {
    /// Fresh parameters; the target branch starts as a copy of the online
    /// branch.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(seed, &[tag::INIT]));
        let e = &config.encoder;
        let mut online = init_encoder(config, &mut rng);
        let mut b = Builder {
            rng: &mut rng,
            set: ParamSet::new(),
        };
        let dd = config.dec_dim;
        b.linear("dec.embed", e.embed_dim, dd);
        b.add("dec.mask_token".into(), &[1, dd], Init::Normal(0.02));
        b.add("dec.pos".into(), &[e.n_tokens, dd], Init::Normal(0.02));
        for i in 0..config.dec_depth {
            b.block(&format!("dec.blk{i}"), dd, e.mlp_ratio);
        }
        b.norm("dec.norm", dd);
        b.linear("dec.pred", dd, e.patch_voxels);
        b.linear("dec.feat", dd, e.embed_dim);

        b.linear("head.l1", e.embed_dim, config.head_hidden);
        b.linear("head.l2", config.head_hidden, config.head_hidden);
        b.linear("head.l3", config.head_hidden, config.head_out);

        let c = config.casa_dim;
        b.norm("casa.ln_q", e.embed_dim);
        b.norm("casa.ln_kv", config.head_out);
        b.add("casa.wq".into(), &[e.embed_dim, c], Init::Xavier);
        b.add("casa.wk".into(), &[config.head_out, c], Init::Xavier);
        b.add("casa.wv".into(), &[config.head_out, c], Init::Xavier);
        b.linear("casa.zeta", c, c);
        online.append(&mut b.set);

        let target = online
            .iter()
            .filter(|(k, _)| config.is_target_key(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(ModelState {
            config: config.clone(),
            online,
            target,
        })
    }

    /// `target <- m * target + (1 - m) * online` for every target parameter.
    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::invalid(format!("EMA momentum {m} outside [0, 1]")));
        }
        for (name, t) in self.target.iter_mut() {
            let o = self
                .online
                .get(name)
                .ok_or_else(|| Error::Mismatch(format!("no online parameter {name}")))?;
            for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
                *tv = m * *tv + (1.0 - m) * ov;
            }
        }
        Ok(())
    }

    pub fn online_param_count(&self) -> usize {
        self.online.values().map(Tensor::len).sum()
    }

    /// Binds online parameters as trainable leaves and target parameters as
    /// constants.
    pub fn bind(&self, g: &mut Graph) -> (Bound, Bound) {
        (Bound::params(g, &self.online), Bound::constants(g, &self.target))
    }
}

/// Graph handles for a parameter set.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn params(g: &mut Graph, set: &ParamSet) -> Self {
        Bound {
            vars: set.iter().map(|(k, v)| (k.clone(), g.param(v.clone()))).collect(),
        }
    }

    pub fn constants(g: &mut Graph, set: &ParamSet) -> Self {
        Bound {
            vars: set.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect(),
        }
    }

    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Mismatch(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Constant copies of every handle under `prefix`.
    pub fn detached(&self, g: &mut Graph, prefix: &str) -> Bound {
        Bound {
            vars: self
                .vars
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), g.detach(*v)))
                .collect(),
        }
    }
}
