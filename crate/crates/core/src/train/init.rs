use glob::Pattern;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{HwmError, Result};
use crate::numcore::{ParamStore, Tensor};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Normal { std: f64 },
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    Zeros,
    Ones,
}

/// Glob over parameter names. The first matching rule wins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitRule {
    pub pattern: String,
    pub init: Init,
}

impl InitRule {
    pub fn new(pattern: &str, init: Init) -> Self {
        Self { pattern: pattern.to_string(), init }
    }
}

pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [n] => (*n, *n),
        [i, o] => (*i, *o),
        _ => {
            let recept: usize = shape[2..].iter().product();
            (shape[0] * recept, shape[1] * recept)
        }
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fills every storage slot by the first rule matching its name. Each slot
/// draws from its own seed stream, so results do not depend on declaration order.
pub fn init_weights<T: Scalar>(store: &mut ParamStore<T>, rules: &[InitRule], seed: u64) -> Result<()> {
    let compiled: Vec<(Pattern, Init)> = rules
        .iter()
        .map(|r| {
            Pattern::new(&r.pattern)
                .map(|p| (p, r.init))
                .map_err(|e| HwmError::Config(format!("bad init pattern `{}`: {e}", r.pattern)))
        })
        .collect::<Result<_>>()?;
    let specs = store.layout().specs().to_vec();
    for (id, spec) in store.ids().collect::<Vec<_>>().into_iter().zip(specs) {
        let init = compiled
            .iter()
            .find(|(p, _)| p.matches(&spec.name))
            .map(|(_, i)| *i)
            .ok_or_else(|| HwmError::Config(format!("no init rule matches parameter `{}`", spec.name)))?;
        let n = spec.numel();
        let mut r = rng::stream(seed, &format!("init:{}", spec.name), 0);
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).map_err(|e| HwmError::Config(format!("normal init: {e}")))?;
                (0..n).map(|_| T::of(d.sample(&mut r))).collect()
            }
            Init::XavierUniform => {
                let b = xavier_bound(&spec.shape);
                let d = Uniform::new_inclusive(-b, b).map_err(|e| HwmError::Config(format!("xavier init: {e}")))?;
                (0..n).map(|_| T::of(d.sample(&mut r))).collect()
            }
        };
        store.set(id, Tensor::new(spec.shape.clone(), data)?)?;
    }
    Ok(())
}
