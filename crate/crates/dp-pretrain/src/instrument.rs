//! Measurement utilities: gradient signal-to-noise ratios, per-group weight
//! norms, and scale-invariance probes for the layer-normalized model.

use crate::data::{MaskedExample, CLS, FIRST_CONTENT, SEP};
use crate::error::{Error, Result};
use crate::model::{forward_loss, per_example_gradient, ModelConfig, ParameterSet};
use crate::rng::{Purpose, RngStream};
use crate::tensor::Element;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Signal-to-noise ratio of a privatized step: the norm of the clipped
/// gradient sum over the norm of the added noise vector. None when no noise
/// was added (the ratio is undefined, not infinite).
pub fn gradient_snr(signal_norm: f64, noise_norm: f64) -> Result<Option<f64>> {
    if !(signal_norm >= 0.0) || !(noise_norm >= 0.0) {
        return Err(Error::parameter(format!(
            "norms must be nonnegative, got signal {signal_norm} and noise {noise_norm}"
        )));
    }
    if noise_norm == 0.0 {
        Ok(None)
    } else {
        Ok(Some(signal_norm / noise_norm))
    }
}

/// Key under which the combined norm of the three embedding tables is
/// reported; they act as one scale-invariant group.
pub const CONJOINT_NORM_KEY: &str = "embeddings_conjoint";

/// Frobenius norm of every parameter tensor, plus a conjoint entry covering
/// the three embedding tables together.
pub fn weight_norm_report<E: Element>(params: &ParameterSet<E>) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let mut conjoint = 0.0;
    for (name, t) in params.iter() {
        let sq = t.sum_squares();
        out.insert(name.to_string(), sq.sqrt());
        if ModelConfig::embedding_tables().contains(&name) {
            conjoint += sq;
        }
    }
    out.insert(CONJOINT_NORM_KEY.to_string(), conjoint.sqrt());
    out
}

/// Parameter group a scale probe multiplies by alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleGroup {
    /// All three embedding tables together; scale-invariant at ln_eps = 0.
    Conjoint,
    /// The word table alone; not invariant.
    Word,
    /// The position table alone; not invariant.
    Position,
    /// The token-type table alone; not invariant.
    TokenType,
}

impl ScaleGroup {
    pub const ALL: [ScaleGroup; 4] =
        [ScaleGroup::Conjoint, ScaleGroup::Word, ScaleGroup::Position, ScaleGroup::TokenType];

    pub fn name(self) -> &'static str {
        match self {
            ScaleGroup::Conjoint => "conjoint",
            ScaleGroup::Word => "word",
            ScaleGroup::Position => "position",
            ScaleGroup::TokenType => "token-type",
        }
    }

    /// Tensor names belonging to the group.
    pub fn members(self) -> Vec<&'static str> {
        let [word, position, token_type] = ModelConfig::embedding_tables();
        match self {
            ScaleGroup::Conjoint => vec![word, position, token_type],
            ScaleGroup::Word => vec![word],
            ScaleGroup::Position => vec![position],
            ScaleGroup::TokenType => vec![token_type],
        }
    }
}

impl fmt::Display for ScaleGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScaleGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScaleGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| {
                Error::parameter(format!(
                    "unknown scale group {s:?}; expected one of conjoint, word, position, token-type"
                ))
            })
    }
}

/// Outcome of one scale probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub group: ScaleGroup,
    pub alpha: f64,
    /// Largest absolute logit change across the probe batch.
    pub max_logit_deviation: f64,
    /// Norm of the group's summed gradient at the scaled weights over the
    /// norm at the original weights.
    pub grad_norm_ratio: f64,
}

/// Number of synthetic examples a probe evaluates.
const PROBE_BATCH: usize = 8;

/// Deterministic synthetic batch for probing: random content tokens behind a
/// leading CLS and a mid-sequence SEP, with a quarter of the content masked.
fn probe_batch(cfg: &ModelConfig, seed: u64) -> Vec<MaskedExample> {
    let stream = RngStream::new(seed);
    let l = cfg.seq_len;
    let v = cfg.vocab_size as u16;
    (0..PROBE_BATCH)
        .map(|i| {
            let mut rng = stream.key(0, i as u64, Purpose::Probe).rng();
            let mut tokens: Vec<u16> = (0..l)
                .map(|_| rng.random_range(FIRST_CONTENT..v))
                .collect();
            tokens[0] = CLS;
            tokens[l / 2] = SEP;
            let token_types: Vec<u8> =
                (0..l).map(|p| if p > l / 2 { 1 } else { 0 }).collect();
            let mut positions = Vec::new();
            let mut labels = Vec::new();
            for p in (1..l).step_by(4) {
                if p == l / 2 {
                    continue;
                }
                positions.push(p);
                labels.push(tokens[p]);
                tokens[p] = crate::data::MASK;
            }
            MaskedExample { tokens, token_types, positions, labels }
        })
        .collect()
}

/// Scale one parameter group by alpha and measure how far the model's logits
/// move and how the group's gradient norm responds, with the layer-norm
/// stabilizer forced to zero so exact invariance can hold.
pub fn scale_invariance_probe<E: Element>(
    cfg: &ModelConfig,
    params: &ParameterSet<E>,
    group: ScaleGroup,
    alpha: f64,
    seed: u64,
) -> Result<ProbeReport> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::parameter(format!("alpha must be positive and finite, got {alpha}")));
    }
    let mut probe_cfg = cfg.clone();
    probe_cfg.ln_eps = 0.0;
    let mut scaled = params.clone();
    let a = E::from_f64(alpha);
    for name in group.members() {
        let t = scaled.get_mut(name)?;
        for x in t.data_mut() {
            *x = *x * a;
        }
    }
    let batch = probe_batch(&probe_cfg, seed);
    let mut max_dev = 0.0f64;
    let mut base_sq = 0.0f64;
    let mut scaled_sq = 0.0f64;
    let mut base_grad_sum: Option<Vec<Vec<f64>>> = None;
    let mut scaled_grad_sum: Option<Vec<Vec<f64>>> = None;
    for ex in &batch {
        let base_out = forward_loss(params, &probe_cfg, ex)?;
        let scaled_out = forward_loss(&scaled, &probe_cfg, ex)?;
        for (b, s) in base_out.logits.data().iter().zip(scaled_out.logits.data()) {
            let dev = (b.as_f64() - s.as_f64()).abs();
            if dev > max_dev {
                max_dev = dev;
            }
        }
        let (base_grad, _) = per_example_gradient(params, &probe_cfg, ex)?;
        let (scaled_grad, _) = per_example_gradient(&scaled, &probe_cfg, ex)?;
        for (sum, grad) in
            [(&mut base_grad_sum, &base_grad), (&mut scaled_grad_sum, &scaled_grad)]
        {
            let members = group.members();
            let sum = sum.get_or_insert_with(|| {
                members.iter().map(|n| vec![0.0; grad.get(n).unwrap().data().len()]).collect()
            });
            for (acc, name) in sum.iter_mut().zip(&members) {
                for (a, g) in acc.iter_mut().zip(grad.get(name).unwrap().data()) {
                    *a += g.as_f64();
                }
            }
        }
    }
    for v in base_grad_sum.iter().flatten().flatten() {
        base_sq += v * v;
    }
    for v in scaled_grad_sum.iter().flatten().flatten() {
        scaled_sq += v * v;
    }
    if base_sq == 0.0 {
        return Err(Error::contract("probe gradient vanished; ratio undefined"));
    }
    Ok(ProbeReport {
        group,
        alpha,
        max_logit_deviation: max_dev,
        grad_norm_ratio: (scaled_sq / base_sq).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_parameters;
    use crate::rng::{gaussian_noise, Purpose, RngStream};

    #[test]
    fn snr_basic_cases() {
        assert_eq!(gradient_snr(3.0, 3.0).unwrap(), Some(1.0));
        assert_eq!(gradient_snr(0.0, 2.0).unwrap(), Some(0.0));
        assert_eq!(gradient_snr(5.0, 0.0).unwrap(), None);
        assert!(gradient_snr(-1.0, 1.0).is_err());
        assert!(gradient_snr(1.0, -1.0).is_err());
        assert!(gradient_snr(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn snr_mean_follows_chi_distribution() {
        // fixed signal norm S against noise of std sigma*c in d dimensions:
        // E[noise norm] ~ sigma*c*sqrt(d), so mean ratio ~ S/(sigma*c*sqrt(d))
        let d = 4096usize;
        let s = 7.0;
        let sigma_c = 0.05;
        let stream = RngStream::new(42);
        let mut sum = 0.0;
        let draws = 1000;
        for i in 0..draws {
            let noise: crate::tensor::Tensor<f64> =
                gaussian_noise(&[d], sigma_c, stream.key(i, 0, Purpose::Noise)).unwrap();
            sum += gradient_snr(s, noise.l2_norm()).unwrap().unwrap();
        }
        let mean = sum / draws as f64;
        let want = s / (sigma_c * (d as f64).sqrt());
        assert!(
            (mean - want).abs() / want < 0.02,
            "mean ratio {mean} vs chi prediction {want}"
        );
    }

    #[test]
    fn weight_norms_cover_every_group() {
        let cfg = ModelConfig { vocab_size: 32, seq_len: 8, width: 8, blocks: 1, heads: 2, ff_width: 16, ..Default::default() };
        let params = init_parameters::<f64>(&cfg, 5).unwrap();
        let report = weight_norm_report(&params);
        assert_eq!(report.len(), params.len() + 1);
        for (name, t) in params.iter() {
            let want = t.l2_norm();
            let got = report[name];
            assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{name}: {got} vs {want}");
        }
        let conjoint: f64 = ModelConfig::embedding_tables()
            .iter()
            .map(|n| params.get(n).unwrap().sum_squares())
            .sum();
        assert!((report[CONJOINT_NORM_KEY] - conjoint.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn weight_norm_simple_values() {
        let mut params = ParameterSet::<f64>::new();
        params
            .insert(
                "id",
                crate::tensor::Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            )
            .unwrap();
        params.insert("zero", crate::tensor::Tensor::zeros(&[3])).unwrap();
        let report = weight_norm_report(&params);
        assert!((report["id"] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(report["zero"], 0.0);
        assert_eq!(report[CONJOINT_NORM_KEY], 0.0);
    }

    #[test]
    fn group_names_round_trip() {
        for g in ScaleGroup::ALL {
            assert_eq!(g.name().parse::<ScaleGroup>().unwrap(), g);
        }
        assert!(matches!("attention".parse::<ScaleGroup>(), Err(Error::Parameter(_))));
    }

    fn probe_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 64,
            seq_len: 16,
            width: 32,
            blocks: 1,
            heads: 4,
            ff_width: 64,
            ..Default::default()
        }
    }

    #[test]
    fn conjoint_scaling_is_invariant_with_shrinking_gradient() {
        let cfg = probe_config();
        let params = init_parameters::<f64>(&cfg, 11).unwrap();
        let report =
            scale_invariance_probe(&cfg, &params, ScaleGroup::Conjoint, 10.0, 7).unwrap();
        assert!(report.max_logit_deviation <= 1e-10, "{}", report.max_logit_deviation);
        assert!((report.grad_norm_ratio - 0.1).abs() < 1e-6, "{}", report.grad_norm_ratio);
        let half = scale_invariance_probe(&cfg, &params, ScaleGroup::Conjoint, 0.5, 7).unwrap();
        assert!(half.max_logit_deviation <= 1e-10, "{}", half.max_logit_deviation);
        assert!((half.grad_norm_ratio - 2.0).abs() < 2e-6, "{}", half.grad_norm_ratio);
    }

    #[test]
    fn single_tables_are_not_invariant() {
        let cfg = probe_config();
        let params = init_parameters::<f64>(&cfg, 11).unwrap();
        for group in [ScaleGroup::Word, ScaleGroup::Position, ScaleGroup::TokenType] {
            let report = scale_invariance_probe(&cfg, &params, group, 10.0, 7).unwrap();
            assert!(
                report.max_logit_deviation > 1e-3,
                "{group}: deviation {}",
                report.max_logit_deviation
            );
        }
    }

    #[test]
    fn alpha_one_is_exact_identity() {
        let cfg = probe_config();
        let params = init_parameters::<f64>(&cfg, 3).unwrap();
        let report = scale_invariance_probe(&cfg, &params, ScaleGroup::Conjoint, 1.0, 7).unwrap();
        assert_eq!(report.max_logit_deviation, 0.0);
        assert_eq!(report.grad_norm_ratio, 1.0);
    }

    #[test]
    fn probe_rejects_bad_alpha() {
        let cfg = probe_config();
        let params = init_parameters::<f64>(&cfg, 3).unwrap();
        for alpha in [0.0, -1.0, f64::INFINITY, f64::NAN] {
            assert!(
                scale_invariance_probe(&cfg, &params, ScaleGroup::Conjoint, alpha, 7).is_err()
            );
        }
    }
}
