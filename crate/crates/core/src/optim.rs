//! Parameter-update rules: bias-corrected Adam, the three-group joint update
//! used to train the backbone with its adversarial hair branch, and RMSprop
//! for GAN training.
//!
//! The joint update treats the extractor as shared between two objectives.
//! Each objective keeps its own Adam moments on the extractor, and the hair
//! branch's normalized step enters the extractor update scaled by `-lambda`,
//! so the three per-group update rules hold exactly:
//!
//! ```text
//! melanoma head:  theta_m -= eta * ratio(g_m)
//! hair head:      theta_h -= eta * lambda * ratio(g_h)
//! extractor:      theta_f -= eta * (ratio(g_m) - lambda * ratio(g_h))
//! ```
//!
//! where `ratio(g) = m_hat / (sqrt(v_hat) + eps)` with moments accumulated
//! from that branch's gradients alone.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter set. Ordered map so every traversal is deterministic.
pub type Params = BTreeMap<String, Tensor>;

/// Named gradient arrays, as collected from a backward pass.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            eta: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators for one parameter group.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advance this group's moments with `g` and return the normalized step
    /// `m_hat / (sqrt(v_hat) + eps)`. `t` must already be advanced.
    fn ratio(&mut self, name: &str, g: &[f64], hp: &AdamHyper) -> Vec<f64> {
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        let mut out = vec![0.0; g.len()];
        for i in 0..g.len() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            out[i] = m_hat / (v_hat.sqrt() + hp.epsilon);
        }
        out
    }
}

fn check_shape(op: &'static str, name: &str, p: &Tensor, g: &[f64]) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::Parameter {
            op,
            detail: format!(
                "gradient for '{}' has {} elements, parameter has {}",
                name,
                g.len(),
                p.len()
            ),
        });
    }
    Ok(())
}

/// One bias-corrected Adam step over a parameter group. Parameters without
/// a gradient entry are treated as having a zero gradient.
pub fn adam_step(
    params: &mut Params,
    grads: &GradMap,
    state: &mut AdamState,
    hp: &AdamHyper,
) -> Result<()> {
    state.t += 1;
    for (name, p) in params.iter_mut() {
        let zero;
        let g = match grads.get(name) {
            Some(g) => {
                check_shape("adam_step", name, p, g)?;
                g.as_slice()
            }
            None => {
                zero = vec![0.0; p.len()];
                zero.as_slice()
            }
        };
        let ratio = state.ratio(name, g, hp);
        for (pv, r) in p.data_mut().iter_mut().zip(&ratio) {
            *pv -= hp.eta * r;
        }
    }
    Ok(())
}

/// RMSprop hyperparameters and second-moment accumulator.
#[derive(Clone, Debug)]
pub struct RmsPropState {
    pub rho: f64,
    pub eta: f64,
    pub epsilon: f64,
    s: BTreeMap<String, Vec<f64>>,
}

impl RmsPropState {
    pub fn new(rho: f64, eta: f64, epsilon: f64) -> Self {
        RmsPropState {
            rho,
            eta,
            epsilon,
            s: BTreeMap::new(),
        }
    }
}

/// One RMSprop step: `s <- rho*s + (1-rho)*g^2; p <- p - eta*g/(sqrt(s)+eps)`.
pub fn rmsprop_step(params: &mut Params, grads: &GradMap, state: &mut RmsPropState) -> Result<()> {
    for (name, p) in params.iter_mut() {
        let g = match grads.get(name) {
            Some(g) => {
                check_shape("rmsprop_step", name, p, g)?;
                g.as_slice()
            }
            None => continue,
        };
        let s = state
            .s
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            s[i] = state.rho * s[i] + (1.0 - state.rho) * g[i] * g[i];
            p.data_mut()[i] -= state.eta * g[i] / (s[i].sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// The three trainable groups: extractor, melanoma head, hair head.
/// Groups are disjoint by construction (separate maps, distinct prefixes).
#[derive(Clone, Debug, Default)]
pub struct ParamGroups {
    pub extractor: Params,
    pub melanoma: Params,
    pub hair: Params,
}

/// Optimizer for the joint melanoma/hair objective.
#[derive(Clone, Debug)]
pub struct JointAdam {
    pub hyper: AdamHyper,
    pub lambda: f64,
    melanoma: AdamState,
    hair: AdamState,
    extractor_mel: AdamState,
    extractor_hair: AdamState,
}

impl JointAdam {
    pub fn new(hyper: AdamHyper, lambda: f64) -> Self {
        JointAdam {
            hyper,
            lambda,
            melanoma: AdamState::new(),
            hair: AdamState::new(),
            extractor_mel: AdamState::new(),
            extractor_hair: AdamState::new(),
        }
    }

    /// Apply one joint update.
    ///
    /// `grads_m` comes from a backward pass of the melanoma loss and may
    /// touch only extractor and melanoma-head parameters. `grads_h` comes
    /// from a backward pass of the hair loss; its extractor entries carry
    /// the `-lambda` factor applied by the gradient-reversal node, while its
    /// hair-head entries are plain descent gradients.
    pub fn joint_step(
        &mut self,
        groups: &mut ParamGroups,
        grads_m: &GradMap,
        grads_h: &GradMap,
    ) -> Result<()> {
        for name in grads_m.keys() {
            if groups.hair.contains_key(name) {
                return Err(Error::Wiring(format!(
                    "melanoma gradients touch hair parameter '{}'",
                    name
                )));
            }
        }
        for name in grads_h.keys() {
            if groups.melanoma.contains_key(name) {
                return Err(Error::Wiring(format!(
                    "hair gradients touch melanoma parameter '{}'",
                    name
                )));
            }
        }

        adam_step(&mut groups.melanoma, grads_m, &mut self.melanoma, &self.hyper)?;

        // Hair head: moments of the plain hair gradient, update scaled by lambda.
        self.hair.t += 1;
        for (name, p) in groups.hair.iter_mut() {
            let zero;
            let g = match grads_h.get(name) {
                Some(g) => {
                    check_shape("joint_step", name, p, g)?;
                    g.as_slice()
                }
                None => {
                    zero = vec![0.0; p.len()];
                    zero.as_slice()
                }
            };
            let ratio = self.hair.ratio(name, g, &self.hyper);
            for (pv, r) in p.data_mut().iter_mut().zip(&ratio) {
                *pv -= self.hyper.eta * self.lambda * r;
            }
        }

        // Extractor: melanoma step, minus lambda times the hair branch's
        // normalized step. The reversal already negated the raw hair
        // gradients, so dividing by -lambda recovers the descent direction
        // whose moments the update rule normalizes by.
        self.extractor_mel.t += 1;
        let hair_active = self.lambda > 0.0
            && groups.extractor.keys().any(|name| grads_h.contains_key(name));
        if hair_active {
            self.extractor_hair.t += 1;
        }
        for (name, p) in groups.extractor.iter_mut() {
            let zero;
            let gm = match grads_m.get(name) {
                Some(g) => {
                    check_shape("joint_step", name, p, g)?;
                    g.as_slice()
                }
                None => {
                    zero = vec![0.0; p.len()];
                    zero.as_slice()
                }
            };
            let mut step = self.extractor_mel.ratio(name, gm, &self.hyper);
            if hair_active {
                if let Some(gr) = grads_h.get(name) {
                    check_shape("joint_step", name, p, gr)?;
                    let unreversed: Vec<f64> = gr.iter().map(|g| g / -self.lambda).collect();
                    let hair_ratio = self.extractor_hair.ratio(name, &unreversed, &self.hyper);
                    for (s, hr) in step.iter_mut().zip(&hair_ratio) {
                        *s -= self.lambda * hr;
                    }
                }
            }
            for (pv, s) in p.data_mut().iter_mut().zip(&step) {
                *pv -= self.hyper.eta * s;
            }
        }
        Ok(())
    }
}
