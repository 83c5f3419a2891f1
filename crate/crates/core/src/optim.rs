//! Adam over the parameter classes of a [`GaussianCloud`].

use serde::{Deserialize, Serialize};

use crate::densify::Sources;
use crate::renderer::CloudGrads;
use crate::scene::GaussianCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Step sizes for one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Moments {
    stride: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(stride: usize, n: usize) -> Self {
        Moments {
            stride,
            m: vec![0.0; stride * n],
            v: vec![0.0; stride * n],
        }
    }

    fn remap(&mut self, sources: &Sources) {
        let s = self.stride;
        let mut m = Vec::with_capacity(sources.len() * s);
        let mut v = Vec::with_capacity(sources.len() * s);
        for src in sources {
            match src {
                Some(i) => {
                    m.extend_from_slice(&self.m[i * s..(i + 1) * s]);
                    v.extend_from_slice(&self.v[i * s..(i + 1) * s]);
                }
                None => {
                    m.extend(std::iter::repeat_n(0.0, s));
                    v.extend(std::iter::repeat_n(0.0, s));
                }
            }
        }
        self.m = m;
        self.v = v;
    }
}

/// Adam state with one moment pair per scalar parameter and a shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    groups: [Moments; 5],
}

const OPACITY: usize = 3;

impl Adam {
    pub fn new(config: AdamConfig, cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        Adam {
            config,
            step: 0,
            groups: [
                Moments::new(3, n),
                Moments::new(3, n),
                Moments::new(4, n),
                Moments::new(1, n),
                Moments::new(cloud.sh_stride(), n),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.groups[OPACITY].m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Follows a structural edit of the cloud; new Gaussians start with zero moments.
    pub fn remap(&mut self, sources: &Sources) {
        for g in &mut self.groups {
            g.remap(sources);
        }
    }

    /// First and second moments flattened in class order, for checkpoints.
    pub fn moments(&self) -> Vec<(&'static str, &[f64], &[f64])> {
        ["position", "log_scale", "rotation", "opacity_logit", "sh"]
            .into_iter()
            .zip(&self.groups)
            .map(|(name, g)| (name, g.m.as_slice(), g.v.as_slice()))
            .collect()
    }

    /// One Adam update of every parameter; rotations are renormalized afterwards.
    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &CloudGrads, lr: &StepSizes) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let update = |g: &mut Moments, idx: usize, grad: f64, lr: f64| -> f64 {
            let m = &mut g.m[idx];
            let v = &mut g.v[idx];
            *m = c.beta1 * *m + (1.0 - c.beta1) * grad;
            *v = c.beta2 * *v + (1.0 - c.beta2) * grad * grad;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            lr * m_hat / (v_hat.sqrt() + c.eps)
        };
        let [pos, scale, rot, opa, sh] = &mut self.groups;
        for i in 0..cloud.len() {
            for a in 0..3 {
                cloud.positions[i][a] -= update(pos, i * 3 + a, grads.positions[i][a], lr.position);
                cloud.log_scales[i][a] -= update(scale, i * 3 + a, grads.log_scales[i][a], lr.scale);
            }
            for a in 0..4 {
                cloud.rotations[i][a] -= update(rot, i * 4 + a, grads.rotations[i][a], lr.rotation);
            }
            cloud.opacity_logits[i] -= update(opa, i, grads.opacity_logits[i], lr.opacity);
        }
        let stride = sh.stride;
        for (j, (p, g)) in cloud.sh_coeffs.iter_mut().zip(&grads.sh_coeffs).enumerate() {
            let lr = if j % stride < 3 { lr.sh_dc } else { lr.sh_rest };
            *p -= update(sh, j, *g, lr);
        }
        cloud.normalize_rotations();
    }
}
