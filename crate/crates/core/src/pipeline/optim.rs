//! Adam updates for Gaussian attributes and camera poses.

use crate::gaussian_map::{Gaussian, Moments};
use crate::geometry::{SE3Pose, Tangent};
use crate::rasterizer::RenderGrads;

use super::config::LearningRates;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

fn adam(m: &mut f64, v: &mut f64, g: f64, lr: f64, c1: f64, c2: f64) -> f64 {
    *m = BETA1 * *m + (1.0 - BETA1) * g;
    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
    -lr * (*m / c1) / ((*v / c2).sqrt() + EPS)
}

fn param_len(g: &Gaussian) -> usize {
    14 + g.semantic_logits.len() + g.feature.len()
}

/// One Adam step on a Gaussian with gradient slot `i` of `grads`.
pub(crate) fn step_gaussian(
    g: &mut Gaussian,
    mo: &mut Moments,
    grads: &RenderGrads,
    i: usize,
    lr: &LearningRates,
) {
    let n = param_len(g);
    if mo.m.len() != n {
        *mo = Moments::new(n);
    }
    mo.steps += 1;
    let c1 = 1.0 - BETA1.powi(mo.steps as i32);
    let c2 = 1.0 - BETA2.powi(mo.steps as i32);
    let (m, v) = (&mut mo.m, &mut mo.v);
    let mut k = 0;
    let mut upd = |param: &mut f64, grad: f64, rate: f64, k: &mut usize| {
        *param += adam(&mut m[*k], &mut v[*k], grad, rate, c1, c2);
        *k += 1;
    };
    for a in 0..3 {
        upd(
            &mut g.position[a],
            grads.position[i][a],
            lr.position,
            &mut k,
        );
    }
    for a in 0..3 {
        upd(
            &mut g.log_scale[a],
            grads.log_scale[i][a],
            lr.log_scale,
            &mut k,
        );
    }
    for a in 0..4 {
        upd(
            &mut g.rotation[a],
            grads.rotation[i][a],
            lr.rotation,
            &mut k,
        );
    }
    upd(
        &mut g.opacity_logit,
        grads.opacity_logit[i],
        lr.opacity,
        &mut k,
    );
    for a in 0..3 {
        upd(&mut g.color[a], grads.color[i][a], lr.color, &mut k);
    }
    for (p, gr) in g.semantic_logits.iter_mut().zip(&grads.semantic_logits[i]) {
        upd(p, *gr, lr.semantic, &mut k);
    }
    for (p, gr) in g.feature.iter_mut().zip(&grads.feature[i]) {
        upd(p, *gr, lr.feature, &mut k);
    }
    g.clamp();
}

/// Adam on a right-perturbation tangent, re-linearised at every step.
#[derive(Clone, Debug, Default)]
pub(crate) struct PoseAdam {
    m: [f64; 6],
    v: [f64; 6],
    steps: i32,
}

impl PoseAdam {
    /// One step with both pose rates multiplied by `scale`.
    pub fn step(
        &mut self,
        pose: &SE3Pose,
        grad: &Tangent,
        lr: &LearningRates,
        scale: f64,
    ) -> SE3Pose {
        self.steps += 1;
        let c1 = 1.0 - BETA1.powi(self.steps);
        let c2 = 1.0 - BETA2.powi(self.steps);
        let mut delta = Tangent::zeros();
        for a in 0..6 {
            let rate = scale
                * if a < 3 {
                    lr.pose_translation
                } else {
                    lr.pose_rotation
                };
            delta[a] = adam(&mut self.m[a], &mut self.v[a], grad[a], rate, c1, c2);
        }
        pose.retract(&delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let lr = LearningRates::default();
        let mut opt = PoseAdam::default();
        let g = Tangent::new(3.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let p = opt.step(&SE3Pose::identity(), &g, &lr, 1.0);
        assert!((p.translation().x + lr.pose_translation).abs() < 1e-9);
        assert!(p.translation().y.abs() < 1e-15);
    }

    #[test]
    fn gaussian_step_descends_each_attribute() {
        let lr = LearningRates::default();
        let mut g = Gaussian::new(
            Vec3::new(0.0, 0.0, 5.0),
            0.1,
            Vec3::new(0.5, 0.5, 0.5),
            2,
            2,
        );
        let mut mo = Moments::new(0);
        let mut grads = RenderGrads::zeros(1, 2, 2);
        grads.color[0] = Vec3::new(1.0, -1.0, 0.0);
        grads.opacity_logit[0] = -2.0;
        step_gaussian(&mut g, &mut mo, &grads, 0, &lr);
        assert!((g.color.x - (0.5 - lr.color)).abs() < 1e-9);
        assert!((g.color.y - (0.5 + lr.color)).abs() < 1e-9);
        assert_eq!(g.color.z, 0.5);
        assert!((g.opacity_logit - lr.opacity).abs() < 1e-9);
        assert_eq!(mo.steps, 1);
        assert_eq!(mo.m.len(), 18);
    }
}
