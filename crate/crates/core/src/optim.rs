//! Adam over named parameters with group-level freezing.

use crate::error::{Error, Result};
use crate::layers::{GroupSet, Param};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter list. Moments are allocated lazily, so
/// a parameter that was never updated keeps all-zero (absent) moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        AdamState {
            config,
            step: 0,
            first: vec![None; n_params],
            second: vec![None; n_params],
        }
    }

    /// First moment of parameter `i`, zeros if it never moved.
    pub fn first_moment(&self, i: usize) -> Option<&[f64]> {
        self.first.get(i).and_then(|m| m.as_deref())
    }

    pub fn second_moment(&self, i: usize) -> Option<&[f64]> {
        self.second.get(i).and_then(|m| m.as_deref())
    }
}

/// One bias-corrected Adam update of every parameter that is trainable and
/// in `active`. Other parameters and their moments are left untouched, and
/// a `None` gradient counts as "not computed" (also untouched).
pub fn adam_step(
    params: &mut [&mut Param],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    active: GroupSet,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Config(format!(
            "adam_step got {} params, {} gradients and state for {}",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.len() != p.value.len() {
                return Err(Error::GradShape {
                    name: p.name.clone(),
                    got: g.len(),
                    expected: p.value.len(),
                });
            }
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if !p.is_updatable(active) {
            continue;
        }
        let n = p.value.len();
        let m = state.first[i].get_or_insert_with(|| vec![0.0; n]);
        let v = state.second[i].get_or_insert_with(|| vec![0.0; n]);
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Group;

    fn scalar(name: &str, v: f64, group: Group) -> Param {
        Param::new(name, Tensor::vector(vec![v]), group)
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = scalar("a", 0.5, Group::Cnn);
        let mut st = AdamState::new(AdamConfig::default(), 1);
        adam_step(&mut [&mut p], &[Some(Tensor::vector(vec![0.0]))], &mut st, GroupSet::of(&[Group::Cnn])).unwrap();
        assert_eq!(p.value.data(), &[0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let mut p = scalar("a", 0.0, Group::Cnn);
        let mut st = AdamState::new(AdamConfig::with_lr(1e-4), 1);
        adam_step(&mut [&mut p], &[Some(Tensor::vector(vec![1.0]))], &mut st, GroupSet::of(&[Group::Cnn])).unwrap();
        let expected = -1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((p.value.data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn frozen_groups_are_bit_identical() {
        let mut a = scalar("cnn", 0.3, Group::Cnn);
        let mut b = scalar("ctrl", -0.7, Group::Ctrl);
        let mut e = scalar("emb", 1.0, Group::Emb);
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), 3);
        let g = vec![Some(Tensor::vector(vec![2.0])); 3];
        adam_step(&mut [&mut a, &mut b, &mut e], &g, &mut st, GroupSet::of(&Group::ALL)).unwrap();
        assert_ne!(a.value.data()[0], 0.3);
        assert_ne!(b.value.data()[0], -0.7);
        assert_eq!(e.value.data()[0].to_bits(), 1f64.to_bits());

        let before = b.value.data()[0].to_bits();
        let moments = st.first_moment(1).unwrap().to_vec();
        adam_step(&mut [&mut a, &mut b, &mut e], &g, &mut st, GroupSet::of(&[Group::Cnn])).unwrap();
        assert_eq!(b.value.data()[0].to_bits(), before);
        assert_eq!(st.first_moment(1).unwrap(), &moments[..]);
        assert!(st.first_moment(2).is_none());
    }

    #[test]
    fn shape_mismatch_names_param() {
        let mut a = scalar("conv3.w", 0.0, Group::Cnn);
        let mut st = AdamState::new(AdamConfig::default(), 1);
        let err = adam_step(&mut [&mut a], &[Some(Tensor::vector(vec![1.0, 2.0]))], &mut st, GroupSet::of(&[Group::Cnn])).unwrap_err();
        assert!(err.to_string().contains("conv3.w"));
    }
}
