use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            t: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(
    params: Vec<&mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(
                "adam_step",
                format!("tensor {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .into_iter()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (j, &gj) in g.data().iter().enumerate() {
            md[j] = hyper.beta1 * md[j] + (1.0 - hyper.beta1) * gj;
            vd[j] = hyper.beta2 * vd[j] + (1.0 - hyper.beta2) * gj * gj;
            let m_hat = md[j] / c1;
            let v_hat = vd[j] / c2;
            pd[j] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(p: &mut Tensor, g: &Tensor, s: &mut AdamState, lr: f64) {
        adam_step(vec![p], std::slice::from_ref(g), s, lr, AdamHyper::default()).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::row(vec![1.0, -2.0, 3.0]);
        let mut s = AdamState::new([&p]);
        for _ in 0..3 {
            step(&mut p, &Tensor::zeros([1, 3]), &mut s, 0.1);
        }
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::row(vec![0.0, 0.0, 0.0]);
        let mut s = AdamState::new([&p]);
        step(&mut p, &Tensor::row(vec![3.0, -0.5, 100.0]), &mut s, 0.01);
        for (&x, sign) in p.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - sign * 0.01).abs() < 1e-9, "{x}");
        }
    }

    #[test]
    fn three_step_trace_matches_hand_moments() {
        // g = 1, 2, -1; hand-computed m, v and bias-corrected updates
        let (lr, b1, b2, eps) = (0.1_f64, 0.9_f64, 0.999_f64, 1e-8);
        let grads = [1.0, 2.0, -1.0];
        let mut expect = 0.5;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = t as i32 + 1;
            expect -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        // m3 = 0.9·0.29 − 0.1 = 0.161, v3 = 0.999·0.004999 + 0.001 = 0.005994001
        assert!((m - 0.161).abs() < 1e-15);
        assert!((v - 0.005_994_001).abs() < 1e-15);

        let mut p = Tensor::scalar(0.5);
        let mut s = AdamState::new([&p]);
        for g in grads {
            step(&mut p, &Tensor::scalar(g), &mut s, lr);
        }
        assert_eq!(s.t, 3);
        assert!((p.item() - expect).abs() < 1e-15);
        assert!((s.m[0].item() - 0.161).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::row(vec![0.0, 0.0]);
        let mut s = AdamState::new([&p]);
        let err = adam_step(vec![&mut p], &[Tensor::row(vec![1.0])], &mut s, 0.1, AdamHyper::default());
        assert!(err.is_err());
    }
}
