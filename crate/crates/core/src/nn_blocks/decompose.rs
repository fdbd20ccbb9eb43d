use crate::autodiff::{Adam, Binding, ParamSet, Tape, Var};
use crate::error::{arg_err, Result};
use crate::ndtensor::{dims4, Rng, Tensor};
use crate::scalar::Scalar;

use super::Conv3x3;

const HIDDEN: usize = 32;
const SLOPE: f64 = 0.2;

/// Four 3×3 convolutions `3→32→32→32→4`, LeakyReLU(0.2) between and ReLU
/// on the output; channels 0..3 are reflectance, channel 3 illumination.
#[derive(Clone, Debug)]
pub struct DecompositionNet {
    pub convs: [Conv3x3; 4],
}

impl DecompositionNet {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, rng: &mut Rng) -> Self {
        let g = (2.0 / (1.0 + SLOPE * SLOPE)).sqrt();
        let convs = [
            Conv3x3::new(ps, &format!("{name}.conv0"), 3, HIDDEN, g, rng),
            Conv3x3::new(ps, &format!("{name}.conv1"), HIDDEN, HIDDEN, g, rng),
            Conv3x3::new(ps, &format!("{name}.conv2"), HIDDEN, HIDDEN, g, rng),
            Conv3x3::new(ps, &format!("{name}.conv3"), HIDDEN, 4, 1.0, rng),
        ];
        // start near R ≈ 0.5, L ≈ 0.5 so every output unit is active
        let b = ps.get_mut(convs[3].b);
        b.value.data_mut().iter_mut().for_each(|v| *v = T::lit(0.5));
        Self { convs }
    }

    /// Returns `(R (B,3,H,W), L (B,1,H,W))`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, img: Var) -> Result<(Var, Var)> {
        let x = tape.value(img)?;
        let [_, c, _, _] = dims4(x, "decompose")?;
        if c != 3 {
            return Err(arg_err("decompose", format!("expected rgb input, got {c} channels")));
        }
        if x.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(arg_err("decompose", "input outside [0, 1]"));
        }
        let mut h = img;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, bind, h)?;
            h = if i < 3 { tape.leaky_relu(h, T::lit(SLOPE))? } else { tape.relu(h)? };
        }
        let r = tape.slice(h, 1, 0, 3)?;
        let l = tape.slice(h, 1, 3, 4)?;
        Ok((r, l))
    }

    pub fn decompose<T: Scalar>(&self, ps: &ParamSet<T>, img: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape)?;
        let x = tape.constant(img.clone())?;
        let (r, l) = self.forward(&mut tape, &bind, x)?;
        Ok((tape.value(r)?.clone(), tape.value(l)?.clone()))
    }
}

/// `mean |R⊙L − I|`.
pub fn reconstruction_error_on_tape<T: Scalar>(tape: &mut Tape<T>, r: Var, l: Var, img: Var) -> Result<Var> {
    let rl = tape.mul(r, l)?;
    let d = tape.sub(rl, img)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Fits the net to reproduce its inputs as `R⊙L` with Adam; returns the
/// per-iteration training error.
pub fn fit_decomposition(
    net: &DecompositionNet,
    ps: &mut ParamSet<f64>,
    images: &[Tensor<f64>],
    iters: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(arg_err("fit_decomposition", "no training images"));
    }
    let mut opt = Adam::new(lr);
    let mut history = Vec::with_capacity(iters);
    for it in 0..iters {
        let batch = &images[it % images.len()];
        ps.zero_grad();
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape)?;
        let x = tape.constant(batch.clone())?;
        let (r, l) = net.forward(&mut tape, &bind, x)?;
        let loss = reconstruction_error_on_tape(&mut tape, r, l, x)?;
        history.push(tape.item(loss)?);
        let g = tape.backward(loss)?;
        ps.accumulate(&bind, &g)?;
        opt.step(ps);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_check_module, FdConfig};

    #[test]
    fn shapes_and_non_negativity() {
        let mut rng = Rng::new(0);
        let mut ps = ParamSet::<f64>::new();
        let net = DecompositionNet::new(&mut ps, "d", &mut rng);
        for _ in 0..3 {
            let img: Tensor<f64> = rng.uniform_tensor(&[1, 3, 16, 16], 0.0, 1.0);
            let (r, l) = net.decompose(&ps, &img).unwrap();
            assert_eq!(r.shape(), &[1, 3, 16, 16]);
            assert_eq!(l.shape(), &[1, 1, 16, 16]);
            assert!(r.data().iter().chain(l.data()).all(|&v| v >= 0.0));
        }
        assert!(net.decompose(&ps, &Tensor::full(&[1, 3, 4, 4], 1.5)).is_err());
    }

    #[test]
    fn fd_check_decomposition() {
        for seed in 0..5 {
            let mut rng = Rng::new(40 + seed);
            let mut ps = ParamSet::<f64>::new();
            let net = DecompositionNet::new(&mut ps, "d", &mut rng);
            let img: Tensor<f64> = rng.uniform_tensor(&[1, 3, 3, 3], 0.0, 1.0);
            let w: Tensor<f64> = rng.normal_tensor(&[1, 4, 3, 3]);
            let cfg = FdConfig { max_coords: Some(25), seed, ..FdConfig::default() };
            let r = fd_check_module("decompose", &ps, &[], &cfg, |t, b, _| {
                let x = t.constant(img.clone())?;
                let (r, l) = net.forward(t, b, x)?;
                let y = t.concat(&[r, l], 1)?;
                let wv = t.constant(w.clone())?;
                let y = t.mul(y, wv)?;
                t.sum(y)
            })
            .unwrap();
            assert!(r.pass, "seed {seed}: {}", r.max_rel_err());
        }
    }
}
