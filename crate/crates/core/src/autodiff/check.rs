use super::{Graph, GraphError, Var};
use crate::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar `f` against central differences with step
/// `eps` at every coordinate of every input; returns the largest [`rel_err`].
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64, GraphError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, GraphError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let hi = eval(&work)?;
            work[i].data_mut()[j] = x0 - eps;
            let lo = eval(&work)?;
            work[i].data_mut()[j] = x0;
            worst = worst.max(rel_err(grad.data()[j], (hi - lo) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
    }

    /// `sum(r * y)` for a fixed random `r`, keeping the loss O(1).
    fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, GraphError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.shape(y).to_vec();
        let n: usize = shape.iter().product();
        let r = rand_tensor(&mut rng, &shape, 1.0 / (n as f64).sqrt());
        let r = g.input(r);
        let p = g.mul(y, r)?;
        Ok(g.sum(p))
    }

    #[test]
    fn linear_map_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, &[2, 3, 5], 1.0);
        let w = rand_tensor(&mut rng, &[4, 3], 1.0);
        let b = rand_tensor(&mut rng, &[4], 1.0);
        let err = grad_check(
            |g, v| {
                let y = g.pointwise(v[0], v[1], v[2])?;
                project(g, y, 1)
            },
            &[x, w, b],
            // central differences are exact on a function linear in each coordinate
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn conv_layer_norm_gelu_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 3, 11], 1.0);
        let w = rand_tensor(&mut rng, &[4, 3, 3], 0.5);
        let b = rand_tensor(&mut rng, &[4], 0.5);
        let gamma = rand_tensor(&mut rng, &[4], 1.0);
        let beta = rand_tensor(&mut rng, &[4], 1.0);
        let err = grad_check(
            |g, v| {
                let y = g.conv1d(v[0], v[1], v[2], 2, 1)?;
                let y = g.layer_norm(y, v[3], v[4])?;
                let y = g.gelu(y);
                let y = g.mean_time(y)?;
                project(g, y, 3)
            },
            &[x, w, b, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn ssm_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, m, l) = (2, 3, 16);
        let p = crate::ssm::init_diagonal_ssm::<f64>(h, 2 * m, 9).unwrap();
        let t = |v: &Vec<f64>, s: &[usize]| Tensor::from_vec(s, v.clone());
        let inputs = vec![
            t(&p.log_neg_a_re, &[h, m]),
            t(&p.a_im, &[h, m]),
            rand_tensor(&mut rng, &[h, m], 1.0),
            rand_tensor(&mut rng, &[h, m], 1.0),
            t(&p.c_re, &[h, m]),
            t(&p.c_im, &[h, m]),
            Tensor::from_vec(&[h], vec![-1.5, -2.5]),
            rand_tensor(&mut rng, &[2, h, l], 1.0),
            rand_tensor(&mut rng, &[h], 1.0),
        ];
        let err = grad_check(
            |g, v| {
                let k = g.ssm_kernel([v[0], v[1], v[2], v[3], v[4], v[5], v[6]], l)?;
                let u = g.flip_time(v[7])?;
                let y = g.causal_conv(u, k)?;
                let skip = g.channel_scale(v[7], v[8])?;
                let cat = g.concat_channels(y, skip)?;
                let s = g.sigmoid(cat);
                project(g, s, 5)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn modal_conv_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, m, l) = (2, 3, 12);
        let p = crate::ssm::init_diagonal_ssm::<f64>(h, 2 * m, 3).unwrap();
        let modes = Tensor::from_vec(&[h, m, 4], crate::ssm::modal_coefficients(&p).unwrap());
        let inputs = vec![modes, rand_tensor(&mut rng, &[2, h, l], 1.0)];
        let err = grad_check(
            |g, v| {
                let y = g.modal_conv(v[1], v[0], false)?;
                let yr = g.modal_conv(v[1], v[0], true)?;
                let cat = g.concat_channels(y, yr)?;
                let s = g.sigmoid(cat);
                project(g, s, 7)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn bce_and_reshapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[3, 4], 2.0);
        let targets: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut weights = vec![1.0; 12];
        weights[5] = 0.0;
        let err = grad_check(
            |g, v| {
                let t = g.transpose2(v[0])?;
                let r = g.reshape(t, &[4, 3])?;
                let s = g.scale(r, 0.7);
                let p = g.sigmoid(s);
                g.bce(p, &targets, &weights, 11.0)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
