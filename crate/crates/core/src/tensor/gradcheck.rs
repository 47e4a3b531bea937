use super::{Result, Tape, Tensor, TensorError, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates sitting on a kink (one-sided differences disagree), e.g.
    /// relu at 0 or a max-pool tie; they are not compared.
    pub skipped: usize,
    /// `(input index, element index)` of the largest error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tolerance
    }
}

/// Below this magnitude errors are measured absolutely.
const REL_FLOOR: f64 = 1e-4;

/// Checks the gradient of the scalar built by `f` with respect to every
/// element of `inputs` using central differences with `step`.
///
/// The relative error of a coordinate is `|a − n| / max(|a|, |n|, 1e-4)`.
/// `f` must be deterministic (seed any dropout inside it).
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { op: "gradient_check" })
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let base = tape.value(out).item();

    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, skipped: 0, worst: None };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[ii].len()]);
        for ei in 0..inputs[ii].len() {
            let orig = inputs[ii].data()[ei];
            work[ii].data_mut()[ei] = orig + step;
            let plus = eval(&work)?;
            work[ii].data_mut()[ei] = orig - step;
            let minus = eval(&work)?;
            work[ii].data_mut()[ei] = orig;

            let forward = (plus - base) / step;
            let backward = (base - minus) / step;
            let numeric = (plus - minus) / (2.0 * step);
            if (forward - backward).abs() > 1e-2 * (1.0 + numeric.abs()) {
                report.skipped += 1;
                continue;
            }
            let a = analytic[ei];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((ii, ei));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archdsl::Padding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_map_is_near_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let probe = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let report = gradient_check(
            |t, v| {
                let y = t.linear(v[0], v[1])?;
                t.dot(y, &probe)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.skipped, 0);
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn conv_random_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let probe = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng);
        let report = gradient_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], 1, Padding::Same)?;
                t.dot(y, &probe)
            },
            &[x, k],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-6), "{report:?}");
    }

    #[test]
    fn relu_kink_is_skipped() {
        let x = Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap();
        let probe = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let report = gradient_check(
            |t, v| {
                let y = t.relu(v[0])?;
                t.dot(y, &probe)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!((report.checked, report.skipped), (2, 1));
        assert!(report.max_rel_err < 1e-9);
    }
}

#[cfg(test)]
mod layer_tests {
    use super::*;
    use crate::tensor::{BatchNormConfig, Mode, RunningStats};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_layer_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng);
        let g = Tensor::randn(&[2], 1.0, &mut rng);
        let b = Tensor::randn(&[2], 1.0, &mut rng);
        let probe = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng);
        let r = gradient_check(|t, v| {
            let mut st = RunningStats::new(2);
            let y = t.batch_norm(v[0], v[1], v[2], Mode::Train, &mut st, BatchNormConfig::default())?;
            t.dot(y, &probe)
        }, &[x.clone(), g, b], 1e-5).unwrap();
        assert!(r.passes(1e-6), "bn {r:?}");
        let probe2 = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng);
        let r = gradient_check(|t, v| { let y = t.max_pool(v[0], 2, 2)?; t.dot(y, &probe2) }, std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(r.passes(1e-6), "pool {r:?}");
        let probe3 = Tensor::randn(&[3, 2 * 5], 1.0, &mut rng);
        let r = gradient_check(|t, v| { let y = t.spp(v[0], &[2, 1])?; t.dot(y, &probe3) }, std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(r.passes(1e-6), "spp {r:?}");
        let l = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let r = gradient_check(|t, v| t.softmax_cross_entropy(v[0], &[1, 3, 0]), &[l], 1e-5).unwrap();
        assert!(r.passes(1e-6), "ce {r:?}");
        let r = gradient_check(|t, v| { let y = t.relu(v[0])?; t.dot(y, &probe) }, std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(r.passes(1e-6), "relu {r:?}");
        let k = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let probe4 = Tensor::randn(&[3, 3, 1, 1], 1.0, &mut rng);
        let r = gradient_check(|t, v| { let y = t.conv2d(v[0], v[1], 2, crate::archdsl::Padding::Valid)?; t.dot(y, &probe4) }, &[x.clone(), k], 1e-5).unwrap();
        assert!(r.passes(1e-6), "conv s2 {r:?}");
        let x = Tensor::randn(&[2, 3, 13, 13], 1.0, &mut rng);
        let k = Tensor::randn(&[4, 3, 7, 7], 1.0, &mut rng);
        let probe5 = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng);
        let r = gradient_check(|t, v| { let y = t.conv2d(v[0], v[1], 2, crate::archdsl::Padding::Valid)?; t.dot(y, &probe5) }, &[x.clone(), k], 1e-5).unwrap();
        assert!(r.passes(1e-6), "conv7 s2 {r:?}");
        let k = Tensor::randn(&[4, 3, 1, 3], 1.0, &mut rng);
        let probe6 = Tensor::randn(&[2, 4, 13, 13], 1.0, &mut rng);
        let r = gradient_check(|t, v| { let y = t.conv2d(v[0], v[1], 1, crate::archdsl::Padding::Same)?; t.dot(y, &probe6) }, &[x.clone(), k], 1e-5).unwrap();
        assert!(r.passes(1e-6), "conv1x3 {r:?}");
        let probe7 = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let r = gradient_check(|t, v| { let y = t.max_pool(v[0], 3, 3)?; t.dot(y, &probe7) }, std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(r.passes(1e-6), "pool33 {r:?}");
    }
}
