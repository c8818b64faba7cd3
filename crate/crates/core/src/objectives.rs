//! Training objectives: sequence cross-entropy, exponential cross-entropy,
//! and the cross-modal alignment constraint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Reduction used by [`exp_ce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpCeMode {
    /// Literal form: exp of the summed per-record cross-entropies. The
    /// exponent grows with batch size, so this overflows for any
    /// realistic loss; when it would, the value is returned in the log
    /// domain with a flag.
    PaperSum,
    /// exp of the token-weighted mean cross-entropy: monotone in the same
    /// quantity, bounded near `exp(ln 20) = 20` at init, gradient-stable.
    StableMean,
}

/// Which distribution is the KL student. The teacher side is always the
/// contextual features and is always detached from gradient flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacDirection {
    /// KL(softmax(struct/T) || softmax(context/T)) — literal argument order.
    StructToContext,
    /// KL(softmax(context/T) || softmax(struct/T)) — ablation switch.
    ContextToStruct,
}

/// Loss hyperparameters for stage-two training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softening temperature for the alignment KL (not the sampling
    /// temperature).
    pub distill_temperature: f64,
    /// Weight of the alignment term in the total loss.
    pub cac_weight: f64,
    pub expce_reduction: ExpCeMode,
    pub cac_direction: CacDirection,
    /// Multiply the alignment KL by T^2 (classic distillation gradient
    /// rescaling). Off by default: the plain KL keeps the loss vanishing
    /// as T grows.
    pub cac_t2_scaling: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            distill_temperature: 8.0,
            cac_weight: 1.0,
            expce_reduction: ExpCeMode::StableMean,
            cac_direction: CacDirection::StructToContext,
            cac_t2_scaling: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.distill_temperature <= 0.0 {
            return Err(Error::Config("distill temperature must be positive".into()));
        }
        if self.cac_weight < 0.0 {
            return Err(Error::Config("cac weight must be non-negative".into()));
        }
        Ok(())
    }
}

fn mask_column<F: Scalar>(mask: &[bool]) -> Tensor<F> {
    let col =
        ndarray::Array2::from_shape_fn(
            (mask.len(), 1),
            |(i, _)| {
                if mask[i] {
                    F::one()
                } else {
                    F::zero()
                }
            },
        );
    Tensor::constant(col)
}

fn check_targets<F: Scalar>(logits: &Tensor<F>, native: &[usize], mask: &[bool]) -> Result<usize> {
    if logits.nrows() != native.len() || logits.nrows() != mask.len() {
        return Err(Error::Shape(format!(
            "logits rows {} vs native {} vs mask {}",
            logits.nrows(),
            native.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Training("all positions are masked".into()));
    }
    Ok(count)
}

/// Mean negative log-likelihood of the native tokens over unmasked
/// positions.
pub fn seq_ce<F: Scalar>(logits: &Tensor<F>, native: &[usize], mask: &[bool]) -> Result<Tensor<F>> {
    let count = check_targets(logits, native, mask)?;
    let picked = logits.log_softmax_rows().select_positions(native);
    let masked = picked.mul(&mask_column(mask));
    Ok(masked.sum_all().scale(-F::one() / F::of_f64(count as f64)))
}

/// Summed (not averaged) negative log-likelihood plus the token count,
/// the building block for batch-level reductions.
pub fn nll_sum<F: Scalar>(
    logits: &Tensor<F>,
    native: &[usize],
    mask: &[bool],
) -> Result<(Tensor<F>, usize)> {
    let count = check_targets(logits, native, mask)?;
    let picked = logits.log_softmax_rows().select_positions(native);
    let masked = picked.mul(&mask_column(mask));
    Ok((masked.sum_all().neg(), count))
}

/// Exponential cross-entropy over a batch.
pub struct ExpCe<F: Scalar> {
    /// Loss node to backpropagate. In the log-domain fallback this is the
    /// exponent itself.
    pub loss: Tensor<F>,
    /// True when the literal value overflowed and `loss` is log-domain.
    pub log_domain: bool,
    /// The exponent (sum or mean of cross-entropies), as f64.
    pub log_value: f64,
    /// exp(log_value) as f64; may be infinite in paper_sum mode.
    pub value: f64,
}

/// Per-record logits and targets for one batch.
pub struct BatchTargets<'a, F: Scalar> {
    pub logits: &'a Tensor<F>,
    pub native: &'a [usize],
    pub mask: &'a [bool],
}

/// Exponential cross-entropy: `exp` applied to a batch reduction of the
/// cross-entropy. See [`ExpCeMode`] for the two reductions.
pub fn exp_ce<F: Scalar>(batch: &[BatchTargets<'_, F>], mode: ExpCeMode) -> Result<ExpCe<F>> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    // Overflow guard with headroom for the gradient scale.
    let max_exponent = F::max_value().into_f64().ln() * 0.5;
    let exponent = match mode {
        ExpCeMode::PaperSum => {
            let mut acc: Option<Tensor<F>> = None;
            for rec in batch {
                let ce = seq_ce(rec.logits, rec.native, rec.mask)?;
                acc = Some(match acc {
                    Some(a) => a.add(&ce),
                    None => ce,
                });
            }
            acc.unwrap()
        }
        ExpCeMode::StableMean => {
            let mut acc: Option<Tensor<F>> = None;
            let mut tokens = 0usize;
            for rec in batch {
                let (nll, count) = nll_sum(rec.logits, rec.native, rec.mask)?;
                tokens += count;
                acc = Some(match acc {
                    Some(a) => a.add(&nll),
                    None => nll,
                });
            }
            acc.unwrap().scale(F::one() / F::of_f64(tokens as f64))
        }
    };
    let log_value = exponent.item().into_f64();
    if !log_value.is_finite() {
        return Err(Error::Training(format!(
            "non-finite cross-entropy exponent {log_value}"
        )));
    }
    if log_value > max_exponent {
        Ok(ExpCe {
            loss: exponent,
            log_domain: true,
            log_value,
            value: log_value.exp(),
        })
    } else {
        let loss = exponent.exp();
        Ok(ExpCe {
            loss,
            log_domain: false,
            log_value,
            value: log_value.exp(),
        })
    }
}

/// Cross-modal alignment constraint: temperature-softened KL divergence
/// between structural and contextual features, softmax over the feature
/// axis per position, mean over unmasked positions. The contextual side
/// is the teacher and never receives gradients.
pub fn cac_loss<F: Scalar>(
    z_struc: &Tensor<F>,
    z_seq: &Tensor<F>,
    mask: &[bool],
    cfg: &LossConfig,
) -> Result<Tensor<F>> {
    cfg.validate()?;
    if z_struc.nrows() != z_seq.nrows() || z_struc.ncols() != z_seq.ncols() {
        return Err(Error::Shape(format!(
            "alignment inputs disagree: {}x{} vs {}x{}",
            z_struc.nrows(),
            z_struc.ncols(),
            z_seq.nrows(),
            z_seq.ncols()
        )));
    }
    if z_struc.nrows() != mask.len() {
        return Err(Error::Shape("mask length mismatch".into()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Training("all positions are masked".into()));
    }
    let inv_t = F::of_f64(1.0 / cfg.distill_temperature);
    let struc_lp = z_struc.scale(inv_t).log_softmax_rows();
    // Teacher stops back-propagating gradients.
    let seq_lp = z_seq.detach().scale(inv_t).log_softmax_rows();
    let row_kl = match cfg.cac_direction {
        CacDirection::StructToContext => {
            let p = struc_lp.exp();
            p.mul(&struc_lp.sub(&seq_lp)).sum_cols()
        }
        CacDirection::ContextToStruct => {
            let p = seq_lp.exp();
            p.mul(&seq_lp.sub(&struc_lp)).sum_cols()
        }
    };
    let masked = row_kl.mul(&mask_column(mask));
    let mut loss = masked.sum_all().scale(F::one() / F::of_f64(count as f64));
    if cfg.cac_t2_scaling {
        loss = loss.scale(F::of_f64(cfg.distill_temperature * cfg.distill_temperature));
    }
    Ok(loss)
}

/// Final objective: primary exponential cross-entropy plus the weighted
/// auxiliary alignment term.
pub fn total_loss<F: Scalar>(expce: &Tensor<F>, cac: &Tensor<F>, lambda: f64) -> Result<Tensor<F>> {
    let (e, c) = (expce.item().into_f64(), cac.item().into_f64());
    if !e.is_finite() || !c.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss components: expce={e}, cac={c}"
        )));
    }
    Ok(expce.add(&cac.scale(F::of_f64(lambda))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_rel_err, ParamSlot};
    use ndarray::{array, Array2};

    const LN20: f64 = 2.995732273553991;

    fn uniform_logits(n: usize, m: usize) -> Tensor<f64> {
        Tensor::constant(Array2::zeros((n, m)))
    }

    #[test]
    fn uniform_logits_give_ln_20() {
        let logits = uniform_logits(7, 20);
        let native = vec![3usize; 7];
        let mask = vec![true; 7];
        let ce = seq_ce(&logits, &native, &mask).unwrap().item();
        assert!((ce - LN20).abs() < 1e-12, "{ce}");
    }

    #[test]
    fn one_hot_margin_gives_zero() {
        let n = 5;
        let mut logits = Array2::<f64>::zeros((n, 20));
        let native: Vec<usize> = (0..n).map(|i| (i * 3) % 20).collect();
        for (i, &t) in native.iter().enumerate() {
            logits[(i, t)] = 200.0;
        }
        let ce = seq_ce(&Tensor::constant(logits), &native, &vec![true; n])
            .unwrap()
            .item();
        assert!(ce.abs() < 1e-12, "{ce}");
    }

    #[test]
    fn seq_ce_matches_scalar_loop_oracle() {
        use rand::Rng as _;
        let mut rng = crate::rng::derive_rng(7, "obj/ce");
        let n = 4;
        let m = 6;
        let logits = Array2::from_shape_fn((n, m), |_| rng.gen_range(-2.0..2.0));
        let native: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
        let mask = vec![true, false, true, true];
        let got = seq_ce(&Tensor::constant(logits.clone()), &native, &mask)
            .unwrap()
            .item();
        // independent scalar loop
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let row: Vec<f64> = logits.row(i).to_vec();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let logp = row[native[i]] - max - z.ln();
            total -= logp;
            count += 1;
        }
        let expect = total / count as f64;
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn all_masked_is_error() {
        let logits = uniform_logits(3, 20);
        let err = seq_ce(&logits, &[0, 1, 2], &[false, false, false]);
        assert!(matches!(err, Err(Error::Training(_))));
    }

    #[test]
    fn exp_ce_of_zero_ce_is_one() {
        let n = 4;
        let mut logits = Array2::<f64>::zeros((n, 20));
        for i in 0..n {
            logits[(i, 2)] = 300.0;
        }
        let logits = Tensor::<f64>::constant(logits);
        let native = vec![2usize; n];
        let mask = vec![true; n];
        for mode in [ExpCeMode::PaperSum, ExpCeMode::StableMean] {
            let out = exp_ce(
                &[BatchTargets {
                    logits: &logits,
                    native: &native,
                    mask: &mask,
                }],
                mode,
            )
            .unwrap();
            assert!(!out.log_domain);
            assert!((out.value - 1.0).abs() < 1e-12);
            assert!((out.loss.item() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_ce_stable_mean_of_uniform_is_twenty() {
        let logits1 = uniform_logits(3, 20);
        let logits2 = uniform_logits(5, 20);
        let out = exp_ce(
            &[
                BatchTargets {
                    logits: &logits1,
                    native: &[0, 1, 2],
                    mask: &[true; 3],
                },
                BatchTargets {
                    logits: &logits2,
                    native: &[4, 5, 6, 7, 8],
                    mask: &[true; 5],
                },
            ],
            ExpCeMode::StableMean,
        )
        .unwrap();
        assert!((out.value - 20.0).abs() < 1e-9, "{}", out.value);
    }

    #[test]
    fn exp_ce_paper_sum_matches_log_domain_oracle() {
        use rand::Rng as _;
        let mut rng = crate::rng::derive_rng(11, "obj/expce");
        let make = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
            Array2::from_shape_fn((n, 8), |_| rng.gen_range(-1.0..1.0))
        };
        let l1 = Tensor::constant(make(&mut rng, 3));
        let l2 = Tensor::constant(make(&mut rng, 4));
        let native1 = vec![1, 3, 5];
        let native2 = vec![0, 2, 4, 6];
        let out = exp_ce(
            &[
                BatchTargets {
                    logits: &l1,
                    native: &native1,
                    mask: &[true; 3],
                },
                BatchTargets {
                    logits: &l2,
                    native: &native2,
                    mask: &[true; 4],
                },
            ],
            ExpCeMode::PaperSum,
        )
        .unwrap();
        // Oracle: scalar-loop per-record mean CE, summed, in log domain.
        let ce = |l: &Tensor<f64>, nat: &[usize]| -> f64 {
            let mut total = 0.0;
            for (i, &t) in nat.iter().enumerate() {
                let row: Vec<f64> = l.data().row(i).to_vec();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                total -= row[t] - max - z.ln();
            }
            total / nat.len() as f64
        };
        let expect_log = ce(&l1, &native1) + ce(&l2, &native2);
        assert!((out.log_value - expect_log).abs() < 1e-8);
        assert!((out.value - expect_log.exp()).abs() < 1e-8);
    }

    #[test]
    fn exp_ce_paper_sum_overflow_goes_log_domain() {
        // 60 records of uniform CE ~ 3.0 sums to ~180 > ln(f32::MAX)/2.
        let logits = uniform_logits(4, 20);
        let native = vec![0usize; 4];
        let mask = vec![true; 4];
        let logits32 = Tensor::<f32>::constant(Array2::zeros((4, 20)));
        let batch: Vec<BatchTargets<f32>> = (0..60)
            .map(|_| BatchTargets {
                logits: &logits32,
                native: &native,
                mask: &mask,
            })
            .collect();
        let out = exp_ce(&batch, ExpCeMode::PaperSum).unwrap();
        assert!(out.log_domain);
        assert!((out.log_value - 60.0 * LN20).abs() < 1e-3);
        // f64 with the same batch stays in the linear domain.
        let batch64: Vec<BatchTargets<f64>> = (0..60)
            .map(|_| BatchTargets {
                logits: &logits,
                native: &native,
                mask: &mask,
            })
            .collect();
        let out64 = exp_ce(&batch64, ExpCeMode::PaperSum).unwrap();
        assert!(!out64.log_domain);
    }

    #[test]
    fn cac_of_identical_inputs_is_zero() {
        let z = Tensor::<f64>::constant(array![[1.0, -0.5, 2.0], [0.3, 0.3, 0.3]]);
        let cfg = LossConfig::default();
        let loss = cac_loss(&z, &z.clone(), &[true, true], &cfg)
            .unwrap()
            .item();
        assert!(loss.abs() < 1e-14);
    }

    #[test]
    fn cac_is_non_negative() {
        use rand::Rng as _;
        let mut rng = crate::rng::derive_rng(13, "obj/cacpos");
        let cfg = LossConfig::default();
        for _ in 0..50 {
            let a = Tensor::constant(Array2::from_shape_fn((4, 6), |_| rng.gen_range(-3.0..3.0)));
            let b = Tensor::constant(Array2::from_shape_fn((4, 6), |_| rng.gen_range(-3.0..3.0)));
            let loss = cac_loss(&a, &b, &[true; 4], &cfg).unwrap().item();
            assert!(loss >= 0.0, "negative KL {loss}");
        }
    }

    #[test]
    fn cac_matches_scalar_kl_oracle() {
        // 1x3 features (1,2,3) vs (3,2,1) at T=8.
        let a = Tensor::constant(array![[1.0, 2.0, 3.0]]);
        let b = Tensor::constant(array![[3.0, 2.0, 1.0]]);
        let cfg = LossConfig::default();
        let got = cac_loss(&a, &b, &[true], &cfg).unwrap().item();
        // independent oracle: direct sum p ln(p/q)
        let t = 8.0;
        let softmax = |v: [f64; 3]| -> [f64; 3] {
            let e: Vec<f64> = v.iter().map(|x| (x / t).exp()).collect();
            let s: f64 = e.iter().sum();
            [e[0] / s, e[1] / s, e[2] / s]
        };
        let p = softmax([1.0, 2.0, 3.0]);
        let q = softmax([3.0, 2.0, 1.0]);
        let expect: f64 = (0..3).map(|i| p[i] * (p[i] / q[i]).ln()).sum();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn cac_shift_invariant_per_position() {
        let a = Tensor::<f64>::constant(array![[1.0, -0.5, 2.0], [0.3, 0.9, -0.1]]);
        let b = Tensor::constant(array![[0.2, 0.4, -1.0], [1.4, 0.0, 0.5]]);
        let cfg = LossConfig::default();
        let base = cac_loss(&a, &b, &[true, true], &cfg).unwrap().item();
        let shift = Tensor::constant(array![[5.0, 5.0, 5.0], [-2.0, -2.0, -2.0]]);
        let shifted = cac_loss(&a.add(&shift), &b.add(&shift), &[true, true], &cfg)
            .unwrap()
            .item();
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn cac_vanishes_at_high_temperature() {
        let a = Tensor::<f64>::constant(array![[1.0, 2.0, 3.0]]);
        let b = Tensor::constant(array![[3.0, 2.0, 1.0]]);
        let cfg = LossConfig {
            distill_temperature: 1e6,
            ..Default::default()
        };
        let loss = cac_loss(&a, &b, &[true], &cfg).unwrap().item();
        assert!(loss.abs() < 1e-9, "{loss}");
    }

    #[test]
    fn cac_dimension_mismatch_is_error() {
        let a = Tensor::<f64>::constant(Array2::zeros((2, 3)));
        let b = Tensor::<f64>::constant(Array2::zeros((2, 4)));
        let err = cac_loss(&a, &b, &[true, true], &LossConfig::default());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn cac_teacher_gets_no_gradient_student_does() {
        let student = ParamSlot::new("s", array![[1.0, 2.0, 3.0]]);
        let teacher = ParamSlot::new("t", array![[3.0, 2.0, 1.0]]);
        let cfg = LossConfig::default();
        let loss = cac_loss(&student.leaf(), &teacher.leaf(), &[true], &cfg).unwrap();
        loss.backward();
        assert!(
            teacher.grad().iter().all(|&g| g == 0.0),
            "teacher gradient leaked"
        );
        assert!(
            student.grad().iter().any(|&g| g != 0.0),
            "student gradient missing"
        );
    }

    #[test]
    fn total_loss_arithmetic() {
        let e = Tensor::constant(array![[1.0]]);
        let c = Tensor::constant(array![[0.5]]);
        assert_eq!(total_loss(&e, &c, 1.0).unwrap().item(), 1.5);
        assert_eq!(total_loss(&e, &c, 0.0).unwrap().item(), 1.0);
        let zero = Tensor::constant(array![[0.0]]);
        assert_eq!(total_loss(&e, &zero, 1.0).unwrap().item(), 1.0);
        let bad = Tensor::constant(array![[f64::NAN]]);
        assert!(matches!(total_loss(&e, &bad, 1.0), Err(Error::Training(_))));
    }

    /// Quick analytic-vs-finite-difference check on a toy linear model;
    /// the acceptance suite runs the full version.
    #[test]
    fn losses_gradients_match_finite_differences() {
        use rand::Rng as _;
        let mut rng = crate::rng::derive_rng(17, "obj/grad");
        let x = Tensor::constant(Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0)));
        let w = ParamSlot::new(
            "w",
            Array2::from_shape_fn((4, 5), |_| rng.gen_range(-0.6..0.6)),
        );
        let native = vec![0usize, 2, 4];
        let mask = vec![true, true, false];

        // seq_ce
        let run_ce =
            |w: &crate::tensor::Param<f64>| seq_ce(&x.matmul(&w.leaf()), &native, &mask).unwrap();
        w.zero_grad();
        run_ce(&w).backward();
        let fd = finite_diff_grad(&w, 1e-6, || run_ce(&w).item());
        assert!(max_rel_err(&w.grad(), &fd) < 1e-7);

        // exp_ce both modes
        for mode in [ExpCeMode::PaperSum, ExpCeMode::StableMean] {
            let run = |w: &crate::tensor::Param<f64>| {
                let logits = x.matmul(&w.leaf());
                exp_ce(
                    &[BatchTargets {
                        logits: &logits,
                        native: &native,
                        mask: &mask,
                    }],
                    mode,
                )
                .unwrap()
                .loss
            };
            w.zero_grad();
            run(&w).backward();
            let fd = finite_diff_grad(&w, 1e-6, || run(&w).item());
            assert!(max_rel_err(&w.grad(), &fd) < 1e-6, "mode {mode:?}");
        }

        // cac (student side only; the teacher is detached by design so a
        // finite-difference probe of teacher weights measures a path the
        // analytic gradient deliberately ignores)
        let teacher = Tensor::constant(Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0)));
        let cfg = LossConfig::default();
        let run_cac = |w: &crate::tensor::Param<f64>| {
            cac_loss(&x.matmul(&w.leaf()), &teacher, &mask, &cfg).unwrap()
        };
        w.zero_grad();
        run_cac(&w).backward();
        let fd = finite_diff_grad(&w, 1e-6, || run_cac(&w).item());
        assert!(max_rel_err(&w.grad(), &fd) < 1e-6);
    }
}
