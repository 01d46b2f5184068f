//! Property tests for the numeric kernels and covariate coding.

use std::collections::BTreeMap;

use gofnet::graph::{
    code_covariates, CodingOptions, ColumnKind, DescriptorColumn, NodeDescriptorTable,
};
use gofnet::math::{lambda, log_logistic, log_sum_exp, logistic, logit};
use gofnet::model_select::model_posterior;
use proptest::prelude::*;

proptest! {
    /// The quadratic bound never exceeds the log-logistic function, at any
    /// curvature point.
    #[test]
    fn quadratic_bound_holds(x in -30.0f64..30.0, xi in 1e-8f64..30.0) {
        let bound = log_logistic(xi) + (x - xi) / 2.0
            - lambda(xi).unwrap() * (x * x - xi * xi);
        prop_assert!(log_logistic(x) >= bound - 1e-12);
    }

    /// lambda is positive, bounded by its limit at zero, and decreasing.
    #[test]
    fn lambda_range(xi in 0.0f64..100.0, delta in 1e-6f64..10.0) {
        let l = lambda(xi).unwrap();
        prop_assert!(l > 0.0 && l <= 0.125);
        prop_assert!(lambda(xi + delta).unwrap() <= l + 1e-15);
    }

    /// logit inverts the logistic function where 1 - g(x) stays well
    /// above the double-precision ulp of 1.
    #[test]
    fn logit_inverts_logistic(x in -15.0f64..15.0) {
        prop_assert!((logit(logistic(x)) - x).abs() < 1e-6 * (1.0 + x.abs()));
    }

    /// log_sum_exp is invariant to factoring out a constant.
    #[test]
    fn log_sum_exp_shift(
        values in prop::collection::vec(-500.0f64..500.0, 1..8),
        shift in -500.0f64..500.0,
    ) {
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let a = log_sum_exp(&values);
        let b = log_sum_exp(&shifted) - shift;
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    /// The model posterior is a shift-invariant probability vector.
    #[test]
    fn posterior_is_shift_invariant_distribution(
        bounds in prop::collection::vec(-600.0f64..600.0, 1..6),
        shift in -800.0f64..800.0,
    ) {
        let k = bounds.len();
        let prior = vec![1.0 / k as f64; k];
        let as_map = |values: &[f64]| -> BTreeMap<usize, f64> {
            values.iter().enumerate().map(|(i, &b)| (i + 1, b)).collect()
        };
        let shifted: Vec<f64> = bounds.iter().map(|b| b + shift).collect();
        let a = model_posterior(&as_map(&bounds), &prior).unwrap();
        let b = model_posterior(&as_map(&shifted), &prior).unwrap();
        let total: f64 = a.values().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for key in a.keys() {
            prop_assert!((a[key] - b[key]).abs() < 1e-9);
        }
    }

    /// Coding node descriptors always yields a symmetric tensor of the
    /// declared width.
    #[test]
    fn coded_covariates_are_symmetric(
        quant in prop::collection::vec(-5.0f64..5.0, 4),
        ordinal in prop::collection::vec(1usize..=3, 4),
        qual in prop::collection::vec(0usize..2, 4),
    ) {
        let table = NodeDescriptorTable::new(4, vec![
            DescriptorColumn {
                name: "age".into(),
                kind: ColumnKind::Quantitative,
                values: quant.iter().map(|v| Some(v.to_string())).collect(),
            },
            DescriptorColumn {
                name: "grade".into(),
                kind: ColumnKind::Ordinal { levels: 3 },
                values: ordinal.iter().map(|v| Some(v.to_string())).collect(),
            },
            DescriptorColumn {
                name: "side".into(),
                kind: ColumnKind::Qualitative {
                    levels: vec!["a".into(), "b".into()],
                },
                values: qual.iter().map(|&v| Some(["a", "b"][v].to_string())).collect(),
            },
        ]).unwrap();
        let tensor = code_covariates(&table, None, CodingOptions::default()).unwrap();
        // quantitative 1 + ordinal (3 - 1) + qualitative 2 * 2
        prop_assert_eq!(tensor.d(), 1 + 2 + 4);
        prop_assert!(tensor.is_symmetric());
        // the quantitative column is a nonnegative distance
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    prop_assert!(tensor.get(i, j)[0] >= 0.0);
                }
            }
        }
    }
}
