use std::process::Command;

use mcncl::commands;
use mcncl::RunConfig;
use mcncl_core::gradcheck::grad_check;
use mcncl_core::tape::CustomOp;
use mcncl_core::{ParamStore, Tape, Tensor};

/// Elementwise `x²` whose backward rule is scaled by `factor`; 1.0 is correct.
struct Square {
    factor: f64,
}

impl CustomOp for Square {
    fn name(&self) -> &'static str {
        "square"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(grad_out)
            .map(|(x, g)| self.factor * 2.0 * x * g)
            .collect();
        vec![g]
    }
}

fn check_square(factor: f64) -> mcncl_core::gradcheck::GradCheckReport {
    let mut store = ParamStore::new();
    store.add("w", Tensor::vector(vec![0.1, -0.2, 2.0]));
    grad_check(&mut store, 1e-6, 1e-4, |t: &mut Tape| {
        let w = t.param_vars()[0];
        let x = t.value(w).clone();
        let sq = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect())?;
        let y = t.custom(&[w], sq, Box::new(Square { factor }));
        Ok(t.sum(y))
    })
    .unwrap()
}

#[test]
fn correct_custom_rule_passes() {
    assert!(check_square(1.0).passed());
}

#[test]
fn doubled_gradient_is_detected() {
    let r = check_square(2.0);
    assert!(!r.passed());
    // relative errors 0.2, 0.4 and 0.5; w[2] has tape 8 against 4
    assert_eq!(r.worst, "w[2]");
    assert!((r.max_rel_err - 0.5).abs() < 1e-6, "{}", r.max_rel_err);
}

#[test]
fn slightly_wrong_gradient_is_detected() {
    assert!(!check_square(1.001).passed());
}

#[test]
fn failing_suite_is_a_numerical_error() {
    let e = commands::gradcheck(&RunConfig::tiny(), 1e-6, 1e-30, &mut std::io::sink()).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn failing_cli_check_exits_2() {
    let o = Command::new(env!("CARGO_BIN_EXE_mcncl"))
        .args(["gradcheck", "--tolerance", "1e-30"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gradient check failed"));
}
