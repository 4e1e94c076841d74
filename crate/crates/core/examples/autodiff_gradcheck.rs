//! A two-layer classifier built on the tape, checked against central
//! differences before a few SGD steps.

use geofed::numerics::{grad_check, Param, SeededRng, Tape};

fn main() -> geofed::Result<()> {
    let mut rng = SeededRng::new(7);
    let x = rng.gaussian_matrix(16, 6, 1.0);
    let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
    let mut params = vec![
        Param::trainable(rng.gaussian_matrix(6, 10, 0.4)),
        Param::trainable(rng.gaussian_matrix(10, 3, 0.4)),
    ];

    let loss = |tape: &mut Tape, vars: &[geofed::numerics::Var]| {
        let xv = tape.constant(x.clone());
        let h = tape.matmul(xv, vars[0])?;
        let h = tape.gelu(h)?;
        let logits = tape.matmul(h, vars[1])?;
        tape.softmax_cross_entropy(logits, &labels)
    };

    let report = grad_check(loss, &mut params, 1e-5, 1e-6)?;
    println!(
        "gradcheck: {} coordinates, max relative error {:.2e}, passed = {}",
        report.checked,
        report.max_rel_error,
        report.passed()
    );

    for step in 0..50 {
        let mut tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| p.register(&mut tape)).collect();
        let out = loss(&mut tape, &vars)?;
        if step % 10 == 0 {
            println!("step {step:>2}  loss {:.4}", tape.scalar(out));
        }
        let grads = tape.backward(out)?;
        for (p, v) in params.iter_mut().zip(&vars) {
            p.grad = grads.get_or_zeros(*v, p.shape());
            p.sgd_step(0.5)?;
        }
    }
    Ok(())
}
