//! Forward-over-reverse Hessian-vector products against the dense Hessian.

use aatrace::linalg::max_abs_diff;
use aatrace::model::{explicit_hessian, hvp, init_params, Activation, ModelSpec, Task, DEFAULT_HESSIAN_CAP};
use aatrace::scenarios::gen_gaussian_classes;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ModelSpec::new(vec![3, 6, 4, 3], Activation::Softplus, Task::Classification)?;
    let theta = init_params(&spec, 3)?;
    let batch = gen_gaussian_classes(5, 32, 3, 3, 2.0)?;
    let h = explicit_hessian(&spec, &theta, &batch, DEFAULT_HESSIAN_CAP)?;
    println!("p = {}, dense Hessian {}x{}", spec.param_count(), h.nrows(), h.ncols());

    let mut worst = 0.0f64;
    for j in (0..spec.param_count()).step_by(7) {
        let mut e = vec![0.0; spec.param_count()];
        e[j] = 1.0;
        let hv = hvp(&spec, &theta, &batch, &e)?;
        let col: Vec<f64> = h.column(j).iter().copied().collect();
        worst = worst.max(max_abs_diff(&hv, &col));
    }
    println!("max |Hv - H[:, j]| over sampled columns: {worst:.2e}");

    let eig = h.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    println!("Hessian spectrum in [{lo:.4}, {hi:.4}]");
    Ok(())
}
