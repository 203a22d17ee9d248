//! Probe the two semantic-distillation objectives against the built-in
//! deterministic teacher: the correlation-alignment loss (student-text
//! correlations pulled toward image-text correlations) and the
//! feature-similarity loss (student features pulled toward image
//! features).
//!
//! Both compare *directions*, so the example also shows they are invariant
//! to rescaling the student features and hit zero when the student copies
//! the teacher's image features exactly.
//!
//! Run with `cargo run --release --example distillation_losses`.

use ndarray::IxDyn;
use uniemo::autograd::{Array, Graph, Precision};
use uniemo::distill::{
    correlation_matrix, feature_similarity_loss, row_normalize, similarity_contrastive_loss,
    StubTeacher, Teacher,
};

fn main() -> uniemo::Result<()> {
    let (n, c3) = (4, 16);
    let teacher = StubTeacher::new(0, c3)?;

    let captions = [
        "A person smiling in a sunny park",
        "A child crying beside a broken toy",
        "Two friends laughing over coffee",
        "A commuter staring blankly out a train window",
    ]
    .map(String::from);
    let lambda = teacher.encode_text(&captions)?; // [N, C3], unit rows

    let pixels = Array::from_shape_fn(IxDyn(&[n, 8, 8, 3]), |ix| {
        ((ix[0] + 1) * (ix[1] + 2) * (ix[2] + 3) * (ix[3] + 1) % 17) as f64 / 16.0
    });
    let omega = teacher.encode_image(&pixels)?; // [N, C3], unit rows

    // A student feature matrix Υ that only roughly agrees with the teacher.
    let upsilon = Array::from_shape_fn(IxDyn(&[n, c3]), |ix| {
        omega[[ix[0], ix[1]]] + 0.3 * ((ix[0] * 11 + ix[1] * 5) % 7) as f64 / 7.0
    });

    // The same loss wiring the pretraining step uses: row-normalize, build
    // A = corr(Υ, Λ) and C = corr(Ω, Λ), then compare A with C (l2) and Υ
    // with Ω (l3).
    let loss_pair = |student: &Array, scale: f64| -> uniemo::Result<(f64, f64)> {
        let mut g = Graph::new(Precision::Double);
        let raw = g.leaf(student.clone(), false);
        let scaled = g.scale(raw, scale);
        let u = row_normalize(&mut g, scaled, false)?;
        let lam = g.leaf(lambda.clone(), false);
        let om = g.leaf(omega.clone(), false);
        let a = correlation_matrix(&mut g, u, lam, false)?;
        let c = correlation_matrix(&mut g, om, lam, false)?;
        let l2 = similarity_contrastive_loss(&mut g, a, c)?;
        let l3 = feature_similarity_loss(&mut g, u, om)?;
        Ok((g.scalar_value(l2), g.scalar_value(l3)))
    };

    let (l2, l3) = loss_pair(&upsilon, 1.0)?;
    println!("student vs teacher:        l2 = {l2:.6}  l3 = {l3:.6}");

    let (l2_up, l3_up) = loss_pair(&upsilon, 10.0)?;
    let (l2_down, l3_down) = loss_pair(&upsilon, 0.1)?;
    println!("student scaled by 10:      l2 = {l2_up:.6}  l3 = {l3_up:.6}");
    println!("student scaled by 0.1:     l2 = {l2_down:.6}  l3 = {l3_down:.6}");
    println!(
        "largest scale drift: {:.2e} (row normalization makes both losses direction-only)",
        (l2_up - l2)
            .abs()
            .max((l3_up - l3).abs())
            .max((l2_down - l2).abs())
            .max((l3_down - l3).abs())
    );

    let (l2_id, l3_id) = loss_pair(&omega, 1.0)?;
    println!("student == image teacher:  l2 = {l2_id:.6}  l3 = {l3_id:.6}");
    Ok(())
}
