//! Central finite-difference checks of every hand-written backward pass, in f64.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use gated_detect::gradcheck::*;

fn report(name: &str, f: impl Fn(u64) -> gated_detect::Result<GradCheck>) -> gated_detect::Result<()> {
    let mut worst = 0.0f64;
    let mut total = GradCheck::default();
    for seed in 0..20 {
        let c = f(seed)?;
        worst = worst.max(c.relative_error());
        total = total.merge(c);
    }
    println!(
        "{name:<12} worst relative error {worst:.2e}  ({} coordinates, {} skipped at kinks)",
        total.checked, total.skipped
    );
    Ok(())
}

fn main() -> gated_detect::Result<()> {
    let conv = |kernel, stride| ConvCase {
        in_channels: 2,
        out_channels: 3,
        kernel,
        stride,
        extent: 6,
        batch: 2,
    };
    report("conv 1x1 s1", |s| check_conv(conv(1, 1), s))?;
    report("conv 3x3 s1", |s| check_conv(conv(3, 1), s))?;
    report("conv 3x3 s2", |s| check_conv(conv(3, 2), s))?;
    report("relu", |s| check_relu(64, s))?;
    report("sigmoid", |s| check_sigmoid(64, s))?;
    report("focal", |s| check_focal(64, s))?;
    report("smooth-l1", |s| check_smooth_l1(64, s))?;
    report("oan loss", |s| check_oan_loss(4, s))?;
    report("oan head", |s| check_oan_head(8, 4, s))?;
    report("det head", |s| check_det_head(4, s))?;
    report("full model", check_total_loss)?;
    Ok(())
}
