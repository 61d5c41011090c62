//! Finite-difference checks of every backward pass, 20 random instances each.

use gated_detect::gradcheck::*;

const INSTANCES: u64 = 20;
const TOLERANCE: f64 = 1e-5;

fn run(name: &str, f: impl Fn(u64) -> gated_detect::Result<GradCheck>) {
    let checks: Vec<GradCheck> = (0..INSTANCES).map(|seed| f(seed).unwrap()).collect();
    let worst = checks.iter().map(GradCheck::relative_error).fold(0.0, f64::max);
    let total = checks.iter().fold(GradCheck::default(), |a, b| a.merge(*b));
    println!(
        "{name}: max rel err {worst:.2e} over {} instances, {} coords ({} skipped)",
        checks.len(),
        total.checked,
        total.skipped
    );
    assert!(worst < TOLERANCE, "{name}: {worst:e}");
    assert!(checks.iter().all(|c| c.checked > 0));
    assert!(total.skipped_fraction() < 0.25, "{name}: too many kink crossings {total:?}");
}

fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, extent: usize) -> ConvCase {
    ConvCase {
        in_channels,
        out_channels,
        kernel,
        stride,
        extent,
        batch: 2,
    }
}

#[test]
fn conv_1x1_stride_1() {
    run("conv 1x1 s1", |s| check_conv(conv(3, 4, 1, 1, 5), s));
}

#[test]
fn conv_1x1_stride_2() {
    run("conv 1x1 s2", |s| check_conv(conv(2, 3, 1, 2, 6), s));
}

#[test]
fn conv_3x3_stride_1() {
    run("conv 3x3 s1", |s| check_conv(conv(2, 3, 3, 1, 5), s));
}

#[test]
fn conv_3x3_stride_2() {
    run("conv 3x3 s2 even", |s| check_conv(conv(2, 3, 3, 2, 6), s));
    run("conv 3x3 s2 odd", |s| check_conv(conv(2, 2, 3, 2, 7), s));
}

#[test]
fn relu() {
    run("relu", |s| check_relu(64, s));
}

#[test]
fn sigmoid() {
    run("sigmoid", |s| check_sigmoid(64, s));
}

#[test]
fn focal_loss() {
    run("focal", |s| check_focal(64, s));
}

#[test]
fn smooth_l1() {
    run("smooth-l1", |s| check_smooth_l1(64, s));
}

#[test]
fn objectness_loss_through_sigmoid() {
    run("oan loss", |s| check_oan_loss(4, s));
}

#[test]
fn objectness_head_every_geometry() {
    run("oan head S", |s| check_oan_head(4, 4, s));
    run("oan head 2S", |s| check_oan_head(8, 4, s));
    run("oan head 4S", |s| check_oan_head(8, 2, s));
}

#[test]
fn detector_head() {
    run("det head", |s| check_det_head(4, s));
}

#[test]
fn total_loss_through_model() {
    run("total", check_total_loss);
}
