//! Self-consistency experiments for the fan-beam projector and FBP.

use polyct_core::projector::{build_system_matrix, fbp, FanBeamGeometry, FbpFilter};
use polyct_core::Image;

fn disk_image(n: usize, r: f64) -> Image {
    let mut img = Image::zeros(n);
    let half = n as f64 / 2.0;
    for row in 0..n {
        for col in 0..n {
            let x = col as f64 + 0.5 - half;
            let y = (n - 1 - row) as f64 + 0.5 - half;
            if x * x + y * y <= r * r {
                img.set(row, col, 1.0);
            }
        }
    }
    img
}

fn rse(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - (dot / (na * nb)).powi(2)
}

#[test]
fn fbp_recovers_disk_phantom() {
    let n = 64;
    let geom = FanBeamGeometry::equispaced(n, 3.0 * n as f64, 2 * n, 0.6, 360).unwrap();
    let phi = build_system_matrix(&geom).unwrap();
    let truth = disk_image(n, n as f64 / 4.0);
    let y = phi.project(truth.as_slice()).unwrap();
    let recon = fbp(&y, &geom, FbpFilter::Hann).unwrap();
    let err = rse(recon.as_slice(), truth.as_slice());
    assert!(err <= 0.02, "disk RSE = {err:.4}");
    // Amplitude should be close to the true density, not just proportional.
    let center = recon.get(n / 2, n / 2);
    assert!((center - 1.0).abs() < 0.12, "central value {center:.4}");
}

#[test]
fn fbp_rotation_covariance() {
    let n = 48;
    // Off-center two-blob phantom.
    let mut img = Image::zeros(n);
    let half = n as f64 / 2.0;
    for row in 0..n {
        for col in 0..n {
            let x = col as f64 + 0.5 - half;
            let y = (n - 1 - row) as f64 + 0.5 - half;
            let d1 = ((x - 6.0).powi(2) + y.powi(2)).sqrt();
            let d2 = (x.powi(2) + (y + 8.0).powi(2)).sqrt();
            if d1 < 5.0 {
                img.set(row, col, 1.0);
            } else if d2 < 4.0 {
                img.set(row, col, 0.6);
            }
        }
    }
    let angles = 240;
    let geom = FanBeamGeometry::equispaced(n, 3.0 * n as f64, 2 * n, 0.6, angles).unwrap();
    let phi = build_system_matrix(&geom).unwrap();
    let y = phi.project(img.as_slice()).unwrap();
    let recon = fbp(&y, &geom, FbpFilter::Hann).unwrap();

    // Rotate the image by 90 degrees (x,y) -> (-y,x) and rotate the angle set
    // correspondingly; the reconstruction should rotate with them.
    let mut rot = Image::zeros(n);
    for row in 0..n {
        for col in 0..n {
            // (row,col) of the rotated image takes the value of the source
            // pixel rotated back by 90 degrees.
            let src_row = n - 1 - col;
            let src_col = row;
            rot.set(row, col, img.get(src_row, src_col));
        }
    }
    let mut geom_rot = geom.clone();
    geom_rot.angles_deg = geom.angles_deg.iter().map(|a| (a + 90.0) % 360.0).collect();
    let phi_rot = build_system_matrix(&geom_rot).unwrap();
    let y_rot = phi_rot.project(rot.as_slice()).unwrap();
    let recon_rot = fbp(&y_rot, &geom_rot, FbpFilter::Hann).unwrap();

    let mut recon_expected = Image::zeros(n);
    for row in 0..n {
        for col in 0..n {
            let src_row = n - 1 - col;
            let src_col = row;
            recon_expected.set(row, col, recon.get(src_row, src_col));
        }
    }
    let err = rse(recon_rot.as_slice(), recon_expected.as_slice());
    assert!(err <= 0.05, "rotation covariance RSE = {err:.4}");
}
