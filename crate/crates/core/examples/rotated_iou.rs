// Overlap of oriented boxes in bird's-eye view and in 3D.

use featureflow::geometry::{bev_iou, iou_3d, Box3D};

pub fn run_example() -> featureflow::Result<()> {
    let square = Box3D::new([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0, 0);
    let turned = Box3D {
        yaw: std::f64::consts::FRAC_PI_4,
        ..square
    };
    let raised = Box3D { cz: 1.0, ..square };
    let car = Box3D::new([10.0, 2.0, -0.9], [1.8, 4.5, 1.5], 0.3, 0);
    let shifted = Box3D { cx: 11.0, ..car };

    println!("square vs 45deg square   bev {:.4}", bev_iou(&square, &turned)?);
    println!("square vs raised square  3d  {:.4}", iou_3d(&square, &raised)?);
    println!(
        "car vs car moved 1 m     bev {:.4}  3d {:.4}",
        bev_iou(&car, &shifted)?,
        iou_3d(&car, &shifted)?
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> featureflow::Result<()> {
    run_example()
}
