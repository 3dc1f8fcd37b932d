// Quantize, mask, pack and decode a feature-flow packet.

use featureflow::codec::{
    attention_mask, decode_packet, encode_packet, transmission_cost, PacketOptions, TransmissionForm,
};
use featureflow::featurizer::{FeatureGrid, GridConfig};
use featureflow::flow::FeatureFlow;
use featureflow::geometry::Pose2;
use rand::{Rng, SeedableRng};

pub fn run_example() -> featureflow::Result<()> {
    let grid = GridConfig {
        x_range: (0.0, 36.0),
        y_range: (-18.0, 18.0),
        z_range: (-3.0, 1.0),
        cell: 1.0,
        channels: 12,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let n = 12 * 36 * 36;
    let mut random = |scale: f32| FeatureGrid::from_data(grid, (0..n).map(|_| rng.gen_range(-scale..scale)).collect());
    let prev = random(1.0)?;
    let curr = random(1.0)?;
    let deriv = random(4.0)?;
    let flow = FeatureFlow::new(curr.clone(), deriv, 1_000_000)?;
    let pose = Pose2::new(3.0, -2.0, 0.1);

    let plain = PacketOptions {
        bits: Some(6),
        mask: None,
        include_derivative: true,
    };
    let packet = encode_packet(&flow, &pose, &plain)?;
    println!("b=6 unmasked flow packet: {} payload bytes", packet.ab_bytes);
    println!(
        "accounting formula:       {} bytes (+8 for the two scales)",
        transmission_cost(TransmissionForm::MiddleFlow {
            dims: (12, 36, 36),
            bits: Some(6)
        })
    );

    let mut mask = attention_mask(&prev, &curr, (9, 9), 0.0)?;
    for k in 0..9 {
        for l in 0..9 {
            mask.set(k, l, (k + l) % 3 == 0);
        }
    }
    let masked = encode_packet(
        &flow,
        &pose,
        &PacketOptions {
            mask: Some(mask),
            ..plain
        },
    )?;
    println!("same flow, one patch in three: {} payload bytes", masked.ab_bytes);

    let decoded = decode_packet(&masked.bytes)?;
    println!(
        "decoded header: t_ref {} us, dims {:?}, {} bits, pose ({:.2}, {:.2}, {:.2})",
        decoded.header.t_ref_us,
        decoded.header.dims,
        decoded.header.bits,
        decoded.header.pose2().x,
        decoded.header.pose2().y,
        decoded.header.pose2().yaw
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> featureflow::Result<()> {
    run_example()
}
