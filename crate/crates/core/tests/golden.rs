//! Byte-exact packet fixtures. Regenerate with `FEATUREFLOW_BLESS=1 cargo test --test golden`.

use std::path::PathBuf;

use featureflow::codec::{decode_packet, encode_packet, BitMask, PacketOptions, HEADER_LEN};
use featureflow::featurizer::{FeatureGrid, GridConfig};
use featureflow::flow::FeatureFlow;
use featureflow::geometry::Pose2;

fn grid(c: usize, h: usize, w: usize) -> GridConfig {
    GridConfig {
        x_range: (0.0, w as f64),
        y_range: (0.0, h as f64),
        z_range: (-3.0, 1.0),
        cell: 1.0,
        channels: c,
    }
}

fn flow() -> FeatureFlow {
    let g = grid(2, 4, 4);
    let base = (0..32).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
    let deriv = (0..32).map(|i| (i as f32 * 0.11).cos() - 0.2).collect();
    FeatureFlow::new(
        FeatureGrid::from_data(g, base).unwrap(),
        FeatureGrid::from_data(g, deriv).unwrap(),
        1_234_567,
    )
    .unwrap()
}

fn cases() -> Vec<(&'static str, PacketOptions)> {
    let mut checker = BitMask::zeros(2, 2);
    checker.set(0, 0, true);
    checker.set(1, 1, true);
    vec![
        (
            "flow_b6.bin",
            PacketOptions {
                bits: Some(6),
                mask: None,
                include_derivative: true,
            },
        ),
        (
            "flow_b6_masked.bin",
            PacketOptions {
                bits: Some(6),
                mask: Some(checker),
                include_derivative: true,
            },
        ),
        (
            "flow_raw.bin",
            PacketOptions {
                bits: None,
                mask: None,
                include_derivative: true,
            },
        ),
        (
            "base_b4.bin",
            PacketOptions {
                bits: Some(4),
                mask: None,
                include_derivative: false,
            },
        ),
    ]
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

#[test]
fn packets_match_fixtures() {
    let pose = Pose2::new(1.5, -2.25, 0.5);
    let bless = std::env::var_os("FEATUREFLOW_BLESS").is_some();
    for (name, opts) in cases() {
        let packet = encode_packet(&flow(), &pose, &opts).unwrap();
        let path = data_dir().join(name);
        if bless {
            std::fs::write(&path, &packet.bytes).unwrap();
        }
        let golden = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(packet.bytes, golden, "{name}");
        assert_eq!(packet.ab_bytes, golden.len() - HEADER_LEN, "{name}");
        let decoded = decode_packet(&golden).unwrap();
        assert_eq!(decoded.header.t_ref_us, 1_234_567);
        assert_eq!(decoded.header.dims, (2, 4, 4));
        assert_eq!(decoded.header.pose, [1.5, -2.25, 0.0, 0.5]);
    }
}

#[test]
fn hand_packed_base_packet() {
    let g = grid(1, 1, 4);
    let base = FeatureGrid::from_data(g, vec![-1.0, 0.5, 1.0, 0.25]).unwrap();
    let flow = FeatureFlow::stationary(base, 0x0102_0304_0506_0708);
    let opts = PacketOptions {
        bits: Some(6),
        mask: None,
        include_derivative: false,
    };
    let bytes = encode_packet(&flow, &Pose2::new(2.0, -1.0, 0.25), &opts).unwrap().bytes;

    let mut expected = b"FFLW".to_vec();
    expected.push(1); // version
    expected.push(0b001); // quantized, no mask, no derivative
    expected.extend_from_slice(&[0x08, 0x07, 0x06, 0x05, 0x04, 0x03, 0x02, 0x01]);
    for v in [2.0f32, -1.0, 0.0, 0.25] {
        expected.extend_from_slice(&v.to_le_bytes());
    }
    expected.extend_from_slice(&[1, 0, 1, 0, 4, 0]);
    expected.push(6);
    expected.push(bytes[HEADER_LEN - 1]);
    assert_eq!(expected.len(), HEADER_LEN);
    expected.extend_from_slice(&(1.0f32 / 31.0).to_le_bytes());
    // codes -31, 16, 31, 8 as 6-bit two's complement:
    // 100001 010000 011111 001000
    expected.extend_from_slice(&[0x85, 0x07, 0xC8]);
    assert_eq!(bytes, expected);
}

#[test]
fn truncated_or_corrupt_packets_are_rejected() {
    let golden = std::fs::read(data_dir().join("flow_b6_masked.bin")).unwrap();
    for cut in [0, 3, HEADER_LEN - 1, HEADER_LEN, golden.len() - 1] {
        assert!(decode_packet(&golden[..cut]).is_err(), "cut at {cut}");
    }
    let mut bad_magic = golden.clone();
    bad_magic[0] = b'X';
    assert!(decode_packet(&bad_magic).is_err());
    let mut trailing = golden;
    trailing.push(0);
    assert!(decode_packet(&trailing).is_err());
}
