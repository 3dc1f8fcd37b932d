//! Compression, quantization, attention masking and the flow packet wire
//! format, with Average-Byte accounting.
//!
//! # Flow packet layout
//!
//! All multi-byte fields are little-endian.
//!
//! | offset | size | field                                                   |
//! |--------|------|---------------------------------------------------------|
//! | 0      | 4    | magic `FFLW`                                            |
//! | 4      | 1    | version (`1`)                                           |
//! | 5      | 1    | flags: bit0 quantized, bit1 masked, bit2 derivative     |
//! | 6      | 8    | `t_ref` in µs, `u64`                                    |
//! | 14     | 16   | pose `x, y, z, yaw` as `f32`                            |
//! | 30     | 6    | dims `C, H, W` as `u16`                                 |
//! | 36     | 1    | bits per code (`32` when unquantized)                   |
//! | 37     | 1    | mask stride (`0` when unmasked)                         |
//!
//! The header is followed by the mask (if any), the feature body and the
//! derivative body (if any). A quantized body is its `f32` scale followed
//! by the bit-packed codes; an unquantized body is raw `f32` values. A
//! masked derivative body holds only the elements inside set mask patches,
//! patch by patch in row-major order and channel-major within a patch.
//!
//! Only the bytes after the header count towards the Average Byte.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{FeatureGrid, GridConfig};
use crate::flow::FeatureFlow;
use crate::geometry::{Box3D, Pose2};
use crate::scene::{Point, PointCloud};

pub const MAGIC: [u8; 4] = *b"FFLW";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 38;
pub const FLAG_QUANTIZED: u8 = 1 << 0;
pub const FLAG_MASKED: u8 = 1 << 1;
pub const FLAG_DERIVATIVE: u8 = 1 << 2;
pub const RAW_BITS: u8 = 32;
pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 16;
pub const BYTES_PER_POINT: usize = 16;
pub const BYTES_PER_BOX: usize = 32;
pub const SCALE_BYTES: usize = 4;

#[inline]
pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

#[inline]
fn max_code(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::invalid(format!(
            "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

/// Symmetric uniform quantizer with step `scale = α / (2^{b−1} − 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    pub bits: u8,
    pub scale: f32,
}

impl Quantizer {
    /// Quantizer whose clipping value is `alpha`.
    pub fn for_alpha(alpha: f32, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::invalid(format!(
                "clipping value {alpha} must be finite and >= 0"
            )));
        }
        Ok(Self {
            bits,
            scale: alpha / max_code(bits) as f32,
        })
    }

    /// Nearest code to `clamp(x, ±α) / scale`, ties to even.
    pub fn code(&self, x: f32) -> i32 {
        if self.scale == 0.0 {
            return 0;
        }
        let qmax = max_code(self.bits);
        let s = self.scale as f64;
        let x = x as f64;
        let mut q = (x / s).round_ties_even().clamp(-qmax as f64, qmax as f64) as i32;
        // the quotient is rounded once; settle near-ties on the exact residual
        let err = |q: i32| (q as f64 * s - x).abs();
        for cand in [q - 1, q + 1] {
            if cand.abs() > qmax {
                continue;
            }
            let (ec, eq) = (err(cand), err(q));
            if ec < eq || (ec == eq && cand % 2 == 0) {
                q = cand;
            }
        }
        q
    }

    /// Exact reconstruction `code · scale` in f64.
    pub fn value_f64(&self, code: i32) -> f64 {
        code as f64 * self.scale as f64
    }

    pub fn value(&self, code: i32) -> f32 {
        self.value_f64(code) as f32
    }

    /// `Q(x; α)` at full precision.
    pub fn quantize_value(&self, x: f32) -> f64 {
        self.value_f64(self.code(x))
    }
}

/// MSB-first bit writer.
#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    used: u8,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `bits` bits of `value`, most significant first.
    pub fn write(&mut self, value: u32, bits: u8) {
        for i in (0..bits).rev() {
            if self.used == 0 {
                self.bytes.push(0);
            }
            let bit = ((value >> i) & 1) as u8;
            let last = self.bytes.len() - 1;
            self.bytes[last] |= bit << (7 - self.used);
            self.used = (self.used + 1) % 8;
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

/// MSB-first bit reader over a fixed number of fields.
#[derive(Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn read(&mut self, bits: u8) -> Result<u32> {
        let mut v = 0u32;
        for _ in 0..bits {
            let byte = self
                .bytes
                .get(self.pos / 8)
                .ok_or_else(|| Error::Decode("bit stream truncated".into()))?;
            let bit = (byte >> (7 - self.pos % 8)) & 1;
            v = (v << 1) | bit as u32;
            self.pos += 1;
        }
        Ok(v)
    }

    /// Errors unless every bit after the cursor up to the byte boundary is zero
    /// and no whole bytes remain.
    pub fn finish(self) -> Result<()> {
        let total = self.bytes.len() * 8;
        if total - self.pos >= 8 {
            return Err(Error::Decode("unused bytes after bit stream".into()));
        }
        for p in self.pos..total {
            if (self.bytes[p / 8] >> (7 - p % 8)) & 1 != 0 {
                return Err(Error::Decode("nonzero padding bits".into()));
            }
        }
        Ok(())
    }
}

fn pack_codes(codes: impl Iterator<Item = i32>, bits: u8) -> Vec<u8> {
    let mask = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
    let mut w = BitWriter::new();
    for c in codes {
        w.write(c as u32 & mask, bits);
    }
    w.finish()
}

fn unpack_codes(bytes: &[u8], count: usize, bits: u8) -> Result<Vec<i32>> {
    if bytes.len() != packed_len(count, bits) {
        return Err(Error::Decode(format!(
            "expected {} packed bytes for {count} codes, got {}",
            packed_len(count, bits),
            bytes.len()
        )));
    }
    let qmax = max_code(bits);
    let mut r = BitReader::new(bytes);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = r.read(bits)?;
        // sign-extend
        let shift = 32 - bits as u32;
        let code = ((raw << shift) as i32) >> shift;
        if code.abs() > qmax {
            return Err(Error::Decode(format!("code {code} outside ±{qmax}")));
        }
        out.push(code);
    }
    r.finish()?;
    Ok(out)
}

/// Bit-packed signed codes plus their scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub dims: (usize, usize, usize),
    pub bits: u8,
    pub scale: f32,
    /// Two's complement, row-major, MSB-first, zero-padded to a byte.
    pub packed: Vec<u8>,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn quantizer(&self) -> Quantizer {
        Quantizer {
            bits: self.bits,
            scale: self.scale,
        }
    }

    pub fn codes(&self) -> Result<Vec<i32>> {
        unpack_codes(&self.packed, self.len(), self.bits)
    }

    /// Bytes on the wire: scale plus packed codes.
    pub fn wire_len(&self) -> usize {
        SCALE_BYTES + self.packed.len()
    }
}

/// Max-abs clipping value of a slice.
fn alpha_of(values: &[f32]) -> f32 {
    values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

fn check_finite(values: &[f32]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cannot quantize non-finite values"));
    }
    Ok(())
}

/// Linear `bits`-bit quantization with `α = max |t|`.
pub fn quantize(t: &FeatureGrid, bits: u8) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    check_finite(t.data())?;
    let q = Quantizer::for_alpha(alpha_of(t.data()), bits)?;
    Ok(QuantizedTensor {
        dims: t.dims(),
        bits,
        scale: q.scale,
        packed: pack_codes(t.data().iter().map(|&v| q.code(v)), bits),
    })
}

/// Values `code · scale`, row-major.
pub fn dequantize(q: &QuantizedTensor) -> Result<Vec<f32>> {
    check_bits(q.bits)?;
    let quant = q.quantizer();
    Ok(q.codes()?.into_iter().map(|c| quant.value(c)).collect())
}

pub fn dequantize_grid(q: &QuantizedTensor, grid: GridConfig) -> Result<FeatureGrid> {
    if grid.dims() != q.dims {
        return Err(Error::DimMismatch {
            expected: grid.dims(),
            actual: q.dims,
        });
    }
    FeatureGrid::from_data(grid, dequantize(q)?)
}

/// One bit per `stride × stride` patch, row-major, MSB-first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    pub hm: usize,
    pub wm: usize,
    bytes: Vec<u8>,
}

impl BitMask {
    pub fn zeros(hm: usize, wm: usize) -> Self {
        Self {
            hm,
            wm,
            bytes: vec![0; (hm * wm).div_ceil(8)],
        }
    }

    pub fn ones(hm: usize, wm: usize) -> Self {
        let mut m = Self::zeros(hm, wm);
        for k in 0..hm {
            for l in 0..wm {
                m.set(k, l, true);
            }
        }
        m
    }

    pub fn from_bytes(hm: usize, wm: usize, bytes: &[u8]) -> Result<Self> {
        let n = hm * wm;
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Decode(format!(
                "mask ({hm}, {wm}) needs {} bytes, got {}",
                n.div_ceil(8),
                bytes.len()
            )));
        }
        let mut r = BitReader::new(bytes);
        for _ in 0..n {
            r.read(1)?;
        }
        r.finish()?;
        Ok(Self {
            hm,
            wm,
            bytes: bytes.to_vec(),
        })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn byte_len(&self) -> usize {
        self.bytes.len()
    }

    #[inline]
    pub fn get(&self, k: usize, l: usize) -> bool {
        let i = k * self.wm + l;
        (self.bytes[i / 8] >> (7 - i % 8)) & 1 == 1
    }

    pub fn set(&mut self, k: usize, l: usize, on: bool) {
        let i = k * self.wm + l;
        let bit = 1u8 << (7 - i % 8);
        if on {
            self.bytes[i / 8] |= bit;
        } else {
            self.bytes[i / 8] &= !bit;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Patch stride for a `(h, w)` plane.
    pub fn stride_for(&self, h: usize, w: usize) -> Result<usize> {
        mask_stride(h, w, self.hm, self.wm)
    }
}

fn mask_stride(h: usize, w: usize, hm: usize, wm: usize) -> Result<usize> {
    if hm == 0 || wm == 0 || !h.is_multiple_of(hm) || !w.is_multiple_of(wm) || h / hm != w / wm {
        return Err(Error::invalid(format!(
            "mask ({hm}, {wm}) does not tile a ({h}, {w}) plane with a square stride"
        )));
    }
    Ok(h / hm)
}

/// Marks the patches whose summed absolute change across all channels is
/// strictly greater than `threshold`.
pub fn attention_mask(
    f_prev: &FeatureGrid,
    f_curr: &FeatureGrid,
    mask_dims: (usize, usize),
    threshold: f64,
) -> Result<BitMask> {
    f_prev.ensure_same_dims(f_curr)?;
    let (c_n, h, w) = f_curr.dims();
    let stride = mask_stride(h, w, mask_dims.0, mask_dims.1)?;
    let mut mask = BitMask::zeros(mask_dims.0, mask_dims.1);
    for k in 0..mask_dims.0 {
        for l in 0..mask_dims.1 {
            let mut sum = 0.0f64;
            for c in 0..c_n {
                for y in k * stride..(k + 1) * stride {
                    for x in l * stride..(l + 1) * stride {
                        sum += (f_prev.get(c, y, x) as f64 - f_curr.get(c, y, x) as f64).abs();
                    }
                }
            }
            if sum > threshold {
                mask.set(k, l, true);
            }
        }
    }
    Ok(mask)
}

/// Zeroes every element outside a set mask patch, across all channels.
pub fn apply_mask(deriv: &FeatureGrid, mask: &BitMask) -> Result<FeatureGrid> {
    let (c_n, h, w) = deriv.dims();
    let stride = mask.stride_for(h, w)?;
    let mut out = deriv.clone();
    for c in 0..c_n {
        for y in 0..h {
            for x in 0..w {
                if !mask.get(y / stride, x / stride) {
                    out.set(c, y, x, 0.0);
                }
            }
        }
    }
    Ok(out)
}

/// Average pooling over `sx × sx` spatial blocks and groups of `sc` channels.
pub fn spatial_compress(f: &FeatureGrid, sx: usize, sc: usize) -> Result<FeatureGrid> {
    let (c_n, h, w) = f.dims();
    if sx == 0 || sc == 0 || h % sx != 0 || w % sx != 0 || c_n % sc != 0 {
        return Err(Error::invalid(format!(
            "cannot pool ({c_n}, {h}, {w}) by spatial {sx} and channel {sc}"
        )));
    }
    let grid = f.grid.coarsened(sx, c_n / sc);
    let (oc, oh, ow) = (c_n / sc, h / sx, w / sx);
    let n = (sx * sx * sc) as f64;
    let mut data = Vec::with_capacity(oc * oh * ow);
    for g in 0..oc {
        for y in 0..oh {
            for x in 0..ow {
                let mut sum = 0.0f64;
                for c in g * sc..(g + 1) * sc {
                    for yy in y * sx..(y + 1) * sx {
                        for xx in x * sx..(x + 1) * sx {
                            sum += f.get(c, yy, xx) as f64;
                        }
                    }
                }
                data.push((sum / n) as f32);
            }
        }
    }
    let mut out = FeatureGrid::from_data(grid, data)?;
    out.frame = f.frame;
    Ok(out)
}

/// Nearest-neighbour upsampling back onto `target`, broadcasting each
/// value across its channel group.
pub fn spatial_decompress(f: &FeatureGrid, sx: usize, sc: usize, target: &GridConfig) -> Result<FeatureGrid> {
    let (c_n, h, w) = f.dims();
    let (tc, th, tw) = target.dims();
    if sx == 0 || sc == 0 || tc != c_n * sc || th != h * sx || tw != w * sx {
        return Err(Error::invalid(format!(
            "({c_n}, {h}, {w}) by spatial {sx} and channel {sc} cannot fill ({tc}, {th}, {tw})"
        )));
    }
    let mut out = FeatureGrid::zeros(*target);
    for c in 0..tc {
        for y in 0..th {
            for x in 0..tw {
                out.set(c, y, x, f.get(c / sc, y / sx, x / sx));
            }
        }
    }
    out.frame = f.frame;
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PacketOptions {
    /// `None` sends raw `f32`.
    pub bits: Option<u8>,
    pub mask: Option<BitMask>,
    pub include_derivative: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPacket {
    pub bytes: Vec<u8>,
    /// Mask, scales and payload; the header is excluded.
    pub ab_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketHeader {
    pub version: u8,
    pub flags: u8,
    pub t_ref_us: u64,
    /// `x, y, z, yaw`.
    pub pose: [f32; 4],
    pub dims: (usize, usize, usize),
    pub bits: u8,
    pub stride: u8,
}

impl PacketHeader {
    pub fn quantized(&self) -> bool {
        self.flags & FLAG_QUANTIZED != 0
    }

    pub fn masked(&self) -> bool {
        self.flags & FLAG_MASKED != 0
    }

    pub fn has_derivative(&self) -> bool {
        self.flags & FLAG_DERIVATIVE != 0
    }

    pub fn pose2(&self) -> Pose2 {
        Pose2::new(self.pose[0] as f64, self.pose[1] as f64, self.pose[3] as f64)
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(self.version);
        out.push(self.flags);
        out.extend_from_slice(&self.t_ref_us.to_le_bytes());
        for v in self.pose {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for d in [self.dims.0, self.dims.1, self.dims.2] {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        out.push(self.bits);
        out.push(self.stride);
    }

    fn read(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Decode(format!(
                "packet of {} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let version = bytes[4];
        if version != VERSION {
            return Err(Error::Decode(format!("unsupported version {version}")));
        }
        let flags = bytes[5];
        if flags & !(FLAG_QUANTIZED | FLAG_MASKED | FLAG_DERIVATIVE) != 0 {
            return Err(Error::Decode(format!("unknown flag bits {flags:#04x}")));
        }
        let t_ref_us = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let mut pose = [0f32; 4];
        for (i, p) in pose.iter_mut().enumerate() {
            *p = f32::from_le_bytes(bytes[14 + 4 * i..18 + 4 * i].try_into().unwrap());
        }
        let d = |i: usize| u16::from_le_bytes(bytes[30 + 2 * i..32 + 2 * i].try_into().unwrap()) as usize;
        Ok(Self {
            version,
            flags,
            t_ref_us,
            pose,
            dims: (d(0), d(1), d(2)),
            bits: bytes[36],
            stride: bytes[37],
        })
    }
}

/// Element indices carried by a masked derivative body.
fn masked_indices(mask: &BitMask, dims: (usize, usize, usize), stride: usize) -> Vec<usize> {
    let (c_n, h, w) = dims;
    let mut out = Vec::with_capacity(mask.count_ones() * stride * stride * c_n);
    for k in 0..mask.hm {
        for l in 0..mask.wm {
            if !mask.get(k, l) {
                continue;
            }
            for c in 0..c_n {
                for y in k * stride..(k + 1) * stride {
                    for x in l * stride..(l + 1) * stride {
                        out.push((c * h + y) * w + x);
                    }
                }
            }
        }
    }
    out
}

fn write_body(out: &mut Vec<u8>, values: &[f32], select: Option<&[usize]>, bits: Option<u8>) -> Result<()> {
    let picked: Box<dyn Iterator<Item = f32>> = match select {
        Some(idx) => Box::new(idx.iter().map(|&i| values[i])),
        None => Box::new(values.iter().copied()),
    };
    match bits {
        Some(b) => {
            check_finite(values)?;
            let q = Quantizer::for_alpha(alpha_of(values), b)?;
            out.extend_from_slice(&q.scale.to_le_bytes());
            out.extend_from_slice(&pack_codes(picked.map(|v| q.code(v)), b));
        }
        None => {
            for v in picked {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(())
}

fn take<'a>(bytes: &'a [u8], cursor: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = cursor
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Decode(format!("payload truncated at byte {}", bytes.len())))?;
    let s = &bytes[*cursor..end];
    *cursor = end;
    Ok(s)
}

fn read_body(bytes: &[u8], cursor: &mut usize, count: usize, bits: Option<u8>) -> Result<Vec<f32>> {
    match bits {
        Some(b) => {
            let scale = f32::from_le_bytes(take(bytes, cursor, SCALE_BYTES)?.try_into().unwrap());
            if !scale.is_finite() || scale < 0.0 {
                return Err(Error::Decode(format!("invalid scale {scale}")));
            }
            let q = Quantizer { bits: b, scale };
            let codes = unpack_codes(take(bytes, cursor, packed_len(count, b))?, count, b)?;
            Ok(codes.into_iter().map(|c| q.value(c)).collect())
        }
        None => {
            let raw = take(bytes, cursor, count * 4)?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        }
    }
}

/// Serializes `flow` (feature, and optionally its masked derivative).
pub fn encode_packet(flow: &FeatureFlow, pose: &Pose2, opts: &PacketOptions) -> Result<EncodedPacket> {
    let dims = flow.base.dims();
    if [dims.0, dims.1, dims.2].iter().any(|&d| d > u16::MAX as usize) {
        return Err(Error::invalid(format!("dims {dims:?} exceed 16-bit header fields")));
    }
    if let Some(b) = opts.bits {
        check_bits(b)?;
    }
    flow.base.ensure_same_dims(&flow.deriv)?;
    let stride = match &opts.mask {
        Some(m) => {
            if !opts.include_derivative {
                return Err(Error::invalid("a mask only applies to a transmitted derivative"));
            }
            let s = m.stride_for(dims.1, dims.2)?;
            if s > u8::MAX as usize {
                return Err(Error::invalid(format!("mask stride {s} exceeds 8-bit header field")));
            }
            s
        }
        None => 0,
    };

    let mut flags = 0;
    if opts.bits.is_some() {
        flags |= FLAG_QUANTIZED;
    }
    if opts.mask.is_some() {
        flags |= FLAG_MASKED;
    }
    if opts.include_derivative {
        flags |= FLAG_DERIVATIVE;
    }
    let header = PacketHeader {
        version: VERSION,
        flags,
        t_ref_us: flow.t_ref_us,
        pose: [pose.x as f32, pose.y as f32, 0.0, pose.yaw as f32],
        dims,
        bits: opts.bits.unwrap_or(RAW_BITS),
        stride: stride as u8,
    };
    let mut bytes = Vec::new();
    header.write(&mut bytes);
    if let Some(m) = &opts.mask {
        bytes.extend_from_slice(m.as_bytes());
    }
    write_body(&mut bytes, flow.base.data(), None, opts.bits)?;
    if opts.include_derivative {
        let idx = opts.mask.as_ref().map(|m| masked_indices(m, dims, stride));
        write_body(&mut bytes, flow.deriv.data(), idx.as_deref(), opts.bits)?;
    }
    let ab_bytes = bytes.len() - HEADER_LEN;
    Ok(EncodedPacket { bytes, ab_bytes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedPacket {
    pub header: PacketHeader,
    pub mask: Option<BitMask>,
    pub base: Vec<f32>,
    /// Full-size derivative with masked-out patches zeroed.
    pub deriv: Option<Vec<f32>>,
}

impl DecodedPacket {
    /// Attaches the grid the sender rasterized on. A packet without a
    /// derivative yields a flow with a zero derivative.
    pub fn into_flow(self, grid: GridConfig) -> Result<FeatureFlow> {
        if grid.dims() != self.header.dims {
            return Err(Error::DimMismatch {
                expected: grid.dims(),
                actual: self.header.dims,
            });
        }
        let base = FeatureGrid::from_data(grid, self.base)?;
        match self.deriv {
            Some(d) => FeatureFlow::new(base, FeatureGrid::from_data(grid, d)?, self.header.t_ref_us),
            None => Ok(FeatureFlow::stationary(base, self.header.t_ref_us)),
        }
    }
}

pub fn decode_packet(bytes: &[u8]) -> Result<DecodedPacket> {
    let header = PacketHeader::read(bytes)?;
    let dims = header.dims;
    let count = dims.0 * dims.1 * dims.2;
    let bits = if header.quantized() {
        check_bits(header.bits).map_err(|e| Error::Decode(e.to_string()))?;
        Some(header.bits)
    } else {
        if header.bits != RAW_BITS {
            return Err(Error::Decode(format!(
                "unquantized packet declares {} bits",
                header.bits
            )));
        }
        None
    };
    let mut cursor = HEADER_LEN;

    let mask = if header.masked() {
        if !header.has_derivative() {
            return Err(Error::Decode("mask flag set without derivative".into()));
        }
        let stride = header.stride as usize;
        if stride == 0 || dims.1 % stride != 0 || dims.2 % stride != 0 {
            return Err(Error::Decode(format!("stride {stride} does not tile {dims:?}")));
        }
        let (hm, wm) = (dims.1 / stride, dims.2 / stride);
        let raw = take(bytes, &mut cursor, (hm * wm).div_ceil(8))?;
        Some(BitMask::from_bytes(hm, wm, raw)?)
    } else {
        if header.stride != 0 {
            return Err(Error::Decode("stride set on an unmasked packet".into()));
        }
        None
    };

    let base = read_body(bytes, &mut cursor, count, bits)?;
    let deriv = if header.has_derivative() {
        match &mask {
            Some(m) => {
                let idx = masked_indices(m, dims, header.stride as usize);
                let vals = read_body(bytes, &mut cursor, idx.len(), bits)?;
                let mut full = vec![0.0f32; count];
                for (i, v) in idx.into_iter().zip(vals) {
                    full[i] = v;
                }
                Some(full)
            }
            None => Some(read_body(bytes, &mut cursor, count, bits)?),
        }
    } else {
        None
    };
    if cursor != bytes.len() {
        return Err(Error::Decode(format!(
            "{} trailing bytes after payload",
            bytes.len() - cursor
        )));
    }
    Ok(DecodedPacket {
        header,
        mask,
        base,
        deriv,
    })
}

/// What a cooperative frame transmits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TransmissionForm {
    /// Raw points, four `f32` each.
    Early { num_points: usize },
    /// Boxes, eight `f32` each.
    Late { num_detections: usize },
    /// One `f32` feature tensor.
    MiddleFeature { dims: (usize, usize, usize) },
    /// Feature plus derivative, `f32` or packed at `bits`.
    MiddleFlow {
        dims: (usize, usize, usize),
        bits: Option<u8>,
    },
    /// One bit per mask element.
    AttentionMask { hm: usize, wm: usize },
}

/// Payload bytes of one frame of `form`. Quantization scales are not
/// included; an encoded packet adds 4 bytes per scale on top.
pub fn transmission_cost(form: TransmissionForm) -> usize {
    match form {
        TransmissionForm::Early { num_points } => BYTES_PER_POINT * num_points,
        TransmissionForm::Late { num_detections } => BYTES_PER_BOX * num_detections,
        TransmissionForm::MiddleFeature { dims } => dims.0 * dims.1 * dims.2 * 4,
        TransmissionForm::MiddleFlow { dims, bits } => {
            let n = dims.0 * dims.1 * dims.2;
            2 * packed_len(n, bits.unwrap_or(RAW_BITS))
        }
        TransmissionForm::AttentionMask { hm, wm } => (hm * wm).div_ceil(8),
    }
}

/// Raw cloud payload: `x, y, z, intensity` as little-endian `f32`.
pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * BYTES_PER_POINT);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(BYTES_PER_POINT) {
        return Err(Error::Decode("cloud payload is not a whole number of points".into()));
    }
    let f = |c: &[u8], i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap());
    Ok(PointCloud::new(
        bytes
            .chunks_exact(BYTES_PER_POINT)
            .map(|c| Point {
                x: f(c, 0),
                y: f(c, 1),
                z: f(c, 2),
                intensity: f(c, 3),
            })
            .collect(),
    ))
}

/// Detection payload: `x, y, z, w, l, h, yaw, confidence` as little-endian `f32`.
/// Class ids are not transmitted.
pub fn encode_detections(boxes: &[Box3D]) -> Vec<u8> {
    let mut out = Vec::with_capacity(boxes.len() * BYTES_PER_BOX);
    for b in boxes {
        for v in [b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw, b.confidence] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_detections(bytes: &[u8], class_id: u32) -> Result<Vec<Box3D>> {
    if !bytes.len().is_multiple_of(BYTES_PER_BOX) {
        return Err(Error::Decode("detection payload is not a whole number of boxes".into()));
    }
    Ok(bytes
        .chunks_exact(BYTES_PER_BOX)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            Box3D {
                cx: f(0),
                cy: f(1),
                cz: f(2),
                w: f(3),
                l: f(4),
                h: f(5),
                yaw: f(6),
                class_id,
                confidence: f(7),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn grid(c: usize, h: usize, w: usize) -> GridConfig {
        GridConfig {
            x_range: (0.0, w as f64),
            y_range: (0.0, h as f64),
            z_range: (-3.0, 1.0),
            cell: 1.0,
            channels: c,
        }
    }

    fn from_values(c: usize, h: usize, w: usize, v: Vec<f32>) -> FeatureGrid {
        FeatureGrid::from_data(grid(c, h, w), v).unwrap()
    }

    fn random(c: usize, h: usize, w: usize, seed: u64) -> FeatureGrid {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        from_values(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-3.0f32..3.0)).collect())
    }

    #[test]
    fn quantize_examples() {
        let t = from_values(1, 1, 3, vec![-1.0, 0.5, 1.0]);
        let q = quantize(&t, 6).unwrap();
        assert_eq!(q.codes().unwrap(), vec![-31, 16, 31]);
        assert_eq!(q.scale, 1.0f32 / 31.0);

        let quant = Quantizer::for_alpha(1.0, 6).unwrap();
        assert_eq!(quant.code(0.25), 8);
        assert!((quant.value(8) - 0.258065).abs() < 1e-6);
        assert_eq!(quant.value(31), 1.0);
        assert_eq!(quant.value(0), 0.0);

        let z = quantize(&from_values(1, 2, 2, vec![0.0; 4]), 6).unwrap();
        assert_eq!(z.scale, 0.0);
        assert_eq!(z.codes().unwrap(), vec![0; 4]);
    }

    #[test]
    fn out_of_range_clamps_to_max_code() {
        let q = Quantizer::for_alpha(2.0, 4).unwrap();
        assert_eq!(q.code(5.0), 7);
        assert_eq!(q.code(-5.0), -7);
    }

    #[test]
    fn rejects_bad_bits_and_non_finite() {
        let mut t = from_values(1, 1, 2, vec![1.0, 2.0]);
        t.data_mut()[1] = f32::NAN;
        assert!(quantize(&t, 6).is_err());
        assert!(quantize(&from_values(1, 1, 1, vec![1.0]), 1).is_err());
        assert!(quantize(&from_values(1, 1, 1, vec![1.0]), 17).is_err());
    }

    #[test]
    fn corrupt_padding_rejected() {
        let t = from_values(1, 1, 3, vec![-1.0, 0.5, 1.0]);
        let mut q = quantize(&t, 6).unwrap();
        // 18 bits -> 3 bytes, 6 pad bits
        *q.packed.last_mut().unwrap() |= 1;
        assert!(matches!(dequantize(&q), Err(Error::Decode(_))));
    }

    #[test]
    fn bit_writer_reader() {
        let mut w = BitWriter::new();
        w.write(0b101, 3);
        w.write(0b1, 1);
        w.write(0xABC, 12);
        let bytes = w.finish();
        assert_eq!(bytes, vec![0b1011_1010, 0b1011_1100]);
        let mut r = BitReader::new(&bytes);
        assert_eq!(r.read(3).unwrap(), 0b101);
        assert_eq!(r.read(1).unwrap(), 1);
        assert_eq!(r.read(12).unwrap(), 0xABC);
        r.finish().unwrap();
    }

    #[test]
    fn mask_examples() {
        let a = random(2, 4, 4, 1);
        let m = attention_mask(&a, &a, (2, 2), 0.0).unwrap();
        assert_eq!(m.count_ones(), 0);

        let mut b = a.clone();
        b.set(1, 3, 0, a.get(1, 3, 0) + 0.1);
        let m = attention_mask(&a, &b, (2, 2), 0.0).unwrap();
        assert_eq!(m.count_ones(), 1);
        assert!(m.get(1, 0));
        assert_eq!(attention_mask(&a, &b, (2, 2), f64::INFINITY).unwrap().count_ones(), 0);
        assert!(attention_mask(&a, &b, (3, 3), 0.0).is_err());
    }

    #[test]
    fn apply_mask_examples() {
        let d = random(3, 4, 4, 2);
        assert_eq!(apply_mask(&d, &BitMask::ones(2, 2)).unwrap(), d);
        assert!(apply_mask(&d, &BitMask::zeros(2, 2)).unwrap().is_all_zero());
        let mut m = BitMask::zeros(2, 2);
        m.set(0, 1, true);
        let out = apply_mask(&d, &m).unwrap();
        let nonzero = out.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 3 * 2 * 2);
        for c in 0..3 {
            for y in 0..2 {
                for x in 2..4 {
                    assert_eq!(out.get(c, y, x), d.get(c, y, x));
                }
            }
        }
    }

    #[test]
    fn compress_examples() {
        let f = random(4, 4, 4, 3);
        assert_eq!(spatial_compress(&f, 1, 1).unwrap(), f);
        let c = from_values(2, 4, 4, vec![1.5; 32]);
        let p = spatial_compress(&c, 2, 2).unwrap();
        assert_eq!(p.dims(), (1, 2, 2));
        assert!(p.data().iter().all(|&v| v == 1.5));
        let b = from_values(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(spatial_compress(&b, 2, 1).unwrap().data(), &[2.5]);
        assert!(spatial_compress(&f, 3, 1).is_err());
    }

    #[test]
    fn decompress_examples() {
        let f = random(2, 4, 4, 4);
        assert_eq!(spatial_decompress(&f, 1, 1, &f.grid).unwrap(), f);
        let one = from_values(1, 1, 1, vec![0.75]);
        let target = grid(3, 4, 4);
        let up = spatial_decompress(&one, 4, 3, &target).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.75));
        assert!(spatial_decompress(&one, 2, 1, &target).is_err());
    }

    #[test]
    fn transmission_cost_examples() {
        assert_eq!(
            transmission_cost(TransmissionForm::Early { num_points: 100_000 }),
            1_600_000
        );
        assert_eq!(transmission_cost(TransmissionForm::Late { num_detections: 10 }), 320);
        assert_eq!(
            transmission_cost(TransmissionForm::MiddleFeature { dims: (24, 36, 36) }),
            124_416
        );
        assert_eq!(
            transmission_cost(TransmissionForm::MiddleFlow {
                dims: (12, 36, 36),
                bits: None
            }),
            124_416
        );
        assert_eq!(
            transmission_cost(TransmissionForm::MiddleFlow {
                dims: (12, 36, 36),
                bits: Some(6)
            }),
            23_328
        );
        assert_eq!(
            transmission_cost(TransmissionForm::AttentionMask { hm: 36, wm: 36 }),
            162
        );
    }

    #[test]
    fn packet_sizes() {
        let base = random(12, 36, 36, 5);
        let flow = FeatureFlow::new(base.clone(), random(12, 36, 36, 6), 77).unwrap();
        let raw = encode_packet(
            &flow,
            &Pose2::identity(),
            &PacketOptions {
                bits: None,
                mask: None,
                include_derivative: true,
            },
        )
        .unwrap();
        assert_eq!(raw.ab_bytes, 124_416);
        assert_eq!(raw.bytes.len(), HEADER_LEN + 124_416);
        let q = encode_packet(
            &flow,
            &Pose2::identity(),
            &PacketOptions {
                bits: Some(6),
                mask: None,
                include_derivative: true,
            },
        )
        .unwrap();
        assert_eq!(q.ab_bytes, 23_336);
    }

    #[test]
    fn packet_round_trip_and_errors() {
        let flow = FeatureFlow::new(random(2, 8, 8, 7), random(2, 8, 8, 8), 123_456).unwrap();
        let pose = Pose2::new(1.5, -2.25, 0.5);
        let mut mask = BitMask::zeros(2, 2);
        mask.set(1, 0, true);
        let opts = PacketOptions {
            bits: Some(6),
            mask: Some(mask.clone()),
            include_derivative: true,
        };
        let enc = encode_packet(&flow, &pose, &opts).unwrap();
        let dec = decode_packet(&enc.bytes).unwrap();
        assert_eq!(dec.header.t_ref_us, 123_456);
        assert_eq!(dec.header.pose, [1.5, -2.25, 0.0, 0.5]);
        assert_eq!(dec.mask.as_ref(), Some(&mask));
        let expect_base = dequantize(&quantize(&flow.base, 6).unwrap()).unwrap();
        assert_eq!(dec.base, expect_base);
        let dq = dequantize_grid(&quantize(&flow.deriv, 6).unwrap(), flow.deriv.grid).unwrap();
        let expect_deriv = apply_mask(&dq, &mask).unwrap();
        assert_eq!(dec.deriv.as_deref(), Some(expect_deriv.data()));

        assert!(decode_packet(&enc.bytes[..enc.bytes.len() - 1]).is_err());
        let mut extra = enc.bytes.clone();
        extra.push(0);
        assert!(decode_packet(&extra).is_err());
        let mut bad = enc.bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_packet(&bad), Err(Error::Decode(_))));
        assert!(decode_packet(&enc.bytes[..10]).is_err());
    }

    #[test]
    fn base_only_packet() {
        let flow = FeatureFlow::stationary(random(1, 4, 4, 9), 5);
        let enc = encode_packet(
            &flow,
            &Pose2::identity(),
            &PacketOptions {
                bits: Some(8),
                mask: None,
                include_derivative: false,
            },
        )
        .unwrap();
        assert_eq!(enc.ab_bytes, 4 + 16);
        let dec = decode_packet(&enc.bytes).unwrap();
        assert!(dec.deriv.is_none());
        let back = dec.into_flow(flow.base.grid).unwrap();
        assert!(back.deriv.is_all_zero());
    }

    #[test]
    fn oversized_dims_rejected() {
        let g = GridConfig {
            x_range: (0.0, 70_000.0),
            y_range: (0.0, 1.0),
            z_range: (-3.0, 1.0),
            cell: 1.0,
            channels: 1,
        };
        let flow = FeatureFlow::stationary(FeatureGrid::zeros(g), 0);
        assert!(encode_packet(&flow, &Pose2::identity(), &PacketOptions::default()).is_err());
    }

    #[test]
    fn cloud_and_detection_payloads() {
        let cloud = PointCloud::new(vec![
            Point {
                x: 1.0,
                y: 2.0,
                z: -1.0,
                intensity: 0.5,
            };
            3
        ]);
        let bytes = encode_cloud(&cloud);
        assert_eq!(bytes.len(), 48);
        assert_eq!(decode_cloud(&bytes).unwrap(), cloud);
        let boxes = vec![Box3D::new([1.0, 2.0, 3.0], [1.5, 4.0, 1.5], 0.5, 0).with_confidence(0.75)];
        let bytes = encode_detections(&boxes);
        assert_eq!(bytes.len(), 32);
        assert_eq!(decode_detections(&bytes, 0).unwrap(), boxes);
    }
}
