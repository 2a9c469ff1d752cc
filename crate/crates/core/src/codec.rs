//! Encode/decode pipeline and the `.dcic` container.
//!
//! Container (little-endian): `"DCIC"`, version u8, model id (8 bytes),
//! quality tag u8, original width u16, original height u16, then the
//! segments `z_s`, `s`, `z_y`, `y` in that order.

use std::path::Path;

use crate::checkpoint;
use crate::entropy_models::{build_factorized_table, CdfTable, FactorizedDensity, GaussianParams, GaussianTables, MAX_RANGE, PRECISION};
use crate::error::{DcicError, Result};
use crate::model::{Branch, Model, Segment};
use crate::params::ParamStore;
use crate::quantizer::{dequantize, symbols};
use crate::range_coder::{decode_symbols, encode_symbols, CodedSegment};
use crate::tensor::{FeatureMap, Tensor};

pub const MAGIC: [u8; 4] = *b"DCIC";
pub const CONTAINER_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 18;
/// Spatial multiple images are padded to.
pub const PAD_MULTIPLE: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamContainer {
    pub version: u8,
    pub model_id: [u8; 8],
    pub quality_tag: u8,
    pub width: u16,
    pub height: u16,
    pub segments: [CodedSegment; 4],
}

impl BitstreamContainer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_bytes());
        out.extend_from_slice(&MAGIC);
        out.push(self.version);
        out.extend_from_slice(&self.model_id);
        out.push(self.quality_tag);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for s in &self.segments {
            s.write_to(&mut out);
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(DcicError::Parse(format!("stream of {} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(DcicError::Parse("bad magic".into()));
        }
        let version = bytes[4];
        if version != CONTAINER_VERSION {
            return Err(DcicError::Version { found: version as u32, expected: CONTAINER_VERSION as u32 });
        }
        let model_id = bytes[5..13].try_into().unwrap();
        let quality_tag = bytes[13];
        let width = u16::from_le_bytes([bytes[14], bytes[15]]);
        let height = u16::from_le_bytes([bytes[16], bytes[17]]);
        if width == 0 || height == 0 {
            return Err(DcicError::Parse("zero image dimension".into()));
        }
        let mut pos = HEADER_BYTES;
        let mut segs = Vec::with_capacity(4);
        for seg in Segment::ORDER {
            let (s, used) = CodedSegment::parse(&bytes[pos..])
                .map_err(|e| DcicError::Parse(format!("segment {}: {e}", seg.label())))?;
            segs.push(s);
            pos += used;
        }
        if pos != bytes.len() {
            return Err(DcicError::Parse(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(BitstreamContainer { version, model_id, quality_tag, width, height, segments: segs.try_into().unwrap() })
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_BYTES + self.segments.iter().map(|s| s.serialized_len()).sum::<usize>()
    }

    /// Payload bits of each segment, in bitstream order.
    pub fn segment_bits(&self) -> [u64; 4] {
        [0, 1, 2, 3].map(|i| self.segments[i].payload_bits())
    }

    /// Serialized bits of each segment including its 10-byte header; these
    /// sum to the container size minus the fixed header.
    pub fn segment_bits_framed(&self) -> [u64; 4] {
        [0, 1, 2, 3].map(|i| self.segments[i].serialized_len() as u64 * 8)
    }

    pub fn pixels(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    /// Bits per original pixel; the fixed header counts only on request.
    pub fn bpp(&self, include_header: bool) -> f64 {
        let mut bits = self.segment_bits_framed().iter().sum::<u64>();
        if include_header {
            bits += HEADER_BYTES as u64 * 8;
        }
        bits as f64 / self.pixels() as f64
    }
}

/// Replicate-pads right and bottom to the next multiple; returns the padded
/// image and the original `(height, width)`.
pub fn pad_image(x: &FeatureMap<f64>, multiple: usize) -> (FeatureMap<f64>, (usize, usize)) {
    let (c, h, w) = x.dims();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if (ph, pw) == (h, w) {
        return (x.clone(), (h, w));
    }
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        let plane = x.channel(ch);
        for y in 0..ph {
            let row = &plane[y.min(h - 1) * w..(y.min(h - 1) + 1) * w];
            out.extend_from_slice(row);
            out.extend(std::iter::repeat(row[w - 1]).take(pw - w));
        }
    }
    (FeatureMap::new(c, ph, pw, out).unwrap(), (h, w))
}

pub fn unpad_image(x: &FeatureMap<f64>, orig: (usize, usize)) -> FeatureMap<f64> {
    x.crop(0, 0, orig.0, orig.1)
}

/// Every latent of one coded image with its quantized counterpart.
#[derive(Clone, Debug)]
pub struct LatentBundle {
    pub s: Option<FeatureMap<f64>>,
    pub s_hat: Option<FeatureMap<f64>>,
    pub z_s: Option<FeatureMap<f64>>,
    pub z_s_hat: Option<FeatureMap<f64>>,
    pub phi_s: Option<GaussianParams>,
    pub y: FeatureMap<f64>,
    pub y_hat: FeatureMap<f64>,
    pub z_y: Option<FeatureMap<f64>>,
    pub z_y_hat: Option<FeatureMap<f64>>,
    pub phi_y: GaussianParams,
}

pub struct EncodeOutput {
    pub container: BitstreamContainer,
    pub latents: LatentBundle,
    /// Encoder-side reconstruction, cropped to the original size.
    pub reconstruction: FeatureMap<f64>,
}

/// A model bound to its checkpoint identity.
#[derive(Clone, Debug)]
pub struct Codec {
    pub model: Model<f64>,
    pub model_id: [u8; 8],
    pub quality_tag: u8,
}

impl Codec {
    pub fn load(path: &Path) -> Result<Self> {
        let (model, manifest, model_id) = checkpoint::load(path)?;
        Ok(Codec { model, model_id, quality_tag: manifest.quality_tag })
    }

    pub fn encode(&self, x: &FeatureMap<f64>) -> Result<EncodeOutput> {
        encode_image(x, self)
    }

    pub fn decode(&self, b: &BitstreamContainer) -> Result<FeatureMap<f64>> {
        decode_image(b, self)
    }
}

fn feature(t: Tensor<f64>) -> FeatureMap<f64> {
    FeatureMap::from_tensor(t).expect("latent shape")
}

fn segment_range(sym: &[i32]) -> Result<u16> {
    let max = sym.iter().map(|s| s.unsigned_abs()).max().unwrap_or(0);
    if max > MAX_RANGE as u32 {
        return Err(DcicError::Encode(format!("latent magnitude {max} exceeds the coder range {MAX_RANGE}")));
    }
    Ok(max as u16)
}

fn factorized_tables(d: &FactorizedDensity, store: &ParamStore<f64>, range: u16) -> Result<Vec<CdfTable>> {
    d.integer_pmf(store, range as usize).iter().map(|pmf| build_factorized_table(pmf, range, PRECISION)).collect()
}

/// One table reference per element, channel-major.
fn per_element(tables: &[CdfTable], per_channel: usize) -> Vec<&CdfTable> {
    tables.iter().flat_map(|t| std::iter::repeat(t).take(per_channel)).collect()
}

fn code_factorized(z: &FeatureMap<f64>, d: &FactorizedDensity, store: &ParamStore<f64>) -> Result<(CodedSegment, FeatureMap<f64>)> {
    let sym = symbols(z.data(), &[])?;
    let range = segment_range(&sym)?;
    let (c, h, w) = z.dims();
    debug_assert_eq!(c, d.channels());
    let tables = factorized_tables(d, store, range)?;
    let seg = encode_symbols(&sym, &per_element(&tables, h * w), range)?;
    let z_hat = FeatureMap::new(c, h, w, dequantize(&sym, &[])?)?;
    Ok((seg, z_hat))
}

/// Codes a real latent against per-element Gaussian parameters; returns the
/// segment and the dequantized latent.
pub fn code_gaussian(v: &FeatureMap<f64>, phi: &GaussianParams, cache: &mut GaussianTables) -> Result<(CodedSegment, FeatureMap<f64>)> {
    let sym = symbols(v.data(), phi.mu.data())?;
    let range = segment_range(&sym)?;
    let tables = cache.for_params(phi, range)?;
    let seg = encode_symbols(&sym, &tables, range)?;
    let (c, h, w) = v.dims();
    let v_hat = FeatureMap::new(c, h, w, dequantize(&sym, phi.mu.data())?)?;
    Ok((seg, v_hat))
}

fn check_segment(seg: &CodedSegment, expected: usize, which: Segment) -> Result<()> {
    if seg.n_symbols as usize != expected {
        return Err(DcicError::Decode(format!(
            "segment {} holds {} symbols, the model expects {expected}",
            which.label(),
            seg.n_symbols
        )));
    }
    if seg.range > MAX_RANGE {
        return Err(DcicError::Decode(format!("segment {} range {} is out of bounds", which.label(), seg.range)));
    }
    Ok(())
}

fn decode_factorized(seg: &CodedSegment, d: &FactorizedDensity, store: &ParamStore<f64>, dims: (usize, usize, usize)) -> Result<FeatureMap<f64>> {
    let (c, h, w) = dims;
    let tables = factorized_tables(d, store, seg.range)?;
    let sym = decode_symbols(seg, &per_element(&tables, h * w))?;
    FeatureMap::new(c, h, w, dequantize(&sym, &[])?)
}

pub fn decode_gaussian(seg: &CodedSegment, phi: &GaussianParams, cache: &mut GaussianTables) -> Result<FeatureMap<f64>> {
    let tables = cache.for_params(phi, seg.range)?;
    let sym = decode_symbols(seg, &tables)?;
    Ok(feature(Tensor::new(phi.mu.shape(), dequantize(&sym, phi.mu.data())?)?))
}

pub fn encode_image(x: &FeatureMap<f64>, codec: &Codec) -> Result<EncodeOutput> {
    let model = &codec.model;
    model.flags.validate()?;
    if x.channels() != 3 {
        return Err(DcicError::Shape(format!("expected a 3-channel image, got {}", x.channels())));
    }
    let (h, w) = (x.height(), x.width());
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(DcicError::Precondition(format!("image {w}x{h} exceeds the container limit")));
    }
    if !x.is_finite() {
        return Err(DcicError::Precondition("image has non-finite values".into()));
    }
    let (xp, orig) = pad_image(x, PAD_MULTIPLE);
    let store = &model.params;
    let mut cache = GaussianTables::default();
    let mut segments: [CodedSegment; 4] = Default::default();

    let (mut s, mut s_hat, mut z_s, mut z_s_hat, mut phi_s) = (None, None, None, None, None);
    if model.flags.uses_prior() {
        let dens = model.nets.density_zs.as_ref().expect("prior branch built");
        let sv = model.extract_prior(&xp)?;
        let zv = model.hyper_analysis(&sv, Branch::S)?;
        let (seg_z, zh) = code_factorized(&zv, dens, store)?;
        let phi = model.hyper_synthesis_s(&zh)?;
        let (seg_s, sh) = code_gaussian(&sv, &phi, &mut cache)?;
        segments[Segment::HyperS.index()] = seg_z;
        segments[Segment::Prior.index()] = seg_s;
        (s, s_hat, z_s, z_s_hat, phi_s) = (Some(sv), Some(sh), Some(zv), Some(zh), Some(phi));
    }

    let y = model.analysis_conditioned(&xp, s_hat.as_ref())?;
    let (mut z_y, mut z_y_hat) = (None, None);
    if model.flags.hyper_y_in_entropy {
        let dens = model.nets.density_zy.as_ref().expect("detail hyper branch built");
        let zv = model.hyper_analysis(&y, Branch::Y)?;
        let (seg, zh) = code_factorized(&zv, dens, store)?;
        segments[Segment::HyperY.index()] = seg;
        (z_y, z_y_hat) = (Some(zv), Some(zh));
    }
    let phi_y = model.entropy_params_y(z_y_hat.as_ref(), s_hat.as_ref())?;
    let (seg_y, y_hat) = code_gaussian(&y, &phi_y, &mut cache)?;
    segments[Segment::Detail.index()] = seg_y;

    let x_hat = model.synthesis_conditioned(&y_hat, s_hat.as_ref())?;
    let container = BitstreamContainer {
        version: CONTAINER_VERSION,
        model_id: codec.model_id,
        quality_tag: codec.quality_tag,
        width: w as u16,
        height: h as u16,
        segments,
    };
    Ok(EncodeOutput {
        container,
        latents: LatentBundle { s, s_hat, z_s, z_s_hat, phi_s, y, y_hat, z_y, z_y_hat, phi_y },
        reconstruction: unpad_image(&x_hat, orig),
    })
}

/// Decoded latents needed to rebuild the image, exposed for inspection.
pub struct DecodedLatents {
    pub s_hat: Option<FeatureMap<f64>>,
    pub y_hat: FeatureMap<f64>,
}

/// Decodes only the structure prior of a parsed container.
pub fn decode_prior(b: &BitstreamContainer, codec: &Codec) -> Result<Option<FeatureMap<f64>>> {
    decode_prior_segments(&b.segments[0], &b.segments[1], (b.height, b.width), codec)
}

/// Decodes the structure prior from a stream prefix holding only the header
/// and the first two segments. Returns the prior and the bytes consumed.
pub fn decode_prior_prefix(prefix: &[u8], codec: &Codec) -> Result<(Option<FeatureMap<f64>>, usize)> {
    if prefix.len() < HEADER_BYTES || prefix[..4] != MAGIC {
        return Err(DcicError::Parse("missing container header".into()));
    }
    if prefix[4] != CONTAINER_VERSION {
        return Err(DcicError::Version { found: prefix[4] as u32, expected: CONTAINER_VERSION as u32 });
    }
    if prefix[5..13] != codec.model_id {
        return Err(DcicError::ModelMismatch { expected: hex(&codec.model_id), actual: hex(&prefix[5..13]) });
    }
    let width = u16::from_le_bytes([prefix[14], prefix[15]]);
    let height = u16::from_le_bytes([prefix[16], prefix[17]]);
    let (seg_z, a) = CodedSegment::parse(&prefix[HEADER_BYTES..])?;
    let (seg_s, b) = CodedSegment::parse(&prefix[HEADER_BYTES + a..])?;
    let prior = decode_prior_segments(&seg_z, &seg_s, (height, width), codec)?;
    Ok((prior, HEADER_BYTES + a + b))
}

fn decode_prior_segments(seg_z: &CodedSegment, seg_s: &CodedSegment, dims: (u16, u16), codec: &Codec) -> Result<Option<FeatureMap<f64>>> {
    let model = &codec.model;
    let plan = model.plan;
    let (ph, pw) = padded(dims);
    if !model.flags.uses_prior() {
        if seg_z.n_symbols != 0 || seg_s.n_symbols != 0 {
            return Err(DcicError::Config("stream carries a structure prior but the model has none".into()));
        }
        return Ok(None);
    }
    let (lh, lw) = (ph / 16, pw / 16);
    let (hh, hw) = (lh / 4, lw / 4);
    check_segment(seg_z, plan.c_z * hh * hw, Segment::HyperS)?;
    check_segment(seg_s, plan.c_s * lh * lw, Segment::Prior)?;
    let dens = model.nets.density_zs.as_ref().expect("prior branch built");
    let zh = decode_factorized(seg_z, dens, &model.params, (plan.c_z, hh, hw))?;
    let phi = model.hyper_synthesis_s(&zh)?;
    let mut cache = GaussianTables::default();
    Ok(Some(decode_gaussian(seg_s, &phi, &mut cache)?))
}

fn padded((h, w): (u16, u16)) -> (usize, usize) {
    ((h as usize).div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE, (w as usize).div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE)
}

pub fn decode_latents(b: &BitstreamContainer, codec: &Codec) -> Result<DecodedLatents> {
    if b.version != CONTAINER_VERSION {
        return Err(DcicError::Version { found: b.version as u32, expected: CONTAINER_VERSION as u32 });
    }
    if b.model_id != codec.model_id {
        return Err(DcicError::ModelMismatch { expected: hex(&codec.model_id), actual: hex(&b.model_id) });
    }
    let model = &codec.model;
    let plan = model.plan;
    let s_hat = decode_prior(b, codec)?;
    let (ph, pw) = padded((b.height, b.width));
    let (lh, lw) = (ph / 16, pw / 16);
    let z_y_hat = if model.flags.hyper_y_in_entropy {
        let seg = &b.segments[Segment::HyperY.index()];
        check_segment(seg, plan.c_z * (lh / 4) * (lw / 4), Segment::HyperY)?;
        let dens = model.nets.density_zy.as_ref().expect("detail hyper branch built");
        Some(decode_factorized(seg, dens, &model.params, (plan.c_z, lh / 4, lw / 4))?)
    } else {
        if b.segments[Segment::HyperY.index()].n_symbols != 0 {
            return Err(DcicError::Config("stream carries a detail hyper-latent but the model has none".into()));
        }
        None
    };
    let phi_y = model.entropy_params_y(z_y_hat.as_ref(), s_hat.as_ref())?;
    let seg = &b.segments[Segment::Detail.index()];
    check_segment(seg, plan.c_y * lh * lw, Segment::Detail)?;
    let mut cache = GaussianTables::default();
    let y_hat = decode_gaussian(seg, &phi_y, &mut cache)?;
    Ok(DecodedLatents { s_hat, y_hat })
}

pub fn decode_image(b: &BitstreamContainer, codec: &Codec) -> Result<FeatureMap<f64>> {
    let lat = decode_latents(b, codec)?;
    let x_hat = codec.model.synthesis_conditioned(&lat.y_hat, lat.s_hat.as_ref())?;
    Ok(unpad_image(&x_hat, (b.height as usize, b.width as usize)))
}

pub fn hex(b: &[u8]) -> String {
    b.iter().map(|v| format!("{v:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{ChannelPlan, ConditioningFlags};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const PLAN: ChannelPlan = ChannelPlan { n: 8, c_s: 4, c_y: 4, c_z: 3 };

    fn image(seed: u64, h: usize, w: usize) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(3, h, w, (0..3 * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn codec(flags: ConditioningFlags) -> Codec {
        Codec { model: Model::new(PLAN, flags, 3).unwrap(), model_id: *b"abcdefgh", quality_tag: 1 }
    }

    #[test]
    fn padding_contract() {
        let x = image(1, 100, 100);
        let (p, orig) = pad_image(&x, 64);
        assert_eq!(p.dims(), (3, 128, 128));
        assert_eq!(p.get(1, 127, 127), x.get(1, 99, 99));
        assert_eq!(p.get(2, 5, 110), x.get(2, 5, 99));
        assert_eq!(unpad_image(&p, orig), x);
        let aligned = image(2, 64, 128);
        assert_eq!(pad_image(&aligned, 64).0, aligned);
    }

    #[test]
    fn round_trip_and_accounting() {
        for flags in [ConditioningFlags::FULL, ConditioningFlags::BASELINE] {
            let c = codec(flags);
            let x = image(7, 70, 50);
            let enc = c.encode(&x).unwrap();
            let bytes = enc.container.to_bytes();
            let parsed = BitstreamContainer::parse(&bytes).unwrap();
            assert_eq!(parsed, enc.container);
            let dec = c.decode(&parsed).unwrap();
            assert_eq!(dec, enc.reconstruction);
            assert_eq!(dec.dims(), x.dims());
            assert_eq!(c.encode(&x).unwrap().container.to_bytes(), bytes);
            let framed: u64 = parsed.segment_bits_framed().iter().sum();
            assert_eq!(framed, (bytes.len() - HEADER_BYTES) as u64 * 8);
            assert!((parsed.bpp(false) - framed as f64 / 3500.0).abs() < 1e-12);
            assert!((parsed.bpp(true) - bytes.len() as f64 * 8.0 / 3500.0).abs() < 1e-12);
        }
    }

    #[test]
    fn refuses_foreign_and_damaged_streams() {
        let c = codec(ConditioningFlags::FULL);
        let enc = c.encode(&image(3, 64, 64)).unwrap();
        let mut other = c.clone();
        other.model_id = *b"zzzzzzzz";
        assert!(matches!(other.decode(&enc.container), Err(DcicError::ModelMismatch { .. })));
        let bytes = enc.container.to_bytes();
        assert!(BitstreamContainer::parse(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(BitstreamContainer::parse(&bad).is_err());
        bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(BitstreamContainer::parse(&bad), Err(DcicError::Version { .. })));
        let baseline = codec(ConditioningFlags::BASELINE);
        assert!(baseline.decode(&enc.container).is_err());
    }
}
