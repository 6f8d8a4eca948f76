//! EEP4 model bundle: everything the switch and controller need, in one file.
//!
//! ```text
//! "EEP4" | version u8 = 1 | section*
//! section = tag [u8; 4] | len u32 | payload
//! ```
//!
//! All numbers little-endian. Required sections: SCAL, CONV, LINX, MAPQ,
//! THRS, GRUW, HEAD. META is optional; unknown tags are skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::controller::{ClassifierHead, GruWeights, Matrix, HEAD_HIDDEN, HIDDEN};
use crate::flow::{feature_list_hash, Feature, FeatureScaler, FEATURE_COUNT, MAP_CHANNELS};
use crate::qnn::{pooled_params, FixedPointMultiplier, QConvLayer, QLinearExit, QuantParams, KERNEL};
use crate::switch::{precompute_thresholds, threshold_code, ExitThresholds};

pub const MAGIC: &[u8; 4] = b"EEP4";
pub const VERSION: u8 = 1;
pub const REQUIRED_SECTIONS: [&str; 7] = ["SCAL", "CONV", "LINX", "MAPQ", "THRS", "GRUW", "HEAD"];

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bad bundle magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u8),
    #[error("missing section {0}")]
    MissingSection(String),
    #[error("section {tag}: length mismatch (expected {expected}, got {got})")]
    SectionLengthMismatch { tag: String, expected: usize, got: usize },
    #[error("validation failed: {0}")]
    ValidationFailed(String),
    #[error("bundle io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub scaler: FeatureScaler,
    pub conv: QConvLayer,
    pub linear_exit: QLinearExit,
    pub map_q: QuantParams,
    pub thresholds: ExitThresholds,
    pub gru: GruWeights,
    pub head: ClassifierHead,
    pub metadata: BTreeMap<String, String>,
}

fn fail<T>(msg: impl Into<String>) -> Result<T, BundleError> {
    Err(BundleError::ValidationFailed(msg.into()))
}

fn multiplier_matches(m: &FixedPointMultiplier, real: f64) -> bool {
    let r = m.to_real();
    (r - real.min(1.0)).abs() <= 1e-6 * real.abs().max(1e-300)
}

pub fn validate_bundle(b: &ModelBundle) -> Result<(), BundleError> {
    if let Some(i) = b.scaler.first_invalid() {
        return fail(format!(
            "scaler {} ({}): min {} > max {}",
            i,
            Feature::ALL[i].name(),
            b.scaler.min[i],
            b.scaler.max[i]
        ));
    }
    let c = &b.conv;
    if !c.in_q.valid_u8() {
        return fail(format!("conv in_q invalid: {:?}", c.in_q));
    }
    if !c.w_q.valid_i8() {
        return fail(format!("conv w_q invalid: {:?}", c.w_q));
    }
    if !c.out_q.valid_u8() {
        return fail(format!("conv out_q invalid: {:?}", c.out_q));
    }
    if !c.requant.is_valid() || !multiplier_matches(&c.requant, c.in_q.scale * c.w_q.scale / c.out_q.scale) {
        return fail("conv requant multiplier inconsistent with scales");
    }
    let l = &b.linear_exit;
    if !l.in_q.valid_i8() || l.in_q != pooled_params(&c.out_q) {
        return fail(format!("linear in_q {:?} is not the pooled domain of conv out_q", l.in_q));
    }
    if !l.w_q.valid_i8() {
        return fail(format!("linear w_q invalid: {:?}", l.w_q));
    }
    if !l.logit_q.valid_i8() {
        return fail(format!("logit_q invalid: {:?}", l.logit_q));
    }
    if !l.requant.is_valid() || !multiplier_matches(&l.requant, l.in_q.scale * l.w_q.scale / l.logit_q.scale) {
        return fail("linear requant multiplier inconsistent with scales");
    }
    if b.map_q != l.in_q {
        return fail(format!("map_q {:?} differs from pooled domain {:?}", b.map_q, l.in_q));
    }
    let t = &b.thresholds;
    if precompute_thresholds(t.tau_benign, t.tau_attack, &l.logit_q).is_err() {
        return fail(format!("thresholds out of range: {} / {}", t.tau_benign, t.tau_attack));
    }
    for (name, tau, q) in [("benign", t.tau_benign, t.t_benign_q), ("attack", t.tau_attack, t.t_attack_q)] {
        let expect = threshold_code(tau, &l.logit_q);
        if (expect as i32 - q as i32).abs() > 1 {
            return fail(format!("threshold drift: t_{name}_q = {q}, expected {expect}"));
        }
    }
    b.gru
        .check_shape(MAP_CHANNELS, HIDDEN)
        .map_err(|e| BundleError::ValidationFailed(format!("gru: {e}")))?;
    b.head
        .check_shape(HIDDEN, HEAD_HIDDEN)
        .map_err(|e| BundleError::ValidationFailed(format!("head: {e}")))?;
    let gru_finite = b.gru.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()));
    let head_finite = b.head.dense1_w.data.iter().chain(&b.head.dense1_b).chain(&b.head.dense2_w).all(|v| v.is_finite())
        && b.head.dense2_b.is_finite();
    if !gru_finite || !head_finite {
        return fail("non-finite controller weight");
    }
    Ok(())
}

// ---- encoding ----

struct Out(Vec<u8>);

impl Out {
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i8(&mut self, v: i8) {
        self.0.push(v as u8);
    }
    fn qp(&mut self, q: &QuantParams) {
        self.f64(q.scale);
        self.i32(q.zero_point);
    }
    fn mult(&mut self, m: &FixedPointMultiplier) {
        self.i32(m.mantissa);
        self.0.push(m.right_shift);
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.f32(*x);
        }
    }
}

struct In<'a> {
    b: &'a [u8],
    pos: usize,
    tag: &'a str,
}

impl<'a> In<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        if self.pos + n > self.b.len() {
            return Err(BundleError::SectionLengthMismatch {
                tag: self.tag.to_string(),
                expected: self.pos + n,
                got: self.b.len(),
            });
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N], BundleError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn f64(&mut self) -> Result<f64, BundleError> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn f32(&mut self) -> Result<f32, BundleError> {
        Ok(f32::from_le_bytes(self.arr()?))
    }
    fn i32(&mut self) -> Result<i32, BundleError> {
        Ok(i32::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<u32, BundleError> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn i8(&mut self) -> Result<i8, BundleError> {
        Ok(self.take(1)?[0] as i8)
    }
    fn qp(&mut self) -> Result<QuantParams, BundleError> {
        Ok(QuantParams::new(self.f64()?, self.i32()?))
    }
    fn mult(&mut self) -> Result<FixedPointMultiplier, BundleError> {
        let mantissa = self.i32()?;
        let right_shift = self.take(1)?[0];
        Ok(FixedPointMultiplier { mantissa, right_shift })
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, BundleError> {
        // guard against absurd dimension fields before allocating
        if n > (self.b.len() - self.pos) / 4 {
            return Err(BundleError::SectionLengthMismatch {
                tag: self.tag.to_string(),
                expected: self.pos + 4 * n,
                got: self.b.len(),
            });
        }
        (0..n).map(|_| self.f32()).collect()
    }
    fn finish(&self) -> Result<(), BundleError> {
        if self.pos != self.b.len() {
            return Err(BundleError::SectionLengthMismatch {
                tag: self.tag.to_string(),
                expected: self.pos,
                got: self.b.len(),
            });
        }
        Ok(())
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: Vec<u8>) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
}

/// Serializes without validating; `save_bundle` validates first.
pub fn encode_bundle(b: &ModelBundle) -> Vec<u8> {
    let mut file = MAGIC.to_vec();
    file.push(VERSION);

    let mut o = Out(Vec::new());
    for i in 0..FEATURE_COUNT {
        o.f64(b.scaler.min[i]);
        o.f64(b.scaler.max[i]);
    }
    section(&mut file, b"SCAL", o.0);

    let mut o = Out(Vec::new());
    for row in b.conv.weights.iter() {
        for w in row {
            o.i8(*w);
        }
    }
    for v in b.conv.bias {
        o.i32(v);
    }
    o.qp(&b.conv.in_q);
    o.qp(&b.conv.w_q);
    o.qp(&b.conv.out_q);
    o.mult(&b.conv.requant);
    section(&mut file, b"CONV", o.0);

    let l = &b.linear_exit;
    let mut o = Out(Vec::new());
    for w in l.weights {
        o.i8(w);
    }
    o.i32(l.bias);
    o.qp(&l.in_q);
    o.qp(&l.w_q);
    o.qp(&l.logit_q);
    o.mult(&l.requant);
    section(&mut file, b"LINX", o.0);

    let mut o = Out(Vec::new());
    o.qp(&b.map_q);
    section(&mut file, b"MAPQ", o.0);

    let t = &b.thresholds;
    let mut o = Out(Vec::new());
    o.f64(t.tau_benign);
    o.f64(t.tau_attack);
    o.i8(t.t_benign_q);
    o.i8(t.t_attack_q);
    section(&mut file, b"THRS", o.0);

    let g = &b.gru;
    let mut o = Out(Vec::new());
    o.u32(g.input_size() as u32);
    o.u32(g.hidden_size() as u32);
    for t in g.tensors() {
        o.u32(t.len() as u32);
        o.f32s(t);
    }
    section(&mut file, b"GRUW", o.0);

    let h = &b.head;
    let mut o = Out(Vec::new());
    o.u32(h.dense1_w.cols as u32);
    o.u32(h.dense1_w.rows as u32);
    for t in [&h.dense1_w.data, &h.dense1_b, &h.dense2_w] {
        o.u32(t.len() as u32);
        o.f32s(t);
    }
    o.f32(h.dense2_b);
    section(&mut file, b"HEAD", o.0);

    if !b.metadata.is_empty() {
        let mut o = Out(Vec::new());
        o.u32(b.metadata.len() as u32);
        for (k, v) in &b.metadata {
            for s in [k, v] {
                o.u32(s.len() as u32);
                o.0.extend_from_slice(s.as_bytes());
            }
        }
        section(&mut file, b"META", o.0);
    }
    file
}

fn read_tensor(r: &mut In, expect: usize) -> Result<Vec<f32>, BundleError> {
    let n = r.u32()? as usize;
    if n != expect {
        return Err(BundleError::ValidationFailed(format!(
            "{}: tensor has {n} values, dims imply {expect}",
            r.tag
        )));
    }
    r.f32s(n)
}

/// Parses a bundle without validating its invariants.
pub fn decode_bundle(bytes: &[u8]) -> Result<ModelBundle, BundleError> {
    if bytes.len() < 5 {
        let mut m = [0u8; 4];
        m[..bytes.len().min(4)].copy_from_slice(&bytes[..bytes.len().min(4)]);
        return Err(BundleError::BadMagic(m));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(BundleError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(BundleError::UnsupportedVersion(bytes[4]));
    }
    let mut sections: BTreeMap<String, &[u8]> = BTreeMap::new();
    let mut pos = 5;
    while pos < bytes.len() {
        if pos + 8 > bytes.len() {
            return Err(BundleError::SectionLengthMismatch {
                tag: "<header>".into(),
                expected: 8,
                got: bytes.len() - pos,
            });
        }
        let tag = String::from_utf8_lossy(&bytes[pos..pos + 4]).into_owned();
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().expect("4 bytes")) as usize;
        pos += 8;
        if pos + len > bytes.len() {
            return Err(BundleError::SectionLengthMismatch {
                tag,
                expected: len,
                got: bytes.len() - pos,
            });
        }
        if sections.insert(tag.clone(), &bytes[pos..pos + len]).is_some() {
            return fail(format!("duplicate section {tag}"));
        }
        pos += len;
    }
    for tag in REQUIRED_SECTIONS {
        if !sections.contains_key(tag) {
            return Err(BundleError::MissingSection(tag.to_string()));
        }
    }
    let reader = |tag: &'static str| In {
        b: sections[tag],
        pos: 0,
        tag,
    };

    let mut r = reader("SCAL");
    let mut min = [0.0; FEATURE_COUNT];
    let mut max = [0.0; FEATURE_COUNT];
    for i in 0..FEATURE_COUNT {
        min[i] = r.f64()?;
        max[i] = r.f64()?;
    }
    r.finish()?;
    let scaler = FeatureScaler::new(min, max);

    let mut r = reader("CONV");
    let mut weights = [[0i8; KERNEL]; MAP_CHANNELS];
    for row in weights.iter_mut() {
        for w in row.iter_mut() {
            *w = r.i8()?;
        }
    }
    let mut bias = [0i32; MAP_CHANNELS];
    for b in bias.iter_mut() {
        *b = r.i32()?;
    }
    let conv = QConvLayer {
        weights,
        bias,
        in_q: r.qp()?,
        w_q: r.qp()?,
        out_q: r.qp()?,
        requant: r.mult()?,
    };
    r.finish()?;

    let mut r = reader("LINX");
    let mut lw = [0i8; MAP_CHANNELS];
    for w in lw.iter_mut() {
        *w = r.i8()?;
    }
    let linear_exit = QLinearExit {
        weights: lw,
        bias: r.i32()?,
        in_q: r.qp()?,
        w_q: r.qp()?,
        logit_q: r.qp()?,
        requant: r.mult()?,
    };
    r.finish()?;

    let mut r = reader("MAPQ");
    let map_q = r.qp()?;
    r.finish()?;

    let mut r = reader("THRS");
    let thresholds = ExitThresholds {
        tau_benign: r.f64()?,
        tau_attack: r.f64()?,
        t_benign_q: r.i8()?,
        t_attack_q: r.i8()?,
    };
    r.finish()?;

    let mut r = reader("GRUW");
    let input = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let mat = |r: &mut In, rows: usize, cols: usize| -> Result<Matrix, BundleError> {
        Ok(Matrix {
            rows,
            cols,
            data: read_tensor(r, rows.saturating_mul(cols))?,
        })
    };
    let w_z = mat(&mut r, hidden, input)?;
    let w_r = mat(&mut r, hidden, input)?;
    let w_n = mat(&mut r, hidden, input)?;
    let u_z = mat(&mut r, hidden, hidden)?;
    let u_r = mat(&mut r, hidden, hidden)?;
    let u_n = mat(&mut r, hidden, hidden)?;
    let gru = GruWeights {
        w_z,
        w_r,
        w_n,
        u_z,
        u_r,
        u_n,
        b_iz: read_tensor(&mut r, hidden)?,
        b_ir: read_tensor(&mut r, hidden)?,
        b_in: read_tensor(&mut r, hidden)?,
        b_hz: read_tensor(&mut r, hidden)?,
        b_hr: read_tensor(&mut r, hidden)?,
        b_hn: read_tensor(&mut r, hidden)?,
    };
    r.finish()?;

    let mut r = reader("HEAD");
    let h_in = r.u32()? as usize;
    let h_hidden = r.u32()? as usize;
    let head = ClassifierHead {
        dense1_w: mat(&mut r, h_hidden, h_in)?,
        dense1_b: read_tensor(&mut r, h_hidden)?,
        dense2_w: read_tensor(&mut r, h_hidden)?,
        dense2_b: r.f32()?,
    };
    r.finish()?;

    let mut metadata = BTreeMap::new();
    if let Some(meta) = sections.get("META") {
        let mut r = In {
            b: meta,
            pos: 0,
            tag: "META",
        };
        let n = r.u32()?;
        for _ in 0..n {
            let mut s = [String::new(), String::new()];
            for x in s.iter_mut() {
                let len = r.u32()? as usize;
                *x = String::from_utf8(r.take(len)?.to_vec())
                    .map_err(|_| BundleError::ValidationFailed("META: non-UTF-8 string".into()))?;
            }
            let [k, v] = s;
            metadata.insert(k, v);
        }
        r.finish()?;
    }

    Ok(ModelBundle {
        scaler,
        conv,
        linear_exit,
        map_q,
        thresholds,
        gru,
        head,
        metadata,
    })
}

pub fn save_bundle(b: &ModelBundle, path: impl AsRef<Path>) -> Result<(), BundleError> {
    validate_bundle(b)?;
    fs::write(path, encode_bundle(b))?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle, BundleError> {
    let b = decode_bundle(&fs::read(path)?)?;
    validate_bundle(&b)?;
    Ok(b)
}

// ---- hand-crafted detector ----
//
// Only six inputs are live. Three of them are "markers" whose scaler range
// lies below every possible value, so they always quantize to 127; the rest
// of the non-live inputs have a degenerate range and quantize to 0. A filter
// `[127, a, b]` with bias -127*127 can only go positive where its left tap
// sits on a 127, so each channel reads the cell(s) right of a marker.

pub const HC_SYN_MAX: f64 = 10.0;
pub const HC_IAT_MAX_US: f64 = 100_000.0;
pub const HC_TAU: f64 = 0.9;
/// Conv channels: max(syn, udp) reader, IAT reader, presence.
pub const HC_CH_SYN: usize = 0;
pub const HC_CH_IAT: usize = 1;
pub const HC_CH_PRESENCE: usize = 2;
/// Real weight scale of the controller's candidate unit.
const HC_GRU_GAIN: f64 = 6.0;
const HC_HEAD_GAIN: f32 = 10.0;

pub fn handcrafted_scaler() -> FeatureScaler {
    let mut min = [0.0; FEATURE_COUNT];
    let mut max = [0.0; FEATURE_COUNT];
    for m in [Feature::LastBwdHeaderLen, Feature::FinCount, Feature::CwrCount] {
        min[m.index()] = -2.0;
        max[m.index()] = -1.0;
    }
    max[Feature::FlowIatLast.index()] = HC_IAT_MAX_US;
    max[Feature::SynCount.index()] = HC_SYN_MAX;
    // TCP -> 0, UDP -> 127
    min[Feature::Protocol.index()] = 6.0;
    max[Feature::Protocol.index()] = 17.0;
    FeatureScaler::new(min, max)
}

fn handcrafted_cnn() -> (QConvLayer, QLinearExit) {
    let gate = -127 * 127;
    let mut weights = [[0i8; KERNEL]; MAP_CHANNELS];
    let mut bias = [0i32; MAP_CHANNELS];
    weights[HC_CH_SYN] = [127, 1, 0];
    bias[HC_CH_SYN] = gate;
    weights[HC_CH_IAT] = [127, 0, 1];
    bias[HC_CH_IAT] = gate;
    weights[HC_CH_PRESENCE] = [0, 1, 0];
    let in_q = QuantParams::new(1.0 / 127.0, 0);
    let w_q = QuantParams::new(1.0 / 127.0, 0);
    let out_q = QuantParams::new(1.0 / (127.0 * 127.0), 0);
    let conv = QConvLayer {
        weights,
        bias,
        in_q,
        w_q,
        out_q,
        requant: FixedPointMultiplier::from_real(1.0).expect("1.0 encodes"),
    };

    let logit_q = QuantParams::new(10.0 / 255.0, 0);
    let pooled = pooled_params(&out_q);
    let lin_m = 0.25;
    let lw_q = QuantParams::new(lin_m * logit_q.scale / pooled.scale, 0);
    let mut lw = [0i8; MAP_CHANNELS];
    lw[HC_CH_SYN] = 5;
    lw[HC_CH_IAT] = -2;
    let linear = QLinearExit::new(lw, -320, pooled, lw_q, logit_q).expect("valid multiplier");
    (conv, linear)
}

fn handcrafted_controller() -> (GruWeights, ClassifierHead) {
    let mut gru = GruWeights::zeros(MAP_CHANNELS, HIDDEN);
    // pooled reals run 0..127/16129; express weights per "full-scale" input
    let full = 127.0 * pooled_params(&QuantParams::new(1.0 / (127.0 * 127.0), 0)).scale;
    let c = HC_GRU_GAIN / full;
    gru.w_n.set(0, HC_CH_SYN, (2.0 * c) as f32);
    gru.w_n.set(0, HC_CH_PRESENCE, (-1.5 * c) as f32);
    gru.w_n.set(0, HC_CH_IAT, (-0.5 * c) as f32);
    let mut head = ClassifierHead::zeros(HIDDEN, HEAD_HIDDEN);
    head.dense1_w.set(0, 0, 1.0);
    head.dense1_w.set(1, 0, -1.0);
    head.dense2_w[0] = HC_HEAD_GAIN;
    head.dense2_w[1] = -HC_HEAD_GAIN;
    (gru, head)
}

/// Deterministic SYN/UDP-flood detector used by tests and the default
/// scenario. The switch logit rises with syn_count (or UDP) and falls with
/// flow_iat_last; thresholds at tau = 0.9.
pub fn make_handcrafted_bundle() -> ModelBundle {
    let (conv, linear_exit) = handcrafted_cnn();
    let (gru, head) = handcrafted_controller();
    let map_q = linear_exit.in_q;
    let thresholds =
        precompute_thresholds(1.0 - HC_TAU, HC_TAU, &linear_exit.logit_q).expect("valid thresholds");
    let mut metadata = BTreeMap::new();
    metadata.insert("feature_list_hash".to_string(), feature_list_hash());
    metadata.insert("generator".to_string(), "handcrafted".to_string());
    ModelBundle {
        scaler: handcrafted_scaler(),
        conv,
        linear_exit,
        map_q,
        thresholds,
        gru,
        head,
        metadata,
    }
}

/// Same switch model with an all-zero controller (always p = 0.5).
pub fn make_zero_controller_bundle() -> ModelBundle {
    let mut b = make_handcrafted_bundle();
    b.gru = GruWeights::zeros(MAP_CHANNELS, HIDDEN);
    b.head = ClassifierHead::zeros(HIDDEN, HEAD_HIDDEN);
    b.metadata.insert("generator".to_string(), "handcrafted-zero-controller".to_string());
    b
}

/// Human-readable summary for `inspect-bundle`.
pub fn describe_bundle(b: &ModelBundle) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let t = &b.thresholds;
    let _ = writeln!(s, "EEP4 v{VERSION}");
    let live = (0..FEATURE_COUNT).filter(|&i| b.scaler.max[i] > b.scaler.min[i]).count();
    let _ = writeln!(s, "SCAL  {FEATURE_COUNT} features ({live} with a non-degenerate range)");
    let _ = writeln!(
        s,
        "CONV  16x1x3 int8  in_q=({:.6}, {})  w_q=({:.6}, {})  out_q=({:.6e}, {})  requant=({}, >>{})",
        b.conv.in_q.scale,
        b.conv.in_q.zero_point,
        b.conv.w_q.scale,
        b.conv.w_q.zero_point,
        b.conv.out_q.scale,
        b.conv.out_q.zero_point,
        b.conv.requant.mantissa,
        b.conv.requant.right_shift
    );
    let l = &b.linear_exit;
    let _ = writeln!(
        s,
        "LINX  16 int8  logit_q=({:.7}, {})  requant=({}, >>{})",
        l.logit_q.scale, l.logit_q.zero_point, l.requant.mantissa, l.requant.right_shift
    );
    let _ = writeln!(s, "MAPQ  scale={:.6e} zero_point={}", b.map_q.scale, b.map_q.zero_point);
    let _ = writeln!(
        s,
        "THRS  tau_benign={} tau_attack={} t_benign_q={} t_attack_q={}",
        t.tau_benign, t.tau_attack, t.t_benign_q, t.t_attack_q
    );
    let _ = writeln!(s, "GRUW  input={} hidden={}", b.gru.input_size(), b.gru.hidden_size());
    let _ = writeln!(s, "HEAD  {}x{} -> 1", b.head.dense1_w.rows, b.head.dense1_w.cols);
    for (k, v) in &b.metadata {
        let _ = writeln!(s, "META  {k}={v}");
    }
    s
}
