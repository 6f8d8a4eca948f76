//! Control-plane classifier: dequantize escalated sequences, GRU, dense head,
//! action choice.

use std::sync::Arc;

use thiserror::Error;

use crate::bundle::ModelBundle;
use crate::flow::{Action, FeatureMapSeq, FlowAction, MAP_CHANNELS, SEQ_LEN};
use crate::qnn::QuantParams;
use crate::switch::sigmoid;
use crate::wire::{self, ActionInstall, FeatureReport, Message, WireError};

pub const HIDDEN: usize = 64;
pub const HEAD_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: String, expected: String, got: String },
    #[error("malformed report: {0}")]
    MalformedReport(#[source] WireError),
    #[error("expected a feature report, got message type {0}")]
    UnexpectedMessage(u8),
    #[error("invalid controller thresholds: tau_benign={0}, tau_attack={1}")]
    InvalidThreshold(f64, f64),
}

/// Row-major dense matrix of 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, ControllerError> {
        if data.len() != rows * cols {
            return Err(shape("matrix data", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// `self * x` accumulated in f64.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| row.iter().zip(x).map(|(w, v)| *w as f64 * v).sum())
            .collect()
    }

    fn check(&self, what: &str, rows: usize, cols: usize) -> Result<(), ControllerError> {
        if self.rows != rows || self.cols != cols || self.data.len() != rows * cols {
            return Err(ControllerError::ShapeMismatch {
                what: what.to_string(),
                expected: format!("{rows}x{cols}"),
                got: format!("{}x{} ({} values)", self.rows, self.cols, self.data.len()),
            });
        }
        Ok(())
    }
}

fn shape(what: &str, expected: usize, got: usize) -> ControllerError {
    ControllerError::ShapeMismatch {
        what: what.to_string(),
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

fn check_vec(what: &str, v: &[f32], n: usize) -> Result<(), ControllerError> {
    if v.len() != n {
        return Err(shape(what, n, v.len()));
    }
    Ok(())
}

/// GRU parameters; gate order z (update), r (reset), n (candidate).
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_n: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_n: Matrix,
    pub b_iz: Vec<f32>,
    pub b_ir: Vec<f32>,
    pub b_in: Vec<f32>,
    pub b_hz: Vec<f32>,
    pub b_hr: Vec<f32>,
    pub b_hn: Vec<f32>,
}

impl GruWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruWeights {
            w_z: Matrix::zeros(hidden, input),
            w_r: Matrix::zeros(hidden, input),
            w_n: Matrix::zeros(hidden, input),
            u_z: Matrix::zeros(hidden, hidden),
            u_r: Matrix::zeros(hidden, hidden),
            u_n: Matrix::zeros(hidden, hidden),
            b_iz: vec![0.0; hidden],
            b_ir: vec![0.0; hidden],
            b_in: vec![0.0; hidden],
            b_hz: vec![0.0; hidden],
            b_hr: vec![0.0; hidden],
            b_hn: vec![0.0; hidden],
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_z.rows
    }

    pub fn input_size(&self) -> usize {
        self.w_z.cols
    }

    /// Every tensor consistent with `input` x `hidden`.
    pub fn check_shape(&self, input: usize, hidden: usize) -> Result<(), ControllerError> {
        for (name, m) in [("W_z", &self.w_z), ("W_r", &self.w_r), ("W_n", &self.w_n)] {
            m.check(name, hidden, input)?;
        }
        for (name, m) in [("U_z", &self.u_z), ("U_r", &self.u_r), ("U_n", &self.u_n)] {
            m.check(name, hidden, hidden)?;
        }
        for (name, b) in [
            ("b_iz", &self.b_iz),
            ("b_ir", &self.b_ir),
            ("b_in", &self.b_in),
            ("b_hz", &self.b_hz),
            ("b_hr", &self.b_hr),
            ("b_hn", &self.b_hn),
        ] {
            check_vec(name, b, hidden)?;
        }
        Ok(())
    }

    /// All twelve tensors in serialization order.
    pub fn tensors(&self) -> [&[f32]; 12] {
        [
            &self.w_z.data,
            &self.w_r.data,
            &self.w_n.data,
            &self.u_z.data,
            &self.u_r.data,
            &self.u_n.data,
            &self.b_iz,
            &self.b_ir,
            &self.b_in,
            &self.b_hz,
            &self.b_hr,
            &self.b_hn,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub dense1_w: Matrix,
    pub dense1_b: Vec<f32>,
    pub dense2_w: Vec<f32>,
    pub dense2_b: f32,
}

impl ClassifierHead {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        ClassifierHead {
            dense1_w: Matrix::zeros(hidden, input),
            dense1_b: vec![0.0; hidden],
            dense2_w: vec![0.0; hidden],
            dense2_b: 0.0,
        }
    }

    pub fn check_shape(&self, input: usize, hidden: usize) -> Result<(), ControllerError> {
        self.dense1_w.check("dense1", hidden, input)?;
        check_vec("dense1 bias", &self.dense1_b, hidden)?;
        check_vec("dense2", &self.dense2_w, hidden)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub tau_benign: f64,
    pub tau_attack: f64,
    pub reverify_period_packets: u32,
    /// 0 means "until the periodic re-check".
    pub action_ttl_packets: u32,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            tau_benign: 0.1,
            tau_attack: 0.9,
            reverify_period_packets: 2000,
            action_ttl_packets: 0,
        }
    }
}

impl ControllerConfig {
    pub fn with_tau(tau: f64) -> Self {
        ControllerConfig {
            tau_benign: 1.0 - tau,
            tau_attack: tau,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        let ok = |t: f64| t > 0.0 && t < 1.0;
        if ok(self.tau_benign) && ok(self.tau_attack) && self.tau_benign <= self.tau_attack {
            Ok(())
        } else {
            Err(ControllerError::InvalidThreshold(self.tau_benign, self.tau_attack))
        }
    }

    /// Packet budget given to every installed rule.
    pub fn ttl(&self) -> u32 {
        if self.action_ttl_packets > 0 {
            self.action_ttl_packets
        } else {
            self.reverify_period_packets
        }
    }
}

pub fn dequantize_sequence(seq: &FeatureMapSeq, map_q: &QuantParams) -> [[f64; MAP_CHANNELS]; SEQ_LEN] {
    std::array::from_fn(|t| std::array::from_fn(|c| map_q.dequantize(seq.0[t][c] as i32)))
}

fn add(a: &[f64], b: &[f32]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + *y as f64).collect()
}

/// Runs the GRU from a zero state over `xs` and returns the final hidden state.
pub fn gru_forward<X: AsRef<[f64]>>(xs: &[X], w: &GruWeights) -> Result<Vec<f64>, ControllerError> {
    let hidden = w.hidden_size();
    let input = w.input_size();
    w.check_shape(input, hidden)?;
    let mut h = vec![0.0f64; hidden];
    for (t, x) in xs.iter().enumerate() {
        let x = x.as_ref();
        if x.len() != input {
            return Err(shape(&format!("input step {t}"), input, x.len()));
        }
        let pre_z = add(&add(&w.w_z.matvec(x), &w.b_iz), &w.b_hz);
        let pre_r = add(&add(&w.w_r.matvec(x), &w.b_ir), &w.b_hr);
        let uz = w.u_z.matvec(&h);
        let ur = w.u_r.matvec(&h);
        let un = add(&w.u_n.matvec(&h), &w.b_hn);
        let xn = add(&w.w_n.matvec(x), &w.b_in);
        h = (0..hidden)
            .map(|j| {
                let z = sigmoid(pre_z[j] + uz[j]);
                let r = sigmoid(pre_r[j] + ur[j]);
                let n = (xn[j] + r * un[j]).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect();
    }
    Ok(h)
}

/// Attack probability from the final hidden state.
pub fn controller_classify(h: &[f64], head: &ClassifierHead) -> Result<f64, ControllerError> {
    head.check_shape(head.dense1_w.cols, head.dense1_w.rows)?;
    if h.len() != head.dense1_w.cols {
        return Err(shape("hidden state", head.dense1_w.cols, h.len()));
    }
    let a: Vec<f64> = add(&head.dense1_w.matvec(h), &head.dense1_b)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let z = head.dense2_b as f64 + a.iter().zip(&head.dense2_w).map(|(x, w)| x * *w as f64).sum::<f64>();
    Ok(sigmoid(z))
}

pub fn decide_action(p: f64, cfg: &ControllerConfig) -> FlowAction {
    let action = if p < cfg.tau_benign {
        Action::Allow
    } else if p > cfg.tau_attack {
        Action::Drop
    } else {
        Action::Notify
    };
    FlowAction::new(action, cfg.ttl())
}

/// Outcome of classifying one report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub probability: f64,
    pub action: FlowAction,
}

/// Stateless report handler sharing a bundle with the switches.
#[derive(Debug, Clone)]
pub struct Controller {
    bundle: Arc<ModelBundle>,
    config: ControllerConfig,
}

impl Controller {
    pub fn new(bundle: Arc<ModelBundle>, config: ControllerConfig) -> Result<Self, ControllerError> {
        config.validate()?;
        bundle.gru.check_shape(MAP_CHANNELS, HIDDEN)?;
        bundle.head.check_shape(HIDDEN, HEAD_HIDDEN)?;
        Ok(Controller { bundle, config })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn classify_sequence(&self, seq: &FeatureMapSeq) -> Result<Verdict, ControllerError> {
        let x = dequantize_sequence(seq, &self.bundle.map_q);
        let h = gru_forward(&x, &self.bundle.gru)?;
        let probability = controller_classify(&h, &self.bundle.head)?;
        Ok(Verdict {
            probability,
            action: decide_action(probability, &self.config),
        })
    }

    pub fn handle_report(&self, report: &FeatureReport) -> Result<ActionInstall, ControllerError> {
        let v = self.classify_sequence(&report.sequence)?;
        Ok(ActionInstall {
            flow_key: report.flow_key,
            action: v.action,
        })
    }

    /// Decodes a framed report and returns the encoded reply for the same switch.
    pub fn handle_report_bytes(&self, bytes: &[u8]) -> Result<Vec<u8>, ControllerError> {
        let (msg, switch_id) = wire::decode(bytes).map_err(ControllerError::MalformedReport)?;
        match msg {
            Message::FeatureReport(r) => {
                let reply = self.handle_report(&r)?;
                Ok(wire::encode(&Message::ActionInstall(reply), switch_id))
            }
            other => Err(ControllerError::UnexpectedMessage(other.msg_type())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dequantize_affine() {
        let q = QuantParams::new(0.1, 0);
        let seq = FeatureMapSeq::zeroed(50);
        assert!(dequantize_sequence(&seq, &q).iter().flatten().all(|v| (v - 5.0).abs() < 1e-12));
        let q = QuantParams::new(0.37, -17);
        let zero = dequantize_sequence(&FeatureMapSeq::zeroed(-17), &q);
        assert!(zero.iter().flatten().all(|v| *v == 0.0));
        for v in -128i32..=127 {
            assert_eq!(q.quantize_i8(q.dequantize(v)) as i32, v);
        }
    }

    #[test]
    fn zero_gru_stays_zero() {
        let w = GruWeights::zeros(16, 64);
        let x = [[0.7f64; 16]; 10];
        assert!(gru_forward(&x, &w).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_step_scalar_gru() {
        let mut w = GruWeights::zeros(1, 1);
        w.w_z.data[0] = 0.5;
        w.w_r.data[0] = -1.0;
        w.w_n.data[0] = 2.0;
        w.b_iz[0] = 0.1;
        w.b_hn[0] = 0.3;
        let x = 0.8f64;
        let z = 1.0 / (1.0 + (-(0.5 * x + 0.1f32 as f64)).exp());
        let r = 1.0 / (1.0 + (x).exp());
        let n = (2.0 * x + r * 0.3f32 as f64).tanh();
        let expected = (1.0 - z) * n;
        let h = gru_forward(&[[x]], &w).unwrap();
        assert!((h[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn gru_shape_errors() {
        let mut w = GruWeights::zeros(16, 64);
        w.b_hn.pop();
        assert!(matches!(gru_forward(&[[0.0; 16]], &w), Err(ControllerError::ShapeMismatch { .. })));
        let w = GruWeights::zeros(16, 64);
        assert!(gru_forward(&[[0.0; 15]], &w).is_err());
    }

    #[test]
    fn head_fixed_points() {
        let mut head = ClassifierHead::zeros(64, 32);
        let h = vec![0.3; 64];
        assert_eq!(controller_classify(&h, &head).unwrap(), 0.5);
        head.dense2_b = 10.0;
        let p = controller_classify(&h, &head).unwrap();
        assert!((p - 0.999_954_602).abs() < 1e-8);
    }

    #[test]
    fn decide_bands_and_ttl() {
        let cfg = ControllerConfig::default();
        assert_eq!(decide_action(0.01, &cfg).action, Action::Allow);
        assert_eq!(decide_action(0.95, &cfg).action, Action::Drop);
        assert_eq!(decide_action(0.5, &cfg).action, Action::Notify);
        assert_eq!(decide_action(0.5, &cfg).ttl_packets, 2000);
        let cfg = ControllerConfig {
            action_ttl_packets: 7,
            ..cfg
        };
        assert_eq!(decide_action(0.95, &cfg).ttl_packets, 7);
    }
}
