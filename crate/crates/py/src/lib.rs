use std::net::Ipv4Addr;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use splitguard::bundle::{decode_bundle, describe_bundle, encode_bundle, make_zero_controller_bundle};
use splitguard::controller::ControllerConfig;
use splitguard::eval::{evaluate, format_labels, generate_labeled_trace, read_labels};
use splitguard::pcap::{read_trace_all, write_trace};
use splitguard::qnn::QuantParams;
use splitguard::sim::{action_counts, run_scenario, Scenario};
use splitguard::switch::{precompute_thresholds, threshold_code, Disposition};
use splitguard::{
    decode, encode, load_bundle, make_handcrafted_bundle, save_bundle, validate_bundle, Action, Controller, Message, ModelBundle,
    PacketRecord, SwitchDecision, SwitchState, TcpFlags,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_ip(s: &str) -> PyResult<Ipv4Addr> {
    s.parse().map_err(|_| PyValueError::new_err(format!("bad IPv4 address {s:?}")))
}

fn action_name(a: Action) -> &'static str {
    match a {
        Action::Allow => "allow",
        Action::Drop => "drop",
        Action::Notify => "notify",
    }
}

/// Validated EEP4 model bundle.
#[pyclass(name = "Bundle", module = "splitguard_py", skip_from_py_object)]
#[derive(Clone)]
struct PyBundle {
    inner: Arc<ModelBundle>,
}

#[pymethods]
impl PyBundle {
    #[staticmethod]
    fn handcrafted() -> Self {
        PyBundle {
            inner: Arc::new(make_handcrafted_bundle()),
        }
    }

    #[staticmethod]
    fn zero_controller() -> Self {
        PyBundle {
            inner: Arc::new(make_zero_controller_bundle()),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyBundle {
            inner: Arc::new(load_bundle(path).map_err(value_err)?),
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let b = decode_bundle(data).map_err(value_err)?;
        validate_bundle(&b).map_err(value_err)?;
        Ok(PyBundle { inner: Arc::new(b) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_bundle(&self.inner, path).map_err(value_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &encode_bundle(&self.inner))
    }

    fn describe(&self) -> String {
        describe_bundle(&self.inner)
    }

    /// (tau_benign, tau_attack, t_benign_q, t_attack_q)
    #[getter]
    fn thresholds(&self) -> (f64, f64, i8, i8) {
        let t = &self.inner.thresholds;
        (t.tau_benign, t.tau_attack, t.t_benign_q, t.t_attack_q)
    }

    /// Copy with thresholds re-derived for tau_attack = tau, tau_benign = 1 - tau.
    fn with_tau(&self, tau: f64) -> PyResult<Self> {
        let mut b = (*self.inner).clone();
        b.thresholds = precompute_thresholds(1.0 - tau, tau, &b.linear_exit.logit_q).map_err(value_err)?;
        Ok(PyBundle { inner: Arc::new(b) })
    }

    fn __repr__(&self) -> String {
        let t = &self.inner.thresholds;
        format!("Bundle(tau_attack={}, t_attack_q={})", t.tau_attack, t.t_attack_q)
    }
}

/// One emulated data-plane switch.
#[pyclass(name = "Switch", module = "splitguard_py")]
struct PySwitch {
    inner: SwitchState,
}

#[pymethods]
impl PySwitch {
    #[new]
    #[pyo3(signature = (bundle, switch_id = 1))]
    fn new(bundle: &PyBundle, switch_id: u16) -> Self {
        PySwitch {
            inner: SwitchState::new(switch_id, Arc::clone(&bundle.inner)),
        }
    }

    /// Returns (disposition, decision, report). `flags` uses the letters
    /// F S R P A U E C; `decision` is None when an installed rule answered;
    /// `report` holds encoded FeatureReport bytes when one is due.
    #[pyo3(signature = (timestamp, src, sport, dst, dport, proto = 6, payload_len = 0, flags = "", window = 0))]
    #[allow(clippy::too_many_arguments)]
    fn process_packet<'py>(
        &mut self,
        py: Python<'py>,
        timestamp: f64,
        src: &str,
        sport: u16,
        dst: &str,
        dport: u16,
        proto: u8,
        payload_len: u16,
        flags: &str,
        window: u16,
    ) -> PyResult<(&'static str, Option<&'static str>, Option<Bound<'py, PyBytes>>)> {
        let (s, d) = ((parse_ip(src)?, sport), (parse_ip(dst)?, dport));
        let pkt = match proto {
            6 => {
                let mut f = TcpFlags::default();
                for c in flags.chars() {
                    match c.to_ascii_uppercase() {
                        'F' => f.fin = true,
                        'S' => f.syn = true,
                        'R' => f.rst = true,
                        'P' => f.psh = true,
                        'A' => f.ack = true,
                        'U' => f.urg = true,
                        'E' => f.ece = true,
                        'C' => f.cwr = true,
                        _ => return Err(PyValueError::new_err(format!("unknown TCP flag {c:?}"))),
                    }
                }
                PacketRecord::tcp(timestamp, s, d, payload_len, f, window)
            }
            17 => PacketRecord::udp(timestamp, s, d, payload_len),
            p => return Err(PyValueError::new_err(format!("protocol {p} is not TCP or UDP"))),
        };
        let v = self.inner.process_packet(&pkt, timestamp);
        let disp = match v.disposition {
            Disposition::Forward => "forward",
            Disposition::Dropped => "dropped",
        };
        let dec = v.decision.map(|d| match d {
            SwitchDecision::Benign => "benign",
            SwitchDecision::Attack => "attack",
            SwitchDecision::Uncertain => "uncertain",
        });
        let rep = v
            .report
            .map(|r| PyBytes::new(py, &encode(&Message::FeatureReport(r), self.inner.id)));
        Ok((disp, dec, rep))
    }

    /// Installs an encoded ActionInstall message.
    #[pyo3(signature = (data, now = 0.0))]
    fn apply_action(&mut self, data: &[u8], now: f64) -> PyResult<()> {
        match decode(data).map_err(value_err)? {
            (Message::ActionInstall(a), _) => {
                self.inner.install_action(a.flow_key, a.action, now);
                Ok(())
            }
            _ => Err(PyValueError::new_err("expected an ActionInstall message")),
        }
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = self.inner.stats();
        let d = PyDict::new(py);
        d.set_item("packets", s.packets)?;
        d.set_item("forwarded", s.forwarded)?;
        d.set_item("dropped", s.local_drops + s.rule_drops)?;
        d.set_item("reports", s.reports_uncertain + s.reports_reverify + s.reports_periodic)?;
        d.set_item("actions_installed", s.actions_installed)?;
        Ok(d)
    }
}

/// Control-plane GRU classifier answering feature reports.
#[pyclass(name = "Controller", module = "splitguard_py")]
struct PyController {
    inner: Controller,
}

#[pymethods]
impl PyController {
    #[new]
    #[pyo3(signature = (bundle, tau = None))]
    fn new(bundle: &PyBundle, tau: Option<f64>) -> PyResult<Self> {
        let t = &bundle.inner.thresholds;
        let cfg = match tau {
            Some(x) => ControllerConfig::with_tau(x),
            None => ControllerConfig {
                tau_benign: t.tau_benign,
                tau_attack: t.tau_attack,
                ..Default::default()
            },
        };
        Ok(PyController {
            inner: Controller::new(Arc::clone(&bundle.inner), cfg).map_err(value_err)?,
        })
    }

    /// Encoded FeatureReport in, encoded ActionInstall out.
    fn handle_report<'py>(&self, py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.handle_report_bytes(data).map_err(value_err)?))
    }

    /// (probability, action) for an encoded FeatureReport.
    fn classify(&self, data: &[u8]) -> PyResult<(f64, &'static str)> {
        match decode(data).map_err(value_err)? {
            (Message::FeatureReport(r), _) => {
                let v = self.inner.classify_sequence(&r.sequence).map_err(value_err)?;
                Ok((v.probability, action_name(v.action.action)))
            }
            _ => Err(PyValueError::new_err("expected a FeatureReport message")),
        }
    }
}

/// Integer logit code for probability `tau` under (scale, zero_point).
#[pyfunction]
#[pyo3(name = "threshold_code")]
fn py_threshold_code(tau: f64, scale: f64, zero_point: i32) -> PyResult<i8> {
    if !(scale > 0.0 && scale.is_finite()) || !(0.0 < tau && tau < 1.0) {
        return Err(PyValueError::new_err("need scale > 0 and 0 < tau < 1"));
    }
    Ok(threshold_code(tau, &QuantParams::new(scale, zero_point)))
}

/// Runs a scenario (the built-in default when `scenario` is None) and returns
/// the per-second series as a dict of lists.
#[pyfunction]
#[pyo3(signature = (mitigation = true, scenario = None, seed = None))]
fn simulate<'py>(
    py: Python<'py>,
    mitigation: bool,
    scenario: Option<&str>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut scn = match scenario {
        Some(p) => Scenario::load(p).map_err(value_err)?,
        None => Scenario::default_scenario(),
    };
    scn.mitigation = mitigation;
    if let Some(s) = seed {
        scn.seed = s;
    }
    let t = run_scenario(&scn).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("second", t.rows.iter().map(|r| r.second).collect::<Vec<_>>())?;
    d.set_item("benign_goodput_bps", t.rows.iter().map(|r| r.benign_goodput_bps).collect::<Vec<_>>())?;
    d.set_item("benign_loss_pct", t.rows.iter().map(|r| r.benign_loss_pct).collect::<Vec<_>>())?;
    d.set_item("attack_delivered_pkts", t.rows.iter().map(|r| r.attack_delivered_pkts).collect::<Vec<_>>())?;
    d.set_item("controller_messages", t.controller_messages)?;
    d.set_item("actions", action_counts(&t).into_iter().collect::<Vec<_>>())?;
    Ok(d)
}

/// Writes a synthetic labeled trace; returns (packets, flows).
#[pyfunction]
#[pyo3(signature = (pcap, labels, seed = 1, scale = 1))]
fn generate_trace(pcap: &str, labels: &str, seed: u64, scale: usize) -> PyResult<(usize, usize)> {
    let (recs, lab) = generate_labeled_trace(seed, scale);
    write_trace(pcap, &recs).map_err(|e| PyIOError::new_err(e.to_string()))?;
    std::fs::write(labels, format_labels(&lab)).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok((recs.len(), lab.len()))
}

/// Tau sweep over a labeled pcap; one dict per tau.
#[pyfunction]
#[pyo3(signature = (pcap, labels, taus, bundle = None))]
fn evaluate_trace<'py>(
    py: Python<'py>,
    pcap: &str,
    labels: &str,
    taus: Vec<f64>,
    bundle: Option<&PyBundle>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let recs = read_trace_all(pcap).map_err(value_err)?;
    let lab = read_labels(labels).map_err(value_err)?;
    let b = bundle.map_or_else(|| Arc::new(make_handcrafted_bundle()), |b| Arc::clone(&b.inner));
    let rows = evaluate(&recs, &lab, b, &taus).map_err(value_err)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("tau", r.tau)?;
            d.set_item("samples", r.samples)?;
            d.set_item("switch_exit_ratio", r.switch_exit_ratio)?;
            d.set_item("controller_exit_ratio", r.controller_exit_ratio)?;
            d.set_item("switch_f1", r.switch_f1)?;
            d.set_item("controller_f1", r.controller_f1)?;
            d.set_item("overall_f1", r.overall_f1)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn splitguard_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBundle>()?;
    m.add_class::<PySwitch>()?;
    m.add_class::<PyController>()?;
    m.add_function(wrap_pyfunction!(py_threshold_code, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_trace, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_trace, m)?)?;
    Ok(())
}
