//! Split early-exit DDoS detection.
//!
//! A software switch runs an integer-only CNN on per-packet flow features and
//! exits early when confident; uncertain flows are escalated with their last
//! ten pooled feature maps to a controller that runs a GRU and installs an
//! allow/drop/notify rule. A discrete-event simulator drives both on a
//! two-switch topology.

pub mod bundle;
pub mod controller;
pub mod eval;
pub mod flow;
pub mod live;
pub mod packet;
pub mod pcap;
pub mod qnn;
pub mod sim;
pub mod switch;
pub mod wire;

pub use bundle::{load_bundle, make_handcrafted_bundle, save_bundle, validate_bundle, BundleError, ModelBundle};
pub use controller::{Controller, ControllerConfig, ControllerError};
pub use flow::{Action, FeatureMapSeq, FlowAction, FlowEntry, FlowTable};
pub use packet::{canonical_flow_key, parse_packet, FlowKey, PacketRecord, TcpFlags};
pub use switch::{ExitThresholds, PacketVerdict, SwitchDecision, SwitchState};
pub use wire::{decode, encode, ActionInstall, FeatureReport, FrameDecoder, Message, ReportReason, WireError};
