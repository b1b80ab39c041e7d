//! Control messages, handover traces and message accounting shared by the
//! EnCoR control plane, the LTE baseline and charging.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::addressing::{Packet, UePrivateAddr};
use crate::security::{Autn, Nonce, Qci, Res, SessionKeys};
use crate::sim::{Categorize, SimTime};

/// Logical network element. Several elements may share one simulator node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Element {
    Ue(u32),
    Inb(u32),
    Hop(u32),
    Sme,
    SubDb,
    Enb(u32),
    Mme,
    Sgw,
    Pgw,
    Hss,
    Ocs,
    Cp(u32),
    Internet,
}

impl Element {
    /// Central-core elements.
    pub fn is_core(self) -> bool {
        matches!(
            self,
            Element::Sme
                | Element::SubDb
                | Element::Mme
                | Element::Sgw
                | Element::Pgw
                | Element::Hss
                | Element::Ocs
        )
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Element::Ue(i) => write!(f, "UE{i}"),
            Element::Inb(i) => write!(f, "iNB{i}"),
            Element::Hop(i) => write!(f, "HOP{i}"),
            Element::Enb(i) => write!(f, "eNB{i}"),
            Element::Cp(i) => write!(f, "CP{i}"),
            Element::Sme => f.write_str("SME"),
            Element::SubDb => f.write_str("SubDB"),
            Element::Mme => f.write_str("MME"),
            Element::Sgw => f.write_str("S-GW"),
            Element::Pgw => f.write_str("P-GW"),
            Element::Hss => f.write_str("HSS"),
            Element::Ocs => f.write_str("OCS"),
            Element::Internet => f.write_str("Internet"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    AttachRequest,
    AuthChallenge,
    AuthResponse,
    AuthFailure,
    AttachReject,
    InitialContextSetup,
    AttachAccept,
    HoRequired,
    HoRequest,
    HoRequestAck,
    HoPreparationFailure,
    HoCommand,
    HoConfirm,
    HoCompleteNotify,
    UeContextRelease,
    KeyRefreshRequest,
    KeyRefreshResponse,
    KeyRefreshCommand,
    // LTE only
    CreateSessionRequest,
    CreateSessionResponse,
    CreateIndirectTunnelReq,
    CreateIndirectTunnelResp,
    EnbStatusTransfer,
    MmeStatusTransfer,
    HoNotify,
    ModifyBearerReq,
    ModifyBearerResp,
    UeContextReleaseCommand,
    UeContextReleaseComplete,
    // charging
    QuotaRequest,
    QuotaGrant,
    CreditRequest,
    CreditGrant,
}

impl MessageKind {
    pub fn name(self) -> &'static str {
        use MessageKind::*;
        match self {
            AttachRequest => "AttachRequest",
            AuthChallenge => "AuthChallenge",
            AuthResponse => "AuthResponse",
            AuthFailure => "AuthFailure",
            AttachReject => "AttachReject",
            InitialContextSetup => "InitialContextSetup",
            AttachAccept => "AttachAccept",
            HoRequired => "HoRequired",
            HoRequest => "HoRequest",
            HoRequestAck => "HoRequestAck",
            HoPreparationFailure => "HoPreparationFailure",
            HoCommand => "HoCommand",
            HoConfirm => "HoConfirm",
            HoCompleteNotify => "HoCompleteNotify",
            UeContextRelease => "UeContextRelease",
            KeyRefreshRequest => "KeyRefreshRequest",
            KeyRefreshResponse => "KeyRefreshResponse",
            KeyRefreshCommand => "KeyRefreshCommand",
            CreateSessionRequest => "CreateSessionRequest",
            CreateSessionResponse => "CreateSessionResponse",
            CreateIndirectTunnelReq => "CreateIndirectTunnelReq",
            CreateIndirectTunnelResp => "CreateIndirectTunnelResp",
            EnbStatusTransfer => "eNBStatusTransfer",
            MmeStatusTransfer => "MMEStatusTransfer",
            HoNotify => "HoNotify",
            ModifyBearerReq => "ModifyBearerReq",
            ModifyBearerResp => "ModifyBearerResp",
            UeContextReleaseCommand => "UeContextReleaseCommand",
            UeContextReleaseComplete => "UeContextReleaseComplete",
            QuotaRequest => "QuotaRequest",
            QuotaGrant => "QuotaGrant",
            CreditRequest => "CreditRequest",
            CreditGrant => "CreditGrant",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// UE state carried between base stations during handover.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandoverContext {
    pub source: u32,
    pub target: u32,
    pub addr: UePrivateAddr,
    pub qci: Qci,
    pub keys: Option<SessionKeys>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    None,
    Attach { imsi: u64 },
    Challenge { rand: Nonce, autn: Autn },
    Response { res: Res },
    Failure { cause: String },
    ContextSetup { keys: SessionKeys, addr: UePrivateAddr, qci: Qci },
    Accept { addr: UePrivateAddr },
    Handover(HandoverContext),
    /// Opaque handover command built by the target base station.
    Command(Vec<u8>),
    Keys(SessionKeys),
    Tunnel { teid: u32 },
    Quota { subscriber: u64, bytes: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlMessage {
    pub kind: MessageKind,
    pub src: Element,
    pub dst: Element,
    pub via_core: bool,
    /// Subscriber this message concerns.
    pub ue: u64,
    /// Procedure instance used to group messages into traces.
    pub procedure: u64,
    /// HOP that relays this message, if any.
    pub relay: Option<u32>,
    pub payload: Payload,
}

impl ControlMessage {
    pub fn new(kind: MessageKind, src: Element, dst: Element, ue: u64, procedure: u64) -> Self {
        Self {
            kind,
            src,
            dst,
            via_core: src.is_core() || dst.is_core(),
            ue,
            procedure,
            relay: None,
            payload: Payload::None,
        }
    }

    pub fn with_payload(mut self, payload: Payload) -> Self {
        self.payload = payload;
        self
    }

    pub fn relayed_by(mut self, hop: u32) -> Self {
        self.relay = Some(hop);
        self
    }

    /// Marks the message as part of a core-anchored procedure even though
    /// neither endpoint is a core element (S1 radio-side steps).
    pub fn core_anchored(mut self) -> Self {
        self.via_core = true;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("control messages always serialize")
    }
}

/// User-plane packet travelling through a simulated network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPacket {
    pub id: u64,
    pub imsi: u64,
    pub packet: Packet,
    pub sent_at: SimTime,
}

/// Everything a cellular network simulation puts on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Signal {
    Control(ControlMessage),
    Data(DataPacket),
}

impl Categorize for Signal {
    fn category(&self) -> &'static str {
        match self {
            Signal::Control(m) => m.kind.name(),
            Signal::Data(_) => "data",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HandoverMode {
    CoreAssisted,
    Direct,
    S1,
}

impl fmt::Display for HandoverMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HandoverMode::CoreAssisted => "core-assisted",
            HandoverMode::Direct => "direct",
            HandoverMode::S1 => "s1",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceOutcome {
    InProgress,
    Completed,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub time: SimTime,
    pub msg: ControlMessage,
    /// Physical links traversed; a relayed message is still one logical message.
    pub physical_hops: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandoverTrace {
    pub procedure: u64,
    pub ue: u64,
    pub mode: HandoverMode,
    pub source: u32,
    pub target: u32,
    pub start: SimTime,
    pub end: Option<SimTime>,
    pub outcome: TraceOutcome,
    pub messages: Vec<TraceEntry>,
}

impl HandoverTrace {
    pub fn new(procedure: u64, ue: u64, mode: HandoverMode, source: u32, target: u32, start: SimTime) -> Self {
        Self {
            procedure,
            ue,
            mode,
            source,
            target,
            start,
            end: None,
            outcome: TraceOutcome::InProgress,
            messages: Vec::new(),
        }
    }

    pub fn completion_time(&self) -> Option<SimTime> {
        self.end.map(|e| e - self.start)
    }

    pub fn is_completed(&self) -> bool {
        self.outcome == TraceOutcome::Completed
    }

    pub fn kinds(&self) -> Vec<MessageKind> {
        self.messages.iter().map(|e| e.msg.kind).collect()
    }

    /// `seq,time_us,kind,src,dst,via_core` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seq,time_us,kind,src,dst,via_core\n");
        for (i, e) in self.messages.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i + 1,
                e.time.as_micros(),
                e.msg.kind,
                e.msg.src,
                e.msg.dst,
                e.msg.via_core
            ));
        }
        out
    }

    /// Plain-text message sequence chart.
    pub fn to_sequence_chart(&self) -> String {
        let mut out = format!(
            "{} handover, UE {} : iNB{} -> iNB{}\n",
            self.mode, self.ue, self.source, self.target
        );
        for (i, e) in self.messages.iter().enumerate() {
            let via = match e.msg.relay {
                Some(h) => format!(" (via HOP{h})"),
                None => String::new(),
            };
            out.push_str(&format!(
                "{:>3} {:>10.3} ms  {:>8} -> {:<8} {}{}{}\n",
                i + 1,
                e.time.as_millis_f64(),
                e.msg.src.to_string(),
                e.msg.dst.to_string(),
                e.msg.kind,
                via,
                if e.msg.via_core { " [core]" } else { "" }
            ));
        }
        out
    }
}

/// Messages of a non-handover procedure (attach, re-key).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcedureLog {
    pub procedure: u64,
    pub ue: u64,
    pub messages: Vec<TraceEntry>,
    pub outcome: TraceOutcome,
}

#[derive(Debug, Clone)]
enum Procedure {
    Handover(HandoverTrace),
    Other(ProcedureLog),
}

/// Open and finished procedures of one network, keyed by procedure id.
#[derive(Debug, Clone, Default)]
pub struct ProcedureBook {
    next: u64,
    procedures: BTreeMap<u64, Procedure>,
    finished: Vec<u64>,
}

impl ProcedureBook {
    pub fn open_handover(&mut self, ue: u64, mode: HandoverMode, source: u32, target: u32, start: SimTime) -> u64 {
        self.next += 1;
        let id = self.next;
        self.procedures.insert(
            id,
            Procedure::Handover(HandoverTrace::new(id, ue, mode, source, target, start)),
        );
        id
    }

    pub fn open_log(&mut self, ue: u64) -> u64 {
        self.next += 1;
        let id = self.next;
        self.procedures.insert(
            id,
            Procedure::Other(ProcedureLog {
                procedure: id,
                ue,
                messages: Vec::new(),
                outcome: TraceOutcome::InProgress,
            }),
        );
        id
    }

    pub fn record(&mut self, msg: &ControlMessage, time: SimTime, physical_hops: u8) {
        let entry = TraceEntry {
            time,
            msg: msg.clone(),
            physical_hops,
        };
        match self.procedures.get_mut(&msg.procedure) {
            Some(Procedure::Handover(t)) => t.messages.push(entry),
            Some(Procedure::Other(l)) => l.messages.push(entry),
            None => {}
        }
    }

    /// Closes a procedure; later calls for the same id are ignored.
    pub fn finish(&mut self, procedure: u64, now: SimTime, outcome: TraceOutcome) {
        match self.procedures.get_mut(&procedure) {
            Some(Procedure::Handover(t)) if t.outcome == TraceOutcome::InProgress => {
                t.end = Some(now);
                t.outcome = outcome;
                self.finished.push(procedure);
            }
            Some(Procedure::Other(l)) if l.outcome == TraceOutcome::InProgress => {
                l.outcome = outcome;
            }
            _ => {}
        }
    }

    pub fn handover(&self, procedure: u64) -> Option<&HandoverTrace> {
        match self.procedures.get(&procedure) {
            Some(Procedure::Handover(t)) => Some(t),
            _ => None,
        }
    }

    pub fn log(&self, procedure: u64) -> Option<&ProcedureLog> {
        match self.procedures.get(&procedure) {
            Some(Procedure::Other(l)) => Some(l),
            _ => None,
        }
    }

    pub fn handovers(&self) -> impl Iterator<Item = &HandoverTrace> {
        self.procedures.values().filter_map(|p| match p {
            Procedure::Handover(t) => Some(t),
            Procedure::Other(_) => None,
        })
    }

    /// Handover traces that ended since the last call.
    pub fn drain_finished(&mut self) -> Vec<HandoverTrace> {
        let ids = std::mem::take(&mut self.finished);
        ids.iter().filter_map(|id| self.handover(*id).cloned()).collect()
    }
}

/// Path a user packet takes to the Internet and its one-way latency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserPath {
    pub hops: Vec<Element>,
    pub latency: SimTime,
}

impl UserPath {
    pub fn traverses_core(&self) -> bool {
        self.hops.iter().any(|e| e.is_core())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCounts {
    pub total: usize,
    pub via_core: usize,
    pub per_kind: BTreeMap<String, usize>,
}

impl fmt::Display for MessageCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.total, self.via_core)
    }
}

pub fn count_messages(trace: &HandoverTrace) -> MessageCounts {
    let mut counts = MessageCounts::default();
    for e in &trace.messages {
        counts.total += 1;
        if e.msg.via_core {
            counts.via_core += 1;
        }
        *counts.per_kind.entry(e.msg.kind.name().to_string()).or_default() += 1;
    }
    counts
}

/// Canonical core-assisted sequence: 7 messages, 2 through the core.
pub const CORE_ASSISTED_SEQUENCE: [MessageKind; 7] = [
    MessageKind::HoRequired,
    MessageKind::HoRequest,
    MessageKind::HoRequestAck,
    MessageKind::HoCommand,
    MessageKind::HoConfirm,
    MessageKind::HoCompleteNotify,
    MessageKind::UeContextRelease,
];

/// Canonical direct sequence: the core-assisted one without the SME leg.
pub const DIRECT_SEQUENCE: [MessageKind; 6] = [
    MessageKind::HoRequired,
    MessageKind::HoRequestAck,
    MessageKind::HoCommand,
    MessageKind::HoConfirm,
    MessageKind::HoCompleteNotify,
    MessageKind::UeContextRelease,
];

/// Canonical S1 handover: 15 messages, all core-anchored.
pub const S1_SEQUENCE: [MessageKind; 15] = [
    MessageKind::HoRequired,
    MessageKind::HoRequest,
    MessageKind::HoRequestAck,
    MessageKind::CreateIndirectTunnelReq,
    MessageKind::CreateIndirectTunnelResp,
    MessageKind::HoCommand,
    MessageKind::HoCommand,
    MessageKind::EnbStatusTransfer,
    MessageKind::MmeStatusTransfer,
    MessageKind::HoConfirm,
    MessageKind::HoNotify,
    MessageKind::ModifyBearerReq,
    MessageKind::ModifyBearerResp,
    MessageKind::UeContextReleaseCommand,
    MessageKind::UeContextReleaseComplete,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn via_core_follows_endpoints() {
        let m = ControlMessage::new(MessageKind::HoRequired, Element::Inb(0), Element::Sme, 1, 0);
        assert!(m.via_core);
        let m = ControlMessage::new(MessageKind::HoCommand, Element::Inb(0), Element::Ue(0), 1, 0);
        assert!(!m.via_core);
        assert!(m.clone().core_anchored().via_core);
    }

    #[test]
    fn empty_trace_counts_zero() {
        let t = HandoverTrace::new(0, 1, HandoverMode::Direct, 0, 1, SimTime::ZERO);
        assert_eq!(count_messages(&t), MessageCounts::default());
        assert_eq!(t.to_csv(), "seq,time_us,kind,src,dst,via_core\n");
    }

    #[test]
    fn canonical_lengths() {
        assert_eq!(CORE_ASSISTED_SEQUENCE.len(), 7);
        assert_eq!(DIRECT_SEQUENCE.len(), 6);
        assert_eq!(S1_SEQUENCE.len(), 15);
    }
}
