//! Events, handler registry with overwrite semantics, canonical payload
//! codec, and message-flow completeness checking.
//!
//! A course is assembled from `<event, handler>` pairs. Message-passing
//! events cross the simulated network; condition-check events are raised
//! internally by the owning participant and are never serialized.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simnet::VirtualTime;

mod codec;
pub use codec::{decode_message, encode_message, DecodeError};

#[derive(Error, Debug)]
pub enum MsgFlowError {
    #[error("duplicate payload entry `{0}`")]
    DuplicatePayloadName(String),
    #[error("payload entry name must not be empty")]
    EmptyPayloadName,
    #[error("message type must not be empty")]
    EmptyMsgType,
    #[error("message of type `{0}` has no receivers")]
    NoReceivers(String),
    #[error("message of type `{msg_type}`: sender {sender} may not appear among the receivers")]
    SelfAddressed {
        msg_type: String,
        sender: ParticipantId,
    },
    #[error("handler id must not be empty")]
    EmptyHandlerId,
    #[error("no handler bound to {0}")]
    MissingHandler(EventKind),
}

/// Participant identity; the server is always participant 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParticipantId(pub u32);

impl ParticipantId {
    pub const SERVER: ParticipantId = ParticipantId(0);

    pub fn is_server(self) -> bool {
        self == ParticipantId::SERVER
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The two classes of occurrences a handler can be bound to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    /// Arrival of a message of the named type.
    MessagePassing(String),
    /// An internally checked condition, e.g. "all_received" or "time_up".
    ConditionCheck(String),
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKind::MessagePassing(m) => write!(f, "message:{m}"),
            EventKind::ConditionCheck(c) => write!(f, "condition:{c}"),
        }
    }
}

/// A payload value: scalar, flat numeric array, or nested entries.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(f64),
    Array(Vec<f64>),
    Entries(Payload),
}

/// Ordered named entries carried by a message; names unique per level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Payload {
    entries: Vec<(String, Value)>,
}

impl Payload {
    pub fn new() -> Self {
        Payload::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Value) -> Result<(), MsgFlowError> {
        let name = name.into();
        if name.is_empty() {
            return Err(MsgFlowError::EmptyPayloadName);
        }
        if self.get(&name).is_some() {
            return Err(MsgFlowError::DuplicatePayloadName(name));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        match self.get(name)? {
            Value::Scalar(x) => Some(*x),
            _ => None,
        }
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        match self.get(name)? {
            Value::Array(xs) => Some(xs),
            _ => None,
        }
    }

    pub fn nested(&self, name: &str) -> Option<&Payload> {
        match self.get(name)? {
            Value::Entries(p) => Some(p),
            _ => None,
        }
    }

    pub fn entries(&self) -> &[(String, Value)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A typed message exchanged between participants at a virtual timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub msg_type: String,
    pub sender: ParticipantId,
    pub receivers: Vec<ParticipantId>,
    pub timestamp: VirtualTime,
    pub payload: Payload,
}

impl Message {
    /// A broadcast or update message; the sender may not receive it.
    pub fn new(
        msg_type: impl Into<String>,
        sender: ParticipantId,
        receivers: Vec<ParticipantId>,
        timestamp: VirtualTime,
        payload: Payload,
    ) -> Result<Self, MsgFlowError> {
        let msg_type = msg_type.into();
        if msg_type.is_empty() {
            return Err(MsgFlowError::EmptyMsgType);
        }
        if receivers.is_empty() {
            return Err(MsgFlowError::NoReceivers(msg_type));
        }
        if receivers.contains(&sender) {
            return Err(MsgFlowError::SelfAddressed { msg_type, sender });
        }
        Ok(Message {
            msg_type,
            sender,
            receivers,
            timestamp,
            payload,
        })
    }

    /// A self-addressed control entry (timer or raised condition); these
    /// never cross the simulated network.
    pub fn internal(
        msg_type: impl Into<String>,
        owner: ParticipantId,
        timestamp: VirtualTime,
        payload: Payload,
    ) -> Result<Self, MsgFlowError> {
        let msg_type = msg_type.into();
        if msg_type.is_empty() {
            return Err(MsgFlowError::EmptyMsgType);
        }
        Ok(Message {
            msg_type,
            sender: owner,
            receivers: vec![owner],
            timestamp,
            payload,
        })
    }
}

/// Which side of the federation a handler runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Server,
    Client,
}

/// Declares a handler's identity and message I/O for flow checking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandlerDecl {
    pub id: String,
    pub role: Role,
    pub consumes: BTreeSet<String>,
    pub produces: BTreeSet<String>,
}

impl HandlerDecl {
    pub fn new(id: impl Into<String>, role: Role, consumes: &[&str], produces: &[&str]) -> Self {
        HandlerDecl {
            id: id.into(),
            role,
            consumes: consumes.iter().map(|s| s.to_string()).collect(),
            produces: produces.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Raised when a registration displaces an existing binding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverwriteWarning {
    pub event: EventKind,
    pub displaced: String,
    pub replacement: String,
}

impl fmt::Display for OverwriteWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: handler `{}` overwritten by `{}`",
            self.event, self.displaced, self.replacement
        )
    }
}

/// Event-to-handler bindings; at most one effective handler per event,
/// the latest registration winning.
#[derive(Debug, Clone, Default)]
pub struct HandlerRegistry {
    bindings: BTreeMap<EventKind, HandlerDecl>,
    log: Vec<(EventKind, HandlerDecl)>,
}

impl HandlerRegistry {
    pub fn new() -> Self {
        HandlerRegistry::default()
    }

    /// Bind `decl` to `event`, returning a warning if a binding is displaced.
    pub fn register(
        &mut self,
        event: EventKind,
        decl: HandlerDecl,
    ) -> Result<Option<OverwriteWarning>, MsgFlowError> {
        if decl.id.is_empty() {
            return Err(MsgFlowError::EmptyHandlerId);
        }
        self.log.push((event.clone(), decl.clone()));
        let displaced = self.bindings.insert(event.clone(), decl);
        Ok(displaced.map(|old| {
            let warning = OverwriteWarning {
                replacement: self.bindings[&event].id.clone(),
                displaced: old.id,
                event,
            };
            log::warn!("{warning}");
            warning
        }))
    }

    /// The single effective handler for `event`.
    pub fn dispatch(&self, event: &EventKind) -> Result<&HandlerDecl, MsgFlowError> {
        self.bindings
            .get(event)
            .ok_or_else(|| MsgFlowError::MissingHandler(event.clone()))
    }

    /// Final effective bindings, in deterministic event order.
    pub fn bindings(&self) -> impl Iterator<Item = (&EventKind, &HandlerDecl)> {
        self.bindings.iter()
    }

    /// Every registration in insertion order, including overwritten ones.
    pub fn registration_log(&self) -> impl Iterator<Item = (&EventKind, &str)> {
        self.log.iter().map(|(e, d)| (e, d.id.as_str()))
    }

    /// Rebuild a registry by replaying the registration log.
    pub fn replay(&self) -> HandlerRegistry {
        let mut fresh = HandlerRegistry::new();
        for (event, decl) in &self.log {
            fresh
                .register(event.clone(), decl.clone())
                .expect("previously accepted registration");
        }
        fresh
    }
}

/// Node of the message-flow graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum FlowNode {
    Start,
    Msg(String),
    Termination,
}

impl fmt::Display for FlowNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowNode::Start => write!(f, "start"),
            FlowNode::Msg(m) => write!(f, "{m}"),
            FlowNode::Termination => write!(f, "termination"),
        }
    }
}

/// Verdict of the completeness check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Completeness {
    Complete,
    /// A start-to-termination path exists but the listed message types are
    /// unreachable from start (redundant handlers).
    CompleteWithWarnings(BTreeSet<String>),
    Incomplete,
}

/// Directed graph over message types plus distinguished start/termination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowGraph {
    nodes: BTreeSet<FlowNode>,
    edges: BTreeSet<(FlowNode, FlowNode)>,
}

impl FlowGraph {
    pub fn nodes(&self) -> &BTreeSet<FlowNode> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<(FlowNode, FlowNode)> {
        &self.edges
    }

    fn reachable_from_start(&self) -> BTreeSet<FlowNode> {
        let mut seen: BTreeSet<FlowNode> = BTreeSet::new();
        let mut frontier = vec![FlowNode::Start];
        seen.insert(FlowNode::Start);
        while let Some(node) = frontier.pop() {
            for (from, to) in &self.edges {
                if *from == node && !seen.contains(to) {
                    seen.insert(to.clone());
                    frontier.push(to.clone());
                }
            }
        }
        seen
    }

    /// Complete iff termination is reachable and no node is orphaned.
    pub fn check_completeness(&self) -> Completeness {
        let reach = self.reachable_from_start();
        if !reach.contains(&FlowNode::Termination) {
            return Completeness::Incomplete;
        }
        let unreachable: BTreeSet<String> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                FlowNode::Msg(m) if !reach.contains(n) => Some(m.clone()),
                _ => None,
            })
            .collect();
        if unreachable.is_empty() {
            Completeness::Complete
        } else {
            Completeness::CompleteWithWarnings(unreachable)
        }
    }

    /// DOT rendering with deterministic node and edge order.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph message_flow {\n  rankdir=LR;\n");
        for node in &self.nodes {
            let shape = match node {
                FlowNode::Start => "circle",
                FlowNode::Termination => "doublecircle",
                FlowNode::Msg(_) => "box",
            };
            out.push_str(&format!("  \"{node}\" [shape={shape}];\n"));
        }
        for (from, to) in &self.edges {
            out.push_str(&format!("  \"{from}\" -> \"{to}\";\n"));
        }
        out.push_str("}\n");
        out
    }
}

/// Derive the message-flow graph from the effective handler bindings.
///
/// A handler with empty `consumes` starts flows (edges from start to each
/// produced type); one with empty `produces` ends them (edges from each
/// consumed type to termination).
pub fn build_flow_graph(registry: &HandlerRegistry) -> FlowGraph {
    let mut nodes: BTreeSet<FlowNode> = BTreeSet::new();
    nodes.insert(FlowNode::Start);
    nodes.insert(FlowNode::Termination);
    let mut edges: BTreeSet<(FlowNode, FlowNode)> = BTreeSet::new();

    for (_, decl) in registry.bindings() {
        for m in decl.consumes.iter().chain(decl.produces.iter()) {
            nodes.insert(FlowNode::Msg(m.clone()));
        }
        if decl.consumes.is_empty() {
            for p in &decl.produces {
                edges.insert((FlowNode::Start, FlowNode::Msg(p.clone())));
            }
        }
        if decl.produces.is_empty() {
            for c in &decl.consumes {
                edges.insert((FlowNode::Msg(c.clone()), FlowNode::Termination));
            }
        }
        for c in &decl.consumes {
            for p in &decl.produces {
                edges.insert((FlowNode::Msg(c.clone()), FlowNode::Msg(p.clone())));
            }
        }
    }

    FlowGraph { nodes, edges }
}
