use super::{KgDocument, KgEdge, KgNode, StateKind, TruthRow, TruthTable};
use crate::stream::NANOS_PER_SEC;

/// Illustrative 3D-printer knowledge graph with one causal pair: a hand
/// pressing the power button causes the controller to switch on or off.
/// The state alphabets are authored for demonstration.
pub fn printer_kg() -> KgDocument {
    let nodes = vec![
        KgNode::new("hand_arm", "Hand&Arm")
            .with_state("press_button", StateKind::Transition)
            .with_state("background", StateKind::Level),
        KgNode::new("controller", "Controller")
            .with_state("power_on", StateKind::Transition)
            .with_state("power_off", StateKind::Transition)
            .with_state("background", StateKind::Level),
        KgNode::new("nozzle", "Nozzle")
            .with_state("heating", StateKind::Transition)
            .with_state("cooling", StateKind::Transition),
        KgNode::new("bed", "Bed")
            .with_state("heating", StateKind::Transition)
            .with_state("cooling", StateKind::Transition),
        KgNode::new("filament", "Filament")
            .with_state("feeding", StateKind::Level)
            .with_state("idle", StateKind::Level),
    ];
    let edges = vec![
        KgEdge::new("hand_arm->controller", "hand_arm", "controller"),
        KgEdge::new("controller->hand_arm", "controller", "hand_arm"),
        KgEdge::new("controller->nozzle", "controller", "nozzle"),
        KgEdge::new("controller->bed", "controller", "bed"),
        KgEdge::new("nozzle->filament", "nozzle", "filament"),
    ];
    let truth_tables = vec![TruthTable {
        table_id: "press_button_power".into(),
        cause_node: "hand_arm".into(),
        effect_nodes: vec!["controller".into()],
        rows: vec![
            TruthRow::new(["power_on"], "press_button"),
            TruthRow::new(["power_off"], "press_button"),
        ],
        max_wait_ns: 5 * NANOS_PER_SEC,
    }];
    KgDocument {
        nodes,
        edges,
        truth_tables,
    }
}
