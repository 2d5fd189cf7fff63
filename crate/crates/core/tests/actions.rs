use qosearch_core::actions::{apply_action, guaranteed_reservation_kbps, stop_action, ActionError, ActionId, ActionKind};
use qosearch_core::netsim::{
    FlowId, LinkConfig, MediaFlowConfig, QueueConfig, ServiceClass, SimWorld, WorldConfig,
};

fn world(capacity_kbps: f64, calls: usize) -> SimWorld {
    let cfg = WorldConfig {
        link: LinkConfig {
            latency_ms: 30.0,
            loss_rate: 0.0,
            capacity_kbps,
        },
        queue: QueueConfig::tail_drop(60),
        media: vec![MediaFlowConfig::default(); calls],
        background: Vec::new(),
        timeline: Vec::new(),
        record_trace: false,
    };
    SimWorld::new(cfg, 5).unwrap()
}

fn snapshot(w: &SimWorld, f: FlowId) -> String {
    format!(
        "{:?} {:?} {:?} {:?} {}",
        w.effective_queue_config(),
        w.flow_aqm(f).unwrap(),
        w.fec(f).unwrap(),
        w.service_class(f).unwrap(),
        w.buffer_delta(f).unwrap()
    )
}

#[test]
fn apply_then_stop_restores_the_configuration() {
    for action in ActionId::catalog() {
        let mut w = world(512.0, 1);
        let f = FlowId(0);
        w.advance(1_000.0);
        let before = snapshot(&w, f);
        apply_action(&mut w, f, &action).unwrap();
        assert_ne!(snapshot(&w, f), before, "{action}");
        w.advance(3_000.0);
        stop_action(&mut w, f, action.kind()).unwrap();
        assert_eq!(snapshot(&w, f), before, "{action}");
    }
}

#[test]
fn releasing_a_reservation_admits_a_refused_call() {
    let probe = world(10_000.0, 1);
    let need = guaranteed_reservation_kbps(&probe, FlowId(0)).unwrap();
    let mut w = world(need * 1.5, 2);
    apply_action(&mut w, FlowId(0), &ActionId::GuaranteedLoad).unwrap();
    let refused = apply_action(&mut w, FlowId(1), &ActionId::GuaranteedLoad);
    assert!(matches!(refused, Err(ActionError::Infeasible { .. })), "{refused:?}");
    assert_eq!(w.service_class(FlowId(1)).unwrap(), ServiceClass::BestEffort);
    stop_action(&mut w, FlowId(0), ActionKind::GuaranteedLoad).unwrap();
    apply_action(&mut w, FlowId(1), &ActionId::GuaranteedLoad).unwrap();
    assert!(matches!(w.service_class(FlowId(1)).unwrap(), ServiceClass::Guaranteed { .. }));
}
