use aerovis::vision::Frame;
use aerovis_gateway::*;
use proptest::prelude::*;
use serde_json::{json, Value};

fn json_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::from),
        any::<i64>().prop_map(Value::from),
        (-10.0f64..10.0).prop_map(Value::from),
        "[a-z ]{0,12}".prop_map(Value::from),
        prop_oneof![Just("up"), Just("left"), Just("sideways"), Just("enabled"), Just("command")]
            .prop_map(Value::from),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 0..4).prop_map(Value::from),
            proptest::collection::btree_map(
                prop_oneof![Just("type"), Just("id"), Just("name"), Just("params"), Just("direction"),
                            Just("speed"), Just("enabled")].prop_map(String::from),
                inner,
                0..5
            )
            .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn frame_message_round_trips(w in 0u16..64, h in 0u16..64, seq in any::<u32>(), seed in any::<u8>()) {
        let rgb: Vec<u8> = (0..usize::from(w) * usize::from(h) * 3).map(|i| (i as u8).wrapping_mul(seed)).collect();
        let frame = Frame::new(u32::from(w), u32::from(h), rgb).unwrap();
        let msg = FrameMessage::from_frame(&frame, seq).unwrap();
        let bytes = msg.encode();
        prop_assert_eq!(bytes.len(), 8 + usize::from(w) * usize::from(h) * 3);
        let back = FrameMessage::decode(&bytes).unwrap();
        prop_assert_eq!(back.seq, seq);
        prop_assert_eq!(back.into_frame(), frame);
    }

    #[test]
    fn frame_decode_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        if let Ok(msg) = FrameMessage::decode(&bytes) {
            prop_assert_eq!(msg.rgb.len(), usize::from(msg.width) * usize::from(msg.height) * 3);
            prop_assert_eq!(msg.encode(), bytes);
        }
    }

    /// Any text gets exactly one verdict; errors echo the id when there is one.
    #[test]
    fn command_parsing_is_total(v in json_value(), raw in ".{0,40}") {
        for text in [v.to_string(), raw] {
            match parse_command(&text) {
                Ok((id, _)) => prop_assert!(!id.is_null()),
                Err(WsEnvelope::Error { id, .. }) => {
                    let sent_id = serde_json::from_str::<Value>(&text).ok()
                        .and_then(|v| v.get("id").cloned())
                        .unwrap_or(Value::Null);
                    prop_assert_eq!(id, sent_id);
                }
                Err(other) => prop_assert!(false, "non-error verdict {:?}", other),
            }
        }
    }

    #[test]
    fn envelopes_round_trip_through_json(id in any::<i64>(), msg in ".{0,30}", battery in 0u32..=100) {
        let cases = [
            WsEnvelope::ack(json!(id)),
            WsEnvelope::error(json!(id.to_string()), msg.clone()),
            WsEnvelope::Command { id: json!(id), name: msg.clone(), params: json!({"speed": 0.5}) },
            WsEnvelope::Telemetry(TelemetryMessage { battery_percent: battery, state: msg.clone(), ..Default::default() }),
            WsEnvelope::Track(TrackMessage {
                seq: battery,
                tracking: true,
                action: Some("left".into()),
                target: Some(BoxMessage { x: 0.1, y: 0.2, w: 0.3, h: 0.4 }),
            }),
        ];
        for env in cases {
            let back: WsEnvelope = serde_json::from_str(&env.to_json()).unwrap();
            prop_assert_eq!(back, env);
        }
    }
}

#[test]
fn move_speed_bounds_are_inclusive() {
    for speed in [0.0, 1.0] {
        let cmd = GatewayCommand::parse("move", &json!({"direction": "down", "speed": speed})).unwrap();
        assert!(matches!(cmd, GatewayCommand::Move { speed: s, .. } if s == speed));
    }
}
