use ptfsr_core::data::synth_corpus;
use ptfsr_core::protocol::{run_ptf, Direction, ProtocolConfig};
use ptfsr_core::wire::WireMessage;

#[test]
fn logged_frames_reencode_to_the_counters() {
    let corpus = synth_corpus(50, 20, 4).unwrap().corpus;
    let cfg = ProtocolConfig {
        seed: 4,
        global_rounds: 3,
        subround_size: 16,
        eval_k: 5,
        ..ProtocolConfig::default()
    };
    let out = run_ptf(&corpus, &cfg).unwrap();
    let (mut up, mut down) = (0u64, 0u64);
    for e in out.ledger.entries() {
        let frame = e.frame.as_ref().expect("ptf ledger keeps frames");
        let msg = WireMessage::decode(frame).unwrap();
        let again = msg.encode().unwrap();
        assert_eq!(&again, frame);
        assert_eq!(again.len(), e.bytes);
        match (&msg, e.direction) {
            (WireMessage::Upload(m), Direction::Up) => {
                assert_eq!((m.user, m.round), (e.user, e.round));
                assert_eq!(e.bytes, 12 + 4 * m.items.len());
                up += e.bytes as u64;
            }
            (WireMessage::Download(m), Direction::Down) => {
                assert_eq!((m.user, m.round), (e.user, e.round));
                down += e.bytes as u64;
            }
            _ => panic!("frame direction mismatch for user {}", e.user),
        }
    }
    assert_eq!(up, out.ledger.total(Direction::Up));
    assert_eq!(down, out.ledger.total(Direction::Down));
    assert_eq!(up, out.reports.iter().map(|r| r.bytes_up).sum::<u64>());
    assert_eq!(down, out.reports.iter().map(|r| r.bytes_down).sum::<u64>());
    for r in &out.reports {
        assert_eq!(r.bytes_up, out.ledger.round_bytes(r.round, Direction::Up));
    }
}

#[test]
fn upload_bytes_depend_only_on_sequence_lengths() {
    let corpus = synth_corpus(40, 20, 8).unwrap().corpus;
    let base = ProtocolConfig {
        global_rounds: 2,
        subround_size: 40,
        eval_k: 5,
        ..ProtocolConfig::default()
    };
    let bytes = |cfg: &ProtocolConfig| -> Vec<usize> {
        run_ptf(&corpus, cfg)
            .unwrap()
            .ledger
            .entries()
            .iter()
            .filter(|e| e.direction == Direction::Up)
            .map(|e| e.bytes)
            .collect()
    };
    let reference = bytes(&base);
    // Privacy knobs change which items are sent, never how many.
    for cfg in [
        ProtocolConfig {
            beta: 1.0,
            ..base.clone()
        },
        ProtocolConfig {
            epsilon: 5.0,
            ..base.clone()
        },
        ProtocolConfig {
            lambda_pc: 0.0,
            lambda_is: 0.0,
            ..base.clone()
        },
    ] {
        assert_eq!(bytes(&cfg), reference);
    }
}
