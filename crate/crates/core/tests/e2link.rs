use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use ecoran::config::ExperimentConfig;
use ecoran::e2link::{
    decode_message, encode_message, run_du, serve_du, Applied, DuConfig, Link, Message, PolicySource, RemoteEnv,
    WireFrame, WireSlice,
};
use ecoran::experiment::{run_variant, RunOutputs};
use ecoran::sim::{Scenario, Simulator, TrafficLevel, UeStepStats};
use ecoran::types::{FrameConfig, SleepAction, SliceAllocation, StateObservation, UeObservation};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
        -1e3..1e3f64,
        Just(0.0),
        Just(-0.0),
    ]
}

fn ue_obs() -> impl Strategy<Value = UeObservation> {
    (
        any::<u32>(),
        0u32..8,
        prop::array::uniform17(finite()),
        finite(),
        finite(),
        any::<bool>(),
    )
        .prop_map(|(ue_id, slice_id, features, throughput_mbps, delay_ms, idle)| UeObservation {
            ue_id,
            slice_id,
            features,
            throughput_mbps,
            delay_ms,
            idle,
        })
}

fn observation() -> impl Strategy<Value = StateObservation> {
    (any::<u64>(), prop::collection::vec(ue_obs(), 0..5)).prop_map(|(step_index, ues)| StateObservation { step_index, ues })
}

fn action() -> impl Strategy<Value = SleepAction> {
    (0u32..=20, 0u32..=20).prop_map(|(a, b)| {
        let frame = FrameConfig::default();
        let a = a.min(frame.n_ts());
        let b = b.min(frame.n_ts() - a);
        SleepAction::new(a, b, frame.n_ts() - a - b, &frame).unwrap()
    })
}

fn allocation() -> impl Strategy<Value = SliceAllocation> {
    prop::collection::vec(-20.0..20.0f64, 1..9).prop_map(|l| SliceAllocation::from_logits(&l))
}

fn stats() -> impl Strategy<Value = UeStepStats> {
    (any::<u32>(), any::<u32>(), any::<bool>(), finite(), finite(), any::<[u64; 7]>()).prop_map(
        |(ue_id, slice_id, attached, throughput_mbps, delay_ms, n)| UeStepStats {
            ue_id,
            slice_id,
            attached,
            throughput_mbps,
            delay_ms,
            arrived_bits: n[0],
            served_bits: n[1],
            queued_bits_before: n[2],
            queued_bits_after: n[3],
            prbs: n[4],
            granted_slots: n[5],
            completed_packets: n[6],
        },
    )
}

fn source() -> impl Strategy<Value = PolicySource> {
    prop_oneof![
        Just(PolicySource::Fresh),
        Just(PolicySource::Repeated),
        Just(PolicySource::Fallback)
    ]
}

fn applied() -> impl Strategy<Value = Applied> {
    (action(), allocation(), finite(), source(), prop::collection::vec(stats(), 0..4)).prop_map(
        |(action, allocation, sleep_ratio, source, ues)| Applied {
            action,
            allocation,
            sleep_ratio,
            source,
            ues,
        },
    )
}

fn text() -> impl Strategy<Value = Option<String>> {
    prop::option::of("[ -~\u{e9}\u{4e2d}\"\\\\\n\t]{0,24}")
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (any::<u64>(), any::<u32>(), 0u8..4, 1u32..300, 1u32..50, prop::collection::vec((finite(), finite()), 0..5))
            .prop_map(|(step, version, mu, prb_total, frames_per_step, s)| Message::Hello {
                step,
                version,
                frame: WireFrame {
                    mu,
                    prb_total,
                    frames_per_step,
                },
                slices: s
                    .into_iter()
                    .map(|(q, d)| WireSlice {
                        slice_id: 0,
                        q_target_mbps: q,
                        d_target_ms: d,
                    })
                    .collect(),
            }),
        (any::<u64>(), any::<bool>(), text()).prop_map(|(step, accepted, reason)| Message::Ack { step, accepted, reason }),
        (any::<u64>(), observation(), prop::option::of(applied())).prop_map(|(step, observation, applied)| {
            Message::KpmReport {
                step,
                observation,
                applied,
            }
        }),
        (any::<u64>(), action(), allocation()).prop_map(|(step, action, allocation)| Message::Policy {
            step,
            action,
            allocation,
        }),
        (any::<u64>(), text()).prop_map(|(step, reason)| Message::Bye { step, reason }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn every_message_round_trips(m in message()) {
        let line = encode_message(&m).unwrap();
        prop_assert!(line.ends_with('\n'));
        prop_assert!(!line.trim_end_matches('\n').contains('\n'));
        let back = decode_message(line.as_bytes()).unwrap();
        prop_assert_eq!(&back, &m);
        // Bit equality, including the sign of zero.
        prop_assert_eq!(encode_message(&back).unwrap(), line);
    }

    #[test]
    fn truncated_lines_never_decode_silently(m in message(), cut in 0.0..1.0f64) {
        let line = encode_message(&m).unwrap();
        let body = line.trim_end_matches('\n').as_bytes();
        let at = ((body.len() as f64) * cut) as usize;
        prop_assert!(decode_message(&body[..at]).is_err());
    }
}

const NTS: u32 = 20;

fn scenario() -> Scenario {
    Scenario::standard(2, 4, TrafficLevel::Light)
}

fn du_cfg(steps: u64, timeout_ms: u64, grace: u64) -> DuConfig {
    DuConfig {
        steps,
        policy_timeout: Duration::from_millis(timeout_ms),
        grace_steps: grace,
        record: None,
    }
}

/// Run a DU on a fresh port against a scripted RIC.
fn with_scripted_ric<F>(cfg: DuConfig, ric: F) -> (ecoran::e2link::DuSummary, Vec<(u64, PolicySource, SleepAction)>)
where
    F: FnOnce(Link<TcpStream, TcpStream>) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let client = thread::spawn(move || {
        let stream = TcpStream::connect(addr).unwrap();
        ric(Link::new(stream.try_clone().unwrap(), stream));
    });
    let mut sim = Simulator::new(scenario(), 5).unwrap();
    let mut seen = Vec::new();
    let summary = serve_du(&mut sim, &listener, &cfg, |t, o, s| {
        seen.push((t, s, o.action));
        Ok(())
    })
    .unwrap();
    client.join().unwrap();
    (summary, seen)
}

fn ack(link: &mut Link<TcpStream, TcpStream>) {
    let hello = link.recv().unwrap().unwrap();
    assert_eq!(hello.kind(), "HELLO");
    link.send(&Message::Ack {
        step: 0,
        accepted: true,
        reason: None,
    })
    .unwrap();
}

fn policy(step: u64, a: u32) -> Message {
    Message::Policy {
        step,
        action: SleepAction { a, b: 0, c: NTS - a },
        allocation: SliceAllocation::uniform(2),
    }
}

fn expect_report(link: &mut Link<TcpStream, TcpStream>, t: u64) {
    match link.recv().unwrap() {
        Some(Message::KpmReport { step, .. }) => assert_eq!(step, t),
        other => panic!("expected KPM_REPORT {t}, got {other:?}"),
    }
}

#[test]
fn late_policy_repeats_the_previous_one_and_stale_answers_are_skipped() {
    let (summary, seen) = with_scripted_ric(du_cfg(6, 300, 10), |mut link| {
        ack(&mut link);
        for t in 0..6 {
            if t == 3 {
                continue;
            }
            expect_report(&mut link, t);
            if t == 2 {
                // Miss the deadline, answer anyway, then catch up.
                thread::sleep(Duration::from_millis(450));
                link.send(&policy(2, 9)).unwrap();
                expect_report(&mut link, 3);
                link.send(&policy(3, 3)).unwrap();
                continue;
            }
            link.send(&policy(t, t as u32)).unwrap();
        }
        expect_report(&mut link, 6);
        assert_eq!(link.recv().unwrap().unwrap().kind(), "BYE");
    });
    assert_eq!(summary.steps, 6);
    let sources: Vec<_> = seen.iter().map(|s| s.1).collect();
    use PolicySource::*;
    assert_eq!(sources, vec![Fresh, Fresh, Repeated, Fresh, Fresh, Fresh]);
    // The repeat reuses step 1's policy; the stale step-2 answer never runs.
    assert_eq!(seen[2].2.a, 1);
    assert_eq!(seen[3].2.a, 3);
    assert!(seen.iter().all(|s| s.2.a != 9));
    assert!(!summary.connection_lost);
}

#[test]
fn bye_from_the_ric_ends_the_session() {
    let (summary, seen) = with_scripted_ric(du_cfg(50, 5000, 10), |mut link| {
        ack(&mut link);
        for t in 0..4 {
            expect_report(&mut link, t);
            link.send(&policy(t, 2)).unwrap();
        }
        expect_report(&mut link, 4);
        link.send(&Message::Bye { step: 4, reason: None }).unwrap();
    });
    assert!(summary.ended_by_peer);
    assert_eq!(summary.steps, 4);
    assert_eq!(seen.len(), 4);
}

#[test]
fn lost_ric_repeats_for_the_grace_period_then_falls_back_to_always_on() {
    let (summary, seen) = with_scripted_ric(du_cfg(12, 5000, 3), |mut link| {
        ack(&mut link);
        for t in 0..5 {
            expect_report(&mut link, t);
            link.send(&policy(t, 7)).unwrap();
        }
        // Dropping the link closes the socket.
    });
    assert!(summary.connection_lost);
    assert_eq!((summary.fresh, summary.repeated, summary.fallback), (5, 3, 4));
    assert!(seen[5..8].iter().all(|s| s.1 == PolicySource::Repeated && s.2.a == 7));
    let on = SleepAction::always_on(&FrameConfig::default());
    assert!(seen[8..].iter().all(|s| s.1 == PolicySource::Fallback && s.2 == on));
}

#[test]
fn refused_handshake_is_a_protocol_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let client = thread::spawn(move || {
        let other = Scenario::standard(3, 4, TrafficLevel::Light);
        RemoteEnv::connect(addr, Some((&other.frame, &other.slices)), None).unwrap_err()
    });
    let mut sim = Simulator::new(scenario(), 5).unwrap();
    let du = serve_du(&mut sim, &listener, &du_cfg(5, 5000, 1), |_, _, _| Ok(())).unwrap_err();
    let ric = client.join().unwrap();
    assert!(du.to_string().contains("refused"), "{du}");
    assert!(ric.to_string().contains("does not match"), "{ric}");
}

fn short_cfg(steps: u64) -> ExperimentConfig {
    ExperimentConfig::from_overrides(&[
        format!("train.total_timesteps={steps}"),
        "train.horizon=64".into(),
        "train.minibatch=16".into(),
        "scenario.num_ues=4".into(),
        "agent.d=16".into(),
        "agent.ffn_hidden=32".into(),
        "agent.hidden=32".into(),
    ])
    .unwrap()
}

#[test]
fn training_over_tcp_matches_training_in_process() {
    let steps = 300;
    let cfg = short_cfg(steps);
    let sc = cfg.scenario().unwrap();

    let mut sim = Simulator::new(sc.clone(), cfg.seed).unwrap();
    let local = run_variant(&mut sim, &cfg, &sc, cfg.variant, cfg.seed, &RunOutputs::default()).unwrap();

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let du_scenario = sc.clone();
    let seed = cfg.seed;
    let du = thread::spawn(move || {
        let mut sim = Simulator::new(du_scenario, seed).unwrap();
        serve_du(&mut sim, &listener, &du_cfg(steps, 30_000, 1), |_, _, _| Ok(())).unwrap()
    });
    let mut env = RemoteEnv::connect(addr, Some((&sc.frame, &sc.slices)), None).unwrap();
    let remote = run_variant(&mut env, &cfg, &sc, cfg.variant, cfg.seed, &RunOutputs::default()).unwrap();
    env.close().unwrap();
    let summary = du.join().unwrap();

    assert_eq!(summary.fresh, steps);
    assert_eq!(local.records.len(), remote.records.len());
    for (a, b) in local.records.iter().zip(&remote.records) {
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }
    let (la, ra) = (local.agent.unwrap(), remote.agent.unwrap());
    for ((_, p), (_, q)) in la.store().iter().zip(ra.store().iter()) {
        assert_eq!(p.value, q.value);
    }
}

#[test]
fn in_memory_link_runs_a_full_session() {
    // DU and RIC joined by socket pair threads, no listener helper.
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let ric = thread::spawn(move || {
        let mut env = RemoteEnv::connect(addr, None, None).unwrap();
        let mut c = ecoran::baselines::StaticPolicy {
            action: SleepAction { a: 4, b: 0, c: 16 },
            allocation: SliceAllocation::uniform(2),
        };
        ecoran::e2link::run_ric(&mut c, &mut env).unwrap()
    });
    let (stream, _) = listener.accept().unwrap();
    let mut link = Link::new(stream.try_clone().unwrap(), stream);
    let mut sim = Simulator::new(scenario(), 9).unwrap();
    let s = run_du(&mut sim, &mut link, &du_cfg(25, 5000, 1), |_, o, _| {
        assert_eq!(o.action.a, 4);
        Ok(())
    })
    .unwrap();
    assert_eq!(ric.join().unwrap(), 25);
    assert_eq!(s.fresh, 25);
}
