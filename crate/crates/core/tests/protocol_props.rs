use std::sync::Arc;

use evauth::channel::{parse_transcript, render_transcript};
use evauth::clock::ManualClock;
use evauth::crypto::{encrypt_block, Block, PrngState, SecretKey, Timestamp};
use evauth::messages::LookupResponse;
use evauth::registry::{NotifyChannel, ReplayPolicy};
use evauth::scenario::{self, RunOptions};
use evauth::terminal::{AuthDecision, LookupDecision};
use evauth::vehicle::{ChallengeOutcome, VehiclePhase};
use evauth::{Registry, Tariff, TerminalAgent, VehicleIdentity, VehicleSession};
use proptest::prelude::*;

fn identity(id: [u8; 16], k_a: [u8; 16], k_g: [u8; 16]) -> VehicleIdentity {
    VehicleIdentity {
        id_a: Block(id),
        k_a: SecretKey(k_a),
        k_g: SecretKey(k_g),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn honest_round_recovers_start_time(
        id in any::<[u8; 16]>(),
        k_a in any::<[u8; 16]>(),
        k_g in any::<[u8; 16]>(),
        v_seed in any::<u64>(),
        t_seed in any::<u64>(),
        t_1 in 0u64..u64::MAX / 2,
        d in 0u64..100_000_000,
    ) {
        let id = identity(id, k_a, k_g);
        let clock = ManualClock::new(Timestamp(t_1));
        let registry = Registry::new();
        registry.register_vehicle(id.id_a, id.k_a, 0, "x", NotifyChannel::Sms).unwrap();
        let mut v = VehicleSession::new(PrngState::from_seed(v_seed), Arc::new(clock.clone()));
        let mut t = TerminalAgent::new(id.k_g, PrngState::from_seed(t_seed), Arc::new(clock.clone()));

        let req = v.begin_auth(&id).unwrap();
        let AuthDecision::Forward(lookup) = t.handle_auth_request(&req).unwrap() else {
            panic!("rejected");
        };
        prop_assert_eq!(lookup.m5, encrypt_block(&id.id_a, &id.k_a));
        let resp = registry.lookup_and_verify(&lookup.m5, &lookup.n_a);
        let LookupDecision::Challenge(ch) = t.handle_lookup_response(&resp).unwrap() else {
            panic!("lookup failed");
        };
        let ChallengeOutcome::Accepted { t_2 } = v.handle_challenge(&id, &ch).unwrap() else {
            panic!("challenge rejected");
        };
        prop_assert_eq!(t_2, Timestamp(t_1));
        clock.advance(d);
        prop_assert_eq!(v.on_energy_stop().unwrap(), d);
        let report = t.on_session_end().unwrap();
        prop_assert_eq!(report.t_end.0 - report.t_start.0, d);
        prop_assert_eq!(report.id_a, id.id_a);
    }

    #[test]
    fn repeated_nonce_is_refused_fresh_one_accepted(
        id in any::<[u8; 16]>(),
        k_a in any::<[u8; 16]>(),
        n1 in any::<[u8; 16]>(),
        n2 in any::<[u8; 16]>(),
    ) {
        prop_assume!(n1 != n2);
        let registry = Registry::new();
        let rec = registry
            .register_vehicle(Block(id), SecretKey(k_a), 0, "x", NotifyChannel::Email)
            .unwrap();
        let (n1, n2) = (n1.into(), n2.into());
        let success = |r| matches!(r, LookupResponse::Success { .. });
        prop_assert!(success(registry.lookup_and_verify(&rec.pseudonym, &n1)));
        prop_assert_eq!(registry.lookup_and_verify(&rec.pseudonym, &n1), LookupResponse::ReplayDetected);
        prop_assert!(success(registry.lookup_and_verify(&rec.pseudonym, &n2)));
        prop_assert_eq!(registry.lookup_and_verify(&rec.pseudonym, &n2), LookupResponse::ReplayDetected);
        prop_assert_eq!(registry.record(&Block(id)).unwrap().last_n_a, Some(n2));
    }

    #[test]
    fn billing_conserves_funded_balances(
        tariff in 0u64..1000,
        durations in proptest::collection::vec(0u64..10_000_000, 1..=20),
        extra in 0u64..1000,
    ) {
        let tariff = Tariff(tariff);
        let owed: u64 = durations.iter().map(|&d| tariff.amount_for(d)).sum();
        let registry = Registry::new();
        let id = Block([7; 16]);
        registry.register_vehicle(id, SecretKey([8; 16]), owed + extra, "x", NotifyChannel::Sms).unwrap();
        let mut t = 1_000u64;
        for &d in &durations {
            let report = evauth::messages::SessionReport { id_a: id, t_start: Timestamp(t), t_end: Timestamp(t + d) };
            let inv = registry.bill_session(&report, tariff).unwrap();
            prop_assert!(!inv.underfunded);
            t += d + 1;
        }
        let billed: u64 = registry.invoices().iter().map(|i| i.amount).sum();
        prop_assert_eq!(billed + registry.record(&id).unwrap().balance, owed + extra);
        prop_assert_eq!(registry.record(&id).unwrap().balance, extra);
    }
}

#[test]
fn wrong_group_key_never_charges() {
    let id = identity([1; 16], [2; 16], [3; 16]);
    let clock = Arc::new(ManualClock::new(Timestamp(5)));
    let mut v = VehicleSession::new(PrngState::from_seed(1), clock.clone());
    let req = v.begin_auth(&id).unwrap();
    let mut t = TerminalAgent::new(SecretKey([4; 16]), PrngState::from_seed(2), clock.clone());
    assert_eq!(t.handle_auth_request(&req).unwrap(), AuthDecision::Rejected);
    assert!(!t.energy_active());
    assert_eq!(*v.phase(), VehiclePhase::AwaitingChallenge { n_a: req.n_a });
}

#[test]
fn registry_files_survive_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let reg_path = dir.path().join("fleet.registry");
    let inv_path = dir.path().join("fleet.invoices");
    let registry = Registry::new().persist_to(&reg_path, Some(inv_path.clone()));
    registry
        .register_vehicle(
            Block([1; 16]),
            SecretKey([2; 16]),
            1000,
            "+90 555 111",
            NotifyChannel::Sms,
        )
        .unwrap();
    let sc = scenario::parse(evauth::suite::bundled("honest").unwrap()).unwrap();
    let out = scenario::run_scenario(
        &sc,
        RunOptions {
            registry: Some(registry),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert!(out.report.passed, "{}", out.report.render_text());

    let reloaded = Registry::load(&reg_path, ReplayPolicy::LastNonce).unwrap();
    let rec = reloaded.record(&Block([1; 16])).unwrap();
    assert_eq!(rec.balance, 992);
    assert!(rec.last_n_a.is_some());
    assert_eq!(rec.owner_contact, "+90 555 111");
    let invoices = std::fs::read_to_string(&inv_path).unwrap();
    assert_eq!(invoices, out.registry.render_invoices());
    assert_eq!(invoices.lines().count(), 1);
}

#[test]
fn transcripts_parse_back() {
    for (name, src) in evauth::suite::BUNDLED {
        let sc = scenario::parse(src).unwrap();
        let out = scenario::run_scenario(&sc, RunOptions::default()).unwrap();
        let text = render_transcript(&out.transcript);
        let parsed = parse_transcript(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(parsed, out.transcript, "{name}");
        for (i, ev) in parsed.iter().enumerate() {
            assert_eq!(ev.seq, i as u64 + 1, "{name}");
        }
    }
}
