//! Registry persistence, versioning and snapshot isolation.

mod common;

use std::sync::Arc;
use std::thread;

use common::{fixture_profile, fixture_registry, fixture_request_line};
use latent_router::anchors::select_anchors;
use latent_router::irt::LatentAbility;
use latent_router::registry::{Registry, RegistryHandle};
use latent_router::service::handle_route_request;
use serde_json::Value;

#[test]
fn save_and_load_round_trip_everything() {
    let mut reg = fixture_registry();
    let items: Vec<_> = reg.space.items.values().cloned().collect();
    reg.add_anchor_set("default", select_anchors(&items, 4, 1e-6).unwrap(), false)
        .unwrap();
    let mut tagged = fixture_profile("tagged", [0.1, 0.2], 3e-4, 0.3, 0.01, 90.0);
    tagged.metadata.anchor_set_id = Some("default".into());
    reg.register_model(tagged, false).unwrap();

    let dir = tempfile::tempdir().unwrap();
    reg.save(dir.path()).unwrap();
    let back = Registry::load(dir.path()).unwrap();
    assert_eq!(back, reg);

    // a loaded registry routes identically
    let line = fixture_request_line("rt");
    let cut = |s: String| s[..s.rfind("\"timestamp\"").unwrap()].to_string();
    assert_eq!(cut(handle_route_request(&reg, &line)), cut(handle_route_request(&back, &line)));
}

#[test]
fn versions_increase_strictly_across_registrations() {
    let handle = RegistryHandle::new(fixture_registry());
    let mut last = handle.snapshot().version;
    for k in 0..50 {
        let p = fixture_profile(&format!("extra-{k:02}"), [0.01 * k as f64, 0.0], 1e-4, 0.1, 0.01, 50.0);
        let v = handle.register_model(p, false).unwrap();
        assert!(v > last);
        last = v;
    }
    assert_eq!(handle.snapshot().profiles.len(), 53);
}

#[test]
fn readers_never_see_a_partial_update() {
    let handle = Arc::new(RegistryHandle::new(fixture_registry()));
    let base_version = handle.snapshot().version;
    let base_models = handle.snapshot().profiles.len() as u64;
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let h = Arc::clone(&handle);
            thread::spawn(move || {
                let mut seen = 0;
                for _ in 0..2000 {
                    let snap = h.snapshot();
                    // every registration bumps the version by exactly one
                    assert_eq!(snap.profiles.len() as u64 - base_models, snap.version - base_version);
                    assert!(snap.version >= seen);
                    seen = snap.version;
                }
            })
        })
        .collect();
    for k in 0..50 {
        handle
            .register_model(fixture_profile(&format!("w-{k:02}"), [0.0, 0.0], 1e-4, 0.1, 0.01, 50.0), false)
            .unwrap();
    }
    for r in readers {
        r.join().unwrap();
    }
}

#[test]
fn dimension_mismatch_is_rejected_with_both_dimensions() {
    let mut reg = fixture_registry();
    let mut p = fixture_profile("wide", [0.0, 0.0], 1e-4, 0.1, 0.01, 50.0);
    p.ability = LatentAbility::new("wide", vec![0.0, 0.0, 0.0]).unwrap();
    let before = reg.clone();
    let err = reg.register_model(p, false).unwrap_err().to_string();
    assert!(err.contains('3') && err.contains('2'), "{err}");
    assert_eq!(reg, before);
}

#[test]
fn failed_update_publishes_nothing() {
    let handle = RegistryHandle::new(fixture_registry());
    let before = handle.snapshot();
    let dup = fixture_profile("big", [0.0, 0.0], 1e-4, 0.1, 0.01, 50.0);
    assert!(handle.register_model(dup, false).is_err());
    assert!(Arc::ptr_eq(&before, &handle.snapshot()));
}

#[test]
fn newly_registered_model_appears_in_routing() {
    let handle = RegistryHandle::new(fixture_registry());
    let line = fixture_request_line("r");
    let models = |resp: &Value| -> Vec<String> {
        let mut m: Vec<String> = resp["estimates"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["model_id"].as_str().unwrap().to_string())
            .collect();
        m.sort();
        m.dedup();
        m
    };
    let before: Value = serde_json::from_str(&handle_route_request(&handle.snapshot(), &line)).unwrap();
    assert_eq!(models(&before), ["big", "fast", "small"]);

    // a free, instant, strong model should take every query
    let star = fixture_profile("star", [3.0, 3.0], 0.0, 0.0, 0.0, 10.0);
    handle.register_model(star, false).unwrap();
    let after: Value = serde_json::from_str(&handle_route_request(&handle.snapshot(), &line)).unwrap();
    assert_eq!(models(&after), ["big", "fast", "small", "star"]);
    assert!(after["choices"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["model_id"] == "star"));
    assert!(after["registry_version"].as_u64() > before["registry_version"].as_u64());
}

#[test]
fn persistent_handle_writes_through() {
    let dir = tempfile::tempdir().unwrap();
    fixture_registry().save(dir.path()).unwrap();
    let handle = RegistryHandle::open(dir.path()).unwrap();
    handle
        .register_model(fixture_profile("late", [0.5, 0.5], 1e-4, 0.1, 0.01, 50.0), false)
        .unwrap();
    let reloaded = Registry::load(dir.path()).unwrap();
    assert!(reloaded.profiles.contains_key("late"));
    assert_eq!(reloaded.version, handle.snapshot().version);
}
