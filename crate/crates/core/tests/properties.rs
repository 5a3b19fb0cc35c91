//! Allocation and persistence invariants over random importance tables.

use neuralloc::allocation::{allocate, general_count, AllocationConfig, Role, Variant};
use neuralloc::data::PairId;
use neuralloc::importance::{Criterion, ImportanceTable};
use neuralloc::mask::{build_mask_set_for, NeuronRegistry, Side, Site, SiteKey};
use neuralloc::persist;
use proptest::prelude::*;

fn registry() -> NeuronRegistry {
    NeuronRegistry::from_groups(vec![
        (SiteKey { side: Side::Encoder, layer: 1, site: Site::SelfAttnOut }, 3),
        (SiteKey { side: Side::Encoder, layer: 1, site: Site::FfnInner }, 5),
        (SiteKey { side: Side::Decoder, layer: 1, site: Site::CrossAttnOut }, 4),
    ])
    .unwrap()
}

fn pairs() -> Vec<PairId> {
    ["de2en", "fr2en", "en2de"].iter().map(|p| p.parse().unwrap()).collect()
}

/// Scores drawn from a small grid so that ties are common.
fn tables() -> impl Strategy<Value = ImportanceTable> {
    proptest::collection::vec(proptest::collection::vec(0u8..5, 12), 3).prop_map(|rows| {
        let scores = rows.into_iter().map(|r| r.into_iter().map(|v| v as f64 * 0.25).collect()).collect();
        ImportanceTable::from_scores(Criterion::Te, pairs(), registry(), scores, vec![10, 10, 10]).unwrap()
    })
}

fn variants() -> impl Strategy<Value = Variant> {
    prop_oneof![
        Just(Variant::Pair),
        Just(Variant::SourceSpecific),
        Just(Variant::TargetSpecific),
        Just(Variant::SeparateEncDec)
    ]
}

proptest! {
    #[test]
    fn allocation_invariants(table in tables(), rho in 0.0f64..=1.0, k in 0.0f64..=1.0, variant in variants()) {
        let (plan, _) = allocate(&table, &AllocationConfig { rho, k, variant }).unwrap();
        for g in plan.registry().groups() {
            let general = plan.roles()[g.offset..g.offset + g.width].iter().filter(|r| **r == Role::General).count();
            prop_assert_eq!(general, general_count(rho, g.width));
        }
        for role in plan.roles() {
            if let Role::Specific(set) = role {
                prop_assert!(!set.is_empty());
            }
        }
        let masks = build_mask_set_for(&plan).unwrap();
        for (i, role) in plan.roles().iter().enumerate() {
            for (m, mask) in masks.masks.iter().enumerate() {
                let expected = match role {
                    Role::General => true,
                    Role::Specific(set) => set.contains(&m),
                };
                prop_assert_eq!(mask.is_active(i), expected);
            }
        }
    }

    #[test]
    fn allocation_is_deterministic(table in tables(), rho in 0.0f64..=1.0, k in 0.0f64..=1.0) {
        let cfg = AllocationConfig { rho, k, variant: Variant::Pair };
        prop_assert_eq!(allocate(&table, &cfg).unwrap().0, allocate(&table, &cfg).unwrap().0);
    }

    #[test]
    fn text_formats_round_trip(table in tables(), rho in 0.0f64..=1.0, k in 0.0f64..=1.0, variant in variants()) {
        let text = persist::render_table(&table);
        prop_assert_eq!(&persist::parse_table(&text).unwrap(), &table);
        let (plan, _) = allocate(&table, &AllocationConfig { rho, k, variant }).unwrap();
        let text = persist::render_plan(&plan);
        let parsed = persist::parse_plan(&text).unwrap();
        prop_assert_eq!(parsed.fingerprint(), plan.fingerprint());
        prop_assert_eq!(&parsed, &plan);
        let masks = build_mask_set_for(&plan).unwrap();
        prop_assert_eq!(persist::parse_masks(&persist::render_masks(&masks)).unwrap(), masks);
    }
}
