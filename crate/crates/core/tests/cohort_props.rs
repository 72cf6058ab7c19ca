use std::collections::BTreeMap;

use dce_kit::cohort::{
    load_manifest, save_manifest, stratified_split, CohortError, Her2, PatientSummary, Split, SplitFractions,
};
use proptest::prelude::*;

const HER2: [Her2; 3] = [Her2::Positive, Her2::Negative, Her2::Unknown];

fn cohort(spec: &[(bool, u8)]) -> Vec<PatientSummary> {
    spec.iter()
        .enumerate()
        .map(|(i, &(m, h))| PatientSummary {
            patient_id: format!("PT{i:04}"),
            has_malignancy: m,
            her2: HER2[usize::from(h % 3)],
        })
        .collect()
}

/// Independent largest-remainder rounding with exact rational quotas.
fn apportion(total: usize, parts: [u32; 3]) -> [usize; 3] {
    let denom: u64 = parts.iter().map(|&p| u64::from(p)).sum();
    let num = parts.map(|p| total as u64 * u64::from(p));
    let mut out = num.map(|n| (n / denom) as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by_key(|&k| (std::cmp::Reverse(num[k] % denom), k));
    let short = total - out.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        out[k] += 1;
    }
    out
}

fn fractions(parts: [u32; 3]) -> SplitFractions {
    let d = f64::from(parts.iter().sum::<u32>());
    SplitFractions {
        train: f64::from(parts[0]) / d,
        val: f64::from(parts[1]) / d,
        test: f64::from(parts[2]) / d,
    }
}

fn parts_strategy() -> impl Strategy<Value = [u32; 3]> {
    prop_oneof![
        Just([70, 15, 15]),
        Just([60, 20, 20]),
        Just([80, 10, 10]),
        Just([50, 25, 25]),
        Just([1, 1, 2]),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn split_is_a_partition_with_apportioned_sizes(
        spec in proptest::collection::vec((any::<bool>(), 0u8..3), 1..80),
        parts in parts_strategy(),
        seed in any::<u64>(),
    ) {
        let patients = cohort(&spec);
        let m = stratified_split(&patients, fractions(parts), seed).unwrap();
        prop_assert_eq!(m.entries.len(), patients.len());
        let mut ids: Vec<&str> = m.entries.iter().map(|e| e.patient_id.as_str()).collect();
        ids.dedup();
        prop_assert_eq!(ids.len(), patients.len());
        let sizes = [m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)];
        prop_assert_eq!(sizes, apportion(patients.len(), parts));

        // every stratum lands within one patient of its proportional share
        let mut strata: BTreeMap<(bool, Her2), [usize; 3]> = BTreeMap::new();
        for e in &m.entries {
            let k = Split::ALL.iter().position(|&s| s == e.split).unwrap();
            strata.entry((e.has_malignancy, e.her2)).or_default()[k] += 1;
        }
        let f = fractions(parts);
        for counts in strata.values() {
            let n = counts.iter().sum::<usize>() as f64;
            for (k, share) in [f.train, f.val, f.test].into_iter().enumerate() {
                prop_assert!((counts[k] as f64 - n * share).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn split_ignores_input_order(
        spec in proptest::collection::vec((any::<bool>(), 0u8..3), 1..40),
        seed in any::<u64>(),
    ) {
        let patients = cohort(&spec);
        let mut reversed = patients.clone();
        reversed.reverse();
        let f = fractions([70, 15, 15]);
        let a = stratified_split(&patients, f, seed).unwrap();
        prop_assert_eq!(&a, &stratified_split(&reversed, f, seed).unwrap());
        prop_assert_eq!(&load_manifest(&save_manifest(&a)).unwrap(), &a);
    }
}

#[test]
fn seeds_change_membership_but_not_sizes() {
    let patients = cohort(&(0..60).map(|i| (i % 3 == 0, (i % 5) as u8)).collect::<Vec<_>>());
    let f = fractions([70, 15, 15]);
    let a = stratified_split(&patients, f, 1).unwrap();
    let b = stratified_split(&patients, f, 2).unwrap();
    assert_ne!(a.entries, b.entries);
    for s in Split::ALL {
        assert_eq!(a.count(s), b.count(s));
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let patients = cohort(&[(true, 0), (false, 1)]);
    let bad = SplitFractions {
        train: 0.5,
        val: 0.5,
        test: 0.5,
    };
    assert!(matches!(stratified_split(&patients, bad, 0), Err(CohortError::DegenerateFractions(_))));
    assert!(matches!(stratified_split(&[], fractions([1, 1, 2]), 0), Err(CohortError::EmptyCohort)));
    let mut dup = patients.clone();
    dup.push(patients[0].clone());
    assert!(matches!(stratified_split(&dup, fractions([1, 1, 2]), 0), Err(CohortError::DuplicatePatient(_))));
}
