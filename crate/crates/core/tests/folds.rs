use chickface::dataset::{assign_folds, ChickRecord, Gender};
use proptest::prelude::*;
use std::collections::BTreeSet;

fn ids(female: usize, male: usize) -> Vec<ChickRecord> {
    (0..female)
        .map(|i| ChickRecord { chick_id: format!("F{i:03}"), gender: Gender::Female })
        .chain((0..male).map(|i| ChickRecord { chick_id: format!("M{i:03}"), gender: Gender::Male }))
        .collect()
}

#[test]
fn five_folds_of_184_female_and_169_male_ids() {
    let chicks = ids(184, 169);
    for seed in [0, 1, 99] {
        let plan = assign_folds(&chicks, 5, seed).unwrap();
        assert_eq!(plan.gender_counts(&chicks), vec![(37, 34), (37, 34), (37, 34), (37, 34), (36, 33)]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_id_in_exactly_one_balanced_fold(
        raw in prop::collection::btree_set("[a-z]{1,6}", 10..120),
        male_bits in any::<u128>(),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let chicks: Vec<ChickRecord> = raw
            .iter()
            .enumerate()
            .map(|(i, id)| ChickRecord {
                chick_id: id.clone(),
                gender: if (male_bits >> (i % 128)) & 1 == 1 { Gender::Male } else { Gender::Female },
            })
            .collect();
        let females = chicks.iter().filter(|c| c.gender == Gender::Female).count();
        let males = chicks.len() - females;
        let plan = assign_folds(&chicks, k, seed);
        if females < k || males < k {
            prop_assert!(plan.is_err());
            return Ok(());
        }
        let plan = plan.unwrap();
        prop_assert_eq!(plan.assignment.len(), chicks.len());
        let mut seen = BTreeSet::new();
        for f in 0..k {
            for id in plan.ids_in(f) {
                prop_assert!(seen.insert(id.to_string()));
            }
        }
        prop_assert_eq!(seen.len(), chicks.len());
        let counts = plan.gender_counts(&chicks);
        let spread = |v: Vec<usize>| v.iter().max().unwrap() - v.iter().min().unwrap();
        prop_assert!(spread(counts.iter().map(|c| c.0).collect()) <= 1);
        prop_assert!(spread(counts.iter().map(|c| c.1).collect()) <= 1);
        // reordering the input does not change the plan
        let mut rev = chicks.clone();
        rev.reverse();
        prop_assert_eq!(assign_folds(&rev, k, seed).unwrap(), plan);
    }
}
