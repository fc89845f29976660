mod common;

use proptest::prelude::*;

use poisoncert::cli::RunConfig;
use poisoncert::data::make_halfmoons;
use poisoncert::interval::{dual_bound, propagate, Mode};
use poisoncert::solve::{assignment_value, ObjectiveSpec};
use poisoncert::threat::{validate, PoisonAssignment, SampleState, ThreatModel};
use poisoncert::train::{replay, Loss, Params, TrainConfig};

fn flips(ds: &poisoncert::data::Dataset, picks: &[bool], budget: usize) -> PoisonAssignment {
    let mut a = PoisonAssignment::all_clean(ds.n_train());
    for (i, _) in picks.iter().enumerate().filter(|(_, p)| **p).take(budget) {
        let s = &ds.train[i];
        a.set(i, SampleState::poisoned(s.features.clone(), 1.0 - s.label));
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attacks_stay_inside_the_root_bounds(
        seed in 0u64..1000,
        budget in 0usize..4,
        picks in proptest::collection::vec(any::<bool>(), 10),
        lr in 0.05f64..0.8,
        hidden in any::<bool>(),
        aux in any::<bool>(),
    ) {
        let ds = make_halfmoons(10, 6, 0.2, seed).unwrap().with_schedule(5, 2).unwrap();
        let init = if hidden { Params::seeded(&[2, 3, 1], seed).unwrap() } else { Params::seeded(&[2, 1], seed).unwrap() };
        let cfg = TrainConfig::new(lr, Loss::Hinge, init);
        let tm = ThreatModel::label_flip(budget);
        let mode = if aux { Mode::Auxiliary } else { Mode::Direct };
        let a = flips(&ds, &picks, budget);
        prop_assert!(validate(&tm, &a, &ds).is_ok());

        let bs = propagate(&cfg, &ds, &tm, &PoisonAssignment::all_undecided(10), mode).unwrap();
        let inputs: Vec<Vec<f64>> = ds.test.iter().map(|s| s.features.clone()).collect();
        let tr = replay(&cfg, &ds, &a).unwrap();
        prop_assert!(bs.find_escape(&tr, &inputs).is_none());
        for o in [ObjectiveSpec::test_error(), ObjectiveSpec::dos()] {
            let v = assignment_value(&cfg, &ds, &o, &a).unwrap();
            prop_assert!(v <= dual_bound(&bs, &o, &ds).unwrap() + 1e-9);
        }
    }

    #[test]
    fn config_survives_a_toml_round_trip(budget in 0usize..20, lr in 1e-3f64..1.0, epochs in 1usize..8) {
        let text = std::fs::read_to_string(common::configs_dir().join("halfmoons.toml")).unwrap();
        let mut cfg = RunConfig::from_toml(&text).unwrap();
        cfg.threat.budget = budget;
        cfg.train.lr = lr;
        cfg.dataset.epochs = epochs;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
