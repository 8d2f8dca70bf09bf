use std::collections::HashSet;

use proptest::prelude::*;
use tactile_core::dataset::*;
use tactile_core::mechanics::Indenter;

#[derive(Clone)]
struct Rec(String);

impl HasEpisode for Rec {
    fn episode_id(&self) -> &str {
        &self.0
    }
}

proptest! {
    #[test]
    fn splits_never_share_episodes(
        episodes in prop::collection::vec(0u8..40, 2..200), frac in 0.05..0.95f64, seed in any::<u64>(),
    ) {
        let records: Vec<Rec> = episodes.iter().map(|e| Rec(format!("e{e}"))).collect();
        prop_assume!(records.iter().map(|r| &r.0).collect::<HashSet<_>>().len() >= 2);
        let (train, test) = split_records(&records, frac, seed).unwrap();
        prop_assert_eq!(train.len() + test.len(), records.len());
        prop_assert!(!train.is_empty() && !test.is_empty());
        let a: HashSet<&str> = train.iter().map(|r| r.0.as_str()).collect();
        prop_assert!(test.iter().all(|r| !a.contains(r.0.as_str())));
    }

    #[test]
    fn planning_is_deterministic(seed in any::<u64>()) {
        let mut c = regime_config(Regime::MultiIndenter, 1, seed, Default::default());
        c.episodes_per_indenter = 3;
        prop_assert_eq!(plan(&c).unwrap(), plan(&c).unwrap());
    }
}

#[test]
fn generated_dataset_validates_and_rederives() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = regime_config(Regime::TransferTrain, 1, 17, dir.path().to_path_buf());
    c.indenters = vec![Indenter::Sphere { radius: 4.0 }];
    c.episodes_per_indenter = 2;
    c.frames_per_episode = 3;
    let ds = generate(&c).unwrap();
    assert_eq!(ds.len(), 3 * 2 * 3);
    let loaded = load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded, ds);
    for r in &loaded.records {
        assert_eq!(&rederive(&loaded.config, r).unwrap(), r);
        assert!(loaded.load_image(r).is_ok());
    }
    let (train, test) = split(&loaded, 0.5, 3).unwrap();
    let ids: HashSet<String> = train.episode_ids().into_iter().collect();
    assert!(test.episode_ids().iter().all(|e| !ids.contains(e)));
}
