use fade::cli::{ExperimentConfig, MaskMode, OUTPUT_ROOT_ENV};
use proptest::prelude::*;

fn mode(i: u8) -> MaskMode {
    [MaskMode::None, MaskMode::PerWeight, MaskMode::PerBlock][i as usize % 3]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parse_serialize_parse_is_identity(
        lr in 1e-6f64..1e-1,
        steps in 1usize..5000,
        q in 0.0f64..=1.0,
        m in 0u8..3,
        rank in 1usize..16,
        dropout in 0.0f32..0.9,
        seed in 0..=i64::MAX as u64,
        over in prop::sample::select(vec!["circle", "triangle", "cross"]),
    ) {
        let mut c = ExperimentConfig::default();
        c.unlearn.learning_rate = lr;
        c.unlearn.max_steps = steps;
        c.unlearn.seed = seed;
        c.mask.mode = mode(m);
        c.mask.q = Some(q);
        c.adapter.rank = rank;
        c.adapter.dropout = dropout;
        c.overwrite = over.to_string();
        c.validate().unwrap();
        let text = c.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_toml_string().unwrap(), text);
        prop_assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }
}

#[test]
fn environment_overrides_the_output_directory() {
    let c = ExperimentConfig::default();
    std::env::remove_var(OUTPUT_ROOT_ENV);
    assert_eq!(c.output_root(), c.output_dir);
    std::env::set_var(OUTPUT_ROOT_ENV, "/tmp/elsewhere");
    assert_eq!(c.output_root(), std::path::PathBuf::from("/tmp/elsewhere"));
    std::env::remove_var(OUTPUT_ROOT_ENV);
}
