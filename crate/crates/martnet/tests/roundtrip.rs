use proptest::prelude::*;

use martnet::config::RunConfig;
use martnet::formats::{decode_checkpoint, decode_paths, encode_checkpoint, encode_paths, CheckpointHeader};
use martnet_core::networks::{init_networks, Architecture};
use martnet_core::problems::{make_problem, Preset};
use martnet_core::sde::{build_start_set, simulate_paths, TimeGrid};

fn preset(k: usize) -> Preset {
    Preset::ALL[k % Preset::ALL.len()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn resolved_configs_round_trip(
        k in 0usize..8,
        d in 1usize..12,
        n in 1usize..100,
        m in 256usize..4096,
        lr in 1e-5f64..1.0,
        x0 in -2.0f64..2.0,
        seed in 0u64..u64::MAX,
    ) {
        let text = format!(
            "problem = {}\nd = {d}\nN = {n}\nM = {m}\nbatch = 256\nlr_primal = {lr:?}\nx0 = {x0:?}\nseed_init = {seed}\n",
            preset(k).name()
        );
        let cfg = RunConfig::parse(&text).unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), cfg.to_text());
        prop_assert_eq!(cfg.x0, vec![x0; d]);
    }

    #[test]
    fn path_caches_round_trip_and_reject_truncation(
        k in 0usize..8,
        d in 1usize..5,
        steps in 1usize..6,
        paths in 1usize..12,
        seed in 0u64..1000,
        cut in 0.0f64..1.0,
    ) {
        let p = make_problem(preset(k), d, &[]).unwrap();
        let grid = TimeGrid::uniform(p.horizon, steps).unwrap();
        let start = build_start_set(&p.start, d, 4, seed).unwrap();
        let batch = simulate_paths(&p, &grid, &start, paths, seed).unwrap();
        let bytes = encode_paths(&batch);
        prop_assert_eq!(decode_paths(&bytes).unwrap(), batch);
        let at = (cut * bytes.len() as f64) as usize;
        prop_assert!(decode_paths(&bytes[..at]).is_err());
    }

    #[test]
    fn checkpoints_round_trip(k in 0usize..8, d in 1usize..6, width in 1usize..9, depth in 0usize..4, r in 1usize..9) {
        let p = make_problem(preset(k), d, &[]).unwrap();
        let arch = Architecture { width, depth, ..Architecture::standard(d, p.control_dim(), r) };
        let nets = init_networks(&arch, p.terminal, p.horizon, p.control.clone(), 7).unwrap();
        let header = CheckpointHeader { problem_code: p.preset.map_or(0, |q| q.code()), arch, seed: 7, horizon: p.horizon };
        let bytes = encode_checkpoint(&nets, &header);
        let (back, h) = decode_checkpoint(&bytes, &p).unwrap();
        prop_assert_eq!(h, header);
        prop_assert_eq!(back.value.params.data, nets.value.params.data);
        prop_assert_eq!(back.test.params.data, nets.test.params.data);
        prop_assert_eq!(back.control.map(|c| c.params.data), nets.control.map(|c| c.params.data));
    }
}
