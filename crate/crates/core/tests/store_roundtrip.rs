mod common;

use common::{param_tensors, plan_from};
use expflip::attacks::{apply_plan, revert_plan};
use expflip::bits::Role;
use expflip::nn::Model;
use expflip::store;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn save_load_is_bitwise(seed in 0u64..1000, specials in proptest::collection::vec((0usize..8, 0usize..60_000, any::<u32>()), 0..20)) {
        let mut m = Model::cnn50k(seed);
        let tensors = param_tensors(&m);
        for (t, off, pattern) in specials {
            let (li, role, len) = tensors[t];
            m.param_mut(li, role).unwrap().data_mut()[off % len] = f32::from_bits(pattern);
        }
        let bytes = store::to_bytes(&m);
        let back = store::from_bytes(&bytes, "<mem>").unwrap();
        prop_assert!(back.bits_eq(&m));
        prop_assert_eq!(store::to_bytes(&back), bytes);
    }

    #[test]
    fn applying_a_plan_changes_exactly_its_bits(seed in 0u64..100, picks in proptest::collection::vec((0usize..8, 0usize..60_000, 0u8..32), 1..160)) {
        let pristine = Model::cnn50k(seed);
        let plan = plan_from(&pristine, &picks);
        let mut m = pristine.clone();
        apply_plan(&mut m, &plan).unwrap();
        let a = store::to_bytes(&pristine);
        let b = store::to_bytes(&m);
        prop_assert_eq!(store::payload_hamming(&a, &b).unwrap(), plan.len() as u64);
        revert_plan(&mut m, &plan).unwrap();
        prop_assert!(m.bits_eq(&pristine));
    }
}

#[test]
fn special_values_survive_a_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ibsm");
    let mut m = Model::cnn50k(4);
    let fc1 = m.layer_index("fc1").unwrap();
    let w = m.param_mut(fc1, Role::Weight).unwrap().data_mut();
    w[0] = -0.0;
    w[1] = f32::INFINITY;
    w[2] = f32::from_bits(0x7FC0_1234);
    w[3] = f32::from_bits(1);
    store::save(&m, &path).unwrap();
    let back = store::load(&path).unwrap();
    assert!(back.bits_eq(&m));
    let w = back.param(fc1, Role::Weight).unwrap().data();
    assert_eq!(w[0].to_bits(), 0x8000_0000);
    assert_eq!(w[2].to_bits(), 0x7FC0_1234);
}
