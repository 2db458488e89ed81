mod support;

use hwforge_core::patcher::parse_patch;
use hwforge_core::{CodeLevel, Error};
use proptest::prelude::*;
use support::patch_gen::{check_pair, fenced_with, source_and_patch};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pseudo_patches_are_idempotent_local_and_round_trip((src, block) in source_and_patch(CodeLevel::Pseudo)) {
        check_pair(&src, &block)?;
    }

    #[test]
    fn script_patches_are_idempotent_local_and_round_trip((src, block) in source_and_patch(CodeLevel::Script)) {
        check_pair(&src, &block)?;
    }

    #[test]
    fn synth_patches_are_idempotent_local_and_round_trip((src, block) in source_and_patch(CodeLevel::Synth)) {
        check_pair(&src, &block)?;
    }
}

proptest! {
    #[test]
    fn any_fence_length_but_twenty_is_rejected(len in 1usize..64) {
        prop_assume!(len != 20);
        let r = parse_patch(&fenced_with(len, "Foo", "def Foo():\n    pass\n"));
        prop_assert!(matches!(r, Err(Error::NoFenceFound)), "{:?}", r);
    }
}

#[test]
fn fences_of_nineteen_and_twenty_one_are_rejected() {
    for len in [19, 21] {
        let err = parse_patch(&fenced_with(len, "Foo", "def Foo():\n    pass\n")).unwrap_err();
        assert_eq!(err.code(), "NO_FENCE_FOUND", "length {len}");
    }
    assert!(parse_patch(&fenced_with(20, "Foo", "def Foo():\n    pass\n")).is_ok());
}
